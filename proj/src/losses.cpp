#include "cmitune/losses.hpp"

#include <cmath>

namespace cmitune {

void LossWeights::validate() const {
  if (gamma < 0) throw ConfigError("loss weights: gamma must be >= 0");
  if (alpha < 0 || alpha > 1) throw ConfigError("loss weights: alpha must lie in [0, 1]");
  if (temperature < 1) throw ConfigError("loss weights: temperature must be >= 1");
}

namespace {

// -log P(label) from a 1 x C logits row, via an indicator product so the
// gradient flows through softmax+log.
Tensor nll_from_logits_row(const Tensor& logits, int label) {
  const int64_t c = logits.cols();
  if (label < 0 || label >= c) {
    throw InputError("loss: label " + std::to_string(label) + " out of range [0," + std::to_string(c) + ")");
  }
  std::vector<double> onehot(static_cast<size_t>(c), 0.0);
  onehot[static_cast<size_t>(label)] = 1.0;
  Tensor indicator = Tensor::from_data({1, c}, std::move(onehot));
  Tensor log_probs = log_clamped(softmax_lastdim(logits));
  return scale(sum(mul(log_probs, indicator)), -1.0);
}

Tensor log_constant_row(std::span<const double> dist) {
  std::vector<double> lg(dist.size());
  for (size_t i = 0; i < dist.size(); ++i) lg[i] = std::log(std::max(dist[i], kLogEps));
  return Tensor::from_data({1, static_cast<int64_t>(dist.size())}, std::move(lg));
}

// KL(f || G) with constant G: sum f (log f - log G); gradient flows through f.
Tensor kl_to_constant(const Tensor& f, const Tensor& log_g_const) {
  return sum(mul(f, add(log_clamped(f), scale(log_g_const, -1.0))));
}

}  // namespace

BatchLossParts build_batch_loss(std::span<const Sample> batch, const ModelParams& params,
                                const CentroidSet* centroids, CmiSign sign, double lambda,
                                double gamma, CmiMode mode, double clip_nats) {
  if (batch.empty()) throw InputError("loss: empty batch");
  if (sign != CmiSign::off) {
    if (centroids == nullptr) throw ConfigError("loss: CMI term requested without centroids");
    if (lambda <= 0) throw ConfigError("loss: CMI term requested with lambda <= 0");
  }
  const int num_classes = params.config.num_classes;

  // Constant per-class log-centroid rows, shared across the batch.
  std::vector<Tensor> log_g;
  if (sign != CmiSign::off) {
    for (int y = 0; y < centroids->num_classes; ++y) {
      log_g.push_back(log_constant_row(centroids->g[static_cast<size_t>(y)]));
    }
  }

  BatchLossParts parts;
  Tensor cls_total;
  Tensor lm_total;
  // Per-sample KL terms grouped by label for the eq11 normalization.
  std::vector<std::vector<Tensor>> kl_by_label(static_cast<size_t>(num_classes));

  for (const Sample& s : batch) {
    if (s.label < 0 || s.label >= num_classes) {
      throw InputError("loss: label " + std::to_string(s.label) + " out of range");
    }
    Tensor x_l = encode_sequence(s.tokens, params);
    Tensor pooled = slice(x_l, 0, pooled_index(s.tokens, params.config), 1);
    Tensor logits = classify_logits_from_feature(pooled, params);
    Tensor nll = nll_from_logits_row(logits, s.label);
    cls_total = cls_total.defined() ? add(cls_total, nll) : nll;

    if (gamma > 0) {
      Tensor term = scale(sequence_log_prob(s.tokens, params), -1.0);
      lm_total = lm_total.defined() ? add(lm_total, term) : term;
    }

    Tensor f = softmax_lastdim(pooled);
    parts.fx.push_back(std::vector<double>(f.data().begin(), f.data().end()));
    if (sign != CmiSign::off) {
      if (s.label >= centroids->num_classes || centroids->g[static_cast<size_t>(s.label)].empty()) {
        throw ConfigError("loss: missing centroid for label " + std::to_string(s.label));
      }
      Tensor kl = kl_to_constant(f, log_g[static_cast<size_t>(s.label)]);
      if (sign == CmiSign::max && kl.value() > clip_nats) {
        // safeguard: freeze the clipped contribution as a constant
        kl = Tensor::scalar(clip_nats);
        ++parts.clip_events;
      }
      kl_by_label[static_cast<size_t>(s.label)].push_back(kl);
    }
  }

  parts.cls_value = cls_total.value();
  Tensor total = cls_total;
  if (gamma > 0) {
    parts.lm_value = lm_total.value();
    total = add(total, scale(lm_total, gamma));
  }

  if (sign != CmiSign::off) {
    Tensor cmi_term;
    const double inv_c = 1.0 / static_cast<double>(centroids->num_classes);
    if (mode == CmiMode::eq12_literal) {
      Tensor acc;
      for (const auto& terms : kl_by_label) {
        for (const Tensor& t : terms) acc = acc.defined() ? add(acc, t) : t;
      }
      cmi_term = scale(acc, inv_c);
    } else {
      Tensor acc;
      for (const auto& terms : kl_by_label) {
        if (terms.empty()) continue;  // class absent from this batch
        Tensor label_sum;
        for (const Tensor& t : terms) label_sum = label_sum.defined() ? add(label_sum, t) : t;
        Tensor label_mean = scale(label_sum, 1.0 / static_cast<double>(terms.size()));
        acc = acc.defined() ? add(acc, label_mean) : label_mean;
      }
      cmi_term = scale(acc, inv_c);
    }
    parts.cmi_value = cmi_term.value();
    total = add(total, scale(cmi_term, sign == CmiSign::min ? lambda : -lambda));
  }

  parts.total = total;
  return parts;
}

Tensor lm_loss(std::span<const Sample> batch, const ModelParams& params) {
  if (batch.empty()) throw InputError("lm_loss: empty batch");
  Tensor total;
  for (const Sample& s : batch) {
    Tensor term = scale(sequence_log_prob(s.tokens, params), -1.0);
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

Tensor cls_loss(std::span<const Sample> batch, const ModelParams& params) {
  return build_batch_loss(batch, params, nullptr, CmiSign::off, 0, 0, CmiMode::eq11_average).total;
}

Tensor final_loss(std::span<const Sample> batch, const ModelParams& params, double gamma) {
  if (gamma < 0) throw ConfigError("final_loss: gamma must be >= 0");
  return build_batch_loss(batch, params, nullptr, CmiSign::off, 0, gamma, CmiMode::eq11_average).total;
}

Tensor min_cmi_loss(std::span<const Sample> batch, const ModelParams& params,
                    const CentroidSet& centroids, double lambda, double gamma, CmiMode mode) {
  return build_batch_loss(batch, params, &centroids, CmiSign::min, lambda, gamma, mode).total;
}

Tensor max_cmi_loss(std::span<const Sample> batch, const ModelParams& params,
                    const CentroidSet& centroids, double lambda, double gamma, CmiMode mode,
                    double clip_nats, int64_t* clip_events) {
  BatchLossParts parts = build_batch_loss(batch, params, &centroids, CmiSign::max, lambda, gamma,
                                          mode, clip_nats);
  if (clip_events != nullptr) *clip_events = parts.clip_events;
  return parts.total;
}

namespace {

Tensor kd_row_term(const Tensor& student_row, const Tensor& teacher_row, int label, double alpha,
                   double temperature) {
  // Hard-label cross-entropy at T = 1.
  if (alpha == 0.0) return nll_from_logits_row(student_row, label);

  // Softened KL(teacher || student) * T^2; teacher side is constant.
  const double inv_t = 1.0 / temperature;
  std::vector<double> scaled(teacher_row.data().begin(), teacher_row.data().end());
  for (double& v : scaled) v *= inv_t;
  std::vector<double> t_soft = stable_softmax(scaled);
  double t_entropy_term = 0.0;  // sum p log p, the constant part of the KL
  for (double p : t_soft) {
    if (p > 0) t_entropy_term += p * std::log(std::max(p, kLogEps));
  }
  Tensor p_const = Tensor::from_data({1, teacher_row.cols()}, std::move(t_soft));
  Tensor q = softmax_lastdim(scale(student_row, inv_t));
  Tensor cross = scale(sum(mul(p_const, log_clamped(q))), -1.0);
  Tensor kl = add(cross, Tensor::scalar(t_entropy_term));
  Tensor kl_scaled = scale(kl, temperature * temperature);

  if (alpha == 1.0) return kl_scaled;
  return add(scale(nll_from_logits_row(student_row, label), 1.0 - alpha), scale(kl_scaled, alpha));
}

}  // namespace

Tensor kd_loss_rows(std::span<const Tensor> student_logits, std::span<const Tensor> teacher_logits,
                    std::span<const int> labels, double alpha, double temperature) {
  if (student_logits.size() != teacher_logits.size() || student_logits.size() != labels.size()) {
    throw InputError("kd_loss: student/teacher/label counts disagree");
  }
  if (student_logits.empty()) throw InputError("kd_loss: empty batch");
  if (alpha < 0 || alpha > 1) throw InputError("kd_loss: alpha must lie in [0, 1]");
  if (temperature < 1) throw InputError("kd_loss: temperature must be >= 1");
  Tensor total;
  for (size_t i = 0; i < student_logits.size(); ++i) {
    if (student_logits[i].shape() != teacher_logits[i].shape()) {
      throw DimensionError("kd_loss: student row " + shape_str(student_logits[i].shape()) +
                           " vs teacher row " + shape_str(teacher_logits[i].shape()));
    }
    Tensor term = kd_row_term(student_logits[i], teacher_logits[i], labels[i], alpha, temperature);
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

Tensor kd_loss(const Tensor& student_logits, const Tensor& teacher_logits,
               std::span<const int> labels, double alpha, double temperature) {
  if (student_logits.ndim() != 2 || student_logits.shape() != teacher_logits.shape()) {
    throw DimensionError("kd_loss: logits must be matching 2-D batches, got " +
                         shape_str(student_logits.shape()) + " vs " + shape_str(teacher_logits.shape()));
  }
  if (static_cast<size_t>(student_logits.rows()) != labels.size()) {
    throw InputError("kd_loss: batch size does not match label count");
  }
  std::vector<Tensor> s_rows, t_rows;
  for (int64_t i = 0; i < student_logits.rows(); ++i) {
    s_rows.push_back(slice(student_logits, 0, i, 1));
    t_rows.push_back(slice(teacher_logits, 0, i, 1));
  }
  return kd_loss_rows(s_rows, t_rows, labels, alpha, temperature);
}

}  // namespace cmitune
