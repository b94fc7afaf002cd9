#include "cmitune/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>

#include "cmitune/parallel.hpp"

namespace cmitune {

void TrainConfig::validate() const {
  if (cmi_sign != CmiSign::off && lambda <= 0) {
    throw ConfigError("train: lambda must be > 0 when the CMI term is active");
  }
  if (gamma < 0) throw ConfigError("train: gamma must be >= 0");
  if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (lr <= 0) throw ConfigError("train: learning rate must be > 0");
  if (ema_beta <= 0 || ema_beta >= 1) throw ConfigError("train: ema_beta must lie in (0, 1)");
  if (clip_kl_nats <= 0) throw ConfigError("train: clip_kl_nats must be > 0");
  if (eval_jobs < 1) throw ConfigError("train: eval_jobs must be >= 1");
  if (adam_eps <= 0) throw ConfigError("train: adam_eps must be > 0");
  if (adam_beta1 < 0 || adam_beta1 >= 1 || adam_beta2 < 0 || adam_beta2 >= 1) {
    throw ConfigError("train: adam betas must lie in [0, 1)");
  }
}

std::vector<int64_t> epoch_order(int64_t n_samples, uint64_t seed, int epoch) {
  std::vector<int64_t> order(static_cast<size_t>(n_samples));
  for (int64_t i = 0; i < n_samples; ++i) order[static_cast<size_t>(i)] = i;
  std::mt19937_64 rng(derive_seed(seed, "shuffle", static_cast<uint64_t>(epoch)));
  deterministic_shuffle(order, rng);
  return order;
}

namespace {

struct AdamState {
  std::vector<std::vector<double>> m, v;
  int64_t t = 0;
};

void adam_step(std::vector<Tensor>& params, AdamState& state, double lr, double b1, double b2,
               double eps) {
  if (state.m.empty()) {
    for (const Tensor& p : params) {
      state.m.emplace_back(static_cast<size_t>(p.size()), 0.0);
      state.v.emplace_back(static_cast<size_t>(p.size()), 0.0);
    }
  }
  ++state.t;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
  for (size_t i = 0; i < params.size(); ++i) {
    auto data = params[i].mutable_data();
    const bool has_grad = params[i].has_grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (size_t j = 0; j < data.size(); ++j) {
      const double g = has_grad ? params[i].grad()[j] : 0.0;
      m[j] = b1 * m[j] + (1.0 - b1) * g;
      v[j] = b2 * v[j] + (1.0 - b2) * g * g;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      data[j] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

void sgd_apply(std::vector<Tensor>& params, const std::vector<std::vector<double>>& grads, double lr) {
  for (size_t i = 0; i < params.size(); ++i) {
    auto data = params[i].mutable_data();
    for (size_t j = 0; j < data.size(); ++j) data[j] -= lr * grads[i][j];
  }
}

}  // namespace

void run_training_loop(const TrainingLoopSpec& spec) {
  if (spec.n_samples < 1) throw InputError("training loop: empty dataset");
  if (!spec.build_loss) throw ContractError("training loop: no loss builder");
  std::vector<Tensor> trainable = spec.trainable;
  AdamState adam;

  for (int epoch = 1; epoch <= spec.epochs; ++epoch) {
    if (spec.on_epoch_begin) spec.on_epoch_begin(epoch);
    const std::vector<int64_t> order = epoch_order(spec.n_samples, spec.seed, epoch);
    int64_t step = 0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(spec.batch_size)) {
      const size_t count = std::min(static_cast<size_t>(spec.batch_size), order.size() - start);
      std::span<const int64_t> batch(order.data() + start, count);
      ++step;
      try {
        for (Tensor& p : trainable) p.zero_grad();
        double loss_value = 0.0;
        {
          Tape tape;
          Tensor loss = spec.build_loss(batch);
          loss_value = loss.value();
          tape.backward(loss);
        }
        if (!std::isfinite(loss_value)) throw NumericError("loss is not finite");

        if (spec.optimizer == OptimizerKind::adam) {
          adam_step(trainable, adam, spec.lr, spec.adam_beta1, spec.adam_beta2, spec.adam_eps);
        } else if (!spec.sgd_backtrack) {
          std::vector<std::vector<double>> grads;
          for (const Tensor& p : trainable) {
            grads.emplace_back(p.has_grad()
                                   ? std::vector<double>(p.grad().begin(), p.grad().end())
                                   : std::vector<double>(static_cast<size_t>(p.size()), 0.0));
          }
          sgd_apply(trainable, grads, spec.lr);
        } else {
          // halving line search on the same batch objective
          std::vector<std::vector<double>> grads, saved;
          for (const Tensor& p : trainable) {
            grads.emplace_back(p.has_grad()
                                   ? std::vector<double>(p.grad().begin(), p.grad().end())
                                   : std::vector<double>(static_cast<size_t>(p.size()), 0.0));
            saved.emplace_back(p.data().begin(), p.data().end());
          }
          double lr_try = spec.lr;
          bool accepted = false;
          for (int halving = 0; halving < 40 && !accepted; ++halving) {
            sgd_apply(trainable, grads, lr_try);
            const double candidate = spec.build_loss(batch).value();
            if (candidate <= loss_value) {
              accepted = true;
            } else {
              for (size_t i = 0; i < trainable.size(); ++i) {
                auto data = trainable[i].mutable_data();
                std::copy(saved[i].begin(), saved[i].end(), data.begin());
              }
              lr_try *= 0.5;
            }
          }
          // If no step length helped, the saved point stands (flat gradient).
        }
        if (spec.after_step) spec.after_step(batch);
      } catch (const TrainingDivergedError&) {
        throw;
      } catch (const NumericError& e) {
        throw TrainingDivergedError("training diverged at epoch " + std::to_string(epoch) +
                                        " step " + std::to_string(step) + ": " + e.what(),
                                    epoch, step);
      }
    }
    if (spec.on_epoch_end) spec.on_epoch_end(epoch);
  }
}

DatasetEval evaluate_dataset(const ModelParams& params, const LabeledDataset& dataset,
                             Metric metric, bool want_lm, int jobs) {
  struct SampleEval {
    int pred = 0;
    double nll = 0.0;
    double lm_nll = 0.0;
    std::vector<double> fx;
  };
  const int64_t n = static_cast<int64_t>(dataset.samples.size());
  if (n == 0) throw InputError("evaluate_dataset: empty dataset");
  auto evals = parallel_map<SampleEval>(n, jobs, [&](int64_t i) {
    const Sample& s = dataset.samples[static_cast<size_t>(i)];
    SampleEval out;
    Tensor x_l = encode_sequence(s.tokens, params);
    Tensor pooled = slice(x_l, 0, pooled_index(s.tokens, params.config), 1);
    Tensor logits = classify_logits_from_feature(pooled, params);
    int best = 0;
    for (int64_t c = 1; c < logits.cols(); ++c) {
      if (logits.at2(0, c) > logits.at2(0, best)) best = static_cast<int>(c);
    }
    out.pred = best;
    const std::vector<double> probs = stable_softmax(logits.data());
    out.nll = -std::log(std::max(probs[static_cast<size_t>(s.label)], kLogEps));
    out.fx = stable_softmax(pooled.data());
    if (want_lm) out.lm_nll = -sequence_log_prob(s.tokens, params).value();
    return out;
  });

  DatasetEval result;
  std::vector<int> labels;
  for (int64_t i = 0; i < n; ++i) {
    const auto& e = evals[static_cast<size_t>(i)];
    const Sample& s = dataset.samples[static_cast<size_t>(i)];
    result.cls_sum += e.nll;
    result.lm_sum += e.lm_nll;
    result.preds.push_back(e.pred);
    labels.push_back(s.label);
    FeatureDistribution fd;
    fd.probs = e.fx;
    fd.sample_id = s.id;
    fd.label = s.label;
    result.fx.push_back(std::move(fd));
  }
  result.metric = eval_metric(metric, result.preds, labels);
  return result;
}

FitResult fit(const ModelConfig& model_config, const LabeledDataset& train,
              const LabeledDataset& dev, const TrainConfig& config) {
  config.validate();
  model_config.validate();
  if (train.num_classes != model_config.num_classes) {
    throw ConfigError("fit: dataset has " + std::to_string(train.num_classes) +
                      " classes but the model expects " + std::to_string(model_config.num_classes));
  }
  if (config.cmi_sign != CmiSign::off) {
    for (int y = 0; y < train.num_classes; ++y) {
      if (train.by_label[static_cast<size_t>(y)].empty()) {
        throw InputError("fit: degenerate cluster, class " + std::to_string(y) +
                         " has no training samples");
      }
    }
  }
  const auto t_start = std::chrono::steady_clock::now();

  ModelParams params = ModelParams::init(model_config, config.seed);
  std::vector<Tensor> trainable =
      config.classifier_only ? std::vector<Tensor>{params.classifier} : params.all_params();

  // Dummy distributions G_y used by the parameter steps; refreshed to the
  // current g_y per the configured policy.
  CentroidSet centroids;
  CentroidSet pending_centroids;  // measured at the last epoch boundary
  bool have_pending = false;
  if (config.cmi_sign != CmiSign::off) {
    DatasetEval initial = evaluate_dataset(params, train, config.eval_metric, false, config.eval_jobs);
    pending_centroids = compute_centroids(initial.fx, train.num_classes);
    have_pending = true;
  }

  RunReport report;
  report.seed = config.seed;
  report.cmi_sign = config.cmi_sign;
  report.lambda = config.cmi_sign == CmiSign::off ? 0.0 : config.lambda;
  report.gamma = config.gamma;
  report.cmi_mode = config.cmi_mode;
  report.metric = metric_name(config.eval_metric);
  report.train_size = static_cast<int64_t>(train.samples.size());
  report.dev_size = static_cast<int64_t>(dev.samples.size());
  report.train_fingerprint = train.fingerprint();
  report.dev_fingerprint = dev.fingerprint();

  std::shared_ptr<ModelParams> last_good = std::make_shared<ModelParams>(params.clone());
  ModelParams best_params = params.clone();
  double best_metric = -std::numeric_limits<double>::infinity();
  int best_epoch = 0;
  int64_t epoch_clip_events = 0;
  std::vector<std::vector<double>> step_fx;  // features captured by the last step

  TrainingLoopSpec spec;
  spec.epochs = config.epochs;
  spec.batch_size = config.batch_size;
  spec.seed = config.seed;
  spec.n_samples = static_cast<int64_t>(train.samples.size());
  spec.optimizer = config.optimizer;
  spec.lr = config.lr;
  spec.adam_beta1 = config.adam_beta1;
  spec.adam_beta2 = config.adam_beta2;
  spec.adam_eps = config.adam_eps;
  spec.sgd_backtrack = config.sgd_backtrack;
  spec.trainable = trainable;

  spec.build_loss = [&](std::span<const int64_t> batch_indices) {
    std::vector<Sample> batch;
    batch.reserve(batch_indices.size());
    for (int64_t i : batch_indices) batch.push_back(train.samples[static_cast<size_t>(i)]);
    BatchLossParts parts = build_batch_loss(
        batch, params, config.cmi_sign == CmiSign::off ? nullptr : &centroids, config.cmi_sign,
        config.lambda, config.gamma, config.cmi_mode, config.clip_kl_nats);
    epoch_clip_events += parts.clip_events;
    step_fx = std::move(parts.fx);
    return parts.total;
  };

  spec.on_epoch_begin = [&](int) {
    if (config.cmi_sign == CmiSign::off || !have_pending) return;
    // Centroid step: G_y <- g_y. The per-step EMA policy also starts each
    // epoch from the freshest full measurement.
    centroids = pending_centroids;
  };

  if (config.cmi_sign != CmiSign::off && config.centroid_refresh == CentroidRefresh::per_step_ema) {
    spec.after_step = [&](std::span<const int64_t> batch_indices) {
      std::vector<FeatureDistribution> fds;
      for (size_t i = 0; i < batch_indices.size(); ++i) {
        FeatureDistribution fd;
        fd.probs = step_fx[i];
        fd.label = train.samples[static_cast<size_t>(batch_indices[i])].label;
        fds.push_back(std::move(fd));
      }
      CentroidSet batch_centroids = compute_centroids(fds, train.num_classes);
      for (int y = 0; y < train.num_classes; ++y) {
        if (batch_centroids.counts[static_cast<size_t>(y)] == 0) continue;
        auto& g = centroids.g[static_cast<size_t>(y)];
        const auto& b = batch_centroids.g[static_cast<size_t>(y)];
        for (size_t j = 0; j < g.size(); ++j) {
          g[j] = config.ema_beta * g[j] + (1.0 - config.ema_beta) * b[j];
        }
      }
    };
  }

  spec.on_epoch_end = [&](int epoch) {
    DatasetEval train_eval =
        evaluate_dataset(params, train, config.eval_metric, true, config.eval_jobs);
    DatasetEval dev_eval =
        evaluate_dataset(params, dev, config.eval_metric, false, config.eval_jobs);

    EpochStats stats;
    stats.epoch = epoch;
    stats.l2 = train_eval.cls_sum;
    stats.l1 = train_eval.lm_sum;
    stats.metric = dev_eval.metric;
    stats.clip_events = epoch_clip_events;
    epoch_clip_events = 0;
    double objective = stats.l2 + config.gamma * stats.l1;
    if (config.cmi_sign != CmiSign::off) {
      pending_centroids = compute_centroids(train_eval.fx, train.num_classes);
      have_pending = true;
      const double cmi = dataset_cmi(train_eval.fx, pending_centroids, config.cmi_mode);
      stats.cmi = cmi;
      objective += (config.cmi_sign == CmiSign::min ? config.lambda : -config.lambda) * cmi;
      if (epoch == config.epochs) {
        report.final_cmi_train = cmi;
        CentroidSet dev_centroids = compute_centroids(dev_eval.fx, train.num_classes);
        report.final_cmi_dev = dataset_cmi(dev_eval.fx, dev_centroids, config.cmi_mode);
        report.final_centroids = pending_centroids.g;
      }
    }
    stats.objective = objective;
    report.epochs.push_back(stats);

    if (stats.metric > best_metric) {
      best_metric = stats.metric;
      best_epoch = epoch;
      best_params = params.clone();
    }
    *last_good = params.clone();
  };

  try {
    run_training_loop(spec);
  } catch (TrainingDivergedError& e) {
    e.last_good = last_good;
    throw;
  }

  report.best_epoch = best_epoch;
  report.best_metric = best_metric;
  report.wall_clock_sec =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();

  return FitResult{std::move(best_params), std::move(report)};
}

FitResult alternating_fit(const ModelConfig& model_config, const LabeledDataset& train,
                          const LabeledDataset& dev, const TrainConfig& config) {
  if (config.cmi_sign != CmiSign::min) {
    throw ConfigError("alternating_fit: cmi_sign must be 'min'");
  }
  return fit(model_config, train, dev, config);
}

FitResult max_cmi_fit(const ModelConfig& model_config, const LabeledDataset& train,
                      const LabeledDataset& dev, const TrainConfig& config) {
  if (config.cmi_sign != CmiSign::max) {
    throw ConfigError("max_cmi_fit: cmi_sign must be 'max'");
  }
  return fit(model_config, train, dev, config);
}

SweepResult sweep(const ModelConfig& model_config, const LabeledDataset& train,
                  const LabeledDataset& dev, const TrainConfig& base,
                  std::span<const double> lambda_grid, int runs_per_config,
                  const SweepHooks* hooks, int jobs) {
  if (lambda_grid.empty()) throw ConfigError("sweep: empty lambda grid");
  if (runs_per_config < 1) throw ConfigError("sweep: runs_per_config must be >= 1");
  for (double l : lambda_grid) {
    if (l < 0.05 || l > 1.0) {
      throw ConfigError("sweep: lambda " + std::to_string(l) + " outside the sweep range [0.05, 1]");
    }
  }

  const int64_t total = static_cast<int64_t>(lambda_grid.size()) * runs_per_config;
  auto run_cell = [&](int64_t flat) {
    const size_t li = static_cast<size_t>(flat / runs_per_config);
    const int run_index = static_cast<int>(flat % runs_per_config);
    const double lambda = lambda_grid[li];
    SweepRun cell;
    cell.lambda = lambda;
    cell.run_index = run_index;
    cell.seed = base.seed + static_cast<uint64_t>(run_index);
    if (hooks && hooks->lookup) {
      if (auto cached = hooks->lookup(lambda, run_index)) return *std::move(cached);
    }
    TrainConfig cfg = base;
    cfg.lambda = lambda;
    cfg.seed = cell.seed;
    try {
      FitResult fr = fit(model_config, train, dev, cfg);
      cell.report = std::move(fr.report);
      cell.params = std::move(fr.params);
    } catch (const Error& e) {
      cell.failed = true;
      cell.error = e.what();
    }
    if (hooks && hooks->persist) hooks->persist(cell);
    return cell;
  };

  SweepResult result;
  if (jobs <= 1) {
    result.runs.reserve(static_cast<size_t>(total));
    for (int64_t flat = 0; flat < total; ++flat) result.runs.push_back(run_cell(flat));
  } else {
    result.runs = parallel_map<SweepRun>(total, jobs, run_cell);
  }

  for (size_t li = 0; li < lambda_grid.size(); ++li) {
    std::vector<int64_t> ok;
    for (int r = 0; r < runs_per_config; ++r) {
      const int64_t idx = static_cast<int64_t>(li) * runs_per_config + r;
      if (!result.runs[static_cast<size_t>(idx)].failed) ok.push_back(idx);
    }
    if (ok.empty()) {
      result.median_index.push_back(-1);
      continue;
    }
    // median by best dev metric; stable on ties by run index
    std::stable_sort(ok.begin(), ok.end(), [&](int64_t a, int64_t b) {
      return result.runs[static_cast<size_t>(a)].report.best_metric <
             result.runs[static_cast<size_t>(b)].report.best_metric;
    });
    result.median_index.push_back(ok[ok.size() / 2]);
  }
  return result;
}

TeacherChoice select_teacher(std::span<const TeacherCandidate> candidates) {
  if (candidates.empty()) throw InputError("select_teacher: no candidates");
  TeacherChoice choice;
  choice.ratios.reserve(candidates.size());
  double best_ratio = -std::numeric_limits<double>::infinity();
  double best_lambda = std::numeric_limits<double>::infinity();
  bool found = false;
  for (size_t i = 0; i < candidates.size(); ++i) {
    const TeacherCandidate& c = candidates[i];
    double ratio;
    if (c.cmi <= 0.0) {
      ratio = -std::numeric_limits<double>::infinity();  // ranked last, ratio undefined
      choice.zero_cmi_warning = true;
    } else {
      ratio = c.metric / c.cmi;
    }
    choice.ratios.push_back(ratio);
    const bool better = !found || ratio > best_ratio ||
                        (ratio == best_ratio && c.lambda < best_lambda);
    if (better) {
      found = true;
      best_ratio = ratio;
      best_lambda = c.lambda;
      choice.index = i;
      choice.ratio = ratio;
    }
  }
  return choice;
}

}  // namespace cmitune
