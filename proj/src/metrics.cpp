#include "cmitune/metrics.hpp"

#include <cmath>

namespace cmitune {

namespace {

void require_same_length(std::span<const int> preds, std::span<const int> labels) {
  if (preds.size() != labels.size()) {
    throw InputError("metrics: prediction/label length mismatch " + std::to_string(preds.size()) +
                     " vs " + std::to_string(labels.size()));
  }
  if (preds.empty()) throw InputError("metrics: empty inputs");
}

struct Confusion {
  double tp = 0, tn = 0, fp = 0, fn = 0;
};

Confusion binary_confusion(std::span<const int> preds, std::span<const int> labels) {
  require_same_length(preds, labels);
  Confusion c;
  for (size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] != 0 && preds[i] != 1) throw InputError("metrics: binary metric on non-binary prediction");
    if (labels[i] != 0 && labels[i] != 1) throw InputError("metrics: binary metric on non-binary label");
    if (labels[i] == 1) {
      (preds[i] == 1 ? c.tp : c.fn) += 1;
    } else {
      (preds[i] == 1 ? c.fp : c.tn) += 1;
    }
  }
  return c;
}

}  // namespace

double accuracy(std::span<const int> preds, std::span<const int> labels) {
  require_same_length(preds, labels);
  int64_t hits = 0;
  for (size_t i = 0; i < preds.size(); ++i) hits += preds[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(preds.size());
}

double f1_binary(std::span<const int> preds, std::span<const int> labels) {
  const Confusion c = binary_confusion(preds, labels);
  const double denom_p = c.tp + c.fp;
  const double denom_r = c.tp + c.fn;
  const double precision = denom_p > 0 ? c.tp / denom_p : 0.0;
  const double recall = denom_r > 0 ? c.tp / denom_r : 0.0;
  if (precision + recall == 0.0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

double matthews_corr(std::span<const int> preds, std::span<const int> labels) {
  const Confusion c = binary_confusion(preds, labels);
  const double d1 = c.tp + c.fp, d2 = c.tp + c.fn, d3 = c.tn + c.fp, d4 = c.tn + c.fn;
  if (d1 == 0 || d2 == 0 || d3 == 0 || d4 == 0) return 0.0;  // degenerate marginal
  return (c.tp * c.tn - c.fp * c.fn) / std::sqrt(d1 * d2 * d3 * d4);
}

double eval_metric(Metric metric, std::span<const int> preds, std::span<const int> labels) {
  switch (metric) {
    case Metric::accuracy: return accuracy(preds, labels);
    case Metric::f1: return f1_binary(preds, labels);
    case Metric::mcc: return matthews_corr(preds, labels);
  }
  throw InputError("metrics: unknown metric");
}

Metric metric_from_name(const std::string& name) {
  if (name == "accuracy") return Metric::accuracy;
  if (name == "f1") return Metric::f1;
  if (name == "mcc") return Metric::mcc;
  throw ConfigError("unknown metric '" + name + "'");
}

std::string metric_name(Metric metric) {
  switch (metric) {
    case Metric::accuracy: return "accuracy";
    case Metric::f1: return "f1";
    case Metric::mcc: return "mcc";
  }
  return "?";
}

}  // namespace cmitune
