#pragma once

#include <span>
#include <string>

#include "cmitune/errors.hpp"

namespace cmitune {

enum class Metric { accuracy, f1, mcc };

double accuracy(std::span<const int> preds, std::span<const int> labels);
// Positive class is label 1; returns 0 when precision + recall is 0.
double f1_binary(std::span<const int> preds, std::span<const int> labels);
// Returns 0 when any marginal of the contingency table is 0.
double matthews_corr(std::span<const int> preds, std::span<const int> labels);

double eval_metric(Metric metric, std::span<const int> preds, std::span<const int> labels);

Metric metric_from_name(const std::string& name);
std::string metric_name(Metric metric);

}  // namespace cmitune
