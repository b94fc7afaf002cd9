#pragma once

#include <optional>
#include <span>

#include "cmitune/cmi.hpp"
#include "cmitune/data.hpp"
#include "cmitune/model.hpp"

namespace cmitune {

// gamma: LM-auxiliary weight; lambda: CMI weight; alpha: KD mix; temperature.
struct LossWeights {
  double gamma = 0.0;
  double lambda = 0.0;
  double alpha = 0.0;
  double temperature = 1.0;

  void validate() const;
};

enum class CmiSign { min, max, off };

// Everything produced while assembling one batch objective. Loss tensors use
// the sum-over-batch convention; the *_value fields are plain measurements
// for reporting (per-sample means are value / batch size).
struct BatchLossParts {
  Tensor total;
  double cls_value = 0.0;       // L_2 component (sum)
  double lm_value = 0.0;        // L_1 component (sum), 0 when gamma == 0
  double cmi_value = 0.0;       // normalized CMI term before sign/lambda
  int64_t clip_events = 0;      // max-CMI safeguard triggers
  std::vector<std::vector<double>> fx;  // per-sample feature distributions
};

// Shared assembly for L_Final and the CMI-regularized objectives. Centroids
// are constants in the graph (gradients flow only through f_x). clip_nats
// caps each sample's KL contribution in max mode before the sign flip.
BatchLossParts build_batch_loss(std::span<const Sample> batch, const ModelParams& params,
                                const CentroidSet* centroids, CmiSign sign, double lambda,
                                double gamma, CmiMode mode, double clip_nats = 50.0);

// Causal LM cross-entropy: -sum over sequences of sum_{i>=2} log P(u_i | u_1..u_{i-1}).
Tensor lm_loss(std::span<const Sample> batch, const ModelParams& params);

// Classification cross-entropy: -sum log P(y | x).
Tensor cls_loss(std::span<const Sample> batch, const ModelParams& params);

// L_2 + gamma * L_1.
Tensor final_loss(std::span<const Sample> batch, const ModelParams& params, double gamma);

// Final loss plus lambda times the batch CMI against the given (frozen)
// centroids.
Tensor min_cmi_loss(std::span<const Sample> batch, const ModelParams& params,
                    const CentroidSet& centroids, double lambda, double gamma, CmiMode mode);

// Final loss minus lambda times the batch CMI; per-sample KL capped at clip_nats.
Tensor max_cmi_loss(std::span<const Sample> batch, const ModelParams& params,
                    const CentroidSet& centroids, double lambda, double gamma, CmiMode mode,
                    double clip_nats = 50.0, int64_t* clip_events = nullptr);

// KD loss on classification-head logits: (1-alpha) L_CE + alpha T^2
// KL(softmax(teacher/T) || softmax(student/T)), both summed over the batch.
// Teacher logits are constants. Rows are processed per sample so that
// alpha = 0 reproduces plain cross-entropy training bit for bit.
Tensor kd_loss(const Tensor& student_logits, const Tensor& teacher_logits,
               std::span<const int> labels, double alpha, double temperature);

// Per-sample variant used by the distiller (student_logits[i] is 1 x C).
Tensor kd_loss_rows(std::span<const Tensor> student_logits, std::span<const Tensor> teacher_logits,
                    std::span<const int> labels, double alpha, double temperature);

}  // namespace cmitune
