#pragma once

#include <functional>
#include <memory>
#include <optional>

#include "cmitune/losses.hpp"
#include "cmitune/metrics.hpp"

namespace cmitune {

enum class CentroidRefresh { per_epoch, per_step_ema };
enum class OptimizerKind { sgd, adam };

struct TrainConfig {
  double lambda = 0.5;
  double gamma = 0.0;
  CmiSign cmi_sign = CmiSign::off;
  CmiMode cmi_mode = CmiMode::eq11_average;
  int epochs = 5;
  int batch_size = 32;
  double lr = 3e-4;
  uint64_t seed = 0;
  CentroidRefresh centroid_refresh = CentroidRefresh::per_epoch;
  double ema_beta = 0.9;
  OptimizerKind optimizer = OptimizerKind::adam;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  // Full-objective halving line search on sgd steps; guarantees the
  // coordinate-descent objective never increases on full batches.
  bool sgd_backtrack = false;
  bool classifier_only = false;
  double clip_kl_nats = 50.0;
  Metric eval_metric = Metric::accuracy;
  int eval_jobs = 1;

  void validate() const;
};

struct EpochStats {
  int epoch = 0;  // 1-based
  double objective = 0.0;
  double l2 = 0.0;                // classification loss, summed over train
  double l1 = 0.0;                // LM loss, summed over train
  std::optional<double> cmi;      // train CMI against fresh centroids
  double metric = 0.0;            // dev eval metric
  int64_t clip_events = 0;
};

struct RunReport {
  std::string kind = "train";  // "train" or "distill"
  uint64_t seed = 0;
  CmiSign cmi_sign = CmiSign::off;
  double lambda = 0.0;
  double gamma = 0.0;
  CmiMode cmi_mode = CmiMode::eq11_average;
  std::string metric;
  int64_t train_size = 0;  // losses are sums; per-sample means derive from this
  int64_t dev_size = 0;
  std::vector<EpochStats> epochs;
  int best_epoch = 0;  // argmax dev metric, first on ties
  double best_metric = 0.0;
  std::optional<double> final_cmi_train;
  std::optional<double> final_cmi_dev;
  std::vector<std::vector<double>> final_centroids;  // empty when CMI is off
  uint64_t train_fingerprint = 0;
  uint64_t dev_fingerprint = 0;
  double wall_clock_sec = 0.0;  // never part of the deterministic report file
};

// Thrown when a training step produces non-finite values. Carries the last
// completed epoch's parameters so the caller can persist a usable checkpoint.
class TrainingDivergedError : public NumericError {
 public:
  TrainingDivergedError(const std::string& msg, int epoch, int64_t step)
      : NumericError(msg), epoch(epoch), step(step) {}
  int epoch;
  int64_t step;
  std::shared_ptr<ModelParams> last_good;
};

struct FitResult {
  ModelParams params;  // best-epoch parameters
  RunReport report;
};

// Per-sample evaluation of a dataset under frozen parameters. Reductions are
// in sample order; jobs > 1 changes only the schedule, never the bits.
struct DatasetEval {
  double cls_sum = 0.0;
  double lm_sum = 0.0;
  std::vector<int> preds;
  std::vector<FeatureDistribution> fx;
  double metric = 0.0;
};
DatasetEval evaluate_dataset(const ModelParams& params, const LabeledDataset& dataset,
                             Metric metric, bool want_lm, int jobs = 1);

// One fine-tuning run per the configured cmi_sign:
//   min -> alternating double minimization (centroid step + parameter step),
//   max -> the same loop with the CMI term subtracted (clipped per sample),
//   off -> plain L_Final training, no CMI machinery at all.
FitResult fit(const ModelConfig& model_config, const LabeledDataset& train,
              const LabeledDataset& dev, const TrainConfig& config);

// Named entry points for the two CMI modes of operation.
FitResult alternating_fit(const ModelConfig& model_config, const LabeledDataset& train,
                          const LabeledDataset& dev, const TrainConfig& config);
FitResult max_cmi_fit(const ModelConfig& model_config, const LabeledDataset& train,
                      const LabeledDataset& dev, const TrainConfig& config);

struct SweepRun {
  double lambda = 0.0;
  int run_index = 0;
  uint64_t seed = 0;
  bool failed = false;
  std::string error;
  RunReport report;
  ModelParams params;
};

struct SweepHooks {
  // Resume: returns a previously completed run for this cell, if any.
  std::function<std::optional<SweepRun>(double lambda, int run_index)> lookup;
  // Persistence callback invoked after each freshly computed run.
  std::function<void(const SweepRun&)> persist;
};

struct SweepResult {
  std::vector<SweepRun> runs;           // grid order, run_index minor
  std::vector<int64_t> median_index;    // per lambda: index into runs, -1 if all failed
};

// For each lambda in the grid: runs_per_config seeded runs (seed + run
// index), median selected by best dev metric. Failed runs are recorded, not
// fatal.
SweepResult sweep(const ModelConfig& model_config, const LabeledDataset& train,
                  const LabeledDataset& dev, const TrainConfig& base,
                  std::span<const double> lambda_grid, int runs_per_config = 3,
                  const SweepHooks* hooks = nullptr, int jobs = 1);

struct TeacherCandidate {
  double lambda = 0.0;
  double metric = 0.0;
  double cmi = 0.0;
};

struct TeacherChoice {
  size_t index = 0;
  double ratio = 0.0;
  bool zero_cmi_warning = false;  // some candidate had CMI <= 0
  std::vector<double> ratios;     // per candidate; 0-CMI candidates get -inf
};

// argmax of metric/CMI; ties broken by smaller lambda; CMI <= 0 ranks last.
TeacherChoice select_teacher(std::span<const TeacherCandidate> candidates);

// ---------------------------------------------------------------------------
// Shared step engine (also used by the distiller so that alpha = 0
// distillation is bit-identical to plain fine-tuning).
// ---------------------------------------------------------------------------

struct TrainingLoopSpec {
  int epochs = 1;
  int batch_size = 1;
  uint64_t seed = 0;
  int64_t n_samples = 0;
  OptimizerKind optimizer = OptimizerKind::adam;
  double lr = 3e-4;
  double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;
  bool sgd_backtrack = false;
  std::vector<Tensor> trainable;
  std::function<Tensor(std::span<const int64_t>)> build_loss;
  std::function<void(int)> on_epoch_begin;                      // optional
  std::function<void(std::span<const int64_t>)> after_step;     // optional
  std::function<void(int)> on_epoch_end;                        // optional
};

void run_training_loop(const TrainingLoopSpec& spec);

// Deterministic epoch ordering shared by the loop and by oracle tests.
std::vector<int64_t> epoch_order(int64_t n_samples, uint64_t seed, int epoch);

}  // namespace cmitune
