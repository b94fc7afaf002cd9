#pragma once

#include "cmitune/trainer.hpp"

namespace cmitune {

struct DistillGrid {
  std::vector<double> alphas;        // [0.05, 0.9] when driven by config
  std::vector<double> temperatures;  // [1, 5] when driven by config
};

struct DistillOptions {
  int epochs = 10;
  int batch_size = 32;
  double lr = 3e-4;
  uint64_t seed = 0;
  int runs_per_cell = 3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  Metric eval_metric = Metric::accuracy;
  int eval_jobs = 1;
};

struct DistillCell {
  double alpha = 0.0;
  double temperature = 0.0;
  int run_index = 0;
  uint64_t seed = 0;
  bool failed = false;
  std::string error;
  RunReport report;
  ModelParams student;
};

struct DistillResult {
  std::vector<DistillCell> cells;      // alpha-major, temperature, run_index
  std::vector<int64_t> median_index;   // per (alpha, T) cell
  int64_t best_cell = -1;              // index into median_index order
  double best_alpha = 0.0;
  double best_temperature = 0.0;
  ModelParams best_student;            // median run of the best cell
};

// Student with ceil(L/2) blocks initialized from the teacher's even-indexed
// blocks (0-based); embeddings and classifier copied whole.
ModelParams init_student(const ModelParams& teacher);

// One student training run against a frozen teacher whose per-sample logits
// are precomputed once (the teacher never changes). Exposed for tests.
FitResult distill_single(const ModelParams& teacher, const ModelParams& student_init,
                         const LabeledDataset& train, const LabeledDataset& dev, double alpha,
                         double temperature, const DistillOptions& opts, uint64_t seed);

// Full (alpha, T) grid, runs_per_cell seeded runs each, median per cell by
// best dev metric, global best cell by the median metric (ties to the
// smaller alpha then smaller T).
DistillResult distill(const ModelParams& teacher, const LabeledDataset& train,
                      const LabeledDataset& dev, const DistillGrid& grid,
                      const DistillOptions& opts, int jobs = 1);

}  // namespace cmitune
