#include "cmitune/distiller.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>

#include "cmitune/parallel.hpp"

namespace cmitune {

ModelParams init_student(const ModelParams& teacher) {
  const int teacher_layers = teacher.config.num_layers;
  if (teacher_layers < 2) {
    throw ConfigError("init_student: teacher must have at least 2 layers, has " +
                      std::to_string(teacher_layers));
  }
  ModelConfig student_config = teacher.config;
  student_config.num_layers = (teacher_layers + 1) / 2;

  ModelParams student = ModelParams::init(student_config, 0);
  auto copy_into = [](Tensor& dst, const Tensor& src) {
    auto d = dst.mutable_data();
    auto s = src.data();
    std::copy(s.begin(), s.end(), d.begin());
  };
  copy_into(student.token_embedding, teacher.token_embedding);
  copy_into(student.position_embedding, teacher.position_embedding);
  copy_into(student.classifier, teacher.classifier);
  for (int j = 0; j < student_config.num_layers; ++j) {
    const BlockParams& src = teacher.blocks[static_cast<size_t>(2 * j)];
    BlockParams& dst = student.blocks[static_cast<size_t>(j)];
    copy_into(dst.ln1_gain, src.ln1_gain);
    copy_into(dst.ln1_bias, src.ln1_bias);
    copy_into(dst.wq, src.wq);
    copy_into(dst.bq, src.bq);
    copy_into(dst.wk, src.wk);
    copy_into(dst.bk, src.bk);
    copy_into(dst.wv, src.wv);
    copy_into(dst.bv, src.bv);
    copy_into(dst.wo, src.wo);
    copy_into(dst.bo, src.bo);
    copy_into(dst.ln2_gain, src.ln2_gain);
    copy_into(dst.ln2_bias, src.ln2_bias);
    copy_into(dst.w_ff1, src.w_ff1);
    copy_into(dst.b_ff1, src.b_ff1);
    copy_into(dst.w_ff2, src.w_ff2);
    copy_into(dst.b_ff2, src.b_ff2);
  }
  return student;
}

namespace {

// Teacher classification logits per sample, computed once; the teacher is
// frozen so the cache is valid for the whole run.
std::vector<std::vector<double>> teacher_logit_cache(const ModelParams& teacher,
                                                     const LabeledDataset& train, int jobs) {
  return parallel_map<std::vector<double>>(
      static_cast<int64_t>(train.samples.size()), jobs, [&](int64_t i) {
        Tensor logits = classify_logits(train.samples[static_cast<size_t>(i)].tokens, teacher);
        return std::vector<double>(logits.data().begin(), logits.data().end());
      });
}

}  // namespace

FitResult distill_single(const ModelParams& teacher, const ModelParams& student_init,
                         const LabeledDataset& train, const LabeledDataset& dev, double alpha,
                         double temperature, const DistillOptions& opts, uint64_t seed) {
  if (teacher.config.vocab_size != student_init.config.vocab_size ||
      teacher.config.num_classes != student_init.config.num_classes) {
    throw ConfigError("distill: teacher and student vocab/class shapes disagree");
  }
  if (alpha < 0 || alpha > 1) throw ConfigError("distill: alpha must lie in [0, 1]");
  if (temperature < 1) throw ConfigError("distill: temperature must be >= 1");
  const auto t_start = std::chrono::steady_clock::now();

  ModelParams student = student_init.clone();
  const auto cache = teacher_logit_cache(teacher, train, opts.eval_jobs);
  const int64_t c = teacher.config.num_classes;

  RunReport report;
  report.kind = "distill";
  report.seed = seed;
  report.cmi_sign = CmiSign::off;
  report.lambda = 0.0;
  report.gamma = 0.0;
  report.metric = metric_name(opts.eval_metric);
  report.train_size = static_cast<int64_t>(train.samples.size());
  report.dev_size = static_cast<int64_t>(dev.samples.size());
  report.train_fingerprint = train.fingerprint();
  report.dev_fingerprint = dev.fingerprint();

  ModelParams best_params = student.clone();
  double best_metric = -std::numeric_limits<double>::infinity();
  int best_epoch = 0;

  TrainingLoopSpec spec;
  spec.epochs = opts.epochs;
  spec.batch_size = opts.batch_size;
  spec.seed = seed;
  spec.n_samples = static_cast<int64_t>(train.samples.size());
  spec.optimizer = OptimizerKind::adam;
  spec.lr = opts.lr;
  spec.adam_beta1 = opts.adam_beta1;
  spec.adam_beta2 = opts.adam_beta2;
  spec.adam_eps = opts.adam_eps;
  spec.trainable = student.all_params();

  spec.build_loss = [&](std::span<const int64_t> batch_indices) {
    std::vector<Tensor> s_rows, t_rows;
    std::vector<int> labels;
    s_rows.reserve(batch_indices.size());
    for (int64_t i : batch_indices) {
      const Sample& s = train.samples[static_cast<size_t>(i)];
      s_rows.push_back(classify_logits(s.tokens, student));
      t_rows.push_back(Tensor::from_data({1, c}, cache[static_cast<size_t>(i)]));
      labels.push_back(s.label);
    }
    return kd_loss_rows(s_rows, t_rows, labels, alpha, temperature);
  };

  spec.on_epoch_end = [&](int epoch) {
    DatasetEval train_eval = evaluate_dataset(student, train, opts.eval_metric, false, opts.eval_jobs);
    DatasetEval dev_eval = evaluate_dataset(student, dev, opts.eval_metric, false, opts.eval_jobs);
    EpochStats stats;
    stats.epoch = epoch;
    stats.l2 = train_eval.cls_sum;
    stats.l1 = 0.0;
    stats.metric = dev_eval.metric;
    stats.objective = train_eval.cls_sum;
    report.epochs.push_back(stats);
    if (stats.metric > best_metric) {
      best_metric = stats.metric;
      best_epoch = epoch;
      best_params = student.clone();
    }
  };

  run_training_loop(spec);

  report.best_epoch = best_epoch;
  report.best_metric = best_metric;
  report.wall_clock_sec =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return FitResult{std::move(best_params), std::move(report)};
}

DistillResult distill(const ModelParams& teacher, const LabeledDataset& train,
                      const LabeledDataset& dev, const DistillGrid& grid,
                      const DistillOptions& opts, int jobs) {
  if (grid.alphas.empty() || grid.temperatures.empty()) {
    throw ConfigError("distill: empty alpha or temperature grid");
  }
  if (opts.runs_per_cell < 1) throw ConfigError("distill: runs_per_cell must be >= 1");
  if (opts.epochs < 1) throw ConfigError("distill: epochs must be >= 1");

  const ModelParams student_init = init_student(teacher);
  const int64_t per_cell = opts.runs_per_cell;
  const int64_t n_cells = static_cast<int64_t>(grid.alphas.size() * grid.temperatures.size());
  const int64_t total = n_cells * per_cell;

  auto run_one = [&](int64_t flat) {
    const int64_t cell_index = flat / per_cell;
    const int run_index = static_cast<int>(flat % per_cell);
    const size_t ai = static_cast<size_t>(cell_index / static_cast<int64_t>(grid.temperatures.size()));
    const size_t ti = static_cast<size_t>(cell_index % static_cast<int64_t>(grid.temperatures.size()));
    DistillCell cell;
    cell.alpha = grid.alphas[ai];
    cell.temperature = grid.temperatures[ti];
    cell.run_index = run_index;
    cell.seed = opts.seed + static_cast<uint64_t>(run_index);
    try {
      FitResult fr = distill_single(teacher, student_init, train, dev, cell.alpha,
                                    cell.temperature, opts, cell.seed);
      cell.report = std::move(fr.report);
      cell.student = std::move(fr.params);
    } catch (const Error& e) {
      cell.failed = true;
      cell.error = e.what();
    }
    return cell;
  };

  DistillResult result;
  if (jobs <= 1) {
    result.cells.reserve(static_cast<size_t>(total));
    for (int64_t flat = 0; flat < total; ++flat) result.cells.push_back(run_one(flat));
  } else {
    result.cells = parallel_map<DistillCell>(total, jobs, run_one);
  }

  double best_median = -std::numeric_limits<double>::infinity();
  for (int64_t cell_index = 0; cell_index < n_cells; ++cell_index) {
    std::vector<int64_t> ok;
    for (int64_t r = 0; r < per_cell; ++r) {
      const int64_t idx = cell_index * per_cell + r;
      if (!result.cells[static_cast<size_t>(idx)].failed) ok.push_back(idx);
    }
    if (ok.empty()) {
      result.median_index.push_back(-1);
      continue;
    }
    std::stable_sort(ok.begin(), ok.end(), [&](int64_t a, int64_t b) {
      return result.cells[static_cast<size_t>(a)].report.best_metric <
             result.cells[static_cast<size_t>(b)].report.best_metric;
    });
    const int64_t median = ok[ok.size() / 2];
    result.median_index.push_back(median);
    const DistillCell& m = result.cells[static_cast<size_t>(median)];
    // Strictly-greater keeps the first winner; cells iterate alpha-major,
    // temperature-minor, so ties resolve to smaller alpha then smaller T.
    if (result.best_cell < 0 || m.report.best_metric > best_median) {
      best_median = m.report.best_metric;
      result.best_cell = cell_index;
      result.best_alpha = m.alpha;
      result.best_temperature = m.temperature;
      result.best_student = m.student.clone();
    }
  }
  if (result.best_cell < 0) throw NumericError("distill: every grid cell failed");
  return result;
}

}  // namespace cmitune
