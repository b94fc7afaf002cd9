#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cmitune/trainer.hpp"

using namespace cmitune;

namespace {

ModelConfig tiny_model() {
  ModelConfig c;
  c.vocab_size = 24;
  c.embed_dim = 12;
  c.context_len = 12;
  c.num_layers = 1;
  c.num_heads = 2;
  c.ffn_mult = 2;
  c.num_classes = 2;
  c.pooling = Pooling::first_special;
  return c;
}

LabeledDataset tiny_task(int n, uint64_t seed) {
  SynthSpec spec;
  spec.task = SynthTask::majority_token;
  spec.n_samples = n;
  spec.seq_len = 8;
  spec.seed = seed;
  spec.vocab_size = 24;
  return synth_task(spec, "train");
}

TrainConfig fast_config() {
  TrainConfig c;
  c.epochs = 2;
  c.batch_size = 16;
  c.lr = 3e-3;
  c.seed = 11;
  return c;
}

bool params_equal(const ModelParams& a, const ModelParams& b) {
  auto na = a.named_params();
  auto nb = b.named_params();
  if (na.size() != nb.size()) return false;
  for (size_t i = 0; i < na.size(); ++i) {
    auto da = na[i].second.data();
    auto db = nb[i].second.data();
    if (da.size() != db.size()) return false;
    for (size_t j = 0; j < da.size(); ++j) {
      if (da[j] != db[j]) return false;
    }
  }
  return true;
}

}  // namespace

TEST_CASE("config validation") {
  TrainConfig c = fast_config();
  c.cmi_sign = CmiSign::min;
  c.lambda = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = fast_config();
  c.epochs = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = fast_config();
  c.lr = -1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("fixed seed and config reproduce the run bit for bit") {
  LabeledDataset train = tiny_task(40, 1);
  LabeledDataset dev = tiny_task(24, 2);
  TrainConfig cfg = fast_config();
  cfg.cmi_sign = CmiSign::min;
  cfg.lambda = 0.5;
  FitResult a = fit(tiny_model(), train, dev, cfg);
  FitResult b = fit(tiny_model(), train, dev, cfg);
  CHECK(params_equal(a.params, b.params));
  REQUIRE(a.report.epochs.size() == b.report.epochs.size());
  for (size_t i = 0; i < a.report.epochs.size(); ++i) {
    CHECK(a.report.epochs[i].objective == b.report.epochs[i].objective);
    CHECK(a.report.epochs[i].l2 == b.report.epochs[i].l2);
    CHECK(a.report.epochs[i].metric == b.report.epochs[i].metric);
    CHECK(*a.report.epochs[i].cmi == *b.report.epochs[i].cmi);
  }
  CHECK(a.report.best_epoch == b.report.best_epoch);
}

TEST_CASE("cmi=off run is bit-identical to a hand-rolled plain training loop") {
  // Oracle: an independent loop with its own Adam, same shuffle derivation.
  LabeledDataset train = tiny_task(30, 3);
  LabeledDataset dev = tiny_task(20, 4);
  TrainConfig cfg = fast_config();
  cfg.cmi_sign = CmiSign::off;
  cfg.epochs = 2;

  FitResult via_trainer = fit(tiny_model(), train, dev, cfg);

  // plain loop
  ModelParams params = ModelParams::init(tiny_model(), cfg.seed);
  auto trainable = params.all_params();
  std::vector<std::vector<double>> m, v;
  for (const Tensor& p : trainable) {
    m.emplace_back(static_cast<size_t>(p.size()), 0.0);
    v.emplace_back(static_cast<size_t>(p.size()), 0.0);
  }
  int64_t t = 0;
  ModelParams best;
  double best_metric = -1;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    auto order = epoch_order(static_cast<int64_t>(train.samples.size()), cfg.seed, epoch);
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
      const size_t count = std::min(static_cast<size_t>(cfg.batch_size), order.size() - start);
      std::vector<Sample> batch;
      for (size_t i = 0; i < count; ++i) batch.push_back(train.samples[static_cast<size_t>(order[start + i])]);
      for (Tensor& p : trainable) p.zero_grad();
      {
        Tape tape;
        Tensor loss = cls_loss(batch, params);
        tape.backward(loss);
      }
      ++t;
      const double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(t));
      const double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(t));
      for (size_t i = 0; i < trainable.size(); ++i) {
        auto data = trainable[i].mutable_data();
        for (size_t j = 0; j < data.size(); ++j) {
          const double g = trainable[i].has_grad() ? trainable[i].grad()[j] : 0.0;
          m[i][j] = cfg.adam_beta1 * m[i][j] + (1 - cfg.adam_beta1) * g;
          v[i][j] = cfg.adam_beta2 * v[i][j] + (1 - cfg.adam_beta2) * g * g;
          data[j] -= cfg.lr * (m[i][j] / bc1) / (std::sqrt(v[i][j] / bc2) + cfg.adam_eps);
        }
      }
    }
    DatasetEval dev_eval = evaluate_dataset(params, dev, cfg.eval_metric, false);
    if (dev_eval.metric > best_metric) {
      best_metric = dev_eval.metric;
      best = params.clone();
    }
  }
  CHECK(params_equal(via_trainer.params, best));
  CHECK(via_trainer.report.best_metric == best_metric);
}

TEST_CASE("cmi=off report carries no CMI fields") {
  LabeledDataset train = tiny_task(30, 5);
  LabeledDataset dev = tiny_task(20, 6);
  TrainConfig cfg = fast_config();
  cfg.cmi_sign = CmiSign::off;
  FitResult r = fit(tiny_model(), train, dev, cfg);
  for (const EpochStats& e : r.report.epochs) CHECK_FALSE(e.cmi.has_value());
  CHECK_FALSE(r.report.final_cmi_train.has_value());
  CHECK_FALSE(r.report.final_cmi_dev.has_value());
  CHECK(r.report.final_centroids.empty());
}

TEST_CASE("objective decomposition holds every epoch") {
  LabeledDataset train = tiny_task(30, 7);
  LabeledDataset dev = tiny_task(20, 8);
  for (CmiSign sign : {CmiSign::min, CmiSign::max, CmiSign::off}) {
    TrainConfig cfg = fast_config();
    cfg.cmi_sign = sign;
    cfg.lambda = 0.3;
    cfg.gamma = 0.1;
    FitResult r = fit(tiny_model(), train, dev, cfg);
    for (const EpochStats& e : r.report.epochs) {
      double expect = e.l2 + cfg.gamma * e.l1;
      if (sign == CmiSign::min) expect += cfg.lambda * *e.cmi;
      if (sign == CmiSign::max) expect -= cfg.lambda * *e.cmi;
      CHECK(std::abs(e.objective - expect) <= 1e-9);
    }
  }
}

TEST_CASE("classifier-only full-batch descent with backtracking is monotone") {
  // Coordinate descent: centroid refresh cannot raise the objective (the
  // refreshed centroid is the inner minimizer) and the backtracking sgd step
  // cannot raise it either, so the epoch objective sequence is non-increasing.
  LabeledDataset train = tiny_task(24, 9);
  LabeledDataset dev = tiny_task(20, 10);
  TrainConfig cfg;
  cfg.cmi_sign = CmiSign::min;
  cfg.lambda = 0.5;
  cfg.epochs = 6;
  cfg.batch_size = 1000;  // full batch
  cfg.lr = 0.5;
  cfg.seed = 12;
  cfg.optimizer = OptimizerKind::sgd;
  cfg.sgd_backtrack = true;
  cfg.classifier_only = true;
  FitResult r = fit(tiny_model(), train, dev, cfg);
  REQUIRE(r.report.epochs.size() == 6);
  for (size_t i = 1; i < r.report.epochs.size(); ++i) {
    CHECK(r.report.epochs[i].objective <= r.report.epochs[i - 1].objective + 1e-12);
  }
}

namespace {

// Enough optimizer steps for the CMI term to act on differentiated features;
// near initialization every f_x sits at the same near-uniform point and the
// term is flat.
TrainConfig paired_config() {
  TrainConfig c;
  c.epochs = 6;
  c.batch_size = 16;
  c.lr = 5e-3;
  c.seed = 7;
  c.cmi_mode = CmiMode::eq12_literal;
  return c;
}

double baseline_cmi(const FitResult& off, const LabeledDataset& train, CmiMode mode) {
  DatasetEval off_eval = evaluate_dataset(off.params, train, Metric::accuracy, false);
  CentroidSet off_centroids = compute_centroids(off_eval.fx, train.num_classes);
  return dataset_cmi(off_eval.fx, off_centroids, mode);
}

}  // namespace

TEST_CASE("min-CMI run ends with lower CMI than the cmi=off baseline (paired seeds)") {
  LabeledDataset train = tiny_task(600, 13);
  LabeledDataset dev = tiny_task(40, 14);
  TrainConfig base = paired_config();
  base.cmi_sign = CmiSign::off;
  FitResult off = fit(tiny_model(), train, dev, base);
  const double off_cmi = baseline_cmi(off, train, base.cmi_mode);

  TrainConfig min_cfg = base;
  min_cfg.cmi_sign = CmiSign::min;
  min_cfg.lambda = 0.5;
  FitResult min_run = fit(tiny_model(), train, dev, min_cfg);
  CHECK(*min_run.report.final_cmi_train < off_cmi);
  CHECK(min_run.report.best_metric >= off.report.best_metric - 0.05);
}

TEST_CASE("max-CMI run ends with higher CMI than the cmi=off baseline (paired seeds)") {
  LabeledDataset train = tiny_task(600, 13);
  LabeledDataset dev = tiny_task(40, 14);
  TrainConfig base = paired_config();
  base.cmi_sign = CmiSign::off;
  FitResult off = fit(tiny_model(), train, dev, base);
  const double off_cmi = baseline_cmi(off, train, base.cmi_mode);

  TrainConfig max_cfg = base;
  max_cfg.cmi_sign = CmiSign::max;
  max_cfg.lambda = 0.5;
  max_cfg.centroid_refresh = CentroidRefresh::per_step_ema;  // track dispersing clusters
  FitResult max_run = fit(tiny_model(), train, dev, max_cfg);
  CHECK(*max_run.report.final_cmi_train > off_cmi);
  for (const EpochStats& e : max_run.report.epochs) CHECK(e.clip_events == 0);
}

TEST_CASE("mild max-CMI keeps the eval metric within 5 points of baseline") {
  LabeledDataset train = tiny_task(200, 13);
  LabeledDataset dev = tiny_task(40, 14);
  TrainConfig base = paired_config();
  base.cmi_sign = CmiSign::off;
  FitResult off = fit(tiny_model(), train, dev, base);

  TrainConfig mild = base;
  mild.cmi_sign = CmiSign::max;
  mild.lambda = 0.05;
  FitResult mild_run = fit(tiny_model(), train, dev, mild);
  CHECK(mild_run.report.best_metric >= off.report.best_metric - 0.05);
}

TEST_CASE("centroid refresh leaves the objective at the inner minimum") {
  // After a fit, perturbing any refreshed centroid must not lower the
  // min-CMI batch objective (10 random perturbations per class).
  LabeledDataset train = tiny_task(20, 17);
  LabeledDataset dev = tiny_task(20, 18);
  TrainConfig cfg = fast_config();
  cfg.cmi_sign = CmiSign::min;
  cfg.lambda = 0.5;
  FitResult r = fit(tiny_model(), train, dev, cfg);

  DatasetEval eval = evaluate_dataset(r.params, train, cfg.eval_metric, false);
  CentroidSet refreshed = compute_centroids(eval.fx, train.num_classes);
  const double at_centroid =
      min_cmi_loss(train.samples, r.params, refreshed, cfg.lambda, 0.0, cfg.cmi_mode).value();
  std::mt19937_64 rng(19);
  for (int y = 0; y < train.num_classes; ++y) {
    for (int trial = 0; trial < 10; ++trial) {
      CentroidSet perturbed = refreshed;
      auto& g = perturbed.g[static_cast<size_t>(y)];
      double z = 0;
      for (double& val : g) {
        val *= std::exp(0.2 * normal_sample(rng));
        z += val;
      }
      for (double& val : g) val /= z;
      const double at_perturbed =
          min_cmi_loss(train.samples, r.params, perturbed, cfg.lambda, 0.0, cfg.cmi_mode).value();
      CHECK(at_perturbed >= at_centroid - 1e-12);
    }
  }
}

TEST_CASE("per-step EMA centroid refresh trains and reports") {
  LabeledDataset train = tiny_task(30, 20);
  LabeledDataset dev = tiny_task(20, 21);
  TrainConfig cfg = fast_config();
  cfg.cmi_sign = CmiSign::min;
  cfg.lambda = 0.5;
  cfg.centroid_refresh = CentroidRefresh::per_step_ema;
  cfg.ema_beta = 0.9;
  FitResult r = fit(tiny_model(), train, dev, cfg);
  CHECK(r.report.epochs.size() == 2);
  CHECK(r.report.final_cmi_train.has_value());
}

TEST_CASE("empty class raises a degenerate-cluster error when CMI is active") {
  LabeledDataset train = tiny_task(30, 22);
  // strip class 1
  LabeledDataset broken;
  broken.split = "train";
  broken.num_classes = 2;
  for (const Sample& s : train.samples) {
    if (s.label == 0) broken.samples.push_back(s);
  }
  broken.rebuild_index();
  LabeledDataset dev = tiny_task(20, 23);
  TrainConfig cfg = fast_config();
  cfg.cmi_sign = CmiSign::min;
  try {
    fit(tiny_model(), broken, dev, cfg);
    FAIL("expected InputError");
  } catch (const InputError& e) {
    CHECK(std::string(e.what()).find("degenerate") != std::string::npos);
  }
}

TEST_CASE("divergence aborts with epoch/step context and a last-good checkpoint") {
  LabeledDataset train = tiny_task(30, 24);
  LabeledDataset dev = tiny_task(20, 25);
  TrainConfig cfg = fast_config();
  cfg.lr = 1e200;  // step 1 inflates the weights, step 2's matmul overflows
  cfg.epochs = 3;
  try {
    fit(tiny_model(), train, dev, cfg);
    FAIL("expected TrainingDivergedError");
  } catch (const TrainingDivergedError& e) {
    CHECK(std::string(e.what()).find("epoch") != std::string::npos);
    CHECK(std::string(e.what()).find("step") != std::string::npos);
    REQUIRE(e.last_good != nullptr);
    CHECK(e.last_good->config.vocab_size == 24);
  }
}

TEST_CASE("sweep runs the grid with median-by-metric selection") {
  LabeledDataset train = tiny_task(30, 26);
  LabeledDataset dev = tiny_task(20, 27);
  TrainConfig base = fast_config();
  base.cmi_sign = CmiSign::min;
  base.epochs = 1;
  const double grid[] = {0.1, 0.5};
  SweepResult r = sweep(tiny_model(), train, dev, base, grid, 3);
  REQUIRE(r.runs.size() == 6);
  REQUIRE(r.median_index.size() == 2);
  // seeds derive as base + run_index
  CHECK(r.runs[0].seed == base.seed);
  CHECK(r.runs[1].seed == base.seed + 1);
  CHECK(r.runs[2].seed == base.seed + 2);
  // runs grouped by lambda in grid order
  CHECK(r.runs[0].lambda == 0.1);
  CHECK(r.runs[3].lambda == 0.5);
  for (size_t li = 0; li < 2; ++li) {
    const int64_t mi = r.median_index[li];
    REQUIRE(mi >= 0);
    // the median run's metric is neither the max nor the min of the three
    std::vector<double> metrics;
    for (int run = 0; run < 3; ++run) metrics.push_back(r.runs[li * 3 + static_cast<size_t>(run)].report.best_metric);
    std::sort(metrics.begin(), metrics.end());
    CHECK(r.runs[static_cast<size_t>(mi)].report.best_metric == metrics[1]);
  }
  SUBCASE("grid outside the paper range is rejected") {
    const double bad[] = {1.5};
    CHECK_THROWS_AS(sweep(tiny_model(), train, dev, base, bad, 3), ConfigError);
  }
  SUBCASE("lookup hook skips completed cells") {
    int computed = 0;
    SweepHooks hooks;
    hooks.lookup = [&](double lambda, int run_index) -> std::optional<SweepRun> {
      if (lambda == 0.1) {
        SweepRun cached;
        cached.lambda = lambda;
        cached.run_index = run_index;
        cached.seed = base.seed + static_cast<uint64_t>(run_index);
        cached.report.best_metric = 0.5;
        return cached;
      }
      return std::nullopt;
    };
    hooks.persist = [&](const SweepRun&) { ++computed; };
    SweepResult rr = sweep(tiny_model(), train, dev, base, grid, 3, &hooks);
    CHECK(computed == 3);  // only the lambda=0.5 cells were computed
  }
}

TEST_CASE("select_teacher arithmetic") {
  SUBCASE("spec example: ratio 4.0 beats 1.8") {
    TeacherCandidate cands[] = {{0.1, 0.9, 0.5}, {0.2, 0.8, 0.2}};
    TeacherChoice c = select_teacher(cands);
    CHECK(c.index == 1);
    CHECK(c.ratio == doctest::Approx(4.0).epsilon(1e-12));
    CHECK_FALSE(c.zero_cmi_warning);
  }
  SUBCASE("single candidate wins by default") {
    TeacherCandidate cands[] = {{0.3, 0.7, 0.1}};
    CHECK(select_teacher(cands).index == 0);
  }
  SUBCASE("equal ratios break toward the smaller lambda") {
    TeacherCandidate cands[] = {{0.4, 0.8, 0.4}, {0.1, 0.4, 0.2}};
    // both ratios are 2.0
    CHECK(select_teacher(cands).index == 1);
  }
  SUBCASE("zero CMI ranks last with a warning") {
    TeacherCandidate cands[] = {{0.1, 0.99, 0.0}, {0.2, 0.5, 0.5}};
    TeacherChoice c = select_teacher(cands);
    CHECK(c.index == 1);
    CHECK(c.zero_cmi_warning);
    CHECK(std::isinf(c.ratios[0]));
  }
  SUBCASE("empty candidate list rejected") {
    std::vector<TeacherCandidate> none;
    CHECK_THROWS_AS(select_teacher(none), InputError);
  }
}

TEST_CASE("evaluate_dataset is identical under parallel evaluation") {
  LabeledDataset train = tiny_task(40, 28);
  ModelParams params = ModelParams::init(tiny_model(), 29);
  DatasetEval serial = evaluate_dataset(params, train, Metric::accuracy, true, 1);
  DatasetEval parallel = evaluate_dataset(params, train, Metric::accuracy, true, 4);
  CHECK(serial.cls_sum == parallel.cls_sum);
  CHECK(serial.lm_sum == parallel.lm_sum);
  CHECK(serial.metric == parallel.metric);
  CHECK(serial.preds == parallel.preds);
}
