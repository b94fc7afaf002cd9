#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "cmitune/losses.hpp"

using namespace cmitune;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.vocab_size = 12;
  c.embed_dim = 8;
  c.context_len = 8;
  c.num_layers = 1;
  c.num_heads = 2;
  c.ffn_mult = 2;
  c.num_classes = 2;
  c.pooling = Pooling::last_token;
  return c;
}

std::vector<Sample> tiny_batch(int n, std::mt19937_64& rng, int num_classes = 2, int len = 5) {
  std::vector<Sample> batch;
  for (int i = 0; i < n; ++i) {
    Sample s;
    s.id = i;
    s.label = i % num_classes;
    for (int j = 0; j < len; ++j) s.tokens.push_back(4 + static_cast<int>(rng() % 8));
    batch.push_back(std::move(s));
  }
  return batch;
}

CentroidSet centroids_from(const std::vector<Sample>& batch, const ModelParams& params) {
  std::vector<FeatureDistribution> fds;
  for (const Sample& s : batch) {
    Tensor h = pooled_feature(s.tokens, params);
    fds.push_back(feature_distribution(h.data(), s.id, s.label));
  }
  return compute_centroids(fds, params.config.num_classes);
}

}  // namespace

TEST_CASE("lm_loss with zero token embedding equals predicted-count * log |V|") {
  // W_e = 0 ties the output projection to zero, so every position predicts
  // the uniform distribution regardless of the hidden state.
  ModelParams p = ModelParams::init(tiny_config(), 1);
  for (double& v : p.token_embedding.mutable_data()) v = 0.0;
  std::mt19937_64 rng(2);
  auto batch = tiny_batch(3, rng);
  const double expect = 3.0 * 4.0 * std::log(12.0);  // 3 sequences, 4 predicted tokens each
  CHECK(lm_loss(batch, p).value() == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("lm_loss equals the negated sum of sequence_log_prob") {
  ModelParams p = ModelParams::init(tiny_config(), 3);
  std::mt19937_64 rng(4);
  auto batch = tiny_batch(4, rng);
  double expect = 0.0;
  for (const Sample& s : batch) expect -= sequence_log_prob(s.tokens, p).value();
  CHECK(lm_loss(batch, p).value() == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("lm_loss rejects too-short sequences") {
  ModelParams p = ModelParams::init(tiny_config(), 3);
  std::vector<Sample> bad{{{7}, 0, 0}};
  CHECK_THROWS_AS(lm_loss(bad, p), InputError);
}

TEST_CASE("cls_loss") {
  ModelParams p = ModelParams::init(tiny_config(), 5);
  std::mt19937_64 rng(6);
  auto batch = tiny_batch(4, rng);
  SUBCASE("uniform classifier gives batch * log C") {
    for (double& v : p.classifier.mutable_data()) v = 0.0;
    CHECK(cls_loss(batch, p).value() == doctest::Approx(4.0 * std::log(2.0)).epsilon(1e-12));
  }
  SUBCASE("matches hand-summed -log of classify outputs") {
    double expect = 0.0;
    for (const Sample& s : batch) {
      Tensor probs = classify(s.tokens, p);
      expect -= std::log(probs.at2(0, s.label));
    }
    CHECK(cls_loss(batch, p).value() == doctest::Approx(expect).epsilon(1e-10));
  }
  SUBCASE("label out of range rejected") {
    auto bad = batch;
    bad[0].label = 7;
    CHECK_THROWS_AS(cls_loss(bad, p), InputError);
  }
}

TEST_CASE("final_loss composition") {
  ModelParams p = ModelParams::init(tiny_config(), 7);
  std::mt19937_64 rng(8);
  auto batch = tiny_batch(3, rng);
  const double l2 = cls_loss(batch, p).value();
  const double l1 = lm_loss(batch, p).value();
  CHECK(final_loss(batch, p, 0.0).value() == l2);  // gamma = 0 is exactly L_2
  CHECK(final_loss(batch, p, 1.0).value() == doctest::Approx(l2 + l1).epsilon(1e-12));
  CHECK(final_loss(batch, p, 0.5).value() == doctest::Approx(l2 + 0.5 * l1).epsilon(1e-12));
  CHECK_THROWS_AS(final_loss(batch, p, -0.1), ConfigError);
}

TEST_CASE("min/max CMI losses") {
  ModelParams p = ModelParams::init(tiny_config(), 9);
  std::mt19937_64 rng(10);
  auto batch = tiny_batch(6, rng);
  CentroidSet centroids = centroids_from(batch, p);

  SUBCASE("all f_x at their centroids collapses to final_loss exactly") {
    // Identical tokens within each class force identical f_x, so the
    // centroid equals every member and the KL terms vanish.
    auto clone_batch = batch;
    for (Sample& s : clone_batch) s.tokens = batch[static_cast<size_t>(s.label)].tokens;
    CentroidSet tight = centroids_from(clone_batch, p);
    const double fl = final_loss(clone_batch, p, 0.0).value();
    const double mn = min_cmi_loss(clone_batch, p, tight, 0.5, 0.0, CmiMode::eq11_average).value();
    CHECK(mn == doctest::Approx(fl).epsilon(1e-13));
  }
  SUBCASE("min + max = 2 * final on identical inputs") {
    for (CmiMode mode : {CmiMode::eq11_average, CmiMode::eq12_literal}) {
      const double fl = final_loss(batch, p, 0.25).value();
      const double mn = min_cmi_loss(batch, p, centroids, 0.5, 0.25, mode).value();
      const double mx = max_cmi_loss(batch, p, centroids, 0.5, 0.25, mode).value();
      CHECK(mn + mx == doctest::Approx(2.0 * fl).epsilon(1e-12));
      CHECK(mn >= fl);  // CMI >= 0
      CHECK(mx <= fl);
    }
  }
  SUBCASE("small lambda approaches final_loss") {
    const double fl = final_loss(batch, p, 0.0).value();
    const double mn = min_cmi_loss(batch, p, centroids, 1e-12, 0.0, CmiMode::eq11_average).value();
    CHECK(mn == doctest::Approx(fl).epsilon(1e-9));
  }
  SUBCASE("matches final_loss + lambda * dataset_cmi composition") {
    std::vector<FeatureDistribution> fds;
    for (const Sample& s : batch) {
      Tensor h = pooled_feature(s.tokens, p);
      fds.push_back(feature_distribution(h.data(), s.id, s.label));
    }
    for (CmiMode mode : {CmiMode::eq11_average, CmiMode::eq12_literal}) {
      const double cmi = dataset_cmi(fds, centroids, mode);
      const double fl = final_loss(batch, p, 0.0).value();
      const double mn = min_cmi_loss(batch, p, centroids, 0.5, 0.0, mode).value();
      CHECK(mn == doctest::Approx(fl + 0.5 * cmi).epsilon(1e-10));
    }
  }
  SUBCASE("lambda <= 0 rejected when the CMI term is active") {
    CHECK_THROWS_AS(min_cmi_loss(batch, p, centroids, 0.0, 0.0, CmiMode::eq11_average), ConfigError);
  }
  SUBCASE("max-CMI clipping freezes oversized contributions") {
    int64_t clips = 0;
    // A ludicrously small cap guarantees every sample clips.
    const double capped =
        max_cmi_loss(batch, p, centroids, 1.0, 0.0, CmiMode::eq12_literal, 1e-15, &clips).value();
    CHECK(clips == 6);
    const double fl = final_loss(batch, p, 0.0).value();
    CHECK(capped == doctest::Approx(fl - 1.0 * (6 * 1e-15) / 2.0).epsilon(1e-9));
  }
}

TEST_CASE("kd_loss") {
  SUBCASE("alpha = 0 is pure cross-entropy") {
    Tensor student = Tensor::from_data({2, 2}, {2.0, -1.0, 0.5, 0.25});
    Tensor teacher = Tensor::from_data({2, 2}, {9.0, 9.0, 9.0, 9.0});
    std::vector<int> labels{0, 1};
    const double got = kd_loss(student, teacher, labels, 0.0, 3.0).value();
    double expect = 0.0;
    expect -= std::log(std::exp(2.0) / (std::exp(2.0) + std::exp(-1.0)));
    expect -= std::log(std::exp(0.25) / (std::exp(0.5) + std::exp(0.25)));
    CHECK(got == doctest::Approx(expect).epsilon(1e-12));
  }
  SUBCASE("identical logits at alpha = 1 give zero") {
    Tensor logits = Tensor::from_data({2, 3}, {1, 2, 3, -1, 0, 1});
    std::vector<int> labels{0, 2};
    CHECK(std::abs(kd_loss(logits, logits, labels, 1.0, 2.0).value()) < 1e-12);
  }
  SUBCASE("perfect one-hot prediction costs about zero, bounded by clamping") {
    Tensor student = Tensor::from_data({1, 2}, {1000.0, 0.0});
    std::vector<int> labels{0};
    const double v = kd_loss(student, student, labels, 0.0, 1.0).value();
    CHECK(v >= 0.0);
    CHECK(v < 1e-9);
  }
  SUBCASE("alpha = 0.5, T = 2 two-class hand case") {
    // student logits [1, 0], teacher logits [2, 0], label 0
    Tensor student = Tensor::from_data({1, 2}, {1.0, 0.0});
    Tensor teacher = Tensor::from_data({1, 2}, {2.0, 0.0});
    std::vector<int> labels{0};
    const double ce = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
    const double p0 = std::exp(1.0) / (std::exp(1.0) + 1.0);  // teacher softened at T=2
    const double p1 = 1.0 / (std::exp(1.0) + 1.0);
    const double q0 = std::exp(0.5) / (std::exp(0.5) + 1.0);  // student softened at T=2
    const double q1 = 1.0 / (std::exp(0.5) + 1.0);
    const double kl = p0 * std::log(p0 / q0) + p1 * std::log(p1 / q1);
    const double expect = 0.5 * ce + 0.5 * 4.0 * kl;
    CHECK(kd_loss(student, teacher, labels, 0.5, 2.0).value() == doctest::Approx(expect).epsilon(1e-12));
  }
  SUBCASE("shape and range violations rejected") {
    Tensor a = Tensor::from_data({1, 2}, {1, 2});
    Tensor b = Tensor::from_data({1, 3}, {1, 2, 3});
    std::vector<int> labels{0};
    CHECK_THROWS_AS(kd_loss(a, b, labels, 0.5, 2.0), DimensionError);
    CHECK_THROWS_AS(kd_loss(a, a, labels, 1.5, 2.0), InputError);
    CHECK_THROWS_AS(kd_loss(a, a, labels, 0.5, 0.5), InputError);
  }
}

TEST_CASE("loss weight validation") {
  LossWeights w;
  w.gamma = -1;
  CHECK_THROWS_AS(w.validate(), ConfigError);
  w = LossWeights{};
  w.alpha = 2;
  CHECK_THROWS_AS(w.validate(), ConfigError);
  w = LossWeights{};
  w.temperature = 0.5;
  CHECK_THROWS_AS(w.validate(), ConfigError);
}

TEST_CASE("every loss passes finite differences end to end through the model") {
  // The acceptance suite runs 20 seeds; here a quick pass on 2 seeds.
  for (uint64_t seed : {1ull, 2ull}) {
    ModelConfig cfg = tiny_config();
    ModelParams p = ModelParams::init(cfg, seed);
    std::mt19937_64 rng(derive_seed(seed, "loss_fd_batch"));
    auto batch = tiny_batch(3, rng);
    CentroidSet centroids = centroids_from(batch, p);
    auto params = p.all_params();
    const FiniteDiffOptions opts{.h = 1e-5, .tol = 1e-4, .max_coords_per_param = 2, .seed = seed};

    auto check = [&](const char* name, const std::function<Tensor()>& f) {
      auto r = finite_diff_check(f, params, opts);
      CHECK_MESSAGE(r.pass, name, " seed ", seed, ": ", r.worst);
    };
    check("lm_loss", [&]() { return lm_loss(batch, p); });
    check("cls_loss", [&]() { return cls_loss(batch, p); });
    check("final_loss", [&]() { return final_loss(batch, p, 0.5); });
    check("min_cmi_loss",
          [&]() { return min_cmi_loss(batch, p, centroids, 0.5, 0.5, CmiMode::eq11_average); });
    check("max_cmi_loss",
          [&]() { return max_cmi_loss(batch, p, centroids, 0.5, 0.5, CmiMode::eq11_average); });
    check("kd_loss", [&]() {
      std::vector<Tensor> s_rows, t_rows;
      std::vector<int> labels;
      for (const Sample& s : batch) {
        s_rows.push_back(classify_logits(s.tokens, p));
        std::vector<double> t(static_cast<size_t>(cfg.num_classes));
        std::mt19937_64 trng(derive_seed(seed, "teacher", static_cast<uint64_t>(s.id)));
        for (double& v : t) v = normal_sample(trng);
        t_rows.push_back(Tensor::from_data({1, cfg.num_classes}, std::move(t)));
        labels.push_back(s.label);
      }
      return kd_loss_rows(s_rows, t_rows, labels, 0.5, 2.0);
    });
  }
}
