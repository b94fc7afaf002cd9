#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "cmitune/checkpoint.hpp"
#include "cmitune/model.hpp"

using namespace cmitune;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.vocab_size = 16;
  c.embed_dim = 8;
  c.context_len = 8;
  c.num_layers = 2;
  c.num_heads = 2;
  c.ffn_mult = 2;
  c.num_classes = 3;
  c.pooling = Pooling::last_token;
  return c;
}

void fill(Tensor& t, double v) {
  for (double& x : t.mutable_data()) x = v;
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig c = tiny_config();
  c.num_heads = 3;  // 8 % 3 != 0
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  c.context_len = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  c.num_classes = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("embed is W_e row plus W_p row") {
  ModelParams p = ModelParams::init(tiny_config(), 1);
  std::vector<int> tokens{3, 1, 4};

  SUBCASE("zero position embedding leaves token rows") {
    fill(p.position_embedding, 0.0);
    Tensor x = embed(tokens, p);
    for (size_t i = 0; i < tokens.size(); ++i) {
      for (int64_t j = 0; j < 8; ++j) {
        CHECK(x.at2(static_cast<int64_t>(i), j) ==
              p.token_embedding.at2(tokens[i], j));
      }
    }
  }
  SUBCASE("zero token embedding leaves position rows") {
    fill(p.token_embedding, 0.0);
    Tensor x = embed(tokens, p);
    for (size_t i = 0; i < tokens.size(); ++i) {
      for (int64_t j = 0; j < 8; ++j) {
        CHECK(x.at2(static_cast<int64_t>(i), j) ==
              p.position_embedding.at2(static_cast<int64_t>(i), j));
      }
    }
  }
  SUBCASE("random params match direct-indexing oracle") {
    Tensor x = embed(tokens, p);
    for (size_t i = 0; i < tokens.size(); ++i) {
      for (int64_t j = 0; j < 8; ++j) {
        const double expect = p.token_embedding.at2(tokens[i], j) +
                              p.position_embedding.at2(static_cast<int64_t>(i), j);
        CHECK(x.at2(static_cast<int64_t>(i), j) == doctest::Approx(expect).epsilon(1e-15));
      }
    }
  }
  SUBCASE("context overflow rejected") {
    std::vector<int> too_long(9, 1);
    CHECK_THROWS_AS(embed(too_long, p), InputError);
  }
  SUBCASE("out-of-vocab token rejected") {
    std::vector<int> bad{3, 99};
    CHECK_THROWS_AS(embed(bad, p), InputError);
  }
}

TEST_CASE("block causality: perturbing row j leaves rows < j exactly unchanged") {
  ModelParams p = ModelParams::init(tiny_config(), 7);
  std::mt19937_64 rng(99);
  Tensor x = Tensor::randn({6, 8}, 1.0, rng);
  Tensor base = block_forward(x, p.blocks[0], 2);
  for (int64_t j = 1; j < 6; ++j) {
    Tensor xp = x.clone_detached();
    {
      auto d = xp.mutable_data();
      for (int64_t c = 0; c < 8; ++c) d[static_cast<size_t>(j * 8 + c)] += 0.5 + static_cast<double>(c);
    }
    Tensor out = block_forward(xp, p.blocks[0], 2);
    for (int64_t i = 0; i < j; ++i) {
      for (int64_t c = 0; c < 8; ++c) {
        CHECK(out.at2(i, c) == base.at2(i, c));  // bit-exact
      }
    }
  }
}

TEST_CASE("attention matches a brute-force per-position oracle") {
  // 3-token input, one layer, against explicit per-position masked attention.
  ModelConfig cfg = tiny_config();
  cfg.num_heads = 2;
  ModelParams p = ModelParams::init(cfg, 13);
  std::mt19937_64 rng(5);
  Tensor x = Tensor::randn({3, 8}, 1.0, rng);
  Tensor out = block_forward(x, p.blocks[0], cfg.num_heads);

  // Oracle: recompute with plain scalar code.
  const int64_t len = 3, d = 8, heads = 2, hd = d / heads;
  auto get = [](const Tensor& t, int64_t i, int64_t j) { return t.at2(i, j); };
  // layer norm
  std::vector<std::vector<double>> n1(static_cast<size_t>(len), std::vector<double>(static_cast<size_t>(d)));
  for (int64_t i = 0; i < len; ++i) {
    double mu = 0, var = 0;
    for (int64_t j = 0; j < d; ++j) mu += get(x, i, j);
    mu /= static_cast<double>(d);
    for (int64_t j = 0; j < d; ++j) var += (get(x, i, j) - mu) * (get(x, i, j) - mu);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + 1e-5);
    for (int64_t j = 0; j < d; ++j) {
      n1[static_cast<size_t>(i)][static_cast<size_t>(j)] =
          (get(x, i, j) - mu) * inv * p.blocks[0].ln1_gain.at(j) + p.blocks[0].ln1_bias.at(j);
    }
  }
  auto project = [&](const Tensor& w, const Tensor& b, int64_t i, int64_t j) {
    double s = b.at(j);
    for (int64_t k = 0; k < d; ++k) s += n1[static_cast<size_t>(i)][static_cast<size_t>(k)] * w.at2(k, j);
    return s;
  };
  std::vector<std::vector<double>> ctx(static_cast<size_t>(len), std::vector<double>(static_cast<size_t>(d), 0.0));
  for (int h = 0; h < heads; ++h) {
    for (int64_t i = 0; i < len; ++i) {
      // scores over positions <= i only (explicit mask)
      std::vector<double> scores;
      for (int64_t t = 0; t <= i; ++t) {
        double s = 0;
        for (int64_t c = 0; c < hd; ++c) {
          s += project(p.blocks[0].wq, p.blocks[0].bq, i, h * hd + c) *
               project(p.blocks[0].wk, p.blocks[0].bk, t, h * hd + c);
        }
        scores.push_back(s / std::sqrt(static_cast<double>(hd)));
      }
      double mx = scores[0];
      for (double s : scores) mx = std::max(mx, s);
      double z = 0;
      for (double& s : scores) {
        s = std::exp(s - mx);
        z += s;
      }
      for (double& s : scores) s /= z;
      for (int64_t c = 0; c < hd; ++c) {
        double acc = 0;
        for (int64_t t = 0; t <= i; ++t) {
          acc += scores[static_cast<size_t>(t)] * project(p.blocks[0].wv, p.blocks[0].bv, t, h * hd + c);
        }
        ctx[static_cast<size_t>(i)][static_cast<size_t>(h * hd + c)] = acc;
      }
    }
  }
  // output projection + residual
  for (int64_t i = 0; i < len; ++i) {
    std::vector<double> row(static_cast<size_t>(d));
    for (int64_t j = 0; j < d; ++j) {
      double s = p.blocks[0].bo.at(j);
      for (int64_t k = 0; k < d; ++k) s += ctx[static_cast<size_t>(i)][static_cast<size_t>(k)] * p.blocks[0].wo.at2(k, j);
      row[static_cast<size_t>(j)] = get(x, i, j) + s;
    }
    ctx[static_cast<size_t>(i)] = row;
  }
  // second layer norm + FF + residual
  for (int64_t i = 0; i < len; ++i) {
    double mu = 0, var = 0;
    for (int64_t j = 0; j < d; ++j) mu += ctx[static_cast<size_t>(i)][static_cast<size_t>(j)];
    mu /= static_cast<double>(d);
    for (int64_t j = 0; j < d; ++j) {
      const double dv = ctx[static_cast<size_t>(i)][static_cast<size_t>(j)] - mu;
      var += dv * dv;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + 1e-5);
    std::vector<double> n2(static_cast<size_t>(d));
    for (int64_t j = 0; j < d; ++j) {
      n2[static_cast<size_t>(j)] = (ctx[static_cast<size_t>(i)][static_cast<size_t>(j)] - mu) * inv *
                                       p.blocks[0].ln2_gain.at(j) +
                                   p.blocks[0].ln2_bias.at(j);
    }
    const int64_t hidden = 2 * d;
    std::vector<double> a(static_cast<size_t>(hidden));
    for (int64_t j = 0; j < hidden; ++j) {
      double s = p.blocks[0].b_ff1.at(j);
      for (int64_t k = 0; k < d; ++k) s += n2[static_cast<size_t>(k)] * p.blocks[0].w_ff1.at2(k, j);
      a[static_cast<size_t>(j)] = 0.5 * s * (1.0 + std::erf(s / std::sqrt(2.0)));
    }
    for (int64_t j = 0; j < d; ++j) {
      double s = p.blocks[0].b_ff2.at(j);
      for (int64_t k = 0; k < hidden; ++k) s += a[static_cast<size_t>(k)] * p.blocks[0].w_ff2.at2(k, j);
      const double expect = ctx[static_cast<size_t>(i)][static_cast<size_t>(j)] + s;
      CHECK(std::abs(out.at2(i, j) - expect) < 1e-12);
    }
  }
}

TEST_CASE("lm distribution rows are probabilities, zero feature gives uniform") {
  ModelParams p = ModelParams::init(tiny_config(), 3);
  SUBCASE("rows sum to one") {
    std::vector<int> tokens{1, 2, 3, 4};
    Tensor x_l = encode_sequence(tokens, p);
    Tensor dist = lm_token_distribution(x_l, p);
    for (int64_t i = 0; i < 4; ++i) {
      double s = 0;
      for (int64_t j = 0; j < 16; ++j) s += dist.at2(i, j);
      CHECK(std::abs(s - 1.0) <= 1e-12);
    }
  }
  SUBCASE("zero X_L row gives the uniform distribution") {
    Tensor zero = Tensor::zeros({1, 8});
    Tensor dist = lm_token_distribution(zero, p);
    for (int64_t j = 0; j < 16; ++j) {
      CHECK(dist.at2(0, j) == doctest::Approx(1.0 / 16).epsilon(1e-13));
    }
  }
  SUBCASE("matches an independent softmax(X_L W_e^T) oracle") {
    std::vector<int> tokens{5, 9};
    Tensor x_l = encode_sequence(tokens, p);
    Tensor dist = lm_token_distribution(x_l, p);
    for (int64_t i = 0; i < 2; ++i) {
      std::vector<double> logits(16);
      for (int64_t v = 0; v < 16; ++v) {
        double s = 0;
        for (int64_t j = 0; j < 8; ++j) s += x_l.at2(i, j) * p.token_embedding.at2(v, j);
        logits[static_cast<size_t>(v)] = s;
      }
      double mx = logits[0];
      for (double l : logits) mx = std::max(mx, l);
      double z = 0;
      for (double& l : logits) {
        l = std::exp(l - mx);
        z += l;
      }
      for (int64_t v = 0; v < 16; ++v) {
        CHECK(dist.at2(i, v) == doctest::Approx(logits[static_cast<size_t>(v)] / z).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("sequence_log_prob") {
  ModelParams p = ModelParams::init(tiny_config(), 21);
  SUBCASE("too-short sequence rejected") {
    std::vector<int> one{2};
    CHECK_THROWS_AS(sequence_log_prob(one, p), InputError);
  }
  SUBCASE("len 2 equals the single conditional log-prob") {
    std::vector<int> tokens{2, 7};
    const double lp = sequence_log_prob(tokens, p).value();
    std::vector<int> prefix{2};
    Tensor dist = lm_token_distribution(encode_sequence(prefix, p), p);
    CHECK(lp == doctest::Approx(std::log(dist.at2(0, 7))).epsilon(1e-12));
  }
  SUBCASE("equals the sum of per-position log-probs") {
    std::vector<int> tokens{2, 7, 1, 4};
    const double lp = sequence_log_prob(tokens, p).value();
    std::vector<int> prefix(tokens.begin(), tokens.end() - 1);
    Tensor dist = lm_token_distribution(encode_sequence(prefix, p), p);
    double expect = 0;
    for (size_t i = 0; i + 1 < tokens.size(); ++i) {
      expect += std::log(dist.at2(static_cast<int64_t>(i), tokens[i + 1]));
    }
    CHECK(lp == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("autoregressive normalization at |V|=2, k=3") {
  // Sum over all 2^3 continuations of exp(log P(t2,t3,t4 | t1)) must be 1.
  ModelConfig cfg;
  cfg.vocab_size = 2;
  cfg.embed_dim = 4;
  cfg.context_len = 3;
  cfg.num_layers = 2;
  cfg.num_heads = 2;
  cfg.ffn_mult = 2;
  cfg.num_classes = 2;
  cfg.pooling = Pooling::last_token;
  cfg.cls_token_id = 1;
  ModelParams p = ModelParams::init(cfg, 77);
  for (int t1 = 0; t1 < 2; ++t1) {
    double total = 0;
    for (int a = 0; a < 2; ++a)
      for (int b = 0; b < 2; ++b)
        for (int c = 0; c < 2; ++c) {
          std::vector<int> tokens{t1, a, b, c};
          total += std::exp(sequence_log_prob(tokens, p).value());
        }
    CHECK(std::abs(total - 1.0) <= 1e-9);
  }
}

TEST_CASE("pooling") {
  ModelConfig cfg = tiny_config();
  ModelParams p = ModelParams::init(cfg, 31);
  SUBCASE("last_token on a length-1 sequence is row 0") {
    std::vector<int> tokens{5};
    Tensor h = pooled_feature(tokens, p);
    Tensor x_l = encode_sequence(tokens, p);
    for (int64_t j = 0; j < 8; ++j) CHECK(h.at2(0, j) == x_l.at2(0, j));
  }
  SUBCASE("first_special picks the CLS position") {
    ModelConfig c2 = cfg;
    c2.pooling = Pooling::first_special;
    ModelParams p2 = ModelParams::init(c2, 31);
    std::vector<int> tokens{0, 5, 1, 6};  // CLS(id 1) at position 2
    CHECK(pooled_index(tokens, c2) == 2);
    Tensor h = pooled_feature(tokens, p2);
    Tensor x_l = encode_sequence(tokens, p2);
    for (int64_t j = 0; j < 8; ++j) CHECK(h.at2(0, j) == x_l.at2(2, j));
  }
  SUBCASE("first_special with no CLS present errors") {
    ModelConfig c2 = cfg;
    c2.pooling = Pooling::first_special;
    std::vector<int> tokens{0, 5, 6};
    CHECK_THROWS_AS(pooled_index(tokens, c2), InputError);
  }
}

TEST_CASE("classification head") {
  ModelConfig cfg = tiny_config();
  ModelParams p = ModelParams::init(cfg, 41);
  std::vector<int> tokens{3, 8, 2};
  SUBCASE("zero classifier gives the uniform distribution") {
    fill(p.classifier, 0.0);
    Tensor probs = classify(tokens, p);
    for (int64_t j = 0; j < 3; ++j) CHECK(probs.at2(0, j) == doctest::Approx(1.0 / 3).epsilon(1e-13));
  }
  SUBCASE("matches a softmax oracle and sums to one") {
    Tensor logits = classify_logits(tokens, p);
    Tensor probs = classify(tokens, p);
    double mx = logits.at2(0, 0);
    for (int64_t j = 1; j < 3; ++j) mx = std::max(mx, logits.at2(0, j));
    double z = 0;
    for (int64_t j = 0; j < 3; ++j) z += std::exp(logits.at2(0, j) - mx);
    double s = 0;
    for (int64_t j = 0; j < 3; ++j) {
      CHECK(probs.at2(0, j) == doctest::Approx(std::exp(logits.at2(0, j) - mx) / z).epsilon(1e-12));
      s += probs.at2(0, j);
    }
    CHECK(std::abs(s - 1.0) <= 1e-12);
  }
  SUBCASE("argmax invariant under adding a constant to all logits columns") {
    // Softmax shift-invariance through the classifier: adding c to every
    // column of W shifts logits by c * sum(h) per class... instead assert
    // directly on the probability head: probabilities from logits and from
    // logits + constant agree.
    Tensor logits = classify_logits(tokens, p);
    Tensor shifted = add(logits, Tensor::scalar(3.25));
    Tensor p1 = softmax_lastdim(logits);
    Tensor p2 = softmax_lastdim(shifted);
    for (int64_t j = 0; j < 3; ++j) CHECK(std::abs(p1.at2(0, j) - p2.at2(0, j)) <= 1e-12);
  }
}

TEST_CASE("checkpoint save/load round-trips bit-exactly") {
  ModelParams p = ModelParams::init(tiny_config(), 55);
  auto dir = std::filesystem::temp_directory_path() / "cmitune_model_tests";
  std::filesystem::create_directories(dir);
  const auto path = dir / "model.ckpt";
  save_checkpoint(p, path);
  ModelParams q = load_checkpoint(path);
  CHECK(q.config == p.config);
  auto np = p.named_params();
  auto nq = q.named_params();
  REQUIRE(np.size() == nq.size());
  for (size_t i = 0; i < np.size(); ++i) {
    CHECK(np[i].first == nq[i].first);
    const auto a = np[i].second.data();
    const auto b = nq[i].second.data();
    REQUIRE(a.size() == b.size());
    for (size_t j = 0; j < a.size(); ++j) CHECK(a[j] == b[j]);
  }
  // A second save of the loaded params produces identical bytes.
  const auto path2 = dir / "model2.ckpt";
  save_checkpoint(q, path2);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(s1 == s2);
}
