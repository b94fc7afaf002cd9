#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cmitune/tensor.hpp"

namespace cmitune {

enum class Pooling { first_special, last_token };

struct ModelConfig {
  int vocab_size = 512;
  int embed_dim = 64;     // d
  int context_len = 64;   // k
  int num_layers = 4;     // L
  int num_heads = 4;
  int ffn_mult = 4;       // hidden width multiplier of the feed-forward sublayer
  int num_classes = 2;    // C
  Pooling pooling = Pooling::first_special;
  int cls_token_id = 1;   // id scanned for by first_special pooling

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

// One pre-norm causal block: x + Attn(LN(x)), then x + FF(LN(x)).
struct BlockParams {
  Tensor ln1_gain, ln1_bias;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2_gain, ln2_bias;
  Tensor w_ff1, b_ff1, w_ff2, b_ff2;
};

struct ModelParams {
  ModelConfig config;
  Tensor token_embedding;     // |V| x d
  Tensor position_embedding;  // k x d
  std::vector<BlockParams> blocks;
  Tensor classifier;          // d x C

  // normal(0, 0.02) weights, zero biases/shifts, unit norm gains; seeded.
  static ModelParams init(const ModelConfig& config, uint64_t seed);

  std::vector<Tensor> all_params() const;
  std::vector<std::pair<std::string, Tensor>> named_params() const;
  ModelParams clone() const;
  void zero_grads() const;
};

// Row i = W_e[tokens[i]] + W_p[i]. Rejects sequences longer than the context.
Tensor embed(std::span<const int> tokens, const ModelParams& params);

Tensor block_forward(const Tensor& x, const BlockParams& block, int num_heads);

// Embedding plus the full block stack: X_L.
Tensor encode_sequence(std::span<const int> tokens, const ModelParams& params);

// Per-position next-token distribution: softmax(X_L W_e^T), weights tied to
// the token embedding.
Tensor lm_token_distribution(const Tensor& x_l, const ModelParams& params);

// log P(t_2..t_n | t_1); requires 2 <= len <= k+1.
Tensor sequence_log_prob(std::span<const int> tokens, const ModelParams& params);

// Index of the pooled row per the pooling config.
int64_t pooled_index(std::span<const int> tokens, const ModelConfig& config);

// The 1 x d row of X_L at the pooled position.
Tensor pooled_feature(std::span<const int> tokens, const ModelParams& params);

// Pre-softmax class scores h_s W as a 1 x C tensor.
Tensor classify_logits_from_feature(const Tensor& pooled, const ModelParams& params);
Tensor classify_logits(std::span<const int> tokens, const ModelParams& params);

// softmax(h_s W): probability vector over the C classes.
Tensor classify(std::span<const int> tokens, const ModelParams& params);

}  // namespace cmitune
