#include "cmitune/model.hpp"

#include <algorithm>
#include <cmath>

namespace cmitune {

void ModelConfig::validate() const {
  if (vocab_size < 2) throw ConfigError("model: vocab_size must be >= 2");
  if (embed_dim < 1) throw ConfigError("model: embed_dim must be >= 1");
  if (num_heads < 1 || embed_dim % num_heads != 0) {
    throw ConfigError("model: embed_dim " + std::to_string(embed_dim) +
                      " must be divisible by num_heads " + std::to_string(num_heads));
  }
  if (context_len < 2) throw ConfigError("model: context_len must be >= 2");
  if (num_classes < 2) throw ConfigError("model: num_classes must be >= 2");
  if (num_layers < 1) throw ConfigError("model: num_layers must be >= 1");
  if (ffn_mult < 1) throw ConfigError("model: ffn_mult must be >= 1");
  if (cls_token_id < 0 || cls_token_id >= vocab_size) {
    throw ConfigError("model: cls_token_id out of vocabulary range");
  }
}

ModelParams ModelParams::init(const ModelConfig& config, uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(derive_seed(seed, "model_init"));
  const int64_t d = config.embed_dim;
  const int64_t h = static_cast<int64_t>(config.ffn_mult) * d;
  constexpr double kInitStd = 0.02;

  ModelParams p;
  p.config = config;
  p.token_embedding = Tensor::randn({config.vocab_size, d}, kInitStd, rng, true);
  p.position_embedding = Tensor::randn({config.context_len, d}, kInitStd, rng, true);
  for (int l = 0; l < config.num_layers; ++l) {
    BlockParams b;
    b.ln1_gain = Tensor::full({d}, 1.0, true);
    b.ln1_bias = Tensor::zeros({d}, true);
    b.wq = Tensor::randn({d, d}, kInitStd, rng, true);
    b.bq = Tensor::zeros({d}, true);
    b.wk = Tensor::randn({d, d}, kInitStd, rng, true);
    b.bk = Tensor::zeros({d}, true);
    b.wv = Tensor::randn({d, d}, kInitStd, rng, true);
    b.bv = Tensor::zeros({d}, true);
    b.wo = Tensor::randn({d, d}, kInitStd, rng, true);
    b.bo = Tensor::zeros({d}, true);
    b.ln2_gain = Tensor::full({d}, 1.0, true);
    b.ln2_bias = Tensor::zeros({d}, true);
    b.w_ff1 = Tensor::randn({d, h}, kInitStd, rng, true);
    b.b_ff1 = Tensor::zeros({h}, true);
    b.w_ff2 = Tensor::randn({h, d}, kInitStd, rng, true);
    b.b_ff2 = Tensor::zeros({d}, true);
    p.blocks.push_back(std::move(b));
  }
  p.classifier = Tensor::randn({d, config.num_classes}, kInitStd, rng, true);
  return p;
}

std::vector<Tensor> ModelParams::all_params() const {
  std::vector<Tensor> out;
  out.push_back(token_embedding);
  out.push_back(position_embedding);
  for (const BlockParams& b : blocks) {
    for (const Tensor& t : {b.ln1_gain, b.ln1_bias, b.wq, b.bq, b.wk, b.bk, b.wv, b.bv,
                            b.wo, b.bo, b.ln2_gain, b.ln2_bias, b.w_ff1, b.b_ff1, b.w_ff2, b.b_ff2}) {
      out.push_back(t);
    }
  }
  out.push_back(classifier);
  return out;
}

std::vector<std::pair<std::string, Tensor>> ModelParams::named_params() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("token_embedding", token_embedding);
  out.emplace_back("position_embedding", position_embedding);
  for (size_t l = 0; l < blocks.size(); ++l) {
    const BlockParams& b = blocks[l];
    const std::string prefix = "block" + std::to_string(l) + ".";
    out.emplace_back(prefix + "ln1_gain", b.ln1_gain);
    out.emplace_back(prefix + "ln1_bias", b.ln1_bias);
    out.emplace_back(prefix + "wq", b.wq);
    out.emplace_back(prefix + "bq", b.bq);
    out.emplace_back(prefix + "wk", b.wk);
    out.emplace_back(prefix + "bk", b.bk);
    out.emplace_back(prefix + "wv", b.wv);
    out.emplace_back(prefix + "bv", b.bv);
    out.emplace_back(prefix + "wo", b.wo);
    out.emplace_back(prefix + "bo", b.bo);
    out.emplace_back(prefix + "ln2_gain", b.ln2_gain);
    out.emplace_back(prefix + "ln2_bias", b.ln2_bias);
    out.emplace_back(prefix + "w_ff1", b.w_ff1);
    out.emplace_back(prefix + "b_ff1", b.b_ff1);
    out.emplace_back(prefix + "w_ff2", b.w_ff2);
    out.emplace_back(prefix + "b_ff2", b.b_ff2);
  }
  out.emplace_back("classifier", classifier);
  return out;
}

ModelParams ModelParams::clone() const {
  ModelParams out;
  out.config = config;
  auto copy = [](const Tensor& t) {
    Tensor c = t.clone_detached();
    c.set_requires_grad(t.requires_grad());
    return c;
  };
  out.token_embedding = copy(token_embedding);
  out.position_embedding = copy(position_embedding);
  for (const BlockParams& b : blocks) {
    BlockParams nb;
    nb.ln1_gain = copy(b.ln1_gain);
    nb.ln1_bias = copy(b.ln1_bias);
    nb.wq = copy(b.wq);
    nb.bq = copy(b.bq);
    nb.wk = copy(b.wk);
    nb.bk = copy(b.bk);
    nb.wv = copy(b.wv);
    nb.bv = copy(b.bv);
    nb.wo = copy(b.wo);
    nb.bo = copy(b.bo);
    nb.ln2_gain = copy(b.ln2_gain);
    nb.ln2_bias = copy(b.ln2_bias);
    nb.w_ff1 = copy(b.w_ff1);
    nb.b_ff1 = copy(b.b_ff1);
    nb.w_ff2 = copy(b.w_ff2);
    nb.b_ff2 = copy(b.b_ff2);
    out.blocks.push_back(std::move(nb));
  }
  out.classifier = copy(classifier);
  return out;
}

void ModelParams::zero_grads() const {
  for (Tensor t : all_params()) t.zero_grad();
}

Tensor embed(std::span<const int> tokens, const ModelParams& params) {
  const int64_t len = static_cast<int64_t>(tokens.size());
  if (len == 0) throw InputError("embed: empty token sequence");
  if (len > params.config.context_len) {
    throw InputError("embed: sequence length " + std::to_string(len) +
                     " exceeds context length " + std::to_string(params.config.context_len));
  }
  for (int t : tokens) {
    if (t < 0 || t >= params.config.vocab_size) {
      throw InputError("embed: token id " + std::to_string(t) + " outside vocabulary");
    }
  }
  Tensor tok = gather_rows(params.token_embedding, tokens);
  Tensor pos = slice(params.position_embedding, 0, 0, len);
  return add(tok, pos);
}

namespace {

// Additive causal mask: 0 on and below the diagonal, a large negative
// constant above, so masked attention weights underflow to exactly zero.
Tensor causal_mask(int64_t len) {
  std::vector<double> m(static_cast<size_t>(len * len), 0.0);
  for (int64_t i = 0; i < len; ++i)
    for (int64_t j = i + 1; j < len; ++j) m[static_cast<size_t>(i * len + j)] = -1e9;
  return Tensor::from_data({len, len}, std::move(m));
}

}  // namespace

Tensor block_forward(const Tensor& x, const BlockParams& block, int num_heads) {
  const int64_t len = x.rows();
  const int64_t d = x.cols();
  if (d != block.wq.rows()) {
    throw DimensionError("block_forward: input width " + std::to_string(d) +
                         " does not match block parameters " + std::to_string(block.wq.rows()));
  }
  const int64_t head_dim = d / num_heads;
  const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(head_dim));

  // Attention sublayer on the pre-normed input.
  Tensor n1 = add(mul(layer_norm(x), block.ln1_gain), block.ln1_bias);
  Tensor q = add(matmul(n1, block.wq), block.bq);
  Tensor k = add(matmul(n1, block.wk), block.bk);
  Tensor v = add(matmul(n1, block.wv), block.bv);
  Tensor mask = causal_mask(len);

  std::vector<Tensor> head_outputs;
  head_outputs.reserve(static_cast<size_t>(num_heads));
  for (int h = 0; h < num_heads; ++h) {
    Tensor qh = slice(q, 1, h * head_dim, head_dim);
    Tensor kh = slice(k, 1, h * head_dim, head_dim);
    Tensor vh = slice(v, 1, h * head_dim, head_dim);
    Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt_hd);
    Tensor attn = softmax_lastdim(add(scores, mask));
    head_outputs.push_back(matmul(attn, vh));
  }
  Tensor ctx = num_heads == 1 ? head_outputs[0] : concat(head_outputs, 1);
  Tensor attn_out = add(matmul(ctx, block.wo), block.bo);
  Tensor after_attn = add(x, attn_out);

  // Feed-forward sublayer.
  Tensor n2 = add(mul(layer_norm(after_attn), block.ln2_gain), block.ln2_bias);
  Tensor ff = add(matmul(gelu(add(matmul(n2, block.w_ff1), block.b_ff1)), block.w_ff2), block.b_ff2);
  return add(after_attn, ff);
}

Tensor encode_sequence(std::span<const int> tokens, const ModelParams& params) {
  Tensor x = embed(tokens, params);
  for (const BlockParams& b : params.blocks) x = block_forward(x, b, params.config.num_heads);
  return x;
}

Tensor lm_token_distribution(const Tensor& x_l, const ModelParams& params) {
  return softmax_lastdim(matmul(x_l, transpose(params.token_embedding)));
}

Tensor sequence_log_prob(std::span<const int> tokens, const ModelParams& params) {
  const int64_t len = static_cast<int64_t>(tokens.size());
  if (len < 2) throw InputError("sequence_log_prob: need at least 2 tokens");
  if (len > params.config.context_len + 1) {
    throw InputError("sequence_log_prob: sequence length " + std::to_string(len) +
                     " exceeds one context window of " + std::to_string(params.config.context_len + 1));
  }
  // Positions 0..len-2 predict tokens 1..len-1.
  Tensor x_l = encode_sequence(tokens.subspan(0, static_cast<size_t>(len - 1)), params);
  Tensor log_probs = log_clamped(lm_token_distribution(x_l, params));
  // Pick out log P(t_{i+1} | ...) with a constant indicator matrix.
  const int64_t v = params.config.vocab_size;
  std::vector<double> pick(static_cast<size_t>((len - 1) * v), 0.0);
  for (int64_t i = 0; i + 1 < len; ++i) {
    pick[static_cast<size_t>(i * v + tokens[static_cast<size_t>(i + 1)])] = 1.0;
  }
  Tensor indicator = Tensor::from_data({len - 1, v}, std::move(pick));
  return sum(mul(log_probs, indicator));
}

int64_t pooled_index(std::span<const int> tokens, const ModelConfig& config) {
  if (tokens.empty()) throw InputError("pooled_index: empty token sequence");
  if (config.pooling == Pooling::last_token) return static_cast<int64_t>(tokens.size()) - 1;
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] == config.cls_token_id) return static_cast<int64_t>(i);
  }
  throw InputError("pooled_index: first_special pooling but no CLS token in sequence");
}

Tensor pooled_feature(std::span<const int> tokens, const ModelParams& params) {
  Tensor x_l = encode_sequence(tokens, params);
  return slice(x_l, 0, pooled_index(tokens, params.config), 1);
}

Tensor classify_logits_from_feature(const Tensor& pooled, const ModelParams& params) {
  return matmul(pooled, params.classifier);
}

Tensor classify_logits(std::span<const int> tokens, const ModelParams& params) {
  return classify_logits_from_feature(pooled_feature(tokens, params), params);
}

Tensor classify(std::span<const int> tokens, const ModelParams& params) {
  return softmax_lastdim(classify_logits(tokens, params));
}

}  // namespace cmitune
