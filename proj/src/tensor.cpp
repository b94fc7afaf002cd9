#include "cmitune/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

namespace cmitune {

namespace {

std::atomic<int64_t> g_next_node_id{1};

double uniform_unit_open(std::mt19937_64& rng) {
  // (0, 1]: never zero, safe for log.
  return (static_cast<double>(rng() >> 11) + 1.0) * 0x1.0p-53;
}

}  // namespace

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  out += "]";
  return out;
}

double uniform_unit(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

double normal_sample(std::mt19937_64& rng) {
  const double u1 = uniform_unit_open(rng);
  const double u2 = uniform_unit(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

void deterministic_shuffle(std::vector<int64_t>& v, std::mt19937_64& rng) {
  for (size_t i = v.size(); i > 1; --i) {
    const size_t j = static_cast<size_t>(rng() % i);
    std::swap(v[i - 1], v[j]);
  }
}

uint64_t derive_seed(uint64_t base, std::string_view tag, uint64_t a, uint64_t b) {
  uint64_t h = 1469598103934665603ull;
  auto mix = [&h](uint64_t x) {
    for (int i = 0; i < 8; ++i) {
      h ^= (x >> (8 * i)) & 0xff;
      h *= 1099511628211ull;
    }
  };
  mix(base);
  for (char c : tag) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  mix(a);
  mix(b);
  return h;
}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

namespace {

std::shared_ptr<detail::TensorNode> make_node(const Shape& shape, bool requires_grad) {
  for (int64_t d : shape) {
    if (d <= 0) throw DimensionError("tensor: non-positive dimension in shape " + shape_str(shape));
  }
  auto node = std::make_shared<detail::TensorNode>();
  node->shape = shape;
  node->data.assign(static_cast<size_t>(shape_numel(shape)), 0.0);
  node->requires_grad = requires_grad;
  node->id = g_next_node_id.fetch_add(1);
  return node;
}

void ensure_grad(detail::TensorNode& n) {
  if (n.grad.empty()) n.grad.assign(n.data.size(), 0.0);
}

}  // namespace

struct OpAccess {
  static std::shared_ptr<detail::TensorNode> node(const Tensor& t) { return t.node_; }
  static Tensor wrap(std::shared_ptr<detail::TensorNode> n) { return Tensor(std::move(n)); }
};

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  return Tensor(make_node(shape, requires_grad));
}

Tensor Tensor::full(const Shape& shape, double value, bool requires_grad) {
  auto node = make_node(shape, requires_grad);
  std::fill(node->data.begin(), node->data.end(), value);
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value) {
  auto node = make_node({1}, false);
  node->data[0] = value;
  return Tensor(std::move(node));
}

Tensor Tensor::from_data(const Shape& shape, std::vector<double> data, bool requires_grad) {
  if (static_cast<int64_t>(data.size()) != shape_numel(shape)) {
    throw DimensionError("tensor: data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
  }
  auto node = make_node(shape, requires_grad);
  node->data = std::move(data);
  return Tensor(std::move(node));
}

Tensor Tensor::randn(const Shape& shape, double stddev, std::mt19937_64& rng, bool requires_grad) {
  auto node = make_node(shape, requires_grad);
  for (double& v : node->data) v = stddev * normal_sample(rng);
  return Tensor(std::move(node));
}

const Shape& Tensor::shape() const {
  if (!node_) throw ContractError("tensor: use of default-constructed tensor");
  return node_->shape;
}

int64_t Tensor::size() const {
  shape();  // validity check
  return static_cast<int64_t>(node_->data.size());
}

int Tensor::ndim() const { return static_cast<int>(shape().size()); }

int64_t Tensor::rows() const {
  const Shape& s = shape();
  if (s.size() != 2) throw DimensionError("tensor: rows() on non-2-D tensor " + shape_str(s));
  return s[0];
}

int64_t Tensor::cols() const {
  const Shape& s = shape();
  if (s.size() != 2) throw DimensionError("tensor: cols() on non-2-D tensor " + shape_str(s));
  return s[1];
}

double Tensor::value() const {
  if (size() != 1) throw ContractError("tensor: value() requires a scalar, got " + shape_str(shape()));
  return node_->data[0];
}

double Tensor::at(int64_t flat_index) const {
  if (flat_index < 0 || flat_index >= size()) {
    throw InputError("tensor: flat index " + std::to_string(flat_index) + " out of range for " +
                     shape_str(shape()));
  }
  return node_->data[static_cast<size_t>(flat_index)];
}

double Tensor::at2(int64_t r, int64_t c) const {
  const int64_t n_rows = rows(), n_cols = cols();
  if (r < 0 || r >= n_rows || c < 0 || c >= n_cols) {
    throw InputError("tensor: index (" + std::to_string(r) + "," + std::to_string(c) +
                     ") out of range for " + shape_str(shape()));
  }
  return node_->data[static_cast<size_t>(r * n_cols + c)];
}

std::span<const double> Tensor::data() const {
  shape();  // validity check
  return {node_->data.data(), node_->data.size()};
}

std::span<double> Tensor::mutable_data() {
  shape();
  if (Tape::recording()) {
    throw ContractError("tensor: mutable_data() while a tape is recording");
  }
  return {node_->data.data(), node_->data.size()};
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool v) {
  shape();
  node_->requires_grad = v;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  shape();
  if (node_->grad.empty()) {
    throw ContractError("tensor: grad() before backward populated this tensor");
  }
  return {node_->grad.data(), node_->grad.size()};
}

void Tensor::zero_grad() {
  shape();
  node_->grad.assign(node_->data.size(), 0.0);
}

int64_t Tensor::node_id() const {
  shape();
  return node_->id;
}

Tensor Tensor::clone_detached() const {
  shape();
  auto node = make_node(node_->shape, false);
  node->data = node_->data;
  return OpAccess::wrap(std::move(node));
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

namespace detail {

class TapeImpl {
 public:
  std::vector<std::function<void()>> entries;
  bool consumed = false;
  TapeImpl* prev = nullptr;
};

namespace {
thread_local TapeImpl* g_active_tape = nullptr;
}

}  // namespace detail

Tape::Tape() : impl_(std::make_unique<detail::TapeImpl>()) {
  impl_->prev = detail::g_active_tape;
  detail::g_active_tape = impl_.get();
}

Tape::~Tape() { detail::g_active_tape = impl_->prev; }

bool Tape::recording() { return detail::g_active_tape != nullptr; }

int64_t Tape::num_ops() const { return static_cast<int64_t>(impl_->entries.size()); }

void Tape::backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw ContractError("tape: backward requires a scalar loss, got " + shape_str(loss.shape()));
  }
  if (impl_->consumed) {
    throw ContractError("tape: backward called twice on the same graph");
  }
  impl_->consumed = true;
  auto loss_node = OpAccess::node(loss);
  ensure_grad(*loss_node);
  loss_node->grad[0] = 1.0;
  for (auto it = impl_->entries.rbegin(); it != impl_->entries.rend(); ++it) (*it)();
}

namespace {

// Records a backward closure when grad tracking is on for any input.
void record(std::initializer_list<const Tensor*> inputs, Tensor& out, std::function<void()> fn) {
  if (!detail::g_active_tape) return;
  bool any = false;
  for (const Tensor* t : inputs) any = any || t->requires_grad();
  if (!any) return;
  OpAccess::node(out)->requires_grad = true;
  detail::g_active_tape->entries.push_back(std::move(fn));
}

void check_finite(const char* op, const Tensor& out) {
  for (double v : out.data()) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op) + ": non-finite output value");
    }
  }
}

void require_2d(const char* op, const Tensor& t) {
  if (t.ndim() != 2) {
    throw DimensionError(std::string(op) + ": expected 2-D tensor, got " + shape_str(t.shape()));
  }
}

int64_t last_dim(const Tensor& t) { return t.shape().back(); }

int64_t row_count(const Tensor& t) { return t.size() / last_dim(t); }

}  // namespace

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d("matmul", a);
  require_2d("matmul", b);
  const int64_t m = a.rows(), k = a.cols(), k2 = b.rows(), n = b.cols();
  if (k != k2) {
    throw DimensionError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  Tensor out = Tensor::zeros({m, n});
  {
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* pc = OpAccess::node(out)->data.data();
    for (int64_t i = 0; i < m; ++i) {
      for (int64_t kk = 0; kk < k; ++kk) {
        const double av = pa[i * k + kk];
        const double* pbrow = pb + kk * n;
        double* pcrow = pc + i * n;
        for (int64_t j = 0; j < n; ++j) pcrow[j] += av * pbrow[j];
      }
    }
  }
  check_finite("matmul", out);
  record({&a, &b}, out, [an = OpAccess::node(a), bn = OpAccess::node(b), on = OpAccess::node(out), m, k, n]() {
    if (on->grad.empty()) return;
    const double* g = on->grad.data();
    if (an->requires_grad) {
      ensure_grad(*an);
      // dA += G * B^T
      const double* pb = bn->data.data();
      for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < n; ++j) {
          const double gv = g[i * n + j];
          const double* pbrow = pb + j;  // column j of B read with stride n
          double* darow = an->grad.data() + i * k;
          for (int64_t kk = 0; kk < k; ++kk) darow[kk] += gv * pbrow[0 + kk * n];
        }
      }
    }
    if (bn->requires_grad) {
      ensure_grad(*bn);
      // dB += A^T * G
      const double* pa = an->data.data();
      for (int64_t kk = 0; kk < k; ++kk) {
        for (int64_t i = 0; i < m; ++i) {
          const double av = pa[i * k + kk];
          const double* grow = g + i * n;
          double* dbrow = bn->grad.data() + kk * n;
          for (int64_t j = 0; j < n; ++j) dbrow[j] += av * grow[j];
        }
      }
    }
  });
  return out;
}

namespace {

enum class BroadcastKind { same, row_vector, scalar_rhs };

BroadcastKind classify_broadcast(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return BroadcastKind::same;
  if (b.size() == 1) return BroadcastKind::scalar_rhs;
  if (a.ndim() == 2 && b.ndim() == 1 && b.shape()[0] == a.shape()[1]) return BroadcastKind::row_vector;
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                       shape_str(b.shape()));
}

}  // namespace

Tensor add(const Tensor& a_in, const Tensor& b_in) {
  // Commutative: put the larger operand on the left.
  const bool swap = a_in.size() == 1 && b_in.size() > 1;
  const Tensor& a = swap ? b_in : a_in;
  const Tensor& b = swap ? a_in : b_in;
  const BroadcastKind kind = classify_broadcast("add", a, b);
  Tensor out = Tensor::zeros(a.shape());
  {
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* po = OpAccess::node(out)->data.data();
    const int64_t n = a.size();
    if (kind == BroadcastKind::same) {
      for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
    } else if (kind == BroadcastKind::scalar_rhs) {
      const double bv = pb[0];
      for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + bv;
    } else {
      const int64_t c = a.shape()[1];
      for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i % c];
    }
  }
  check_finite("add", out);
  record({&a, &b}, out, [an = OpAccess::node(a), bn = OpAccess::node(b), on = OpAccess::node(out), kind]() {
    if (on->grad.empty()) return;
    const double* g = on->grad.data();
    const int64_t n = static_cast<int64_t>(on->data.size());
    if (an->requires_grad) {
      ensure_grad(*an);
      for (int64_t i = 0; i < n; ++i) an->grad[static_cast<size_t>(i)] += g[i];
    }
    if (bn->requires_grad) {
      ensure_grad(*bn);
      if (kind == BroadcastKind::same) {
        for (int64_t i = 0; i < n; ++i) bn->grad[static_cast<size_t>(i)] += g[i];
      } else if (kind == BroadcastKind::scalar_rhs) {
        double s = 0.0;
        for (int64_t i = 0; i < n; ++i) s += g[i];
        bn->grad[0] += s;
      } else {
        const int64_t c = static_cast<int64_t>(bn->data.size());
        for (int64_t i = 0; i < n; ++i) bn->grad[static_cast<size_t>(i % c)] += g[i];
      }
    }
  });
  return out;
}

Tensor mul(const Tensor& a_in, const Tensor& b_in) {
  const bool swap = a_in.size() == 1 && b_in.size() > 1;
  const Tensor& a = swap ? b_in : a_in;
  const Tensor& b = swap ? a_in : b_in;
  const BroadcastKind kind = classify_broadcast("mul", a, b);
  Tensor out = Tensor::zeros(a.shape());
  {
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* po = OpAccess::node(out)->data.data();
    const int64_t n = a.size();
    if (kind == BroadcastKind::same) {
      for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
    } else if (kind == BroadcastKind::scalar_rhs) {
      const double bv = pb[0];
      for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * bv;
    } else {
      const int64_t c = a.shape()[1];
      for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i % c];
    }
  }
  check_finite("mul", out);
  record({&a, &b}, out, [an = OpAccess::node(a), bn = OpAccess::node(b), on = OpAccess::node(out), kind]() {
    if (on->grad.empty()) return;
    const double* g = on->grad.data();
    const int64_t n = static_cast<int64_t>(on->data.size());
    if (an->requires_grad) {
      ensure_grad(*an);
      if (kind == BroadcastKind::same) {
        for (int64_t i = 0; i < n; ++i) an->grad[static_cast<size_t>(i)] += g[i] * bn->data[static_cast<size_t>(i)];
      } else if (kind == BroadcastKind::scalar_rhs) {
        const double bv = bn->data[0];
        for (int64_t i = 0; i < n; ++i) an->grad[static_cast<size_t>(i)] += g[i] * bv;
      } else {
        const int64_t c = static_cast<int64_t>(bn->data.size());
        for (int64_t i = 0; i < n; ++i) an->grad[static_cast<size_t>(i)] += g[i] * bn->data[static_cast<size_t>(i % c)];
      }
    }
    if (bn->requires_grad) {
      ensure_grad(*bn);
      if (kind == BroadcastKind::same) {
        for (int64_t i = 0; i < n; ++i) bn->grad[static_cast<size_t>(i)] += g[i] * an->data[static_cast<size_t>(i)];
      } else if (kind == BroadcastKind::scalar_rhs) {
        double s = 0.0;
        for (int64_t i = 0; i < n; ++i) s += g[i] * an->data[static_cast<size_t>(i)];
        bn->grad[0] += s;
      } else {
        const int64_t c = static_cast<int64_t>(bn->data.size());
        for (int64_t i = 0; i < n; ++i) bn->grad[static_cast<size_t>(i % c)] += g[i] * an->data[static_cast<size_t>(i)];
      }
    }
  });
  return out;
}

Tensor softmax_lastdim(const Tensor& x) {
  if (x.ndim() < 1 || x.ndim() > 2) {
    throw DimensionError("softmax_lastdim: expected 1-D or 2-D tensor, got " + shape_str(x.shape()));
  }
  const int64_t c = last_dim(x);
  const int64_t r = row_count(x);
  Tensor out = Tensor::zeros(x.shape());
  {
    const double* px = x.data().data();
    double* po = OpAccess::node(out)->data.data();
    for (int64_t i = 0; i < r; ++i) {
      const double* xr = px + i * c;
      double* yr = po + i * c;
      double mx = xr[0];
      for (int64_t j = 1; j < c; ++j) mx = std::max(mx, xr[j]);
      double s = 0.0;
      for (int64_t j = 0; j < c; ++j) {
        yr[j] = std::exp(xr[j] - mx);
        s += yr[j];
      }
      for (int64_t j = 0; j < c; ++j) yr[j] /= s;
    }
  }
  check_finite("softmax_lastdim", out);
  record({&x}, out, [xn = OpAccess::node(x), on = OpAccess::node(out), r, c]() {
    if (on->grad.empty() || !xn->requires_grad) return;
    ensure_grad(*xn);
    const double* g = on->grad.data();
    const double* p = on->data.data();
    for (int64_t i = 0; i < r; ++i) {
      const double* gr = g + i * c;
      const double* pr = p + i * c;
      double dot = 0.0;
      for (int64_t j = 0; j < c; ++j) dot += gr[j] * pr[j];
      double* dx = xn->grad.data() + i * c;
      for (int64_t j = 0; j < c; ++j) dx[j] += pr[j] * (gr[j] - dot);
    }
  });
  return out;
}

Tensor log_clamped(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  {
    const double* px = x.data().data();
    double* po = OpAccess::node(out)->data.data();
    const int64_t n = x.size();
    for (int64_t i = 0; i < n; ++i) po[i] = std::log(std::max(px[i], kLogEps));
  }
  check_finite("log", out);
  record({&x}, out, [xn = OpAccess::node(x), on = OpAccess::node(out)]() {
    if (on->grad.empty() || !xn->requires_grad) return;
    ensure_grad(*xn);
    const double* g = on->grad.data();
    const int64_t n = static_cast<int64_t>(on->data.size());
    for (int64_t i = 0; i < n; ++i) {
      const double xv = xn->data[static_cast<size_t>(i)];
      if (xv >= kLogEps) xn->grad[static_cast<size_t>(i)] += g[i] / xv;
      // clamped region: derivative 0
    }
  });
  return out;
}

Tensor layer_norm(const Tensor& x) {
  constexpr double eps = 1e-5;
  if (x.ndim() < 1 || x.ndim() > 2) {
    throw DimensionError("layer_norm: expected 1-D or 2-D tensor, got " + shape_str(x.shape()));
  }
  const int64_t c = last_dim(x);
  const int64_t r = row_count(x);
  Tensor out = Tensor::zeros(x.shape());
  std::vector<double> inv_std(static_cast<size_t>(r));
  {
    const double* px = x.data().data();
    double* po = OpAccess::node(out)->data.data();
    for (int64_t i = 0; i < r; ++i) {
      const double* xr = px + i * c;
      double mu = 0.0;
      for (int64_t j = 0; j < c; ++j) mu += xr[j];
      mu /= static_cast<double>(c);
      double var = 0.0;
      for (int64_t j = 0; j < c; ++j) var += (xr[j] - mu) * (xr[j] - mu);
      var /= static_cast<double>(c);
      const double inv = 1.0 / std::sqrt(var + eps);
      inv_std[static_cast<size_t>(i)] = inv;
      double* yr = po + i * c;
      for (int64_t j = 0; j < c; ++j) yr[j] = (xr[j] - mu) * inv;
    }
  }
  check_finite("layer_norm", out);
  record({&x}, out, [xn = OpAccess::node(x), on = OpAccess::node(out), inv_std = std::move(inv_std), r, c]() {
    if (on->grad.empty() || !xn->requires_grad) return;
    ensure_grad(*xn);
    const double* g = on->grad.data();
    const double* y = on->data.data();  // normalized values
    for (int64_t i = 0; i < r; ++i) {
      const double* gr = g + i * c;
      const double* yr = y + i * c;
      double g_mean = 0.0, gy_mean = 0.0;
      for (int64_t j = 0; j < c; ++j) {
        g_mean += gr[j];
        gy_mean += gr[j] * yr[j];
      }
      g_mean /= static_cast<double>(c);
      gy_mean /= static_cast<double>(c);
      const double inv = inv_std[static_cast<size_t>(i)];
      double* dx = xn->grad.data() + i * c;
      for (int64_t j = 0; j < c; ++j) dx[j] += inv * (gr[j] - g_mean - yr[j] * gy_mean);
    }
  });
  return out;
}

Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  Tensor out = Tensor::zeros(x.shape());
  {
    const double* px = x.data().data();
    double* po = OpAccess::node(out)->data.data();
    const int64_t n = x.size();
    for (int64_t i = 0; i < n; ++i) {
      po[i] = 0.5 * px[i] * (1.0 + std::erf(px[i] * inv_sqrt2));
    }
  }
  check_finite("gelu", out);
  record({&x}, out, [xn = OpAccess::node(x), on = OpAccess::node(out)]() {
    if (on->grad.empty() || !xn->requires_grad) return;
    ensure_grad(*xn);
    const double* g = on->grad.data();
    const int64_t n = static_cast<int64_t>(on->data.size());
    for (int64_t i = 0; i < n; ++i) {
      const double xv = xn->data[static_cast<size_t>(i)];
      const double cdf = 0.5 * (1.0 + std::erf(xv * inv_sqrt2));
      const double pdf = inv_sqrt2pi * std::exp(-0.5 * xv * xv);
      xn->grad[static_cast<size_t>(i)] += g[i] * (cdf + xv * pdf);
    }
  });
  return out;
}

Tensor transpose(const Tensor& x) {
  require_2d("transpose", x);
  const int64_t r = x.rows(), c = x.cols();
  Tensor out = Tensor::zeros({c, r});
  {
    const double* px = x.data().data();
    double* po = OpAccess::node(out)->data.data();
    for (int64_t i = 0; i < r; ++i)
      for (int64_t j = 0; j < c; ++j) po[j * r + i] = px[i * c + j];
  }
  record({&x}, out, [xn = OpAccess::node(x), on = OpAccess::node(out), r, c]() {
    if (on->grad.empty() || !xn->requires_grad) return;
    ensure_grad(*xn);
    const double* g = on->grad.data();
    for (int64_t i = 0; i < r; ++i)
      for (int64_t j = 0; j < c; ++j) xn->grad[static_cast<size_t>(i * c + j)] += g[j * r + i];
  });
  return out;
}

Tensor slice(const Tensor& x, int dim, int64_t start, int64_t len) {
  if (x.ndim() == 1) {
    if (dim != 0) throw DimensionError("slice: dim " + std::to_string(dim) + " on 1-D tensor");
    if (start < 0 || len <= 0 || start + len > x.shape()[0]) {
      throw DimensionError("slice: range [" + std::to_string(start) + "," +
                           std::to_string(start + len) + ") out of bounds for " + shape_str(x.shape()));
    }
    Tensor out = Tensor::zeros({len});
    const double* px = x.data().data();
    double* po = OpAccess::node(out)->data.data();
    for (int64_t i = 0; i < len; ++i) po[i] = px[start + i];
    record({&x}, out, [xn = OpAccess::node(x), on = OpAccess::node(out), start, len]() {
      if (on->grad.empty() || !xn->requires_grad) return;
      ensure_grad(*xn);
      for (int64_t i = 0; i < len; ++i) xn->grad[static_cast<size_t>(start + i)] += on->grad[static_cast<size_t>(i)];
    });
    return out;
  }
  require_2d("slice", x);
  const int64_t r = x.rows(), c = x.cols();
  if (dim != 0 && dim != 1) throw DimensionError("slice: dim must be 0 or 1");
  const int64_t extent = dim == 0 ? r : c;
  if (start < 0 || len <= 0 || start + len > extent) {
    throw DimensionError("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                         ") out of bounds for dim " + std::to_string(dim) + " of " + shape_str(x.shape()));
  }
  Tensor out = dim == 0 ? Tensor::zeros({len, c}) : Tensor::zeros({r, len});
  {
    const double* px = x.data().data();
    double* po = OpAccess::node(out)->data.data();
    if (dim == 0) {
      for (int64_t i = 0; i < len; ++i)
        for (int64_t j = 0; j < c; ++j) po[i * c + j] = px[(start + i) * c + j];
    } else {
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < len; ++j) po[i * len + j] = px[i * c + start + j];
    }
  }
  record({&x}, out, [xn = OpAccess::node(x), on = OpAccess::node(out), dim, start, len, r, c]() {
    if (on->grad.empty() || !xn->requires_grad) return;
    ensure_grad(*xn);
    const double* g = on->grad.data();
    if (dim == 0) {
      for (int64_t i = 0; i < len; ++i)
        for (int64_t j = 0; j < c; ++j) xn->grad[static_cast<size_t>((start + i) * c + j)] += g[i * c + j];
    } else {
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < len; ++j) xn->grad[static_cast<size_t>(i * c + start + j)] += g[i * len + j];
    }
  });
  return out;
}

Tensor concat(const std::vector<Tensor>& xs, int dim) {
  if (xs.empty()) throw DimensionError("concat: empty input list");
  for (const Tensor& t : xs) require_2d("concat", t);
  if (dim != 0 && dim != 1) throw DimensionError("concat: dim must be 0 or 1");
  int64_t total = 0;
  const int64_t other = dim == 0 ? xs[0].cols() : xs[0].rows();
  for (const Tensor& t : xs) {
    const int64_t o = dim == 0 ? t.cols() : t.rows();
    if (o != other) {
      throw DimensionError("concat: mismatched shapes " + shape_str(xs[0].shape()) + " vs " +
                           shape_str(t.shape()));
    }
    total += dim == 0 ? t.rows() : t.cols();
  }
  Tensor out = dim == 0 ? Tensor::zeros({total, other}) : Tensor::zeros({other, total});
  std::vector<int64_t> offsets;
  {
    double* po = OpAccess::node(out)->data.data();
    int64_t off = 0;
    for (const Tensor& t : xs) {
      offsets.push_back(off);
      const double* pt = t.data().data();
      if (dim == 0) {
        const int64_t block = t.rows() * other;
        std::copy(pt, pt + block, po + off * other);
        off += t.rows();
      } else {
        const int64_t w = t.cols();
        for (int64_t i = 0; i < other; ++i)
          for (int64_t j = 0; j < w; ++j) po[i * total + off + j] = pt[i * w + j];
        off += w;
      }
    }
  }
  bool any = false;
  for (const Tensor& t : xs) any = any || t.requires_grad();
  if (detail::g_active_tape != nullptr && any) {
    std::vector<std::shared_ptr<detail::TensorNode>> in_nodes;
    in_nodes.reserve(xs.size());
    for (const Tensor& t : xs) in_nodes.push_back(OpAccess::node(t));
    auto on = OpAccess::node(out);
    on->requires_grad = true;
    detail::g_active_tape->entries.push_back(
        [in_nodes = std::move(in_nodes), on, offsets = std::move(offsets), dim, total, other]() {
          if (on->grad.empty()) return;
          const double* g = on->grad.data();
          for (size_t s = 0; s < in_nodes.size(); ++s) {
            auto& in = *in_nodes[s];
            if (!in.requires_grad) continue;
            ensure_grad(in);
            const int64_t off = offsets[s];
            if (dim == 0) {
              const int64_t nrows = in.shape[0];
              for (int64_t i = 0; i < nrows; ++i)
                for (int64_t j = 0; j < other; ++j)
                  in.grad[static_cast<size_t>(i * other + j)] += g[(off + i) * other + j];
            } else {
              const int64_t w = in.shape[1];
              for (int64_t i = 0; i < other; ++i)
                for (int64_t j = 0; j < w; ++j)
                  in.grad[static_cast<size_t>(i * w + j)] += g[i * total + off + j];
            }
          }
        });
  }
  return out;
}

Tensor sum(const Tensor& x) {
  Tensor out = Tensor::zeros({1});
  {
    const double* px = x.data().data();
    double s = 0.0;
    const int64_t n = x.size();
    for (int64_t i = 0; i < n; ++i) s += px[i];
    OpAccess::node(out)->data[0] = s;
  }
  check_finite("sum", out);
  record({&x}, out, [xn = OpAccess::node(x), on = OpAccess::node(out)]() {
    if (on->grad.empty() || !xn->requires_grad) return;
    ensure_grad(*xn);
    const double g = on->grad[0];
    for (double& d : xn->grad) d += g;
  });
  return out;
}

Tensor mean(const Tensor& x) {
  const int64_t n = x.size();
  Tensor out = Tensor::zeros({1});
  {
    const double* px = x.data().data();
    double s = 0.0;
    for (int64_t i = 0; i < n; ++i) s += px[i];
    OpAccess::node(out)->data[0] = s / static_cast<double>(n);
  }
  check_finite("mean", out);
  record({&x}, out, [xn = OpAccess::node(x), on = OpAccess::node(out), n]() {
    if (on->grad.empty() || !xn->requires_grad) return;
    ensure_grad(*xn);
    const double g = on->grad[0] / static_cast<double>(n);
    for (double& d : xn->grad) d += g;
  });
  return out;
}

Tensor scale(const Tensor& x, double c) {
  Tensor out = Tensor::zeros(x.shape());
  {
    const double* px = x.data().data();
    double* po = OpAccess::node(out)->data.data();
    const int64_t n = x.size();
    for (int64_t i = 0; i < n; ++i) po[i] = px[i] * c;
  }
  check_finite("scale", out);
  record({&x}, out, [xn = OpAccess::node(x), on = OpAccess::node(out), c]() {
    if (on->grad.empty() || !xn->requires_grad) return;
    ensure_grad(*xn);
    const int64_t n = static_cast<int64_t>(on->data.size());
    for (int64_t i = 0; i < n; ++i) xn->grad[static_cast<size_t>(i)] += c * on->grad[static_cast<size_t>(i)];
  });
  return out;
}

Tensor gather_rows(const Tensor& table, std::span<const int> ids) {
  require_2d("gather_rows", table);
  const int64_t r = table.rows(), c = table.cols();
  if (ids.empty()) throw DimensionError("gather_rows: empty id list");
  for (int id : ids) {
    if (id < 0 || id >= r) {
      throw InputError("gather_rows: id " + std::to_string(id) + " out of range [0," +
                       std::to_string(r) + ")");
    }
  }
  const int64_t m = static_cast<int64_t>(ids.size());
  Tensor out = Tensor::zeros({m, c});
  std::vector<int> idv(ids.begin(), ids.end());
  {
    const double* pt = table.data().data();
    double* po = OpAccess::node(out)->data.data();
    for (int64_t i = 0; i < m; ++i) {
      const double* row = pt + static_cast<int64_t>(idv[static_cast<size_t>(i)]) * c;
      std::copy(row, row + c, po + i * c);
    }
  }
  record({&table}, out, [tn = OpAccess::node(table), on = OpAccess::node(out), idv = std::move(idv), c]() {
    if (on->grad.empty() || !tn->requires_grad) return;
    ensure_grad(*tn);
    const double* g = on->grad.data();
    for (size_t i = 0; i < idv.size(); ++i) {
      double* drow = tn->grad.data() + static_cast<int64_t>(idv[i]) * c;
      const double* grow = g + static_cast<int64_t>(i) * c;
      for (int64_t j = 0; j < c; ++j) drow[j] += grow[j];
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

FiniteDiffReport finite_diff_check(const std::function<Tensor()>& f,
                                   std::span<const Tensor> params,
                                   const FiniteDiffOptions& opts) {
  if (opts.h < 1e-7 || opts.h > 1e-3) {
    throw InputError("finite_diff_check: step h must lie in [1e-7, 1e-3]");
  }
  const double v0 = f().value();
  const double v1 = f().value();
  if (!(v0 == v1)) {
    throw NumericError("finite_diff_check: f is not deterministic (" + std::to_string(v0) + " vs " +
                       std::to_string(v1) + ")");
  }

  std::vector<Tensor> mut(params.begin(), params.end());
  for (Tensor& p : mut) p.zero_grad();
  {
    Tape tape;
    Tensor loss = f();
    tape.backward(loss);
  }

  FiniteDiffReport report;
  report.pass = true;
  std::mt19937_64 rng(derive_seed(opts.seed, "finite_diff"));
  char buf[256];
  for (size_t pi = 0; pi < mut.size(); ++pi) {
    Tensor& p = mut[pi];
    const int64_t n = p.size();
    std::vector<int64_t> coords;
    if (n <= opts.max_coords_per_param) {
      for (int64_t i = 0; i < n; ++i) coords.push_back(i);
    } else {
      std::vector<int64_t> all(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) all[static_cast<size_t>(i)] = i;
      deterministic_shuffle(all, rng);
      coords.assign(all.begin(), all.begin() + opts.max_coords_per_param);
      std::sort(coords.begin(), coords.end());
    }
    for (int64_t ci : coords) {
      auto d = p.mutable_data();
      const double orig = d[static_cast<size_t>(ci)];
      d[static_cast<size_t>(ci)] = orig + opts.h;
      const double fp = f().value();
      d[static_cast<size_t>(ci)] = orig - opts.h;
      const double fm = f().value();
      d[static_cast<size_t>(ci)] = orig;
      const double fd = (fp - fm) / (2.0 * opts.h);
      const double an = p.has_grad() ? p.grad()[static_cast<size_t>(ci)] : 0.0;
      // The difference quotient carries roundoff of order eps*|f|/h; below
      // that scale the oracle itself is noise, so fold it into the
      // denominator rather than flag phantom mismatches.
      const double fd_noise = (std::abs(fp) + std::abs(fm)) * 1e-14 / (2.0 * opts.h);
      const double denom = std::max({std::abs(fd), std::abs(an), 1e-6, fd_noise / opts.tol});
      const double rel = std::abs(fd - an) / denom;
      ++report.coords_checked;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        std::snprintf(buf, sizeof(buf), "param %zu coord %lld: analytic=%.12g numeric=%.12g rel=%.3g",
                      pi, static_cast<long long>(ci), an, fd, rel);
        report.worst = buf;
      }
    }
  }
  report.pass = report.max_rel_err <= opts.tol;
  return report;
}

}  // namespace cmitune
