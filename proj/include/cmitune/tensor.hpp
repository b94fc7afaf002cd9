#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cmitune/errors.hpp"

namespace cmitune {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Inputs of log / KL are clamped to at least this before taking the log.
inline constexpr double kLogEps = 1e-12;

namespace detail {

struct TensorNode {
  Shape shape;
  std::vector<double> data;   // row-major
  std::vector<double> grad;   // empty until backward touches this node
  bool requires_grad = false;
  int64_t id = 0;
};

class TapeImpl;

}  // namespace detail

// Dense float64 tensor. Values are immutable once created except through
// mutable_data(), which is rejected while a tape is recording; grad buffers
// are the only state backward() mutates.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, double value, bool requires_grad = false);
  static Tensor scalar(double value);
  static Tensor from_data(const Shape& shape, std::vector<double> data, bool requires_grad = false);
  // Normal(0, stddev) entries drawn by Box-Muller from rng (pinned algorithm,
  // reproducible across standard libraries).
  static Tensor randn(const Shape& shape, double stddev, std::mt19937_64& rng, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int64_t size() const;
  int64_t rows() const;  // 2-D only
  int64_t cols() const;  // 2-D only
  int ndim() const;

  double value() const;  // scalar tensors only
  double at(int64_t flat_index) const;
  double at2(int64_t r, int64_t c) const;

  std::span<const double> data() const;
  // Mutation hatch for the optimizer and finite-difference probes; throws
  // ContractError while a tape is recording.
  std::span<double> mutable_data();

  bool requires_grad() const;
  void set_requires_grad(bool v);
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();
  int64_t node_id() const;

  // Deep copy of the values; result is a fresh leaf with no grad.
  Tensor clone_detached() const;

 private:
  explicit Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::TensorNode> node_;

  friend class Tape;
  friend struct OpAccess;
};

// Reverse-mode tape. Operations executed while a Tape is alive are recorded
// in creation order, which is already a topological order; backward() walks
// it once in reverse. One backward per tape: a second call without building
// a fresh tape is rejected.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void backward(const Tensor& loss);
  int64_t num_ops() const;

  static bool recording();

 private:
  std::unique_ptr<detail::TapeImpl> impl_;
};

// ---------------------------------------------------------------------------
// Forward ops. All record onto the active tape when any input requires grad.
// Shape violations throw DimensionError naming the op; non-finite outputs
// throw NumericError.
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
// add/mul broadcasting: identical shapes, or b a 1-D vector applied to every
// row of a 2-D a, or either side a scalar.
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor softmax_lastdim(const Tensor& x);
// ln(max(x, kLogEps)) elementwise.
Tensor log_clamped(const Tensor& x);
// Normalizes the last dimension to zero mean / unit variance (eps 1e-5).
// Affine scale/shift are applied by callers with mul/add.
Tensor layer_norm(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor transpose(const Tensor& x);
Tensor slice(const Tensor& x, int dim, int64_t start, int64_t len);
Tensor concat(const std::vector<Tensor>& xs, int dim);
Tensor sum(const Tensor& x);   // full reduction to a scalar
Tensor mean(const Tensor& x);  // full reduction to a scalar
Tensor scale(const Tensor& x, double c);
// out[i, :] = table[ids[i], :]. Embedding-style lookup; gradients accumulate
// into the table rows in index order.
Tensor gather_rows(const Tensor& table, std::span<const int> ids);

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

struct FiniteDiffOptions {
  double h = 1e-5;               // must lie in [1e-7, 1e-3]
  double tol = 1e-4;             // relative
  int max_coords_per_param = 8;  // subsample per parameter tensor
  uint64_t seed = 0;
};

struct FiniteDiffReport {
  bool pass = false;
  double max_rel_err = 0.0;
  int64_t coords_checked = 0;
  std::string worst;  // human description of the worst coordinate
};

// Compares analytic gradients of the scalar built by f against central
// finite differences over subsampled coordinates of params. f must be a
// deterministic function of params (checked by evaluating twice).
FiniteDiffReport finite_diff_check(const std::function<Tensor()>& f,
                                   std::span<const Tensor> params,
                                   const FiniteDiffOptions& opts = {});

// Uniform double in [0, 1) from 53 random bits.
double uniform_unit(std::mt19937_64& rng);
// Standard normal via Box-Muller (one draw per call).
double normal_sample(std::mt19937_64& rng);
// In-place Fisher-Yates with pinned index arithmetic.
void deterministic_shuffle(std::vector<int64_t>& v, std::mt19937_64& rng);
// Stable 64-bit FNV-1a based stream derivation for seeding sub-RNGs.
uint64_t derive_seed(uint64_t base, std::string_view tag, uint64_t a = 0, uint64_t b = 0);

}  // namespace cmitune
