#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "convmatch/matrix.hpp"
#include "convmatch/rng.hpp"

namespace convmatch {

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
};

/// Named trainable tensors with matching gradient accumulators.
class ParamStore {
 public:
  std::size_t add(std::string name, Matrix init);

  std::size_t size() const noexcept { return params_.size(); }
  Parameter& operator[](std::size_t i) noexcept { return params_[i]; }
  const Parameter& operator[](std::size_t i) const noexcept { return params_[i]; }

  /// Index of `name`; throws UsageError when absent.
  std::size_t index_of(std::string_view name) const;
  bool contains(std::string_view name) const;

  void zero_grads() noexcept;
  std::size_t total_values() const noexcept;

  auto begin() noexcept { return params_.begin(); }
  auto end() noexcept { return params_.end(); }
  auto begin() const noexcept { return params_.begin(); }
  auto end() const noexcept { return params_.end(); }

 private:
  std::vector<Parameter> params_;
  std::unordered_map<std::string, std::size_t> by_name_;
};

class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; valid while the Tape lives.
class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  const Matrix& grad() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  /// Value of a 1x1 node.
  double scalar() const;

  Tape* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Records a computation graph in topological order and replays it backwards.
/// Single owner; not safe to share between threads during a pass.
class Tape {
 public:
  using Backprop = std::function<void(Tape&, std::size_t self)>;

  explicit Tape(ParamStore* params = nullptr) : params_(params) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  /// Constant leaf that refers to `value` without copying; it must outlive the tape.
  Var constant_ref(const Matrix& value);
  /// Leaf bound to params[index]; backward() accumulates into its grad.
  Var parameter(std::size_t index);
  Var parameter(std::string_view name);

  /// Records an op result whose backprop reads grad(self) and accumulates into inputs.
  Var record(Matrix value, Backprop backprop);

  /// Propagates d(loss)/d(node) for every node and accumulates parameter gradients
  /// into the ParamStore. Node gradients are recomputed from scratch on each call.
  void backward(Var loss);

  const Matrix& value(std::size_t id) const;
  const Matrix& grad(std::size_t id) const;
  /// Gradient buffer for accumulation during backprop (zero-initialised on first use).
  Matrix& grad_accumulator(std::size_t id);

  std::size_t size() const noexcept { return nodes_.size(); }
  ParamStore* params() const noexcept { return params_; }

 private:
  struct Node {
    Matrix value;
    const Matrix* external = nullptr;
    Matrix grad;
    bool has_grad = false;
    Backprop backprop;
    std::ptrdiff_t param = -1;
  };

  Var make(Node node);

  std::vector<Node> nodes_;
  ParamStore* params_;
  Matrix empty_;
};

enum class Axis { rows, cols };

// Differentiable operations. Inputs must belong to the same tape.
Var matmul(Var a, Var b);
/// Elementwise sum; `b` may also be a 1 x cols row broadcast over rows of `a`.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var add_scalar(Var a, double offset);
Var tanh(Var a);
Var exp(Var a);
Var relu(Var a);
/// Normalises along rows (Axis::rows: each row sums to 1) or columns.
Var softmax(Var a, Axis axis = Axis::rows);
Var log_softmax(Var a, Axis axis = Axis::rows);
/// 1x1 total of all entries.
Var sum(Var a);
/// n x 1 vector of per-row totals.
Var row_sums(Var a);
Var select_rows(Var a, std::span<const std::size_t> rows);
Var affine(Var x, Var weight, Var bias);
/// Sparse input rows times a dense weight, plus a broadcast bias row.
Var sparse_affine(const SparseRows& x, Var weight, Var bias);
/// Per-row weighted negative log-likelihood: out[i] = -sum_j w_ij * log_probs[i, j].
Var weighted_nll(Var log_probs, const SparseRows& targets);

/// z = mu + exp(log_sigma) * eps with eps ~ N(0, I); eps is a constant on the tape.
/// With `deterministic` set the noise is skipped and z = mu.
Var sample_gaussian_reparam(Var mu, Var log_sigma, Rng& rng, bool deterministic = false);
/// softmax((logits + g) / tau) with Gumbel(0, 1) noise g. Soft sample, no straight-through.
Var gumbel_softmax(Var logits, double tau, Rng& rng);
/// Inverted dropout; identity when !training or rate == 0.
Var dropout(Var x, double rate, Rng& rng, bool training);
/// Per-row KL(N(mu, sigma^2) || N(0, I)), n x 1.
Var kl_gaussian_std(Var mu, Var log_sigma);
/// Per-row KL(softmax(logits) || Uniform(cols)), n x 1.
Var kl_categorical_uniform_logits(Var logits);

// Value-level helpers.
void softmax_inplace(std::span<double> values) noexcept;
double kl_gaussian_std(std::span<const double> mu, std::span<const double> log_sigma);
/// KL(p || Uniform(p.size())) with 0 log 0 := 0. Throws when p is not normalised within 1e-6.
double kl_categorical_uniform(std::span<const double> p);

/// Builds the loss on a fresh tape; must be deterministic (freeze any Rng inside).
using LossBuilder = std::function<Var(Tape&)>;

/// Compares tape gradients against central differences over every parameter
/// coordinate. Returns max |a - b| / max(1e-8, |a| + |b|).
double finite_diff_check(const LossBuilder& build, ParamStore& params, double eps = 1e-5);

}  // namespace convmatch
