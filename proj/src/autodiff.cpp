#include "convmatch/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "convmatch/errors.hpp"

namespace convmatch {

// ---------------------------------------------------------------------------
// ParamStore

std::size_t ParamStore::add(std::string name, Matrix init) {
  if (by_name_.contains(name)) throw UsageError("duplicate parameter name '" + name + "'");
  const std::size_t index = params_.size();
  Matrix grad(init.rows(), init.cols());
  by_name_.emplace(name, index);
  params_.push_back(Parameter{std::move(name), std::move(init), std::move(grad)});
  return index;
}

std::size_t ParamStore::index_of(std::string_view name) const {
  auto it = by_name_.find(std::string(name));
  if (it == by_name_.end()) throw UsageError("unknown parameter '" + std::string(name) + "'");
  return it->second;
}

bool ParamStore::contains(std::string_view name) const {
  return by_name_.contains(std::string(name));
}

void ParamStore::zero_grads() noexcept {
  for (auto& p : params_) p.grad.fill(0.0);
}

std::size_t ParamStore::total_values() const noexcept {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

// ---------------------------------------------------------------------------
// Tape

const Matrix& Var::value() const { return tape_->value(id_); }
const Matrix& Var::grad() const { return tape_->grad(id_); }

double Var::scalar() const {
  const Matrix& v = value();
  if (v.rows() != 1 || v.cols() != 1) {
    throw UsageError("scalar() on non-scalar node " + v.shape_string());
  }
  return v(0, 0);
}

Var Tape::make(Node node) {
#ifndef NDEBUG
  const Matrix& v = node.external ? *node.external : node.value;
  if (!v.all_finite()) throw NumericError("non-finite value recorded on tape");
#endif
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Matrix value) {
  Node node;
  node.value = std::move(value);
  return make(std::move(node));
}

Var Tape::constant_ref(const Matrix& value) {
  Node node;
  node.external = &value;
  return make(std::move(node));
}

Var Tape::parameter(std::size_t index) {
  if (params_ == nullptr || index >= params_->size()) {
    throw UsageError("tape has no parameter #" + std::to_string(index));
  }
  Node node;
  node.external = &(*params_)[index].value;
  node.param = static_cast<std::ptrdiff_t>(index);
  return make(std::move(node));
}

Var Tape::parameter(std::string_view name) {
  if (params_ == nullptr) throw UsageError("tape is not bound to a parameter store");
  return parameter(params_->index_of(name));
}

Var Tape::record(Matrix value, Backprop backprop) {
  Node node;
  node.value = std::move(value);
  node.backprop = std::move(backprop);
  return make(std::move(node));
}

const Matrix& Tape::value(std::size_t id) const {
  const Node& n = nodes_.at(id);
  return n.external ? *n.external : n.value;
}

const Matrix& Tape::grad(std::size_t id) const {
  const Node& n = nodes_.at(id);
  return n.has_grad ? n.grad : empty_;
}

Matrix& Tape::grad_accumulator(std::size_t id) {
  Node& n = nodes_[id];
  if (!n.has_grad) {
    const Matrix& v = n.external ? *n.external : n.value;
    if (n.grad.same_shape(v)) {
      n.grad.fill(0.0);
    } else {
      n.grad = Matrix(v.rows(), v.cols());
    }
    n.has_grad = true;
  }
  return n.grad;
}

void Tape::backward(Var loss) {
  if (loss.tape() != this) throw UsageError("loss node belongs to a different tape");
  const Matrix& lv = value(loss.id());
  if (lv.rows() != 1 || lv.cols() != 1) {
    throw UsageError("backward requires a scalar loss, got " + lv.shape_string());
  }
  for (auto& n : nodes_) n.has_grad = false;
  grad_accumulator(loss.id())(0, 0) = 1.0;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.has_grad) continue;
    if (n.backprop) n.backprop(*this, i);
    if (n.param >= 0 && params_ != nullptr) {
      Matrix& target = (*params_)[static_cast<std::size_t>(n.param)].grad;
      auto dst = target.values();
      auto src = nodes_[i].grad.values();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    }
  }
}

// ---------------------------------------------------------------------------
// Operations

namespace {

void require_same_tape(Var a, Var b) {
  if (!a.valid() || !b.valid() || a.tape() != b.tape()) {
    throw UsageError("operands belong to different tapes");
  }
}

void require_same_shape(const char* op, const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) {
    throw UsageError(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " +
                     b.shape_string());
  }
}

// C = A * B
Matrix gemm(const Matrix& a, const Matrix& b) {
  Matrix c(a.rows(), b.cols());
  const std::size_t n = a.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto out = c.row(i);
    for (std::size_t k = 0; k < n; ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      auto brow = b.row(k);
      for (std::size_t j = 0; j < out.size(); ++j) out[j] += aik * brow[j];
    }
  }
  return c;
}

// dA += dY * B^T
void gemm_add_bt(const Matrix& dy, const Matrix& b, Matrix& da) {
  for (std::size_t i = 0; i < dy.rows(); ++i) {
    auto g = dy.row(i);
    auto out = da.row(i);
    for (std::size_t k = 0; k < b.rows(); ++k) {
      auto brow = b.row(k);
      double acc = 0.0;
      for (std::size_t j = 0; j < g.size(); ++j) acc += g[j] * brow[j];
      out[k] += acc;
    }
  }
}

// dB += A^T * dY
void gemm_add_at(const Matrix& a, const Matrix& dy, Matrix& db) {
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto g = dy.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      auto out = db.row(k);
      for (std::size_t j = 0; j < g.size(); ++j) out[j] += aik * g[j];
    }
  }
}

template <class F>
Var unary(Var a, F forward, std::function<double(double x, double y)> derivative) {
  const Matrix& av = a.value();
  Matrix out(av.rows(), av.cols());
  auto src = av.values();
  auto dst = out.values();
  for (std::size_t k = 0; k < src.size(); ++k) dst[k] = forward(src[k]);
  const std::size_t ia = a.id();
  return a.tape()->record(std::move(out), [ia, derivative](Tape& t, std::size_t self) {
    auto g = t.grad(self).values();
    auto y = t.value(self).values();
    auto x = t.value(ia).values();
    auto da = t.grad_accumulator(ia).values();
    for (std::size_t k = 0; k < g.size(); ++k) da[k] += g[k] * derivative(x[k], y[k]);
  });
}

// Visits each normalisation line (a row or a column) as (offset, stride, length).
template <class F>
void for_each_line(const Matrix& m, Axis axis, F&& f) {
  if (axis == Axis::rows) {
    for (std::size_t r = 0; r < m.rows(); ++r) f(r * m.cols(), std::size_t{1}, m.cols());
  } else {
    for (std::size_t c = 0; c < m.cols(); ++c) f(c, m.cols(), m.rows());
  }
}

}  // namespace

Var matmul(Var a, Var b) {
  require_same_tape(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.cols() != bv.rows()) {
    throw UsageError("matmul: inner dimensions disagree " + av.shape_string() + " x " +
                     bv.shape_string());
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape()->record(gemm(av, bv), [ia, ib](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    gemm_add_bt(g, t.value(ib), t.grad_accumulator(ia));
    gemm_add_at(t.value(ia), g, t.grad_accumulator(ib));
  });
}

Var add(Var a, Var b) {
  require_same_tape(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  const bool broadcast = !av.same_shape(bv) && bv.rows() == 1 && bv.cols() == av.cols();
  if (!broadcast) require_same_shape("add", av, bv);
  Matrix out = av;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto dst = out.row(r);
    auto src = broadcast ? bv.row(0) : bv.row(r);
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(out), [ia, ib, broadcast](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    {
      auto da = t.grad_accumulator(ia).values();
      auto gv = g.values();
      for (std::size_t k = 0; k < gv.size(); ++k) da[k] += gv[k];
    }
    Matrix& db = t.grad_accumulator(ib);
    for (std::size_t r = 0; r < g.rows(); ++r) {
      auto dst = broadcast ? db.row(0) : db.row(r);
      auto src = g.row(r);
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
    }
  });
}

Var sub(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape("sub", a.value(), b.value());
  Matrix out = a.value();
  auto dst = out.values();
  auto src = b.value().values();
  for (std::size_t k = 0; k < dst.size(); ++k) dst[k] -= src[k];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(out), [ia, ib](Tape& t, std::size_t self) {
    auto g = t.grad(self).values();
    auto da = t.grad_accumulator(ia).values();
    for (std::size_t k = 0; k < g.size(); ++k) da[k] += g[k];
    auto db = t.grad_accumulator(ib).values();
    for (std::size_t k = 0; k < g.size(); ++k) db[k] -= g[k];
  });
}

Var mul(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape("mul", a.value(), b.value());
  Matrix out = a.value();
  auto dst = out.values();
  auto src = b.value().values();
  for (std::size_t k = 0; k < dst.size(); ++k) dst[k] *= src[k];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(out), [ia, ib](Tape& t, std::size_t self) {
    auto g = t.grad(self).values();
    {
      auto bv = t.value(ib).values();
      auto da = t.grad_accumulator(ia).values();
      for (std::size_t k = 0; k < g.size(); ++k) da[k] += g[k] * bv[k];
    }
    auto av = t.value(ia).values();
    auto db = t.grad_accumulator(ib).values();
    for (std::size_t k = 0; k < g.size(); ++k) db[k] += g[k] * av[k];
  });
}

Var scale(Var a, double factor) {
  return unary(
      a, [factor](double x) { return factor * x; },
      [factor](double, double) { return factor; });
}

Var add_scalar(Var a, double offset) {
  return unary(
      a, [offset](double x) { return x + offset; }, [](double, double) { return 1.0; });
}

Var tanh(Var a) {
  return unary(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var exp(Var a) {
  return unary(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var relu(Var a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var softmax(Var a, Axis axis) {
  const Matrix& av = a.value();
  Matrix out = av;
  auto v = out.values();
  for_each_line(out, axis, [&](std::size_t off, std::size_t stride, std::size_t len) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, v[off + k * stride]);
    double total = 0.0;
    for (std::size_t k = 0; k < len; ++k) {
      double& x = v[off + k * stride];
      x = std::exp(x - mx);
      total += x;
    }
    for (std::size_t k = 0; k < len; ++k) v[off + k * stride] /= total;
  });
  const std::size_t ia = a.id();
  return a.tape()->record(std::move(out), [ia, axis](Tape& t, std::size_t self) {
    const Matrix& y = t.value(self);
    auto g = t.grad(self).values();
    auto yv = y.values();
    auto da = t.grad_accumulator(ia).values();
    for_each_line(y, axis, [&](std::size_t off, std::size_t stride, std::size_t len) {
      double dot = 0.0;
      for (std::size_t k = 0; k < len; ++k) dot += g[off + k * stride] * yv[off + k * stride];
      for (std::size_t k = 0; k < len; ++k) {
        const std::size_t idx = off + k * stride;
        da[idx] += yv[idx] * (g[idx] - dot);
      }
    });
  });
}

Var log_softmax(Var a, Axis axis) {
  const Matrix& av = a.value();
  Matrix out = av;
  auto v = out.values();
  for_each_line(out, axis, [&](std::size_t off, std::size_t stride, std::size_t len) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, v[off + k * stride]);
    double total = 0.0;
    for (std::size_t k = 0; k < len; ++k) total += std::exp(v[off + k * stride] - mx);
    const double log_norm = mx + std::log(total);
    for (std::size_t k = 0; k < len; ++k) v[off + k * stride] -= log_norm;
  });
  const std::size_t ia = a.id();
  return a.tape()->record(std::move(out), [ia, axis](Tape& t, std::size_t self) {
    const Matrix& y = t.value(self);
    auto g = t.grad(self).values();
    auto yv = y.values();
    auto da = t.grad_accumulator(ia).values();
    for_each_line(y, axis, [&](std::size_t off, std::size_t stride, std::size_t len) {
      double gsum = 0.0;
      for (std::size_t k = 0; k < len; ++k) gsum += g[off + k * stride];
      for (std::size_t k = 0; k < len; ++k) {
        const std::size_t idx = off + k * stride;
        da[idx] += g[idx] - std::exp(yv[idx]) * gsum;
      }
    });
  });
}

Var sum(Var a) {
  double total = 0.0;
  for (double x : a.value().values()) total += x;
  const std::size_t ia = a.id();
  return a.tape()->record(Matrix(1, 1, total), [ia](Tape& t, std::size_t self) {
    const double g = t.grad(self)(0, 0);
    for (double& d : t.grad_accumulator(ia).values()) d += g;
  });
}

Var row_sums(Var a) {
  const Matrix& av = a.value();
  Matrix out(av.rows(), 1);
  for (std::size_t r = 0; r < av.rows(); ++r) {
    double total = 0.0;
    for (double x : av.row(r)) total += x;
    out(r, 0) = total;
  }
  const std::size_t ia = a.id();
  return a.tape()->record(std::move(out), [ia](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    Matrix& da = t.grad_accumulator(ia);
    for (std::size_t r = 0; r < da.rows(); ++r) {
      for (double& d : da.row(r)) d += g(r, 0);
    }
  });
}

Var select_rows(Var a, std::span<const std::size_t> rows) {
  const Matrix& av = a.value();
  Matrix out(rows.size(), av.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= av.rows()) {
      throw UsageError("select_rows: row " + std::to_string(rows[i]) + " outside " +
                       av.shape_string());
    }
    std::copy(av.row(rows[i]).begin(), av.row(rows[i]).end(), out.row(i).begin());
  }
  const std::size_t ia = a.id();
  std::vector<std::size_t> picked(rows.begin(), rows.end());
  return a.tape()->record(std::move(out), [ia, picked = std::move(picked)](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    Matrix& da = t.grad_accumulator(ia);
    for (std::size_t i = 0; i < picked.size(); ++i) {
      auto dst = da.row(picked[i]);
      auto src = g.row(i);
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
    }
  });
}

Var affine(Var x, Var weight, Var bias) { return add(matmul(x, weight), bias); }

Var sparse_affine(const SparseRows& x, Var weight, Var bias) {
  require_same_tape(weight, bias);
  const Matrix& w = weight.value();
  const Matrix& b = bias.value();
  if (x.cols != w.rows() || b.rows() != 1 || b.cols() != w.cols()) {
    throw UsageError("sparse_affine: shape mismatch input (" + std::to_string(x.rows.size()) +
                     "x" + std::to_string(x.cols) + ") weight " + w.shape_string() +
                     " bias " + b.shape_string());
  }
  Matrix out(x.rows.size(), w.cols());
  for (std::size_t i = 0; i < x.rows.size(); ++i) {
    auto dst = out.row(i);
    std::copy(b.row(0).begin(), b.row(0).end(), dst.begin());
    const SparseRow& row = x.rows[i];
    for (std::size_t e = 0; e < row.index.size(); ++e) {
      auto wrow = w.row(row.index[e]);
      const double xv = row.value[e];
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += xv * wrow[j];
    }
  }
  const std::size_t iw = weight.id(), ib = bias.id();
  return weight.tape()->record(std::move(out), [iw, ib, x](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    Matrix& dw = t.grad_accumulator(iw);
    Matrix& db = t.grad_accumulator(ib);
    for (std::size_t i = 0; i < x.rows.size(); ++i) {
      auto gi = g.row(i);
      auto dbr = db.row(0);
      for (std::size_t j = 0; j < gi.size(); ++j) dbr[j] += gi[j];
      const SparseRow& row = x.rows[i];
      for (std::size_t e = 0; e < row.index.size(); ++e) {
        auto dst = dw.row(row.index[e]);
        const double xv = row.value[e];
        for (std::size_t j = 0; j < gi.size(); ++j) dst[j] += xv * gi[j];
      }
    }
  });
}

Var weighted_nll(Var log_probs, const SparseRows& targets) {
  const Matrix& lp = log_probs.value();
  if (targets.cols != lp.cols() || targets.rows.size() != lp.rows()) {
    throw UsageError("weighted_nll: targets (" + std::to_string(targets.rows.size()) + "x" +
                     std::to_string(targets.cols) + ") vs log-probs " + lp.shape_string());
  }
  Matrix out(lp.rows(), 1);
  for (std::size_t i = 0; i < lp.rows(); ++i) {
    const SparseRow& row = targets.rows[i];
    double total = 0.0;
    for (std::size_t e = 0; e < row.index.size(); ++e) total -= row.value[e] * lp(i, row.index[e]);
    out(i, 0) = total;
  }
  const std::size_t ia = log_probs.id();
  return log_probs.tape()->record(std::move(out), [ia, targets](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    Matrix& da = t.grad_accumulator(ia);
    for (std::size_t i = 0; i < targets.rows.size(); ++i) {
      const SparseRow& row = targets.rows[i];
      for (std::size_t e = 0; e < row.index.size(); ++e) {
        da(i, row.index[e]) -= row.value[e] * g(i, 0);
      }
    }
  });
}

Var sample_gaussian_reparam(Var mu, Var log_sigma, Rng& rng, bool deterministic) {
  require_same_tape(mu, log_sigma);
  require_same_shape("sample_gaussian_reparam", mu.value(), log_sigma.value());
  if (deterministic) return mu;
  Matrix eps(mu.rows(), mu.cols());
  for (double& e : eps.values()) e = rng.normal();
  Var noise = mu.tape()->constant(std::move(eps));
  return add(mu, mul(exp(log_sigma), noise));
}

Var gumbel_softmax(Var logits, double tau, Rng& rng) {
  if (!(tau > 0.0)) throw UsageError("gumbel_softmax: temperature must be positive");
  Matrix g(logits.rows(), logits.cols());
  for (double& x : g.values()) x = -std::log(-std::log(rng.uniform_open()));
  Var noise = logits.tape()->constant(std::move(g));
  return softmax(scale(add(logits, noise), 1.0 / tau), Axis::rows);
}

Var dropout(Var x, double rate, Rng& rng, bool training) {
  if (!(rate >= 0.0 && rate < 1.0)) throw UsageError("dropout: rate must lie in [0, 1)");
  if (!training || rate == 0.0) return x;
  Matrix mask(x.rows(), x.cols());
  const double keep_scale = 1.0 / (1.0 - rate);
  for (double& m : mask.values()) m = rng.uniform() >= rate ? keep_scale : 0.0;
  return mul(x, x.tape()->constant(std::move(mask)));
}

Var kl_gaussian_std(Var mu, Var log_sigma) {
  require_same_tape(mu, log_sigma);
  const Matrix& m = mu.value();
  const Matrix& s = log_sigma.value();
  require_same_shape("kl_gaussian_std", m, s);
  Matrix out(m.rows(), 1);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    double total = 0.0;
    for (std::size_t c = 0; c < m.cols(); ++c) {
      const double ls = s(r, c);
      total += 0.5 * (m(r, c) * m(r, c) + std::exp(2.0 * ls) - 1.0 - 2.0 * ls);
    }
    out(r, 0) = total;
  }
  const std::size_t im = mu.id(), is = log_sigma.id();
  return mu.tape()->record(std::move(out), [im, is](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    const Matrix& m = t.value(im);
    const Matrix& s = t.value(is);
    Matrix& dm = t.grad_accumulator(im);
    Matrix& ds = t.grad_accumulator(is);
    for (std::size_t r = 0; r < m.rows(); ++r) {
      for (std::size_t c = 0; c < m.cols(); ++c) {
        dm(r, c) += g(r, 0) * m(r, c);
        ds(r, c) += g(r, 0) * (std::exp(2.0 * s(r, c)) - 1.0);
      }
    }
  });
}

Var kl_categorical_uniform_logits(Var logits) {
  const Matrix& l = logits.value();
  const double log_n = std::log(static_cast<double>(l.cols()));
  Matrix logp = l;
  Matrix out(l.rows(), 1);
  for (std::size_t r = 0; r < l.rows(); ++r) {
    auto row = logp.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double total = 0.0;
    for (double x : row) total += std::exp(x - mx);
    const double log_norm = mx + std::log(total);
    double kl = log_n;
    for (double& x : row) {
      x -= log_norm;
      kl += std::exp(x) * x;
    }
    out(r, 0) = kl;
  }
  const std::size_t il = logits.id();
  return logits.tape()->record(
      std::move(out), [il, logp = std::move(logp)](Tape& t, std::size_t self) {
        const Matrix& g = t.grad(self);
        Matrix& dl = t.grad_accumulator(il);
        for (std::size_t r = 0; r < logp.rows(); ++r) {
          auto row = logp.row(r);
          double neg_entropy = 0.0;
          for (double x : row) neg_entropy += std::exp(x) * x;
          for (std::size_t c = 0; c < row.size(); ++c) {
            dl(r, c) += g(r, 0) * std::exp(row[c]) * (row[c] - neg_entropy);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Value-level helpers

void softmax_inplace(std::span<double> values) noexcept {
  if (values.empty()) return;
  const double mx = *std::max_element(values.begin(), values.end());
  double total = 0.0;
  for (double& x : values) {
    x = std::exp(x - mx);
    total += x;
  }
  for (double& x : values) x /= total;
}

double kl_gaussian_std(std::span<const double> mu, std::span<const double> log_sigma) {
  if (mu.size() != log_sigma.size()) throw UsageError("kl_gaussian_std: shape mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    total += 0.5 * (mu[i] * mu[i] + std::exp(2.0 * log_sigma[i]) - 1.0 - 2.0 * log_sigma[i]);
  }
  return total;
}

double kl_categorical_uniform(std::span<const double> p) {
  if (p.empty()) throw UsageError("kl_categorical_uniform: empty distribution");
  double mass = 0.0;
  for (double x : p) {
    if (x < 0.0) throw UsageError("kl_categorical_uniform: negative probability");
    mass += x;
  }
  if (std::abs(mass - 1.0) > 1e-6) {
    throw UsageError("kl_categorical_uniform: distribution not normalised (sum " +
                     std::to_string(mass) + ")");
  }
  const double log_n = std::log(static_cast<double>(p.size()));
  double kl = 0.0;
  for (double x : p) {
    if (x > 0.0) kl += x * (std::log(x) + log_n);
  }
  return kl;
}

double finite_diff_check(const LossBuilder& build, ParamStore& params, double eps) {
  if (!(eps > 0.0)) throw UsageError("finite_diff_check: degenerate step");
  params.zero_grads();
  {
    Tape tape(&params);
    Var loss = build(tape);
    tape.backward(loss);
  }
  auto evaluate = [&]() {
    Tape tape(&params);
    return build(tape).scalar();
  };
  double worst = 0.0;
  for (auto& p : params) {
    auto values = p.value.values();
    auto grads = p.grad.values();
    for (std::size_t k = 0; k < values.size(); ++k) {
      const double original = values[k];
      values[k] = original + eps;
      const double up = evaluate();
      values[k] = original - eps;
      const double down = evaluate();
      values[k] = original;
      const double numeric = (up - down) / (2.0 * eps);
      const double analytic = grads[k];
      const double rel =
          std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace convmatch
