#pragma once

// Tape-based reverse-mode differentiation over fcvae::Tensor.
//
// A Tape is built per forward pass. Every op appends one node holding its
// output value, the ids of its inputs, and a closure that pushes the output
// gradient back into the inputs. Nodes are appended in evaluation order, so
// the node list is already topologically sorted and backward() is a single
// reverse sweep.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "fcvae/error.hpp"
#include "fcvae/tensor.hpp"

namespace fcvae {

struct Parameter {
  std::string name;
  Tensor tensor;
};

// Owns the named parameters of a model. Insertion order is the canonical
// order used by checkpoints and reports.
class ParameterStore {
 public:
  Parameter& add(const std::string& name, Tensor value) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    auto p = std::make_unique<Parameter>(Parameter{name, std::move(value)});
    p->tensor.enable_grad();
    index_[name] = params_.size();
    params_.push_back(std::move(p));
    return *params_.back();
  }

  Parameter& add_uniform(const std::string& name, Shape shape, double scale, std::mt19937_64& rng) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<double> dist(-scale, scale);
    for (double& v : t.storage()) v = dist(rng);
    return add(name, std::move(t));
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Parameter& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return *params_[it->second];
  }
  const Parameter& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return *params_[it->second];
  }

  std::size_t size() const noexcept { return params_.size(); }
  std::size_t numel() const noexcept {
    std::size_t n = 0;
    for (const auto& p : params_) n += p->tensor.size();
    return n;
  }

  std::vector<Parameter*> all() {
    std::vector<Parameter*> out;
    for (auto& p : params_) out.push_back(p.get());
    return out;
  }
  std::vector<const Parameter*> all() const {
    std::vector<const Parameter*> out;
    for (const auto& p : params_) out.push_back(p.get());
    return out;
  }

  void zero_grad() {
    for (auto& p : params_) p->tensor.zero_grad();
  }

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

class Tape;

// Lightweight handle to a node on a tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }
  inline const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) { return push(std::move(value), {}, false, nullptr, nullptr); }

  // Leaf for a trainable parameter; repeated calls reuse one node so that
  // gradient from every use site lands in the same place.
  Var param(Parameter& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return Var(this, it->second);
    Var v = push(p.tensor, {}, p.tensor.requires_grad && grad_enabled_, nullptr, &p);
    param_nodes_[&p] = v.id();
    return v;
  }

  // Records an op. The node requires grad iff any input does.
  Var record(Tensor value, std::vector<std::size_t> inputs, BackwardFn fn) {
    bool rg = false;
    if (grad_enabled_)
      for (std::size_t i : inputs) rg = rg || nodes_[i].requires_grad;
    if (!rg) {
      inputs.clear();
      fn = nullptr;
    }
    return push(std::move(value), std::move(inputs), rg, std::move(fn), nullptr);
  }

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Disables recording of backward closures (inference mode).
  void set_grad_enabled(bool on) noexcept { grad_enabled_ = on; }
  bool grad_enabled() const noexcept { return grad_enabled_; }

  // Gradient buffer of a node, allocated on first access.
  std::vector<double>& grad(std::size_t id) {
    auto& n = nodes_[id];
    if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), 0.0);
    return n.grad;
  }
  const std::vector<double>& grad(Var v) { return grad(v.id()); }

  // Reverse sweep from a scalar root. Parameter leaves accumulate into
  // Parameter::tensor.grad (callers zero it between steps).
  void backward(Var root) {
    if (root.value().size() != 1) throw DimensionError("backward() needs a scalar root, got " + shape_str(root.value().shape()));
    for (auto& n : nodes_) std::fill(n.grad.begin(), n.grad.end(), 0.0);
    if (!nodes_[root.id()].requires_grad) return;
    grad(root.id())[0] = 1.0;
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.backward) n.backward(*this, i);
      if (n.param) {
        auto& pg = n.param->tensor.grad;
        for (std::size_t k = 0; k < pg.size(); ++k) pg[k] += n.grad[k];
      }
    }
  }

  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_[id].inputs; }

 private:
  struct Node {
    Tensor value;
    std::vector<double> grad;
    std::vector<std::size_t> inputs;
    bool requires_grad = false;
    BackwardFn backward;
    Parameter* param = nullptr;
  };

  Var push(Tensor value, std::vector<std::size_t> inputs, bool rg, BackwardFn fn, Parameter* p) {
    Node n;
    n.value = std::move(value);
    n.value.requires_grad = false;
    n.value.grad.clear();
    n.inputs = std::move(inputs);
    n.requires_grad = rg;
    n.backward = std::move(fn);
    n.param = p;
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> param_nodes_;
  bool grad_enabled_ = true;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }

namespace ad {

namespace detail {

inline Tape& same_tape(const Var& a, const Var& b) {
  if (&a.tape() != &b.tape()) throw DimensionError("operands live on different tapes");
  return a.tape();
}

inline void add_into(std::vector<double>& dst, std::span<const double> src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

// out[m x n] += a[m x k] * b[k x n]
inline void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* out) {
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = out + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

// out[m x k] += g[m x n] * b[k x n]^T
inline void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* g, const double* b, double* out) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = g + i * n;
    double* orow = out + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
      orow[p] += s;
    }
  }
}

// out[k x n] += a[m x k]^T * g[m x n]
inline void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* g, double* out) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      double* orow = out + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * grow[j];
    }
  }
}

template <class Fwd, class Dfdx>
Var unary(Var a, Fwd fwd, Dfdx dfdx) {
  Tape& t = a.tape();
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = fwd(x[i]);
  const std::size_t ia = a.id();
  return t.record(std::move(y), {ia}, [ia, dfdx](Tape& tp, std::size_t self) {
    if (!tp.requires_grad(ia)) return;
    const auto& x = tp.value(ia);
    const auto& y = tp.value(self);
    const auto& g = tp.grad(self);
    auto& gx = tp.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * dfdx(x[i], y[i]);
  });
}

enum class BinOp { add, sub, mul };

inline Var binary(Var a, Var b, BinOp op) {
  Tape& t = same_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  const bool xs = x.size() == 1, ys = y.size() == 1;
  if (!(x.shape() == y.shape() || xs || ys))
    throw DimensionError("elementwise op on incompatible shapes " + shape_str(x.shape()) + " and " + shape_str(y.shape()));
  const Shape& out_shape = (x.shape() == y.shape() || ys) ? x.shape() : y.shape();
  Tensor z(out_shape);
  const std::size_t n = z.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double xv = xs ? x[0] : x[i];
    const double yv = ys ? y[0] : y[i];
    z[i] = op == BinOp::add ? xv + yv : op == BinOp::sub ? xv - yv : xv * yv;
  }
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(z), {ia, ib}, [ia, ib, op, xs, ys](Tape& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    const std::size_t n = g.size();
    if (tp.requires_grad(ia)) {
      auto& gx = tp.grad(ia);
      const auto& y = tp.value(ib);
      for (std::size_t i = 0; i < n; ++i) {
        const double d = op == BinOp::mul ? g[i] * (ys ? y[0] : y[i]) : g[i];
        gx[xs ? 0 : i] += d;
      }
    }
    if (tp.requires_grad(ib)) {
      auto& gy = tp.grad(ib);
      const auto& x = tp.value(ia);
      for (std::size_t i = 0; i < n; ++i) {
        const double d = op == BinOp::mul ? g[i] * (xs ? x[0] : x[i]) : (op == BinOp::sub ? -g[i] : g[i]);
        gy[ys ? 0 : i] += d;
      }
    }
  });
}

}  // namespace detail

inline Var matmul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  const std::size_t m = x.rows(), k = x.cols(), n = y.cols();
  if (y.rows() != k)
    throw DimensionError("matmul inner dimensions disagree: " + shape_str(x.shape()) + " x " + shape_str(y.shape()));
  Tensor z(Shape{m, n});
  detail::gemm_nn(m, k, n, x.data().data(), y.data().data(), z.data().data());
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(z), {ia, ib}, [ia, ib, m, k, n](Tape& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    if (tp.requires_grad(ia))
      detail::gemm_nt(m, n, k, g.data(), tp.value(ib).data().data(), tp.grad(ia).data());
    if (tp.requires_grad(ib))
      detail::gemm_tn(m, k, n, tp.value(ia).data().data(), g.data(), tp.grad(ib).data());
  });
}

inline Var add(Var a, Var b) { return detail::binary(a, b, detail::BinOp::add); }
inline Var sub(Var a, Var b) { return detail::binary(a, b, detail::BinOp::sub); }
inline Var mul(Var a, Var b) { return detail::binary(a, b, detail::BinOp::mul); }

inline Var neg(Var a) {
  return detail::unary(a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}
inline Var scale(Var a, double s) {
  return detail::unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}
inline Var tanh(Var a) {
  return detail::unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}
inline Var sigmoid(Var a) {
  return detail::unary(
      a,
      [](double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
      [](double, double y) { return y * (1.0 - y); });
}
inline Var exp(Var a) {
  return detail::unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}
inline Var log(Var a) {
  for (double v : a.value().data())
    if (!(v > 0.0)) throw DomainError("log of non-positive value " + std::to_string(v));
  return detail::unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}
// Gradient is 1 strictly inside [lo, hi] and 0 where the value was clamped.
inline Var clamp(Var a, double lo, double hi) {
  return detail::unary(
      a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

// a[m x n] + b[1 x n], b broadcast over rows.
inline Var add_row(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  const std::size_t m = x.rows(), n = x.cols();
  if (y.size() != n) throw DimensionError("add_row: " + shape_str(x.shape()) + " + row " + shape_str(y.shape()));
  Tensor z(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) z[i * n + j] = x[i * n + j] + y[j];
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(z), {ia, ib}, [ia, ib, m, n](Tape& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    if (tp.requires_grad(ia)) detail::add_into(tp.grad(ia), g);
    if (tp.requires_grad(ib)) {
      auto& gy = tp.grad(ib);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gy[j] += g[i * n + j];
    }
  });
}

// a[m x n] scaled row-wise by c[m x 1].
inline Var mul_col(Var a, Var c) {
  Tape& t = detail::same_tape(a, c);
  const Tensor& x = a.value();
  const Tensor& s = c.value();
  const std::size_t m = x.rows(), n = x.cols();
  if (s.size() != m) throw DimensionError("mul_col: " + shape_str(x.shape()) + " by column " + shape_str(s.shape()));
  Tensor z(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) z[i * n + j] = x[i * n + j] * s[i];
  const std::size_t ia = a.id(), ic = c.id();
  return t.record(std::move(z), {ia, ic}, [ia, ic, m, n](Tape& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    if (tp.requires_grad(ia)) {
      auto& gx = tp.grad(ia);
      const auto& s = tp.value(ic);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[i * n + j] * s[i];
    }
    if (tp.requires_grad(ic)) {
      auto& gs = tp.grad(ic);
      const auto& x = tp.value(ia);
      for (std::size_t i = 0; i < m; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * x[i * n + j];
        gs[i] += acc;
      }
    }
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols of nothing");
  Tape& t = parts.front().tape();
  const std::size_t m = parts.front().rows();
  std::size_t n = 0;
  std::vector<std::size_t> ids, widths;
  for (const Var& p : parts) {
    if (p.rows() != m)
      throw DimensionError("concat_cols row mismatch: " + shape_str(parts.front().value().shape()) + " vs " + shape_str(p.value().shape()));
    ids.push_back(p.id());
    widths.push_back(p.cols());
    n += p.cols();
  }
  Tensor z(Shape{m, n});
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Tensor& x = p.value();
    const std::size_t w = x.cols();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) z[i * n + off + j] = x[i * w + j];
    off += w;
  }
  return t.record(std::move(z), ids, [ids, widths, m, n](Tape& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      const std::size_t w = widths[k];
      if (tp.requires_grad(ids[k])) {
        auto& gx = tp.grad(ids[k]);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < w; ++j) gx[i * w + j] += g[i * n + off + j];
      }
      off += w;
    }
  });
}

inline Var slice_cols(Var a, std::size_t begin, std::size_t count) {
  Tape& t = a.tape();
  const Tensor& x = a.value();
  const std::size_t m = x.rows(), n = x.cols();
  if (count == 0 || begin + count > n)
    throw DimensionError("slice_cols [" + std::to_string(begin) + ", +" + std::to_string(count) + ") of " + shape_str(x.shape()));
  Tensor z(Shape{m, count});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < count; ++j) z[i * count + j] = x[i * n + begin + j];
  const std::size_t ia = a.id();
  return t.record(std::move(z), {ia}, [ia, m, n, begin, count](Tape& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    auto& gx = tp.grad(ia);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < count; ++j) gx[i * n + begin + j] += g[i * count + j];
  });
}

// Row r of the result is row ids[r] of table (embedding lookup).
inline Var gather_rows(Var table, std::span<const int> ids) {
  Tape& t = table.tape();
  const Tensor& x = table.value();
  const std::size_t v = x.rows(), d = x.cols();
  for (int id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= v)
      throw DimensionError("gather_rows id " + std::to_string(id) + " outside table " + shape_str(x.shape()));
  if (ids.empty()) throw DimensionError("gather_rows with no ids");
  Tensor z(Shape{ids.size(), d});
  for (std::size_t r = 0; r < ids.size(); ++r)
    std::copy_n(x.data().data() + static_cast<std::size_t>(ids[r]) * d, d, z.data().data() + r * d);
  std::vector<int> idv(ids.begin(), ids.end());
  const std::size_t it = table.id();
  return t.record(std::move(z), {it}, [it, idv, d](Tape& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    auto& gx = tp.grad(it);
    for (std::size_t r = 0; r < idv.size(); ++r)
      for (std::size_t j = 0; j < d; ++j) gx[static_cast<std::size_t>(idv[r]) * d + j] += g[r * d + j];
  });
}

// Row-wise choice: row r comes from a where mask[r] is set, otherwise from b.
inline Var where_rows(std::span<const std::uint8_t> mask, Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.shape() != y.shape() || mask.size() != x.rows())
    throw DimensionError("where_rows on " + shape_str(x.shape()) + " and " + shape_str(y.shape()));
  const std::size_t m = x.rows(), n = x.cols();
  Tensor z(x.shape());
  for (std::size_t i = 0; i < m; ++i) {
    const Tensor& src = mask[i] ? x : y;
    std::copy_n(src.data().data() + i * n, n, z.data().data() + i * n);
  }
  std::vector<std::uint8_t> mv(mask.begin(), mask.end());
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(z), {ia, ib}, [ia, ib, mv, n](Tape& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    for (std::size_t i = 0; i < mv.size(); ++i) {
      const std::size_t target = mv[i] ? ia : ib;
      if (!tp.requires_grad(target)) continue;
      auto& gt = tp.grad(target);
      for (std::size_t j = 0; j < n; ++j) gt[i * n + j] += g[i * n + j];
    }
  });
}

// Softmax along each row of a [m x n]. Masked entries (mask value 0) take a
// -inf logit, so their probability and their gradient are exactly zero.
// An empty mask means every position is live.
inline Var masked_softmax(Var a, std::span<const std::uint8_t> mask = {}) {
  Tape& t = a.tape();
  const Tensor& x = a.value();
  const std::size_t m = x.rows(), n = x.cols();
  if (!mask.empty() && mask.size() != m * n)
    throw DimensionError("softmax mask of length " + std::to_string(mask.size()) + " for logits " + shape_str(x.shape()));
  Tensor y(x.shape());
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (mask.empty() || mask[i * n + j]) mx = std::max(mx, x[i * n + j]);
    if (mx == -std::numeric_limits<double>::infinity())
      throw InvalidMaskError("softmax row " + std::to_string(i) + " has every position masked");
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double e = (mask.empty() || mask[i * n + j]) ? std::exp(x[i * n + j] - mx) : 0.0;
      y[i * n + j] = e;
      s += e;
    }
    for (std::size_t j = 0; j < n; ++j) y[i * n + j] /= s;
  }
  const std::size_t ia = a.id();
  return t.record(std::move(y), {ia}, [ia, m, n](Tape& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    const auto& y = tp.value(self);
    auto& gx = tp.grad(ia);
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
      for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
    }
  });
}

// Scalar sum_r weights[r] * (-log softmax(logits[r])[targets[r]]).
// Rows with zero weight are skipped entirely.
inline Var cross_entropy(Var logits, std::span<const int> targets, std::span<const double> weights) {
  Tape& t = logits.tape();
  const Tensor& x = logits.value();
  const std::size_t m = x.rows(), v = x.cols();
  if (targets.size() != m || weights.size() != m)
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " + shape_str(x.shape()));
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    if (weights[i] == 0.0) continue;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= v)
      throw ValidationError("target id " + std::to_string(targets[i]) + " outside vocabulary of size " + std::to_string(v));
    const double* row = x.data().data() + i * v;
    const double mx = *std::max_element(row, row + v);
    double s = 0.0;
    for (std::size_t j = 0; j < v; ++j) s += std::exp(row[j] - mx);
    total += weights[i] * (mx + std::log(s) - row[targets[i]]);
  }
  std::vector<int> tv(targets.begin(), targets.end());
  std::vector<double> wv(weights.begin(), weights.end());
  const std::size_t ia = logits.id();
  return t.record(Tensor::scalar(total), {ia}, [ia, tv, wv, m, v](Tape& tp, std::size_t self) {
    const double g = tp.grad(self)[0];
    const auto& x = tp.value(ia);
    auto& gx = tp.grad(ia);
    for (std::size_t i = 0; i < m; ++i) {
      if (wv[i] == 0.0) continue;
      const double* row = x.data().data() + i * v;
      const double mx = *std::max_element(row, row + v);
      double s = 0.0;
      for (std::size_t j = 0; j < v; ++j) s += std::exp(row[j] - mx);
      for (std::size_t j = 0; j < v; ++j) {
        const double p = std::exp(row[j] - mx) / s;
        gx[i * v + j] += g * wv[i] * (p - (static_cast<int>(j) == tv[i] ? 1.0 : 0.0));
      }
    }
  });
}

inline Var sum(Var a) {
  Tape& t = a.tape();
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const std::size_t ia = a.id();
  return t.record(Tensor::scalar(s), {ia}, [ia](Tape& tp, std::size_t self) {
    const double g = tp.grad(self)[0];
    for (double& gx : tp.grad(ia)) gx += g;
  });
}

inline Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

// [m x n] -> [m x 1] row sums.
inline Var sum_cols(Var a) {
  Tape& t = a.tape();
  const Tensor& x = a.value();
  const std::size_t m = x.rows(), n = x.cols();
  Tensor z(Shape{m, 1});
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += x[i * n + j];
    z[i] = s;
  }
  const std::size_t ia = a.id();
  return t.record(std::move(z), {ia}, [ia, m, n](Tape& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    auto& gx = tp.grad(ia);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[i];
  });
}

// [m x n] -> [m x 1] Euclidean norm of each row. The subgradient at a zero
// row is taken as zero.
inline Var row_l2norm(Var a) {
  Tape& t = a.tape();
  const Tensor& x = a.value();
  const std::size_t m = x.rows(), n = x.cols();
  Tensor z(Shape{m, 1});
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += x[i * n + j] * x[i * n + j];
    z[i] = std::sqrt(s);
  }
  const std::size_t ia = a.id();
  return t.record(std::move(z), {ia}, [ia, m, n](Tape& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    const auto& x = tp.value(ia);
    const auto& norm = tp.value(self);
    auto& gx = tp.grad(ia);
    for (std::size_t i = 0; i < m; ++i) {
      if (norm[i] == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[i] * x[i * n + j] / norm[i];
    }
  });
}

// out[b] = sum_i weights[b, i] * states[i][b]; weights is [B x L], each of
// the L states is [B x D].
inline Var weighted_sum(Var weights, const std::vector<Var>& states) {
  Tape& t = weights.tape();
  const Tensor& w = weights.value();
  const std::size_t bsz = w.rows(), len = w.cols();
  if (states.size() != len)
    throw DimensionError("weighted_sum: " + std::to_string(states.size()) + " states for weights " + shape_str(w.shape()));
  const std::size_t d = states.front().cols();
  for (const Var& s : states)
    if (s.rows() != bsz || s.cols() != d) throw DimensionError("weighted_sum state shape " + shape_str(s.value().shape()));
  Tensor z(Shape{bsz, d});
  for (std::size_t i = 0; i < len; ++i) {
    const Tensor& h = states[i].value();
    for (std::size_t b = 0; b < bsz; ++b) {
      const double wb = w[b * len + i];
      if (wb == 0.0) continue;
      for (std::size_t j = 0; j < d; ++j) z[b * d + j] += wb * h[b * d + j];
    }
  }
  std::vector<std::size_t> ids{weights.id()};
  for (const Var& s : states) ids.push_back(s.id());
  return t.record(std::move(z), ids, [ids, bsz, len, d](Tape& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    const auto& w = tp.value(ids[0]);
    const bool wgrad = tp.requires_grad(ids[0]);
    for (std::size_t i = 0; i < len; ++i) {
      const auto& h = tp.value(ids[i + 1]);
      if (wgrad) {
        auto& gw = tp.grad(ids[0]);
        for (std::size_t b = 0; b < bsz; ++b) {
          double acc = 0.0;
          for (std::size_t j = 0; j < d; ++j) acc += g[b * d + j] * h[b * d + j];
          gw[b * len + i] += acc;
        }
      }
      if (tp.requires_grad(ids[i + 1])) {
        auto& gh = tp.grad(ids[i + 1]);
        for (std::size_t b = 0; b < bsz; ++b) {
          const double wb = w[b * len + i];
          for (std::size_t j = 0; j < d; ++j) gh[b * d + j] += wb * g[b * d + j];
        }
      }
    }
  });
}

}  // namespace ad
}  // namespace fcvae
