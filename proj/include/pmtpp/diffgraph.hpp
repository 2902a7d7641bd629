#pragma once

// Reverse-mode automatic differentiation over small dense matrices.
//
// A Tape records every operation in creation order, which is already a
// topological order, so backward() is a single reverse sweep. Parameters live
// in a ParamStore outside any tape; a tape copies a parameter into a leaf node
// on first use and hands the accumulated leaf gradient back via
// collect_grads(). Tapes are single-threaded and cheap to build, so one tape is
// built per sequence.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <functional>
#include <initializer_list>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "pmtpp/errors.hpp"
#include "pmtpp/rng.hpp"

namespace pmtpp::ad {

class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Tensor(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) throw UsageError("Tensor: data length does not match shape");
  }

  static Tensor column(std::vector<double> v) {
    auto n = v.size();
    return Tensor(n, 1, std::move(v));
  }
  static Tensor row(std::vector<double> v) {
    auto n = v.size();
    return Tensor(1, n, std::move(v));
  }
  static Tensor scalar(double x) { return Tensor(1, 1, x); }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& vec() const { return data_; }

  bool same_shape(const Tensor& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }
  std::string shape_str() const {
    return "(" + std::to_string(rows_) + "x" + std::to_string(cols_) + ")";
  }
  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
  }

  void fill(double x) { std::fill(data_.begin(), data_.end(), x); }
  Tensor& operator+=(const Tensor& o) {
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

 private:
  std::size_t rows_ = 0, cols_ = 0;
  std::vector<double> data_;
};

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::uint32_t id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  Tape& tape() const { return *tape_; }
  std::uint32_t id() const { return id_; }
  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  /// Value of a 1x1 node.
  double item() const;

 private:
  Tape* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

// ---------------------------------------------------------------------------
// Parameters

enum class InitKind { kUniformFanIn, kZeros, kUniformUnit };

struct Parameter {
  std::string name;
  Tensor value;
  InitKind init = InitKind::kZeros;
};

/// Index of a parameter inside its ParamStore.
struct ParamRef {
  std::size_t index = static_cast<std::size_t>(-1);
  bool valid() const { return index != static_cast<std::size_t>(-1); }
};

class ParamStore {
 public:
  ParamRef add(const std::string& name, std::size_t rows, std::size_t cols, InitKind init) {
    if (by_name_.count(name)) throw UsageError("duplicate parameter name '" + name + "'");
    by_name_[name] = params_.size();
    params_.push_back({name, Tensor(rows, cols), init});
    return {params_.size() - 1};
  }

  /// Matrices uniform in +-1/sqrt(fan_in) (fan_in = cols), biases zero,
  /// lookup tables uniform in +-1.
  void initialize(Rng& rng) {
    for (auto& p : params_) {
      double bound = 0.0;
      switch (p.init) {
        case InitKind::kZeros: p.value.fill(0.0); continue;
        case InitKind::kUniformFanIn: bound = 1.0 / std::sqrt(double(p.value.cols())); break;
        case InitKind::kUniformUnit: bound = 1.0; break;
      }
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (auto& x : p.value.data()) x = dist(rng);
    }
  }

  std::size_t size() const { return params_.size(); }
  Parameter& operator[](ParamRef r) { return params_.at(r.index); }
  const Parameter& operator[](ParamRef r) const { return params_.at(r.index); }
  Parameter& at(std::size_t i) { return params_.at(i); }
  const Parameter& at(std::size_t i) const { return params_.at(i); }
  std::vector<Parameter>& all() { return params_; }
  const std::vector<Parameter>& all() const { return params_; }

  ParamRef find(const std::string& name) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) return {};
    return {it->second};
  }

  std::size_t num_scalars() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

 private:
  std::vector<Parameter> params_;
  std::map<std::string, std::size_t> by_name_;
};

/// Per-parameter gradient buffers aligned with a ParamStore.
using GradBuffer = std::vector<Tensor>;

inline GradBuffer zero_grads(const ParamStore& store) {
  GradBuffer g;
  g.reserve(store.size());
  for (const auto& p : store.all()) g.emplace_back(p.value.rows(), p.value.cols());
  return g;
}

// ---------------------------------------------------------------------------
// Tape

class Tape {
 public:
  using Backward = std::function<void(Tape&, std::uint32_t self)>;

  /// A no-grad tape skips recording backward closures.
  explicit Tape(bool requires_grad = true) : grad_enabled_(requires_grad) { nodes_.reserve(256); }

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  /// Leaf holding a copy of `value`; `requires_grad` marks it as a gradient target.
  Var input(Tensor value, bool requires_grad = false) {
    return push_leaf(std::move(value), requires_grad && grad_enabled_);
  }
  Var constant(Tensor value) { return push_leaf(std::move(value), false); }
  Var scalar(double x) { return constant(Tensor::scalar(x)); }

  /// Leaf for a stored parameter; repeated calls return the same node.
  Var param(const ParamStore& store, ParamRef ref) {
    auto it = param_nodes_.find(ref.index);
    if (it != param_nodes_.end()) return {this, it->second};
    Var v = push_leaf(store[ref].value, grad_enabled_);
    param_nodes_.emplace(ref.index, v.id());
    return v;
  }

  /// Records a derived node. Closures are dropped when no parent needs a gradient.
  Var push(Tensor value, std::initializer_list<Var> parents, Backward backward) {
    return push(std::move(value), std::span<const Var>(parents.begin(), parents.size()),
                std::move(backward));
  }

  Var push(Tensor value, std::span<const Var> parents, Backward backward) {
    bool rg = false;
    if (grad_enabled_)
      for (const Var& p : parents) rg = rg || nodes_[p.id()].requires_grad;
    Node n;
    n.value = std::move(value);
    n.requires_grad = rg;
    if (rg) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return {this, std::uint32_t(nodes_.size() - 1)};
  }

  const Tensor& value(std::uint32_t id) const { return nodes_[id].value; }
  bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient buffer of a node, allocated as zeros on first access.
  Tensor& grad_buffer(std::uint32_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty() && !n.value.empty()) n.grad = Tensor(n.value.rows(), n.value.cols());
    return n.grad;
  }

  /// Gradient of a node after backward(); zeros when the node did not participate.
  Tensor grad(Var v) const {
    const Node& n = nodes_[v.id()];
    if (n.grad.empty()) return Tensor(n.value.rows(), n.value.cols());
    return n.grad;
  }

  /// Propagates d(root)/d(node) to every node. Leaf gradients accumulate across
  /// calls until zero_grad(); interior gradients are recomputed per call.
  void backward(Var root) {
    if (&root.tape() != this) throw UsageError("backward: root belongs to another tape");
    const Tensor& rv = nodes_[root.id()].value;
    if (rv.rows() != 1 || rv.cols() != 1)
      throw UsageError("backward: root must be scalar, got " + rv.shape_str());
    for (auto& n : nodes_)
      if (!n.leaf) n.grad = Tensor();
    grad_buffer(root.id())[0] += 1.0;
    for (std::int64_t i = std::int64_t(root.id()); i >= 0; --i) {
      Node& n = nodes_[std::size_t(i)];
      if (n.leaf || !n.backward || n.grad.empty()) continue;
      ++backward_visits_;
      n.backward(*this, std::uint32_t(i));
    }
  }

  void zero_grad() {
    for (auto& n : nodes_) n.grad = Tensor();
  }

  /// Adds this tape's parameter-leaf gradients into `out` (aligned with the store).
  void collect_grads(GradBuffer& out) const {
    for (const auto& [index, node_id] : param_nodes_) {
      const Node& n = nodes_[node_id];
      if (!n.grad.empty()) out.at(index) += n.grad;
    }
  }

  /// Drops every node recorded after the first `n`; handles to them dangle.
  void truncate(std::size_t n) {
    if (n > nodes_.size()) throw UsageError("truncate: tape holds fewer nodes");
    nodes_.resize(n);
    std::erase_if(param_nodes_, [n](const auto& kv) { return kv.second >= n; });
  }

  /// Number of backward closures executed so far.
  std::size_t backward_visits() const { return backward_visits_; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    Backward backward;
    bool requires_grad = false;
    bool leaf = false;
  };

  Var push_leaf(Tensor value, bool requires_grad) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.leaf = true;
    nodes_.push_back(std::move(n));
    return {this, std::uint32_t(nodes_.size() - 1)};
  }

  friend class Var;
  std::vector<Node> nodes_;
  std::unordered_map<std::size_t, std::uint32_t> param_nodes_;
  bool grad_enabled_ = true;
  std::size_t backward_visits_ = 0;
};

/// Rewinds a tape to its current length on scope exit, for scratch
/// evaluations whose nodes are not needed afterwards.
class TapeRewind {
 public:
  explicit TapeRewind(Tape& tape) : tape_(tape), size_(tape.size()) {}
  TapeRewind(const TapeRewind&) = delete;
  TapeRewind& operator=(const TapeRewind&) = delete;
  ~TapeRewind() { tape_.truncate(size_); }

 private:
  Tape& tape_;
  std::size_t size_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline double Var::item() const {
  const Tensor& v = value();
  if (v.size() != 1) throw UsageError("item() on non-scalar node " + v.shape_str());
  return v[0];
}

// ---------------------------------------------------------------------------
// Primitives

namespace detail {

inline void require_same_tape(const char* op, Var a, Var b) {
  if (&a.tape() != &b.tape()) throw UsageError(std::string(op) + ": operands on different tapes");
}

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b))
    throw UsageError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

/// Elementwise unary op whose derivative is expressed through input x and output y.
template <class F, class D>
Var unary(Var a, F f, D dfdx) {
  const Tensor& x = a.value();
  Tensor y(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  const auto aid = a.id();
  return a.tape().push(std::move(y), {a}, [aid, dfdx](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad_buffer(self);
    const Tensor& xv = t.value(aid);
    const Tensor& yv = t.value(self);
    Tensor& ga = t.grad_buffer(aid);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * dfdx(xv[i], yv[i]);
  });
}

inline double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

/// C = A B.
inline Var matmul(Var a, Var b) {
  detail::require_same_tape("matmul", a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.cols() != B.rows())
    throw UsageError("matmul: shape mismatch " + A.shape_str() + " vs " + B.shape_str());
  const std::size_t n = A.rows(), k = A.cols(), m = B.cols();
  Tensor C(n, m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A(i, p);
      if (aip == 0.0) continue;
      const double* brow = &B.data()[p * m];
      double* crow = &C.data()[i * m];
      for (std::size_t j = 0; j < m; ++j) crow[j] += aip * brow[j];
    }
  const auto aid = a.id(), bid = b.id();
  return a.tape().push(std::move(C), {a, b}, [aid, bid, n, k, m](Tape& t, std::uint32_t self) {
    const Tensor& G = t.grad_buffer(self);
    if (t.requires_grad(aid)) {
      const Tensor& Bv = t.value(bid);
      Tensor& GA = t.grad_buffer(aid);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          const double* grow = &G.data()[i * m];
          const double* brow = &Bv.data()[p * m];
          for (std::size_t j = 0; j < m; ++j) s += grow[j] * brow[j];
          GA(i, p) += s;
        }
    }
    if (t.requires_grad(bid)) {
      const Tensor& Av = t.value(aid);
      Tensor& GB = t.grad_buffer(bid);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = Av(i, p);
          if (aip == 0.0) continue;
          const double* grow = &G.data()[i * m];
          double* gbrow = &GB.data()[p * m];
          for (std::size_t j = 0; j < m; ++j) gbrow[j] += aip * grow[j];
        }
    }
  });
}

inline Var add(Var a, Var b) {
  detail::require_same_tape("add", a, b);
  detail::require_same_shape("add", a.value(), b.value());
  Tensor y = a.value();
  y += b.value();
  const auto aid = a.id(), bid = b.id();
  return a.tape().push(std::move(y), {a, b}, [aid, bid](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad_buffer(self);
    if (t.requires_grad(aid)) t.grad_buffer(aid) += g;
    if (t.requires_grad(bid)) t.grad_buffer(bid) += g;
  });
}

inline Var sub(Var a, Var b) {
  detail::require_same_tape("sub", a, b);
  detail::require_same_shape("sub", a.value(), b.value());
  Tensor y = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= bv[i];
  const auto aid = a.id(), bid = b.id();
  return a.tape().push(std::move(y), {a, b}, [aid, bid](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad_buffer(self);
    if (t.requires_grad(aid)) t.grad_buffer(aid) += g;
    if (t.requires_grad(bid)) {
      Tensor& gb = t.grad_buffer(bid);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

/// Elementwise product.
inline Var mul(Var a, Var b) {
  detail::require_same_tape("mul", a, b);
  detail::require_same_shape("mul", a.value(), b.value());
  Tensor y = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= bv[i];
  const auto aid = a.id(), bid = b.id();
  return a.tape().push(std::move(y), {a, b}, [aid, bid](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad_buffer(self);
    if (t.requires_grad(aid)) {
      const Tensor& bv2 = t.value(bid);
      Tensor& ga = t.grad_buffer(aid);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
    }
    if (t.requires_grad(bid)) {
      const Tensor& av = t.value(aid);
      Tensor& gb = t.grad_buffer(bid);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

inline Var scale(Var a, double s) {
  return detail::unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

inline Var add_scalar(Var a, double s) {
  return detail::unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

inline Var neg(Var a) { return scale(a, -1.0); }

inline Var tanh(Var a) {
  return detail::unary(a, [](double x) { return std::tanh(x); },
                       [](double, double y) { return 1.0 - y * y; });
}

inline Var sigmoid(Var a) {
  return detail::unary(a, [](double x) { return detail::sigmoid(x); },
                       [](double, double y) { return y * (1.0 - y); });
}

inline Var exp(Var a) {
  return detail::unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(Var a) {
  return detail::unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Var softplus(Var a) {
  return detail::unary(a, [](double x) { return detail::softplus(x); },
                       [](double x, double) { return detail::sigmoid(x); });
}

inline Var square(Var a) {
  return detail::unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

/// min(x, cap) elementwise; the gradient is zero where the cap binds.
inline Var clamp_max(Var a, double cap, std::atomic<std::uint64_t>* clamp_counter = nullptr) {
  if (clamp_counter) {
    std::uint64_t hits = 0;
    for (double x : a.value().data()) hits += x > cap;
    if (hits) clamp_counter->fetch_add(hits, std::memory_order_relaxed);
  }
  return detail::unary(a, [cap](double x) { return std::min(x, cap); },
                       [cap](double x, double) { return x > cap ? 0.0 : 1.0; });
}

/// Sum of all entries, as a 1x1 node.
inline Var sum(Var a) {
  double s = 0.0;
  for (double x : a.value().data()) s += x;
  const auto aid = a.id();
  return a.tape().push(Tensor::scalar(s), {a}, [aid](Tape& t, std::uint32_t self) {
    const double g = t.grad_buffer(self)[0];
    Tensor& ga = t.grad_buffer(aid);
    for (auto& x : ga.data()) x += g;
  });
}

/// log(sum(exp(entries))) over all entries, stabilized by the maximum.
inline Var logsumexp(Var a) {
  const Tensor& x = a.value();
  if (x.empty()) throw UsageError("logsumexp: empty input");
  double mx = *std::max_element(x.data().begin(), x.data().end());
  double s = 0.0;
  if (std::isfinite(mx))
    for (double v : x.data()) s += std::exp(v - mx);
  double out = std::isfinite(mx) ? mx + std::log(s) : mx;
  const auto aid = a.id();
  return a.tape().push(Tensor::scalar(out), {a}, [aid](Tape& t, std::uint32_t self) {
    const double g = t.grad_buffer(self)[0];
    const double y = t.value(self)[0];
    const Tensor& xv = t.value(aid);
    Tensor& ga = t.grad_buffer(aid);
    for (std::size_t i = 0; i < xv.size(); ++i) ga[i] += g * std::exp(xv[i] - y);
  });
}

/// Vertical stack; all parts must share the column count.
inline Var concat(std::span<const Var> parts) {
  if (parts.empty()) throw UsageError("concat: no inputs");
  const std::size_t cols = parts[0].cols();
  std::size_t rows = 0;
  for (const Var& p : parts) {
    detail::require_same_tape("concat", parts[0], p);
    if (p.cols() != cols)
      throw UsageError("concat: shape mismatch " + parts[0].value().shape_str() + " vs " +
                       p.value().shape_str());
    rows += p.rows();
  }
  Tensor y(rows, cols);
  std::vector<std::uint32_t> ids;
  std::size_t off = 0;
  for (const Var& p : parts) {
    std::copy(p.value().data().begin(), p.value().data().end(), y.data().begin() + std::ptrdiff_t(off));
    off += p.value().size();
    ids.push_back(p.id());
  }
  return parts[0].tape().push(std::move(y), parts, [ids](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad_buffer(self);
    std::size_t o = 0;
    for (auto id : ids) {
      const std::size_t n = t.value(id).size();
      if (t.requires_grad(id)) {
        Tensor& gp = t.grad_buffer(id);
        for (std::size_t i = 0; i < n; ++i) gp[i] += g[o + i];
      }
      o += n;
    }
  });
}

inline Var concat(std::initializer_list<Var> parts) {
  return concat(std::span<const Var>(parts.begin(), parts.size()));
}

/// Rows [begin, begin + count).
inline Var slice_rows(Var a, std::size_t begin, std::size_t count) {
  const Tensor& x = a.value();
  if (begin + count > x.rows())
    throw UsageError("slice_rows: range [" + std::to_string(begin) + "," + std::to_string(begin + count) +
                     ") outside " + x.shape_str());
  const std::size_t cols = x.cols();
  Tensor y(count, cols);
  std::copy(x.data().begin() + std::ptrdiff_t(begin * cols),
            x.data().begin() + std::ptrdiff_t((begin + count) * cols), y.data().begin());
  const auto aid = a.id();
  return a.tape().push(std::move(y), {a}, [aid, begin, cols](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad_buffer(self);
    Tensor& ga = t.grad_buffer(aid);
    for (std::size_t i = 0; i < g.size(); ++i) ga[begin * cols + i] += g[i];
  });
}

/// Row r of a matrix, returned as a column vector (embedding lookup).
inline Var row_as_column(Var table, std::size_t r) {
  const Tensor& x = table.value();
  if (r >= x.rows())
    throw UsageError("row_as_column: row " + std::to_string(r) + " outside " + x.shape_str());
  const std::size_t cols = x.cols();
  Tensor y(cols, 1);
  for (std::size_t j = 0; j < cols; ++j) y[j] = x(r, j);
  const auto tid = table.id();
  return table.tape().push(std::move(y), {table}, [tid, r, cols](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad_buffer(self);
    Tensor& gt = t.grad_buffer(tid);
    for (std::size_t j = 0; j < cols; ++j) gt(r, j) += g[j];
  });
}

/// Rows idx[0], idx[1], ... of a table laid out as columns: (d x n).
inline Var gather_rows_as_cols(Var table, std::span<const std::size_t> idx) {
  const Tensor& x = table.value();
  const std::size_t d = x.cols(), n = idx.size();
  Tensor y(d, n);
  for (std::size_t j = 0; j < n; ++j) {
    if (idx[j] >= x.rows())
      throw UsageError("gather_rows_as_cols: row " + std::to_string(idx[j]) + " outside " + x.shape_str());
    for (std::size_t i = 0; i < d; ++i) y(i, j) = x(idx[j], i);
  }
  const auto tid = table.id();
  std::vector<std::size_t> rows(idx.begin(), idx.end());
  return table.tape().push(std::move(y), {table}, [tid, rows = std::move(rows), d](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad_buffer(self);
    Tensor& gt = t.grad_buffer(tid);
    const std::size_t n = rows.size();
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t i = 0; i < d; ++i) gt(rows[j], i) += g(i, j);
  });
}

/// Column c as an (n x 1) node.
inline Var column_at(Var a, std::size_t c) {
  const Tensor& x = a.value();
  if (c >= x.cols()) throw UsageError("column_at: column " + std::to_string(c) + " outside " + x.shape_str());
  Tensor y(x.rows(), 1);
  for (std::size_t i = 0; i < x.rows(); ++i) y[i] = x(i, c);
  const auto aid = a.id();
  return a.tape().push(std::move(y), {a}, [aid, c](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad_buffer(self);
    Tensor& ga = t.grad_buffer(aid);
    for (std::size_t i = 0; i < g.size(); ++i) ga(i, c) += g[i];
  });
}

/// Single entry as a 1x1 node.
inline Var pick(Var a, std::size_t r, std::size_t c = 0) {
  const Tensor& x = a.value();
  if (r >= x.rows() || c >= x.cols())
    throw UsageError("pick: index outside " + x.shape_str());
  const std::size_t idx = r * x.cols() + c;
  const auto aid = a.id();
  return a.tape().push(Tensor::scalar(x[idx]), {a}, [aid, idx](Tape& t, std::uint32_t self) {
    t.grad_buffer(aid)[idx] += t.grad_buffer(self)[0];
  });
}

/// Column sums: (n x m) -> (1 x m).
inline Var sum_rows(Var a) {
  const Tensor& x = a.value();
  Tensor y(1, x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) y[j] += x(i, j);
  const auto aid = a.id();
  return a.tape().push(std::move(y), {a}, [aid](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad_buffer(self);
    Tensor& ga = t.grad_buffer(aid);
    for (std::size_t i = 0; i < ga.rows(); ++i)
      for (std::size_t j = 0; j < ga.cols(); ++j) ga(i, j) += g[j];
  });
}

/// Repeats a column vector m times: (n x 1) -> (n x m).
inline Var repeat_cols(Var a, std::size_t m) {
  const Tensor& x = a.value();
  if (x.cols() != 1) throw UsageError("repeat_cols: expected column vector, got " + x.shape_str());
  Tensor y(x.rows(), m);
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < m; ++j) y(i, j) = x[i];
  const auto aid = a.id();
  return a.tape().push(std::move(y), {a}, [aid, m](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad_buffer(self);
    Tensor& ga = t.grad_buffer(aid);
    for (std::size_t i = 0; i < ga.rows(); ++i)
      for (std::size_t j = 0; j < m; ++j) ga[i] += g(i, j);
  });
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator-(Var a) { return neg(a); }
inline Var operator*(double s, Var a) { return scale(a, s); }

// ---------------------------------------------------------------------------
// Checkpoints: {"schema":1,"params":{name:{"shape":[r,c],"values":[...]}}}

inline constexpr int kCheckpointSchema = 1;

inline nlohmann::json params_to_json(const ParamStore& store) {
  nlohmann::json params = nlohmann::json::object();
  for (const auto& p : store.all())
    params[p.name] = {{"shape", {p.value.rows(), p.value.cols()}}, {"values", p.value.vec()}};
  return {{"schema", kCheckpointSchema}, {"params", std::move(params)}};
}

/// Restores every parameter in `store` by name; shapes must match.
inline void params_from_json(ParamStore& store, const nlohmann::json& j) {
  if (j.at("schema").get<int>() != kCheckpointSchema)
    throw DataError("checkpoint schema " + std::to_string(j.at("schema").get<int>()) + " not supported");
  const auto& params = j.at("params");
  for (auto& p : store.all()) {
    if (!params.contains(p.name)) throw DataError("checkpoint lacks parameter '" + p.name + "'");
    const auto& e = params.at(p.name);
    auto shape = e.at("shape").get<std::vector<std::size_t>>();
    if (shape.size() != 2 || shape[0] != p.value.rows() || shape[1] != p.value.cols())
      throw DataError("checkpoint shape mismatch for '" + p.name + "'");
    p.value = Tensor(shape[0], shape[1], e.at("values").get<std::vector<double>>());
  }
}

}  // namespace pmtpp::ad
