#pragma once

// Reverse-mode automatic differentiation over dense row-major float64 arrays.
//
// Persistent quantities (model weights, inputs that need gradients) live in
// Tensor. A Tape records one forward pass: Tape::leaf() and Tape::constant()
// bring tensors in without copying, every op appends one node, and
// Tape::backward() walks the nodes once in reverse, accumulating d(loss)/d(x)
// into Tensor::grad of every requires_grad leaf. A tape is single-use and must
// outlive every Var it hands out.

#include <Eigen/Core>
#include <Eigen/SparseCore>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "cpgc/errors.hpp"

namespace cpgc {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "," : "") << shape[i];
  out << ']';
  return out.str();
}

/// Dense array with an optional gradient buffer of the same length.
struct Tensor {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until a backward pass writes into it
  bool requires_grad = false;

  Tensor() = default;
  Tensor(Shape s, std::vector<double> v, bool needs_grad = false)
      : shape(std::move(s)), values(std::move(v)), requires_grad(needs_grad) {
    for (auto d : shape) {
      if (d == 0) throw ShapeError("tensor dimensions must be positive: " + to_string(shape));
    }
    if (numel(shape) != values.size()) {
      throw ShapeError("shape " + to_string(shape) + " does not match " +
                       std::to_string(values.size()) + " values");
    }
  }

  static Tensor zeros(Shape s, bool needs_grad = false) {
    const auto n = numel(s);
    return Tensor(std::move(s), std::vector<double>(n, 0.0), needs_grad);
  }

  static Tensor filled(Shape s, double value, bool needs_grad = false) {
    const auto n = numel(s);
    return Tensor(std::move(s), std::vector<double>(n, value), needs_grad);
  }

  std::size_t size() const { return values.size(); }
  double operator[](std::size_t i) const { return values[i]; }
  double& operator[](std::size_t i) { return values[i]; }

  std::vector<double>& ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
    return grad;
  }
  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
};

class Tape;

/// Handle to one node of a Tape.
class Var {
 public:
  Var() = default;

  const Shape& shape() const;
  std::span<const double> values() const;
  std::size_t size() const { return values().size(); }
  double item() const;
  bool requires_grad() const;
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  /// Propagates the node's gradient (already accumulated) to its inputs.
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Reference to a persistent tensor. Gradients flow into t.grad when
  /// t.requires_grad is set. The tensor must outlive the tape.
  Var leaf(Tensor& t) {
    Node n;
    n.shape = t.shape;
    n.view = &t;
    n.requires_grad = t.requires_grad;
    if (t.requires_grad) n.sink = &t;
    return push(std::move(n));
  }

  /// Read-only view of a tensor that never receives gradients.
  Var constant(const Tensor& t) {
    Node n;
    n.shape = t.shape;
    n.view = &t;
    return push(std::move(n));
  }

  /// Temporaries are copied into the tape instead of viewed.
  Var constant(Tensor&& t) { return constant(std::move(t.shape), std::move(t.values)); }

  Var constant(Shape shape, std::vector<double> values) {
    if (numel(shape) != values.size()) {
      throw ShapeError("constant shape " + to_string(shape) + " does not match its values");
    }
    Node n;
    n.shape = std::move(shape);
    n.owned = std::move(values);
    return push(std::move(n));
  }

  Var scalar(double v) { return constant({1}, {v}); }

  /// Appends an op result. The node requires grad iff any input does.
  Var record(Shape shape, std::vector<double> values, std::initializer_list<Var> inputs,
             BackwardFn fn) {
    return record(std::move(shape), std::move(values), std::span<const Var>(inputs.begin(), inputs.size()),
                  std::move(fn));
  }

  Var record(Shape shape, std::vector<double> values, std::span<const Var> inputs, BackwardFn fn) {
    Node n;
    n.shape = std::move(shape);
    n.owned = std::move(values);
    for (const Var& in : inputs) {
      check_owned(in);
      if (nodes_[in.id()].requires_grad) n.requires_grad = true;
    }
    if (n.requires_grad) n.backward = std::move(fn);
    return push(std::move(n));
  }

  /// Reverse sweep from a scalar loss. Every node is visited at most once.
  void backward(Var loss) {
    check_owned(loss);
    if (numel(nodes_[loss.id()].shape) != 1) {
      throw ContractError("backward needs a scalar loss, got shape " +
                          to_string(nodes_[loss.id()].shape));
    }
    for (auto& n : nodes_) n.grad.clear();
    if (!nodes_[loss.id()].requires_grad) return;
    grad(loss.id())[0] = 1.0;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.backward) n.backward(*this, i);
      if (n.sink != nullptr) {
        auto& g = n.sink->ensure_grad();
        for (std::size_t k = 0; k < g.size(); ++k) g[k] += n.grad[k];
      }
    }
  }

  std::size_t size() const { return nodes_.size(); }

  const Shape& shape(std::size_t id) const { return nodes_[id].shape; }
  std::span<const double> value(std::size_t id) const { return nodes_[id].value(); }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Gradient buffer of a node, allocated as zeros on first access.
  std::span<double> grad(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(numel(n.shape), 0.0);
    return n.grad;
  }

  /// Gradient of a node after backward(); empty when none reached it.
  std::span<const double> grad_of(Var v) const { return nodes_[v.id()].grad; }

  void check_owned(Var v) const {
    if (v.tape() != this || v.id() >= nodes_.size()) {
      throw ContractError("variable does not belong to this tape");
    }
  }

 private:
  struct Node {
    Shape shape;
    std::vector<double> owned;
    const Tensor* view = nullptr;
    Tensor* sink = nullptr;
    std::vector<double> grad;
    bool requires_grad = false;
    BackwardFn backward;

    std::span<const double> value() const {
      return view != nullptr ? std::span<const double>(view->values) : std::span<const double>(owned);
    }
  };

  Var push(Node n) {
    for (auto d : n.shape) {
      if (d == 0) throw ShapeError("zero-sized dimension in " + to_string(n.shape));
    }
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
};

inline const Shape& Var::shape() const { return tape_->shape(id_); }
inline std::span<const double> Var::values() const { return tape_->value(id_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }
inline double Var::item() const {
  if (size() != 1) throw ContractError("item() on non-scalar of shape " + to_string(shape()));
  return values()[0];
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

namespace detail {

inline Tape& same_tape(Var a, Var b) {
  if (a.tape() == nullptr || a.tape() != b.tape()) throw ContractError("variables from different tapes");
  return *a.tape();
}

/// Flat-index maps from the broadcast result back into each operand.
struct Broadcast {
  Shape out;
  std::vector<std::size_t> a_index;  // both empty: identity, or periodic if a period is set
  std::vector<std::size_t> b_index;
  // Nonzero when one operand matches the output and the other repeats as a
  // trailing block: index = i % period.
  std::size_t a_period = 0, b_period = 0;

  std::size_t a_at(std::size_t i) const {
    return a_period ? i % a_period : a_index.empty() ? i : a_index[i];
  }
  std::size_t b_at(std::size_t i) const {
    return b_period ? i % b_period : b_index.empty() ? i : b_index[i];
  }
};

/// True when `small` left-padded with ones is a trailing block of `big`.
inline bool is_trailing_block(const Shape& big, const Shape& small) {
  std::size_t k = 0;
  while (k < small.size() && small[k] == 1) ++k;
  const std::size_t tail = small.size() - k;
  if (tail > big.size()) return false;
  return std::equal(small.begin() + static_cast<std::ptrdiff_t>(k), small.end(),
                    big.end() - static_cast<std::ptrdiff_t>(tail));
}

inline Broadcast broadcast(const Shape& a, const Shape& b) {
  Broadcast r;
  if (a == b) {
    r.out = a;
    return r;
  }
  if (a.size() >= b.size() && is_trailing_block(a, b)) {
    r.out = a;
    r.b_period = numel(b);
    return r;
  }
  if (b.size() >= a.size() && is_trailing_block(b, a)) {
    r.out = b;
    r.a_period = numel(a);
    return r;
  }
  const std::size_t rank = std::max(a.size(), b.size());
  Shape pa(rank, 1), pb(rank, 1);
  std::copy(a.begin(), a.end(), pa.begin() + static_cast<std::ptrdiff_t>(rank - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + static_cast<std::ptrdiff_t>(rank - b.size()));
  r.out.resize(rank);
  for (std::size_t d = 0; d < rank; ++d) {
    if (pa[d] != pb[d] && pa[d] != 1 && pb[d] != 1) {
      throw ShapeError("cannot broadcast " + to_string(a) + " with " + to_string(b));
    }
    r.out[d] = std::max(pa[d], pb[d]);
  }
  auto strides = [&](const Shape& p) {
    std::vector<std::size_t> s(rank, 0);
    std::size_t acc = 1;
    for (std::size_t d = rank; d-- > 0;) {
      s[d] = p[d] == 1 ? 0 : acc;
      acc *= p[d];
    }
    return s;
  };
  const auto sa = strides(pa), sb = strides(pb);
  const std::size_t n = numel(r.out);
  r.a_index.resize(n);
  r.b_index.resize(n);
  std::vector<std::size_t> idx(rank, 0);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t ia = 0, ib = 0;
    for (std::size_t d = 0; d < rank; ++d) {
      ia += idx[d] * sa[d];
      ib += idx[d] * sb[d];
    }
    r.a_index[i] = ia;
    r.b_index[i] = ib;
    for (std::size_t d = rank; d-- > 0;) {
      if (++idx[d] < r.out[d]) break;
      idx[d] = 0;
    }
  }
  return r;
}

/// Elementwise binary op. `da`/`db` give d(out)/d(a) and d(out)/d(b) at (x, y).
template <class F, class DA, class DB>
Var binary(Var a, Var b, F f, DA da, DB db) {
  Tape& tape = same_tape(a, b);
  auto bc = std::make_shared<Broadcast>(broadcast(a.shape(), b.shape()));
  const auto av = a.values();
  const auto bv = b.values();
  const std::size_t n = numel(bc->out);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = f(av[bc->a_at(i)], bv[bc->b_at(i)]);
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(bc->out, std::move(out), {a, b}, [ia, ib, bc, da, db](Tape& t, std::size_t self) {
    const auto g = t.grad(self);
    const auto av = t.value(ia);
    const auto bv = t.value(ib);
    const bool need_a = t.requires_grad(ia), need_b = t.requires_grad(ib);
    std::span<double> ga, gb;
    if (need_a) ga = t.grad(ia);
    if (need_b) gb = t.grad(ib);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const std::size_t ja = bc->a_at(i);
      const std::size_t jb = bc->b_at(i);
      const double x = av[ja], y = bv[jb];
      if (need_a) ga[ja] += g[i] * da(x, y);
      if (need_b) gb[jb] += g[i] * db(x, y);
    }
  });
}

/// Elementwise unary op; `d(x, y)` is the derivative at input x with output y.
template <class F, class D>
Var unary(Var a, F f, D d) {
  Tape& tape = *a.tape();
  const auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  const std::size_t ia = a.id();
  const std::size_t io = tape.size();
  return tape.record(a.shape(), std::move(out), {a}, [ia, io, d](Tape& t, std::size_t self) {
    const auto g = t.grad(self);
    const auto x = t.value(ia);
    const auto y = t.value(io);
    auto ga = t.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * d(x[i], y[i]);
  });
}

/// Splits a shape around `axis` into (outer, len, inner) loop extents.
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + to_string(shape));
  }
  AxisSplit s;
  for (std::size_t d = 0; d < axis; ++d) s.outer *= shape[d];
  s.len = shape[axis];
  for (std::size_t d = axis + 1; d < shape.size(); ++d) s.inner *= shape[d];
  return s;
}

inline Shape keep_dim(Shape shape, std::size_t axis) {
  shape[axis] = 1;
  return shape;
}

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

}  // namespace detail

// Arithmetic ----------------------------------------------------------------

inline Var add(Var a, Var b) {
  return detail::binary(
      a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Var sub(Var a, Var b) {
  return detail::binary(
      a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Var mul(Var a, Var b) {
  return detail::binary(
      a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Var div(Var a, Var b) {
  for (double y : b.values()) {
    if (y == 0.0) throw DomainError("division by zero");
  }
  return detail::binary(
      a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

inline Var neg(Var a) {
  return detail::unary(a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

inline Var scale(Var a, double c) {
  return detail::unary(a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

inline Var add_scalar(Var a, double c) {
  return detail::unary(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

inline Var exp(Var a) {
  return detail::unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(Var a) {
  for (double x : a.values()) {
    if (!(x > 0.0)) throw DomainError("log of non-positive value");
  }
  return detail::unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Var tanh(Var a) {
  return detail::unary(a, [](double x) { return std::tanh(x); },
                       [](double, double y) { return 1.0 - y * y; });
}

inline Var square(Var a) {
  return detail::unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

/// Clamps values to [lo, hi] in the forward pass and passes gradients through
/// unchanged (straight-through), so boundary pixels still steer training.
inline Var clamp_passthrough(Var a, double lo, double hi) {
  return detail::unary(a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
                       [](double, double) { return 1.0; });
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }
inline Var operator-(Var a) { return neg(a); }
inline Var operator*(Var a, double c) { return scale(a, c); }
inline Var operator*(double c, Var a) { return scale(a, c); }
inline Var operator+(Var a, double c) { return add_scalar(a, c); }

// Linear algebra --------------------------------------------------------------

inline Var matmul(Var a, Var b) {
  Tape& tape = detail::same_tape(a, b);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) {
    throw ShapeError("matmul " + to_string(sa) + " x " + to_string(sb));
  }
  const auto m = static_cast<Eigen::Index>(sa[0]);
  const auto k = static_cast<Eigen::Index>(sa[1]);
  const auto n = static_cast<Eigen::Index>(sb[1]);
  std::vector<double> out(static_cast<std::size_t>(m * n));
  detail::MutMap(out.data(), m, n).noalias() =
      detail::ConstMap(a.values().data(), m, k) * detail::ConstMap(b.values().data(), k, n);
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record({sa[0], sb[1]}, std::move(out), {a, b}, [ia, ib, m, k, n](Tape& t, std::size_t self) {
    const detail::ConstMap g(t.grad(self).data(), m, n);
    if (t.requires_grad(ia)) {
      detail::MutMap(t.grad(ia).data(), m, k).noalias() +=
          g * detail::ConstMap(t.value(ib).data(), k, n).transpose();
    }
    if (t.requires_grad(ib)) {
      detail::MutMap(t.grad(ib).data(), k, n).noalias() +=
          detail::ConstMap(t.value(ia).data(), m, k).transpose() * g;
    }
  });
}

/// x W + b with b broadcast over rows; x [m,k], W [k,n], b [1,n].
inline Var linear(Var x, Var w, Var b) {
  Tape& tape = detail::same_tape(x, w);
  detail::same_tape(x, b);
  const Shape& sx = x.shape();
  const Shape& sw = w.shape();
  if (sx.size() != 2 || sw.size() != 2 || sx[1] != sw[0] || b.shape() != Shape{1, sw[1]}) {
    throw ShapeError("linear " + to_string(sx) + " x " + to_string(sw) + " + " + to_string(b.shape()));
  }
  const auto m = static_cast<Eigen::Index>(sx[0]);
  const auto k = static_cast<Eigen::Index>(sx[1]);
  const auto n = static_cast<Eigen::Index>(sw[1]);
  std::vector<double> out(static_cast<std::size_t>(m * n));
  detail::MutMap o(out.data(), m, n);
  o.noalias() = detail::ConstMap(x.values().data(), m, k) * detail::ConstMap(w.values().data(), k, n);
  o.rowwise() += detail::ConstMap(b.values().data(), 1, n).row(0);
  const std::size_t ix = x.id(), iw = w.id(), ib = b.id();
  return tape.record({sx[0], sw[1]}, std::move(out), {x, w, b}, [ix, iw, ib, m, k, n](Tape& t, std::size_t self) {
    const detail::ConstMap g(t.grad(self).data(), m, n);
    if (t.requires_grad(ix)) {
      detail::MutMap(t.grad(ix).data(), m, k).noalias() += g * detail::ConstMap(t.value(iw).data(), k, n).transpose();
    }
    if (t.requires_grad(iw)) {
      detail::MutMap(t.grad(iw).data(), k, n).noalias() += detail::ConstMap(t.value(ix).data(), m, k).transpose() * g;
    }
    if (t.requires_grad(ib)) detail::MutMap(t.grad(ib).data(), 1, n) += g.colwise().sum();
  });
}

inline Var transpose(Var a) {
  const Shape& s = a.shape();
  if (s.size() != 2) throw ShapeError("transpose needs a matrix, got " + to_string(s));
  const auto r = static_cast<Eigen::Index>(s[0]), c = static_cast<Eigen::Index>(s[1]);
  std::vector<double> out(s[0] * s[1]);
  detail::MutMap(out.data(), c, r) = detail::ConstMap(a.values().data(), r, c).transpose();
  const std::size_t ia = a.id();
  return a.tape()->record({s[1], s[0]}, std::move(out), {a}, [ia, r, c](Tape& t, std::size_t self) {
    detail::MutMap(t.grad(ia).data(), r, c) += detail::ConstMap(t.grad(self).data(), c, r).transpose();
  });
}

/// Row-major CSR operator applied to the leading axis of a matrix.
using SparseOperator = Eigen::SparseMatrix<double, Eigen::RowMajor>;

/// out = op * x, where x is [n, c] and op is [m, n]. The operator is shared, not copied.
inline Var sparse_apply(std::shared_ptr<const SparseOperator> op, Var x) {
  const Shape& s = x.shape();
  if (s.size() != 2 || static_cast<std::size_t>(op->cols()) != s[0]) {
    throw ShapeError("sparse operator with " + std::to_string(op->cols()) + " columns applied to " +
                     to_string(s));
  }
  const auto n = static_cast<Eigen::Index>(s[0]), c = static_cast<Eigen::Index>(s[1]);
  const auto m = op->rows();
  std::vector<double> out(static_cast<std::size_t>(m * c));
  detail::MutMap(out.data(), m, c).noalias() = (*op) * detail::ConstMap(x.values().data(), n, c);
  const std::size_t ix = x.id();
  return x.tape()->record({static_cast<std::size_t>(m), s[1]}, std::move(out), {x},
                          [ix, op, n, m, c](Tape& t, std::size_t self) {
                            detail::MutMap(t.grad(ix).data(), n, c).noalias() +=
                                op->transpose() * detail::ConstMap(t.grad(self).data(), m, c);
                          });
}

// Structural ------------------------------------------------------------------

inline Var reshape(Var a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw ShapeError("reshape " + to_string(a.shape()) + " to " + to_string(shape));
  }
  std::vector<double> out(a.values().begin(), a.values().end());
  const std::size_t ia = a.id();
  return a.tape()->record(std::move(shape), std::move(out), {a}, [ia](Tape& t, std::size_t self) {
    const auto g = t.grad(self);
    auto ga = t.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

/// out.flat[i] = a.flat[indices[i]]; gradients scatter-add back.
inline Var take(Var a, std::vector<std::size_t> indices, Shape shape) {
  if (numel(shape) != indices.size()) throw ShapeError("take: index count does not match " + to_string(shape));
  const auto av = a.values();
  std::vector<double> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= av.size()) throw ShapeError("take: index out of range");
    out[i] = av[indices[i]];
  }
  const std::size_t ia = a.id();
  auto idx = std::make_shared<const std::vector<std::size_t>>(std::move(indices));
  return a.tape()->record(std::move(shape), std::move(out), {a}, [ia, idx](Tape& t, std::size_t self) {
    const auto g = t.grad(self);
    auto ga = t.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[(*idx)[i]] += g[i];
  });
}

/// Selects whole rows of a matrix (embedding lookup).
inline Var gather_rows(Var table, std::span<const std::size_t> rows) {
  const Shape& s = table.shape();
  if (s.size() != 2) throw ShapeError("gather_rows needs a matrix, got " + to_string(s));
  std::vector<std::size_t> idx;
  idx.reserve(rows.size() * s[1]);
  for (std::size_t r : rows) {
    if (r >= s[0]) throw ShapeError("gather_rows: row " + std::to_string(r) + " out of range");
    for (std::size_t c = 0; c < s[1]; ++c) idx.push_back(r * s[1] + c);
  }
  return take(table, std::move(idx), {rows.size(), s[1]});
}

/// Stacks tensors along axis 0; trailing dimensions must agree.
inline Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows of nothing");
  Tape& tape = *parts.front().tape();
  const Shape& first = parts.front().shape();
  Shape out_shape = first;
  out_shape[0] = 0;
  std::vector<double> out;
  std::vector<std::pair<std::size_t, std::size_t>> spans;  // (id, offset)
  for (const Var& p : parts) {
    tape.check_owned(p);
    const Shape& s = p.shape();
    if (s.size() != first.size() || !std::equal(s.begin() + 1, s.end(), first.begin() + 1)) {
      throw ShapeError("concat_rows " + to_string(first) + " with " + to_string(s));
    }
    spans.emplace_back(p.id(), out.size());
    out.insert(out.end(), p.values().begin(), p.values().end());
    out_shape[0] += s[0];
  }
  return tape.record(std::move(out_shape), std::move(out), parts, [spans](Tape& t, std::size_t self) {
    const auto g = t.grad(self);
    for (auto [id, offset] : spans) {
      if (!t.requires_grad(id)) continue;
      auto gi = t.grad(id);
      for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += g[offset + i];
    }
  });
}

inline Var concat_rows(std::initializer_list<Var> parts) {
  return concat_rows(std::span<const Var>(parts.begin(), parts.size()));
}

inline Var slice_rows(Var a, std::size_t begin, std::size_t end) {
  const Shape& s = a.shape();
  if (s.empty() || begin >= end || end > s[0]) throw ShapeError("slice_rows out of range for " + to_string(s));
  const std::size_t row = numel(s) / s[0];
  std::vector<std::size_t> idx(row * (end - begin));
  std::iota(idx.begin(), idx.end(), begin * row);
  Shape out = s;
  out[0] = end - begin;
  return take(a, std::move(idx), std::move(out));
}

// Reductions --------------------------------------------------------------------

inline Var sum(Var a) {
  const auto av = a.values();
  double total = 0.0;
  for (double x : av) total += x;
  const std::size_t ia = a.id();
  return a.tape()->record({1}, {total}, {a}, [ia](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    for (double& x : t.grad(ia)) x += g;
  });
}

inline Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

/// Sum along one axis, keeping it as a singleton dimension.
inline Var sum(Var a, std::size_t axis) {
  const auto sp = detail::split_axis(a.shape(), axis);
  const auto av = a.values();
  std::vector<double> out(sp.outer * sp.inner, 0.0);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t l = 0; l < sp.len; ++l)
      for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += av[(o * sp.len + l) * sp.inner + i];
  const std::size_t ia = a.id();
  return a.tape()->record(detail::keep_dim(a.shape(), axis), std::move(out), {a}, [ia, sp](Tape& t, std::size_t self) {
    const auto g = t.grad(self);
    auto ga = t.grad(ia);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t l = 0; l < sp.len; ++l)
        for (std::size_t i = 0; i < sp.inner; ++i) ga[(o * sp.len + l) * sp.inner + i] += g[o * sp.inner + i];
  });
}

inline Var mean(Var a, std::size_t axis) {
  const double len = static_cast<double>(detail::split_axis(a.shape(), axis).len);
  return scale(sum(a, axis), 1.0 / len);
}

/// Maximum along one axis (keepdim). Gradient goes to the first maximal entry.
inline Var max(Var a, std::size_t axis) {
  const auto sp = detail::split_axis(a.shape(), axis);
  const auto av = a.values();
  std::vector<double> out(sp.outer * sp.inner);
  auto arg = std::make_shared<std::vector<std::size_t>>(sp.outer * sp.inner);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      std::size_t best = (o * sp.len) * sp.inner + i;
      for (std::size_t l = 1; l < sp.len; ++l) {
        const std::size_t j = (o * sp.len + l) * sp.inner + i;
        if (av[j] > av[best]) best = j;
      }
      out[o * sp.inner + i] = av[best];
      (*arg)[o * sp.inner + i] = best;
    }
  const std::size_t ia = a.id();
  return a.tape()->record(detail::keep_dim(a.shape(), axis), std::move(out), {a}, [ia, arg](Tape& t, std::size_t self) {
    const auto g = t.grad(self);
    auto ga = t.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[(*arg)[i]] += g[i];
  });
}

/// Numerically stable softmax along `axis` (max-subtracted).
inline Var softmax(Var a, std::size_t axis) {
  const auto sp = detail::split_axis(a.shape(), axis);
  const auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      auto at = [&](std::size_t l) { return (o * sp.len + l) * sp.inner + i; };
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < sp.len; ++l) mx = std::max(mx, av[at(l)]);
      double z = 0.0;
      for (std::size_t l = 0; l < sp.len; ++l) z += (out[at(l)] = std::exp(av[at(l)] - mx));
      for (std::size_t l = 0; l < sp.len; ++l) out[at(l)] /= z;
    }
  const std::size_t ia = a.id();
  const std::size_t io = a.tape()->size();
  return a.tape()->record(a.shape(), std::move(out), {a}, [ia, io, sp](Tape& t, std::size_t self) {
    const auto g = t.grad(self);
    const auto y = t.value(io);
    auto ga = t.grad(ia);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        auto at = [&](std::size_t l) { return (o * sp.len + l) * sp.inner + i; };
        double dot = 0.0;
        for (std::size_t l = 0; l < sp.len; ++l) dot += g[at(l)] * y[at(l)];
        for (std::size_t l = 0; l < sp.len; ++l) ga[at(l)] += y[at(l)] * (g[at(l)] - dot);
      }
  });
}

/// log(sum(exp(a))) along `axis` (keepdim), stabilized by the slice maximum.
inline Var logsumexp(Var a, std::size_t axis) {
  const auto sp = detail::split_axis(a.shape(), axis);
  const auto av = a.values();
  std::vector<double> out(sp.outer * sp.inner);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      auto at = [&](std::size_t l) { return (o * sp.len + l) * sp.inner + i; };
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < sp.len; ++l) mx = std::max(mx, av[at(l)]);
      double z = 0.0;
      for (std::size_t l = 0; l < sp.len; ++l) z += std::exp(av[at(l)] - mx);
      out[o * sp.inner + i] = mx + std::log(z);
    }
  const std::size_t ia = a.id();
  const std::size_t io = a.tape()->size();
  return a.tape()->record(detail::keep_dim(a.shape(), axis), std::move(out), {a}, [ia, io, sp](Tape& t, std::size_t self) {
    const auto g = t.grad(self);
    const auto y = t.value(io);
    const auto x = t.value(ia);
    auto ga = t.grad(ia);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i)
        for (std::size_t l = 0; l < sp.len; ++l) {
          const std::size_t j = (o * sp.len + l) * sp.inner + i;
          ga[j] += g[o * sp.inner + i] * std::exp(x[j] - y[o * sp.inner + i]);
        }
  });
}

/// Euclidean norm along `axis` (keepdim). The gradient at a zero slice is zero.
inline Var norm(Var a, std::size_t axis) {
  const auto sp = detail::split_axis(a.shape(), axis);
  const auto av = a.values();
  std::vector<double> out(sp.outer * sp.inner, 0.0);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t l = 0; l < sp.len; ++l)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const double x = av[(o * sp.len + l) * sp.inner + i];
        out[o * sp.inner + i] += x * x;
      }
  for (double& x : out) x = std::sqrt(x);
  const std::size_t ia = a.id();
  const std::size_t io = a.tape()->size();
  return a.tape()->record(detail::keep_dim(a.shape(), axis), std::move(out), {a}, [ia, io, sp](Tape& t, std::size_t self) {
    const auto g = t.grad(self);
    const auto nrm = t.value(io);
    const auto x = t.value(ia);
    auto ga = t.grad(ia);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t l = 0; l < sp.len; ++l)
        for (std::size_t i = 0; i < sp.inner; ++i) {
          const std::size_t r = o * sp.inner + i;
          if (nrm[r] == 0.0) continue;
          const std::size_t j = (o * sp.len + l) * sp.inner + i;
          ga[j] += g[r] * x[j] / nrm[r];
        }
  });
}

/// Scales every slice along `axis` to unit Euclidean norm.
inline Var l2_normalize(Var a, std::size_t axis, double min_norm = 1e-8) {
  const auto sp = detail::split_axis(a.shape(), axis);
  const auto av = a.values();
  std::vector<double> norms(sp.outer * sp.inner, 0.0);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t l = 0; l < sp.len; ++l)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const double x = av[(o * sp.len + l) * sp.inner + i];
        norms[o * sp.inner + i] += x * x;
      }
  for (double& n : norms) {
    n = std::sqrt(n);
    if (n < min_norm) throw DegenerateNormError("cannot normalize a slice with norm below " + std::to_string(min_norm));
  }
  std::vector<double> out(av.size());
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t l = 0; l < sp.len; ++l)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t j = (o * sp.len + l) * sp.inner + i;
        out[j] = av[j] / norms[o * sp.inner + i];
      }
  const std::size_t ia = a.id();
  const std::size_t io = a.tape()->size();
  auto nptr = std::make_shared<const std::vector<double>>(std::move(norms));
  return a.tape()->record(a.shape(), std::move(out), {a}, [ia, io, sp, nptr](Tape& t, std::size_t self) {
    // d(x/|x|) = (g - y (g.y)) / |x|
    const auto g = t.grad(self);
    const auto y = t.value(io);
    auto ga = t.grad(ia);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        auto at = [&](std::size_t l) { return (o * sp.len + l) * sp.inner + i; };
        double dot = 0.0;
        for (std::size_t l = 0; l < sp.len; ++l) dot += g[at(l)] * y[at(l)];
        const double inv = 1.0 / (*nptr)[o * sp.inner + i];
        for (std::size_t l = 0; l < sp.len; ++l) ga[at(l)] += (g[at(l)] - y[at(l)] * dot) * inv;
      }
  });
}

/// Copies a node's current values into a standalone tensor.
inline Tensor detach(Var v) {
  return Tensor(v.shape(), std::vector<double>(v.values().begin(), v.values().end()));
}

}  // namespace cpgc
