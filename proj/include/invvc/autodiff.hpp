// Copyright 2026 the invvc authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "invvc/error.hpp"
#include "invvc/tensor.hpp"

// Reverse-mode automatic differentiation over dense tensors. Ops append
// nodes to a Tape in execution order (topological by construction); one
// backward pass walks the tape in reverse and visits each node exactly once.
namespace invvc::ad {

namespace detail {

template <typename T> struct Node {
  Tensor<T> value;
  Tensor<T> grad; // empty until first contribution
  bool requires_grad = false;
  std::function<void()> backprop; // reads this->grad, accumulates into parents

  void accumulate(const Tensor<T>& contrib) {
    if (grad.empty())
      grad = contrib;
    else
      grad += contrib;
  }
};

// Trailing-dimension broadcast: shapes are aligned at their last axis; each
// aligned pair of dims must be equal or one of them 1.
inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < a.size() ? a[a.size() - 1 - i] : 1;
    const std::size_t db = i < b.size() ? b[b.size() - 1 - i] : 1;
    if (da != db && da != 1 && db != 1)
      throw FormatError("shape mismatch: cannot broadcast " + shape_str(a) +
                        " with " + shape_str(b));
    out[rank - 1 - i] = std::max(da, db);
  }
  return out;
}

// Per-output-dim element strides into an operand, 0 where it broadcasts.
inline std::vector<std::size_t> broadcast_strides(const Shape& operand,
                                                  const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t s = 1;
  for (std::size_t i = 0; i < operand.size(); ++i) {
    const std::size_t axis = operand.size() - 1 - i;
    const std::size_t out_axis = out.size() - 1 - i;
    strides[out_axis] = (operand[axis] == 1 && out[out_axis] != 1) ? 0 : s;
    s *= operand[axis];
  }
  return strides;
}

// Visits every output element with the mapped flat indices of both operands.
template <typename T, typename F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t n = shape_numel(out);
  const std::size_t rank = out.size();
  std::vector<std::size_t> coord(rank, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t io = 0; io < n; ++io) {
    f(io, ia, ib);
    for (std::size_t d = rank; d-- > 0;) {
      ++coord[d];
      ia += sa[d];
      ib += sb[d];
      if (coord[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      coord[d] = 0;
    }
  }
}

// (outer, n, inner) decomposition of a shape around one axis; the workhorse
// for axis reductions and softmax.
struct AxisDecomp {
  std::size_t outer = 1, n = 1, inner = 1;
};

inline AxisDecomp axis_decomp(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size())
    throw UsageError("invalid axis " + std::to_string(axis) + " for shape " +
                     shape_str(shape));
  AxisDecomp d;
  for (std::size_t i = 0; i < axis; ++i) d.outer *= shape[i];
  d.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) d.inner *= shape[i];
  return d;
}

inline Shape drop_axis(const Shape& shape, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < shape.size(); ++i)
    if (i != axis) out.push_back(shape[i]);
  if (out.empty()) out.push_back(1);
  return out;
}

} // namespace detail

template <typename T> class Tape;

template <typename T> class Var {
public:
  Var() = default;

  const Tensor<T>& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }

  // Gradient accumulated by the last backward(); zeros if never touched.
  Tensor<T> grad() const {
    if (node_->grad.empty()) return Tensor<T>(node_->value.shape());
    return node_->grad;
  }

  Tape<T>& tape() const { return *tape_; }

private:
  friend class Tape<T>;
  Var(Tape<T>* tape, detail::Node<T>* node) : tape_(tape), node_(node) {}
  Tape<T>* tape_ = nullptr;
  detail::Node<T>* node_ = nullptr;
};

template <typename T> class Tape {
public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  Var<T> leaf(Tensor<T> value, bool requires_grad = false) {
    return wrap(make(std::move(value), requires_grad && grad_enabled_));
  }

  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

  void backward(const Var<T>& root) {
    if (!grad_enabled_)
      throw UsageError("backward on a gradient-disabled tape");
    if (consumed_) throw UsageError("graph already consumed by backward");
    if (root.value().numel() != 1)
      throw UsageError("backward root must be scalar, got shape " +
                       shape_str(root.shape()));
    consumed_ = true;
    root.node_->accumulate(Tensor<T>::ones(root.shape()));
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      detail::Node<T>& node = *nodes_[i];
      if (node.backprop && !node.grad.empty()) node.backprop();
    }
  }

  // Internal: ops use these to append nodes.
  detail::Node<T>* make(Tensor<T> value, bool requires_grad) {
    nodes_.push_back(std::make_unique<detail::Node<T>>());
    detail::Node<T>* n = nodes_.back().get();
    n->value = std::move(value);
    n->requires_grad = requires_grad && grad_enabled_;
    return n;
  }

  Var<T> wrap(detail::Node<T>* n) { return Var<T>(this, n); }
  detail::Node<T>* node_of(const Var<T>& v) { return v.node_; }

private:
  std::vector<std::unique_ptr<detail::Node<T>>> nodes_;
  bool grad_enabled_;
  bool consumed_ = false;
};

namespace detail {

template <typename T>
Tape<T>& same_tape(const Var<T>& a, const Var<T>& b) {
  if (&a.tape() != &b.tape())
    throw UsageError("operands recorded on different tapes");
  return a.tape();
}

template <typename T>
Node<T>* node(const Var<T>& v) {
  return v.tape().node_of(v);
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops (trailing-dimension broadcasting)
// ---------------------------------------------------------------------------

enum class BinOp { add, sub, mul, div };

template <typename T>
Var<T> elementwise(BinOp op, const Var<T>& a, const Var<T>& b) {
  Tape<T>& tape = detail::same_tape(a, b);
  detail::Node<T>* na = detail::node(a);
  detail::Node<T>* nb = detail::node(b);
  const Tensor<T>& av = na->value;
  const Tensor<T>& bv = nb->value;

  if (op == BinOp::div) {
    for (std::size_t i = 0; i < bv.numel(); ++i)
      if (bv[i] == T(0))
        throw NumericError("division by zero at index " + std::to_string(i));
  }

  const bool fast = av.shape() == bv.shape();
  const Shape out_shape =
      fast ? av.shape() : detail::broadcast_shape(av.shape(), bv.shape());
  Tensor<T> out(out_shape);

  auto apply = [op](T x, T y) -> T {
    switch (op) {
    case BinOp::add: return x + y;
    case BinOp::sub: return x - y;
    case BinOp::mul: return x * y;
    case BinOp::div: return x / y;
    }
    return T(0);
  };

  std::vector<std::size_t> sa, sb;
  if (fast) {
    for (std::size_t i = 0; i < out.numel(); ++i)
      out[i] = apply(av[i], bv[i]);
  } else {
    sa = detail::broadcast_strides(av.shape(), out_shape);
    sb = detail::broadcast_strides(bv.shape(), out_shape);
    detail::for_each_broadcast<T>(
        out_shape, sa, sb,
        [&](std::size_t io, std::size_t ia, std::size_t ib) {
          out[io] = apply(av[ia], bv[ib]);
        });
  }

  const bool rg = na->requires_grad || nb->requires_grad;
  detail::Node<T>* n = tape.make(std::move(out), rg);
  if (rg) {
    n->backprop = [op, n, na, nb, fast, sa, sb]() {
      const Tensor<T>& g = n->grad;
      const Tensor<T>& avv = na->value;
      const Tensor<T>& bvv = nb->value;
      Tensor<T> ga, gb;
      if (na->requires_grad) ga = Tensor<T>(avv.shape());
      if (nb->requires_grad) gb = Tensor<T>(bvv.shape());
      auto push = [&](std::size_t io, std::size_t ia, std::size_t ib) {
        const T gv = g[io];
        switch (op) {
        case BinOp::add:
          if (na->requires_grad) ga[ia] += gv;
          if (nb->requires_grad) gb[ib] += gv;
          break;
        case BinOp::sub:
          if (na->requires_grad) ga[ia] += gv;
          if (nb->requires_grad) gb[ib] -= gv;
          break;
        case BinOp::mul:
          if (na->requires_grad) ga[ia] += gv * bvv[ib];
          if (nb->requires_grad) gb[ib] += gv * avv[ia];
          break;
        case BinOp::div:
          if (na->requires_grad) ga[ia] += gv / bvv[ib];
          if (nb->requires_grad)
            gb[ib] -= gv * avv[ia] / (bvv[ib] * bvv[ib]);
          break;
        }
      };
      if (fast) {
        for (std::size_t i = 0; i < g.numel(); ++i) push(i, i, i);
      } else {
        detail::for_each_broadcast<T>(n->value.shape(), sa, sb, push);
      }
      if (na->requires_grad) na->accumulate(ga);
      if (nb->requires_grad) nb->accumulate(gb);
    };
  }
  return tape.wrap(n);
}

template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b) {
  return elementwise(BinOp::add, a, b);
}
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return elementwise(BinOp::sub, a, b);
}
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return elementwise(BinOp::mul, a, b);
}
template <typename T> Var<T> div(const Var<T>& a, const Var<T>& b) {
  return elementwise(BinOp::div, a, b);
}

// ---------------------------------------------------------------------------
// Elementwise unary ops
// ---------------------------------------------------------------------------

template <typename T, typename FwdF, typename BwdF>
Var<T> unary_op(const Var<T>& a, FwdF fwd, BwdF bwd_factory) {
  Tape<T>& tape = a.tape();
  detail::Node<T>* na = detail::node(a);
  Tensor<T> out(na->value.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = fwd(na->value[i]);
  detail::Node<T>* n = tape.make(std::move(out), na->requires_grad);
  if (n->requires_grad) n->backprop = bwd_factory(n, na);
  return tape.wrap(n);
}

template <typename T> Var<T> neg(const Var<T>& a) {
  return unary_op(
      a, [](T x) { return -x; },
      [](detail::Node<T>* n, detail::Node<T>* na) {
        return [n, na]() {
          Tensor<T> ga(na->value.shape());
          for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] = -n->grad[i];
          na->accumulate(ga);
        };
      });
}

template <typename T> Var<T> add_scalar(const Var<T>& a, T c) {
  return unary_op(
      a, [c](T x) { return x + c; },
      [](detail::Node<T>* n, detail::Node<T>* na) {
        return [n, na]() { na->accumulate(n->grad); };
      });
}

template <typename T> Var<T> mul_scalar(const Var<T>& a, T c) {
  return unary_op(
      a, [c](T x) { return x * c; },
      [c](detail::Node<T>* n, detail::Node<T>* na) {
        return [n, na, c]() {
          Tensor<T> ga(na->value.shape());
          for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] = c * n->grad[i];
          na->accumulate(ga);
        };
      });
}

template <typename T> Var<T> relu(const Var<T>& a) {
  return unary_op(
      a, [](T x) { return x > T(0) ? x : T(0); },
      [](detail::Node<T>* n, detail::Node<T>* na) {
        return [n, na]() {
          Tensor<T> ga(na->value.shape());
          for (std::size_t i = 0; i < ga.numel(); ++i)
            ga[i] = na->value[i] > T(0) ? n->grad[i] : T(0);
          na->accumulate(ga);
        };
      });
}

// abs with the zero subgradient pinned to 0.
template <typename T> Var<T> abs(const Var<T>& a) {
  return unary_op(
      a, [](T x) { return std::abs(x); },
      [](detail::Node<T>* n, detail::Node<T>* na) {
        return [n, na]() {
          Tensor<T> ga(na->value.shape());
          for (std::size_t i = 0; i < ga.numel(); ++i) {
            const T x = na->value[i];
            ga[i] = x > T(0) ? n->grad[i] : (x < T(0) ? -n->grad[i] : T(0));
          }
          na->accumulate(ga);
        };
      });
}

// sqrt with gradient defined as 0 at x == 0 (subgradient choice shared with
// the std reduction).
template <typename T> Var<T> sqrt(const Var<T>& a) {
  return unary_op(
      a, [](T x) { return std::sqrt(x); },
      [](detail::Node<T>* n, detail::Node<T>* na) {
        return [n, na]() {
          Tensor<T> ga(na->value.shape());
          for (std::size_t i = 0; i < ga.numel(); ++i) {
            const T y = n->value[i];
            ga[i] = y > T(0) ? n->grad[i] / (T(2) * y) : T(0);
          }
          na->accumulate(ga);
        };
      });
}

// Numerically stable sigmoid: branch on sign so exp never overflows.
template <typename T> inline T sigmoid_scalar(T x) {
  if (x >= T(0)) {
    return T(1) / (T(1) + std::exp(-x));
  }
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T> Var<T> sigmoid(const Var<T>& a) {
  return unary_op(
      a, [](T x) { return sigmoid_scalar(x); },
      [](detail::Node<T>* n, detail::Node<T>* na) {
        return [n, na]() {
          Tensor<T> ga(na->value.shape());
          for (std::size_t i = 0; i < ga.numel(); ++i) {
            const T y = n->value[i];
            ga[i] = n->grad[i] * y * (T(1) - y);
          }
          na->accumulate(ga);
        };
      });
}

// ---------------------------------------------------------------------------
// Matrix product (2-d)
// ---------------------------------------------------------------------------

template <typename T> Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  Tape<T>& tape = detail::same_tape(a, b);
  detail::Node<T>* na = detail::node(a);
  detail::Node<T>* nb = detail::node(b);
  const Tensor<T>& av = na->value;
  const Tensor<T>& bv = nb->value;
  if (av.rank() != 2 || bv.rank() != 2)
    throw FormatError("matmul expects rank-2 tensors, got " +
                      shape_str(av.shape()) + " and " + shape_str(bv.shape()));
  if (av.cols() != bv.rows())
    throw FormatError("matmul inner-dimension mismatch: " +
                      shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  const std::size_t m = av.rows(), k = av.cols(), p = bv.cols();
  Tensor<T> out({m, p});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t kk = 0; kk < k; ++kk) {
      const T x = av(i, kk);
      const T* brow = bv.data() + kk * p;
      T* orow = out.data() + i * p;
      for (std::size_t j = 0; j < p; ++j) orow[j] += x * brow[j];
    }

  const bool rg = na->requires_grad || nb->requires_grad;
  detail::Node<T>* n = tape.make(std::move(out), rg);
  if (rg) {
    n->backprop = [n, na, nb, m, k, p]() {
      const Tensor<T>& g = n->grad;
      if (na->requires_grad) { // ga = g . b^T
        Tensor<T> ga({m, k});
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t kk = 0; kk < k; ++kk) {
            T s = T(0);
            const T* grow = g.data() + i * p;
            const T* brow = nb->value.data() + kk * p;
            for (std::size_t j = 0; j < p; ++j) s += grow[j] * brow[j];
            ga(i, kk) = s;
          }
        na->accumulate(ga);
      }
      if (nb->requires_grad) { // gb = a^T . g
        Tensor<T> gb({k, p});
        for (std::size_t kk = 0; kk < k; ++kk)
          for (std::size_t i = 0; i < m; ++i) {
            const T x = na->value(i, kk);
            const T* grow = g.data() + i * p;
            T* brow = gb.data() + kk * p;
            for (std::size_t j = 0; j < p; ++j) brow[j] += x * grow[j];
          }
        nb->accumulate(gb);
      }
    };
  }
  return tape.wrap(n);
}

// ---------------------------------------------------------------------------
// 1-d convolution along the time axis (cross-correlation)
//   x: T x Cin, w: K x Cin x Cout, bias: Cout (may be empty)
// ---------------------------------------------------------------------------

enum class Padding { same, valid };

template <typename T>
Var<T> conv1d(const Var<T>& x, const Var<T>& w, const Var<T>& bias,
              Padding padding) {
  Tape<T>& tape = detail::same_tape(x, w);
  detail::same_tape(x, bias);
  detail::Node<T>* nx = detail::node(x);
  detail::Node<T>* nw = detail::node(w);
  detail::Node<T>* nb = detail::node(bias);
  const Tensor<T>& xv = nx->value;
  const Tensor<T>& wv = nw->value;
  if (xv.rank() != 2 || wv.rank() != 3)
    throw FormatError("conv1d expects x rank 2 and w rank 3");
  const std::size_t time = xv.rows(), cin = xv.cols();
  const std::size_t kernel = wv.dim(0), wcin = wv.dim(1), cout = wv.dim(2);
  if (cin != wcin)
    throw FormatError("conv1d channel mismatch: input has " +
                      std::to_string(cin) + ", kernel expects " +
                      std::to_string(wcin));
  if (padding == Padding::same && kernel % 2 == 0)
    throw FormatError("conv1d same-padding requires an odd kernel, got " +
                      std::to_string(kernel));
  if (!nb->value.empty() && nb->value.numel() != cout)
    throw FormatError("conv1d bias length mismatch");
  if (padding == Padding::valid && time < kernel)
    throw FormatError("conv1d valid padding needs input length >= kernel");

  const std::size_t pad = padding == Padding::same ? (kernel - 1) / 2 : 0;
  const std::size_t t_out = padding == Padding::same ? time : time - kernel + 1;
  Tensor<T> out({t_out, cout});
  if (!nb->value.empty())
    for (std::size_t t = 0; t < t_out; ++t)
      for (std::size_t co = 0; co < cout; ++co) out(t, co) = nb->value[co];
  for (std::size_t t = 0; t < t_out; ++t) {
    T* orow = out.data() + t * cout;
    for (std::size_t k = 0; k < kernel; ++k) {
      const std::ptrdiff_t ti =
          static_cast<std::ptrdiff_t>(t + k) - static_cast<std::ptrdiff_t>(pad);
      if (ti < 0 || ti >= static_cast<std::ptrdiff_t>(time)) continue;
      const T* xrow = xv.data() + static_cast<std::size_t>(ti) * cin;
      const T* wplane = wv.data() + k * cin * cout;
      for (std::size_t ci = 0; ci < cin; ++ci) {
        const T xval = xrow[ci];
        const T* wrow = wplane + ci * cout;
        for (std::size_t co = 0; co < cout; ++co) orow[co] += xval * wrow[co];
      }
    }
  }

  const bool rg = nx->requires_grad || nw->requires_grad || nb->requires_grad;
  detail::Node<T>* n = tape.make(std::move(out), rg);
  if (rg) {
    n->backprop = [n, nx, nw, nb, time, cin, kernel, cout, pad, t_out]() {
      const Tensor<T>& g = n->grad;
      Tensor<T> gx, gw, gb;
      if (nx->requires_grad) gx = Tensor<T>({time, cin});
      if (nw->requires_grad) gw = Tensor<T>(nw->value.shape());
      if (nb->requires_grad && !nb->value.empty())
        gb = Tensor<T>(nb->value.shape());
      for (std::size_t t = 0; t < t_out; ++t) {
        const T* grow = g.data() + t * cout;
        for (std::size_t k = 0; k < kernel; ++k) {
          const std::ptrdiff_t ti = static_cast<std::ptrdiff_t>(t + k) -
                                    static_cast<std::ptrdiff_t>(pad);
          if (ti < 0 || ti >= static_cast<std::ptrdiff_t>(time)) continue;
          const std::size_t tu = static_cast<std::size_t>(ti);
          const T* wplane = nw->value.data() + k * cin * cout;
          for (std::size_t ci = 0; ci < cin; ++ci) {
            if (nx->requires_grad) {
              T s = T(0);
              const T* wrow = wplane + ci * cout;
              for (std::size_t co = 0; co < cout; ++co)
                s += grow[co] * wrow[co];
              gx(tu, ci) += s;
            }
            if (nw->requires_grad) {
              const T xval = nx->value(tu, ci);
              T* gwrow = gw.data() + (k * cin + ci) * cout;
              for (std::size_t co = 0; co < cout; ++co)
                gwrow[co] += xval * grow[co];
            }
          }
        }
        if (!gb.empty())
          for (std::size_t co = 0; co < cout; ++co) gb[co] += grow[co];
      }
      if (nx->requires_grad) nx->accumulate(gx);
      if (nw->requires_grad) nw->accumulate(gw);
      if (nb->requires_grad && !gb.empty()) nb->accumulate(gb);
    };
  }
  return tape.wrap(n);
}

// ---------------------------------------------------------------------------
// Softmax over one axis (max-shifted)
// ---------------------------------------------------------------------------

template <typename T> Var<T> softmax(const Var<T>& a, std::size_t axis) {
  Tape<T>& tape = a.tape();
  detail::Node<T>* na = detail::node(a);
  const detail::AxisDecomp d = detail::axis_decomp(na->value.shape(), axis);
  Tensor<T> out(na->value.shape());
  const Tensor<T>& av = na->value;
  for (std::size_t o = 0; o < d.outer; ++o)
    for (std::size_t in = 0; in < d.inner; ++in) {
      const std::size_t base = o * d.n * d.inner + in;
      T mx = av[base];
      for (std::size_t i = 1; i < d.n; ++i)
        mx = std::max(mx, av[base + i * d.inner]);
      T sum = T(0);
      for (std::size_t i = 0; i < d.n; ++i) {
        const T e = std::exp(av[base + i * d.inner] - mx);
        out[base + i * d.inner] = e;
        sum += e;
      }
      for (std::size_t i = 0; i < d.n; ++i) out[base + i * d.inner] /= sum;
    }

  detail::Node<T>* n = tape.make(std::move(out), na->requires_grad);
  if (n->requires_grad) {
    n->backprop = [n, na, d]() {
      const Tensor<T>& g = n->grad;
      const Tensor<T>& y = n->value;
      Tensor<T> ga(na->value.shape());
      for (std::size_t o = 0; o < d.outer; ++o)
        for (std::size_t in = 0; in < d.inner; ++in) {
          const std::size_t base = o * d.n * d.inner + in;
          T dot = T(0);
          for (std::size_t i = 0; i < d.n; ++i)
            dot += g[base + i * d.inner] * y[base + i * d.inner];
          for (std::size_t i = 0; i < d.n; ++i) {
            const std::size_t ix = base + i * d.inner;
            ga[ix] = y[ix] * (g[ix] - dot);
          }
        }
      na->accumulate(ga);
    };
  }
  return tape.wrap(n);
}

// ---------------------------------------------------------------------------
// Layer normalization over the last axis (population variance), then
// elementwise affine gamma/beta.
// ---------------------------------------------------------------------------

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                  T eps) {
  Tape<T>& tape = detail::same_tape(x, gamma);
  detail::same_tape(x, beta);
  detail::Node<T>* nx = detail::node(x);
  detail::Node<T>* ng = detail::node(gamma);
  detail::Node<T>* nb = detail::node(beta);
  const Tensor<T>& xv = nx->value;
  const std::size_t c = xv.shape().back();
  if (ng->value.numel() != c || nb->value.numel() != c)
    throw FormatError("layer_norm gamma/beta must have length " +
                      std::to_string(c));
  const std::size_t rows = xv.numel() / c;

  Tensor<T> out(xv.shape());
  Tensor<T> xhat(xv.shape());
  std::vector<T> inv_sigma(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * c;
    T mean = T(0);
    for (std::size_t i = 0; i < c; ++i) mean += row[i];
    mean /= static_cast<T>(c);
    T var = T(0);
    for (std::size_t i = 0; i < c; ++i) {
      const T dv = row[i] - mean;
      var += dv * dv;
    }
    var /= static_cast<T>(c);
    const T is = T(1) / std::sqrt(var + eps);
    inv_sigma[r] = is;
    for (std::size_t i = 0; i < c; ++i) {
      const T xh = (row[i] - mean) * is;
      xhat[r * c + i] = xh;
      out[r * c + i] = ng->value[i] * xh + nb->value[i];
    }
  }

  const bool rg = nx->requires_grad || ng->requires_grad || nb->requires_grad;
  detail::Node<T>* n = tape.make(std::move(out), rg);
  if (rg) {
    n->backprop = [n, nx, ng, nb, xhat = std::move(xhat),
                   inv_sigma = std::move(inv_sigma), rows, c]() {
      const Tensor<T>& g = n->grad;
      Tensor<T> gx, gg, gb;
      if (nx->requires_grad) gx = Tensor<T>(nx->value.shape());
      if (ng->requires_grad) gg = Tensor<T>(ng->value.shape());
      if (nb->requires_grad) gb = Tensor<T>(nb->value.shape());
      for (std::size_t r = 0; r < rows; ++r) {
        const T* grow = g.data() + r * c;
        const T* xh = xhat.data() + r * c;
        if (!gg.empty() || !gb.empty()) {
          for (std::size_t i = 0; i < c; ++i) {
            if (!gg.empty()) gg[i] += grow[i] * xh[i];
            if (!gb.empty()) gb[i] += grow[i];
          }
        }
        if (!gx.empty()) {
          T mean_q = T(0), mean_qx = T(0);
          for (std::size_t i = 0; i < c; ++i) {
            const T q = grow[i] * ng->value[i];
            mean_q += q;
            mean_qx += q * xh[i];
          }
          mean_q /= static_cast<T>(c);
          mean_qx /= static_cast<T>(c);
          for (std::size_t i = 0; i < c; ++i) {
            const T q = grow[i] * ng->value[i];
            gx[r * c + i] = (q - mean_q - xh[i] * mean_qx) * inv_sigma[r];
          }
        }
      }
      if (!gx.empty()) nx->accumulate(gx);
      if (!gg.empty()) ng->accumulate(gg);
      if (!gb.empty()) nb->accumulate(gb);
    };
  }
  return tape.wrap(n);
}

// ---------------------------------------------------------------------------
// Axis reductions
// ---------------------------------------------------------------------------

template <typename T> Var<T> sum(const Var<T>& a, std::size_t axis) {
  Tape<T>& tape = a.tape();
  detail::Node<T>* na = detail::node(a);
  const detail::AxisDecomp d = detail::axis_decomp(na->value.shape(), axis);
  Tensor<T> out(detail::drop_axis(na->value.shape(), axis));
  for (std::size_t o = 0; o < d.outer; ++o)
    for (std::size_t i = 0; i < d.n; ++i)
      for (std::size_t in = 0; in < d.inner; ++in)
        out[o * d.inner + in] += na->value[(o * d.n + i) * d.inner + in];
  detail::Node<T>* n = tape.make(std::move(out), na->requires_grad);
  if (n->requires_grad) {
    n->backprop = [n, na, d]() {
      Tensor<T> ga(na->value.shape());
      for (std::size_t o = 0; o < d.outer; ++o)
        for (std::size_t i = 0; i < d.n; ++i)
          for (std::size_t in = 0; in < d.inner; ++in)
            ga[(o * d.n + i) * d.inner + in] = n->grad[o * d.inner + in];
      na->accumulate(ga);
    };
  }
  return tape.wrap(n);
}

template <typename T> Var<T> mean(const Var<T>& a, std::size_t axis) {
  const detail::AxisDecomp d = detail::axis_decomp(a.shape(), axis);
  return mul_scalar(sum(a, axis), T(1) / static_cast<T>(d.n));
}

// Population standard deviation along an axis. Gradient at zero deviation is
// defined as 0.
template <typename T> Var<T> std_dev(const Var<T>& a, std::size_t axis) {
  Tape<T>& tape = a.tape();
  detail::Node<T>* na = detail::node(a);
  const detail::AxisDecomp d = detail::axis_decomp(na->value.shape(), axis);
  if (d.n < 1) throw UsageError("std_dev over empty axis");
  const Shape out_shape = detail::drop_axis(na->value.shape(), axis);
  Tensor<T> out(out_shape);
  Tensor<T> means(out_shape);
  const Tensor<T>& av = na->value;
  for (std::size_t o = 0; o < d.outer; ++o)
    for (std::size_t in = 0; in < d.inner; ++in) {
      T m = T(0);
      for (std::size_t i = 0; i < d.n; ++i)
        m += av[(o * d.n + i) * d.inner + in];
      m /= static_cast<T>(d.n);
      T v = T(0);
      for (std::size_t i = 0; i < d.n; ++i) {
        const T dv = av[(o * d.n + i) * d.inner + in] - m;
        v += dv * dv;
      }
      v /= static_cast<T>(d.n);
      means[o * d.inner + in] = m;
      out[o * d.inner + in] = std::sqrt(v);
    }
  detail::Node<T>* n = tape.make(std::move(out), na->requires_grad);
  if (n->requires_grad) {
    n->backprop = [n, na, d, means = std::move(means)]() {
      Tensor<T> ga(na->value.shape());
      for (std::size_t o = 0; o < d.outer; ++o)
        for (std::size_t in = 0; in < d.inner; ++in) {
          const std::size_t ro = o * d.inner + in;
          const T sd = n->value[ro];
          if (sd <= T(0)) continue;
          const T scale = n->grad[ro] / (static_cast<T>(d.n) * sd);
          for (std::size_t i = 0; i < d.n; ++i) {
            const std::size_t ix = (o * d.n + i) * d.inner + in;
            ga[ix] = scale * (na->value[ix] - means[ro]);
          }
        }
      na->accumulate(ga);
    };
  }
  return tape.wrap(n);
}

// Mean and population standard deviation along one axis, both differentiable.
template <typename T>
std::pair<Var<T>, Var<T>> reduce_stats(const Var<T>& a, std::size_t axis) {
  return {mean(a, axis), std_dev(a, axis)};
}

template <typename T> Var<T> sum_all(const Var<T>& a) {
  Tape<T>& tape = a.tape();
  detail::Node<T>* na = detail::node(a);
  T s = T(0);
  for (std::size_t i = 0; i < na->value.numel(); ++i) s += na->value[i];
  detail::Node<T>* n = tape.make(Tensor<T>::scalar(s), na->requires_grad);
  if (n->requires_grad) {
    n->backprop = [n, na]() {
      na->accumulate(Tensor<T>::full(na->value.shape(), n->grad[0]));
    };
  }
  return tape.wrap(n);
}

template <typename T> Var<T> mean_all(const Var<T>& a) {
  return mul_scalar(sum_all(a), T(1) / static_cast<T>(a.value().numel()));
}

// ---------------------------------------------------------------------------
// Index-remapping ops: slice / split / concat / transpose
// ---------------------------------------------------------------------------

template <typename T>
Var<T> slice(const Var<T>& a, std::size_t axis, std::size_t start,
             std::size_t end) {
  Tape<T>& tape = a.tape();
  detail::Node<T>* na = detail::node(a);
  const detail::AxisDecomp d = detail::axis_decomp(na->value.shape(), axis);
  if (start >= end || end > d.n)
    throw FormatError("slice range [" + std::to_string(start) + "," +
                      std::to_string(end) + ") out of bounds for axis size " +
                      std::to_string(d.n));
  Shape out_shape = na->value.shape();
  out_shape[axis] = end - start;
  Tensor<T> out(out_shape);
  const std::size_t w = end - start;
  for (std::size_t o = 0; o < d.outer; ++o)
    for (std::size_t i = 0; i < w; ++i)
      for (std::size_t in = 0; in < d.inner; ++in)
        out[(o * w + i) * d.inner + in] =
            na->value[(o * d.n + start + i) * d.inner + in];
  detail::Node<T>* n = tape.make(std::move(out), na->requires_grad);
  if (n->requires_grad) {
    n->backprop = [n, na, d, start, w]() {
      Tensor<T> ga(na->value.shape());
      for (std::size_t o = 0; o < d.outer; ++o)
        for (std::size_t i = 0; i < w; ++i)
          for (std::size_t in = 0; in < d.inner; ++in)
            ga[(o * d.n + start + i) * d.inner + in] =
                n->grad[(o * w + i) * d.inner + in];
      na->accumulate(ga);
    };
  }
  return tape.wrap(n);
}

// Splits into two equal halves along an axis.
template <typename T>
std::pair<Var<T>, Var<T>> split(const Var<T>& a, std::size_t axis) {
  const std::size_t n = a.shape()[axis];
  if (n % 2 != 0)
    throw FormatError("split requires an even size along axis " +
                      std::to_string(axis) + ", got " + std::to_string(n));
  return {slice(a, axis, 0, n / 2), slice(a, axis, n / 2, n)};
}

template <typename T>
Var<T> concat(const Var<T>& a, const Var<T>& b, std::size_t axis) {
  Tape<T>& tape = detail::same_tape(a, b);
  detail::Node<T>* na = detail::node(a);
  detail::Node<T>* nb = detail::node(b);
  const Shape& sa = na->value.shape();
  const Shape& sb = nb->value.shape();
  if (sa.size() != sb.size())
    throw FormatError("concat rank mismatch");
  for (std::size_t i = 0; i < sa.size(); ++i)
    if (i != axis && sa[i] != sb[i])
      throw FormatError("concat non-concat dimension mismatch: " +
                        shape_str(sa) + " vs " + shape_str(sb));
  const detail::AxisDecomp da = detail::axis_decomp(sa, axis);
  const detail::AxisDecomp db = detail::axis_decomp(sb, axis);
  Shape out_shape = sa;
  out_shape[axis] = da.n + db.n;
  Tensor<T> out(out_shape);
  const std::size_t n_total = da.n + db.n;
  for (std::size_t o = 0; o < da.outer; ++o) {
    for (std::size_t i = 0; i < da.n; ++i)
      for (std::size_t in = 0; in < da.inner; ++in)
        out[(o * n_total + i) * da.inner + in] =
            na->value[(o * da.n + i) * da.inner + in];
    for (std::size_t i = 0; i < db.n; ++i)
      for (std::size_t in = 0; in < db.inner; ++in)
        out[(o * n_total + da.n + i) * db.inner + in] =
            nb->value[(o * db.n + i) * db.inner + in];
  }
  const bool rg = na->requires_grad || nb->requires_grad;
  detail::Node<T>* n = tape.make(std::move(out), rg);
  if (rg) {
    n->backprop = [n, na, nb, da, db, n_total]() {
      if (na->requires_grad) {
        Tensor<T> ga(na->value.shape());
        for (std::size_t o = 0; o < da.outer; ++o)
          for (std::size_t i = 0; i < da.n; ++i)
            for (std::size_t in = 0; in < da.inner; ++in)
              ga[(o * da.n + i) * da.inner + in] =
                  n->grad[(o * n_total + i) * da.inner + in];
        na->accumulate(ga);
      }
      if (nb->requires_grad) {
        Tensor<T> gb(nb->value.shape());
        for (std::size_t o = 0; o < db.outer; ++o)
          for (std::size_t i = 0; i < db.n; ++i)
            for (std::size_t in = 0; in < db.inner; ++in)
              gb[(o * db.n + i) * db.inner + in] =
                  n->grad[(o * n_total + da.n + i) * db.inner + in];
        nb->accumulate(gb);
      }
    };
  }
  return tape.wrap(n);
}

template <typename T> Var<T> transpose(const Var<T>& a) {
  Tape<T>& tape = a.tape();
  detail::Node<T>* na = detail::node(a);
  if (na->value.rank() != 2)
    throw FormatError("transpose expects a rank-2 tensor");
  const std::size_t r = na->value.rows(), c = na->value.cols();
  Tensor<T> out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out(j, i) = na->value(i, j);
  detail::Node<T>* n = tape.make(std::move(out), na->requires_grad);
  if (n->requires_grad) {
    n->backprop = [n, na, r, c]() {
      Tensor<T> ga({r, c});
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) ga(i, j) = n->grad(j, i);
      na->accumulate(ga);
    };
  }
  return tape.wrap(n);
}

// Operator sugar.
template <typename T> Var<T> operator+(const Var<T>& a, const Var<T>& b) {
  return add(a, b);
}
template <typename T> Var<T> operator-(const Var<T>& a, const Var<T>& b) {
  return sub(a, b);
}
template <typename T> Var<T> operator*(const Var<T>& a, const Var<T>& b) {
  return mul(a, b);
}
template <typename T> Var<T> operator/(const Var<T>& a, const Var<T>& b) {
  return div(a, b);
}
template <typename T> Var<T> operator-(const Var<T>& a) { return neg(a); }

// ---------------------------------------------------------------------------
// Gradient checking (64-bit)
// ---------------------------------------------------------------------------

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::vector<std::size_t> failing;
  std::vector<double> analytic;
  std::vector<double> numeric;

  bool ok() const { return failing.empty(); }
};

// Relative error with a floor: coordinates where both sides are below
// `floor` are compared at absolute scale `floor`.
inline double rel_error(double a, double b, double floor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline GradCheckReport compare_gradients(const std::vector<double>& analytic,
                                         const std::vector<double>& numeric,
                                         double tol, double floor = 1e-4) {
  GradCheckReport rep;
  rep.analytic = analytic;
  rep.numeric = numeric;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double e = rel_error(analytic[i], numeric[i], floor);
    rep.max_rel_error = std::max(rep.max_rel_error, e);
    if (e > tol) rep.failing.push_back(i);
  }
  return rep;
}

// Central-difference check of a scalar-valued tensor function. `f` is called
// as f(tape, var) and must build its result on the given tape.
template <typename F>
GradCheckReport grad_check(F&& f, const Tensor<double>& x, double step,
                           double tol, double floor = 1e-4) {
  std::vector<double> analytic(x.numel());
  {
    Tape<double> tape;
    Var<double> vx = tape.leaf(x, true);
    Var<double> y = f(tape, vx);
    tape.backward(y);
    const Tensor<double> g = vx.grad();
    for (std::size_t i = 0; i < x.numel(); ++i) analytic[i] = g[i];
  }
  auto eval = [&](const Tensor<double>& at) {
    Tape<double> tape(false);
    Var<double> vx = tape.leaf(at, false);
    return f(tape, vx).value()[0];
  };
  std::vector<double> numeric(x.numel());
  Tensor<double> probe = x;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double x0 = probe[i];
    probe[i] = x0 + step;
    const double fp = eval(probe);
    probe[i] = x0 - step;
    const double fm = eval(probe);
    probe[i] = x0;
    numeric[i] = (fp - fm) / (2.0 * step);
  }
  return compare_gradients(analytic, numeric, tol, floor);
}

} // namespace invvc::ad
