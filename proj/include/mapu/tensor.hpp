#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include <Eigen/Dense>

#include "mapu/common.hpp"

namespace mapu {

// Reverse-mode autodiff over dense tensors. A Tensor is a handle to a graph
// node; ops are free functions that record a backward closure capturing the
// parents. backward() walks the graph once in reverse topological order and
// accumulates gradients additively (call zero_grad between steps).
template <class T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated lazily, same size as value
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
  void accumulate(std::size_t i, T g) {
    ensure_grad();
    grad[i] += g;
  }
};

template <class T>
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (numel(shape) != data.size())
      throw dimension_error("tensor data size " + std::to_string(data.size()) +
                            " does not match shape " + shape_str(shape));
    node_ = std::make_shared<TensorNode<T>>();
    node_->shape = std::move(shape);
    node_->value = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T(0), requires_grad);
  }
  static Tensor full(Shape shape, T v, bool requires_grad = false) {
    std::vector<T> d(numel(shape), v);
    return Tensor(std::move(shape), std::move(d), requires_grad);
  }
  static Tensor scalar(T v) { return Tensor({1}, {v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t size() const { return node_->value.size(); }
  std::vector<T>& value() { return node_->value; }
  const std::vector<T>& value() const { return node_->value; }
  const std::vector<T>& grad() const {
    node_->ensure_grad();
    return node_->grad;
  }
  bool has_grad() const { return !node_->grad.empty(); }
  bool requires_grad() const { return node_->requires_grad; }

  T item() const {
    if (size() != 1) throw contract_error("item() requires a scalar tensor");
    return node_->value[0];
  }

  void zero_grad() { node_->grad.assign(node_->value.size(), T(0)); }

  std::shared_ptr<TensorNode<T>> node() const { return node_; }

  explicit Tensor(std::shared_ptr<TensorNode<T>> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

namespace detail {

template <class T>
inline void check_health(const TensorNode<T>& n) {
  if (!checked_mode()) return;
  for (T v : n.value)
    if (!std::isfinite(static_cast<double>(v)))
      throw numeric_error("non-finite value produced in checked mode");
}

template <class T>
inline std::shared_ptr<TensorNode<T>> make_node(
    Shape shape, std::vector<T> value,
    std::vector<std::shared_ptr<TensorNode<T>>> parents,
    std::function<void(TensorNode<T>&)> backward) {
  auto n = std::make_shared<TensorNode<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool rg = false;
  for (auto& p : parents) rg = rg || p->requires_grad;
  n->requires_grad = rg;
  if (rg) {
    n->parents = std::move(parents);
    n->backward = std::move(backward);
  }
  check_health(*n);
  return n;
}

// Broadcasting is limited to trailing singleton dims: an operand may have
// size-1 axes where the other is larger only in a contiguous run ending at
// the last axis.
inline void check_broadcast(const Shape& a, const Shape& b) {
  if (a.size() != b.size())
    throw dimension_error("broadcast rank mismatch: " + shape_str(a) + " vs " +
                          shape_str(b));
  auto trailing_ok = [&](const Shape& x, const Shape& y) {
    long first = -1;
    for (std::size_t i = 0; i < x.size(); ++i)
      if (x[i] == 1 && y[i] != 1) {
        first = static_cast<long>(i);
        break;
      }
    if (first < 0) return true;
    for (std::size_t i = static_cast<std::size_t>(first); i < x.size(); ++i)
      if (x[i] != 1) return false;
    return true;
  };
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] != b[i] && a[i] != 1 && b[i] != 1)
      throw dimension_error("incompatible shapes " + shape_str(a) + " and " +
                            shape_str(b));
  if (!trailing_ok(a, b) || !trailing_ok(b, a))
    throw dimension_error("broadcasting limited to trailing singleton dims: " +
                          shape_str(a) + " vs " + shape_str(b));
}

inline std::vector<std::size_t> row_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

// Offset into an operand (with stride 0 on broadcast axes) for a linear
// index into the broadcast output shape.
struct BroadcastMap {
  std::vector<std::size_t> out_strides;
  std::vector<std::size_t> op_strides;
  Shape out_shape;

  BroadcastMap(const Shape& out, const Shape& op) : out_shape(out) {
    out_strides = row_strides(out);
    auto st = row_strides(op);
    op_strides.resize(out.size());
    for (std::size_t i = 0; i < out.size(); ++i)
      op_strides[i] = (op[i] == 1 && out[i] != 1) ? 0 : st[i];
  }

  std::size_t offset(std::size_t linear) const {
    std::size_t off = 0;
    for (std::size_t i = 0; i < out_shape.size(); ++i) {
      std::size_t idx = (linear / out_strides[i]) % out_shape[i];
      off += idx * op_strides[i];
    }
    return off;
  }
};

}  // namespace detail

// ---- elementwise binary ops (broadcasting over trailing singletons) ----

template <class T, class Fw, class Da, class Db>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, Fw fw, Da da,
                    Db db) {
  detail::check_broadcast(a.shape(), b.shape());
  Shape out_shape(a.shape().size());
  for (std::size_t i = 0; i < out_shape.size(); ++i)
    out_shape[i] = std::max(a.shape()[i], b.shape()[i]);
  const std::size_t n = numel(out_shape);
  detail::BroadcastMap ma(out_shape, a.shape());
  detail::BroadcastMap mb(out_shape, b.shape());
  const bool bcast = a.shape() != out_shape || b.shape() != out_shape;

  std::vector<T> out(n);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (!bcast) {
    for (std::size_t i = 0; i < n; ++i) out[i] = fw(av[i], bv[i]);
  } else {
    for (std::size_t i = 0; i < n; ++i)
      out[i] = fw(av[ma.offset(i)], bv[mb.offset(i)]);
  }

  auto an = a.node();
  auto bn = b.node();
  auto backward = [an, bn, ma, mb, bcast, n, da, db](TensorNode<T>& self) {
    const auto& av = an->value;
    const auto& bv = bn->value;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t ia = bcast ? ma.offset(i) : i;
      std::size_t ib = bcast ? mb.offset(i) : i;
      T g = self.grad[i];
      if (an->requires_grad) an->accumulate(ia, da(g, av[ia], bv[ib]));
      if (bn->requires_grad) bn->accumulate(ib, db(g, av[ia], bv[ib]));
    }
  };
  return Tensor<T>(detail::make_node<T>(out_shape, std::move(out), {an, bn},
                                        backward));
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      a, b, [](T x, T y) { return x + y; }, [](T g, T, T) { return g; },
      [](T g, T, T) { return g; });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      a, b, [](T x, T y) { return x - y; }, [](T g, T, T) { return g; },
      [](T g, T, T) { return -g; });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      a, b, [](T x, T y) { return x * y; }, [](T g, T, T y) { return g * y; },
      [](T g, T x, T) { return g * x; });
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      a, b, [](T x, T y) { return x / y; },
      [](T g, T, T y) { return g / y; },
      [](T g, T x, T y) { return -g * x / (y * y); });
}

// ---- elementwise unary ops ----

template <class T, class Fw, class Dv>
Tensor<T> unary_op(const Tensor<T>& a, Fw fw, Dv dv) {
  const std::size_t n = a.size();
  std::vector<T> out(n);
  const auto& av = a.value();
  for (std::size_t i = 0; i < n; ++i) out[i] = fw(av[i]);
  auto an = a.node();
  auto backward = [an, n, dv](TensorNode<T>& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (std::size_t i = 0; i < n; ++i)
      an->grad[i] += dv(self.grad[i], an->value[i], self.value[i]);
  };
  return Tensor<T>(
      detail::make_node<T>(a.shape(), std::move(out), {an}, backward));
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  return unary_op(
      a, [](T x) { return x > T(0) ? x : T(0); },
      [](T g, T x, T) { return x > T(0) ? g : T(0); });
}

template <class T>
Tensor<T> tanh_op(const Tensor<T>& a) {
  return unary_op(
      a, [](T x) { return std::tanh(x); },
      [](T g, T, T y) { return g * (T(1) - y * y); });
}

template <class T>
Tensor<T> exp_op(const Tensor<T>& a) {
  return unary_op(
      a, [](T x) { return std::exp(x); }, [](T g, T, T y) { return g * y; });
}

template <class T>
Tensor<T> log_op(const Tensor<T>& a) {
  return unary_op(
      a, [](T x) { return std::log(x); }, [](T g, T x, T) { return g / x; });
}

template <class T>
Tensor<T> square(const Tensor<T>& a) {
  return unary_op(
      a, [](T x) { return x * x; }, [](T g, T x, T) { return T(2) * g * x; });
}

template <class T>
Tensor<T> neg(const Tensor<T>& a) {
  return unary_op(
      a, [](T x) { return -x; }, [](T g, T, T) { return -g; });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  return unary_op(
      a, [s](T x) { return s * x; }, [s](T g, T, T) { return s * g; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  return unary_op(
      a, [s](T x) { return x + s; }, [](T g, T, T) { return g; });
}

// ---- matmul ----

template <class T>
using EigenMat =
    Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<EigenMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const EigenMat<T>>;

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2)
    throw dimension_error("matmul expects rank-2 tensors");
  const std::size_t m = a.shape()[0], k = a.shape()[1];
  const std::size_t k2 = b.shape()[0], n = b.shape()[1];
  if (k != k2)
    throw dimension_error("matmul inner dims differ: " + shape_str(a.shape()) +
                          " x " + shape_str(b.shape()));
  std::vector<T> out(m * n);
  {
    ConstMatMap<T> A(a.value().data(), m, k);
    ConstMatMap<T> B(b.value().data(), k, n);
    MatMap<T> C(out.data(), m, n);
    C.noalias() = A * B;
  }
  auto an = a.node();
  auto bn = b.node();
  auto backward = [an, bn, m, k, n](TensorNode<T>& self) {
    ConstMatMap<T> G(self.grad.data(), m, n);
    if (an->requires_grad) {
      an->ensure_grad();
      ConstMatMap<T> B(bn->value.data(), k, n);
      MatMap<T> GA(an->grad.data(), m, k);
      GA.noalias() += G * B.transpose();
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      ConstMatMap<T> A(an->value.data(), m, k);
      MatMap<T> GB(bn->grad.data(), k, n);
      GB.noalias() += A.transpose() * G;
    }
  };
  return Tensor<T>(
      detail::make_node<T>({m, n}, std::move(out), {an, bn}, backward));
}

// Adds a length-n row vector to every row of an [m x n] matrix.
template <class T>
Tensor<T> add_rowvec(const Tensor<T>& a, const Tensor<T>& v) {
  if (a.shape().size() != 2 || v.shape().size() != 1 ||
      v.shape()[0] != a.shape()[1])
    throw dimension_error("add_rowvec shape mismatch: " +
                          shape_str(a.shape()) + " + " + shape_str(v.shape()));
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<T> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      out[i * n + j] = a.value()[i * n + j] + v.value()[j];
  auto an = a.node();
  auto vn = v.node();
  auto backward = [an, vn, m, n](TensorNode<T>& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < m * n; ++i) an->grad[i] += self.grad[i];
    }
    if (vn->requires_grad) {
      vn->ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
          vn->grad[j] += self.grad[i * n + j];
    }
  };
  return Tensor<T>(
      detail::make_node<T>(a.shape(), std::move(out), {an, vn}, backward));
}

// ---- reductions / reshapes ----

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = T(0);
  for (T v : a.value()) s += v;
  auto an = a.node();
  auto backward = [an](TensorNode<T>& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (auto& g : an->grad) g += self.grad[0];
  };
  return Tensor<T>(detail::make_node<T>({1}, {s}, {an}, backward));
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

// Sum along one axis. keepdim retains a singleton axis (needed for
// broadcasting back against the input).
template <class T>
Tensor<T> sum_axis(const Tensor<T>& a, std::size_t axis, bool keepdim) {
  const Shape& s = a.shape();
  if (axis >= s.size()) throw dimension_error("sum_axis: axis out of range");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t dim = s[axis];
  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i == axis) {
      if (keepdim) out_shape.push_back(1);
    } else {
      out_shape.push_back(s[i]);
    }
  }
  if (out_shape.empty()) out_shape.push_back(1);
  std::vector<T> out(outer * inner, T(0));
  const auto& av = a.value();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t d = 0; d < dim; ++d)
      for (std::size_t i = 0; i < inner; ++i)
        out[o * inner + i] += av[(o * dim + d) * inner + i];
  auto an = a.node();
  auto backward = [an, outer, dim, inner](TensorNode<T>& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t d = 0; d < dim; ++d)
        for (std::size_t i = 0; i < inner; ++i)
          an->grad[(o * dim + d) * inner + i] += self.grad[o * inner + i];
  };
  return Tensor<T>(
      detail::make_node<T>(out_shape, std::move(out), {an}, backward));
}

template <class T>
Tensor<T> mean_axis(const Tensor<T>& a, std::size_t axis, bool keepdim) {
  return scale(sum_axis(a, axis, keepdim),
               T(1) / static_cast<T>(a.shape()[axis]));
}

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape new_shape) {
  if (numel(new_shape) != a.size())
    throw dimension_error("reshape " + shape_str(a.shape()) + " -> " +
                          shape_str(new_shape) + " changes element count");
  auto an = a.node();
  auto backward = [an](TensorNode<T>& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      an->grad[i] += self.grad[i];
  };
  std::vector<T> out = a.value();
  return Tensor<T>(
      detail::make_node<T>(std::move(new_shape), std::move(out), {an},
                           backward));
}

// Swaps the last two axes of a rank-3 tensor: [A,B,C] -> [A,C,B].
template <class T>
Tensor<T> transpose_12(const Tensor<T>& a) {
  if (a.shape().size() != 3)
    throw dimension_error("transpose_12 expects a rank-3 tensor");
  const std::size_t A = a.shape()[0], B = a.shape()[1], C = a.shape()[2];
  std::vector<T> out(A * B * C);
  const auto& av = a.value();
  for (std::size_t x = 0; x < A; ++x)
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c)
        out[(x * C + c) * B + b] = av[(x * B + b) * C + c];
  auto an = a.node();
  auto backward = [an, A, B, C](TensorNode<T>& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (std::size_t x = 0; x < A; ++x)
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c)
          an->grad[(x * B + b) * C + c] += self.grad[(x * C + c) * B + b];
  };
  return Tensor<T>(
      detail::make_node<T>({A, C, B}, std::move(out), {an}, backward));
}

// ---- softmax family ----

template <class T>
Tensor<T> log_softmax_rows(const Tensor<T>& a) {
  if (a.shape().size() != 2)
    throw dimension_error("log_softmax_rows expects [B,K]");
  const std::size_t B = a.shape()[0], K = a.shape()[1];
  std::vector<T> out(B * K);
  const auto& av = a.value();
  for (std::size_t i = 0; i < B; ++i) {
    T m = av[i * K];
    for (std::size_t k = 1; k < K; ++k) m = std::max(m, av[i * K + k]);
    T lse = T(0);
    for (std::size_t k = 0; k < K; ++k) lse += std::exp(av[i * K + k] - m);
    lse = m + std::log(lse);
    for (std::size_t k = 0; k < K; ++k) out[i * K + k] = av[i * K + k] - lse;
  }
  auto an = a.node();
  auto backward = [an, B, K](TensorNode<T>& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (std::size_t i = 0; i < B; ++i) {
      T gs = T(0);
      for (std::size_t k = 0; k < K; ++k) gs += self.grad[i * K + k];
      for (std::size_t k = 0; k < K; ++k)
        an->grad[i * K + k] +=
            self.grad[i * K + k] - std::exp(self.value[i * K + k]) * gs;
    }
  };
  return Tensor<T>(
      detail::make_node<T>(a.shape(), std::move(out), {an}, backward));
}

// Mean negative log-likelihood of the true class: logp is [B,K] log-probs.
template <class T>
Tensor<T> nll(const Tensor<T>& logp, const std::vector<int>& labels) {
  if (logp.shape().size() != 2) throw dimension_error("nll expects [B,K]");
  const std::size_t B = logp.shape()[0], K = logp.shape()[1];
  if (labels.size() != B)
    throw contract_error("nll: label count does not match batch");
  T s = T(0);
  for (std::size_t i = 0; i < B; ++i) {
    int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= K)
      throw contract_error("nll: label " + std::to_string(y) +
                           " out of range for K=" + std::to_string(K));
    s -= logp.value()[i * K + static_cast<std::size_t>(y)];
  }
  s /= static_cast<T>(B);
  auto pn = logp.node();
  auto lab = labels;
  auto backward = [pn, lab, B, K](TensorNode<T>& self) {
    if (!pn->requires_grad) return;
    pn->ensure_grad();
    T g = self.grad[0] / static_cast<T>(B);
    for (std::size_t i = 0; i < B; ++i)
      pn->grad[i * K + static_cast<std::size_t>(lab[i])] -= g;
  };
  return Tensor<T>(detail::make_node<T>({1}, {s}, {pn}, backward));
}

// ---- graph control ----

// Value-identical tensor severed from the graph; gradients never flow
// through it.
template <class T>
Tensor<T> detach(const Tensor<T>& a) {
  std::vector<T> v = a.value();
  return Tensor<T>(Shape(a.shape()), std::move(v), false);
}

template <class T>
void backward(const Tensor<T>& loss) {
  if (loss.size() != 1)
    throw contract_error("backward requires a scalar loss");
  auto root = loss.node();
  if (!root->requires_grad) return;  // graph of constants: nothing to do

  // Iterative post-order DFS to get reverse topological order.
  std::vector<TensorNode<T>*> topo;
  std::unordered_set<TensorNode<T>*> visited;
  std::vector<std::pair<TensorNode<T>*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      TensorNode<T>* p = node->parents[idx++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] += T(1);
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    TensorNode<T>* n = *it;
    if (n->backward) {
      n->ensure_grad();
      n->backward(*n);
    }
  }
}

}  // namespace mapu
