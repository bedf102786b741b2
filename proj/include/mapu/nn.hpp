#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "mapu/rng.hpp"
#include "mapu/tensor.hpp"

namespace mapu {

template <class T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
};

template <class T>
using ParamList = std::vector<NamedParam<T>>;

template <class T>
void zero_grads(ParamList<T>& params) {
  for (auto& p : params) p.tensor.zero_grad();
}

// ---- 1-D convolution (cross-correlation with bias) ----

template <class T>
struct Conv1d {
  std::size_t in_channels = 0, out_channels = 0, kernel_size = 0;
  std::size_t stride = 1, padding = 0;
  Tensor<T> weight;  // [out, in, k]
  Tensor<T> bias;    // [out]

  Conv1d() = default;
  Conv1d(std::size_t cin, std::size_t cout, std::size_t k, std::size_t stride_,
         std::size_t pad, Rng& rng)
      : in_channels(cin),
        out_channels(cout),
        kernel_size(k),
        stride(stride_),
        padding(pad) {
    // Kaiming-uniform for ReLU nets.
    const double bound = std::sqrt(6.0 / static_cast<double>(cin * k));
    std::vector<T> w(cout * cin * k);
    for (auto& v : w) v = static_cast<T>(rng.uniform(-bound, bound));
    weight = Tensor<T>({cout, cin, k}, std::move(w), true);
    bias = Tensor<T>::zeros({cout}, true);
  }

  std::size_t out_len(std::size_t L) const {
    if (L + 2 * padding < kernel_size) return 0;
    return (L + 2 * padding - kernel_size) / stride + 1;
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    if (x.shape().size() != 3 || x.shape()[1] != in_channels)
      throw dimension_error("conv1d: expected [B," +
                            std::to_string(in_channels) + ",L], got " +
                            shape_str(x.shape()));
    const std::size_t B = x.shape()[0], L = x.shape()[2];
    const std::size_t Lo = out_len(L);
    if (Lo < 1) throw dimension_error("conv1d: output length < 1");
    const std::size_t K = in_channels * kernel_size;

    // im2col: [Cin*k, B*Lo], then weight [Cout, Cin*k] x col.
    std::vector<T> col(K * B * Lo, T(0));
    const auto& xv = x.value();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < in_channels; ++c)
        for (std::size_t kk = 0; kk < kernel_size; ++kk) {
          const std::size_t row = c * kernel_size + kk;
          for (std::size_t t = 0; t < Lo; ++t) {
            const long src = static_cast<long>(t * stride + kk) -
                             static_cast<long>(padding);
            if (src < 0 || src >= static_cast<long>(L)) continue;
            col[row * (B * Lo) + b * Lo + t] =
                xv[(b * in_channels + c) * L + static_cast<std::size_t>(src)];
          }
        }

    std::vector<T> prod(out_channels * B * Lo);
    {
      ConstMatMap<T> W(weight.value().data(), out_channels, K);
      ConstMatMap<T> C(col.data(), K, B * Lo);
      MatMap<T> P(prod.data(), out_channels, B * Lo);
      P.noalias() = W * C;
    }
    std::vector<T> out(B * out_channels * Lo);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t o = 0; o < out_channels; ++o)
        for (std::size_t t = 0; t < Lo; ++t)
          out[(b * out_channels + o) * Lo + t] =
              prod[o * (B * Lo) + b * Lo + t] + bias.value()[o];

    auto xn = x.node();
    auto wn = weight.node();
    auto bn = bias.node();
    auto col_saved = std::make_shared<std::vector<T>>(std::move(col));
    const std::size_t cin = in_channels, cout = out_channels,
                      ks = kernel_size, st = stride, pad = padding;
    auto backward_fn = [xn, wn, bn, col_saved, B, L, Lo, K, cin, cout, ks, st,
                        pad](TensorNode<T>& self) {
      // Regroup output grad to [Cout, B*Lo].
      std::vector<T> g(cout * B * Lo);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t o = 0; o < cout; ++o)
          for (std::size_t t = 0; t < Lo; ++t)
            g[o * (B * Lo) + b * Lo + t] = self.grad[(b * cout + o) * Lo + t];
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t o = 0; o < cout; ++o) {
          T s = T(0);
          for (std::size_t i = 0; i < B * Lo; ++i) s += g[o * (B * Lo) + i];
          bn->grad[o] += s;
        }
      }
      if (wn->requires_grad) {
        wn->ensure_grad();
        ConstMatMap<T> G(g.data(), cout, B * Lo);
        ConstMatMap<T> C(col_saved->data(), K, B * Lo);
        MatMap<T> GW(wn->grad.data(), cout, K);
        GW.noalias() += G * C.transpose();
      }
      if (xn->requires_grad) {
        xn->ensure_grad();
        std::vector<T> gcol(K * B * Lo);
        {
          ConstMatMap<T> W(wn->value.data(), cout, K);
          ConstMatMap<T> G(g.data(), cout, B * Lo);
          MatMap<T> GC(gcol.data(), K, B * Lo);
          GC.noalias() = W.transpose() * G;
        }
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t c = 0; c < cin; ++c)
            for (std::size_t kk = 0; kk < ks; ++kk) {
              const std::size_t row = c * ks + kk;
              for (std::size_t t = 0; t < Lo; ++t) {
                const long src = static_cast<long>(t * st + kk) -
                                 static_cast<long>(pad);
                if (src < 0 || src >= static_cast<long>(L)) continue;
                xn->grad[(b * cin + c) * L + static_cast<std::size_t>(src)] +=
                    gcol[row * (B * Lo) + b * Lo + t];
              }
            }
      }
    };
    return Tensor<T>(detail::make_node<T>({B, out_channels, Lo},
                                          std::move(out), {xn, wn, bn},
                                          backward_fn));
  }

  void collect(const std::string& prefix, ParamList<T>& out) {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

// ---- batch normalization over [B, C, L] (per channel) ----

template <class T>
struct BatchNorm1d {
  std::size_t channels = 0;
  T eps = static_cast<T>(1e-5);
  T momentum = static_cast<T>(0.1);
  Tensor<T> gamma, beta;
  std::vector<T> running_mean, running_var;

  BatchNorm1d() = default;
  explicit BatchNorm1d(std::size_t c) : channels(c) {
    gamma = Tensor<T>::full({c}, T(1), true);
    beta = Tensor<T>::zeros({c}, true);
    running_mean.assign(c, T(0));
    running_var.assign(c, T(1));
  }

  Tensor<T> forward(const Tensor<T>& x, bool train) {
    if (x.shape().size() != 3 || x.shape()[1] != channels)
      throw dimension_error("batchnorm1d: expected [B," +
                            std::to_string(channels) + ",L]");
    const std::size_t B = x.shape()[0], C = channels, L = x.shape()[2];
    const std::size_t m = B * L;
    const auto& xv = x.value();

    std::vector<T> mu(C), var(C);
    if (train) {
      for (std::size_t c = 0; c < C; ++c) {
        T s = T(0);
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t t = 0; t < L; ++t) s += xv[(b * C + c) * L + t];
        mu[c] = s / static_cast<T>(m);
        T v = T(0);
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t t = 0; t < L; ++t) {
            T d = xv[(b * C + c) * L + t] - mu[c];
            v += d * d;
          }
        var[c] = v / static_cast<T>(m);
        running_mean[c] =
            (T(1) - momentum) * running_mean[c] + momentum * mu[c];
        running_var[c] = (T(1) - momentum) * running_var[c] + momentum * var[c];
      }
    } else {
      mu = running_mean;
      var = running_var;
    }

    std::vector<T> inv_std(C);
    for (std::size_t c = 0; c < C; ++c)
      inv_std[c] = T(1) / std::sqrt(var[c] + eps);
    std::vector<T> xhat(B * C * L), out(B * C * L);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t t = 0; t < L; ++t) {
          const std::size_t i = (b * C + c) * L + t;
          xhat[i] = (xv[i] - mu[c]) * inv_std[c];
          out[i] = gamma.value()[c] * xhat[i] + beta.value()[c];
        }

    auto xn = x.node();
    auto gn = gamma.node();
    auto bn = beta.node();
    auto xhat_saved = std::make_shared<std::vector<T>>(std::move(xhat));
    auto inv_saved = std::make_shared<std::vector<T>>(std::move(inv_std));
    auto backward_fn = [xn, gn, bn, xhat_saved, inv_saved, B, C, L, m,
                        train](TensorNode<T>& self) {
      const auto& xh = *xhat_saved;
      const auto& istd = *inv_saved;
      if (gn->requires_grad) {
        gn->ensure_grad();
        for (std::size_t c = 0; c < C; ++c) {
          T s = T(0);
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t t = 0; t < L; ++t) {
              const std::size_t i = (b * C + c) * L + t;
              s += self.grad[i] * xh[i];
            }
          gn->grad[c] += s;
        }
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t c = 0; c < C; ++c) {
          T s = T(0);
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t t = 0; t < L; ++t)
              s += self.grad[(b * C + c) * L + t];
          bn->grad[c] += s;
        }
      }
      if (xn->requires_grad) {
        xn->ensure_grad();
        for (std::size_t c = 0; c < C; ++c) {
          const T gm = gn->value[c];
          if (!train) {
            for (std::size_t b = 0; b < B; ++b)
              for (std::size_t t = 0; t < L; ++t) {
                const std::size_t i = (b * C + c) * L + t;
                xn->grad[i] += self.grad[i] * gm * istd[c];
              }
            continue;
          }
          // Train mode: batch statistics participate in the graph.
          T sum_g = T(0), sum_gx = T(0);
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t t = 0; t < L; ++t) {
              const std::size_t i = (b * C + c) * L + t;
              sum_g += self.grad[i] * gm;
              sum_gx += self.grad[i] * gm * xh[i];
            }
          const T inv_m = T(1) / static_cast<T>(m);
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t t = 0; t < L; ++t) {
              const std::size_t i = (b * C + c) * L + t;
              xn->grad[i] += istd[c] * (self.grad[i] * gm - inv_m * sum_g -
                                        inv_m * xh[i] * sum_gx);
            }
        }
      }
    };
    return Tensor<T>(detail::make_node<T>(x.shape(), std::move(out),
                                          {xn, gn, bn}, backward_fn));
  }

  void collect(const std::string& prefix, ParamList<T>& out) {
    out.push_back({prefix + ".gamma", gamma});
    out.push_back({prefix + ".beta", beta});
  }
};

// ---- max pooling, kernel 2 / stride 2, floor on odd lengths ----

template <class T>
Tensor<T> max_pool1d_2(const Tensor<T>& x) {
  if (x.shape().size() != 3) throw dimension_error("max_pool1d expects [B,C,L]");
  const std::size_t B = x.shape()[0], C = x.shape()[1], L = x.shape()[2];
  const std::size_t Lo = L / 2;
  if (Lo < 1) throw dimension_error("max_pool1d: output length < 1");
  std::vector<T> out(B * C * Lo);
  auto arg = std::make_shared<std::vector<std::size_t>>(B * C * Lo);
  const auto& xv = x.value();
  for (std::size_t bc = 0; bc < B * C; ++bc)
    for (std::size_t t = 0; t < Lo; ++t) {
      const std::size_t i0 = bc * L + 2 * t;
      const bool second = xv[i0 + 1] > xv[i0];
      (*arg)[bc * Lo + t] = i0 + (second ? 1 : 0);
      out[bc * Lo + t] = xv[i0 + (second ? 1 : 0)];
    }
  auto xn = x.node();
  auto backward_fn = [xn, arg](TensorNode<T>& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      xn->grad[(*arg)[i]] += self.grad[i];
  };
  return Tensor<T>(
      detail::make_node<T>({B, C, Lo}, std::move(out), {xn}, backward_fn));
}

// ---- linear layer ----

template <class T>
struct Linear {
  std::size_t in_dim = 0, out_dim = 0;
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out]

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng) : in_dim(in), out_dim(out) {
    const double bound = std::sqrt(6.0 / static_cast<double>(in));
    std::vector<T> w(in * out);
    for (auto& v : w) v = static_cast<T>(rng.uniform(-bound, bound));
    weight = Tensor<T>({in, out}, std::move(w), true);
    bias = Tensor<T>::zeros({out}, true);
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    return add_rowvec(matmul(x, weight), bias);
  }

  void collect(const std::string& prefix, ParamList<T>& out) {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

// ---- single-layer tanh RNN over [B, T, D] ----

template <class T>
struct Rnn {
  std::size_t input_dim = 0, hidden_dim = 0;
  Tensor<T> w_ih;  // [h, in]
  Tensor<T> w_hh;  // [h, h]
  Tensor<T> bias;  // [h]

  Rnn() = default;
  Rnn(std::size_t in, std::size_t hidden, Rng& rng)
      : input_dim(in), hidden_dim(hidden) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
    auto init = [&](std::size_t n) {
      std::vector<T> v(n);
      for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
      return v;
    };
    w_ih = Tensor<T>({hidden, in}, init(hidden * in), true);
    w_hh = Tensor<T>({hidden, hidden}, init(hidden * hidden), true);
    bias = Tensor<T>({hidden}, init(hidden), true);
  }

  // h_t = tanh(W_ih x_t + W_hh h_{t-1} + b), h_0 = 0. Returns all hidden
  // states [B, T, h]. Single fused op with BPTT backward.
  Tensor<T> forward(const Tensor<T>& seq) const {
    if (seq.shape().size() != 3 || seq.shape()[2] != input_dim)
      throw dimension_error("rnn: expected [B,T," + std::to_string(input_dim) +
                            "], got " + shape_str(seq.shape()));
    const std::size_t B = seq.shape()[0], Tn = seq.shape()[1],
                      D = input_dim, H = hidden_dim;
    std::vector<T> hs(B * Tn * H, T(0));
    const auto& xv = seq.value();
    const auto& wih = w_ih.value();
    const auto& whh = w_hh.value();
    const auto& bv = bias.value();
    std::vector<T> hprev(H);
    for (std::size_t b = 0; b < B; ++b) {
      std::fill(hprev.begin(), hprev.end(), T(0));
      for (std::size_t t = 0; t < Tn; ++t) {
        for (std::size_t j = 0; j < H; ++j) {
          T a = bv[j];
          for (std::size_t d = 0; d < D; ++d)
            a += wih[j * D + d] * xv[(b * Tn + t) * D + d];
          for (std::size_t k = 0; k < H; ++k) a += whh[j * H + k] * hprev[k];
          hs[(b * Tn + t) * H + j] = std::tanh(a);
        }
        for (std::size_t j = 0; j < H; ++j) hprev[j] = hs[(b * Tn + t) * H + j];
      }
    }

    auto xn = seq.node();
    auto wihn = w_ih.node();
    auto whhn = w_hh.node();
    auto bn = bias.node();
    auto backward_fn = [xn, wihn, whhn, bn, B, Tn, D, H](TensorNode<T>& self) {
      const auto& hs = self.value;
      const auto& xv = xn->value;
      const auto& wih = wihn->value;
      const auto& whh = whhn->value;
      if (wihn->requires_grad) wihn->ensure_grad();
      if (whhn->requires_grad) whhn->ensure_grad();
      if (bn->requires_grad) bn->ensure_grad();
      if (xn->requires_grad) xn->ensure_grad();
      std::vector<T> dh_next(H), da(H);
      for (std::size_t b = 0; b < B; ++b) {
        std::fill(dh_next.begin(), dh_next.end(), T(0));
        for (std::size_t t = Tn; t-- > 0;) {
          for (std::size_t j = 0; j < H; ++j) {
            const T h = hs[(b * Tn + t) * H + j];
            const T dh = self.grad[(b * Tn + t) * H + j] + dh_next[j];
            da[j] = dh * (T(1) - h * h);
          }
          if (bn->requires_grad)
            for (std::size_t j = 0; j < H; ++j) bn->grad[j] += da[j];
          if (wihn->requires_grad)
            for (std::size_t j = 0; j < H; ++j)
              for (std::size_t d = 0; d < D; ++d)
                wihn->grad[j * D + d] += da[j] * xv[(b * Tn + t) * D + d];
          if (xn->requires_grad)
            for (std::size_t j = 0; j < H; ++j)
              for (std::size_t d = 0; d < D; ++d)
                xn->grad[(b * Tn + t) * D + d] += da[j] * wih[j * D + d];
          if (t > 0) {
            if (whhn->requires_grad)
              for (std::size_t j = 0; j < H; ++j)
                for (std::size_t k = 0; k < H; ++k)
                  whhn->grad[j * H + k] +=
                      da[j] * hs[(b * Tn + t - 1) * H + k];
            for (std::size_t k = 0; k < H; ++k) {
              T s = T(0);
              for (std::size_t j = 0; j < H; ++j) s += da[j] * whh[j * H + k];
              dh_next[k] = s;
            }
          }
        }
      }
    };
    return Tensor<T>(detail::make_node<T>({B, Tn, H}, std::move(hs),
                                          {xn, wihn, whhn, bn}, backward_fn));
  }

  void collect(const std::string& prefix, ParamList<T>& out) {
    out.push_back({prefix + ".w_ih", w_ih});
    out.push_back({prefix + ".w_hh", w_hh});
    out.push_back({prefix + ".bias", bias});
  }
};

// ---- Adam optimizer ----

template <class T>
class Adam {
 public:
  Adam() = default;
  Adam(ParamList<T> params, double lr, double beta1 = 0.9,
       double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)),
        lr_(static_cast<T>(lr)),
        beta1_(static_cast<T>(beta1)),
        beta2_(static_cast<T>(beta2)),
        eps_(static_cast<T>(eps)) {
    for (auto& p : params_) {
      m_.emplace_back(p.tensor.size(), T(0));
      v_.emplace_back(p.tensor.size(), T(0));
    }
  }

  void step() {
    ++step_count_;
    const T bc1 = T(1) - std::pow(beta1_, static_cast<T>(step_count_));
    const T bc2 = T(1) - std::pow(beta2_, static_cast<T>(step_count_));
    for (std::size_t pi = 0; pi < params_.size(); ++pi) {
      auto& p = params_[pi].tensor;
      if (!p.has_grad())
        throw contract_error("adam_step: missing gradient for parameter " +
                             params_[pi].name);
      const auto& g = p.grad();
      auto& val = p.value();
      auto& m = m_[pi];
      auto& v = v_[pi];
      for (std::size_t i = 0; i < val.size(); ++i) {
        m[i] = beta1_ * m[i] + (T(1) - beta1_) * g[i];
        v[i] = beta2_ * v[i] + (T(1) - beta2_) * g[i] * g[i];
        const T mhat = m[i] / bc1;
        const T vhat = v[i] / bc2;
        val[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

  void zero_grads() { mapu::zero_grads(params_); }
  std::size_t step_count() const { return step_count_; }
  const ParamList<T>& params() const { return params_; }

 private:
  ParamList<T> params_;
  T lr_ = T(0), beta1_ = T(0.9), beta2_ = T(0.999), eps_ = T(1e-8);
  std::size_t step_count_ = 0;
  std::vector<std::vector<T>> m_, v_;
};

}  // namespace mapu
