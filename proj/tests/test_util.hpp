#pragma once

// Shared test helpers: random tensors and the central finite-difference
// gradient oracle (64-bit, h = 1e-5). The oracle only uses forward
// evaluation, so it stays independent of every backward implementation it
// checks.

#include <cmath>
#include <functional>
#include <vector>

#include "mapu/rng.hpp"
#include "mapu/tensor.hpp"

namespace testutil {

inline mapu::Tensor<double> random_tensor(mapu::Shape shape, mapu::Rng& rng,
                                          bool requires_grad = true,
                                          double scale = 1.0) {
  std::vector<double> v(mapu::numel(shape));
  for (auto& x : v) x = scale * rng.normal();
  return mapu::Tensor<double>(std::move(shape), std::move(v), requires_grad);
}

// Central finite differences of a scalar-valued forward function with
// respect to one flat parameter buffer.
inline std::vector<double> finite_diff(
    std::vector<double>& param, const std::function<double()>& forward,
    double h = 1e-5) {
  std::vector<double> grad(param.size());
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double orig = param[i];
    param[i] = orig + h;
    const double fp = forward();
    param[i] = orig - h;
    const double fm = forward();
    param[i] = orig;
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

inline double max_rel_err(const std::vector<double>& got,
                          const std::vector<double>& want) {
  double worst = 0.0;
  for (std::size_t i = 0; i < got.size(); ++i) {
    const double denom = std::max(1.0, std::abs(want[i]));
    worst = std::max(worst, std::abs(got[i] - want[i]) / denom);
  }
  return worst;
}

// Checks autodiff gradients of `loss_fn` (which must rebuild the graph from
// the given leaf tensors on every call) against finite differences.
inline double gradcheck(
    std::vector<mapu::Tensor<double>> leaves,
    const std::function<mapu::Tensor<double>()>& loss_fn) {
  for (auto& l : leaves) l.zero_grad();
  auto loss = loss_fn();
  mapu::backward(loss);
  double worst = 0.0;
  for (auto& leaf : leaves) {
    auto fd = finite_diff(leaf.value(), [&] { return loss_fn().item(); });
    worst = std::max(worst, max_rel_err(leaf.grad(), fd));
  }
  return worst;
}

}  // namespace testutil
