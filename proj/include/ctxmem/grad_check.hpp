#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "ctxmem/tensor.hpp"

namespace ctxmem {

struct GradCheckOptions {
  // Step of the fourth-order central difference stencil.
  long double step = 1e-6L;
};

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences over every coordinate of `params`.
///
/// Returns max |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
/// `loss_fn` must be deterministic; it is re-evaluated four times per
/// coordinate. Gradients of `params` are left holding the analytic values.
template <class T>
T grad_check(const std::function<Tensor<T>()>& loss_fn,
             std::vector<Tensor<T>> params, GradCheckOptions options = {}) {
  for (auto& p : params) p.zero_grad();
  {
    Tensor<T> loss = loss_fn();
    backward(loss);
  }
  const T h = T(options.step);
  auto eval = [&]() {
    NoGradGuard no_grad;
    return loss_fn().item();
  };
  T worst = T(0);
  for (auto& p : params) {
    std::vector<T> analytic(p.size(), T(0));
    if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.begin());
    auto values = p.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const T original = values[i];
      values[i] = original + h;
      const T f1 = eval();
      values[i] = original - h;
      const T fm1 = eval();
      values[i] = original + 2 * h;
      const T f2 = eval();
      values[i] = original - 2 * h;
      const T fm2 = eval();
      values[i] = original;
      const T numeric = (8 * (f1 - fm1) - (f2 - fm2)) / (12 * h);
      const T denom = std::max(T(1e-8), std::abs(analytic[i]) + std::abs(numeric));
      worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace ctxmem
