#pragma once

#include <cmath>
#include <string>

#include "patchlens/errors.hpp"
#include "patchlens/tensor.hpp"

namespace patchlens {

// Central-difference verification harness for hand-written backward kernels.
// Perturbs every element of x by +-h, compares the numeric estimate against
// the supplied analytic gradient and returns the worst relative error, with
// denominator max(|analytic|, |numeric|, 1e-8).
template <typename T, typename F>
T grad_check(F&& f, Tensor<T> x, const Tensor<T>& analytic, T h) {
  if (h <= T(0)) throw ConfigError("grad_check: h must be positive");
  require_shape(analytic, x.shape, "grad_check analytic gradient");
  T worst = T(0);
  for (int64_t i = 0; i < x.numel(); ++i) {
    const T orig = x.data[i];
    x.data[i] = orig + h;
    const T fp = f(x);
    x.data[i] = orig - h;
    const T fm = f(x);
    x.data[i] = orig;
    if (!std::isfinite(static_cast<double>(fp)) || !std::isfinite(static_cast<double>(fm)))
      throw ShapeError("grad_check: function value is not finite at element " + std::to_string(i));
    const T numeric = (fp - fm) / (T(2) * h);
    const T a = analytic.data[i];
    const T denom = std::max({std::abs(a), std::abs(numeric), T(1e-8)});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  return worst;
}

}  // namespace patchlens
