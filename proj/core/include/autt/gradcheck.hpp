#pragma once

#include <functional>

#include "autt/tensor.hpp"

namespace autt {

using ScalarFn = std::function<double(const Tensor&)>;

/// Central differences (f(x + eps e_i) - f(x - eps e_i)) / (2 eps) for every
/// coordinate of `point`. Throws DivergenceError naming the coordinate when f
/// returns a non-finite value.
Tensor finite_diff_gradient(const ScalarFn& f, const Tensor& point, double eps);

struct GradientComparison {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
};

/// Per-coordinate |a - n| / max(|a|, |n|, floor), reduced by max.
GradientComparison compare_gradients(const Tensor& analytic, const Tensor& numeric,
                                     double floor = 1e-6);

}  // namespace autt
