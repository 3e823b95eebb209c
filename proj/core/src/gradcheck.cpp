#include "autt/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "autt/error.hpp"

namespace autt {

Tensor finite_diff_gradient(const ScalarFn& f, const Tensor& point, double eps) {
  if (!(eps > 0.0)) throw Error("finite_diff_gradient: eps must be positive");
  Tensor x = point;
  Tensor grad(point.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double original = x[i];
    x[i] = original + eps;
    const double fp = f(x);
    x[i] = original - eps;
    const double fm = f(x);
    x[i] = original;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw DivergenceError("finite_diff_gradient: non-finite value at coordinate " +
                                std::to_string(i),
                            static_cast<long>(i));
    grad[i] = (fp - fm) / (2.0 * eps);
  }
  return grad;
}

GradientComparison compare_gradients(const Tensor& analytic, const Tensor& numeric, double floor) {
  if (analytic.shape() != numeric.shape())
    throw ShapeError("compare_gradients: " + shape_string(analytic.shape()) + " vs " +
                     shape_string(numeric.shape()));
  GradientComparison out;
  for (std::size_t i = 0; i < analytic.numel(); ++i) {
    const double a = analytic[i], n = numeric[i];
    const double denom = std::max({std::abs(a), std::abs(n), floor});
    const double err = std::abs(a - n) / denom;
    if (err > out.max_relative_error || i == 0) {
      out.max_relative_error = std::max(out.max_relative_error, err);
      if (err >= out.max_relative_error) {
        out.worst_index = i;
        out.analytic_at_worst = a;
        out.numeric_at_worst = n;
      }
    }
  }
  return out;
}

}  // namespace autt
