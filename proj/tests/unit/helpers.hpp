#pragma once

#include <functional>
#include <random>

#include "autt/autodiff.hpp"
#include "autt/gradcheck.hpp"
#include "autt/tensor.hpp"

namespace autt::testing {

using VarFn = std::function<Var(Tape&, const Var&)>;

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  return Tensor::uniform(std::move(shape), lo, hi, rng);
}

/// Worst relative error between the tape gradient and central differences of
/// sum(f(x) * R) for a fixed random R, so the whole Jacobian is exercised.
inline double jacobian_error(const VarFn& f, const Tensor& x, std::mt19937_64& rng,
                             double eps = 1e-6) {
  Tensor probe;
  {
    Tape t(false);
    probe = random_tensor(f(t, t.constant(x)).shape(), rng);
  }
  auto scalar = [&](Tape& t, const Var& v) { return sum_all(mul(f(t, v), t.constant(probe))); };
  Tape tape;
  Var leaf = tape.parameter(x);
  Tensor analytic = tape.backward(scalar(tape, leaf)).of(leaf);
  Tensor numeric = finite_diff_gradient(
      [&](const Tensor& p) {
        Tape t(false);
        return scalar(t, t.constant(p)).value().item();
      },
      x, eps);
  return compare_gradients(analytic, numeric, 1e-6).max_relative_error;
}

}  // namespace autt::testing
