#pragma once

// TTT-Linear sequence layer.
//
// Each head keeps a hidden state W (head_dim x head_dim) that is itself the
// weight of a linear model f(k; W) = W k. For every token the state takes one
// gradient step on the reconstruction loss |W k - v|^2 with k = theta_K x and
// v = theta_V x, and the token output is W q with q = theta_Q x. Head outputs
// are concatenated and mapped back to the model width by theta_O.
//
// The mini-batch form evaluates every gradient inside a block of b tokens at
// the state reached at the block boundary and sums them.

#include <random>
#include <span>
#include <string>
#include <vector>

#include "autt/autodiff.hpp"
#include "autt/tensor.hpp"

namespace autt {

/// Layer parameters. Per-head matrices are stacked along rows: head j owns
/// rows [j*head_dim, (j+1)*head_dim) of W0, theta_K, theta_V and theta_Q.
template <class T>
struct TTTParamsT {
  T W0;       // [heads*head_dim, head_dim]
  T theta_K;  // [heads*head_dim, D]
  T theta_V;  // [heads*head_dim, D]
  T theta_Q;  // [heads*head_dim, D]
  T theta_O;  // [D, heads*head_dim]
  T eta;      // [1, 1]

  template <class F>
  auto map(F&& f, const std::string& prefix = "") const {
    using U = decltype(f(prefix, W0));
    return TTTParamsT<U>{f(prefix + "W0", W0),           f(prefix + "theta_K", theta_K),
                         f(prefix + "theta_V", theta_V), f(prefix + "theta_Q", theta_Q),
                         f(prefix + "theta_O", theta_O), f(prefix + "eta", eta)};
  }
  template <class F>
  void visit(F&& f, const std::string& prefix = "") {
    f(prefix + "W0", W0);
    f(prefix + "theta_K", theta_K);
    f(prefix + "theta_V", theta_V);
    f(prefix + "theta_Q", theta_Q);
    f(prefix + "theta_O", theta_O);
    f(prefix + "eta", eta);
  }
  template <class F>
  void visit(F&& f, const std::string& prefix = "") const {
    f(prefix + "W0", W0);
    f(prefix + "theta_K", theta_K);
    f(prefix + "theta_V", theta_V);
    f(prefix + "theta_Q", theta_Q);
    f(prefix + "theta_O", theta_O);
    f(prefix + "eta", eta);
  }
};

using TTTLayerParams = TTTParamsT<Tensor>;
using TTTLayerVars = TTTParamsT<Var>;

std::size_t ttt_heads(const TTTLayerParams& p);
std::size_t ttt_head_dim(const TTTLayerParams& p);
std::size_t ttt_model_dim(const TTTLayerParams& p);

/// Checks shapes, finiteness and eta >= 0. Throws ShapeError / ConfigError.
void validate(const TTTLayerParams& p);

struct TTTInit {
  double eta = 1.0;
  /// Standard deviation of the Gaussian W0 initialization; 0 gives zeros.
  double w0_std = 0.0;
};

/// Random projections scaled by 1/sqrt(fan_in) and W0 per `init`.
TTTLayerParams init_ttt_params(std::size_t dim, std::size_t heads, const TTTInit& init,
                               std::mt19937_64& rng);
/// All projections zero, W0 zero.
TTTLayerParams zero_ttt_params(std::size_t dim, std::size_t heads, double eta);
/// Single-head layer with identity projections and identity output map.
TTTLayerParams identity_ttt_params(std::size_t dim, double eta, bool w0_identity);

struct Views {
  Tensor k;  // [heads, head_dim]
  Tensor q;
  Tensor v;
};

/// k = theta_K x, v = theta_V x, q = theta_Q x, split per head.
Views project_views(const Tensor& x, const TTTLayerParams& p);

/// |W k - v|^2. k and v hold head_dim values (any shape with that count).
double inner_loss(const Tensor& W, const Tensor& k, const Tensor& v);
/// 2 (W k - v) k^T, the exact gradient of inner_loss in W.
Tensor inner_grad(const Tensor& W, const Tensor& k, const Tensor& v);

struct ScanState {
  Tensor W;  // [heads*head_dim, head_dim]
  std::size_t step = 0;
};

/// Token-by-token recurrence. tokens is [L, D]; returns [L, D]. When `trace`
/// is given it receives the state after every token.
Tensor ttt_sequential_scan(const Tensor& tokens, const TTTLayerParams& p,
                           std::vector<ScanState>* trace = nullptr);
/// Block-boundary gradients with block size b; b = 1 reproduces the
/// sequential scan exactly.
Tensor ttt_minibatch_scan(const Tensor& tokens, const TTTLayerParams& p, std::size_t b,
                          std::vector<ScanState>* trace = nullptr);

/// Differentiable mini-batch scan on a tape. Gradients flow into every
/// tracked parameter including W0 and eta.
Var ttt_scan(const Var& tokens, const TTTLayerVars& p, std::size_t b);

/// Raw-array form of the scan used by benchmarks at either precision.
/// Layouts match TTTLayerParams; tokens/out are [L, D] row-major.
template <class T>
struct ScanKernelArgs {
  std::span<const T> W0, theta_K, theta_V, theta_Q, theta_O;
  T eta;
  std::size_t dim, heads;
};

template <class T>
void ttt_scan_kernel(std::span<const T> tokens, std::size_t length, const ScanKernelArgs<T>& args,
                     std::size_t b, bool sequential, std::span<T> out);

extern template void ttt_scan_kernel<float>(std::span<const float>, std::size_t,
                                            const ScanKernelArgs<float>&, std::size_t, bool,
                                            std::span<float>);
extern template void ttt_scan_kernel<double>(std::span<const double>, std::size_t,
                                             const ScanKernelArgs<double>&, std::size_t, bool,
                                             std::span<double>);

}  // namespace autt
