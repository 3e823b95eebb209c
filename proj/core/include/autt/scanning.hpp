#pragma once

// Scanning mechanisms over a token sequence laid out as H' x W' patch tokens
// in row-major order followed by one trailing CLS token.

#include <random>
#include <string>

#include "autt/autodiff.hpp"
#include "autt/ttt.hpp"

namespace autt {

struct GridShape {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t cells() const noexcept { return height * width; }
  /// Sequence length including CLS.
  std::size_t tokens() const noexcept { return cells() + 1; }
};

/// Epsilon in the AU scatter-back normalizer.
inline constexpr double kScatterEpsilon = 1e-6;

/// Checks a [N_AU, H', W'] mask: values in [0, 1], matching grid.
void validate_mask(const Tensor& mask, GridShape grid);

template <class T>
struct BiTTTParamsT {
  TTTParamsT<T> forward;
  TTTParamsT<T> backward;
  T mix_w;  // [D, 2D]
  T mix_b;  // [1, D]

  template <class F>
  auto map(F&& f, const std::string& prefix = "") const {
    using U = decltype(f(prefix, mix_w));
    return BiTTTParamsT<U>{forward.map(f, prefix + "fwd."), backward.map(f, prefix + "bwd."),
                           f(prefix + "mix_w", mix_w), f(prefix + "mix_b", mix_b)};
  }
  template <class F>
  void visit(F&& f, const std::string& prefix = "") {
    forward.visit(f, prefix + "fwd.");
    backward.visit(f, prefix + "bwd.");
    f(prefix + "mix_w", mix_w);
    f(prefix + "mix_b", mix_b);
  }
  template <class F>
  void visit(F&& f, const std::string& prefix = "") const {
    forward.visit(f, prefix + "fwd.");
    backward.visit(f, prefix + "bwd.");
    f(prefix + "mix_w", mix_w);
    f(prefix + "mix_b", mix_b);
  }
};

using BiTTTParams = BiTTTParamsT<Tensor>;
using BiTTTVars = BiTTTParamsT<Var>;

BiTTTParams init_bi_ttt_params(std::size_t dim, std::size_t heads, const TTTInit& init,
                               std::mt19937_64& rng);

/// Patch tokens reversed, CLS kept last. seq is [L, D] with L >= 1.
Tensor reverse_tokens(const Tensor& seq);
Var reverse_tokens(const Var& seq);

/// Linear(Cat[TTT_fwd(Z), Reverse(TTT_bwd(Reverse(Z)))]) with block size b.
/// When `use_backward` is false the backward half of the concatenation is
/// zero, which gives the unidirectional variant with the same parameters.
Tensor bi_ttt(const Tensor& seq, const BiTTTParams& p, std::size_t b, bool use_backward = true);
Var bi_ttt(const Var& seq, const BiTTTVars& p, std::size_t b, bool use_backward = true);

/// Mean over all H'*W' positions of mask-weighted patch tokens.
/// patches is [J, D], mask is [N_AU, H', W'] with H'*W' = J; returns [N_AU, D].
Tensor mask_pool(const Tensor& patches, const Tensor& mask);
Var mask_pool(const Var& patches, const Var& mask);

/// AU RoI branch: pool one token per AU, run a forward TTT scan over them in
/// a single block, then scatter back. Returns a [J+1, D] contribution.
Tensor au_roi_ttt(const Tensor& patches, const Tensor& mask, const TTTLayerParams& p);
Var au_roi_ttt(const Var& patches, const Var& mask, const TTTLayerVars& p);

}  // namespace autt
