#include "autt/scanning.hpp"

#include <cmath>
#include <numeric>

#include "autt/error.hpp"

namespace autt {
namespace {

std::vector<std::size_t> reversal_order(std::size_t length) {
  std::vector<std::size_t> order(length);
  for (std::size_t i = 0; i + 1 < length; ++i) order[i] = length - 2 - i;
  order[length - 1] = length - 1;
  return order;
}

void check_pool_shapes(const Shape& patches, const Shape& mask, const char* op) {
  if (patches.size() != 2 || mask.size() != 3 || mask[1] * mask[2] != patches[0])
    throw ShapeError(std::string(op) + ": mask " + shape_string(mask) + " does not match patches " +
                     shape_string(patches));
}

// [J, N]: mask[i, p] / (sum_i mask[i, p] + eps).
Tensor scatter_weights(const Tensor& mask) {
  const std::size_t N = mask.dim(0), J = mask.dim(1) * mask.dim(2);
  Tensor w({J, N});
  for (std::size_t p = 0; p < J; ++p) {
    double mass = 0.0;
    for (std::size_t i = 0; i < N; ++i) mass += mask[i * J + p];
    for (std::size_t i = 0; i < N; ++i) w.at(p, i) = mask[i * J + p] / (mass + kScatterEpsilon);
  }
  return w;
}

template <class Fn>
Tensor evaluate(Fn&& fn) {
  Tape tape(false);
  return fn(tape).value();
}

template <class P>
auto as_constants(Tape& tape, const P& params) {
  return params.map([&](const std::string&, const Tensor& t) { return tape.constant(t); });
}

}  // namespace

void validate_mask(const Tensor& mask, GridShape grid) {
  if (mask.rank() != 3 || mask.dim(1) != grid.height || mask.dim(2) != grid.width)
    throw ShapeError("AU mask " + shape_string(mask.shape()) + " does not match grid " +
                     std::to_string(grid.height) + "x" + std::to_string(grid.width));
  for (double v : mask.data())
    if (!(v >= 0.0 && v <= 1.0)) throw ConfigError("AU mask values must lie in [0, 1]");
}

BiTTTParams init_bi_ttt_params(std::size_t dim, std::size_t heads, const TTTInit& init,
                               std::mt19937_64& rng) {
  BiTTTParams p;
  p.forward = init_ttt_params(dim, heads, init, rng);
  p.backward = init_ttt_params(dim, heads, init, rng);
  p.mix_w = Tensor::normal({dim, 2 * dim}, 1.0 / std::sqrt(2.0 * static_cast<double>(dim)), rng);
  p.mix_b = Tensor({1, dim});
  return p;
}

Tensor reverse_tokens(const Tensor& seq) {
  return evaluate([&](Tape& t) { return reverse_tokens(t.constant(seq)); });
}

Var reverse_tokens(const Var& seq) {
  if (seq.shape().size() != 2) throw ShapeError("reverse_tokens: expected [L, D]");
  const auto order = reversal_order(seq.dim(0));
  return permute_rows(seq, order);
}

Tensor bi_ttt(const Tensor& seq, const BiTTTParams& p, std::size_t b, bool use_backward) {
  validate(p.forward);
  validate(p.backward);
  return evaluate([&](Tape& t) {
    return bi_ttt(t.constant(seq), as_constants(t, p), b, use_backward);
  });
}

Var bi_ttt(const Var& seq, const BiTTTVars& p, std::size_t b, bool use_backward) {
  const std::size_t D = seq.dim(1);
  if (p.mix_w.shape() != Shape{D, 2 * D} || p.mix_b.shape() != Shape{1, D})
    throw ShapeError("bi_ttt: mix must map 2D -> D, got " + shape_string(p.mix_w.shape()));
  const Var fwd = ttt_scan(seq, p.forward, b);
  Var bwd;
  if (use_backward) {
    bwd = reverse_tokens(ttt_scan(reverse_tokens(seq), p.backward, b));
  } else {
    bwd = seq.tape().constant(Tensor(seq.shape()));
  }
  const Var parts[] = {fwd, bwd};
  return add(matmul(concat_cols(parts), transpose(p.mix_w)), p.mix_b);
}

Tensor mask_pool(const Tensor& patches, const Tensor& mask) {
  return evaluate([&](Tape& t) { return mask_pool(t.constant(patches), t.constant(mask)); });
}

Var mask_pool(const Var& patches, const Var& mask) {
  check_pool_shapes(patches.shape(), mask.shape(), "mask_pool");
  const std::size_t N = mask.dim(0), J = patches.dim(0);
  const Var flat = reshape(mask, {N, J});
  return scale(matmul(flat, patches), 1.0 / static_cast<double>(J));
}

Tensor au_roi_ttt(const Tensor& patches, const Tensor& mask, const TTTLayerParams& p) {
  validate(p);
  return evaluate([&](Tape& t) {
    return au_roi_ttt(t.constant(patches), t.constant(mask), as_constants(t, p));
  });
}

Var au_roi_ttt(const Var& patches, const Var& mask, const TTTLayerVars& p) {
  check_pool_shapes(patches.shape(), mask.shape(), "au_roi_ttt");
  const std::size_t N = mask.dim(0);
  const Var tokens = mask_pool(patches, mask);
  const Var refined = ttt_scan(tokens, p, N);
  Tape& tape = patches.tape();
  const Var weights = tape.constant(scatter_weights(mask.value()));
  const Var spread = matmul(weights, refined);
  const Var cls = matmul(tape.constant(Tensor::filled({1, N}, 1.0 / static_cast<double>(N))), refined);
  const Var parts[] = {spread, cls};
  return concat_rows(parts);
}

}  // namespace autt
