#include "autt/ttt.hpp"

#include <cmath>
#include <vector>

#include "autt/error.hpp"

namespace autt {
namespace {

void require_finite(const Tensor& t, const char* name) {
  if (!t.all_finite()) throw ConfigError(std::string("TTT parameter ") + name + " is not finite");
}

template <class T>
void check_finite_state(std::span<const T> W, std::size_t token) {
  for (T w : W)
    if (!std::isfinite(static_cast<double>(w)))
      throw DivergenceError("TTT scan diverged at token " + std::to_string(token),
                            static_cast<long>(token));
}

// Core recurrence for one head. `emit` receives (token, state, output q-product).
template <class T, class Emit>
void scan_head(std::span<const T> tokens, std::size_t length, const ScanKernelArgs<T>& a,
               std::size_t head, std::size_t b, bool sequential, Emit&& emit) {
  const std::size_t D = a.dim;
  const std::size_t dh = D / a.heads;
  const std::size_t row0 = head * dh;
  std::vector<T> W(a.W0.begin() + static_cast<std::ptrdiff_t>(row0 * dh),
                   a.W0.begin() + static_cast<std::ptrdiff_t>((row0 + dh) * dh));
  std::vector<T> k(dh), v(dh), q(dh), r(dh), z(dh);
  std::vector<T> Wb(dh * dh), G(dh * dh), Wt(dh * dh);

  auto project = [&](std::size_t t) {
    const T* x = tokens.data() + t * D;
    for (std::size_t i = 0; i < dh; ++i) {
      const T* tk = a.theta_K.data() + (row0 + i) * D;
      const T* tv = a.theta_V.data() + (row0 + i) * D;
      const T* tq = a.theta_Q.data() + (row0 + i) * D;
      T ak = 0, av = 0, aq = 0;
      for (std::size_t d = 0; d < D; ++d) {
        ak += tk[d] * x[d];
        av += tv[d] * x[d];
        aq += tq[d] * x[d];
      }
      k[i] = ak;
      v[i] = av;
      q[i] = aq;
    }
  };
  auto residual = [&](const std::vector<T>& state) {
    for (std::size_t i = 0; i < dh; ++i) {
      T acc = 0;
      for (std::size_t p = 0; p < dh; ++p) acc += state[i * dh + p] * k[p];
      r[i] = acc - v[i];
    }
  };
  auto query = [&](const std::vector<T>& state) {
    for (std::size_t i = 0; i < dh; ++i) {
      T acc = 0;
      for (std::size_t p = 0; p < dh; ++p) acc += state[i * dh + p] * q[p];
      z[i] = acc;
    }
  };

  if (sequential) {
    for (std::size_t t = 0; t < length; ++t) {
      project(t);
      residual(W);
      for (std::size_t i = 0; i < dh; ++i)
        for (std::size_t j = 0; j < dh; ++j) {
          const T g = (r[i] * k[j]) * T(2);
          W[i * dh + j] = W[i * dh + j] - a.eta * g;
        }
      check_finite_state<T>(W, t);
      query(W);
      emit(t, std::span<const T>(W), std::span<const T>(z));
    }
    return;
  }

  for (std::size_t start = 0; start < length; start += b) {
    const std::size_t stop = std::min(length, start + b);
    Wb = W;
    for (std::size_t t = start; t < stop; ++t) {
      project(t);
      residual(Wb);
      for (std::size_t i = 0; i < dh; ++i)
        for (std::size_t j = 0; j < dh; ++j) {
          const T g = (r[i] * k[j]) * T(2);
          T& acc = G[i * dh + j];
          acc = t == start ? g : acc + g;
          Wt[i * dh + j] = Wb[i * dh + j] - a.eta * acc;
        }
      check_finite_state<T>(Wt, t);
      query(Wt);
      emit(t, std::span<const T>(Wt), std::span<const T>(z));
    }
    W = Wt;
  }
}

ScanKernelArgs<double> kernel_args(const TTTLayerParams& p) {
  return ScanKernelArgs<double>{p.W0.data(),      p.theta_K.data(), p.theta_V.data(),
                                p.theta_Q.data(), p.theta_O.data(), p.eta.item(),
                                ttt_model_dim(p), ttt_heads(p)};
}

Tensor scan_tensor(const Tensor& tokens, const TTTLayerParams& p, std::size_t b, bool sequential,
                   std::vector<ScanState>* trace) {
  validate(p);
  const std::size_t D = ttt_model_dim(p);
  if (tokens.rank() != 2 || tokens.dim(1) != D)
    throw ShapeError("TTT scan: tokens " + shape_string(tokens.shape()) +
                     " do not match model dim " + std::to_string(D));
  if (b == 0) throw ConfigError("TTT scan: mini-batch size must be >= 1");
  const std::size_t L = tokens.dim(0);
  const std::size_t H = ttt_heads(p), dh = ttt_head_dim(p);
  const auto args = kernel_args(p);
  Tensor zcat({L, H * dh});
  if (trace) trace->assign(L, ScanState{Tensor({H * dh, dh}), 0});
  for (std::size_t h = 0; h < H; ++h) {
    scan_head<double>(tokens.data(), L, args, h, b, sequential,
                      [&](std::size_t t, std::span<const double> W, std::span<const double> z) {
                        for (std::size_t i = 0; i < dh; ++i) zcat.at(t, h * dh + i) = z[i];
                        if (trace) {
                          auto& st = (*trace)[t];
                          st.step = t + 1;
                          std::copy(W.begin(), W.end(),
                                    st.W.data().begin() + static_cast<std::ptrdiff_t>(h * dh * dh));
                        }
                      });
  }
  Tensor out({L, D});
  for (std::size_t t = 0; t < L; ++t)
    for (std::size_t o = 0; o < D; ++o) {
      double acc = 0.0;
      for (std::size_t c = 0; c < H * dh; ++c) acc += p.theta_O.at(o, c) * zcat.at(t, c);
      out.at(t, o) = acc;
    }
  return out;
}

}  // namespace

std::size_t ttt_heads(const TTTLayerParams& p) { return p.W0.dim(0) / p.W0.dim(1); }
std::size_t ttt_head_dim(const TTTLayerParams& p) { return p.W0.dim(1); }
std::size_t ttt_model_dim(const TTTLayerParams& p) { return p.theta_K.dim(1); }

void validate(const TTTLayerParams& p) {
  if (p.W0.rank() != 2 || p.W0.dim(0) % p.W0.dim(1) != 0)
    throw ShapeError("TTT W0 must be [heads*head_dim, head_dim], got " + shape_string(p.W0.shape()));
  const std::size_t hd = p.W0.dim(0);
  const std::size_t D = p.theta_K.rank() == 2 ? p.theta_K.dim(1) : 0;
  for (const Tensor* t : {&p.theta_K, &p.theta_V, &p.theta_Q})
    if (t->shape() != Shape{hd, D})
      throw ShapeError("TTT view projection must be " + shape_string({hd, D}) + ", got " +
                       shape_string(t->shape()));
  if (p.theta_O.shape() != Shape{D, hd})
    throw ShapeError("TTT theta_O must be " + shape_string({D, hd}) + ", got " +
                     shape_string(p.theta_O.shape()));
  if (hd != D) throw ShapeError("TTT heads*head_dim must equal the model dim");
  if (p.eta.numel() != 1) throw ShapeError("TTT eta must be a single value");
  require_finite(p.W0, "W0");
  require_finite(p.theta_K, "theta_K");
  require_finite(p.theta_V, "theta_V");
  require_finite(p.theta_Q, "theta_Q");
  require_finite(p.theta_O, "theta_O");
  if (!std::isfinite(p.eta.item()) || p.eta.item() < 0.0)
    throw ConfigError("TTT eta must be finite and non-negative");
}

TTTLayerParams init_ttt_params(std::size_t dim, std::size_t heads, const TTTInit& init,
                               std::mt19937_64& rng) {
  if (heads == 0 || dim % heads != 0)
    throw ConfigError("TTT: dim " + std::to_string(dim) + " not divisible by heads " +
                      std::to_string(heads));
  const std::size_t dh = dim / heads;
  const double s = 1.0 / std::sqrt(static_cast<double>(dim));
  TTTLayerParams p;
  p.W0 = init.w0_std > 0.0 ? Tensor::normal({dim, dh}, init.w0_std, rng) : Tensor({dim, dh});
  p.theta_K = Tensor::normal({dim, dim}, s, rng);
  p.theta_V = Tensor::normal({dim, dim}, s, rng);
  p.theta_Q = Tensor::normal({dim, dim}, s, rng);
  p.theta_O = Tensor::normal({dim, dim}, s, rng);
  p.eta = Tensor::scalar(init.eta).reshaped({1, 1});
  return p;
}

TTTLayerParams zero_ttt_params(std::size_t dim, std::size_t heads, double eta) {
  if (heads == 0 || dim % heads != 0) throw ConfigError("TTT: dim not divisible by heads");
  const std::size_t dh = dim / heads;
  return TTTLayerParams{Tensor({dim, dh}), Tensor({dim, dim}), Tensor({dim, dim}),
                        Tensor({dim, dim}), Tensor({dim, dim}), Tensor::filled({1, 1}, eta)};
}

TTTLayerParams identity_ttt_params(std::size_t dim, double eta, bool w0_identity) {
  return TTTLayerParams{w0_identity ? Tensor::identity(dim) : Tensor({dim, dim}),
                        Tensor::identity(dim),
                        Tensor::identity(dim),
                        Tensor::identity(dim),
                        Tensor::identity(dim),
                        Tensor::filled({1, 1}, eta)};
}

Views project_views(const Tensor& x, const TTTLayerParams& p) {
  validate(p);
  const std::size_t D = ttt_model_dim(p);
  if (x.numel() != D)
    throw ShapeError("project_views: token " + shape_string(x.shape()) + " does not have dim " +
                     std::to_string(D));
  const std::size_t H = ttt_heads(p), dh = ttt_head_dim(p);
  Views out{Tensor({H, dh}), Tensor({H, dh}), Tensor({H, dh})};
  for (std::size_t r = 0; r < H * dh; ++r) {
    double ak = 0, aq = 0, av = 0;
    for (std::size_t d = 0; d < D; ++d) {
      ak += p.theta_K.at(r, d) * x[d];
      av += p.theta_V.at(r, d) * x[d];
      aq += p.theta_Q.at(r, d) * x[d];
    }
    out.k[r] = ak;
    out.v[r] = av;
    out.q[r] = aq;
  }
  return out;
}

namespace {
void check_inner_shapes(const Tensor& W, const Tensor& k, const Tensor& v, const char* op) {
  if (W.rank() != 2 || W.dim(0) != W.dim(1) || k.numel() != W.dim(1) || v.numel() != W.dim(0))
    throw ShapeError(std::string(op) + ": W " + shape_string(W.shape()) + ", k " +
                     shape_string(k.shape()) + ", v " + shape_string(v.shape()) +
                     " do not conform");
}
}  // namespace

double inner_loss(const Tensor& W, const Tensor& k, const Tensor& v) {
  check_inner_shapes(W, k, v, "inner_loss");
  const std::size_t n = W.dim(0);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t p = 0; p < n; ++p) acc += W.at(i, p) * k[p];
    const double r = acc - v[i];
    loss += r * r;
  }
  return loss;
}

Tensor inner_grad(const Tensor& W, const Tensor& k, const Tensor& v) {
  check_inner_shapes(W, k, v, "inner_grad");
  const std::size_t n = W.dim(0);
  Tensor g({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t p = 0; p < n; ++p) acc += W.at(i, p) * k[p];
    const double r = acc - v[i];
    for (std::size_t j = 0; j < n; ++j) g.at(i, j) = (r * k[j]) * 2.0;
  }
  return g;
}

Tensor ttt_sequential_scan(const Tensor& tokens, const TTTLayerParams& p,
                           std::vector<ScanState>* trace) {
  return scan_tensor(tokens, p, 1, true, trace);
}

Tensor ttt_minibatch_scan(const Tensor& tokens, const TTTLayerParams& p, std::size_t b,
                          std::vector<ScanState>* trace) {
  return scan_tensor(tokens, p, b, false, trace);
}

Var ttt_scan(const Var& tokens, const TTTLayerVars& p, std::size_t b) {
  if (b == 0) throw ConfigError("TTT scan: mini-batch size must be >= 1");
  const std::size_t D = p.theta_K.dim(1);
  const std::size_t dh = p.W0.dim(1);
  const std::size_t H = p.W0.dim(0) / dh;
  if (tokens.shape().size() != 2 || tokens.dim(1) != D)
    throw ShapeError("TTT scan: tokens " + shape_string(tokens.shape()) +
                     " do not match model dim " + std::to_string(D));
  const std::size_t L = tokens.dim(0);

  // [H*dh, L]: column t holds the view of token t.
  const Var K = matmul(p.theta_K, transpose(tokens));
  const Var V = matmul(p.theta_V, transpose(tokens));
  const Var Q = matmul(p.theta_Q, transpose(tokens));

  std::vector<Var> head_outputs;
  head_outputs.reserve(H);
  std::vector<Var> z(L);
  for (std::size_t h = 0; h < H; ++h) {
    const Var Kh = slice_rows(K, h * dh, dh);
    const Var Vh = slice_rows(V, h * dh, dh);
    const Var Qh = slice_rows(Q, h * dh, dh);
    Var W = slice_rows(p.W0, h * dh, dh);
    for (std::size_t start = 0; start < L; start += b) {
      const std::size_t stop = std::min(L, start + b);
      const Var Wb = W;
      Var G;
      for (std::size_t t = start; t < stop; ++t) {
        const Var k = slice_cols(Kh, t, 1);
        const Var r = sub(matmul(Wb, k), slice_cols(Vh, t, 1));
        const Var g = scale(matmul(r, transpose(k)), 2.0);
        G = t == start ? g : add(G, g);
        W = sub(Wb, mul(p.eta, G));
        if (!W.value().all_finite())
          throw DivergenceError("TTT scan diverged at token " + std::to_string(t),
                                static_cast<long>(t));
        z[t] = matmul(W, slice_cols(Qh, t, 1));
      }
    }
    head_outputs.push_back(concat_cols(z));
  }
  const Var zcat = concat_rows(head_outputs);  // [H*dh, L]
  return transpose(matmul(p.theta_O, zcat));
}

template <class T>
void ttt_scan_kernel(std::span<const T> tokens, std::size_t length, const ScanKernelArgs<T>& args,
                     std::size_t b, bool sequential, std::span<T> out) {
  const std::size_t D = args.dim, H = args.heads, dh = D / H;
  if (b == 0) throw ConfigError("TTT scan: mini-batch size must be >= 1");
  if (tokens.size() != length * D || out.size() != length * D)
    throw ShapeError("ttt_scan_kernel: buffer sizes do not match length x dim");
  std::vector<T> zcat(length * D);
  for (std::size_t h = 0; h < H; ++h)
    scan_head<T>(tokens, length, args, h, b, sequential,
                 [&](std::size_t t, std::span<const T>, std::span<const T> z) {
                   std::copy(z.begin(), z.end(),
                             zcat.begin() + static_cast<std::ptrdiff_t>(t * D + h * dh));
                 });
  for (std::size_t t = 0; t < length; ++t)
    for (std::size_t o = 0; o < D; ++o) {
      T acc = 0;
      const T* row = args.theta_O.data() + o * D;
      const T* zt = zcat.data() + t * D;
      for (std::size_t c = 0; c < D; ++c) acc += row[c] * zt[c];
      out[t * D + o] = acc;
    }
}

template void ttt_scan_kernel<float>(std::span<const float>, std::size_t,
                                     const ScanKernelArgs<float>&, std::size_t, bool,
                                     std::span<float>);
template void ttt_scan_kernel<double>(std::span<const double>, std::size_t,
                                      const ScanKernelArgs<double>&, std::size_t, bool,
                                      std::span<double>);

}  // namespace autt
