#include "autt/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>
#include <sstream>

#include "autt/error.hpp"
#include "autt/ttt.hpp"

namespace autt {
namespace {

// out[L, N] = a[L, K] * b[K, N]
void matmul(const float* a, const float* b, float* out, std::size_t L, std::size_t K, std::size_t N) {
  std::fill(out, out + L * N, 0.0f);
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t k = 0; k < K; ++k) {
      const float av = a[i * K + k];
      const float* brow = b + k * N;
      float* orow = out + i * N;
      for (std::size_t j = 0; j < N; ++j) orow[j] += av * brow[j];
    }
}

std::vector<float> random_vector(std::size_t n, float scale, std::mt19937_64& rng) {
  std::normal_distribution<float> d(0.0f, scale);
  std::vector<float> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

template <class Fn>
double best_time(std::size_t repeats, Fn&& fn) {
  double best = 1e300;
  for (std::size_t r = 0; r < repeats; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const auto t1 = std::chrono::steady_clock::now();
    best = std::min(best, std::chrono::duration<double>(t1 - t0).count());
  }
  return best;
}

}  // namespace

void BenchConfig::validate() const {
  if (dim == 0 || heads == 0 || dim % heads != 0) throw ConfigError("bench: dim must be divisible by heads");
  if (minibatch_b == 0) throw ConfigError("bench: minibatch_b must be positive");
  if (lengths.empty()) throw ConfigError("bench: at least one length is required");
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    if (lengths[i] == 0) throw ConfigError("bench: lengths must be positive");
    if (i > 0 && lengths[i] <= lengths[i - 1]) throw ConfigError("bench: lengths must be ascending");
  }
  if (repeats == 0) throw ConfigError("bench: repeats must be positive");
}

BenchConfig BenchConfig::from_config(const KeyValueConfig& c) {
  BenchConfig b;
  b.dim = c.get_size("bench.dim", b.dim);
  b.heads = c.get_size("bench.heads", b.heads);
  b.minibatch_b = c.get_size("bench.minibatch_b", b.minibatch_b);
  b.lengths = c.get_sizes("bench.lengths", b.lengths);
  b.repeats = c.get_size("bench.repeats", b.repeats);
  b.seed = static_cast<std::uint64_t>(c.get_long("bench.seed", static_cast<long>(b.seed)));
  b.validate();
  return b;
}

void attention_reference(const std::vector<float>& x, std::size_t L, std::size_t D,
                         const std::vector<float>& wq, const std::vector<float>& wk,
                         const std::vector<float>& wv, const std::vector<float>& wo,
                         std::vector<float>& out) {
  std::vector<float> q(L * D), k(L * D), v(L * D), ctx(L * D, 0.0f), scores(L);
  matmul(x.data(), wq.data(), q.data(), L, D, D);
  matmul(x.data(), wk.data(), k.data(), L, D, D);
  matmul(x.data(), wv.data(), v.data(), L, D, D);
  const float inv = 1.0f / std::sqrt(static_cast<float>(D));
  for (std::size_t i = 0; i < L; ++i) {
    float peak = -1e30f;
    for (std::size_t j = 0; j < L; ++j) {
      float s = 0.0f;
      for (std::size_t d = 0; d < D; ++d) s += q[i * D + d] * k[j * D + d];
      scores[j] = s * inv;
      peak = std::max(peak, scores[j]);
    }
    float total = 0.0f;
    for (auto& s : scores) {
      s = std::exp(s - peak);
      total += s;
    }
    float* row = ctx.data() + i * D;
    for (std::size_t j = 0; j < L; ++j) {
      const float w = scores[j] / total;
      for (std::size_t d = 0; d < D; ++d) row[d] += w * v[j * D + d];
    }
  }
  out.resize(L * D);
  matmul(ctx.data(), wo.data(), out.data(), L, D, D);
}

std::vector<BenchRow> bench_scan(const BenchConfig& cfg) {
  cfg.validate();
  const std::size_t D = cfg.dim, H = cfg.heads, dh = D / H;
  std::mt19937_64 rng(cfg.seed);
  const float s = 1.0f / std::sqrt(static_cast<float>(D));
  const auto W0 = std::vector<float>(H * dh * dh, 0.0f);
  const auto tk = random_vector(H * dh * D, s, rng), tv = random_vector(H * dh * D, s, rng);
  const auto tq = random_vector(H * dh * D, s, rng), to = random_vector(D * H * dh, s, rng);
  const auto wq = random_vector(D * D, s, rng), wk = random_vector(D * D, s, rng);
  const auto wv = random_vector(D * D, s, rng), wo = random_vector(D * D, s, rng);
  // Keep the summed block step well inside the stable range; |k|^2 is about dh.
  const float eta = 0.5f / static_cast<float>(cfg.minibatch_b * dh);
  ScanKernelArgs<float> args{W0, tk, tv, tq, to, eta, D, H};

  std::vector<BenchRow> rows;
  for (std::size_t L : cfg.lengths) {
    const auto x = random_vector(L * D, 1.0f, rng);
    std::vector<float> out(L * D);
    BenchRow row;
    row.length = L;
    row.ttt_seconds = best_time(cfg.repeats, [&] {
      ttt_scan_kernel<float>(x, L, args, cfg.minibatch_b, false, out);
    });
    row.attention_seconds = best_time(cfg.repeats, [&] {
      attention_reference(x, L, D, wq, wk, wv, wo, out);
    });
    if (!rows.empty()) {
      row.ttt_ratio = row.ttt_seconds / rows.back().ttt_seconds;
      row.attention_ratio = row.attention_seconds / rows.back().attention_seconds;
    }
    rows.push_back(row);
  }
  return rows;
}

std::string bench_csv(const std::vector<BenchRow>& rows) {
  std::ostringstream out;
  out << "length,ttt_seconds,attention_seconds,ttt_ratio,attention_ratio\n";
  out.precision(6);
  for (const auto& r : rows)
    out << r.length << ',' << r.ttt_seconds << ',' << r.attention_seconds << ',' << r.ttt_ratio << ','
        << r.attention_ratio << '\n';
  return out.str();
}

}  // namespace autt
