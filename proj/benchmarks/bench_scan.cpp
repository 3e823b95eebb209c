#include <benchmark/benchmark.h>

#include <cmath>
#include <random>
#include <vector>

#include "autt/bench.hpp"
#include "autt/ttt.hpp"

namespace {

constexpr std::size_t kDim = 64;
constexpr std::size_t kHeads = 4;
constexpr std::size_t kBlock = 14;

template <class T>
std::vector<T> gaussian(std::size_t n, double scale, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, scale);
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(d(rng));
  return v;
}

template <class T>
void BM_TTTScan(benchmark::State& state) {
  const std::size_t L = static_cast<std::size_t>(state.range(0));
  const bool sequential = state.range(1) != 0;
  const std::size_t dh = kDim / kHeads;
  std::mt19937_64 rng(3);
  const double s = 1.0 / std::sqrt(static_cast<double>(kDim));
  std::vector<T> W0(kHeads * dh * dh, T(0));
  auto tk = gaussian<T>(kHeads * dh * kDim, s, rng), tv = gaussian<T>(kHeads * dh * kDim, s, rng);
  auto tq = gaussian<T>(kHeads * dh * kDim, s, rng), to = gaussian<T>(kDim * kHeads * dh, s, rng);
  auto x = gaussian<T>(L * kDim, 1.0, rng);
  std::vector<T> out(L * kDim);
  const T eta = T(0.5) / static_cast<T>(kBlock * dh);
  autt::ScanKernelArgs<T> args{W0, tk, tv, tq, to, eta, kDim, kHeads};
  for (auto _ : state) {
    autt::ttt_scan_kernel<T>(x, L, args, kBlock, sequential, out);
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(L));
  state.SetComplexityN(static_cast<std::int64_t>(L));
}

void BM_Attention(benchmark::State& state) {
  const std::size_t L = static_cast<std::size_t>(state.range(0));
  std::mt19937_64 rng(3);
  const double s = 1.0 / std::sqrt(static_cast<double>(kDim));
  auto wq = gaussian<float>(kDim * kDim, s, rng), wk = gaussian<float>(kDim * kDim, s, rng);
  auto wv = gaussian<float>(kDim * kDim, s, rng), wo = gaussian<float>(kDim * kDim, s, rng);
  auto x = gaussian<float>(L * kDim, 1.0, rng);
  std::vector<float> out;
  for (auto _ : state) {
    autt::attention_reference(x, L, kDim, wq, wk, wv, wo, out);
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(L));
  state.SetComplexityN(static_cast<std::int64_t>(L));
}

void lengths(benchmark::internal::Benchmark* b, bool with_mode) {
  for (long L : {196, 392, 784, 1568}) {
    if (with_mode) {
      b->Args({L, 0});
    } else {
      b->Arg(L);
    }
  }
}

}  // namespace

BENCHMARK(BM_TTTScan<float>)->Apply([](auto* b) { lengths(b, true); })->Complexity(benchmark::oN)
    ->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_TTTScan<double>)->Apply([](auto* b) { lengths(b, true); })->Complexity(benchmark::oN)
    ->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_TTTScan<float>)->Args({784, 1})->Name("BM_TTTScan<float>/sequential")
    ->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_Attention)->Apply([](auto* b) { lengths(b, false); })->Complexity(benchmark::oNSquared)
    ->Unit(benchmark::kMicrosecond);
BENCHMARK_MAIN();
