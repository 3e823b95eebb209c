#pragma once

// Wall-time comparison of the TTT scan against quadratic self-attention.

#include <cstdint>
#include <string>
#include <vector>

#include "autt/config.hpp"

namespace autt {

struct BenchConfig {
  std::size_t dim = 64;
  std::size_t heads = 4;
  std::size_t minibatch_b = 14;
  std::vector<std::size_t> lengths{196, 392, 784, 1568};
  std::size_t repeats = 25;  // best of
  std::uint64_t seed = 3;

  void validate() const;
  static BenchConfig from_config(const KeyValueConfig& cfg);
};

struct BenchRow {
  std::size_t length = 0;
  double ttt_seconds = 0.0;
  double attention_seconds = 0.0;
  double ttt_ratio = 0.0;        // time(L) / time(previous L); 0 on the first row
  double attention_ratio = 0.0;
};

/// Single-precision TTT mini-batch scan and single-head softmax attention of
/// the same width, timed per length.
std::vector<BenchRow> bench_scan(const BenchConfig& cfg);
std::string bench_csv(const std::vector<BenchRow>& rows);

/// Softmax(Q K^T / sqrt(d)) V with Q = X Wq, K = X Wk, V = X Wv and output
/// projection Wo. x is [L, D] row-major; weights are [D, D].
void attention_reference(const std::vector<float>& x, std::size_t length, std::size_t dim,
                         const std::vector<float>& wq, const std::vector<float>& wk,
                         const std::vector<float>& wv, const std::vector<float>& wo,
                         std::vector<float>& out);

}  // namespace autt
