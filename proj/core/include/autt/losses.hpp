#pragma once

#include <span>
#include <string>
#include <vector>

#include "autt/autodiff.hpp"
#include "autt/tensor.hpp"

namespace autt {

/// Logs inside the classification losses are taken of max(x, kLogFloor).
inline constexpr double kLogFloor = 1e-7;

struct LossConfig {
  std::vector<double> rates;  // per-AU occurrence rates, (0, 1]
  double margin = 0.1;        // 0.1 for BP4D, 0.15 for DISFA
  double b_left = 1.0;
  double b_right = 2.0;
  double epsilon = 1.0;
  double lambda_mdwa = 1.0;
  double lambda_wdi = 1.0;
  double lambda_mse = 1.0;

  void validate() const;
};

/// w_i = N (1/r_i) / sum_j (1/r_j); the weights sum to N.
std::vector<double> occurrence_weights(std::span<const double> rates);
/// B_L + (B_R - B_L) r.
double gamma_of(double rate, double b_left, double b_right);
/// max(p - m, 0).
double truncate_margin(double p, double margin);

/// One sample: labels, probabilities and the two heatmaps.
struct AUBatch {
  std::vector<double> y;
  std::vector<double> p;
  Tensor m_true;
  Tensor m_pred;
};

double mdwa_loss(const AUBatch& batch, const LossConfig& cfg);
double wdi_loss(const AUBatch& batch, const LossConfig& cfg);
/// Mean squared difference over all entries.
double mse_heatmap_loss(const Tensor& m_pred, const Tensor& m_true);
double total_loss(const AUBatch& batch, const LossConfig& cfg);

// Differentiable forms. Probabilities are [1, N]; labels are 0/1 values.
Var mdwa_loss(const Var& p, std::span<const double> y, const LossConfig& cfg);
Var wdi_loss(const Var& p, std::span<const double> y, const LossConfig& cfg);
Var mse_heatmap_loss(const Var& m_pred, const Var& m_true);
Var total_loss(const Var& p, std::span<const double> y, const Var& m_pred, const Var& m_true,
               const LossConfig& cfg);

/// Elementwise sigmoid of logits.
std::vector<double> predict(std::span<const double> logits);

struct F1Report {
  std::vector<int> au_ids;
  std::vector<double> f1;
  double average = 0.0;

  /// Human-readable table.
  std::string table() const;
  /// `f1.<au>=<value>` per AU and `f1.avg=<value>`, 4 decimals.
  std::string machine_lines() const;
};

/// Per-AU F1 = 2TP / (2TP + FP + FN) with p >= threshold counted positive;
/// an AU with 2TP + FP + FN = 0 scores 1. `preds` and `labels` are indexed
/// [sample][au]. au_ids defaults to 1..N.
F1Report f1_scores(const std::vector<std::vector<double>>& preds,
                   const std::vector<std::vector<int>>& labels, double threshold = 0.5,
                   std::vector<int> au_ids = {});

}  // namespace autt
