#include "autt/losses.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "autt/error.hpp"

namespace autt {
namespace {

Tensor row_of(std::span<const double> values) {
  return Tensor({1, values.size()}, std::vector<double>(values.begin(), values.end()));
}

void check_batch(std::size_t n, std::span<const double> y, const LossConfig& cfg) {
  if (y.size() != n) throw ShapeError("loss: label count does not match prediction count");
  if (cfg.rates.size() != n)
    throw ShapeError("loss: " + std::to_string(cfg.rates.size()) + " occurrence rates for " +
                     std::to_string(n) + " AUs");
}

}  // namespace

void LossConfig::validate() const {
  if (rates.empty()) throw ConfigError("loss: occurrence rates are required");
  for (double r : rates)
    if (!(r > 0.0 && r <= 1.0)) throw ConfigError("loss: occurrence rates must lie in (0, 1]");
  if (!(margin >= 0.0 && margin <= 1.0)) throw ConfigError("loss: margin must lie in [0, 1]");
  if (!(b_left <= b_right)) throw ConfigError("loss: B_L must not exceed B_R");
  if (!(epsilon > 0.0)) throw ConfigError("loss: epsilon must be positive");
  if (lambda_mdwa < 0.0 || lambda_wdi < 0.0 || lambda_mse < 0.0)
    throw ConfigError("loss: lambdas must be non-negative");
}

std::vector<double> occurrence_weights(std::span<const double> rates) {
  double total = 0.0;
  for (double r : rates) {
    if (!(r > 0.0)) throw ConfigError("occurrence_weights: rates must be positive");
    total += 1.0 / r;
  }
  const auto n = static_cast<double>(rates.size());
  std::vector<double> w;
  w.reserve(rates.size());
  for (double r : rates) w.push_back(n * (1.0 / r) / total);
  return w;
}

double gamma_of(double rate, double b_left, double b_right) {
  return b_left + (b_right - b_left) * rate;
}

double truncate_margin(double p, double margin) { return std::max(p - margin, 0.0); }

Var mdwa_loss(const Var& p, std::span<const double> y, const LossConfig& cfg) {
  const std::size_t n = p.numel();
  check_batch(n, y, cfg);
  Tape& tape = p.tape();
  std::vector<double> gamma, absent;
  for (std::size_t i = 0; i < n; ++i) {
    gamma.push_back(gamma_of(cfg.rates[i], cfg.b_left, cfg.b_right));
    absent.push_back(1.0 - y[i]);
  }
  const auto omega = occurrence_weights(cfg.rates);
  const Var pr = reshape(p, {1, n});
  const Var yv = tape.constant(row_of(y));
  const Var negv = tape.constant(row_of(absent));
  const Var pm = max_const(add_scalar(pr, -cfg.margin), 0.0);
  const Var focus = exp(mul(tape.constant(row_of(gamma)), log(max_const(pm, kLogFloor))));
  const Var log_neg = log(max_const(add_scalar(neg(pm), 1.0), kLogFloor));
  const Var positive = mul(yv, log(max_const(pr, kLogFloor)));
  const Var negative = mul(negv, mul(focus, log_neg));
  const Var weighted = mul(tape.constant(row_of(omega)), add(positive, negative));
  return scale(sum_all(weighted), -1.0 / static_cast<double>(n));
}

Var wdi_loss(const Var& p, std::span<const double> y, const LossConfig& cfg) {
  const std::size_t n = p.numel();
  check_batch(n, y, cfg);
  Tape& tape = p.tape();
  std::vector<double> y2;
  for (double v : y) y2.push_back(v * v + cfg.epsilon);
  const auto omega = occurrence_weights(cfg.rates);
  const Var pr = reshape(p, {1, n});
  const Var numer = add_scalar(scale(mul(tape.constant(row_of(y)), pr), 2.0), cfg.epsilon);
  const Var denom = add(mul(pr, pr), tape.constant(row_of(y2)));
  const Var dice = add_scalar(neg(div(numer, denom)), 1.0);
  return scale(sum_all(mul(tape.constant(row_of(omega)), dice)), 1.0 / static_cast<double>(n));
}

Var mse_heatmap_loss(const Var& m_pred, const Var& m_true) {
  if (m_pred.shape() != m_true.shape())
    throw ShapeError("mse_heatmap_loss: " + shape_string(m_pred.shape()) + " vs " +
                     shape_string(m_true.shape()));
  const Var diff = sub(m_pred, m_true);
  return mean_all(mul(diff, diff));
}

Var total_loss(const Var& p, std::span<const double> y, const Var& m_pred, const Var& m_true,
               const LossConfig& cfg) {
  Var total = scale(mdwa_loss(p, y, cfg), cfg.lambda_mdwa);
  total = add(total, scale(wdi_loss(p, y, cfg), cfg.lambda_wdi));
  return add(total, scale(mse_heatmap_loss(m_pred, m_true), cfg.lambda_mse));
}

double mdwa_loss(const AUBatch& batch, const LossConfig& cfg) {
  Tape tape(false);
  return mdwa_loss(tape.constant(row_of(batch.p)), batch.y, cfg).value().item();
}

double wdi_loss(const AUBatch& batch, const LossConfig& cfg) {
  Tape tape(false);
  return wdi_loss(tape.constant(row_of(batch.p)), batch.y, cfg).value().item();
}

double mse_heatmap_loss(const Tensor& m_pred, const Tensor& m_true) {
  Tape tape(false);
  return mse_heatmap_loss(tape.constant(m_pred), tape.constant(m_true)).value().item();
}

double total_loss(const AUBatch& batch, const LossConfig& cfg) {
  Tape tape(false);
  return total_loss(tape.constant(row_of(batch.p)), batch.y, tape.constant(batch.m_pred),
                    tape.constant(batch.m_true), cfg)
      .value()
      .item();
}

std::vector<double> predict(std::span<const double> logits) {
  std::vector<double> out;
  out.reserve(logits.size());
  for (double z : logits) out.push_back(1.0 / (1.0 + std::exp(-z)));
  return out;
}

F1Report f1_scores(const std::vector<std::vector<double>>& preds,
                   const std::vector<std::vector<int>>& labels, double threshold,
                   std::vector<int> au_ids) {
  if (preds.empty()) throw Error("f1_scores: no samples");
  if (preds.size() != labels.size())
    throw ShapeError("f1_scores: " + std::to_string(preds.size()) + " predictions vs " +
                     std::to_string(labels.size()) + " labels");
  const std::size_t n = preds.front().size();
  if (au_ids.empty())
    for (std::size_t i = 0; i < n; ++i) au_ids.push_back(static_cast<int>(i + 1));
  if (au_ids.size() != n) throw ShapeError("f1_scores: AU id count mismatch");
  std::vector<long> tp(n), fp(n), fn(n);
  for (std::size_t s = 0; s < preds.size(); ++s) {
    if (preds[s].size() != n || labels[s].size() != n)
      throw ShapeError("f1_scores: sample " + std::to_string(s) + " has the wrong AU count");
    for (std::size_t i = 0; i < n; ++i) {
      const bool predicted = preds[s][i] >= threshold;
      const bool actual = labels[s][i] != 0;
      if (predicted && actual) ++tp[i];
      if (predicted && !actual) ++fp[i];
      if (!predicted && actual) ++fn[i];
    }
  }
  F1Report report;
  report.au_ids = std::move(au_ids);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const long denom = 2 * tp[i] + fp[i] + fn[i];
    const double f = denom == 0 ? 1.0 : 2.0 * static_cast<double>(tp[i]) / static_cast<double>(denom);
    report.f1.push_back(f);
    total += f;
  }
  report.average = total / static_cast<double>(n);
  return report;
}

std::string F1Report::table() const {
  std::ostringstream out;
  char buf[64];
  out << "AU      F1\n";
  for (std::size_t i = 0; i < f1.size(); ++i) {
    std::snprintf(buf, sizeof buf, "AU%-4d  %.4f\n", au_ids[i], f1[i]);
    out << buf;
  }
  std::snprintf(buf, sizeof buf, "Avg     %.4f\n", average);
  out << buf;
  return out.str();
}

std::string F1Report::machine_lines() const {
  std::ostringstream out;
  char buf[64];
  for (std::size_t i = 0; i < f1.size(); ++i) {
    std::snprintf(buf, sizeof buf, "f1.%d=%.4f\n", au_ids[i], f1[i]);
    out << buf;
  }
  std::snprintf(buf, sizeof buf, "f1.avg=%.4f\n", average);
  out << buf;
  return out.str();
}

}  // namespace autt
