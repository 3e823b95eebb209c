#pragma once

// Outer training loop, evaluation and the k-fold / cross-domain protocols.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "autt/backbone.hpp"
#include "autt/config.hpp"
#include "autt/data.hpp"
#include "autt/gradcheck.hpp"
#include "autt/losses.hpp"

namespace autt {

struct OptimConfig {
  std::string method = "momentum";  // or "adam"
  double lr = 0.05;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 0.0;  // global-norm clip; 0 disables
  std::size_t steps = 300;
  std::size_t batch_size = 8;

  void validate() const;
};

struct TrainConfig {
  ModelConfig model;
  LossConfig loss;  // empty rates are filled from the training labels
  OptimConfig optim;
  std::size_t folds = 3;
  double threshold = 0.5;
  std::uint64_t seed = 7;
  std::size_t threads = 1;

  void validate() const;
  static TrainConfig from_config(const KeyValueConfig& cfg);
  void write_to(KeyValueConfig& cfg) const;
};

/// Occurrence rates for the loss, clamped to [0.05, 0.95] so every AU keeps a
/// finite weight.
std::vector<double> loss_rates(const Dataset& data);

/// Rejects datasets whose image size, channel count or AU count differ from
/// the model.
void check_compatible(const ModelConfig& model, const Dataset& data);

struct StepStats {
  std::size_t step = 0;
  double loss = 0.0;
};

struct TrainResult {
  ModelParams params;
  std::vector<double> loss_curve;  // mean batch loss before each update
  LossConfig loss;                 // with the rates actually used
};

using ProgressFn = std::function<void(const StepStats&)>;

/// Per-sample loss and parameter gradient.
struct SampleGradient {
  double loss = 0.0;
  ModelParams grad;
};
SampleGradient sample_gradient(const ModelParams& params, const ModelConfig& model,
                               const LossConfig& loss, const Sample& sample);

struct GroupCheck {
  std::string name;
  std::size_t size = 0;
  GradientComparison comparison;
};

/// Tape gradient of the total loss on one sample against central finite
/// differences, per parameter tensor. Parameters excluded from training
/// (eta without model.train_eta) are skipped.
std::vector<GroupCheck> check_model_gradients(const ModelParams& params, const ModelConfig& model,
                                              const LossConfig& loss, const Sample& sample,
                                              double eps = 1e-5);

/// Mini-batch training with momentum SGD or Adam. Batches are drawn from a
/// generator seeded by cfg.seed; per-sample gradients are computed on
/// cfg.threads workers and summed in sample order. Throws DivergenceError
/// with the step index when the loss becomes non-finite.
TrainResult train(const TrainConfig& cfg, const Dataset& data, const ProgressFn& progress = {});
TrainResult train(const TrainConfig& cfg, const Dataset& data, ModelParams init,
                  const ProgressFn& progress = {});

struct Evaluation {
  F1Report report;
  std::vector<std::vector<double>> probabilities;
  std::vector<std::vector<int>> labels;
};

Evaluation evaluate(const ModelParams& params, const ModelConfig& model, const Dataset& data,
                    double threshold = 0.5, std::size_t threads = 1);

/// Subject ids of each fold: subjects shuffled by seed, then cut into k
/// contiguous groups whose sizes differ by at most one.
std::vector<std::vector<int>> subject_folds(const std::vector<int>& subjects, std::size_t k,
                                            std::uint64_t seed);

struct FoldResult {
  std::vector<int> train_subjects;
  std::vector<int> test_subjects;
  F1Report report;
};

struct CrossValidation {
  std::vector<FoldResult> folds;
  double mean_f1 = 0.0;
};

CrossValidation cross_validate(const TrainConfig& cfg, const Dataset& data, std::size_t folds,
                               const ProgressFn& progress = {});

struct CrossDomainResult {
  std::vector<std::vector<int>> source_folds;
  std::vector<std::size_t> train_folds;  // indices into source_folds
  std::vector<int> train_subjects;
  F1Report source_heldout;  // the unused source fold
  F1Report target;          // the entire target set
};

/// Splits the source into 3 subject folds, trains on folds 0 and 1 and tests
/// on all of the target. The held-out source fold is reported alongside.
CrossDomainResult cross_domain_eval(const TrainConfig& cfg, const Dataset& source,
                                    const Dataset& target, const ProgressFn& progress = {});

}  // namespace autt
