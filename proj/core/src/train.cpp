#include "autt/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <thread>

#include "autt/error.hpp"

namespace autt {
namespace {

// Runs fn(i) for i in [0, n) on up to `threads` workers.
template <class Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t w = 0; w < threads; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += threads) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

std::vector<Tensor*> flat(ModelParams& p) {
  std::vector<Tensor*> out;
  p.visit([&](const std::string&, Tensor& t) { out.push_back(&t); });
  return out;
}

bool ends_with(const std::string& s, const std::string& tail) {
  return s.size() >= tail.size() && s.compare(s.size() - tail.size(), tail.size(), tail) == 0;
}

LossConfig resolve_loss(const LossConfig& base, const Dataset& data) {
  LossConfig loss = base;
  if (loss.rates.empty()) loss.rates = loss_rates(data);
  loss.validate();
  if (loss.rates.size() != data.n_au())
    throw ConfigError("loss: " + std::to_string(loss.rates.size()) + " rates for " +
                      std::to_string(data.n_au()) + " AUs");
  return loss;
}

}  // namespace

void OptimConfig::validate() const {
  if (method != "momentum" && method != "adam")
    throw ConfigError("optim.method must be 'momentum' or 'adam'");
  if (!(lr > 0.0)) throw ConfigError("optim.lr must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("optim.momentum must lie in [0, 1)");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0))
    throw ConfigError("optim.beta1/beta2 must lie in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("optim.adam_eps must be positive");
  if (grad_clip < 0.0) throw ConfigError("optim.grad_clip must be non-negative");
  if (batch_size == 0) throw ConfigError("optim.batch_size must be positive");
}

void TrainConfig::validate() const {
  model.validate();
  optim.validate();
  if (!loss.rates.empty()) loss.validate();
  if (folds < 2) throw ConfigError("eval.folds must be at least 2");
  if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("eval.threshold must lie in (0, 1)");
  if (threads == 0) throw ConfigError("run.threads must be positive");
}

TrainConfig TrainConfig::from_config(const KeyValueConfig& c) {
  TrainConfig t;
  t.model = ModelConfig::from_config(c);
  t.loss.rates = c.get_doubles("loss.rates", {});
  t.loss.margin = c.get_double("loss.margin", t.loss.margin);
  t.loss.b_left = c.get_double("loss.b_left", t.loss.b_left);
  t.loss.b_right = c.get_double("loss.b_right", t.loss.b_right);
  t.loss.epsilon = c.get_double("loss.epsilon", t.loss.epsilon);
  t.loss.lambda_mdwa = c.get_double("loss.lambda_mdwa", t.loss.lambda_mdwa);
  t.loss.lambda_wdi = c.get_double("loss.lambda_wdi", t.loss.lambda_wdi);
  t.loss.lambda_mse = c.get_double("loss.lambda_mse", t.loss.lambda_mse);
  t.optim.method = c.get_string("optim.method", t.optim.method);
  t.optim.lr = c.get_double("optim.lr", t.optim.lr);
  t.optim.momentum = c.get_double("optim.momentum", t.optim.momentum);
  t.optim.beta1 = c.get_double("optim.beta1", t.optim.beta1);
  t.optim.beta2 = c.get_double("optim.beta2", t.optim.beta2);
  t.optim.adam_eps = c.get_double("optim.adam_eps", t.optim.adam_eps);
  t.optim.grad_clip = c.get_double("optim.grad_clip", t.optim.grad_clip);
  t.optim.steps = c.get_size("optim.steps", t.optim.steps);
  t.optim.batch_size = c.get_size("optim.batch_size", t.optim.batch_size);
  t.folds = c.get_size("eval.folds", t.folds);
  t.threshold = c.get_double("eval.threshold", t.threshold);
  t.seed = static_cast<std::uint64_t>(c.get_long("run.seed", static_cast<long>(t.seed)));
  t.threads = c.get_size("run.threads", t.threads);
  t.validate();
  return t;
}

void TrainConfig::write_to(KeyValueConfig& c) const {
  model.write_to(c);
  if (!loss.rates.empty()) c.set("loss.rates", join_numbers(loss.rates));
  c.set("loss.margin", format_double(loss.margin));
  c.set("loss.b_left", format_double(loss.b_left));
  c.set("loss.b_right", format_double(loss.b_right));
  c.set("loss.epsilon", format_double(loss.epsilon));
  c.set("loss.lambda_mdwa", format_double(loss.lambda_mdwa));
  c.set("loss.lambda_wdi", format_double(loss.lambda_wdi));
  c.set("loss.lambda_mse", format_double(loss.lambda_mse));
  c.set("optim.method", optim.method);
  c.set("optim.lr", format_double(optim.lr));
  c.set("optim.momentum", format_double(optim.momentum));
  c.set("optim.beta1", format_double(optim.beta1));
  c.set("optim.beta2", format_double(optim.beta2));
  c.set("optim.adam_eps", format_double(optim.adam_eps));
  c.set("optim.grad_clip", format_double(optim.grad_clip));
  c.set("optim.steps", std::to_string(optim.steps));
  c.set("optim.batch_size", std::to_string(optim.batch_size));
  c.set("eval.folds", std::to_string(folds));
  c.set("eval.threshold", format_double(threshold));
  c.set("run.seed", std::to_string(seed));
  c.set("run.threads", std::to_string(threads));
}

std::vector<double> loss_rates(const Dataset& data) {
  auto rates = data.label_rates();
  for (auto& r : rates) r = std::clamp(r, 0.05, 0.95);
  return rates;
}

void check_compatible(const ModelConfig& model, const Dataset& data) {
  if (data.samples.empty()) throw Error("dataset is empty");
  if (data.image_size != model.image_size || data.channels != model.channels)
    throw ConfigError("dataset images are " + std::to_string(data.image_size) + "x" +
                      std::to_string(data.image_size) + "x" + std::to_string(data.channels) +
                      ", model expects " + std::to_string(model.image_size) + "x" +
                      std::to_string(model.image_size) + "x" + std::to_string(model.channels));
  if (data.n_au() != model.n_au)
    throw ConfigError("dataset has " + std::to_string(data.n_au()) + " AUs, model expects " +
                      std::to_string(model.n_au));
  const GridShape g = model.grid();
  if (data.grid.height != g.height || data.grid.width != g.width)
    throw ConfigError("dataset mask grid does not match the model patch grid");
}

SampleGradient sample_gradient(const ModelParams& params, const ModelConfig& model,
                               const LossConfig& loss, const Sample& sample) {
  Tape tape;
  const ModelVars vars = lift(tape, params, model);
  const ModelOutput out = forward_model(tape, sample.image, sample.mask, vars, model);
  const std::vector<double> y(sample.labels.begin(), sample.labels.end());
  const Var total =
      total_loss(sigmoid(out.logits), y, out.heatmap, tape.constant(sample.mask), loss);
  const Gradients g = tape.backward(total);
  return {total.value().item(), vars.map([&](const std::string&, const Var& v) { return g.of(v); })};
}

std::vector<GroupCheck> check_model_gradients(const ModelParams& params, const ModelConfig& model,
                                              const LossConfig& loss, const Sample& sample,
                                              double eps) {
  const SampleGradient analytic = sample_gradient(params, model, loss, sample);
  const std::vector<double> y(sample.labels.begin(), sample.labels.end());
  ModelParams probe = params;
  const auto probe_tensors = flat(probe);
  ModelParams grads = analytic.grad;
  const auto grad_tensors = flat(grads);
  std::vector<std::string> names;
  probe.visit([&](const std::string& n, const Tensor&) { names.push_back(n); });

  std::vector<GroupCheck> out;
  for (std::size_t k = 0; k < probe_tensors.size(); ++k) {
    if (ends_with(names[k], "eta") && !model.train_eta) continue;
    Tensor& target = *probe_tensors[k];
    const Tensor original = target;
    const ScalarFn f = [&](const Tensor& point) {
      target = point;
      const auto pred = forward_model(sample.image, sample.mask, probe, model);
      AUBatch batch{y, predict(pred.logits), sample.mask, pred.heatmap};
      return total_loss(batch, loss);
    };
    const Tensor numeric = finite_diff_gradient(f, original, eps);
    target = original;
    out.push_back({names[k], original.numel(), compare_gradients(*grad_tensors[k], numeric)});
  }
  return out;
}

TrainResult train(const TrainConfig& cfg, const Dataset& data, const ProgressFn& progress) {
  std::mt19937_64 rng(cfg.seed);
  return train(cfg, data, init_model(cfg.model, rng), progress);
}

TrainResult train(const TrainConfig& cfg, const Dataset& data, ModelParams init,
                  const ProgressFn& progress) {
  cfg.validate();
  check_compatible(cfg.model, data);
  validate(init, cfg.model);
  TrainResult result;
  result.loss = resolve_loss(cfg.loss, data);
  result.params = std::move(init);

  const auto params = flat(result.params);
  std::vector<std::string> names;
  result.params.visit([&](const std::string& n, const Tensor&) { names.push_back(n); });
  std::vector<Tensor> m1, m2;
  for (auto* p : params) {
    m1.emplace_back(p->shape());
    m2.emplace_back(p->shape());
  }

  std::mt19937_64 order_rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  const std::size_t batch = std::min(cfg.optim.batch_size, data.size());

  for (std::size_t step = 0; step < cfg.optim.steps; ++step) {
    std::vector<std::size_t> picks;
    for (std::size_t i = 0; i < batch; ++i) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), order_rng);
        cursor = 0;
      }
      picks.push_back(order[cursor++]);
    }
    std::vector<SampleGradient> grads(picks.size());
    parallel_for(picks.size(), cfg.threads, [&](std::size_t i) {
      grads[i] = sample_gradient(result.params, cfg.model, result.loss, data.samples[picks[i]]);
    });

    double loss = 0.0;
    std::vector<Tensor> total;
    for (auto& g : grads) {
      loss += g.loss;
      const auto parts = flat(g.grad);
      if (total.empty()) {
        for (auto* t : parts) total.push_back(std::move(*t));
        continue;
      }
      for (std::size_t k = 0; k < parts.size(); ++k)
        for (std::size_t e = 0; e < total[k].numel(); ++e) total[k][e] += (*parts[k])[e];
    }
    loss /= static_cast<double>(picks.size());
    if (!std::isfinite(loss))
      throw DivergenceError("training loss is not finite at step " + std::to_string(step),
                            static_cast<long>(step));
    result.loss_curve.push_back(loss);
    if (progress) progress({step, loss});

    const double inv = 1.0 / static_cast<double>(picks.size());
    double norm2 = 0.0;
    for (auto& t : total)
      for (double& v : t.data()) {
        v *= inv;
        norm2 += v * v;
      }
    double clip = 1.0;
    if (cfg.optim.grad_clip > 0.0 && std::sqrt(norm2) > cfg.optim.grad_clip)
      clip = cfg.optim.grad_clip / std::sqrt(norm2);

    const double lr = cfg.optim.lr;
    const bool adam = cfg.optim.method == "adam";
    const double b1 = cfg.optim.beta1, b2 = cfg.optim.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(step + 1));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(step + 1));
    for (std::size_t k = 0; k < params.size(); ++k) {
      Tensor& p = *params[k];
      for (std::size_t e = 0; e < p.numel(); ++e) {
        const double g = total[k][e] * clip;
        if (adam) {
          m1[k][e] = b1 * m1[k][e] + (1.0 - b1) * g;
          m2[k][e] = b2 * m2[k][e] + (1.0 - b2) * g * g;
          p[e] -= lr * (m1[k][e] / c1) / (std::sqrt(m2[k][e] / c2) + cfg.optim.adam_eps);
        } else {
          m1[k][e] = cfg.optim.momentum * m1[k][e] + g;
          p[e] -= lr * m1[k][e];
        }
      }
      if (ends_with(names[k], "eta")) p[0] = std::max(p[0], 0.0);
    }
  }
  return result;
}

Evaluation evaluate(const ModelParams& params, const ModelConfig& model, const Dataset& data,
                    double threshold, std::size_t threads) {
  check_compatible(model, data);
  validate(params, model);
  Evaluation ev;
  ev.probabilities.resize(data.size());
  parallel_for(data.size(), threads, [&](std::size_t i) {
    const auto pred = forward_model(data.samples[i].image, data.samples[i].mask, params, model);
    ev.probabilities[i] = predict(pred.logits);
  });
  for (const auto& s : data.samples) ev.labels.push_back(s.labels);
  ev.report = f1_scores(ev.probabilities, ev.labels, threshold, data.au_ids);
  return ev;
}

std::vector<std::vector<int>> subject_folds(const std::vector<int>& subjects, std::size_t k,
                                            std::uint64_t seed) {
  if (k < 2) throw ConfigError("cross-validation needs at least 2 folds");
  if (subjects.size() < k)
    throw ConfigError(std::to_string(subjects.size()) + " subjects cannot fill " +
                      std::to_string(k) + " folds");
  std::vector<int> shuffled = subjects;
  std::mt19937_64 rng(seed);
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  std::vector<std::vector<int>> folds(k);
  const std::size_t base = shuffled.size() / k, extra = shuffled.size() % k;
  std::size_t pos = 0;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t n = base + (f < extra ? 1 : 0);
    folds[f].assign(shuffled.begin() + static_cast<long>(pos), shuffled.begin() + static_cast<long>(pos + n));
    pos += n;
  }
  return folds;
}

CrossValidation cross_validate(const TrainConfig& cfg, const Dataset& data, std::size_t folds,
                               const ProgressFn& progress) {
  const auto splits = subject_folds(data.subjects(), folds, cfg.seed);
  CrossValidation cv;
  double total = 0.0;
  for (std::size_t f = 0; f < splits.size(); ++f) {
    FoldResult fold;
    fold.test_subjects = splits[f];
    for (std::size_t g = 0; g < splits.size(); ++g)
      if (g != f) fold.train_subjects.insert(fold.train_subjects.end(), splits[g].begin(), splits[g].end());
    const Dataset train_set = select_subjects(data, fold.train_subjects);
    const Dataset test_set = select_subjects(data, fold.test_subjects);
    const TrainResult trained = train(cfg, train_set, progress);
    fold.report = evaluate(trained.params, cfg.model, test_set, cfg.threshold, cfg.threads).report;
    total += fold.report.average;
    cv.folds.push_back(std::move(fold));
  }
  cv.mean_f1 = total / static_cast<double>(cv.folds.size());
  return cv;
}

CrossDomainResult cross_domain_eval(const TrainConfig& cfg, const Dataset& source,
                                    const Dataset& target, const ProgressFn& progress) {
  if (source.n_au() != target.n_au())
    throw ConfigError("source has " + std::to_string(source.n_au()) + " AUs, target has " +
                      std::to_string(target.n_au()));
  if (source.au_ids != target.au_ids) throw ConfigError("source and target list different AU ids");
  CrossDomainResult result;
  result.source_folds = subject_folds(source.subjects(), 3, cfg.seed);
  result.train_folds = {0, 1};
  for (auto f : result.train_folds)
    result.train_subjects.insert(result.train_subjects.end(), result.source_folds[f].begin(),
                                 result.source_folds[f].end());
  const TrainResult trained = train(cfg, select_subjects(source, result.train_subjects), progress);
  result.source_heldout = evaluate(trained.params, cfg.model, select_subjects(source, result.source_folds[2]),
                                   cfg.threshold, cfg.threads)
                              .report;
  result.target = evaluate(trained.params, cfg.model, target, cfg.threshold, cfg.threads).report;
  return result;
}

}  // namespace autt
