#include <cstdio>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>

#include <CLI11.hpp>

#include "autt/backbone.hpp"
#include "autt/bench.hpp"
#include "autt/data.hpp"
#include "autt/error.hpp"
#include "autt/train.hpp"

using namespace autt;

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  bool quiet = false;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("-c,--config", c.config_path, "Key-value config file (section.key = value)");
  app->add_option("-s,--set", c.overrides, "Override a config key, e.g. --set optim.steps=50");
  app->add_flag("-q,--quiet", c.quiet, "Suppress per-step progress");
}

KeyValueConfig load_config(const Common& c) {
  KeyValueConfig cfg = c.config_path.empty() ? KeyValueConfig() : KeyValueConfig::load(c.config_path);
  for (const auto& o : c.overrides) cfg.set_assignment(o);
  return cfg;
}

// Every effective key, prefixed so the output stays machine-parsable.
void echo(const KeyValueConfig& cfg) {
  std::istringstream in(cfg.to_text());
  std::string line;
  while (std::getline(in, line)) std::cout << "# " << line << '\n';
}

ProgressFn progress_printer(bool quiet, std::size_t every) {
  if (quiet) return {};
  return [every](const StepStats& s) {
    if (s.step % every == 0) std::printf("step %zu loss %.6f\n", s.step, s.loss);
  };
}

void write_curve(const std::string& path, const std::vector<double>& curve) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << "step,loss\n";
  out.precision(17);
  for (std::size_t i = 0; i < curve.size(); ++i) out << i << ',' << curve[i] << '\n';
}

KeyValueConfig effective(const KeyValueConfig& base, const TrainConfig& t) {
  KeyValueConfig e = base;
  t.write_to(e);
  return e;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"AU-TTT backbone: synthetic AU data, training, evaluation and benchmarks"};
  app.require_subcommand(1);

  Common gen_c, train_c, eval_c, cv_c, cd_c, grad_c, bench_c, mask_c;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic AU dataset");
  add_common(gen, gen_c);
  std::string gen_out, gen_section = "data";
  gen->add_option("-o,--out", gen_out, "Output dataset file")->required();
  gen->add_option("--section", gen_section, "Config section holding the data keys")->capture_default_str();

  auto* trn = app.add_subcommand("train", "Train a model and write a checkpoint");
  add_common(trn, train_c);
  std::string train_data, train_out, train_curve;
  trn->add_option("-d,--data", train_data, "Dataset file")->required();
  trn->add_option("-o,--out", train_out, "Checkpoint output")->required();
  trn->add_option("--curve", train_curve, "CSV loss curve output");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  add_common(ev, eval_c);
  std::string eval_ckpt, eval_data;
  ev->add_option("-m,--checkpoint", eval_ckpt, "Checkpoint file")->required();
  ev->add_option("-d,--data", eval_data, "Dataset file")->required();

  auto* cv = app.add_subcommand("cross-validate", "Subject-exclusive k-fold cross-validation");
  add_common(cv, cv_c);
  std::string cv_data;
  std::size_t cv_folds = 0;
  cv->add_option("-d,--data", cv_data, "Dataset file")->required();
  cv->add_option("-k,--folds", cv_folds, "Fold count (default eval.folds)");

  auto* cd = app.add_subcommand("cross-domain", "Train on two source folds, test on a target domain");
  add_common(cd, cd_c);
  std::string cd_source, cd_target;
  cd->add_option("--source", cd_source, "Source dataset file")->required();
  cd->add_option("--target", cd_target, "Target dataset file")->required();

  auto* gc = app.add_subcommand("gradcheck", "Compare tape gradients with finite differences");
  add_common(gc, grad_c);
  double grad_eps = 1e-5, grad_tol = 1e-3;
  gc->add_option("--eps", grad_eps, "Finite-difference step")->capture_default_str();
  gc->add_option("--tol", grad_tol, "Relative tolerance")->capture_default_str();

  auto* bn = app.add_subcommand("bench", "Time the TTT scan against quadratic attention");
  add_common(bn, bench_c);
  std::string bench_out;
  bn->add_option("-o,--out", bench_out, "CSV output (stdout when omitted)");

  auto* em = app.add_subcommand("export-masks", "Write AU RoI masks for a landmark file");
  add_common(em, mask_c);
  std::string mask_landmarks, mask_table = "bp4d", mask_out;
  std::size_t mask_grid = 14;
  double mask_sigma = 1.5;
  em->add_option("-l,--landmarks", mask_landmarks, "68-point landmark file (canonical face when omitted)");
  em->add_option("-t,--table", mask_table, "AU center table: bp4d, disfa or a file")->capture_default_str();
  em->add_option("-g,--grid", mask_grid, "Grid side H' = W'")->capture_default_str();
  em->add_option("--sigma", mask_sigma, "Gaussian sigma in grid cells")->capture_default_str();
  em->add_option("-o,--out", mask_out, "CSV output (stdout when omitted)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      KeyValueConfig cfg = load_config(gen_c);
      const SyntheticSpec spec = SyntheticSpec::from_config(cfg, gen_section);
      spec.write_to(cfg, gen_section);
      echo(cfg);
      const Dataset data = generate_dataset(spec, cfg.get_size("run.threads", 1));
      save_dataset(gen_out, data);
      std::printf("wrote %zu samples (%zu subjects, %zu AUs) to %s\n", data.size(), data.subjects().size(),
                  data.n_au(), gen_out.c_str());
    } else if (trn->parsed()) {
      const KeyValueConfig base = load_config(train_c);
      const TrainConfig cfg = TrainConfig::from_config(base);
      echo(effective(base, cfg));
      const Dataset data = load_dataset(train_data);
      const TrainResult result = train(cfg, data, progress_printer(train_c.quiet, 10));
      KeyValueConfig extra = effective(base, cfg);
      extra.set("loss.rates", join_numbers(result.loss.rates));
      extra.set("dataset.au_ids", join_numbers(data.au_ids));
      save_checkpoint(train_out, {cfg.model, result.params, extra});
      if (!train_curve.empty()) write_curve(train_curve, result.loss_curve);
      std::printf("initial_loss=%.6f\nfinal_loss=%.6f\ncheckpoint=%s\n", result.loss_curve.empty() ? 0.0 : result.loss_curve.front(),
                  result.loss_curve.empty() ? 0.0 : result.loss_curve.back(), train_out.c_str());
    } else if (ev->parsed()) {
      const KeyValueConfig base = load_config(eval_c);
      const Checkpoint ckpt = load_checkpoint(eval_ckpt);
      echo(ckpt.extra);
      const Dataset data = load_dataset(eval_data);
      const double threshold = base.get_double("eval.threshold", ckpt.extra.get_double("eval.threshold", 0.5));
      const Evaluation result =
          evaluate(ckpt.params, ckpt.config, data, threshold, base.get_size("run.threads", 1));
      std::cout << result.report.table() << result.report.machine_lines();
    } else if (cv->parsed()) {
      const KeyValueConfig base = load_config(cv_c);
      const TrainConfig cfg = TrainConfig::from_config(base);
      echo(effective(base, cfg));
      const Dataset data = load_dataset(cv_data);
      const auto result = cross_validate(cfg, data, cv_folds ? cv_folds : cfg.folds,
                                         progress_printer(cv_c.quiet, 50));
      for (std::size_t f = 0; f < result.folds.size(); ++f) {
        std::printf("fold %zu test subjects:", f);
        for (int s : result.folds[f].test_subjects) std::printf(" %d", s);
        std::printf("\n%s", result.folds[f].report.table().c_str());
        std::printf("fold.%zu.f1.avg=%.4f\n", f, result.folds[f].report.average);
      }
      std::printf("cv.mean_f1=%.4f\n", result.mean_f1);
    } else if (cd->parsed()) {
      const KeyValueConfig base = load_config(cd_c);
      const TrainConfig cfg = TrainConfig::from_config(base);
      echo(effective(base, cfg));
      const auto result = cross_domain_eval(cfg, load_dataset(cd_source), load_dataset(cd_target),
                                            progress_printer(cd_c.quiet, 50));
      std::printf("train folds: 0 1 (subjects:");
      for (int s : result.train_subjects) std::printf(" %d", s);
      std::printf(")\nsource held-out fold:\n%s", result.source_heldout.table().c_str());
      std::printf("target domain:\n%s%s", result.target.table().c_str(), result.target.machine_lines().c_str());
      std::printf("source.f1.avg=%.4f\n", result.source_heldout.average);
    } else if (gc->parsed()) {
      KeyValueConfig base = load_config(grad_c);
      // Micro defaults unless the config says otherwise.
      const std::pair<const char*, const char*> micro[] = {
          {"model.image_size", "32"}, {"model.patch_size", "16"}, {"model.embed_dim", "8"},
          {"model.depth", "1"},       {"model.heads", "2"},       {"model.n_au", "2"},
          {"model.w0_std", "0.1"},    {"model.eta", "0.5"},       {"data.au_ids", "1,12"}};
      for (const auto& [k, v] : micro)
        if (!base.contains(k)) base.set(k, v);
      const TrainConfig cfg = TrainConfig::from_config(base);
      echo(effective(base, cfg));
      SyntheticSpec spec = SyntheticSpec::from_config(base);
      std::mt19937_64 rng(cfg.seed);
      const Sample sample = generate_sample(spec, rng);
      const ModelParams params = init_model(cfg.model, rng);
      LossConfig loss = cfg.loss;
      if (loss.rates.empty()) loss.rates.assign(cfg.model.n_au, 0.4);
      bool ok = true;
      for (const auto& g : check_model_gradients(params, cfg.model, loss, sample, grad_eps)) {
        const bool pass = g.comparison.max_relative_error <= grad_tol;
        ok = ok && pass;
        std::printf("%-28s n=%-6zu max_rel=%.3e %s\n", g.name.c_str(), g.size,
                    g.comparison.max_relative_error, pass ? "ok" : "FAIL");
      }
      std::printf("gradcheck=%s\n", ok ? "pass" : "fail");
      return ok ? 0 : 1;
    } else if (bn->parsed()) {
      const KeyValueConfig base = load_config(bench_c);
      const BenchConfig cfg = BenchConfig::from_config(base);
      KeyValueConfig shown = base;
      shown.set("bench.dim", std::to_string(cfg.dim));
      shown.set("bench.heads", std::to_string(cfg.heads));
      shown.set("bench.minibatch_b", std::to_string(cfg.minibatch_b));
      shown.set("bench.lengths", join_numbers(cfg.lengths));
      shown.set("bench.repeats", std::to_string(cfg.repeats));
      echo(shown);
      const std::string csv = bench_csv(bench_scan(cfg));
      if (bench_out.empty()) {
        std::cout << csv;
      } else {
        std::ofstream(bench_out) << csv;
        std::cout << csv;
      }
    } else if (em->parsed()) {
      echo(load_config(mask_c));
      const LandmarkSet lm = mask_landmarks.empty() ? canonical_face() : load_landmarks(mask_landmarks);
      const AUCenterTable table = AUCenterTable::named_or_file(mask_table);
      const GridShape grid{mask_grid, mask_grid};
      const Tensor mask = au_heatmap(lm, table, grid, mask_sigma);
      std::ostringstream out;
      out << "au,row,col,value\n";
      out.precision(17);
      const auto ids = table.au_ids();
      for (std::size_t i = 0; i < ids.size(); ++i)
        for (std::size_t h = 0; h < grid.height; ++h)
          for (std::size_t w = 0; w < grid.width; ++w)
            out << ids[i] << ',' << h << ',' << w << ',' << mask[(i * grid.height + h) * grid.width + w] << '\n';
      if (mask_out.empty()) std::cout << out.str();
      else std::ofstream(mask_out) << out.str();
    }
  } catch (const DivergenceError& e) {
    std::fprintf(stderr, "error: %s (index %ld)\n", e.what(), e.index());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
