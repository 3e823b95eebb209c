#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include "autt/config.hpp"
#include "autt/data.hpp"
#include "autt/error.hpp"
#include "autt/train.hpp"

using namespace autt;
namespace fs = std::filesystem;

namespace {

SyntheticSpec tiny_spec() {
  SyntheticSpec s;
  s.image_size = 16;
  s.channels = 1;
  s.patch_size = 4;
  s.au_ids = {1, 12};
  s.rates = {0.5, 0.5};
  s.stamp_length = 3.0;
  s.stamp_thickness = 1.0;
  s.subjects = 6;
  s.samples_per_subject = 4;
  s.seed = 3;
  return s;
}

TrainConfig tiny_train() {
  TrainConfig c;
  c.model.image_size = 16;
  c.model.channels = 1;
  c.model.patch_size = 4;
  c.model.embed_dim = 4;
  c.model.depth = 1;
  c.model.heads = 1;
  c.model.n_au = 2;
  c.model.dilation_rates = {1};
  c.model.mlp_ratio = 2;
  c.model.eta = 0.5;
  c.model.w0_std = 0.1;
  c.optim.steps = 10;
  c.optim.batch_size = 4;
  c.optim.lr = 0.02;
  c.optim.grad_clip = 1.0;
  return c;
}

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("autt-test-" + name);
  fs::remove_all(p);
  return p;
}

std::vector<Tensor> flatten(const ModelParams& p) {
  std::vector<Tensor> out;
  p.visit([&](const std::string&, const Tensor& t) { out.push_back(t); });
  return out;
}

}  // namespace

TEST(Config, ParseOverridesAndTypes) {
  KeyValueConfig c = KeyValueConfig::parse(
      "# comment\nmodel.depth = 3\n\nmodel.rates = 1, 3,5\noptim.lr=0.5\nrun.flag = yes\nmodel.depth = 4\n");
  EXPECT_EQ(c.get_size("model.depth", 0), 4u);
  EXPECT_EQ(c.get_sizes("model.rates", {}), (std::vector<std::size_t>{1, 3, 5}));
  EXPECT_EQ(c.get_double("optim.lr", 0), 0.5);
  EXPECT_TRUE(c.get_bool("run.flag", false));
  EXPECT_EQ(c.get_string("missing", "dflt"), "dflt");
  c.set_assignment("optim.lr=0.25");
  EXPECT_EQ(c.get_double("optim.lr", 0), 0.25);
  EXPECT_THROW(KeyValueConfig::parse("just words\n"), ConfigError);
  EXPECT_THROW(c.get_long("run.flag", 0), ConfigError);
  EXPECT_THROW(c.set_assignment("novalue"), ConfigError);
  EXPECT_EQ(KeyValueConfig::parse(c.to_text()).values(), c.values());
}

TEST(Config, NumberFormattingRoundTrips) {
  for (double v : {0.1, 1.0 / 3.0, 1e-300, -2.5, 12345678.9})
    EXPECT_EQ(std::stod(format_double(v)), v);
  EXPECT_EQ(join_numbers(std::vector<int>{1, 6, 12}), "1,6,12");
}

TEST(Config, TrainConfigRoundTrip) {
  TrainConfig c = tiny_train();
  c.optim.method = "adam";
  c.loss.margin = 0.15;
  c.seed = 99;
  KeyValueConfig kv;
  c.write_to(kv);
  TrainConfig back = TrainConfig::from_config(kv);
  KeyValueConfig again;
  back.write_to(again);
  EXPECT_EQ(kv.to_text(), again.to_text());
  EXPECT_EQ(back.optim.method, "adam");
  EXPECT_EQ(back.seed, 99u);
}

TEST(Config, InvalidTrainConfigRejected) {
  TrainConfig c = tiny_train();
  c.folds = 1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_train();
  c.optim.method = "sgd-nesterov";
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_train();
  c.optim.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Synthetic, SameSeedSameSample) {
  SyntheticSpec s = tiny_spec();
  std::mt19937_64 a(5), b(5);
  Sample x = generate_sample(s, a), y = generate_sample(s, b);
  EXPECT_EQ(x.image, y.image);
  EXPECT_EQ(x.labels, y.labels);
  EXPECT_EQ(x.mask, y.mask);
  EXPECT_EQ(x.subject, y.subject);
}

TEST(Synthetic, DegenerateRatesFixLabels) {
  SyntheticSpec s = tiny_spec();
  s.rates = {1.0, 0.0};
  std::mt19937_64 rng(6);
  for (int i = 0; i < 20; ++i) EXPECT_EQ(generate_sample(s, rng).labels, (std::vector<int>{1, 0}));
}

TEST(Synthetic, ActiveStampSitsAtAUCenter) {
  SyntheticSpec s = tiny_spec();
  s.noise = 0.0;
  s.subject_jitter = 0.0;
  s.point_jitter = 0.0;
  s.rates = {1.0, 0.0};
  std::mt19937_64 rng(7);
  Sample x = generate_sample(s, rng);
  const std::size_t P = s.patch_size, W = s.image_size;
  // Every lit pixel falls in a cell close to one of the active AU's centers.
  const GridShape g = s.grid();
  double total = 0.0;
  for (std::size_t r = 0; r < W; ++r)
    for (std::size_t c = 0; c < W; ++c) {
      const double v = x.image[r * W + c];
      total += v;
      if (v != 0.0) EXPECT_GT(x.mask[(r / P) * g.width + c / P], 0.5) << r << "," << c;
    }
  EXPECT_GT(total, 0.0);

  s.rates = {0.0, 0.0};
  Sample blank = generate_sample(s, rng);
  for (double v : blank.image.data()) EXPECT_EQ(v, 0.0);
}

TEST(Synthetic, DatasetIsDeterministicAcrossThreads) {
  SyntheticSpec s = tiny_spec();
  Dataset a = generate_dataset(s, 1), b = generate_dataset(s, 3);
  ASSERT_EQ(a.size(), 24u);
  EXPECT_EQ(a.subjects().size(), 6u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a.samples[i].image, b.samples[i].image);
    EXPECT_EQ(a.samples[i].labels, b.samples[i].labels);
    EXPECT_EQ(a.samples[i].subject, b.samples[i].subject);
  }
  s.seed = 4;
  EXPECT_NE(generate_dataset(s).samples[0].image, a.samples[0].image);
}

TEST(Synthetic, SpecValidation) {
  SyntheticSpec s = tiny_spec();
  s.rates = {0.5};
  EXPECT_THROW(s.validate(), ConfigError);
  s = tiny_spec();
  s.rates = {1.5, 0.5};
  EXPECT_THROW(s.validate(), ConfigError);
  s = tiny_spec();
  s.image_size = 18;
  EXPECT_THROW(s.validate(), ConfigError);
}

TEST(Dataset, FileRoundTrip) {
  Dataset a = generate_dataset(tiny_spec());
  const fs::path path = scratch("data.bin");
  save_dataset(path, a);
  Dataset b = load_dataset(path);
  EXPECT_EQ(b.au_ids, a.au_ids);
  EXPECT_EQ(b.mask_sigma, a.mask_sigma);
  ASSERT_EQ(b.size(), a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(b.samples[i].image, a.samples[i].image);
    EXPECT_EQ(b.samples[i].mask, a.samples[i].mask);
    EXPECT_EQ(b.samples[i].labels, a.samples[i].labels);
    EXPECT_EQ(b.samples[i].subject, a.samples[i].subject);
  }
  fs::remove(path);
}

TEST(Dataset, SelectSubjects) {
  Dataset a = generate_dataset(tiny_spec());
  Dataset b = select_subjects(a, {1, 4});
  EXPECT_EQ(b.size(), 8u);
  for (const auto& s : b.samples) EXPECT_TRUE(s.subject == 1 || s.subject == 4);
}

TEST(Dataset, LoadImageDirectory) {
  const fs::path dir = scratch("images");
  fs::create_directories(dir);
  auto write_pgm = [&](const std::string& name, unsigned char value) {
    std::ofstream out(dir / name, std::ios::binary);
    out << "P5\n# test\n8 8\n255\n";
    for (int i = 0; i < 64; ++i) out.put(static_cast<char>(i == 0 ? 255 : value));
    std::ofstream pts(dir / (name.substr(0, name.size() - 4) + ".pts"));
    pts << "version: 1\nn_points: 68\n{\n";
    for (const auto& p : canonical_face().points()) pts << p.x * 8 << " " << p.y * 8 << "\n";
    pts << "}\n";
  };
  write_pgm("a.pgm", 51);
  write_pgm("b.pgm", 102);
  {
    std::ofstream csv(dir / "labels.csv");
    csv << "file,subject,AU1,AU12\na.pgm,7,1,0\nb.pgm,9,0,1\n";
  }
  Dataset d = load_image_directory(dir, 4, 2, AUCenterTable::bp4d(), 1.0);
  ASSERT_EQ(d.size(), 2u);
  EXPECT_EQ(d.au_ids, (std::vector<int>{1, 12}));
  EXPECT_EQ(d.channels, 1u);
  EXPECT_EQ(d.samples[0].labels, (std::vector<int>{1, 0}));
  EXPECT_EQ(d.samples[1].subject, 9);
  EXPECT_EQ(d.samples[0].image.shape(), (Shape{4, 4, 1}));
  EXPECT_EQ(d.samples[0].image[0], 1.0);
  EXPECT_DOUBLE_EQ(d.samples[0].image[1], 0.2);
  EXPECT_EQ(d.samples[0].mask.shape(), (Shape{2, 2, 2}));
  EXPECT_NEAR(d.samples[0].landmarks[30].x, canonical_face()[30].x, 1e-12);

  std::ofstream(dir / "labels.csv") << "name,subject,AU1\n";
  EXPECT_THROW(load_image_directory(dir, 4, 2, AUCenterTable::bp4d(), 1.0), FormatError);
  fs::remove_all(dir);
}

TEST(Train, LossRatesAreClamped) {
  SyntheticSpec s = tiny_spec();
  s.rates = {1.0, 0.0};
  auto r = loss_rates(generate_dataset(s));
  EXPECT_EQ(r, (std::vector<double>{0.95, 0.05}));
}

TEST(Train, ZeroStepsReturnInitialization) {
  TrainConfig c = tiny_train();
  c.optim.steps = 0;
  std::mt19937_64 rng(1);
  ModelParams init = init_model(c.model, rng);
  TrainResult r = train(c, generate_dataset(tiny_spec()), init);
  EXPECT_TRUE(r.loss_curve.empty());
  auto a = flatten(init), b = flatten(r.params);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(Train, FixedSeedGivesIdenticalCurves) {
  Dataset d = generate_dataset(tiny_spec());
  TrainConfig c = tiny_train();
  TrainResult a = train(c, d);
  TrainResult b = train(c, d);
  c.threads = 3;
  TrainResult threaded = train(c, d);
  ASSERT_EQ(a.loss_curve.size(), 10u);
  EXPECT_EQ(a.loss_curve, b.loss_curve);
  EXPECT_EQ(a.loss_curve, threaded.loss_curve);
  auto pa = flatten(a.params), pb = flatten(threaded.params);
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i], pb[i]);
}

TEST(Train, LossDecreasesOnSeparableData) {
  Dataset d = generate_dataset(tiny_spec());
  for (const char* method : {"momentum", "adam"}) {
    TrainConfig c = tiny_train();
    c.optim.method = method;
    c.optim.steps = 200;
    c.optim.lr = std::string(method) == "adam" ? 0.01 : 0.05;
    TrainResult r = train(c, d);
    const auto head = std::accumulate(r.loss_curve.begin(), r.loss_curve.begin() + 10, 0.0);
    const auto tail = std::accumulate(r.loss_curve.end() - 10, r.loss_curve.end(), 0.0);
    EXPECT_LT(tail, head) << method;
  }
}

TEST(Train, DivergenceReportsStep) {
  TrainConfig c = tiny_train();
  c.optim.lr = 1e200;
  c.optim.grad_clip = 0.0;
  try {
    train(c, generate_dataset(tiny_spec()));
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    EXPECT_GE(e.index(), 0);
    EXPECT_LT(e.index(), 10);
  }
}

TEST(Train, ProgressCallbackSeesEveryStep) {
  std::vector<std::size_t> steps;
  train(tiny_train(), generate_dataset(tiny_spec()),
        [&](const StepStats& s) { steps.push_back(s.step); });
  ASSERT_EQ(steps.size(), 10u);
  for (std::size_t i = 0; i < steps.size(); ++i) EXPECT_EQ(steps[i], i);
}

TEST(Evaluate, RejectsEmptyAndMismatchedData) {
  TrainConfig c = tiny_train();
  std::mt19937_64 rng(2);
  ModelParams p = init_model(c.model, rng);
  Dataset d = generate_dataset(tiny_spec());
  Dataset empty = d;
  empty.samples.clear();
  EXPECT_THROW(evaluate(p, c.model, empty), Error);
  ModelConfig wrong = c.model;
  wrong.n_au = 3;
  EXPECT_THROW(evaluate(init_model(wrong, rng), wrong, d), ConfigError);
}

TEST(Evaluate, RandomWeightsReportedNearChance) {
  TrainConfig c = tiny_train();
  std::mt19937_64 rng(3);
  Evaluation e = evaluate(init_model(c.model, rng), c.model, generate_dataset(tiny_spec()));
  EXPECT_EQ(e.report.f1.size(), 2u);
  EXPECT_EQ(e.probabilities.size(), 24u);
  RecordProperty("random_f1", std::to_string(e.report.average));
}

TEST(Evaluate, CheckpointRoundTripGivesSameReport) {
  TrainConfig c = tiny_train();
  Dataset d = generate_dataset(tiny_spec());
  TrainResult r = train(c, d);
  const fs::path path = scratch("model.ckpt");
  save_checkpoint(path, Checkpoint{c.model, r.params, {}});
  Checkpoint back = load_checkpoint(path);
  Evaluation a = evaluate(r.params, c.model, d), b = evaluate(back.params, back.config, d);
  EXPECT_EQ(a.probabilities, b.probabilities);
  EXPECT_EQ(a.report.f1, b.report.f1);
  fs::remove(path);
}

TEST(Folds, NineSubjectsThreeFolds) {
  std::vector<int> subjects{0, 1, 2, 3, 4, 5, 6, 7, 8};
  auto folds = subject_folds(subjects, 3, 7);
  ASSERT_EQ(folds.size(), 3u);
  std::set<int> seen;
  for (const auto& f : folds) {
    EXPECT_EQ(f.size(), 3u);
    for (int s : f) EXPECT_TRUE(seen.insert(s).second) << "subject " << s << " in two folds";
  }
  EXPECT_EQ(seen.size(), 9u);
  EXPECT_EQ(subject_folds(subjects, 3, 7), folds);
}

TEST(Folds, UnevenSizesDifferByAtMostOne) {
  std::vector<int> subjects{3, 1, 4, 15, 9, 26, 5};
  auto folds = subject_folds(subjects, 3, 1);
  std::size_t lo = 100, hi = 0;
  for (const auto& f : folds) {
    lo = std::min(lo, f.size());
    hi = std::max(hi, f.size());
  }
  EXPECT_LE(hi - lo, 1u);
}

TEST(Folds, TooFewSubjectsRejected) {
  EXPECT_THROW(subject_folds({1, 2}, 3, 1), ConfigError);
}

TEST(CrossValidate, SubjectExclusiveAndMeanOfFolds) {
  TrainConfig c = tiny_train();
  CrossValidation cv = cross_validate(c, generate_dataset(tiny_spec()), 3);
  ASSERT_EQ(cv.folds.size(), 3u);
  double sum = 0.0;
  std::set<int> tested;
  for (const auto& f : cv.folds) {
    for (int s : f.test_subjects) {
      EXPECT_EQ(std::count(f.train_subjects.begin(), f.train_subjects.end(), s), 0);
      tested.insert(s);
    }
    EXPECT_EQ(f.train_subjects.size() + f.test_subjects.size(), 6u);
    sum += f.report.average;
  }
  EXPECT_EQ(tested.size(), 6u);
  EXPECT_DOUBLE_EQ(cv.mean_f1, sum / 3.0);
}

TEST(CrossDomain, TrainsOnExactlyTwoSourceFolds) {
  TrainConfig c = tiny_train();
  SyntheticSpec target_spec = tiny_spec();
  target_spec.seed = 11;
  target_spec.brightness = 0.2;
  CrossDomainResult r =
      cross_domain_eval(c, generate_dataset(tiny_spec()), generate_dataset(target_spec));
  ASSERT_EQ(r.source_folds.size(), 3u);
  EXPECT_EQ(r.train_folds, (std::vector<std::size_t>{0, 1}));
  std::vector<int> expect = r.source_folds[0];
  expect.insert(expect.end(), r.source_folds[1].begin(), r.source_folds[1].end());
  std::sort(expect.begin(), expect.end());
  std::vector<int> got = r.train_subjects;
  std::sort(got.begin(), got.end());
  EXPECT_EQ(got, expect);
  for (int s : r.source_folds[2]) EXPECT_EQ(std::count(got.begin(), got.end(), s), 0);
  EXPECT_EQ(r.target.f1.size(), 2u);
}

TEST(CrossDomain, MismatchedAUsRejected) {
  SyntheticSpec other = tiny_spec();
  other.au_ids = {1, 12, 17};
  other.rates = {0.5, 0.5, 0.5};
  EXPECT_THROW(cross_domain_eval(tiny_train(), generate_dataset(tiny_spec()), generate_dataset(other)),
               ConfigError);
}
