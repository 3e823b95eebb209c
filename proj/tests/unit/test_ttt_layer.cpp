#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "autt/error.hpp"
#include "autt/gradcheck.hpp"
#include "autt/ttt.hpp"
#include "helpers.hpp"

using namespace autt;
using autt::testing::random_tensor;

namespace {

// Scalar head with every projection 1, W0 = 0 and eta = 0.5.
TTTLayerParams scalar_layer() { return identity_ttt_params(1, 0.5, false); }

Tensor seq(std::initializer_list<double> values) { return Tensor::column(values); }

TTTLayerParams random_layer(std::size_t dim, std::size_t heads, double eta, std::mt19937_64& rng) {
  return init_ttt_params(dim, heads, TTTInit{eta, 0.3}, rng);
}

}  // namespace

TEST(ProjectViews, IdentityProjectionsCopyToken) {
  Tensor x = Tensor::column({0.5, -1.0, 2.0});
  Views v = project_views(x, identity_ttt_params(3, 1.0, false));
  EXPECT_EQ(v.k.values(), x.values());
  EXPECT_EQ(v.v.values(), x.values());
  EXPECT_EQ(v.q.values(), x.values());
}

TEST(ProjectViews, ZeroTokenGivesZeroViews) {
  std::mt19937_64 rng(1);
  Views v = project_views(Tensor::column({0, 0, 0, 0}), random_layer(4, 2, 1.0, rng));
  for (const Tensor* t : {&v.k, &v.v, &v.q})
    for (double x : t->data()) EXPECT_EQ(x, 0.0);
}

TEST(ProjectViews, ScalarProjection) {
  TTTLayerParams p = scalar_layer();
  p.theta_K = Tensor::matrix({{2}});
  EXPECT_DOUBLE_EQ(project_views(seq({3}), p).k.item(), 6.0);
}

TEST(ProjectViews, WrongDimensionRejected) {
  EXPECT_THROW(project_views(Tensor::column({1, 2}), identity_ttt_params(3, 1.0, false)),
               ShapeError);
}

TEST(InnerLoss, HandValues) {
  EXPECT_DOUBLE_EQ(inner_loss(Tensor::matrix({{0}}), seq({1}), seq({1})), 1.0);
  Tensor k = Tensor::column({0.3, -0.7});
  EXPECT_DOUBLE_EQ(inner_loss(Tensor::identity(2), k, k), 0.0);
  EXPECT_DOUBLE_EQ(inner_loss(Tensor::matrix({{2}}), seq({3}), seq({1})), 25.0);
}

TEST(InnerGrad, HandValues) {
  EXPECT_DOUBLE_EQ(inner_grad(Tensor::matrix({{0}}), seq({1}), seq({1})).item(), -2.0);
  Tensor W = Tensor::matrix({{1, 2}, {0, -1}});
  Tensor k = Tensor::column({1, 1});
  Tensor v = Tensor::column({3, -1});
  EXPECT_EQ(inner_grad(W, k, v), Tensor::zeros({2, 2}));
  EXPECT_DOUBLE_EQ(inner_grad(Tensor::matrix({{2}}), seq({3}), seq({1})).item(), 30.0);
}

TEST(InnerGrad, MatchesFiniteDifferences) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t d = 1 + trial % 6;
    Tensor W = random_tensor({d, d}, rng);
    Tensor k = random_tensor({d, 1}, rng);
    Tensor v = random_tensor({d, 1}, rng);
    Tensor numeric =
        finite_diff_gradient([&](const Tensor& w) { return inner_loss(w, k, v); }, W, 1e-5);
    EXPECT_LT(compare_gradients(inner_grad(W, k, v), numeric).max_relative_error, 1e-6);
  }
}

TEST(SequentialScan, SingleUnitToken) {
  std::vector<ScanState> trace;
  Tensor z = ttt_sequential_scan(seq({1}), scalar_layer(), &trace);
  EXPECT_EQ(z, seq({1}));
  ASSERT_EQ(trace.size(), 1u);
  EXPECT_EQ(trace[0].W.item(), 1.0);
  EXPECT_EQ(trace[0].step, 1u);
}

TEST(SequentialScan, ZeroTokenLeavesState) {
  std::vector<ScanState> trace;
  EXPECT_EQ(ttt_sequential_scan(seq({0}), scalar_layer(), &trace), seq({0}));
  EXPECT_EQ(trace[0].W.item(), 0.0);
}

TEST(SequentialScan, TwoTokens) {
  std::vector<ScanState> trace;
  EXPECT_EQ(ttt_sequential_scan(seq({1, 2}), scalar_layer(), &trace), seq({1, 2}));
  EXPECT_EQ(trace[0].W.item(), 1.0);
  EXPECT_EQ(trace[1].W.item(), 1.0);
  EXPECT_LT(trace[0].step, trace[1].step);
}

TEST(SequentialScan, EmptySequenceRejected) {
  EXPECT_THROW(ttt_sequential_scan(Tensor({0, 1}), scalar_layer()), ShapeError);
}

TEST(SequentialScan, DivergenceReportsTokenIndex) {
  TTTLayerParams p = scalar_layer();
  p.eta = Tensor::filled({1, 1}, 1e200);
  try {
    ttt_sequential_scan(seq({1, 1, 1, 1, 1, 1}), p);
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    EXPECT_GE(e.index(), 0);
    EXPECT_LT(e.index(), 6);
  }
}

TEST(MinibatchScan, BlockOfOneEqualsSequential) {
  EXPECT_EQ(ttt_minibatch_scan(seq({1, 2}), scalar_layer(), 1), seq({1, 2}));
}

TEST(MinibatchScan, BlockOfTwoHandRollout) {
  std::vector<ScanState> trace;
  EXPECT_EQ(ttt_minibatch_scan(seq({1, 2}), scalar_layer(), 2, &trace), seq({1, 10}));
  EXPECT_EQ(trace[0].W.item(), 1.0);
  EXPECT_EQ(trace[1].W.item(), 5.0);
}

TEST(MinibatchScan, SingleBlockUsesInitialState) {
  std::mt19937_64 rng(4);
  TTTLayerParams p = random_layer(4, 1, 0.2, rng);
  Tensor x = random_tensor({5, 4}, rng);
  std::vector<ScanState> trace;
  ttt_minibatch_scan(x, p, 9, &trace);
  // Every state is W0 minus eta times the running sum of gradients at W0.
  Tensor W = p.W0;
  Tensor acc({4, 4});
  for (std::size_t t = 0; t < 5; ++t) {
    Tensor tok({4}, {x.at(t, 0), x.at(t, 1), x.at(t, 2), x.at(t, 3)});
    Views v = project_views(tok, p);
    Tensor g = inner_grad(p.W0, v.k.reshaped({4, 1}), v.v.reshaped({4, 1}));
    for (std::size_t i = 0; i < 16; ++i) acc[i] += g[i];
    Tensor expect = p.W0;
    for (std::size_t i = 0; i < 16; ++i) expect[i] -= 0.2 * acc[i];
    EXPECT_LT(max_abs_diff(trace[t].W, expect), 1e-12);
  }
  EXPECT_EQ(ttt_minibatch_scan(x, p, 5), ttt_minibatch_scan(x, p, 100));
}

TEST(MinibatchScan, ZeroBlockSizeRejected) {
  EXPECT_THROW(ttt_minibatch_scan(seq({1}), scalar_layer(), 0), ConfigError);
}

TEST(MinibatchScan, BlockOfOneBitIdenticalOnRandomSequences) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t heads = 1 + trial % 3;
    const std::size_t dim = heads * (1 + trial % 4);
    const std::size_t len = 1 + (trial * 7) % 64;
    TTTLayerParams p = random_layer(dim, heads, 0.1, rng);
    Tensor x = random_tensor({len, dim}, rng);
    EXPECT_EQ(ttt_minibatch_scan(x, p, 1), ttt_sequential_scan(x, p));
  }
}

TEST(Scan, Causality) {
  std::mt19937_64 rng(6);
  TTTLayerParams p = random_layer(6, 2, 0.3, rng);
  Tensor x = random_tensor({12, 6}, rng);
  for (std::size_t b : {1u, 3u, 5u}) {
    Tensor base = ttt_minibatch_scan(x, p, b);
    for (std::size_t s = 0; s < 12; ++s) {
      Tensor y = x;
      for (std::size_t d = 0; d < 6; ++d) y.at(s, d) += 0.5;
      Tensor out = ttt_minibatch_scan(y, p, b);
      for (std::size_t t = 0; t < s; ++t)
        for (std::size_t d = 0; d < 6; ++d) ASSERT_EQ(out.at(t, d), base.at(t, d));
      bool changed = false;
      for (std::size_t d = 0; d < 6; ++d) changed |= out.at(s, d) != base.at(s, d);
      EXPECT_TRUE(changed);
    }
  }
}

TEST(Scan, ZeroEtaFreezesState) {
  std::mt19937_64 rng(7);
  TTTLayerParams p = random_layer(6, 3, 0.0, rng);
  Tensor x = random_tensor({9, 6}, rng);
  Tensor out = ttt_sequential_scan(x, p);
  const std::size_t dh = 2;
  for (std::size_t t = 0; t < 9; ++t) {
    Tensor tok({6});
    for (std::size_t d = 0; d < 6; ++d) tok[d] = x.at(t, d);
    Views v = project_views(tok, p);
    std::vector<double> cat(6, 0.0);
    for (std::size_t h = 0; h < 3; ++h)
      for (std::size_t r = 0; r < dh; ++r)
        for (std::size_t c = 0; c < dh; ++c)
          cat[h * dh + r] += p.W0.at(h * dh + r, c) * v.q[h * dh + c];
    for (std::size_t d = 0; d < 6; ++d) {
      double z = 0;
      for (std::size_t j = 0; j < 6; ++j) z += p.theta_O.at(d, j) * cat[j];
      EXPECT_NEAR(out.at(t, d), z, 1e-12);
    }
  }
}

TEST(Scan, TapeMatchesValueScan) {
  std::mt19937_64 rng(8);
  TTTLayerParams p = random_layer(8, 2, 0.2, rng);
  Tensor x = random_tensor({10, 8}, rng);
  for (std::size_t b : {1u, 4u, 10u}) {
    Tape tape(false);
    auto vars = p.map([&](const std::string&, const Tensor& t) { return tape.constant(t); });
    Tensor graph = ttt_scan(tape.constant(x), vars, b).value();
    EXPECT_LT(max_abs_diff(graph, ttt_minibatch_scan(x, p, b)), 1e-12);
  }
}

TEST(Scan, KernelMatchesValueScan) {
  std::mt19937_64 rng(9);
  TTTLayerParams p = random_layer(8, 4, 0.2, rng);
  Tensor x = random_tensor({11, 8}, rng);
  ScanKernelArgs<double> args{p.W0.data(), p.theta_K.data(), p.theta_V.data(), p.theta_Q.data(),
                              p.theta_O.data(), p.eta.item(), 8, 4};
  for (std::size_t b : {1u, 3u}) {
    std::vector<double> out(11 * 8);
    ttt_scan_kernel<double>(x.data(), 11, args, b, false, out);
    EXPECT_LT(max_abs_diff(Tensor({11, 8}, out), ttt_minibatch_scan(x, p, b)), 1e-12);
  }
  std::vector<double> seq_out(11 * 8);
  ttt_scan_kernel<double>(x.data(), 11, args, 1, true, seq_out);
  EXPECT_EQ(Tensor({11, 8}, seq_out), ttt_sequential_scan(x, p));
}

TEST(Scan, OuterGradientsThroughInnerUpdates) {
  std::mt19937_64 rng(10);
  TTTLayerParams p = random_layer(4, 2, 0.3, rng);
  Tensor x = random_tensor({7, 4}, rng);
  Tensor probe = random_tensor({7, 4}, rng);
  for (std::size_t b : {1u, 3u}) {
    auto loss_of = [&](Tape& tape, const TTTLayerVars& vars) {
      return sum_all(mul(ttt_scan(tape.constant(x), vars, b), tape.constant(probe)));
    };
    Tape tape;
    auto vars = p.map([&](const std::string&, const Tensor& t) { return tape.parameter(t); });
    Gradients grads = tape.backward(loss_of(tape, vars));

    std::vector<std::pair<std::string, Tensor>> analytic;
    vars.visit([&](const std::string& name, const Var& v) { analytic.emplace_back(name, grads.of(v)); });
    std::size_t group = 0;
    p.visit([&](const std::string& name, const Tensor& value) {
      Tensor numeric = finite_diff_gradient(
          [&](const Tensor& q) {
            TTTLayerParams moved = p;
            moved.visit([&](const std::string& n, Tensor& t) {
              if (n == name) t = q;
            });
            Tape t(false);
            auto cv = moved.map([&](const std::string&, const Tensor& v) { return t.constant(v); });
            return loss_of(t, cv).value().item();
          },
          value, 1e-6);
      EXPECT_LT(compare_gradients(analytic[group].second, numeric).max_relative_error, 1e-4)
          << name << " b=" << b;
      ++group;
    });
    EXPECT_EQ(group, 6u);
  }
}

TEST(Params, ValidationRejectsBadShapesAndNegativeEta) {
  std::mt19937_64 rng(11);
  TTTLayerParams p = random_layer(4, 2, 1.0, rng);
  EXPECT_NO_THROW(validate(p));
  TTTLayerParams bad = p;
  bad.eta = Tensor::filled({1, 1}, -0.1);
  EXPECT_THROW(validate(bad), ConfigError);
  bad = p;
  bad.theta_O = Tensor({3, 4});
  EXPECT_THROW(validate(bad), ShapeError);
  bad = p;
  bad.W0[0] = std::nan("");
  EXPECT_ANY_THROW(validate(bad));
  EXPECT_EQ(ttt_heads(p), 2u);
  EXPECT_EQ(ttt_head_dim(p), 2u);
  EXPECT_EQ(ttt_model_dim(p), 4u);
}
