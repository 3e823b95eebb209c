#include <gtest/gtest.h>

#include <cmath>
#include <memory>
#include <vector>

#include "autt/autodiff.hpp"
#include "autt/error.hpp"
#include "autt/gradcheck.hpp"
#include "autt/tensor.hpp"
#include "helpers.hpp"

using namespace autt;
using autt::testing::jacobian_error;
using autt::testing::random_tensor;

TEST(Tensor, ShapeAndDataLengthAgree) {
  Tensor t({2, 3, 4});
  EXPECT_EQ(t.numel(), 24u);
  EXPECT_EQ(shape_numel(t.shape()), t.numel());
  EXPECT_THROW(Tensor({2, 2}, {1.0, 2.0, 3.0}), ShapeError);
  EXPECT_THROW(t.reshaped({5, 5}), ShapeError);
  EXPECT_EQ(t.reshaped({6, 4}).shape(), (Shape{6, 4}));
}

TEST(Evaluate, MatmulShapeContract) {
  Tape t(false);
  Var a = t.constant(Tensor::matrix({{1, 2, 3}, {4, 5, 6}}));
  Var b = t.constant(Tensor::column({1, 0, -1}));
  Var c = matmul(a, b);
  EXPECT_EQ(c.shape(), (Shape{2, 1}));
  EXPECT_EQ(c.value(), Tensor::column({-2, -2}));
}

TEST(Evaluate, IdentityMatmulLeavesOperand) {
  std::mt19937_64 rng(1);
  Tape t(false);
  Tensor x = random_tensor({4, 3}, rng);
  EXPECT_EQ(matmul(t.constant(Tensor::identity(4)), t.constant(x)).value(), x);
}

TEST(Evaluate, ScalarTimesMatrix) {
  Tape t(false);
  Var r = scale(t.constant(Tensor::matrix({{1, 2}, {3, 4}})), 2.0);
  EXPECT_EQ(r.value(), Tensor::matrix({{2, 4}, {6, 8}}));
}

TEST(Evaluate, ShapeMismatchNamesShapesAndOp) {
  Tape t(false);
  Var a = t.constant(Tensor({2, 3}));
  Var b = t.constant(Tensor({2, 3}));
  try {
    matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos);
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
  }
  EXPECT_THROW(add(t.constant(Tensor({2, 3})), t.constant(Tensor({3, 2}))), ShapeError);
}

TEST(Evaluate, BroadcastOnlyOverLeadingOnes) {
  Tape t(false);
  Var a = t.constant(Tensor::matrix({{1, 2}, {3, 4}}));
  Var row = t.constant(Tensor::matrix({{10, 20}}));
  EXPECT_EQ(add(a, row).value(), Tensor::matrix({{11, 22}, {13, 24}}));
  Var col = t.constant(Tensor::column({1, 2}));
  EXPECT_THROW(add(a, col), ShapeError);
}

TEST(Backward, SumOfLeafGivesOnes) {
  Tape t;
  Var w = t.parameter(Tensor::matrix({{1, -2}, {3, 0.5}}));
  Tensor g = t.backward(sum_all(w)).of(w);
  EXPECT_EQ(g, Tensor::ones({2, 2}));
}

TEST(Backward, SquareAtThree) {
  Tape t;
  Var w = t.parameter(Tensor::scalar(3.0));
  EXPECT_DOUBLE_EQ(t.backward(mul(w, w)).of(w).item(), 6.0);
}

TEST(Backward, UnreachedLeafHasZeroGradient) {
  Tape t;
  Var w = t.parameter(Tensor::scalar(3.0));
  Var u = t.parameter(Tensor::matrix({{1, 2}}));
  Gradients g = t.backward(mul(w, w));
  EXPECT_EQ(g.of(u), Tensor::zeros({1, 2}));
}

TEST(Backward, NonScalarRootRejected) {
  Tape t;
  Var w = t.parameter(Tensor::matrix({{1, 2}}));
  EXPECT_THROW(t.backward(scale(w, 2.0)), ShapeError);
}

TEST(Backward, TwiceGivesIdenticalGradients) {
  std::mt19937_64 rng(2);
  Tape t;
  Var a = t.parameter(random_tensor({3, 4}, rng));
  Var b = t.parameter(random_tensor({4, 2}, rng));
  Var root = sum_all(sigmoid(matmul(a, b)));
  Gradients g1 = t.backward(root);
  Gradients g2 = t.backward(root);
  EXPECT_EQ(g1.of(a), g2.of(a));
  EXPECT_EQ(g1.of(b), g2.of(b));
}

TEST(FiniteDiff, SquareAtThree) {
  Tensor g = finite_diff_gradient([](const Tensor& x) { return x[0] * x[0]; }, Tensor::scalar(3.0),
                                  1e-5);
  EXPECT_NEAR(g.item(), 6.0, 1e-6);
}

TEST(FiniteDiff, ConstantFunctionIsZero) {
  Tensor g = finite_diff_gradient([](const Tensor&) { return 4.0; }, Tensor::column({1, 2, 3}),
                                  1e-5);
  EXPECT_EQ(g, Tensor::zeros({3, 1}));
}

TEST(FiniteDiff, ProductOfTwo) {
  Tensor g = finite_diff_gradient([](const Tensor& x) { return x[0] * x[1]; },
                                  Tensor::column({2, 5}), 1e-5);
  EXPECT_NEAR(g[0], 5.0, 1e-8);
  EXPECT_NEAR(g[1], 2.0, 1e-8);
}

TEST(FiniteDiff, NonFiniteValueNamesCoordinate) {
  auto f = [](const Tensor& x) { return x[1] > 0.5 ? std::log(-1.0) : 0.0; };
  try {
    finite_diff_gradient(f, Tensor::column({0.0, 0.5}), 1e-3);
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.index(), 1);
  }
}

// Every primitive against finite differences on inputs in [-1, 1].
class PrimitiveGradient : public ::testing::Test {
 protected:
  std::mt19937_64 rng{11};
  void expect_close(const autt::testing::VarFn& f, const Tensor& x) {
    EXPECT_LT(jacobian_error(f, x, rng), 1e-5);
  }
};

TEST_F(PrimitiveGradient, Matmul) {
  Tensor other = random_tensor({4, 2}, rng);
  expect_close([&](Tape& t, const Var& x) { return matmul(x, t.constant(other)); },
               random_tensor({3, 4}, rng));
  expect_close([&](Tape& t, const Var& x) { return matmul(t.constant(other), x); },
               random_tensor({2, 3}, rng));
}

TEST_F(PrimitiveGradient, ElementwiseBinary) {
  Tensor other = random_tensor({3, 4}, rng);
  Tensor row = random_tensor({1, 4}, rng);
  expect_close([&](Tape& t, const Var& x) { return add(x, t.constant(other)); },
               random_tensor({3, 4}, rng));
  expect_close([&](Tape& t, const Var& x) { return sub(t.constant(other), x); },
               random_tensor({3, 4}, rng));
  expect_close([&](Tape& t, const Var& x) { return mul(x, t.constant(other)); },
               random_tensor({3, 4}, rng));
  // Broadcast operand receives the summed gradient.
  expect_close([&](Tape& t, const Var& x) { return mul(t.constant(other), x); },
               random_tensor({1, 4}, rng));
  expect_close([&](Tape& t, const Var& x) { return add(x, t.constant(row)); },
               random_tensor({3, 4}, rng));
}

TEST_F(PrimitiveGradient, ScalarOpsAndLayout) {
  Tensor x = random_tensor({3, 4}, rng);
  expect_close([](Tape&, const Var& v) { return scale(v, -1.7); }, x);
  expect_close([](Tape&, const Var& v) { return add_scalar(v, 0.3); }, x);
  expect_close([](Tape&, const Var& v) { return transpose(v); }, x);
  expect_close([](Tape&, const Var& v) { return reshape(v, {2, 6}); }, x);
}

TEST_F(PrimitiveGradient, Reductions) {
  Tensor x = random_tensor({3, 4}, rng);
  expect_close([](Tape&, const Var& v) { return sum(v, 0); }, x);
  expect_close([](Tape&, const Var& v) { return sum(v, 1); }, x);
  expect_close([](Tape&, const Var& v) { return mean(v, 0); }, x);
  expect_close([](Tape&, const Var& v) { return mean(v, 1); }, x);
  expect_close([](Tape&, const Var& v) { return mean_all(v); }, x);
}

TEST_F(PrimitiveGradient, Nonlinearities) {
  Tensor x = random_tensor({3, 4}, rng);
  expect_close([](Tape&, const Var& v) { return exp(v); }, x);
  expect_close([](Tape&, const Var& v) { return sigmoid(v); }, x);
  expect_close([](Tape&, const Var& v) { return log(v); }, random_tensor({3, 4}, rng, 0.2, 1.0));
  // Keep the kinks of relu and max away from the sample points.
  Tensor away = random_tensor({3, 4}, rng, 0.05, 1.0);
  for (std::size_t i = 0; i < away.numel(); i += 2) away[i] = -away[i];
  expect_close([](Tape&, const Var& v) { return relu(v); }, away);
  expect_close([](Tape&, const Var& v) { return max_const(v, 0.02); }, away);
  expect_close([](Tape&, const Var& v) { return gelu(v); }, x);
  expect_close([](Tape&, const Var& v) { return pow_const(v, 1.5); },
               random_tensor({2, 3}, rng, 0.2, 1.0));
}

TEST_F(PrimitiveGradient, GatherAndScatter) {
  auto idx = std::make_shared<const std::vector<std::size_t>>(std::vector<std::size_t>{5, 0, 5, 3, 1});
  expect_close([&](Tape&, const Var& v) { return gather(v, idx, {5}); },
               random_tensor({2, 3}, rng));
  expect_close([&](Tape&, const Var& v) { return scatter_add(v, idx, {2, 3}); },
               random_tensor({5}, rng));
  Tensor other = random_tensor({2, 2}, rng);
  auto multi = std::make_shared<const std::vector<GatherIndex>>(
      std::vector<GatherIndex>{{0, 1}, {1, 3}, {0, 0}, {1, 0}});
  expect_close(
      [&](Tape& t, const Var& v) {
        std::vector<Var> src{v, t.constant(other)};
        return gather(src, multi, {2, 2});
      },
      random_tensor({1, 3}, rng));
}

TEST_F(PrimitiveGradient, DilatedConvolution) {
  Tensor kernel = random_tensor({2, 3, 3}, rng);
  Tensor image = random_tensor({5, 4, 2}, rng);
  for (std::size_t rate : {1u, 2u, 3u}) {
    expect_close([&](Tape& t, const Var& v) { return conv2d_dilated(v, t.constant(kernel), rate); },
                 image);
    expect_close([&](Tape& t, const Var& k) { return conv2d_dilated(t.constant(image), k, rate); },
                 kernel);
  }
}

TEST_F(PrimitiveGradient, Composites) {
  Tensor x = random_tensor({4, 3}, rng);
  Tensor y = random_tensor({4, 3}, rng, 0.5, 1.5);
  expect_close([&](Tape& t, const Var& v) { return div(v, t.constant(y)); }, x);
  expect_close([&](Tape& t, const Var& v) { return div(t.constant(x), v); }, y);
  expect_close([](Tape&, const Var& v) { return slice_rows(v, 1, 2); }, x);
  expect_close([](Tape&, const Var& v) { return slice_cols(v, 1, 2); }, x);
  std::vector<std::size_t> order{2, 0, 3, 1};
  expect_close([&](Tape&, const Var& v) { return permute_rows(v, order); }, x);
  expect_close(
      [&](Tape& t, const Var& v) {
        std::vector<Var> parts{v, t.constant(y)};
        return concat_rows(parts);
      },
      x);
  expect_close(
      [&](Tape& t, const Var& v) {
        std::vector<Var> parts{t.constant(y), v};
        return concat_cols(parts);
      },
      x);
}

TEST(Tape, ConstantsAreNotRecorded) {
  Tape t;
  Var a = t.constant(Tensor::ones({2, 2}));
  Var b = exp(scale(a, 2.0));
  EXPECT_FALSE(b.tracked());
  EXPECT_EQ(t.size(), 0u);
  Var w = t.parameter(Tensor::ones({2, 2}));
  Var c = mul(w, b);
  EXPECT_TRUE(c.tracked());
}

TEST(Tape, NonRecordingTapeEvaluatesOnly) {
  Tape t(false);
  Var w = t.parameter(Tensor::scalar(2.0));
  EXPECT_FALSE(w.tracked());
  EXPECT_DOUBLE_EQ(mul(w, w).value().item(), 4.0);
}

TEST(Determinism, RepeatedEvaluationIsBitIdentical) {
  std::mt19937_64 rng(5);
  Tensor a = random_tensor({6, 5}, rng), b = random_tensor({5, 7}, rng);
  auto run = [&] {
    Tape t(false);
    return sigmoid(matmul(t.constant(a), t.constant(b))).value();
  };
  EXPECT_EQ(run(), run());
}
