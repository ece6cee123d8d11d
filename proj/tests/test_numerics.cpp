#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "test_support.hpp"

namespace densessm {
namespace {

using test::param;
using test::randn;
using test::weighted_sum;

TEST(Tensor, ShapeAndConstruction) {
  Tensor<double> t(Shape{2, 3});
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_EQ(Tensor<double>::scalar(4.0).item(), 4.0);
  EXPECT_THROW(Tensor<double>(Shape{2, 2}, {1.0, 2.0, 3.0}), DimensionError);
  EXPECT_THROW(Tensor<double>::matrix({{1.0, 2.0}, {3.0}}), DimensionError);
  EXPECT_THROW(t.reshape({4}), DimensionError);
  EXPECT_EQ(t.reshape({3, 2}).shape(), (Shape{3, 2}));
  EXPECT_THROW(t.item(), DimensionError);
}

TEST(Tensor, FiniteCheck) {
  Tensor<double> t = Tensor<double>::vector({1.0, -2.0, 0.0});
  EXPECT_TRUE(t.all_finite());
  t[1] = std::numeric_limits<double>::infinity();
  EXPECT_FALSE(t.all_finite());
  t[1] = -std::numeric_limits<double>::infinity();
  EXPECT_FALSE(t.all_finite());
  t[1] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_FALSE(t.all_finite());
  EXPECT_THROW(require_finite(t, "test"), NumericError);
}

TEST(Tensor, DtypeNames) {
  EXPECT_EQ(parse_dtype("f32"), DType::f32);
  EXPECT_EQ(parse_dtype("float64"), DType::f64);
  EXPECT_THROW(parse_dtype("f16"), ConfigError);
  EXPECT_EQ(dtype_name(DType::f64), "f64");
}

TEST(Ops, ElementwiseValues) {
  Var<double> a(Tensor<double>::vector({-1.0, 0.0, 2.0}));
  Var<double> b(Tensor<double>::vector({3.0, 4.0, -5.0}));
  EXPECT_EQ(add(a, b).value(), Tensor<double>::vector({2.0, 4.0, -3.0}));
  EXPECT_EQ(sub(a, b).value(), Tensor<double>::vector({-4.0, -4.0, 7.0}));
  EXPECT_EQ(mul(a, b).value(), Tensor<double>::vector({-3.0, 0.0, -10.0}));
  EXPECT_EQ(elementwise(Elementwise::mul, a, b).value(), mul(a, b).value());
  EXPECT_THROW(elementwise(Elementwise::add, a), ArgumentError);
  EXPECT_THROW(elementwise(Elementwise::exp, a, b), ArgumentError);

  const auto s = sigmoid(a).value();
  EXPECT_DOUBLE_EQ(s[0], 1.0 / (1.0 + std::exp(1.0)));
  EXPECT_DOUBLE_EQ(s[1], 0.5);
  const auto si = silu(a).value();
  EXPECT_DOUBLE_EQ(si[2], 2.0 / (1.0 + std::exp(-2.0)));
  const auto sp = softplus(a).value();
  EXPECT_NEAR(sp[1], std::log(2.0), 1e-15);
  EXPECT_EQ(relu(a).value(), Tensor<double>::vector({0.0, 0.0, 2.0}));
  EXPECT_EQ(scale(a, 2.0).value(), Tensor<double>::vector({-2.0, 0.0, 4.0}));
}

TEST(Ops, ScalarHelpersAreStableAtExtremes) {
  EXPECT_EQ(sigmoid_scalar(-800.0), 0.0);
  EXPECT_EQ(sigmoid_scalar(800.0), 1.0);
  EXPECT_EQ(softplus_scalar(800.0), 800.0);
  EXPECT_GT(softplus_scalar(-30.0), 0.0);
  EXPECT_TRUE(std::isfinite(silu_scalar(-800.0)));
}

TEST(Ops, SuffixBroadcast) {
  Var<double> x(Tensor<double>::matrix({{1.0, 2.0}, {3.0, 4.0}, {5.0, 6.0}}));
  Var<double> bias(Tensor<double>::vector({10.0, 20.0}));
  EXPECT_EQ(add(x, bias).value(), Tensor<double>::matrix({{11.0, 22.0}, {13.0, 24.0}, {15.0, 26.0}}));
  EXPECT_EQ(add(bias, x).value(), add(x, bias).value());
  EXPECT_EQ(sub(bias, x).value(), Tensor<double>::matrix({{9.0, 18.0}, {7.0, 16.0}, {5.0, 14.0}}));
  Var<double> bad(Tensor<double>::vector({1.0, 2.0, 3.0}));
  EXPECT_THROW(add(x, bad), DimensionError);
}

TEST(Ops, BroadcastGradientsSumOverRepeats) {
  Var<double> x(Tensor<double>(Shape{4, 3}), true);
  Var<double> bias(Tensor<double>::vector({1.0, 2.0, 3.0}), true);
  backward(sum(add(x, bias)));
  EXPECT_EQ(bias.grad(), Tensor<double>::vector({4.0, 4.0, 4.0}));
}

TEST(Ops, MatmulAgainstHandProduct) {
  Var<double> a(Tensor<double>::matrix({{1.0, 2.0}, {3.0, 4.0}}));
  Var<double> b(Tensor<double>::matrix({{5.0, 6.0, 7.0}, {8.0, 9.0, 10.0}}));
  EXPECT_EQ(matmul(a, b).value(), Tensor<double>::matrix({{21.0, 24.0, 27.0}, {47.0, 54.0, 61.0}}));
  Var<double> bt(Tensor<double>::matrix({{5.0, 8.0}, {6.0, 9.0}, {7.0, 10.0}}));
  EXPECT_EQ(matmul_nt(a, bt).value(), matmul(a, b).value());
  EXPECT_THROW(matmul(b, b), DimensionError);

  // Leading batch axes are flattened.
  Var<double> a3(a.value().reshape({1, 2, 2}));
  EXPECT_EQ(matmul(a3, b).value().shape(), (Shape{1, 2, 3}));
}

TEST(Ops, RmsNormMatchesFormula) {
  Var<double> x(Tensor<double>::matrix({{3.0, 4.0}}));
  Var<double> w(Tensor<double>::vector({1.0, 2.0}));
  const auto y = rms_norm(x, w, 0.0).value();
  const double rms = std::sqrt((9.0 + 16.0) / 2.0);
  EXPECT_DOUBLE_EQ(y[0], 3.0 / rms);
  EXPECT_DOUBLE_EQ(y[1], 2.0 * 4.0 / rms);
  EXPECT_THROW(rms_norm(x, Var<double>(Tensor<double>::vector({1.0})), 0.0), DimensionError);
}

TEST(Ops, CrossEntropyMatchesLogSoftmax) {
  Var<double> logits(Tensor<double>::matrix({{1.0, 2.0, 3.0}, {0.0, 0.0, 0.0}}));
  const std::vector<std::int32_t> targets{2, 0};
  const double l0 = -(3.0 - std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0)));
  const double l1 = std::log(3.0);
  EXPECT_NEAR(cross_entropy_logits(logits, targets).value().item(), 0.5 * (l0 + l1), 1e-14);
  const std::vector<std::int32_t> bad{3, 0};
  EXPECT_THROW(cross_entropy_logits(logits, bad), IndexError);
  const std::vector<std::int32_t> short_targets{1};
  EXPECT_THROW(cross_entropy_logits(logits, short_targets), DimensionError);
}

TEST(Ops, CrossEntropyUniformAndSaturated) {
  Var<double> uniform(Tensor<double>(Shape{1, 4}));
  const std::vector<std::int32_t> t{1};
  EXPECT_NEAR(cross_entropy_logits(uniform, t).value().item(), std::log(4.0), 1e-15);
  Var<double> sure(Tensor<double>::matrix({{0.0, 1e6, 0.0, 0.0}}));
  EXPECT_NEAR(cross_entropy_logits(sure, t).value().item(), 0.0, 1e-12);
}

TEST(Ops, CrossEntropyHandlesHugeLogits) {
  Var<double> logits(Tensor<double>::matrix({{1000.0, 0.0}}));
  const std::vector<std::int32_t> t{1};
  EXPECT_NEAR(cross_entropy_logits(logits, t).value().item(), 1000.0, 1e-9);
}

TEST(Ops, EmbeddingGathersRows) {
  Var<double> table(Tensor<double>::matrix({{0.0, 1.0}, {2.0, 3.0}, {4.0, 5.0}}));
  Tokens tok(1, 3, {2, 0, 2});
  EXPECT_EQ(embedding(table, tok).value(), Tensor<double>({1, 3, 2}, {4.0, 5.0, 0.0, 1.0, 4.0, 5.0}));
  Tokens bad(1, 1, {3});
  EXPECT_THROW(embedding(table, bad), IndexError);
}

TEST(Ops, SliceConcatReshape) {
  Var<double> x(Tensor<double>::matrix({{1.0, 2.0, 3.0}, {4.0, 5.0, 6.0}}));
  EXPECT_EQ(slice_last(x, 1, 2).value(), Tensor<double>::matrix({{2.0, 3.0}, {5.0, 6.0}}));
  EXPECT_THROW(slice_last(x, 2, 2), DimensionError);
  EXPECT_EQ(concat_last<double>({slice_last(x, 0, 1), slice_last(x, 1, 2)}).value(), x.value());
  EXPECT_EQ(slice_rows(x, 1, 1).value(), Tensor<double>::matrix({{4.0, 5.0, 6.0}}));
  EXPECT_THROW(slice_rows(x, 1, 2), DimensionError);
  EXPECT_EQ(reshape(x, {3, 2}).value().shape(), (Shape{3, 2}));
  EXPECT_THROW(concat_last<double>({}), ArgumentError);
}

TEST(Autograd, NonFiniteForwardRaises) {
  Var<double> x(Tensor<double>::vector({1000.0}));
  EXPECT_THROW(exp(x), NumericError);
}

TEST(Autograd, BackwardRequiresScalarOnTape) {
  Var<double> x = param({3}, 1);
  EXPECT_THROW(backward(exp(x)), UsageError);  // not a scalar
  Var<double> c(Tensor<double>::scalar(1.0));
  EXPECT_THROW(backward(c), UsageError);
}

TEST(Autograd, LeafGradientsAccumulate) {
  Var<double> x(Tensor<double>::vector({2.0}), true);
  backward(sum(mul(x, x)));
  backward(sum(mul(x, x)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 8.0);
  x.zero_grad();
  EXPECT_DOUBLE_EQ(x.grad()[0], 0.0);
}

TEST(Autograd, SharedSubexpressionCountsEveryPath) {
  Var<double> x(Tensor<double>::vector({3.0}), true);
  Var<double> y = mul(x, x);
  backward(sum(add(y, y)));  // d/dx 2x^2 = 4x
  EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);
}

TEST(Autograd, NoGradGuardSkipsRecording) {
  Var<double> x = param({2}, 3);
  {
    NoGradGuard g;
    EXPECT_FALSE(grad_enabled());
    EXPECT_FALSE(exp(x).requires_grad());
  }
  EXPECT_TRUE(grad_enabled());
  EXPECT_TRUE(exp(x).requires_grad());
}

TEST(Autograd, OnlyLeavesMutate) {
  Var<double> x = param({2}, 3);
  Var<double> y = exp(x);
  EXPECT_THROW(y.mutable_value(), UsageError);
  EXPECT_THROW(x.set_value(Tensor<double>(Shape{3})), DimensionError);
}

TEST(Autograd, DeepChainDoesNotOverflowStack) {
  Var<double> x(Tensor<double>::vector({1.0}), true);
  Var<double> y = x;
  for (int i = 0; i < 200000; ++i) y = add(y, Var<double>(Tensor<double>::vector({0.0})));
  backward(sum(y));
  EXPECT_DOUBLE_EQ(x.grad()[0], 1.0);
}

TEST(GradCheck, RejectsSinglePrecision) {
  Var<float> x(Tensor<float>::vector({1.0f}), true);
  EXPECT_THROW(finite_diff_check<float>([&] { return sum(x); }, x, 1e-3f), PrecisionError);
}

// Central differences against the tape for every differentiable op.
class OpGradient : public ::testing::TestWithParam<const char*> {};

// a is [3, 4]; b is [12] and is reshaped as each op needs.
Var<double> op_loss(const std::string& op, const Var<double>& a, const Var<double>& b) {
  const Var<double> b34 = reshape(b, {3, 4});
  if (op == "add") return weighted_sum(add(a, b34));
  if (op == "sub") return weighted_sum(sub(a, b34));
  if (op == "mul") return weighted_sum(mul(a, b34));
  if (op == "exp") return weighted_sum(exp(scale(a, 0.5)));
  if (op == "sigmoid") return weighted_sum(sigmoid(a));
  if (op == "silu") return weighted_sum(silu(a));
  if (op == "softplus") return weighted_sum(softplus(a));
  if (op == "matmul") return weighted_sum(matmul(a, reshape(b, {4, 3})));
  if (op == "matmul_nt") return weighted_sum(matmul_nt(a, b34));
  if (op == "mean") return mean(mul(a, b34));
  if (op == "rms_norm") return weighted_sum(rms_norm(a, reshape(slice_rows(b34, 0, 1), {4}), 1e-6));
  if (op == "cross_entropy") {
    const std::vector<std::int32_t> t{1, 3, 0};
    return cross_entropy_logits(add(a, b34), t);
  }
  if (op == "slice_concat") return weighted_sum(concat_last<double>({slice_last(a, 2, 2), slice_last(b34, 0, 1)}));
  if (op == "slice_rows") return weighted_sum(concat_last<double>({slice_rows(a, 1, 2), slice_rows(b34, 0, 2)}));
  throw ArgumentError("unknown op " + op);
}

TEST_P(OpGradient, MatchesCentralDifferences) {
  const std::string op = GetParam();
  Var<double> a = param({3, 4}, 11);
  Var<double> b = param({12}, 12);
  for (Var<double>* p : {&a, &b}) {
    const auto r = finite_diff_check<double>([&] { return op_loss(op, a, b); }, *p, 1e-6);
    EXPECT_LT(r.max_rel_err, 1e-6) << op << " worst index " << r.worst_index;
  }
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient,
                         ::testing::Values("add", "sub", "mul", "exp", "sigmoid", "silu", "softplus", "matmul",
                                           "matmul_nt", "mean", "rms_norm", "cross_entropy", "slice_concat",
                                           "slice_rows"));

TEST(GradCheck, BroadcastAddAndEmbedding) {
  Var<double> x = param({2, 3, 4}, 21);
  Var<double> bias = param({4}, 22);
  auto r = finite_diff_check<double>([&] { return weighted_sum(mul(add(x, bias), bias)); }, bias, 1e-6);
  EXPECT_LT(r.max_rel_err, 1e-6);
  Var<double> table = param({5, 3}, 23);
  Tokens tok(2, 3, {0, 4, 4, 1, 2, 0});
  r = finite_diff_check<double>([&] { return weighted_sum(embedding(table, tok)); }, table, 1e-6);
  EXPECT_LT(r.max_rel_err, 1e-6);
}

TEST(GradCheck, ReportsAWrongGradient) {
  // A value whose recorded backward is deliberately wrong must be caught.
  Var<double> x = param({3}, 5);
  auto wrong = [&] {
    Tensor<double> out = x.value();
    return sum(record<double>(std::move(out), {x}, "bad", [](Node<double>& self) {
      double* g = self.parent_grad(0);
      for (std::size_t i = 0; i < self.value.numel(); ++i) g[i] += 2.0 * self.grad[i];
    }));
  };
  EXPECT_GT(finite_diff_check<double>(wrong, x, 1e-6).max_rel_err, 0.5);
}

}  // namespace
}  // namespace densessm
