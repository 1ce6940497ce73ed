#include <gtest/gtest.h>

#include <cmath>

#include "hyperpeft/error.hpp"
#include "hyperpeft/ops.hpp"
#include "hyperpeft/tensor.hpp"
#include "oracles.hpp"

namespace hyperpeft {
namespace {

TEST(Tensor, FromDataChecksLength) {
  EXPECT_THROW(Tensor::from_data({2, 3}, {1, 2, 3}), ShapeError);
  Tensor t = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(t.numel(), 4);
  EXPECT_DOUBLE_EQ(t.at({1, 0}), 3.0);
  EXPECT_THROW(t.item(), ContractError);
}

TEST(Tensor, GradientsAccumulateAcrossBackwardCalls) {
  Tensor w = Tensor::from_data({2}, {1.0, -2.0}, true);
  backward(sum(mul(w, w)));
  backward(sum(mul(w, w)));
  EXPECT_DOUBLE_EQ(w.grad()[0], 4.0);
  EXPECT_DOUBLE_EQ(w.grad()[1], -8.0);
  w.zero_grad();
  EXPECT_FALSE(w.has_grad() && w.grad()[0] != 0.0);
}

TEST(Tensor, SharedSubexpressionGetsBothContributions) {
  Tensor x = Tensor::scalar(3.0, true);
  Tensor y = mul(x, x);          // 9
  Tensor z = add(y, mul(y, x));  // x^2 + x^3
  backward(z);
  EXPECT_DOUBLE_EQ(x.grad()[0], 2 * 3.0 + 3 * 9.0);
}

TEST(Tensor, NoGradGuardRecordsNothing) {
  Tensor w = Tensor::from_data({2}, {1.0, 2.0}, true);
  Tensor y;
  {
    NoGradGuard g;
    EXPECT_FALSE(grad_enabled());
    y = sum(mul(w, w));
  }
  EXPECT_TRUE(grad_enabled());
  EXPECT_FALSE(y.requires_grad());
  backward(y);
  EXPECT_FALSE(w.has_grad() && w.grad()[0] != 0.0);
}

TEST(Tensor, BackwardNeedsScalar) {
  Tensor w = Tensor::from_data({2}, {1.0, 2.0}, true);
  EXPECT_THROW(backward(mul(w, w)), ContractError);
}

TEST(Tensor, CloneDetaches) {
  Tensor w = Tensor::from_data({2}, {1.0, 2.0}, true);
  Tensor c = w.clone();
  EXPECT_FALSE(c.requires_grad());
  c.mutable_data()[0] = 5.0;
  EXPECT_DOUBLE_EQ(w.data()[0], 1.0);
  EXPECT_TRUE(w.clone_leaf().requires_grad());
}

TEST(ParameterSet, RejectsDuplicatesAndNonLeaves) {
  ParameterSet ps;
  Tensor a = Tensor::zeros({2});
  ps.add("a", a);
  EXPECT_TRUE(a.requires_grad());
  EXPECT_THROW(ps.add("a", Tensor::zeros({1})), ContractError);
  EXPECT_THROW(ps.add("b", mul(a, a)), ContractError);
  EXPECT_EQ(ps.numel(), 2);
}

TEST(ParameterSet, FrozenLeavesStopCollectingGradients) {
  ParameterSet ps;
  Tensor a = ps.add("a", Tensor::full({2}, 1.0));
  Tensor b = Tensor::full({2}, 2.0, true);
  ps.set_frozen(true);
  backward(sum(mul(a, b)));
  EXPECT_FALSE(a.has_grad() && a.grad()[0] != 0.0);
  EXPECT_DOUBLE_EQ(b.grad()[0], 1.0);
  ps.set_frozen(false);
  EXPECT_TRUE(a.requires_grad());
}

TEST(ParameterSet, CopyValuesChecksNamesAndShapes) {
  ParameterSet a, b, c;
  a.add("w", Tensor::from_data({2}, {1, 2}));
  b.add("w", Tensor::zeros({2}));
  c.add("w", Tensor::zeros({3}));
  b.copy_values_from(a);
  EXPECT_DOUBLE_EQ(b.find("w")->tensor.data()[1], 2.0);
  EXPECT_THROW(c.copy_values_from(a), ShapeError);
}

TEST(GradCheck, AgreesWithIndependentFiniteDifferences) {
  Rng rng(3);
  Tensor w = testing::random_tensor({3, 4}, rng);
  Tensor x = testing::random_tensor({2, 3}, rng, 1.0, false);
  auto f = [&] { return sum(tanh(matmul(x, w))); };
  const auto lib = grad_check(f, {w});
  const auto ref = testing::finite_difference(f, {w}, 0, 1);
  EXPECT_LT(lib.max_rel_error, 1e-6);
  EXPECT_LT(ref.max_rel_error, 1e-6);
  EXPECT_EQ(lib.coords_checked, 12);
}

TEST(GradCheck, DetectsAWrongGradient) {
  // relu at exactly 0 has a kink; finite differences see slope 1/2.
  Tensor w = Tensor::from_data({1}, {0.0}, true);
  auto f = [&] { return sum(relu(w)); };
  EXPECT_GT(grad_check(f, {w}).max_rel_error, 0.4);
}

TEST(RoundToF32, MatchesFloatCast) {
  std::vector<double> v = {0.1, 1.0 / 3.0, 1e-40, -7.25};
  round_to_f32(v);
  EXPECT_EQ(v[0], static_cast<double>(0.1f));
  EXPECT_EQ(v[1], static_cast<double>(static_cast<float>(1.0 / 3.0)));
  EXPECT_EQ(v[3], -7.25);
}

}  // namespace
}  // namespace hyperpeft
