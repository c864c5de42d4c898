#include <gtest/gtest.h>

#include "arfn/harness/selfcheck.hpp"

using namespace arfn;

TEST(Diffnum, FiniteDifferenceSuiteCoversEveryOp) {
  std::size_t points = 0;
  for (const auto& r : finite_difference_suite(11)) {
    EXPECT_LT(r.worst, 1e-5) << r.name;
    points += r.points;
  }
  EXPECT_GE(points, 100u);
}

TEST(Diffnum, FiniteDifferenceSuiteStableAcrossSeeds) {
  for (std::uint64_t seed : {1u, 2u, 3u})
    for (const auto& r : finite_difference_suite(seed, 1)) EXPECT_LT(r.worst, 1e-5) << r.name << " seed " << seed;
}

TEST(Diffnum, MatmulHandValues) {
  Tape<double> t;
  auto a = t.variable(Shape{2, 2}, {1, 2, 3, 4});
  auto b = t.constant(Shape{2, 2}, {5, 6, 7, 8});
  auto y = matmul(a, b);
  EXPECT_EQ(y.to_vector(), (std::vector<double>{19, 22, 43, 50}));
  t.backward(sum(y));
  // d sum(AB) / dA = 1 B^T
  EXPECT_EQ(a.grad(), (std::vector<double>{11, 15, 11, 15}));
}

TEST(Diffnum, DetachStopsGradient) {
  Tape<double> t;
  auto x = t.variable(Shape{3}, {1, 2, 3});
  auto y = add(mul(x, x), detach(mul(x, x)));
  EXPECT_EQ(y.to_vector(), (std::vector<double>{2, 8, 18}));
  t.backward(sum(y));
  EXPECT_EQ(x.grad(), (std::vector<double>{2, 4, 6}));
}

TEST(Diffnum, SharedInputAccumulates) {
  Tape<double> t;
  auto x = t.variable(Shape{2}, {3, -1});
  t.backward(sum(add(x, add(x, x))));
  EXPECT_EQ(x.grad(), (std::vector<double>{3, 3}));
}

TEST(Diffnum, ShapeMismatchThrows) {
  Tape<double> t;
  auto a = t.variable(Shape{2, 3}, std::vector<double>(6, 1.0));
  auto b = t.variable(Shape{3, 2}, std::vector<double>(6, 1.0));
  EXPECT_THROW(add(a, b), ShapeError);
  EXPECT_THROW(matmul(a, a), ShapeError);
}

TEST(Diffnum, BackwardRequiresScalarAndRunsOnce) {
  Tape<double> t;
  auto x = t.variable(Shape{2}, {1, 2});
  EXPECT_THROW(t.backward(x), ShapeError);
  t.backward(sum(x));
  EXPECT_THROW(t.backward(sum(x)), Error);
}

TEST(Diffnum, NonRecordingTapeRefusesBackward) {
  Tape<double> t(false);
  auto x = t.variable(Shape{2}, {1, 2});
  EXPECT_FALSE(x.requires_grad());
  EXPECT_THROW(t.backward(sum(x)), Error);
}

TEST(Diffnum, ParamLookupReturnsOneLeafPerTensor) {
  Tensor<double> w(Shape{2}, {1.5, -2});
  Tape<double> t;
  auto p1 = t.param(w, true);
  auto p2 = t.param(w, true);
  EXPECT_EQ(p1.tape_id(), p2.tape_id());
  t.backward(sum(mul(p1, p2)));
  EXPECT_EQ(t.param_grad(w), (std::vector<double>{3, -4}));
}

TEST(Diffnum, FrozenParamGetsNoGradient) {
  Tensor<double> w(Shape{2}, {1, 2});
  Tape<double> t;
  auto x = t.variable(Shape{2}, {3, 4});
  t.backward(sum(mul(t.param(w, false), x)));
  EXPECT_EQ(t.param_grad(w), (std::vector<double>{0, 0}));
  EXPECT_EQ(x.grad(), (std::vector<double>{1, 2}));
}

TEST(Diffnum, FiniteDiffCheckDetectsWrongGradient) {
  // detach hides x*x from backward, so the check must report a large error
  const double err = finite_diff_check<double>(
      [](Tape<double>&, const DiffArray<double>& x) { return sum(add(x, detach(mul(x, x)))); }, {0.5, 1.5}, 1e-5);
  EXPECT_GT(err, 0.1);
}

TEST(Diffnum, FiniteDiffCheckRejectsNonFiniteInput) {
  EXPECT_THROW(finite_diff_check<double>([](Tape<double>&, const DiffArray<double>& x) { return sum(x); },
                                         {std::nan("")}, 1e-5),
               NumericError);
}
