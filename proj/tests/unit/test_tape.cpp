#include <cmath>
#include <limits>

#include <gtest/gtest.h>

#include "dql/errors.hpp"
#include "dql/tape.hpp"
#include "support/gradcheck.hpp"

namespace dql {
namespace {

ParamSet random_set(Rng& rng, std::initializer_list<std::pair<const char*, std::pair<int, int>>> shapes,
                    double scale = 1.0) {
  ParamSet p;
  for (const auto& [name, shape] : shapes) p.add(name, scale * rng.normal_matrix(shape.first, shape.second));
  return p;
}

TEST(Tape, ConstantLossHasZeroGradient) {
  Rng rng(1);
  const ParamSet p = random_set(rng, {{"a", {3, 2}}});
  const ParamSet g = gradcheck::analytic(p, [](Tape& t, std::span<const Var>) {
    return t.constant(Matrix::Constant(1, 1, 4.2));
  });
  ASSERT_TRUE(g.same_shape(p));
  EXPECT_EQ(g.value(0).squaredNorm(), 0.0);
}

TEST(Tape, HalfSquaredNormGradientIsParams) {
  Rng rng(2);
  const ParamSet p = random_set(rng, {{"a", {3, 2}}, {"b", {4, 1}}});
  const ParamSet g = gradcheck::analytic(p, [](Tape&, std::span<const Var> v) {
    return scale(add(sum(square(v[0])), sum(square(v[1]))), 0.5);
  });
  EXPECT_LT(g.max_abs_diff(p), 1e-15);
}

TEST(Tape, ElementwiseOpsMatchFiniteDifferences) {
  Rng rng(3);
  const ParamSet p = random_set(rng, {{"a", {3, 4}}, {"b", {3, 4}}}, 0.7);
  const Matrix c = rng.normal_matrix(3, 4);
  const double err = gradcheck::max_error(p, [&](Tape&, std::span<const Var> v) {
    const Var x = cmul(mish(v[0]), tanh(v[1]));
    const Var y = add_const(cmul_const(exp(scale(v[1], 0.3)), c), c);
    return mean(add_scalar(sub(square(x), y), 0.25));
  });
  EXPECT_LT(err, 1e-4);
}

TEST(Tape, LinearAndMlpMatchFiniteDifferences) {
  Rng rng(4);
  MlpSpec spec;
  spec.input_dim = 3;
  spec.hidden_dim = 5;
  spec.depth = 2;
  spec.output_dim = 2;
  const ParamSet p = mlp_init(spec, rng);
  const Matrix x = rng.normal_matrix(3, 6);
  const double err = gradcheck::max_error(p, [&](Tape& t, std::span<const Var> v) {
    return sum(square(mlp(v, spec, t.constant(x))));
  });
  EXPECT_LT(err, 1e-4);
}

TEST(Tape, MlpForwardMatchesPlainForward) {
  Rng rng(5);
  MlpSpec spec;
  spec.input_dim = 2;
  spec.hidden_dim = 7;
  spec.depth = 3;
  spec.output_dim = 3;
  const ParamSet p = mlp_init(spec, rng);
  const Matrix x = rng.normal_matrix(2, 4);
  Tape t;
  const auto v = t.bind(p);
  const Matrix y = mlp(v, spec, t.constant(x)).value();
  EXPECT_LT((y - mlp_forward(p, spec, x)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Tape, StructuralOpsMatchFiniteDifferences) {
  Rng rng(6);
  const ParamSet p = random_set(rng, {{"col", {2, 1}}, {"a", {3, 5}}, {"b", {2, 5}}});
  Vector factors(5);
  factors << 0.5, -1.0, 2.0, 0.1, 3.0;
  Vector rf(5);
  rf << 1.0, 2.0, -0.5, 0.3, 1.5;
  const double err = gradcheck::max_error(p, [&](Tape&, std::span<const Var> v) {
    const Var wide = broadcast_cols(v[0], 5);
    const Var parts[] = {v[1], add(v[2], wide)};
    const Var stacked = vstack(parts);
    const Var mid = slice_rows(stacked, 1, 3);
    const Var scaled = scale_rows(stacked, rf);
    return add(sum(sum_rows(square(mid))), mean(logsumexp_rows(scaled)));
  });
  EXPECT_LT(err, 1e-4);
}

TEST(Tape, ClampPassesGradientOnlyInside) {
  Matrix a(2, 3);
  a << -2.0, 0.5, 0.2, 3.0, -0.3, 0.9;
  ParamSet p;
  p.add("a", a);
  Vector lo = Vector::Constant(2, -1.0);
  Vector hi = Vector::Constant(2, 1.0);
  const ParamSet g = gradcheck::analytic(p, [&](Tape&, std::span<const Var> v) {
    return sum(clamp_rows(v[0], lo, hi));
  });
  Matrix expect(2, 3);
  expect << 0.0, 1.0, 1.0, 0.0, 1.0, 1.0;
  EXPECT_EQ(g.value(0), expect);

  Tape t;
  const Var c = clamp(t.constant(a), -0.25, 0.25);
  EXPECT_DOUBLE_EQ(c.value().maxCoeff(), 0.25);
  EXPECT_DOUBLE_EQ(c.value().minCoeff(), -0.25);
}

TEST(Tape, LogSumExpIsStableForLargeInputs) {
  Tape t;
  Matrix a(2, 1);
  a << 1000.0, 1000.0;
  const Var l = logsumexp_rows(t.constant(a));
  EXPECT_NEAR(l.scalar(), 1000.0 + std::log(2.0), 1e-12);
}

TEST(Tape, ReusedNodeAccumulatesGradient) {
  ParamSet p;
  p.add("x", Matrix::Constant(1, 1, 3.0));
  const ParamSet g = gradcheck::analytic(p, [](Tape&, std::span<const Var> v) {
    return add(cmul(v[0], v[0]), scale(v[0], 2.0));
  });
  EXPECT_DOUBLE_EQ(g.value(0)(0, 0), 8.0);
}

TEST(Tape, FrozenParametersReceiveNoGradient) {
  ParamSet p;
  p.add("x", Matrix::Constant(1, 1, 3.0));
  Tape t;
  const auto frozen = t.bind(p, false);
  const auto live = t.bind(p);
  t.backward(cmul(frozen[0], live[0]));
  EXPECT_EQ(t.grad(frozen[0]).size(), 0);
  EXPECT_DOUBLE_EQ(t.grad(live[0])(0, 0), 3.0);
}

TEST(Tape, NonFiniteForwardReportsStepTag) {
  Tape t;
  t.set_step_tag(4);
  const Var x = t.variable(Matrix::Constant(1, 1, 800.0));
  try {
    exp(x);
    FAIL() << "overflow not detected";
  } catch (const NonFiniteError& e) {
    EXPECT_EQ(e.step(), 4);
  }
}

TEST(Tape, NonFiniteConstantRejected) {
  Tape t;
  EXPECT_THROW(t.constant(Matrix::Constant(1, 1, std::numeric_limits<double>::infinity())),
               NonFiniteError);
}

TEST(Tape, BackwardRequiresScalarRoot) {
  Tape t;
  const Var x = t.variable(Matrix::Zero(2, 1));
  EXPECT_THROW(t.backward(x), DimensionError);
}

TEST(Tape, ShapeMismatchRejected) {
  Tape t;
  const Var a = t.variable(Matrix::Zero(2, 3));
  const Var b = t.variable(Matrix::Zero(3, 2));
  EXPECT_THROW(add(a, b), DimensionError);
}

}  // namespace
}  // namespace dql
