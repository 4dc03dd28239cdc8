#include <cmath>

#include <gtest/gtest.h>

#include "dql/errors.hpp"
#include "dql/tensornet.hpp"
#include "support/oracles.hpp"

namespace dql {
namespace {

MlpSpec small_spec(int in, int hidden, int depth, int out) {
  MlpSpec s;
  s.input_dim = in;
  s.hidden_dim = hidden;
  s.depth = depth;
  s.output_dim = out;
  return s;
}

TEST(Mlp, ZeroParamsGiveZeroOutput) {
  const MlpSpec spec = small_spec(3, 8, 3, 2);
  const ParamSet p = mlp_zeros(spec);
  const Vector y = mlp_forward(p, spec, Vector(Vector::Constant(3, 0.37)));
  EXPECT_EQ(y.size(), 2);
  EXPECT_EQ(y.squaredNorm(), 0.0);
}

TEST(Mlp, IdentityNetworkPassesInputThrough) {
  MlpSpec spec = small_spec(1, 1, 1, 1);
  spec.activation = Activation::Identity;
  ParamSet p = mlp_zeros(spec);
  p.at("w0")(0, 0) = 1.0;
  p.at("w1")(0, 0) = 1.0;
  Vector x(1);
  x << 0.7;
  EXPECT_DOUBLE_EQ(mlp_forward(p, spec, x)(0), 0.7);
}

TEST(Mlp, MatchesLayerByLayerReference) {
  const MlpSpec spec = small_spec(2, 16, 3, 3);
  Rng rng(42);
  const ParamSet p = mlp_init(spec, rng);
  Vector x(2);
  x << 0.1, 0.2;
  const Vector y = mlp_forward(p, spec, x);
  const auto ref = oracle::mlp(p, spec.num_layers(), true, {0.1, 0.2});
  ASSERT_EQ(y.size(), 3);
  for (int k = 0; k < 3; ++k) EXPECT_NEAR(y(k), ref[static_cast<std::size_t>(k)], 1e-14);
}

TEST(Mlp, BatchedForwardMatchesColumnwise) {
  // Wide enough that a blocked matrix product would treat trailing columns differently.
  const MlpSpec spec = small_spec(3, 64, 2, 2);
  Rng rng(7);
  const ParamSet p = mlp_init(spec, rng);
  const Matrix x = rng.normal_matrix(3, 50);
  const Matrix y = mlp_forward(p, spec, x);
  for (int j = 0; j < 50; ++j) EXPECT_EQ(y.col(j), mlp_forward(p, spec, Vector(x.col(j))));
}

TEST(Mlp, RejectsWrongInputLength) {
  const MlpSpec spec = small_spec(2, 4, 1, 1);
  const ParamSet p = mlp_zeros(spec);
  EXPECT_THROW(mlp_forward(p, spec, Vector(Vector::Zero(3))), DimensionError);
}

TEST(Mlp, RejectsZeroDimensions) {
  EXPECT_THROW(small_spec(0, 4, 1, 1).validate(), ConfigError);
  EXPECT_THROW(small_spec(1, 4, 0, 1).validate(), ConfigError);
  EXPECT_THROW(small_spec(1, 0, 1, 1).validate(), ConfigError);
}

TEST(Mlp, InitIsUniformWithinFanInBound) {
  const MlpSpec spec = small_spec(9, 25, 2, 4);
  Rng rng(3);
  const ParamSet p = mlp_init(spec, rng);
  for (std::size_t i = 0; i < p.size(); ++i) {
    const std::string& name = p.name(i);
    const std::string wname = "w" + name.substr(1);
    const double bound = 1.0 / std::sqrt(static_cast<double>(p.at(wname).cols()));
    EXPECT_LE(p.value(i).cwiseAbs().maxCoeff(), bound) << name;
  }
  EXPECT_EQ(p.at("w0").rows(), 25);
  EXPECT_EQ(p.at("w0").cols(), 9);
  EXPECT_EQ(p.at("w2").rows(), 4);
}

TEST(Mish, KnownValues) {
  EXPECT_EQ(mish(0.0), 0.0);
  EXPECT_NEAR(mish(20.0), 20.0, 1e-6);
  EXPECT_NEAR(mish(1.0), oracle::mish(1.0), 1e-15);
  EXPECT_NEAR(mish(1.0), 0.8651, 1e-4);
  EXPECT_NEAR(mish(-40.0), 0.0, 1e-12);
}

TEST(Mish, FiniteAtExtremes) {
  EXPECT_TRUE(std::isfinite(mish(1000.0)));
  EXPECT_TRUE(std::isfinite(mish(-1000.0)));
  EXPECT_TRUE(std::isfinite(mish_derivative(1000.0)));
  EXPECT_TRUE(std::isfinite(mish_derivative(-1000.0)));
}

TEST(Mish, MonotoneOnNonNegativeGrid) {
  double prev = mish(0.0);
  for (int k = 1; k <= 2000; ++k) {
    const double v = mish(k * 0.01);
    EXPECT_GE(v, prev);
    prev = v;
  }
}

TEST(Mish, DerivativeMatchesCentralDifference) {
  for (double x = -6.0; x <= 6.0; x += 0.25) {
    const double h = 1e-6;
    const double fd = (mish(x + h) - mish(x - h)) / (2 * h);
    EXPECT_NEAR(mish_derivative(x), fd, 1e-8) << x;
  }
}

TEST(Softplus, StableForLargeMagnitudes) {
  EXPECT_DOUBLE_EQ(softplus(800.0), 800.0);
  EXPECT_NEAR(softplus(-800.0), 0.0, 1e-300);
  EXPECT_NEAR(softplus(0.0), std::log(2.0), 1e-15);
}

TEST(TimeEmbed, ZeroStep) {
  const Vector e = time_embed(0, 4);
  EXPECT_EQ(e(0), 0.0);
  EXPECT_EQ(e(1), 1.0);
  EXPECT_EQ(e(2), 0.0);
  EXPECT_EQ(e(3), 1.0);
}

TEST(TimeEmbed, StepThreeDimFour) {
  const Vector e = time_embed(3, 4);
  EXPECT_NEAR(e(0), 0.1411, 5e-5);
  EXPECT_NEAR(e(1), -0.9900, 5e-5);
  EXPECT_NEAR(e(2), 0.0300, 5e-5);
  EXPECT_NEAR(e(3), 0.9996, 5e-5);
  EXPECT_DOUBLE_EQ(e(0), std::sin(3.0));
  EXPECT_DOUBLE_EQ(e(2), std::sin(0.03));
}

TEST(TimeEmbed, MatchesReferenceAndStaysInRange) {
  for (int i = 1; i <= 60; ++i) {
    const Vector e = time_embed(i, 16);
    const auto ref = oracle::time_embed(i, 16);
    for (int k = 0; k < 16; ++k) {
      EXPECT_NEAR(e(k), ref[static_cast<std::size_t>(k)], 1e-15);
      EXPECT_LE(std::abs(e(k)), 1.0);
    }
    EXPECT_EQ(e, time_embed(i, 16));
  }
}

TEST(TimeEmbed, RejectsOddDimension) {
  EXPECT_THROW(time_embed(1, 3), ConfigError);
  EXPECT_THROW(time_embed(1, 0), ConfigError);
}

ParamSet scalar_set(double v) {
  ParamSet p;
  p.add("x", Matrix::Constant(1, 1, v));
  return p;
}

TEST(Adam, ZeroGradientLeavesParamsUnchanged) {
  ParamSet p = scalar_set(0.5);
  AdamState opt = adam_init(p, 1e-3);
  adam_step(opt, p, scalar_set(0.0));
  EXPECT_EQ(p.at("x")(0, 0), 0.5);
  EXPECT_EQ(opt.step, 1);
}

TEST(Adam, ZeroGradientDecaysMoments) {
  ParamSet p = scalar_set(0.5);
  AdamState opt = adam_init(p, 1e-3);
  opt.m.at("x")(0, 0) = 0.2;
  opt.v.at("x")(0, 0) = 0.3;
  adam_step(opt, p, scalar_set(0.0));
  EXPECT_NEAR(opt.m.at("x")(0, 0), 0.18, 1e-15);
  EXPECT_NEAR(opt.v.at("x")(0, 0), 0.2997, 1e-15);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  for (double g : {3.0, -0.25, 1e3}) {
    ParamSet p = scalar_set(1.0);
    AdamState opt = adam_init(p, 0.01);
    adam_step(opt, p, scalar_set(g));
    EXPECT_NEAR(p.at("x")(0, 0), 1.0 - 0.01 * (g > 0 ? 1 : -1), 1e-9);
  }
}

TEST(Adam, TwoStepsWithUnitGradient) {
  // Hand-iterated recurrence with beta1 = 0.9, beta2 = 0.999.
  ParamSet p = scalar_set(0.0);
  AdamState opt = adam_init(p, 0.001);
  double m = 0.0, v = 0.0, x = 0.0;
  for (int t = 1; t <= 2; ++t) {
    adam_step(opt, p, scalar_set(1.0));
    m = 0.9 * m + 0.1;
    v = 0.999 * v + 0.001;
    x -= 0.001 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
  }
  EXPECT_NEAR(p.at("x")(0, 0), x, 1e-15);
  EXPECT_NEAR(p.at("x")(0, 0), -0.002, 1e-6);
}

TEST(Adam, RejectsNonFiniteGradientWithoutMutation) {
  ParamSet p = scalar_set(1.0);
  AdamState opt = adam_init(p, 0.01);
  adam_step(opt, p, scalar_set(0.5));
  const ParamSet p_before = p;
  const AdamState opt_before = opt;
  EXPECT_THROW(adam_step(opt, p, scalar_set(std::nan(""))), NonFiniteError);
  EXPECT_EQ(p, p_before);
  EXPECT_EQ(opt.m, opt_before.m);
  EXPECT_EQ(opt.v, opt_before.v);
  EXPECT_EQ(opt.step, opt_before.step);
}

TEST(Adam, RejectsShapeMismatch) {
  ParamSet p = scalar_set(1.0);
  AdamState opt = adam_init(p, 0.01);
  ParamSet g;
  g.add("x", Matrix::Zero(2, 1));
  EXPECT_THROW(adam_step(opt, p, g), DimensionError);
}

TEST(Polyak, Endpoints) {
  ParamSet t = scalar_set(1.0);
  polyak_update(t, scalar_set(2.0), 1.0);
  EXPECT_EQ(t.at("x")(0, 0), 1.0);
  polyak_update(t, scalar_set(2.0), 0.0);
  EXPECT_EQ(t.at("x")(0, 0), 2.0);
}

TEST(Polyak, ConvexCombination) {
  ParamSet t = scalar_set(1.0);
  polyak_update(t, scalar_set(2.0), 0.9);
  EXPECT_NEAR(t.at("x")(0, 0), 1.1, 1e-15);
}

TEST(Polyak, RejectsRhoOutsideUnitInterval) {
  ParamSet t = scalar_set(1.0);
  EXPECT_THROW(polyak_update(t, scalar_set(2.0), 1.5), ConfigError);
  EXPECT_THROW(polyak_update(t, scalar_set(2.0), -0.1), ConfigError);
}

TEST(Polyak, ContractsTowardOnline) {
  Rng rng(11);
  const MlpSpec spec = small_spec(3, 6, 2, 2);
  ParamSet target = mlp_init(spec, rng);
  const ParamSet online = mlp_init(spec, rng);
  double prev = target.max_abs_diff(online);
  for (int k = 0; k < 50; ++k) {
    const ParamSet before = target;
    polyak_update(target, online, 0.8);
    for (std::size_t i = 0; i < target.size(); ++i) {
      const Matrix after_gap = (target.value(i) - online.value(i)).cwiseAbs();
      const Matrix before_gap = (before.value(i) - online.value(i)).cwiseAbs();
      EXPECT_TRUE((after_gap.array() <= 0.8 * before_gap.array() + 1e-15).all());
    }
    const double gap = target.max_abs_diff(online);
    EXPECT_LE(gap, prev);
    prev = gap;
  }
}

TEST(ParamSet, FlattenRoundTrip) {
  Rng rng(5);
  const MlpSpec spec = small_spec(2, 3, 1, 2);
  ParamSet p = mlp_init(spec, rng);
  const auto flat = p.flatten();
  EXPECT_EQ(flat.size(), p.num_scalars());
  ParamSet q = p.zeros_like();
  q.assign_flat(flat);
  EXPECT_EQ(p, q);
}

TEST(ParamSet, LookupByName) {
  ParamSet p = scalar_set(4.0);
  EXPECT_EQ(p.find("x"), 0);
  EXPECT_EQ(p.find("y"), -1);
  EXPECT_THROW(p.at("y"), std::out_of_range);
}

TEST(FiniteDifference, QuadraticGradientEqualsParams) {
  Rng rng(9);
  const ParamSet p = mlp_init(small_spec(2, 3, 1, 1), rng);
  const auto half_sq = [](const ParamSet& q) {
    double s = 0.0;
    for (double v : q.flatten()) s += 0.5 * v * v;
    return s;
  };
  const ParamSet g = finite_difference_gradient(half_sq, p);
  EXPECT_LT(max_relative_error(g, p), 1e-6);
}

}  // namespace
}  // namespace dql
