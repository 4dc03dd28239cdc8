#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "dql/critic.hpp"
#include "dql/diffusion.hpp"
#include "dql/errors.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"

namespace dql {
namespace {

DiffusionPolicy small_policy(int steps, int state_dim, int hidden, std::uint64_t seed) {
  DiffusionPolicyConfig cfg;
  cfg.steps = steps;
  cfg.state_dim = state_dim;
  cfg.action_dim = 2;
  cfg.hidden_dim = hidden;
  cfg.depth = 2;
  cfg.embed_dim = 4;
  Rng rng(seed);
  return make_diffusion_policy(cfg, rng);
}

// eps_theta evaluated through the independent reference forward pass.
std::vector<double> ref_eps(const DiffusionPolicy& p, const Vector& a, const Vector& s, int i) {
  std::vector<double> in(a.data(), a.data() + a.size());
  in.insert(in.end(), s.data(), s.data() + s.size());
  const auto e = oracle::time_embed(i, p.embed_dim);
  in.insert(in.end(), e.begin(), e.end());
  return oracle::mlp(p.params, p.net.num_layers(), true, in);
}

TEST(Schedule, ClosedFormForEveryN) {
  for (int n : {1, 2, 5, 10, 20, 50}) {
    const NoiseSchedule s = build_vp_schedule(n);
    ASSERT_EQ(s.steps, n);
    for (int i = 1; i <= n; ++i) {
      EXPECT_NEAR(s.beta(i), oracle::schedule_beta(i, n), 1e-12);
      EXPECT_NEAR(s.alpha(i), 1.0 - s.beta(i), 1e-15);
      EXPECT_NEAR(s.alpha_bar(i), oracle::schedule_alpha_bar(i, n), 1e-12);
    }
    EXPECT_NEAR(s.alpha_bar(n), std::exp(-5.05), 1e-12);
  }
}

TEST(Schedule, KnownValues) {
  EXPECT_NEAR(build_vp_schedule(1).beta(1), 0.99359, 1e-5);
  const NoiseSchedule s5 = build_vp_schedule(5);
  EXPECT_NEAR(s5.beta(1), 0.1959, 1e-4);
  EXPECT_NEAR(s5.beta(5), 0.8350, 1e-4);
  EXPECT_NEAR(s5.alpha_bar(5), 6.41e-3, 1e-5);
}

TEST(Schedule, MonotoneAndInUnitInterval) {
  for (int n : {2, 5, 50}) {
    const NoiseSchedule s = build_vp_schedule(n);
    for (int i = 1; i <= n; ++i) {
      EXPECT_GT(s.beta(i), 0.0);
      EXPECT_LT(s.beta(i), 1.0);
      if (i > 1) {
        EXPECT_GT(s.beta(i), s.beta(i - 1));
        EXPECT_LT(s.alpha_bar(i), s.alpha_bar(i - 1));
      }
    }
  }
}

TEST(Schedule, RejectsInvalidConfig) {
  EXPECT_THROW(build_vp_schedule(0), ConfigError);
  EXPECT_THROW(build_vp_schedule(5, 10.0, 0.1), ConfigError);
  EXPECT_THROW(build_vp_schedule(5, 0.0, 10.0), ConfigError);
}

TEST(ForwardNoise, Examples) {
  const NoiseSchedule s = build_vp_schedule(5);
  Vector a0(2), eps(2);
  a0 << 1.0, 0.0;
  eps << 0.0, 1.0;
  const Vector x = forward_noise(s, a0, 5, eps);
  EXPECT_NEAR(x(0), 0.0801, 1e-4);
  EXPECT_NEAR(x(1), 0.9968, 1e-4);

  const Vector z = forward_noise(s, a0, 3, Vector::Zero(2));
  EXPECT_DOUBLE_EQ(z(0), std::sqrt(s.alpha_bar(3)));
  const Vector e = forward_noise(s, Vector::Zero(2), 2, eps);
  EXPECT_DOUBLE_EQ(e(1), std::sqrt(1.0 - s.alpha_bar(2)));
  EXPECT_THROW(forward_noise(s, a0, 0, eps), std::out_of_range);
  EXPECT_THROW(forward_noise(s, a0, 6, eps), std::out_of_range);
}

TEST(ForwardNoise, MarginalMoments) {
  const NoiseSchedule s = build_vp_schedule(5);
  Vector a0(2);
  a0 << 0.6, -0.4;
  Rng rng(17);
  const int i = 2;
  const int draws = 100000;
  Vector sum = Vector::Zero(2), sq = Vector::Zero(2);
  for (int k = 0; k < draws; ++k) {
    const Vector x = forward_noise(s, a0, i, rng.normal_matrix(2, 1));
    sum += x;
    sq += x.cwiseAbs2();
  }
  const Vector mean = sum / draws;
  const Vector var = sq / draws - mean.cwiseAbs2();
  const double se = std::sqrt((1.0 - s.alpha_bar(i)) / draws);
  for (int d = 0; d < 2; ++d) {
    EXPECT_NEAR(mean(d), std::sqrt(s.alpha_bar(i)) * a0(d), 5.0 * se);
    EXPECT_NEAR(var(d), 1.0 - s.alpha_bar(i), 0.02 * (1.0 - s.alpha_bar(i)));
  }
}

TEST(ReverseStep, ZeroNetworkAndNoiseScalesAction) {
  DiffusionPolicy p = small_policy(5, 1, 8, 1);
  p.params = p.params.zeros_like();
  Vector a(2);
  a << 0.3, -0.2;
  for (int i = 1; i <= 5; ++i) {
    const Vector out = reverse_step(p, a, Vector::Zero(1), i, Vector::Zero(2));
    EXPECT_NEAR(out(0), 0.3 / std::sqrt(p.schedule.alpha(i)), 1e-15);
    EXPECT_NEAR(out(1), -0.2 / std::sqrt(p.schedule.alpha(i)), 1e-15);
  }
}

TEST(ReverseStep, LastStepIgnoresNoise) {
  DiffusionPolicy p = small_policy(5, 1, 8, 2);
  p.params = p.params.zeros_like();
  Vector a(2);
  a << 0.5, 0.5;
  Vector eps(2);
  eps << 3.0, -2.0;
  const Vector out = reverse_step(p, a, Vector::Zero(1), 1, eps);
  const double expected = 0.5 / std::sqrt(1.0 - oracle::schedule_beta(1, 5));
  EXPECT_NEAR(out(0), expected, 1e-14);
  EXPECT_NEAR(out(1), expected, 1e-14);
  // Four-digit reference value; the closed form gives 0.55758, which rounds to 0.5576.
  EXPECT_NEAR(out(0), 0.5577, 2e-4);
  EXPECT_EQ(out, reverse_step(p, a, Vector::Zero(1), 1, Vector::Zero(2)));
}

TEST(ReverseStep, MatchesEquationWithNetwork) {
  const DiffusionPolicy p = small_policy(5, 2, 8, 3);
  Vector a(2), s(2), eps(2);
  a << 0.1, -0.3;
  s << 0.4, 0.2;
  eps << 0.05, -0.02;
  for (int i = 1; i <= 5; ++i) {
    const auto e = ref_eps(p, a, s, i);
    const double be = p.schedule.beta(i), al = p.schedule.alpha(i), ab = p.schedule.alpha_bar(i);
    const Vector out = reverse_step(p, a, s, i, eps);
    for (int d = 0; d < 2; ++d) {
      double x = a(d) / std::sqrt(al) - be / std::sqrt(al * (1 - ab)) * e[static_cast<std::size_t>(d)];
      if (i > 1) x += std::sqrt(be) * eps(d);
      x = std::clamp(x, -1.0, 1.0);
      EXPECT_NEAR(out(d), x, 1e-14) << "i=" << i;
    }
  }
}

TEST(SampleActions, ReplayOracleOverRecordedNoise) {
  const DiffusionPolicy p = small_policy(5, 1, 8, 4);
  Rng rng(21);
  const Matrix states = Matrix::Zero(1, 3);
  const ChainNoise noise = draw_chain_noise(p, 3, rng);
  const Matrix out = sample_actions(p, states, noise);
  for (int j = 0; j < 3; ++j) {
    Vector a = noise.start.col(j);
    for (int i = 5; i >= 1; --i) {
      const auto e = ref_eps(p, a, Vector::Zero(1), i);
      const double be = p.schedule.beta(i), al = p.schedule.alpha(i), ab = p.schedule.alpha_bar(i);
      for (int d = 0; d < 2; ++d) {
        double x = a(d) / std::sqrt(al) - be / std::sqrt(al * (1 - ab)) * e[static_cast<std::size_t>(d)];
        if (i > 1) x += std::sqrt(be) * noise.steps[static_cast<std::size_t>(i - 1)](d, j);
        a(d) = std::clamp(x, -1.0, 1.0);
      }
    }
    EXPECT_LT((out.col(j) - a).cwiseAbs().maxCoeff(), 1e-13);
  }
}

TEST(SampleActions, DeterministicGivenSeedAndInBounds) {
  const DiffusionPolicy p = small_policy(5, 1, 8, 5);
  Rng r1(8), r2(8);
  const Matrix a = sample_actions(p, Matrix::Zero(1, 64), r1);
  const Matrix b = sample_actions(p, Matrix::Zero(1, 64), r2);
  EXPECT_EQ(a, b);
  EXPECT_TRUE(p.bounds.contains_all(a));
  Rng r3(8);
  EXPECT_EQ(sample_action(p, Vector::Zero(1), r3).size(), 2);
}

TEST(SampleActions, EveryIntermediateStepStaysInBounds) {
  DiffusionPolicy p = small_policy(10, 1, 8, 6);
  for (std::size_t k = 0; k < p.params.size(); ++k) p.params.value(k) *= 25.0;
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    Vector a = rng.normal_matrix(2, 1) * 3.0;
    for (int i = 10; i >= 1; --i) {
      a = reverse_step(p, a, Vector::Zero(1), i, rng.normal_matrix(2, 1));
      EXPECT_TRUE(p.bounds.contains(a));
    }
  }
}

TEST(SampleActions, TapeChainMatchesPlainChain) {
  const DiffusionPolicy p = small_policy(4, 2, 8, 7);
  Rng rng(2);
  const Matrix states = rng.normal_matrix(2, 5);
  const ChainNoise noise = draw_chain_noise(p, 5, rng);
  Tape t;
  const auto v = t.bind(p.params);
  const Var a = sample_actions(v, p, t.constant(states), noise);
  EXPECT_LT((a.value() - sample_actions(p, states, noise)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(SampleActions, RejectsWrongStateDimension) {
  const DiffusionPolicy p = small_policy(3, 2, 8, 8);
  Rng rng(1);
  EXPECT_THROW(sample_actions(p, Matrix::Zero(1, 4), rng), DimensionError);
}

TEST(BcLoss, ZeroNetworkApproachesActionDimension) {
  DiffusionPolicy p = small_policy(5, 1, 8, 9);
  p.params = p.params.zeros_like();
  Rng rng(10);
  const int b = 10000;
  const Matrix actions = Matrix::Constant(2, b, 0.3);
  const NoiseBatch nb = draw_noise_batch(p.schedule, b, 2, rng);
  EXPECT_NEAR(bc_loss(p, Matrix::Zero(1, b), actions, nb), 2.0, 0.1);
}

TEST(BcLoss, SingleDatumReplay) {
  const DiffusionPolicy p = small_policy(5, 1, 8, 11);
  NoiseBatch nb;
  nb.steps = {3};
  nb.eps = Matrix(2, 1);
  nb.eps << 0.4, -1.2;
  Vector a(2);
  a << 0.7, -0.1;
  const double ab = p.schedule.alpha_bar(3);
  const Vector noised = std::sqrt(ab) * a + std::sqrt(1 - ab) * Vector(nb.eps.col(0));
  const auto e = ref_eps(p, noised, Vector::Zero(1), 3);
  const double expect = std::pow(0.4 - e[0], 2) + std::pow(-1.2 - e[1], 2);
  EXPECT_NEAR(bc_loss(p, Matrix::Zero(1, 1), a, nb), expect, 1e-14);
}

TEST(BcLoss, PerfectPredictorGivesZero) {
  // A network whose output layer is zero predicts eps = 0; with eps = 0 the
  // loss vanishes.
  DiffusionPolicy p = small_policy(5, 1, 8, 12);
  p.params = p.params.zeros_like();
  NoiseBatch nb;
  nb.steps = {1, 5};
  nb.eps = Matrix::Zero(2, 2);
  EXPECT_EQ(bc_loss(p, Matrix::Zero(1, 2), Matrix::Constant(2, 2, 0.5), nb), 0.0);
}

TEST(BcLoss, RejectsEmptyBatchAndBadIndex) {
  const DiffusionPolicy p = small_policy(5, 1, 8, 13);
  NoiseBatch nb;
  EXPECT_THROW(bc_loss(p, Matrix::Zero(1, 0), Matrix::Zero(2, 0), nb), std::invalid_argument);
  nb.steps = {6};
  nb.eps = Matrix::Zero(2, 1);
  EXPECT_THROW(bc_loss(p, Matrix::Zero(1, 1), Matrix::Zero(2, 1), nb), std::out_of_range);
}

TEST(BcLoss, TapeMatchesPlainAndFiniteDifferences) {
  const DiffusionPolicy p = small_policy(5, 3, 12, 14);
  Rng rng(15);
  const Matrix states = rng.normal_matrix(3, 6);
  const Matrix actions = (rng.normal_matrix(2, 6) * 0.5).cwiseMax(-1.0).cwiseMin(1.0);
  const NoiseBatch nb = draw_noise_batch(p.schedule, 6, 2, rng);
  const gradcheck::TapeLoss f = [&](Tape& t, std::span<const Var> v) {
    return bc_loss(v, p, t.constant(states), actions, nb);
  };
  EXPECT_NEAR(gradcheck::loss_value(p.params, f), bc_loss(p, states, actions, nb), 1e-14);
  EXPECT_LT(gradcheck::max_error(p.params, f), 1e-4);
}

TEST(QGuidance, ChainGradientMatchesFiniteDifferences) {
  // -mean Q1(s, a0) through a two-step chain, hidden width 8.
  const DiffusionPolicy p = small_policy(2, 1, 8, 16);
  Rng rng(17);
  const TwinCritic critic = make_twin_critic({1, 2, 8, 2}, rng);
  const ChainNoise noise = draw_chain_noise(p, 4, rng);
  const Matrix states = Matrix::Zero(1, 4);
  const gradcheck::TapeLoss f = [&](Tape& t, std::span<const Var> v) {
    const Var s = t.constant(states);
    const Var a0 = sample_actions(v, p, s, noise);
    const auto q = t.bind(critic.q1, false);
    return scale(mean(q_values(q, critic.spec, s, a0)), -1.0);
  };
  EXPECT_LT(gradcheck::max_error(p.params, f), 1e-4);
}

}  // namespace
}  // namespace dql
