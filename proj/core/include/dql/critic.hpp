#pragma once

#include <functional>
#include <span>

#include "dql/dataset.hpp"
#include "dql/diffusion.hpp"
#include "dql/tape.hpp"
#include "dql/tensornet.hpp"

namespace dql {

/// Two Q-networks over [state; action] with Polyak-averaged target copies.
struct TwinCritic {
  int state_dim = 1;
  int action_dim = 2;
  MlpSpec spec;
  ParamSet q1;
  ParamSet q2;
  ParamSet q1_target;
  ParamSet q2_target;
};

struct CriticConfig {
  int state_dim = 1;
  int action_dim = 2;
  int hidden_dim = 256;
  int depth = 3;
};

TwinCritic make_twin_critic(const CriticConfig& cfg, Rng& rng);
TwinCritic make_zero_critic(const CriticConfig& cfg);

struct QPair {
  double q1 = 0.0;
  double q2 = 0.0;
};

QPair q_value(const TwinCritic& critic, const Vector& s, const Vector& a);
// Row vector (1 x B) of one network's values.
Matrix q_values(const ParamSet& q, const MlpSpec& spec, const Matrix& states, const Matrix& actions);
Var q_values(std::span<const Var> q, const MlpSpec& spec, Var states, Var actions);

/// Proposes next actions for a batch of next states (state_dim x B).
using ActionSampler = std::function<Matrix(const Matrix& next_states, Rng& rng)>;

/// Backup from per-candidate min-over-critics values. Without max_q only the
/// first candidate is used; with max_q the largest candidate is.
double backup_target(double reward, bool terminal, double gamma,
                     std::span<const double> candidate_min_q, bool max_q);

double bellman_target(const TwinCritic& critic, const ActionSampler& target_policy,
                      const Transition& t, double gamma, bool max_q, int num_samples, Rng& rng);
double bellman_target(const TwinCritic& critic, const DiffusionPolicy& target_policy,
                      const Transition& t, double gamma, bool max_q, int num_samples, Rng& rng);

/// Batched targets. Terminal rows never query the target networks; a batch
/// that is entirely terminal consumes no randomness.
Vector bellman_targets(const TwinCritic& critic, const ActionSampler& target_policy,
                       const TransitionBatch& batch, double gamma, bool max_q, int num_samples,
                       Rng& rng);

/// Mean over the batch of (y - Q1)^2 + (y - Q2)^2 with constant targets y.
double critic_loss(const TwinCritic& critic, const Vector& targets, const Matrix& states,
                   const Matrix& actions);
Var critic_loss(std::span<const Var> q1, std::span<const Var> q2, const MlpSpec& spec,
                Var states, Var actions, const Vector& targets);

inline constexpr double kQScaleFloor = 1e-6;

/// alpha = eta / max(mean |Q|, 1e-6), used as a constant in the policy loss.
double q_guidance_weight(double eta, double mean_abs_q);

void validate_discount(double gamma);

}  // namespace dql
