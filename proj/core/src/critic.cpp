#include "dql/critic.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "dql/errors.hpp"

namespace dql {

namespace {

MlpSpec critic_spec(const CriticConfig& cfg) {
  if (cfg.state_dim < 1 || cfg.action_dim < 1)
    throw ConfigError("critic state and action dimensions must be >= 1");
  return MlpSpec{cfg.state_dim + cfg.action_dim, cfg.hidden_dim, cfg.depth, 1, Activation::Mish};
}

}  // namespace

TwinCritic make_twin_critic(const CriticConfig& cfg, Rng& rng) {
  TwinCritic c;
  c.state_dim = cfg.state_dim;
  c.action_dim = cfg.action_dim;
  c.spec = critic_spec(cfg);
  c.q1 = mlp_init(c.spec, rng);
  c.q2 = mlp_init(c.spec, rng);
  c.q1_target = c.q1;
  c.q2_target = c.q2;
  return c;
}

TwinCritic make_zero_critic(const CriticConfig& cfg) {
  TwinCritic c;
  c.state_dim = cfg.state_dim;
  c.action_dim = cfg.action_dim;
  c.spec = critic_spec(cfg);
  c.q1 = mlp_zeros(c.spec);
  c.q2 = c.q1;
  c.q1_target = c.q1;
  c.q2_target = c.q1;
  return c;
}

Matrix q_values(const ParamSet& q, const MlpSpec& spec, const Matrix& states,
                const Matrix& actions) {
  if (states.cols() != actions.cols()) throw DimensionError("q_values: batch size mismatch");
  if (states.rows() + actions.rows() != spec.input_dim)
    throw DimensionError("q_values: state+action dimension " +
                         std::to_string(states.rows() + actions.rows()) +
                         " does not match critic input " + std::to_string(spec.input_dim));
  Matrix in(spec.input_dim, states.cols());
  in.topRows(states.rows()) = states;
  in.bottomRows(actions.rows()) = actions;
  return mlp_forward(q, spec, in);
}

Var q_values(std::span<const Var> q, const MlpSpec& spec, Var states, Var actions) {
  const Var parts[] = {states, actions};
  return mlp(q, spec, vstack(parts));
}

QPair q_value(const TwinCritic& critic, const Vector& s, const Vector& a) {
  if (s.size() != critic.state_dim || a.size() != critic.action_dim)
    throw DimensionError("q_value: state/action dimensions do not match the critic");
  return {q_values(critic.q1, critic.spec, Matrix(s), Matrix(a))(0, 0),
          q_values(critic.q2, critic.spec, Matrix(s), Matrix(a))(0, 0)};
}

void validate_discount(double gamma) {
  if (!(gamma >= 0.0 && gamma < 1.0))
    throw ConfigError("discount gamma must lie in [0, 1), got " + std::to_string(gamma));
}

double backup_target(double reward, bool terminal, double gamma,
                     std::span<const double> candidate_min_q, bool max_q) {
  if (terminal) return reward;
  if (candidate_min_q.empty()) throw std::invalid_argument("backup_target: no candidates");
  const double v = max_q ? *std::max_element(candidate_min_q.begin(), candidate_min_q.end())
                         : candidate_min_q.front();
  return reward + gamma * v;
}

Vector bellman_targets(const TwinCritic& critic, const ActionSampler& target_policy,
                       const TransitionBatch& batch, double gamma, bool max_q, int num_samples,
                       Rng& rng) {
  validate_discount(gamma);
  if (max_q && num_samples < 1) throw ConfigError("max-Q backup needs at least one sample");
  const Eigen::Index b = batch.size();
  Vector targets = batch.rewards;
  if (batch.all_terminal()) return targets;

  const int k = max_q ? num_samples : 1;
  // Candidate c of transition j lives in column c * b + j.
  const Matrix next_states = batch.next_states.replicate(1, k);
  const Matrix next_actions = target_policy(next_states, rng);
  const Matrix q1 = q_values(critic.q1_target, critic.spec, next_states, next_actions);
  const Matrix q2 = q_values(critic.q2_target, critic.spec, next_states, next_actions);
  std::vector<double> candidates(static_cast<std::size_t>(k));
  for (Eigen::Index j = 0; j < b; ++j) {
    for (int c = 0; c < k; ++c) {
      const Eigen::Index col = c * b + j;
      candidates[static_cast<std::size_t>(c)] = std::min(q1(0, col), q2(0, col));
    }
    targets(j) = backup_target(batch.rewards(j), batch.terminals[static_cast<std::size_t>(j)],
                               gamma, candidates, max_q);
  }
  return targets;
}

double bellman_target(const TwinCritic& critic, const ActionSampler& target_policy,
                      const Transition& t, double gamma, bool max_q, int num_samples, Rng& rng) {
  TransitionBatch b;
  b.states = t.state;
  b.actions = t.action;
  b.rewards = Vector::Constant(1, t.reward);
  b.next_states = t.next_state;
  b.terminals = {t.terminal};
  return bellman_targets(critic, target_policy, b, gamma, max_q, num_samples, rng)(0);
}

double bellman_target(const TwinCritic& critic, const DiffusionPolicy& target_policy,
                      const Transition& t, double gamma, bool max_q, int num_samples, Rng& rng) {
  const ActionSampler sampler = [&target_policy](const Matrix& s, Rng& r) {
    return sample_actions(target_policy, s, r);
  };
  return bellman_target(critic, sampler, t, gamma, max_q, num_samples, rng);
}

double critic_loss(const TwinCritic& critic, const Vector& targets, const Matrix& states,
                   const Matrix& actions) {
  if (actions.cols() == 0) throw std::invalid_argument("critic_loss: empty batch");
  if (targets.size() != actions.cols()) throw DimensionError("critic_loss: target count mismatch");
  const Matrix y = targets.transpose();
  const Matrix q1 = q_values(critic.q1, critic.spec, states, actions);
  const Matrix q2 = q_values(critic.q2, critic.spec, states, actions);
  return ((y - q1).squaredNorm() + (y - q2).squaredNorm()) / static_cast<double>(actions.cols());
}

Var critic_loss(std::span<const Var> q1, std::span<const Var> q2, const MlpSpec& spec,
                Var states, Var actions, const Vector& targets) {
  if (actions.cols() == 0) throw std::invalid_argument("critic_loss: empty batch");
  if (targets.size() != actions.cols()) throw DimensionError("critic_loss: target count mismatch");
  Tape& t = *states.tape();
  const Var y = t.constant(targets.transpose());
  const Var r1 = sub(y, q_values(q1, spec, states, actions));
  const Var r2 = sub(y, q_values(q2, spec, states, actions));
  return scale(add(sum(square(r1)), sum(square(r2))), 1.0 / static_cast<double>(actions.cols()));
}

double q_guidance_weight(double eta, double mean_abs_q) {
  return eta / std::max(mean_abs_q, kQScaleFloor);
}

}  // namespace dql
