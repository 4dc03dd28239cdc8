#include "dql/baselines.hpp"

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "dql/errors.hpp"

namespace dql {

namespace {

const double kLog2Pi = std::log(2.0 * std::numbers::pi);

void check_net_config(const BaselineNetConfig& cfg, const ActionBounds& bounds) {
  if (cfg.state_dim < 1 || cfg.action_dim < 1)
    throw ConfigError("policy state and action dimensions must be >= 1");
  bounds.validate();
  if (bounds.dim() != cfg.action_dim) throw ConfigError("action bounds dimension mismatch");
}

void check_batch(const Matrix& states, const Matrix& actions, int state_dim, int action_dim) {
  if (actions.cols() == 0) throw std::invalid_argument("empty batch");
  if (states.rows() != state_dim || actions.rows() != action_dim ||
      states.cols() != actions.cols())
    throw DimensionError("state/action batch does not match the policy dimensions");
}

Matrix clamp_log_std(const Matrix& ls) { return ls.cwiseMax(kLogStdMin).cwiseMin(kLogStdMax); }

Vector bounds_center(const ActionBounds& b) { return 0.5 * (b.low + b.high); }
Vector bounds_half_width(const ActionBounds& b) { return 0.5 * (b.high - b.low); }

}  // namespace

GaussianPolicy make_gaussian_policy(const BaselineNetConfig& cfg, ActionBounds bounds, Rng& rng) {
  check_net_config(cfg, bounds);
  GaussianPolicy p;
  p.state_dim = cfg.state_dim;
  p.action_dim = cfg.action_dim;
  p.mean_net = MlpSpec{cfg.state_dim, cfg.hidden_dim, cfg.depth, cfg.action_dim, Activation::Mish};
  p.mean_params = mlp_init(p.mean_net, rng);
  p.log_std.add("log_std", Matrix::Zero(cfg.action_dim, 1));
  p.bounds = std::move(bounds);
  return p;
}

MixturePolicy make_mixture_policy(const BaselineNetConfig& cfg, int components,
                                  ActionBounds bounds, Rng& rng) {
  check_net_config(cfg, bounds);
  if (components < 1) throw ConfigError("mixture needs at least one component");
  MixturePolicy p;
  p.state_dim = cfg.state_dim;
  p.action_dim = cfg.action_dim;
  p.components = components;
  p.net = MlpSpec{cfg.state_dim, cfg.hidden_dim, cfg.depth,
                  components * (1 + 2 * cfg.action_dim), Activation::Mish};
  p.params = mlp_init(p.net, rng);
  p.bounds = std::move(bounds);
  return p;
}

DeterministicPolicy make_deterministic_policy(const BaselineNetConfig& cfg, ActionBounds bounds,
                                              Rng& rng) {
  check_net_config(cfg, bounds);
  DeterministicPolicy p;
  p.state_dim = cfg.state_dim;
  p.action_dim = cfg.action_dim;
  p.net = MlpSpec{cfg.state_dim, cfg.hidden_dim, cfg.depth, cfg.action_dim, Activation::Mish};
  p.params = mlp_init(p.net, rng);
  p.bounds = std::move(bounds);
  return p;
}

double gaussian_bc_loss(const GaussianPolicy& policy, const Matrix& states, const Matrix& actions) {
  check_batch(states, actions, policy.state_dim, policy.action_dim);
  const Matrix mu = mlp_forward(policy.mean_params, policy.mean_net, states);
  const Vector ls = clamp_log_std(policy.log_std.value(0)).col(0);
  const Vector inv_std = (-ls.array()).exp().matrix();
  const Matrix z = inv_std.asDiagonal() * (actions - mu);
  const double b = static_cast<double>(actions.cols());
  return 0.5 * z.squaredNorm() / b + ls.sum() + 0.5 * policy.action_dim * kLog2Pi;
}

Var gaussian_bc_loss(std::span<const Var> mean_params, Var log_std, const GaussianPolicy& policy,
                     Var states, const Matrix& actions) {
  check_batch(states.value(), actions, policy.state_dim, policy.action_dim);
  Tape& t = *states.tape();
  const Eigen::Index b = actions.cols();
  const Var mu = mlp(mean_params, policy.mean_net, states);
  const Var ls = broadcast_cols(clamp(log_std, kLogStdMin, kLogStdMax), b);
  const Var z = cmul(sub(t.constant(actions), mu), exp(scale(ls, -1.0)));
  const Var per_sample = add(scale(sum_rows(square(z)), 0.5), sum_rows(ls));
  return add_scalar(mean(per_sample), 0.5 * policy.action_dim * kLog2Pi);
}

MixtureHead mixture_head(const MixturePolicy& policy, const Matrix& states) {
  if (states.rows() != policy.state_dim) throw DimensionError("mixture_head: state dimension mismatch");
  const Matrix head = mlp_forward(policy.params, policy.net, states);
  const int k = policy.components;
  const int d = policy.action_dim;
  MixtureHead out;
  out.weights.resize(k, states.cols());
  for (Eigen::Index j = 0; j < states.cols(); ++j) {
    const Vector logits = head.col(j).head(k);
    const Vector e = (logits.array() - logits.maxCoeff()).exp().matrix();
    out.weights.col(j) = e / e.sum();
  }
  for (int c = 0; c < k; ++c) {
    out.means.push_back(head.middleRows(k + c * d, d));
    out.log_stds.push_back(clamp_log_std(head.middleRows(k + k * d + c * d, d)));
  }
  return out;
}

double mdn_loss(const MixturePolicy& policy, const Matrix& states, const Matrix& actions) {
  check_batch(states, actions, policy.state_dim, policy.action_dim);
  const MixtureHead h = mixture_head(policy, states);
  double total = 0.0;
  for (Eigen::Index j = 0; j < actions.cols(); ++j) {
    std::vector<double> terms(static_cast<std::size_t>(policy.components));
    for (int c = 0; c < policy.components; ++c) {
      const Vector ls = h.log_stds[c].col(j);
      const Vector z = (actions.col(j) - h.means[c].col(j)).cwiseQuotient(ls.array().exp().matrix());
      terms[c] = std::log(h.weights(c, j)) - 0.5 * z.squaredNorm() - ls.sum() -
                 0.5 * policy.action_dim * kLog2Pi;
    }
    double m = terms[0];
    for (double v : terms) m = std::max(m, v);
    double s = 0.0;
    for (double v : terms) s += std::exp(v - m);
    total -= m + std::log(s);
  }
  return total / static_cast<double>(actions.cols());
}

Var mdn_loss(std::span<const Var> params, const MixturePolicy& policy, Var states,
             const Matrix& actions) {
  check_batch(states.value(), actions, policy.state_dim, policy.action_dim);
  Tape& t = *states.tape();
  const int k = policy.components;
  const int d = policy.action_dim;
  const Var head = mlp(params, policy.net, states);
  const Var logits = slice_rows(head, 0, k);
  const Var a = t.constant(actions);
  std::vector<Var> comps;
  comps.reserve(static_cast<std::size_t>(k));
  for (int c = 0; c < k; ++c) {
    const Var mu = slice_rows(head, k + c * d, d);
    const Var ls = clamp(slice_rows(head, k + k * d + c * d, d), kLogStdMin, kLogStdMax);
    const Var z = cmul(sub(a, mu), exp(scale(ls, -1.0)));
    comps.push_back(sub(scale(sum_rows(square(z)), -0.5), sum_rows(ls)));
  }
  const Var joint = add(vstack(comps), logits);
  const Var log_density = sub(logsumexp_rows(joint), logsumexp_rows(logits));
  return add_scalar(scale(mean(log_density), -1.0), 0.5 * d * kLog2Pi);
}

Matrix deterministic_actions(const DeterministicPolicy& policy, const Matrix& states) {
  if (states.rows() != policy.state_dim) throw DimensionError("policy state dimension mismatch");
  const Matrix raw = mlp_forward(policy.params, policy.net, states).array().tanh().matrix();
  Matrix a = bounds_half_width(policy.bounds).asDiagonal() * raw;
  a.colwise() += bounds_center(policy.bounds);
  return a;
}

Var deterministic_actions(std::span<const Var> params, const DeterministicPolicy& policy,
                          Var states) {
  const Var raw = tanh(mlp(params, policy.net, states));
  const Var scaled = scale_rows(raw, bounds_half_width(policy.bounds));
  return add_const(scaled, bounds_center(policy.bounds).replicate(1, states.cols()));
}

double td3bc_losses(const DeterministicPolicy& policy, const TwinCritic& critic,
                    const Matrix& states, const Matrix& actions, double alpha) {
  check_batch(states, actions, policy.state_dim, policy.action_dim);
  const Matrix pi = deterministic_actions(policy, states);
  const Matrix q = q_values(critic.q1, critic.spec, states, pi);
  const double b = static_cast<double>(actions.cols());
  return -alpha * q.sum() / b + (pi - actions).squaredNorm() / b;
}

Var td3bc_losses(std::span<const Var> params, const DeterministicPolicy& policy,
                 const TwinCritic& critic, Var states, const Matrix& actions, double alpha) {
  check_batch(states.value(), actions, policy.state_dim, policy.action_dim);
  Tape& t = *states.tape();
  const Var pi = deterministic_actions(params, policy, states);
  const auto q1 = t.bind(critic.q1, false);
  const Var q = q_values(q1, critic.spec, states, pi);
  const Var bc = mean(sum_rows(square(sub(pi, t.constant(actions)))));
  return add(scale(mean(q), -alpha), bc);
}

MixtureDraw draw_mixture_noise(const MixturePolicy& policy, const Matrix& states, Rng& rng) {
  const MixtureHead h = mixture_head(policy, states);
  MixtureDraw d;
  d.component.resize(static_cast<std::size_t>(states.cols()));
  for (Eigen::Index j = 0; j < states.cols(); ++j) {
    const double u = rng.uniform();
    double acc = 0.0;
    int pick = policy.components - 1;
    for (int c = 0; c < policy.components; ++c) {
      acc += h.weights(c, j);
      if (u < acc) {
        pick = c;
        break;
      }
    }
    d.component[static_cast<std::size_t>(j)] = pick;
  }
  d.unit_noise = rng.normal_matrix(policy.action_dim, states.cols());
  return d;
}

Matrix mixture_actions(const MixturePolicy& policy, const Matrix& states, const MixtureDraw& draw) {
  const MixtureHead h = mixture_head(policy, states);
  Matrix a(policy.action_dim, states.cols());
  for (Eigen::Index j = 0; j < states.cols(); ++j) {
    const int c = draw.component[static_cast<std::size_t>(j)];
    a.col(j) = h.means[c].col(j) +
               h.log_stds[c].col(j).array().exp().matrix().cwiseProduct(draw.unit_noise.col(j));
  }
  return policy.bounds.clamp(a);
}

Var mixture_actions(std::span<const Var> params, const MixturePolicy& policy, Var states,
                    const MixtureDraw& draw) {
  Tape& t = *states.tape();
  const int k = policy.components;
  const int d = policy.action_dim;
  const Eigen::Index b = states.cols();
  const Var head = mlp(params, policy.net, states);
  Var total = t.constant(Matrix::Zero(d, b));
  for (int c = 0; c < k; ++c) {
    Matrix mask = Matrix::Zero(d, b);
    for (Eigen::Index j = 0; j < b; ++j)
      if (draw.component[static_cast<std::size_t>(j)] == c) mask.col(j).setOnes();
    if (mask.sum() == 0.0) continue;
    const Var mu = slice_rows(head, k + c * d, d);
    const Var ls = clamp(slice_rows(head, k + k * d + c * d, d), kLogStdMin, kLogStdMax);
    const Var a_c = add(mu, cmul_const(exp(ls), draw.unit_noise));
    total = add(total, cmul_const(a_c, mask));
  }
  return clamp_rows(total, policy.bounds.low, policy.bounds.high);
}

Matrix sample(const GaussianPolicy& policy, const Matrix& states, Rng& rng) {
  const Matrix mu = mlp_forward(policy.mean_params, policy.mean_net, states);
  const Vector std_dev = clamp_log_std(policy.log_std.value(0)).col(0).array().exp().matrix();
  const Matrix noise = rng.normal_matrix(policy.action_dim, states.cols());
  return policy.bounds.clamp(mu + std_dev.asDiagonal() * noise);
}

Matrix sample(const MixturePolicy& policy, const Matrix& states, Rng& rng) {
  return mixture_actions(policy, states, draw_mixture_noise(policy, states, rng));
}

Matrix sample(const DeterministicPolicy& policy, const Matrix& states, Rng& /*rng*/) {
  return deterministic_actions(policy, states);
}

}  // namespace dql
