#include "dql/diffusion.hpp"

#include <cmath>
#include <string>

#include "dql/errors.hpp"

namespace dql {

void NoiseSchedule::check_index(int i) const {
  if (i < 1 || i > steps)
    throw std::out_of_range("diffusion index " + std::to_string(i) + " outside {1.." +
                            std::to_string(steps) + "}");
}

NoiseSchedule build_vp_schedule(int steps, double beta_min, double beta_max) {
  if (steps < 1) throw ConfigError("diffusion step count must be >= 1");
  if (!(beta_min > 0.0) || !(beta_max > beta_min))
    throw ConfigError("noise schedule requires 0 < beta_min < beta_max");
  NoiseSchedule s;
  s.steps = steps;
  s.beta_min = beta_min;
  s.beta_max = beta_max;
  const double n = static_cast<double>(steps);
  double alpha_bar = 1.0;
  for (int i = 1; i <= steps; ++i) {
    const double exponent =
        -beta_min / n - 0.5 * (beta_max - beta_min) * (2.0 * i - 1.0) / (n * n);
    const double alpha = std::exp(exponent);
    s.alphas.push_back(alpha);
    s.betas.push_back(-std::expm1(exponent));
    alpha_bar *= alpha;
    s.alpha_bars.push_back(alpha_bar);
  }
  return s;
}

ActionBounds ActionBounds::box(int dim, double lo, double hi) {
  ActionBounds b{Vector::Constant(dim, lo), Vector::Constant(dim, hi)};
  b.validate();
  return b;
}

void ActionBounds::validate() const {
  if (low.size() != high.size() || low.size() == 0)
    throw ConfigError("action bounds must be non-empty and have matching dimensions");
  if (!low.allFinite() || !high.allFinite()) throw ConfigError("action bounds must be finite");
  if ((low.array() >= high.array()).any()) throw ConfigError("action bounds require low < high");
}

bool ActionBounds::contains(const Vector& a) const {
  return a.size() == low.size() && (a.array() >= low.array()).all() &&
         (a.array() <= high.array()).all();
}

bool ActionBounds::contains_all(const Matrix& actions) const {
  for (Eigen::Index j = 0; j < actions.cols(); ++j)
    if (!contains(actions.col(j))) return false;
  return true;
}

Matrix ActionBounds::clamp(const Matrix& actions) const {
  return actions.cwiseMax(low.replicate(1, actions.cols()))
      .cwiseMin(high.replicate(1, actions.cols()));
}

DiffusionPolicy make_diffusion_policy(const DiffusionPolicyConfig& cfg, Rng& rng) {
  return make_diffusion_policy(cfg, rng, ActionBounds::box(cfg.action_dim));
}

DiffusionPolicy make_diffusion_policy(const DiffusionPolicyConfig& cfg, Rng& rng,
                                      ActionBounds bounds) {
  if (cfg.state_dim < 1 || cfg.action_dim < 1)
    throw ConfigError("state and action dimensions must be >= 1");
  bounds.validate();
  if (bounds.dim() != cfg.action_dim) throw ConfigError("action bounds dimension mismatch");
  time_embed(1, cfg.embed_dim);  // validates the embedding dimension

  DiffusionPolicy p;
  p.state_dim = cfg.state_dim;
  p.action_dim = cfg.action_dim;
  p.embed_dim = cfg.embed_dim;
  p.net = MlpSpec{cfg.action_dim + cfg.state_dim + cfg.embed_dim, cfg.hidden_dim, cfg.depth,
                  cfg.action_dim, Activation::Mish};
  p.params = mlp_init(p.net, rng);
  p.schedule = build_vp_schedule(cfg.steps, cfg.beta_min, cfg.beta_max);
  p.bounds = std::move(bounds);
  return p;
}

Vector forward_noise(const NoiseSchedule& sched, const Vector& a0, int i, const Vector& eps) {
  sched.check_index(i);
  if (a0.size() != eps.size()) throw DimensionError("forward_noise: action/noise size mismatch");
  const double ab = sched.alpha_bar(i);
  return std::sqrt(ab) * a0 + std::sqrt(1.0 - ab) * eps;
}

namespace {

void check_states(const DiffusionPolicy& policy, const Matrix& states) {
  if (states.rows() != policy.state_dim)
    throw DimensionError("state has " + std::to_string(states.rows()) + " rows, policy expects " +
                         std::to_string(policy.state_dim));
}

Matrix net_input(const DiffusionPolicy& policy, const Matrix& actions, const Matrix& states,
                 int i) {
  const Eigen::Index b = actions.cols();
  Matrix in(policy.net.input_dim, b);
  in.topRows(policy.action_dim) = actions;
  in.middleRows(policy.action_dim, policy.state_dim) = states;
  in.bottomRows(policy.embed_dim) = time_embed(i, policy.embed_dim).replicate(1, b);
  return in;
}

Matrix embedding_rows(const DiffusionPolicy& policy, const std::vector<int>& steps) {
  Matrix e(policy.embed_dim, static_cast<Eigen::Index>(steps.size()));
  for (std::size_t k = 0; k < steps.size(); ++k)
    e.col(static_cast<Eigen::Index>(k)) = time_embed(steps[k], policy.embed_dim);
  return e;
}

struct StepCoefficients {
  double action_scale;  // 1 / sqrt(alpha_i)
  double eps_scale;     // beta_i / sqrt(alpha_i (1 - abar_i))
  double noise_scale;   // sqrt(beta_i), zero at i = 1
};

StepCoefficients step_coefficients(const NoiseSchedule& s, int i) {
  const double a = s.alpha(i), b = s.beta(i), ab = s.alpha_bar(i);
  return {1.0 / std::sqrt(a), b / std::sqrt(a * (1.0 - ab)), i > 1 ? std::sqrt(b) : 0.0};
}

}  // namespace

Matrix predict_noise(const DiffusionPolicy& policy, const Matrix& actions, const Matrix& states,
                     int i) {
  policy.schedule.check_index(i);
  check_states(policy, states);
  if (actions.rows() != policy.action_dim || actions.cols() != states.cols())
    throw DimensionError("predict_noise: action batch shape mismatch");
  return mlp_forward(policy.params, policy.net, net_input(policy, actions, states, i));
}

Vector reverse_step(const DiffusionPolicy& policy, const Vector& ai, const Vector& s, int i,
                    const Vector& eps) {
  policy.schedule.check_index(i);
  if (eps.size() != policy.action_dim) throw DimensionError("reverse_step: noise size mismatch");
  const auto c = step_coefficients(policy.schedule, i);
  const Vector eps_hat = predict_noise(policy, Matrix(ai), Matrix(s), i).col(0);
  Vector next = c.action_scale * ai - c.eps_scale * eps_hat;
  if (i > 1) next += c.noise_scale * eps;
  return policy.bounds.clamp(next).col(0);
}

ChainNoise draw_chain_noise(const DiffusionPolicy& policy, Eigen::Index batch, Rng& rng) {
  ChainNoise n;
  n.start = rng.normal_matrix(policy.action_dim, batch);
  n.steps.resize(static_cast<std::size_t>(policy.schedule.steps));
  // Drawn from N down to 2, the order the chain consumes them.
  for (int i = policy.schedule.steps; i >= 2; --i)
    n.steps[static_cast<std::size_t>(i - 1)] = rng.normal_matrix(policy.action_dim, batch);
  n.steps[0] = Matrix::Zero(policy.action_dim, batch);
  return n;
}

Matrix sample_actions(const DiffusionPolicy& policy, const Matrix& states, const ChainNoise& noise) {
  check_states(policy, states);
  if (noise.start.rows() != policy.action_dim || noise.start.cols() != states.cols() ||
      noise.steps.size() != static_cast<std::size_t>(policy.schedule.steps))
    throw DimensionError("sample_actions: chain noise does not match batch");
  Matrix a = noise.start;
  for (int i = policy.schedule.steps; i >= 1; --i) {
    const auto c = step_coefficients(policy.schedule, i);
    const Matrix eps_hat = mlp_forward(policy.params, policy.net, net_input(policy, a, states, i));
    Matrix next = c.action_scale * a - c.eps_scale * eps_hat;
    if (i > 1) next += c.noise_scale * noise.steps[static_cast<std::size_t>(i - 1)];
    a = policy.bounds.clamp(next);
  }
  return a;
}

Matrix sample_actions(const DiffusionPolicy& policy, const Matrix& states, Rng& rng) {
  return sample_actions(policy, states, draw_chain_noise(policy, states.cols(), rng));
}

Vector sample_action(const DiffusionPolicy& policy, const Vector& state, Rng& rng) {
  return sample_actions(policy, Matrix(state), rng).col(0);
}

Var sample_actions(std::span<const Var> params, const DiffusionPolicy& policy, Var states,
                   const ChainNoise& noise) {
  check_states(policy, states.value());
  Tape& t = *states.tape();
  const Eigen::Index b = states.cols();
  if (noise.start.cols() != b) throw DimensionError("sample_actions: chain noise batch mismatch");
  const int saved_tag = t.step_tag();
  Var a = t.constant(noise.start);
  for (int i = policy.schedule.steps; i >= 1; --i) {
    t.set_step_tag(i);
    const auto c = step_coefficients(policy.schedule, i);
    const Var parts[] = {a, states,
                         t.constant(time_embed(i, policy.embed_dim).replicate(1, b))};
    const Var eps_hat = mlp(params, policy.net, vstack(parts));
    Var next = scale(a, c.action_scale) - scale(eps_hat, c.eps_scale);
    if (i > 1)
      next = add_const(next, c.noise_scale * noise.steps[static_cast<std::size_t>(i - 1)]);
    a = clamp_rows(next, policy.bounds.low, policy.bounds.high);
  }
  t.set_step_tag(saved_tag);
  return a;
}

NoiseBatch draw_noise_batch(const NoiseSchedule& sched, Eigen::Index batch, int action_dim,
                            Rng& rng) {
  NoiseBatch nb;
  nb.steps.resize(static_cast<std::size_t>(batch));
  for (auto& i : nb.steps) i = static_cast<int>(rng.uniform_int(1, sched.steps));
  nb.eps = rng.normal_matrix(action_dim, batch);
  return nb;
}

namespace {

void check_bc_inputs(const DiffusionPolicy& policy, const Matrix& states, const Matrix& actions,
                     const NoiseBatch& noise) {
  if (actions.cols() == 0) throw std::invalid_argument("bc_loss: empty batch");
  check_states(policy, states);
  if (actions.rows() != policy.action_dim || states.cols() != actions.cols())
    throw DimensionError("bc_loss: state/action batch mismatch");
  if (noise.eps.rows() != actions.rows() || noise.eps.cols() != actions.cols() ||
      noise.steps.size() != static_cast<std::size_t>(actions.cols()))
    throw DimensionError("bc_loss: noise batch does not match data batch");
  for (int i : noise.steps) policy.schedule.check_index(i);
}

Matrix noised_actions(const NoiseSchedule& sched, const Matrix& actions, const NoiseBatch& noise) {
  Matrix x(actions.rows(), actions.cols());
  for (Eigen::Index j = 0; j < actions.cols(); ++j) {
    const double ab = sched.alpha_bar(noise.steps[static_cast<std::size_t>(j)]);
    x.col(j) = std::sqrt(ab) * actions.col(j) + std::sqrt(1.0 - ab) * noise.eps.col(j);
  }
  return x;
}

}  // namespace

double bc_loss(const DiffusionPolicy& policy, const Matrix& states, const Matrix& actions,
               const NoiseBatch& noise) {
  check_bc_inputs(policy, states, actions, noise);
  Matrix in(policy.net.input_dim, actions.cols());
  in.topRows(policy.action_dim) = noised_actions(policy.schedule, actions, noise);
  in.middleRows(policy.action_dim, policy.state_dim) = states;
  in.bottomRows(policy.embed_dim) = embedding_rows(policy, noise.steps);
  const Matrix eps_hat = mlp_forward(policy.params, policy.net, in);
  return (noise.eps - eps_hat).squaredNorm() / static_cast<double>(actions.cols());
}

Var bc_loss(std::span<const Var> params, const DiffusionPolicy& policy, Var states,
            const Matrix& actions, const NoiseBatch& noise) {
  check_bc_inputs(policy, states.value(), actions, noise);
  Tape& t = *states.tape();
  const Var parts[] = {t.constant(noised_actions(policy.schedule, actions, noise)), states,
                       t.constant(embedding_rows(policy, noise.steps))};
  const Var eps_hat = mlp(params, policy.net, vstack(parts));
  const Var residual = sub(t.constant(noise.eps), eps_hat);
  return scale(sum(square(residual)), 1.0 / static_cast<double>(actions.cols()));
}

}  // namespace dql
