#pragma once

#include <span>

#include "dql/critic.hpp"
#include "dql/diffusion.hpp"
#include "dql/tape.hpp"
#include "dql/tensornet.hpp"

namespace dql {

inline constexpr double kLogStdMin = -5.0;
inline constexpr double kLogStdMax = 2.0;

/// Diagonal Gaussian with a state-conditioned mean network and a
/// state-independent log-std vector (clamped to [kLogStdMin, kLogStdMax]).
struct GaussianPolicy {
  int state_dim = 1;
  int action_dim = 2;
  MlpSpec mean_net;
  ParamSet mean_params;
  ParamSet log_std;  // single entry "log_std", action_dim x 1
  ActionBounds bounds;
};

/// Mixture density network. Head rows: K logits, then K means of
/// action_dim each, then K log-stds of action_dim each (component-major).
struct MixturePolicy {
  int state_dim = 1;
  int action_dim = 2;
  int components = 3;
  MlpSpec net;
  ParamSet params;
  ActionBounds bounds;
};

/// state -> center + half_width * tanh(net(state)).
struct DeterministicPolicy {
  int state_dim = 1;
  int action_dim = 2;
  MlpSpec net;
  ParamSet params;
  ActionBounds bounds;
};

struct BaselineNetConfig {
  int state_dim = 1;
  int action_dim = 2;
  int hidden_dim = 256;
  int depth = 3;
};

GaussianPolicy make_gaussian_policy(const BaselineNetConfig& cfg, ActionBounds bounds, Rng& rng);
MixturePolicy make_mixture_policy(const BaselineNetConfig& cfg, int components,
                                  ActionBounds bounds, Rng& rng);
DeterministicPolicy make_deterministic_policy(const BaselineNetConfig& cfg, ActionBounds bounds,
                                              Rng& rng);

/// Mean negative log-likelihood of the data actions.
double gaussian_bc_loss(const GaussianPolicy& policy, const Matrix& states, const Matrix& actions);
Var gaussian_bc_loss(std::span<const Var> mean_params, Var log_std, const GaussianPolicy& policy,
                     Var states, const Matrix& actions);

double mdn_loss(const MixturePolicy& policy, const Matrix& states, const Matrix& actions);
Var mdn_loss(std::span<const Var> params, const MixturePolicy& policy, Var states,
             const Matrix& actions);

/// Unnormalized mixture parameters for a batch of states.
struct MixtureHead {
  Matrix weights;                // K x B, columns sum to 1
  std::vector<Matrix> means;     // K entries of action_dim x B
  std::vector<Matrix> log_stds;  // K entries of action_dim x B, clamped
};
MixtureHead mixture_head(const MixturePolicy& policy, const Matrix& states);

Matrix deterministic_actions(const DeterministicPolicy& policy, const Matrix& states);
Var deterministic_actions(std::span<const Var> params, const DeterministicPolicy& policy,
                          Var states);

/// -alpha * mean Q1(s, pi(s)) + mean ||pi(s) - a||^2.
double td3bc_losses(const DeterministicPolicy& policy, const TwinCritic& critic,
                    const Matrix& states, const Matrix& actions, double alpha);
Var td3bc_losses(std::span<const Var> params, const DeterministicPolicy& policy,
                 const TwinCritic& critic, Var states, const Matrix& actions, double alpha);

/// Reparameterized mixture draw with the component choice and unit noise
/// held constant (one column per state).
struct MixtureDraw {
  std::vector<int> component;
  Matrix unit_noise;
};
MixtureDraw draw_mixture_noise(const MixturePolicy& policy, const Matrix& states, Rng& rng);
Matrix mixture_actions(const MixturePolicy& policy, const Matrix& states, const MixtureDraw& draw);
Var mixture_actions(std::span<const Var> params, const MixturePolicy& policy, Var states,
                    const MixtureDraw& draw);

// Shared evaluation interface; every result is clamped to the bounds.
Matrix sample(const GaussianPolicy& policy, const Matrix& states, Rng& rng);
Matrix sample(const MixturePolicy& policy, const Matrix& states, Rng& rng);
Matrix sample(const DeterministicPolicy& policy, const Matrix& states, Rng& rng);

}  // namespace dql
