#pragma once

#include <span>
#include <vector>

#include "dql/rng.hpp"
#include "dql/tape.hpp"
#include "dql/tensornet.hpp"

namespace dql {

/// Variance-preserving noise schedule for N diffusion steps.
///
/// Vectors are stored 0-based; the accessors take the 1-based diffusion
/// index i in {1..N}.
struct NoiseSchedule {
  int steps = 0;
  double beta_min = 0.1;
  double beta_max = 10.0;
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;

  double beta(int i) const { return betas.at(static_cast<std::size_t>(i - 1)); }
  double alpha(int i) const { return alphas.at(static_cast<std::size_t>(i - 1)); }
  double alpha_bar(int i) const { return alpha_bars.at(static_cast<std::size_t>(i - 1)); }
  void check_index(int i) const;
};

// beta_i = 1 - exp(-beta_min / N - 0.5 (beta_max - beta_min) (2i - 1) / N^2)
NoiseSchedule build_vp_schedule(int steps, double beta_min = 0.1, double beta_max = 10.0);

struct ActionBounds {
  Vector low;
  Vector high;

  static ActionBounds box(int dim, double lo = -1.0, double hi = 1.0);
  int dim() const noexcept { return static_cast<int>(low.size()); }
  bool contains(const Vector& a) const;
  bool contains_all(const Matrix& actions) const;
  Matrix clamp(const Matrix& actions) const;
  void validate() const;
};

struct DiffusionPolicyConfig {
  int state_dim = 1;
  int action_dim = 2;
  int steps = 5;
  int hidden_dim = 256;
  int depth = 3;
  int embed_dim = 16;
  double beta_min = 0.1;
  double beta_max = 10.0;
};

/// Conditional denoising policy: an epsilon-prediction MLP over
/// [noisy action; state; time embedding] plus the reverse-chain schedule.
struct DiffusionPolicy {
  int state_dim = 1;
  int action_dim = 2;
  int embed_dim = 16;
  MlpSpec net;
  ParamSet params;
  NoiseSchedule schedule;
  ActionBounds bounds;
};

DiffusionPolicy make_diffusion_policy(const DiffusionPolicyConfig& cfg, Rng& rng);
DiffusionPolicy make_diffusion_policy(const DiffusionPolicyConfig& cfg, Rng& rng,
                                      ActionBounds bounds);

Vector forward_noise(const NoiseSchedule& sched, const Vector& a0, int i, const Vector& eps);

// Batched epsilon prediction at a single diffusion index.
Matrix predict_noise(const DiffusionPolicy& policy, const Matrix& actions, const Matrix& states,
                     int i);

/// One reverse step, clamped to the action bounds. The injected noise is
/// ignored at i = 1.
Vector reverse_step(const DiffusionPolicy& policy, const Vector& ai, const Vector& s, int i,
                    const Vector& eps);

/// All noise consumed by a batched reverse chain: the starting sample a^N and
/// the per-step injection noise (index i-1 holds step i; step 1 is unused).
struct ChainNoise {
  Matrix start;
  std::vector<Matrix> steps;
};

ChainNoise draw_chain_noise(const DiffusionPolicy& policy, Eigen::Index batch, Rng& rng);

// states: (state_dim x batch) -> actions (action_dim x batch)
Matrix sample_actions(const DiffusionPolicy& policy, const Matrix& states, const ChainNoise& noise);
Matrix sample_actions(const DiffusionPolicy& policy, const Matrix& states, Rng& rng);
Vector sample_action(const DiffusionPolicy& policy, const Vector& state, Rng& rng);

/// Differentiable reverse chain. `params` are the policy parameters bound on
/// the tape; the chain noise is a constant.
Var sample_actions(std::span<const Var> params, const DiffusionPolicy& policy, Var states,
                   const ChainNoise& noise);

/// Per-datum diffusion index and target noise for the behavior-cloning loss.
struct NoiseBatch {
  std::vector<int> steps;
  Matrix eps;
};

NoiseBatch draw_noise_batch(const NoiseSchedule& sched, Eigen::Index batch, int action_dim,
                            Rng& rng);

/// Mean over the batch of ||eps - eps_theta(sqrt(abar_i) a + sqrt(1 - abar_i) eps, s, i)||^2.
double bc_loss(const DiffusionPolicy& policy, const Matrix& states, const Matrix& actions,
               const NoiseBatch& noise);
Var bc_loss(std::span<const Var> params, const DiffusionPolicy& policy, Var states,
            const Matrix& actions, const NoiseBatch& noise);

}  // namespace dql
