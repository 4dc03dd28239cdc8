#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "dql/checkpoint.hpp"
#include "dql/critic.hpp"
#include "dql/dataset.hpp"
#include "dql/diffusion.hpp"

namespace dql {

enum class Algorithm { DiffusionQL, BcDiffusion, BcMle, Mdn, Td3bc, Td3bcGm };

std::string to_string(Algorithm algo);
// Throws ConfigError listing the valid names.
Algorithm parse_algorithm(std::string_view name);
const std::vector<std::string>& algorithm_names();

// Which critic output feeds the policy-improvement term and its scale.
enum class GuidanceCritic { First, Min, Mean };

std::string to_string(GuidanceCritic g);
GuidanceCritic parse_guidance_critic(std::string_view name);

struct TrainConfig {
  Algorithm algorithm = Algorithm::DiffusionQL;
  std::uint64_t seed = 0;

  int diffusion_steps = 5;
  double beta_min = 0.1;
  double beta_max = 10.0;
  int embed_dim = 16;
  int hidden_dim = 256;
  int depth = 3;
  int mixture_components = 3;

  double eta = 1.0;
  double actor_lr = 3e-4;
  double critic_lr = 3e-4;
  double gamma = 0.99;
  double rho = 0.995;
  int batch_size = 256;
  int epochs = 1;
  int steps_per_epoch = 1000;
  bool max_q_backup = false;
  int max_q_samples = 10;
  GuidanceCritic guidance = GuidanceCritic::First;

  int eval_interval = 1;
  int eval_size = 2048;
  bool early_stop = false;
  bool record_wall_time = false;
  std::filesystem::path checkpoint_dir;
  // Where the data came from, e.g. "bandit:corners"; informational.
  std::string task;

  // Throws ConfigError naming the offending field.
  void validate() const;
  bool uses_critic() const noexcept;
  // BC-diffusion always runs with eta = 0.
  double effective_eta() const noexcept;

  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

/// Training state for the Q-guided diffusion policy.
struct TrainState {
  DiffusionPolicy policy;
  DiffusionPolicy target_policy;
  TwinCritic critic;
  AdamState actor_opt;
  AdamState q1_opt;
  AdamState q2_opt;
  long step = 0;
  Rng rng;
};

TrainState init_train_state(const TrainConfig& cfg, int state_dim, int action_dim,
                            const ActionBounds& bounds);

struct StepMetrics {
  double l_d = 0.0;
  double l_q = 0.0;
  double policy_loss = 0.0;
  double critic_loss = 0.0;
  double mean_abs_q = 0.0;
  double alpha = 0.0;
};

struct StepHooks {
  // Called after the critic update, right before the actor update.
  std::function<void(const TrainState&)> before_actor_update;
};

/// One Diffusion-QL iteration: critic regression toward the double-Q
/// backup, an actor step on L_d - alpha * mean Q(s, a^0), then Polyak updates
/// of every target network. On NonFiniteError the state is left as it was.
StepMetrics train_step(TrainState& state, const TransitionBatch& batch, const TrainConfig& cfg,
                       const StepHooks* hooks = nullptr);

// Critic half of a step; returns the loss. Shared with the TD3+BC baselines.
double critic_update(TwinCritic& critic, AdamState& q1_opt, AdamState& q2_opt,
                     const TransitionBatch& batch, const Vector& targets);

double mean_abs_q(const TwinCritic& critic, GuidanceCritic which, const Matrix& states,
                  const Matrix& actions);

/// Fixed evaluation batch used for the logged L_d so consecutive records are
/// comparable.
struct EvalSet {
  TransitionBatch batch;
  std::uint64_t noise_seed = 0;
};

EvalSet make_eval_set(const OfflineDataset& data, const TrainConfig& cfg);
double eval_bc_loss(const DiffusionPolicy& policy, const EvalSet& eval);

/// A trainable policy (diffusion or baseline) behind one interface so the
/// training loop, checkpointing and evaluation stay algorithm-agnostic.
class Learner {
 public:
  virtual ~Learner() = default;

  virtual Algorithm algorithm() const = 0;
  virtual StepMetrics step(const TransitionBatch& batch) = 0;
  // Behavior-cloning loss on the evaluation set (L_d for diffusion).
  virtual double eval_loss(const EvalSet& eval) const = 0;
  virtual Matrix sample(const Matrix& states, Rng& rng) const = 0;
  virtual Checkpoint checkpoint() const = 0;
  virtual Rng& rng() = 0;
};

std::unique_ptr<Learner> make_learner(const TrainConfig& cfg, int state_dim, int action_dim,
                                      const ActionBounds& bounds);
// Restores any learner from a checkpoint, including optimizer and RNG state.
std::unique_ptr<Learner> load_learner(const Checkpoint& ckpt);

struct MetricsRecord {
  int epoch = 0;
  long step = 0;
  double l_d = 0.0;
  double l_q = 0.0;
  double critic_loss = 0.0;
  double mean_abs_q = 0.0;
  double wall_ms = 0.0;

  nlohmann::json to_json() const;
  static MetricsRecord from_json(const nlohmann::json& j);
};

// One JSON document per line.
std::string format_metrics_line(const MetricsRecord& r);
std::vector<MetricsRecord> read_metrics_log(const std::filesystem::path& path);

struct CheckpointInfo {
  int epoch = 0;
  std::filesystem::path path;
};

struct TrainResult {
  std::vector<CheckpointInfo> checkpoints;
  std::vector<MetricsRecord> log;
  bool early_stopped = false;
  // Set when a checkpoint write failed; training stopped there and every
  // earlier checkpoint is intact.
  std::optional<std::string> error;
  std::unique_ptr<Learner> learner;
};

inline constexpr std::string_view kMetricsFileName = "metrics.jsonl";

std::filesystem::path checkpoint_path(const std::filesystem::path& dir, int epoch);

/// Runs epochs x steps_per_epoch updates on uniformly sampled mini-batches.
/// Writes an initial checkpoint plus one checkpoint and metrics record per
/// evaluation; with an empty checkpoint_dir everything stays in memory.
TrainResult train(const TrainConfig& cfg, const OfflineDataset& data);

/// True iff the latest L_d strictly exceeds the previous one.
bool early_stop_check(std::span<const MetricsRecord> log);
bool early_stop_check(std::span<const double> l_d_history);

struct Selection {
  std::size_t index = 0;
  bool warning = false;  // fewer than two candidates
};

/// Index of the second-lowest L_d; equal values rank the later epoch lower.
Selection select_checkpoint_offline(std::span<const double> l_d, std::span<const int> epochs);
Selection select_checkpoint_offline(std::span<const MetricsRecord> log);

}  // namespace dql
