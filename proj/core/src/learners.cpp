// Learner implementations: the Q-guided diffusion policy and
// the comparison baselines, all behind the Learner interface.

#include <string>
#include <type_traits>
#include <vector>

#include "dql/baselines.hpp"
#include "dql/errors.hpp"
#include "dql/trainer.hpp"

namespace dql {

namespace {

void store_adam(Checkpoint& c, const std::string& prefix, const AdamState& opt) {
  c.add_group(prefix + ".m", opt.m);
  c.add_group(prefix + ".v", opt.v);
  c.scalars[prefix] = {{"step", opt.step}, {"lr", opt.lr}};
}

void restore_params(const Checkpoint& c, const std::string& name, ParamSet& into) {
  const ParamSet& src = c.group(name);
  if (!src.same_shape(into))
    throw DimensionError("checkpoint group '" + name + "' does not match the configured network");
  into = src;
}

void restore_adam(const Checkpoint& c, const std::string& prefix, AdamState& opt) {
  restore_params(c, prefix + ".m", opt.m);
  restore_params(c, prefix + ".v", opt.v);
  opt.step = c.scalars.at(prefix).at("step").get<long>();
  opt.lr = c.scalars.at(prefix).at("lr").get<double>();
}

nlohmann::json bounds_json(const ActionBounds& b) {
  return {{"low", std::vector<double>(b.low.data(), b.low.data() + b.low.size())},
          {"high", std::vector<double>(b.high.data(), b.high.data() + b.high.size())}};
}

ActionBounds bounds_from_json(const nlohmann::json& j) {
  const auto lo = j.at("low").get<std::vector<double>>();
  const auto hi = j.at("high").get<std::vector<double>>();
  ActionBounds b{Eigen::Map<const Vector>(lo.data(), static_cast<Eigen::Index>(lo.size())),
                 Eigen::Map<const Vector>(hi.data(), static_cast<Eigen::Index>(hi.size()))};
  b.validate();
  return b;
}

/// Shared bookkeeping: config, dimensions, RNG and the step counter.
class LearnerBase : public Learner {
 public:
  LearnerBase(TrainConfig cfg, int state_dim, int action_dim, ActionBounds bounds)
      : cfg_(std::move(cfg)),
        state_dim_(state_dim),
        action_dim_(action_dim),
        bounds_(std::move(bounds)),
        rng_(cfg_.seed) {}

  Algorithm algorithm() const override { return cfg_.algorithm; }
  Rng& rng() override { return rng_; }

  virtual void restore(const Checkpoint& c) = 0;

 protected:
  Checkpoint base_checkpoint(const Rng& rng, long step) const {
    Checkpoint c;
    c.algorithm = to_string(cfg_.algorithm);
    c.step = step;
    c.config = cfg_.to_json();
    // Checkpoints do not depend on where they were written.
    c.config.erase("checkpoint_dir");
    c.rng_state = rng.state();
    c.scalars["state_dim"] = state_dim_;
    c.scalars["action_dim"] = action_dim_;
    c.scalars["bounds"] = bounds_json(bounds_);
    return c;
  }

  BaselineNetConfig net_config() const {
    return {state_dim_, action_dim_, cfg_.hidden_dim, cfg_.depth};
  }

  TrainConfig cfg_;
  int state_dim_;
  int action_dim_;
  ActionBounds bounds_;
  Rng rng_;
  long step_ = 0;
};

class DiffusionLearner final : public LearnerBase {
 public:
  DiffusionLearner(TrainConfig cfg, int sd, int ad, ActionBounds bounds)
      : LearnerBase(std::move(cfg), sd, ad, std::move(bounds)),
        state_(init_train_state(cfg_, sd, ad, bounds_)) {}

  StepMetrics step(const TransitionBatch& batch) override { return train_step(state_, batch, cfg_); }

  // Batch sampling and the update share the TrainState stream.
  Rng& rng() override { return state_.rng; }

  double eval_loss(const EvalSet& eval) const override { return eval_bc_loss(state_.policy, eval); }

  Matrix sample(const Matrix& states, Rng& rng) const override {
    return sample_actions(state_.policy, states, rng);
  }

  Checkpoint checkpoint() const override {
    Checkpoint c = base_checkpoint(state_.rng, state_.step);
    c.add_group("policy", state_.policy.params);
    c.add_group("target_policy", state_.target_policy.params);
    c.add_group("q1", state_.critic.q1);
    c.add_group("q2", state_.critic.q2);
    c.add_group("q1_target", state_.critic.q1_target);
    c.add_group("q2_target", state_.critic.q2_target);
    store_adam(c, "actor_opt", state_.actor_opt);
    store_adam(c, "q1_opt", state_.q1_opt);
    store_adam(c, "q2_opt", state_.q2_opt);
    return c;
  }

  void restore(const Checkpoint& c) override {
    restore_params(c, "policy", state_.policy.params);
    restore_params(c, "target_policy", state_.target_policy.params);
    restore_params(c, "q1", state_.critic.q1);
    restore_params(c, "q2", state_.critic.q2);
    restore_params(c, "q1_target", state_.critic.q1_target);
    restore_params(c, "q2_target", state_.critic.q2_target);
    restore_adam(c, "actor_opt", state_.actor_opt);
    restore_adam(c, "q1_opt", state_.q1_opt);
    restore_adam(c, "q2_opt", state_.q2_opt);
    state_.step = c.step;
    state_.rng.set_state(c.rng_state);
  }

  const TrainState& state() const { return state_; }

 private:
  TrainState state_;
};

class GaussianLearner final : public LearnerBase {
 public:
  GaussianLearner(TrainConfig cfg, int sd, int ad, ActionBounds bounds)
      : LearnerBase(std::move(cfg), sd, ad, std::move(bounds)),
        policy_(make_gaussian_policy(net_config(), bounds_, rng_)),
        mean_opt_(adam_init(policy_.mean_params, cfg_.actor_lr)),
        std_opt_(adam_init(policy_.log_std, cfg_.actor_lr)) {}

  StepMetrics step(const TransitionBatch& batch) override {
    Tape tape;
    const auto mp = tape.bind(policy_.mean_params);
    const auto ls = tape.bind(policy_.log_std);
    const Var loss = gaussian_bc_loss(mp, ls[0], policy_, tape.constant(batch.states), batch.actions);
    tape.backward(loss);
    adam_step(mean_opt_, policy_.mean_params, tape.gradients(mp, policy_.mean_params));
    adam_step(std_opt_, policy_.log_std, tape.gradients(ls, policy_.log_std));
    ++step_;
    StepMetrics m;
    m.l_d = m.policy_loss = loss.scalar();
    return m;
  }

  double eval_loss(const EvalSet& eval) const override {
    return gaussian_bc_loss(policy_, eval.batch.states, eval.batch.actions);
  }

  Matrix sample(const Matrix& states, Rng& rng) const override { return dql::sample(policy_, states, rng); }

  Checkpoint checkpoint() const override {
    Checkpoint c = base_checkpoint(rng_, step_);
    c.add_group("mean_net", policy_.mean_params);
    c.add_group("log_std", policy_.log_std);
    store_adam(c, "mean_opt", mean_opt_);
    store_adam(c, "std_opt", std_opt_);
    return c;
  }

  void restore(const Checkpoint& c) override {
    restore_params(c, "mean_net", policy_.mean_params);
    restore_params(c, "log_std", policy_.log_std);
    restore_adam(c, "mean_opt", mean_opt_);
    restore_adam(c, "std_opt", std_opt_);
    step_ = c.step;
    rng_.set_state(c.rng_state);
  }

  const GaussianPolicy& policy() const { return policy_; }

 private:
  GaussianPolicy policy_;
  AdamState mean_opt_;
  AdamState std_opt_;
};

class MdnLearner final : public LearnerBase {
 public:
  MdnLearner(TrainConfig cfg, int sd, int ad, ActionBounds bounds)
      : LearnerBase(std::move(cfg), sd, ad, std::move(bounds)),
        policy_(make_mixture_policy(net_config(), cfg_.mixture_components, bounds_, rng_)),
        opt_(adam_init(policy_.params, cfg_.actor_lr)) {}

  StepMetrics step(const TransitionBatch& batch) override {
    Tape tape;
    const auto p = tape.bind(policy_.params);
    const Var loss = mdn_loss(p, policy_, tape.constant(batch.states), batch.actions);
    tape.backward(loss);
    adam_step(opt_, policy_.params, tape.gradients(p, policy_.params));
    ++step_;
    StepMetrics m;
    m.l_d = m.policy_loss = loss.scalar();
    return m;
  }

  double eval_loss(const EvalSet& eval) const override {
    return mdn_loss(policy_, eval.batch.states, eval.batch.actions);
  }

  Matrix sample(const Matrix& states, Rng& rng) const override { return dql::sample(policy_, states, rng); }

  Checkpoint checkpoint() const override {
    Checkpoint c = base_checkpoint(rng_, step_);
    c.add_group("mixture_net", policy_.params);
    store_adam(c, "actor_opt", opt_);
    return c;
  }

  void restore(const Checkpoint& c) override {
    restore_params(c, "mixture_net", policy_.params);
    restore_adam(c, "actor_opt", opt_);
    step_ = c.step;
    rng_.set_state(c.rng_state);
  }

 private:
  MixturePolicy policy_;
  AdamState opt_;
};

/// TD3+BC with either a deterministic tanh actor or a Gaussian-mixture actor
/// trained by NLL (TD3+BC-GM). Critics use the same double-Q backup as
/// Diffusion-QL.
template <typename Actor>
class Td3bcLearner final : public LearnerBase {
 public:
  Td3bcLearner(TrainConfig cfg, int sd, int ad, ActionBounds bounds)
      : LearnerBase(std::move(cfg), sd, ad, std::move(bounds)),
        actor_(make_actor()),
        target_actor_(actor_),
        critic_(make_twin_critic({sd, ad, cfg_.hidden_dim, cfg_.depth}, rng_)),
        actor_opt_(adam_init(actor_.params, cfg_.actor_lr)),
        q1_opt_(adam_init(critic_.q1, cfg_.critic_lr)),
        q2_opt_(adam_init(critic_.q2, cfg_.critic_lr)) {}

  StepMetrics step(const TransitionBatch& batch) override {
    StepMetrics m;
    const ActionSampler target_sampler = [this](const Matrix& s, Rng& r) {
      return dql::sample(target_actor_, s, r);
    };
    const Vector targets = bellman_targets(critic_, target_sampler, batch, cfg_.gamma,
                                           cfg_.max_q_backup, cfg_.max_q_samples, rng_);
    m.critic_loss = critic_update(critic_, q1_opt_, q2_opt_, batch, targets);
    m.mean_abs_q = mean_abs_q(critic_, GuidanceCritic::First, batch.states, batch.actions);
    m.alpha = q_guidance_weight(cfg_.eta, m.mean_abs_q);

    Tape tape;
    const auto p = tape.bind(actor_.params);
    const Var states = tape.constant(batch.states);
    Var loss;
    if constexpr (std::is_same_v<Actor, DeterministicPolicy>) {
      loss = td3bc_losses(p, actor_, critic_, states, batch.actions, m.alpha);
      m.l_d = (deterministic_actions(actor_, batch.states) - batch.actions).squaredNorm() /
              static_cast<double>(batch.size());
    } else {
      const MixtureDraw draw = draw_mixture_noise(actor_, batch.states, rng_);
      const Var ld = mdn_loss(p, actor_, states, batch.actions);
      const Var a = mixture_actions(p, actor_, states, draw);
      const auto q1 = tape.bind(critic_.q1, false);
      const Var lq = scale(mean(q_values(q1, critic_.spec, states, a)), -m.alpha);
      m.l_d = ld.scalar();
      loss = add(ld, lq);
    }
    m.policy_loss = loss.scalar();
    m.l_q = m.policy_loss - m.l_d;
    tape.backward(loss);
    adam_step(actor_opt_, actor_.params, tape.gradients(p, actor_.params));

    polyak_update(target_actor_.params, actor_.params, cfg_.rho);
    polyak_update(critic_.q1_target, critic_.q1, cfg_.rho);
    polyak_update(critic_.q2_target, critic_.q2, cfg_.rho);
    ++step_;
    return m;
  }

  double eval_loss(const EvalSet& eval) const override {
    if constexpr (std::is_same_v<Actor, DeterministicPolicy>)
      return (deterministic_actions(actor_, eval.batch.states) - eval.batch.actions).squaredNorm() /
             static_cast<double>(eval.batch.size());
    else
      return mdn_loss(actor_, eval.batch.states, eval.batch.actions);
  }

  Matrix sample(const Matrix& states, Rng& rng) const override { return dql::sample(actor_, states, rng); }

  Checkpoint checkpoint() const override {
    Checkpoint c = base_checkpoint(rng_, step_);
    c.add_group("actor", actor_.params);
    c.add_group("target_actor", target_actor_.params);
    c.add_group("q1", critic_.q1);
    c.add_group("q2", critic_.q2);
    c.add_group("q1_target", critic_.q1_target);
    c.add_group("q2_target", critic_.q2_target);
    store_adam(c, "actor_opt", actor_opt_);
    store_adam(c, "q1_opt", q1_opt_);
    store_adam(c, "q2_opt", q2_opt_);
    return c;
  }

  void restore(const Checkpoint& c) override {
    restore_params(c, "actor", actor_.params);
    restore_params(c, "target_actor", target_actor_.params);
    restore_params(c, "q1", critic_.q1);
    restore_params(c, "q2", critic_.q2);
    restore_params(c, "q1_target", critic_.q1_target);
    restore_params(c, "q2_target", critic_.q2_target);
    restore_adam(c, "actor_opt", actor_opt_);
    restore_adam(c, "q1_opt", q1_opt_);
    restore_adam(c, "q2_opt", q2_opt_);
    step_ = c.step;
    rng_.set_state(c.rng_state);
  }

 private:
  Actor make_actor() {
    if constexpr (std::is_same_v<Actor, DeterministicPolicy>)
      return make_deterministic_policy(net_config(), bounds_, rng_);
    else
      return make_mixture_policy(net_config(), cfg_.mixture_components, bounds_, rng_);
  }

  Actor actor_;
  Actor target_actor_;
  TwinCritic critic_;
  AdamState actor_opt_;
  AdamState q1_opt_;
  AdamState q2_opt_;
};

std::unique_ptr<LearnerBase> construct(const TrainConfig& cfg, int sd, int ad,
                                       const ActionBounds& bounds) {
  cfg.validate();
  switch (cfg.algorithm) {
    case Algorithm::DiffusionQL:
    case Algorithm::BcDiffusion:
      return std::make_unique<DiffusionLearner>(cfg, sd, ad, bounds);
    case Algorithm::BcMle: return std::make_unique<GaussianLearner>(cfg, sd, ad, bounds);
    case Algorithm::Mdn: return std::make_unique<MdnLearner>(cfg, sd, ad, bounds);
    case Algorithm::Td3bc:
      return std::make_unique<Td3bcLearner<DeterministicPolicy>>(cfg, sd, ad, bounds);
    case Algorithm::Td3bcGm:
      return std::make_unique<Td3bcLearner<MixturePolicy>>(cfg, sd, ad, bounds);
  }
  throw ConfigError("unsupported algorithm");
}

}  // namespace

std::unique_ptr<Learner> make_learner(const TrainConfig& cfg, int state_dim, int action_dim,
                                      const ActionBounds& bounds) {
  return construct(cfg, state_dim, action_dim, bounds);
}

std::unique_ptr<Learner> load_learner(const Checkpoint& ckpt) {
  const TrainConfig cfg = TrainConfig::from_json(ckpt.config);
  if (to_string(cfg.algorithm) != ckpt.algorithm)
    throw ConfigError("checkpoint algorithm '" + ckpt.algorithm + "' disagrees with its config");
  auto learner = construct(cfg, ckpt.scalars.at("state_dim").get<int>(),
                           ckpt.scalars.at("action_dim").get<int>(),
                           bounds_from_json(ckpt.scalars.at("bounds")));
  learner->restore(ckpt);
  return learner;
}

}  // namespace dql
