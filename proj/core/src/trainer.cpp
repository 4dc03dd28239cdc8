#include "dql/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "dql/errors.hpp"

namespace dql {

namespace {

struct AlgoName {
  Algorithm algo;
  const char* name;
};

constexpr AlgoName kAlgoNames[] = {
    {Algorithm::DiffusionQL, "diffusion-ql"}, {Algorithm::BcDiffusion, "bc-diffusion"},
    {Algorithm::BcMle, "bc-mle"},             {Algorithm::Mdn, "mdn"},
    {Algorithm::Td3bc, "td3bc"},              {Algorithm::Td3bcGm, "td3bc-gm"},
};

}  // namespace

std::string to_string(Algorithm algo) {
  for (const auto& a : kAlgoNames)
    if (a.algo == algo) return a.name;
  return "unknown";
}

const std::vector<std::string>& algorithm_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n;
    for (const auto& a : kAlgoNames) n.emplace_back(a.name);
    return n;
  }();
  return names;
}

Algorithm parse_algorithm(std::string_view name) {
  for (const auto& a : kAlgoNames)
    if (name == a.name) return a.algo;
  std::string valid;
  for (const auto& n : algorithm_names()) valid += (valid.empty() ? "" : ", ") + n;
  throw ConfigError("unknown algorithm '" + std::string(name) + "'; valid names: " + valid);
}

std::string to_string(GuidanceCritic g) {
  switch (g) {
    case GuidanceCritic::First: return "q1";
    case GuidanceCritic::Min: return "min";
    case GuidanceCritic::Mean: return "mean";
  }
  return "q1";
}

GuidanceCritic parse_guidance_critic(std::string_view name) {
  if (name == "q1") return GuidanceCritic::First;
  if (name == "min") return GuidanceCritic::Min;
  if (name == "mean") return GuidanceCritic::Mean;
  throw ConfigError("guidance: unknown critic selector '" + std::string(name) +
                    "' (expected q1, min or mean)");
}

void TrainConfig::validate() const {
  auto require = [](bool ok, const char* field, const std::string& why) {
    if (!ok) throw ConfigError(std::string(field) + ": " + why);
  };
  require(diffusion_steps >= 1, "diffusion_steps", "must be >= 1");
  require(beta_min > 0.0 && beta_max > beta_min, "beta_min/beta_max",
          "need 0 < beta_min < beta_max");
  require(embed_dim >= 2 && embed_dim % 2 == 0, "embed_dim", "must be even and >= 2");
  require(hidden_dim >= 1, "hidden_dim", "must be >= 1");
  require(depth >= 1, "depth", "must be >= 1");
  require(mixture_components >= 1, "mixture_components", "must be >= 1");
  require(eta >= 0.0 && std::isfinite(eta), "eta", "must be finite and >= 0");
  require(actor_lr > 0.0, "actor_lr", "must be > 0");
  require(critic_lr > 0.0, "critic_lr", "must be > 0");
  require(gamma >= 0.0 && gamma < 1.0, "gamma", "must lie in [0, 1)");
  require(rho >= 0.0 && rho <= 1.0, "rho", "must lie in [0, 1]");
  require(batch_size >= 1, "batch_size", "must be >= 1");
  require(epochs >= 0, "epochs", "must be >= 0");
  require(steps_per_epoch >= 1, "steps_per_epoch", "must be >= 1");
  require(max_q_samples >= 1, "max_q_samples", "must be >= 1");
  require(eval_interval >= 1, "eval_interval", "must be >= 1");
  require(eval_size >= 1, "eval_size", "must be >= 1");
}

bool TrainConfig::uses_critic() const noexcept {
  return algorithm == Algorithm::DiffusionQL || algorithm == Algorithm::Td3bc ||
         algorithm == Algorithm::Td3bcGm;
}

double TrainConfig::effective_eta() const noexcept {
  return algorithm == Algorithm::BcDiffusion ? 0.0 : eta;
}

nlohmann::json TrainConfig::to_json() const {
  return {{"algorithm", to_string(algorithm)},
          {"seed", seed},
          {"diffusion_steps", diffusion_steps},
          {"beta_min", beta_min},
          {"beta_max", beta_max},
          {"embed_dim", embed_dim},
          {"hidden_dim", hidden_dim},
          {"depth", depth},
          {"mixture_components", mixture_components},
          {"eta", eta},
          {"actor_lr", actor_lr},
          {"critic_lr", critic_lr},
          {"gamma", gamma},
          {"rho", rho},
          {"batch_size", batch_size},
          {"epochs", epochs},
          {"steps_per_epoch", steps_per_epoch},
          {"max_q_backup", max_q_backup},
          {"max_q_samples", max_q_samples},
          {"guidance", to_string(guidance)},
          {"eval_interval", eval_interval},
          {"eval_size", eval_size},
          {"early_stop", early_stop},
          {"record_wall_time", record_wall_time},
          {"checkpoint_dir", checkpoint_dir.string()},
          {"task", task}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.algorithm = parse_algorithm(j.at("algorithm").get<std::string>());
  c.seed = j.at("seed").get<std::uint64_t>();
  c.diffusion_steps = j.at("diffusion_steps").get<int>();
  c.beta_min = j.at("beta_min").get<double>();
  c.beta_max = j.at("beta_max").get<double>();
  c.embed_dim = j.at("embed_dim").get<int>();
  c.hidden_dim = j.at("hidden_dim").get<int>();
  c.depth = j.at("depth").get<int>();
  c.mixture_components = j.at("mixture_components").get<int>();
  c.eta = j.at("eta").get<double>();
  c.actor_lr = j.at("actor_lr").get<double>();
  c.critic_lr = j.at("critic_lr").get<double>();
  c.gamma = j.at("gamma").get<double>();
  c.rho = j.at("rho").get<double>();
  c.batch_size = j.at("batch_size").get<int>();
  c.epochs = j.at("epochs").get<int>();
  c.steps_per_epoch = j.at("steps_per_epoch").get<int>();
  c.max_q_backup = j.at("max_q_backup").get<bool>();
  c.max_q_samples = j.at("max_q_samples").get<int>();
  c.guidance = parse_guidance_critic(j.at("guidance").get<std::string>());
  c.eval_interval = j.at("eval_interval").get<int>();
  c.eval_size = j.at("eval_size").get<int>();
  c.early_stop = j.at("early_stop").get<bool>();
  c.record_wall_time = j.at("record_wall_time").get<bool>();
  c.checkpoint_dir = j.value("checkpoint_dir", std::string());
  c.task = j.at("task").get<std::string>();
  return c;
}

TrainState init_train_state(const TrainConfig& cfg, int state_dim, int action_dim,
                            const ActionBounds& bounds) {
  cfg.validate();
  TrainState s;
  s.rng = Rng(cfg.seed);
  DiffusionPolicyConfig pc;
  pc.state_dim = state_dim;
  pc.action_dim = action_dim;
  pc.steps = cfg.diffusion_steps;
  pc.hidden_dim = cfg.hidden_dim;
  pc.depth = cfg.depth;
  pc.embed_dim = cfg.embed_dim;
  pc.beta_min = cfg.beta_min;
  pc.beta_max = cfg.beta_max;
  s.policy = make_diffusion_policy(pc, s.rng, bounds);
  s.target_policy = s.policy;
  s.critic = make_twin_critic({state_dim, action_dim, cfg.hidden_dim, cfg.depth}, s.rng);
  s.actor_opt = adam_init(s.policy.params, cfg.actor_lr);
  s.q1_opt = adam_init(s.critic.q1, cfg.critic_lr);
  s.q2_opt = adam_init(s.critic.q2, cfg.critic_lr);
  return s;
}

double critic_update(TwinCritic& critic, AdamState& q1_opt, AdamState& q2_opt,
                     const TransitionBatch& batch, const Vector& targets) {
  Tape tape;
  const auto q1 = tape.bind(critic.q1);
  const auto q2 = tape.bind(critic.q2);
  const Var loss = critic_loss(q1, q2, critic.spec, tape.constant(batch.states),
                               tape.constant(batch.actions), targets);
  tape.backward(loss);
  const ParamSet g1 = tape.gradients(q1, critic.q1);
  const ParamSet g2 = tape.gradients(q2, critic.q2);
  if (!g1.all_finite() || !g2.all_finite())
    throw NonFiniteError("critic", -1, "critic: non-finite gradient");
  adam_step(q1_opt, critic.q1, g1);
  adam_step(q2_opt, critic.q2, g2);
  return loss.scalar();
}

namespace {

Matrix guidance_values(const Matrix& q1, const Matrix& q2, GuidanceCritic which) {
  switch (which) {
    case GuidanceCritic::First: return q1;
    case GuidanceCritic::Min: return q1.cwiseMin(q2);
    case GuidanceCritic::Mean: return 0.5 * (q1 + q2);
  }
  return q1;
}

Var guidance_values(Var q1, Var q2, GuidanceCritic which) {
  switch (which) {
    case GuidanceCritic::First: return q1;
    case GuidanceCritic::Min: {
      // min(a, b) = b + clamp(a - b, -inf, 0)
      const Var d = sub(q1, q2);
      return add(q2, clamp(d, -std::numeric_limits<double>::infinity(), 0.0));
    }
    case GuidanceCritic::Mean: return scale(add(q1, q2), 0.5);
  }
  return q1;
}

}  // namespace

double mean_abs_q(const TwinCritic& critic, GuidanceCritic which, const Matrix& states,
                  const Matrix& actions) {
  const Matrix q1 = q_values(critic.q1, critic.spec, states, actions);
  const Matrix q2 = which == GuidanceCritic::First
                        ? q1
                        : q_values(critic.q2, critic.spec, states, actions);
  return guidance_values(q1, q2, which).cwiseAbs().mean();
}

StepMetrics train_step(TrainState& state, const TransitionBatch& batch, const TrainConfig& cfg,
                       const StepHooks* hooks) {
  if (batch.size() != cfg.batch_size)
    throw DimensionError("train_step: batch has " + std::to_string(batch.size()) +
                         " transitions, config expects " + std::to_string(cfg.batch_size));
  StepMetrics m;
  const double eta = cfg.effective_eta();
  const bool critic_on = cfg.uses_critic();
  const bool guided = critic_on && eta > 0.0;

  const Rng rng_backup = state.rng;
  // Behavior-cloning noise is drawn first so the BC part of the update sees
  // the same noise regardless of which other terms are active.
  const NoiseBatch bc_noise =
      draw_noise_batch(state.policy.schedule, batch.size(), state.policy.action_dim, state.rng);

  std::optional<TwinCritic> critic_backup;
  std::optional<AdamState> q1_backup, q2_backup;
  try {
    if (critic_on) {
      critic_backup = state.critic;
      q1_backup = state.q1_opt;
      q2_backup = state.q2_opt;
      const ActionSampler target_sampler = [&state](const Matrix& s, Rng& r) {
        return sample_actions(state.target_policy, s, r);
      };
      const Vector targets = bellman_targets(state.critic, target_sampler, batch, cfg.gamma,
                                             cfg.max_q_backup, cfg.max_q_samples, state.rng);
      try {
        m.critic_loss = critic_update(state.critic, state.q1_opt, state.q2_opt, batch, targets);
      } catch (const NonFiniteError& e) {
        throw NonFiniteError("critic", e.step(), std::string("critic update: ") + e.what());
      }
      m.mean_abs_q = mean_abs_q(state.critic, cfg.guidance, batch.states, batch.actions);
    }

    if (hooks && hooks->before_actor_update) hooks->before_actor_update(state);

    std::optional<ChainNoise> chain;
    if (guided) chain = draw_chain_noise(state.policy, batch.size(), state.rng);

    Tape tape;
    const auto params = tape.bind(state.policy.params);
    const Var states = tape.constant(batch.states);
    Var loss;
    try {
      const Var ld = bc_loss(params, state.policy, states, batch.actions, bc_noise);
      m.l_d = ld.scalar();
      loss = ld;
      if (guided) {
        m.alpha = q_guidance_weight(eta, m.mean_abs_q);
        const Var a0 = sample_actions(params, state.policy, states, *chain);
        const auto q1 = tape.bind(state.critic.q1, false);
        const Var v1 = q_values(q1, state.critic.spec, states, a0);
        Var q = v1;
        if (cfg.guidance != GuidanceCritic::First) {
          const auto q2 = tape.bind(state.critic.q2, false);
          q = guidance_values(v1, q_values(q2, state.critic.spec, states, a0), cfg.guidance);
        }
        const Var lq = scale(mean(q), -m.alpha);
        m.l_q = lq.scalar();
        loss = add(ld, lq);
      }
      m.policy_loss = loss.scalar();
      tape.backward(loss);
    } catch (const NonFiniteError& e) {
      throw NonFiniteError("actor", e.step(), std::string("actor update: ") + e.what());
    }
    const ParamSet grads = tape.gradients(params, state.policy.params);
    if (!grads.all_finite()) throw NonFiniteError("actor", -1, "actor: non-finite gradient");
    adam_step(state.actor_opt, state.policy.params, grads);
  } catch (const NonFiniteError&) {
    if (critic_backup) {
      state.critic = std::move(*critic_backup);
      state.q1_opt = std::move(*q1_backup);
      state.q2_opt = std::move(*q2_backup);
    }
    state.rng = rng_backup;
    throw;
  }

  polyak_update(state.target_policy.params, state.policy.params, cfg.rho);
  if (critic_on) {
    polyak_update(state.critic.q1_target, state.critic.q1, cfg.rho);
    polyak_update(state.critic.q2_target, state.critic.q2, cfg.rho);
  }
  ++state.step;
  return m;
}

EvalSet make_eval_set(const OfflineDataset& data, const TrainConfig& cfg) {
  if (data.empty()) throw std::invalid_argument("evaluation set needs a non-empty dataset");
  // Deterministic stride over the dataset so every mode is represented.
  const std::size_t n = std::min<std::size_t>(data.size(), static_cast<std::size_t>(cfg.eval_size));
  std::vector<std::size_t> idx(n);
  for (std::size_t k = 0; k < n; ++k) idx[k] = (k * data.size()) / n;
  EvalSet e;
  e.batch = make_batch(data, idx);
  e.noise_seed = cfg.seed ^ 0x9e3779b97f4a7c15ULL;
  return e;
}

double eval_bc_loss(const DiffusionPolicy& policy, const EvalSet& eval) {
  Rng rng(eval.noise_seed);
  const NoiseBatch noise =
      draw_noise_batch(policy.schedule, eval.batch.size(), policy.action_dim, rng);
  return bc_loss(policy, eval.batch.states, eval.batch.actions, noise);
}

nlohmann::json MetricsRecord::to_json() const {
  return {{"epoch", epoch},           {"step", step},
          {"l_d", l_d},               {"l_q", l_q},
          {"critic_loss", critic_loss}, {"mean_abs_q", mean_abs_q},
          {"wall_ms", wall_ms}};
}

MetricsRecord MetricsRecord::from_json(const nlohmann::json& j) {
  MetricsRecord r;
  r.epoch = j.at("epoch").get<int>();
  r.step = j.at("step").get<long>();
  r.l_d = j.at("l_d").get<double>();
  r.l_q = j.at("l_q").get<double>();
  r.critic_loss = j.at("critic_loss").get<double>();
  r.mean_abs_q = j.at("mean_abs_q").get<double>();
  r.wall_ms = j.at("wall_ms").get<double>();
  return r;
}

std::string format_metrics_line(const MetricsRecord& r) { return r.to_json().dump(); }

std::vector<MetricsRecord> read_metrics_log(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open metrics log '" + path.string() + "'");
  std::vector<MetricsRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      out.push_back(MetricsRecord::from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(line_no, std::string("bad metrics record: ") + e.what());
    }
  }
  return out;
}

std::filesystem::path checkpoint_path(const std::filesystem::path& dir, int epoch) {
  char name[32];
  std::snprintf(name, sizeof name, "ckpt_e%05d.bin", epoch);
  return dir / name;
}

TrainResult train(const TrainConfig& cfg, const OfflineDataset& data) {
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("train: dataset is empty");
  data.validate();

  const ActionBounds bounds = ActionBounds::box(data.action_dim());
  TrainResult result;
  result.learner = make_learner(cfg, data.state_dim(), data.action_dim(), bounds);
  Learner& learner = *result.learner;
  const EvalSet eval = make_eval_set(data, cfg);

  const bool persist = !cfg.checkpoint_dir.empty();
  std::ofstream log_file;
  if (persist) {
    std::error_code ec;
    std::filesystem::create_directories(cfg.checkpoint_dir, ec);
    if (ec) throw IoError("cannot create checkpoint directory '" + cfg.checkpoint_dir.string() + "'");
    log_file.open(cfg.checkpoint_dir / kMetricsFileName, std::ios::trunc);
    if (!log_file) throw IoError("cannot open metrics log in '" + cfg.checkpoint_dir.string() + "'");
  }

  auto write_ckpt = [&](int epoch) {
    if (!persist) return;
    Checkpoint c = learner.checkpoint();
    c.epoch = epoch;
    const auto path = checkpoint_path(cfg.checkpoint_dir, epoch);
    save_checkpoint(c, path);
    result.checkpoints.push_back({epoch, path});
  };
  try {
    write_ckpt(0);
  } catch (const IoError& e) {
    result.error = e.what();
    return result;
  }

  const auto t0 = std::chrono::steady_clock::now();
  long step = 0;
  StepMetrics acc;
  int acc_n = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (int k = 0; k < cfg.steps_per_epoch; ++k) {
      const TransitionBatch batch =
          sample_batch(data, static_cast<std::size_t>(cfg.batch_size), learner.rng());
      const StepMetrics m = learner.step(batch);
      acc.l_q += m.l_q;
      acc.critic_loss += m.critic_loss;
      acc.mean_abs_q += m.mean_abs_q;
      ++acc_n;
      ++step;
    }
    if (epoch % cfg.eval_interval != 0 && epoch != cfg.epochs) continue;

    MetricsRecord r;
    r.epoch = epoch;
    r.step = step;
    r.l_d = learner.eval_loss(eval);
    r.l_q = acc.l_q / acc_n;
    r.critic_loss = acc.critic_loss / acc_n;
    r.mean_abs_q = acc.mean_abs_q / acc_n;
    if (cfg.record_wall_time)
      r.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    acc = StepMetrics{};
    acc_n = 0;
    result.log.push_back(r);
    if (persist) {
      log_file << format_metrics_line(r) << '\n';
      log_file.flush();
    }
    try {
      write_ckpt(epoch);
    } catch (const IoError& e) {
      result.error = e.what();
      break;
    }
    if (cfg.early_stop && early_stop_check(std::span<const MetricsRecord>(result.log))) {
      result.early_stopped = true;
      break;
    }
  }
  return result;
}

bool early_stop_check(std::span<const double> l_d_history) {
  if (l_d_history.size() < 2) return false;
  return l_d_history[l_d_history.size() - 1] > l_d_history[l_d_history.size() - 2];
}

bool early_stop_check(std::span<const MetricsRecord> log) {
  if (log.size() < 2) return false;
  return log[log.size() - 1].l_d > log[log.size() - 2].l_d;
}

Selection select_checkpoint_offline(std::span<const double> l_d, std::span<const int> epochs) {
  if (l_d.empty()) throw std::invalid_argument("no checkpoints to select from");
  if (epochs.size() != l_d.size()) throw DimensionError("l_d and epoch lists differ in length");
  if (l_d.size() == 1) return {0, true};
  std::vector<std::size_t> order(l_d.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (l_d[a] != l_d[b]) return l_d[a] < l_d[b];
    return epochs[a] > epochs[b];
  });
  return {order[1], false};
}

Selection select_checkpoint_offline(std::span<const MetricsRecord> log) {
  std::vector<double> l_d;
  std::vector<int> epochs;
  for (const auto& r : log) {
    l_d.push_back(r.l_d);
    epochs.push_back(r.epoch);
  }
  return select_checkpoint_offline(l_d, epochs);
}

}  // namespace dql
