#include "dql/cli.hpp"

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <set>
#include <sstream>
#include <type_traits>

#include <CLI11.hpp>
#include <json.hpp>

#include "dql/bandit.hpp"
#include "dql/checkpoint.hpp"
#include "dql/errors.hpp"
#include "dql/trainer.hpp"

namespace fs = std::filesystem;

namespace dql::cli {

fs::path default_output_root() {
  const char* env = std::getenv(kOutputRootEnv);
  return (env && *env) ? fs::path(env) : fs::path("runs");
}

namespace {

// Where the training data comes from: a generated bandit or a dataset file.
struct TaskOptions {
  std::string layout;
  std::string data;
  std::size_t m = 10000;
  std::uint64_t data_seed = 0;
  std::vector<double> reward_means;
};

struct RunOptions {
  TrainConfig cfg;
  std::string algo = "diffusion-ql";
  std::string guidance = "q1";
  TaskOptions task;
  std::string out;
};

BanditSpec bandit_spec(const std::string& layout, const std::vector<double>& reward_means) {
  BanditSpec spec = BanditSpec::for_layout(parse_layout(layout));
  if (!reward_means.empty()) spec.reward_means = reward_means;
  spec.validate();
  return spec;
}

// Shortest text that parses back to the same double.
std::string num(double x) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

std::string join(const std::vector<double>& xs) {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + num(xs[i]);
  return s;
}

// "bandit:<layout>" with ":<means>" appended when the reward means differ
// from the defaults, so evaluation can rebuild the reward model.
std::string task_string(const TaskOptions& t) {
  if (!t.data.empty()) return "file:" + t.data;
  std::string s = "bandit:" + t.layout;
  if (!t.reward_means.empty() && t.reward_means != kDefaultRewardMeans) s += ":" + join(t.reward_means);
  return s;
}

std::optional<BanditSpec> spec_from_task(const std::string& task) {
  if (task.rfind("bandit:", 0) != 0) return std::nullopt;
  const std::string rest = task.substr(7);
  const auto colon = rest.find(':');
  std::vector<double> means;
  if (colon != std::string::npos) {
    std::stringstream ss(rest.substr(colon + 1));
    for (std::string tok; std::getline(ss, tok, ',');) means.push_back(std::stod(tok));
  }
  return bandit_spec(rest.substr(0, colon), means);
}

void add_task_options(CLI::App* sub, TaskOptions& t) {
  auto* layout = sub->add_option("--layout", t.layout, "Generate a bandit dataset: edges or corners")
                     ->check(CLI::IsMember({"edges", "corners"}));
  auto* data = sub->add_option("--data", t.data, "Train on an existing dataset file");
  layout->excludes(data);
  sub->add_option("--m", t.m, "Bandit dataset size")->capture_default_str();
  sub->add_option("--data-seed", t.data_seed, "Bandit dataset seed")->capture_default_str();
  sub->add_option("--reward-means", t.reward_means, "Per-mode reward means, comma separated")
      ->delimiter(',');
}

void add_train_options(CLI::App* sub, RunOptions& o, bool single_n) {
  TrainConfig& c = o.cfg;
  sub->add_option("--algo", o.algo, "Algorithm")
      ->check(CLI::IsMember(algorithm_names()))
      ->capture_default_str();
  if (single_n) sub->add_option("--n", c.diffusion_steps, "Diffusion steps N")->capture_default_str();
  sub->add_option("--seed", c.seed, "Training seed")->capture_default_str();
  sub->add_option("--eta", c.eta, "Q-guidance strength")->capture_default_str();
  sub->add_option("--beta-min", c.beta_min)->capture_default_str();
  sub->add_option("--beta-max", c.beta_max)->capture_default_str();
  sub->add_option("--embed", c.embed_dim, "Time-embedding width")->capture_default_str();
  sub->add_option("--hidden", c.hidden_dim, "Hidden layer width")->capture_default_str();
  sub->add_option("--depth", c.depth, "Number of hidden layers")->capture_default_str();
  sub->add_option("--components", c.mixture_components, "Mixture components (mdn, td3bc-gm)")
      ->capture_default_str();
  sub->add_option("--actor-lr", c.actor_lr)->capture_default_str();
  sub->add_option("--critic-lr", c.critic_lr)->capture_default_str();
  sub->add_option("--gamma", c.gamma, "Discount")->capture_default_str();
  sub->add_option("--rho", c.rho, "Polyak coefficient")->capture_default_str();
  sub->add_option("--batch", c.batch_size)->capture_default_str();
  sub->add_option("--epochs", c.epochs)->capture_default_str();
  sub->add_option("--steps-per-epoch", c.steps_per_epoch)->capture_default_str();
  sub->add_flag("--max-q-backup", c.max_q_backup, "Back up the max over sampled next actions");
  sub->add_option("--max-q-samples", c.max_q_samples)->capture_default_str();
  sub->add_option("--guidance", o.guidance, "Critic used for policy guidance")
      ->check(CLI::IsMember({"q1", "min", "mean"}))
      ->capture_default_str();
  sub->add_option("--eval-interval", c.eval_interval, "Epochs between logged evaluations")
      ->capture_default_str();
  sub->add_option("--eval-size", c.eval_size)->capture_default_str();
  sub->add_flag("--early-stop", c.early_stop, "Stop at the first increase of the logged L_d");
  sub->add_flag("--wall-time", c.record_wall_time, "Record wall-clock time in the metrics log");
  add_task_options(sub, o.task);
  sub->add_option("--out", o.out, "Output directory");
}

// Config files are read by the top-level app, so --config given after the
// subcommand is moved in front of it.
std::vector<std::string> hoist_config(const std::vector<std::string>& args) {
  std::vector<std::string> front, rest;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      front.push_back(args[i]);
      front.push_back(args[++i]);
    } else if (args[i].rfind("--config=", 0) == 0) {
      front.push_back(args[i]);
    } else {
      rest.push_back(args[i]);
    }
  }
  front.insert(front.end(), rest.begin(), rest.end());
  return front;
}

// Fills the derived TrainConfig fields and validates everything.
void finalize(RunOptions& o) {
  if (o.task.layout.empty() == o.task.data.empty())
    throw ConfigError("task: exactly one of --layout or --data is required");
  o.cfg.algorithm = parse_algorithm(o.algo);
  o.cfg.guidance = parse_guidance_critic(o.guidance);
  o.cfg.task = task_string(o.task);
  o.cfg.validate();
  if (!o.task.layout.empty()) {
    BanditSpec spec = bandit_spec(o.task.layout, o.task.reward_means);
    spec.m = o.task.m;
    spec.validate();
  }
}

OfflineDataset load_task(const RunOptions& o) {
  if (!o.task.data.empty()) return import_dataset(o.task.data);
  BanditSpec spec = bandit_spec(o.task.layout, o.task.reward_means);
  spec.m = o.task.m;
  return gen_dataset(spec, o.task.data_seed);
}

std::string default_run_name(const RunOptions& o) {
  std::string name = o.algo;
  if (o.cfg.algorithm == Algorithm::DiffusionQL || o.cfg.algorithm == Algorithm::BcDiffusion)
    name += "-n" + std::to_string(o.cfg.diffusion_steps);
  return name + "-s" + std::to_string(o.cfg.seed);
}

// Effective configuration in the same key = value form accepted by --config.
std::string effective_config(const RunOptions& o, const std::string& section, bool include_n) {
  const TrainConfig& c = o.cfg;
  std::ostringstream os;
  os << std::boolalpha << '[' << section << "]\n";
  auto str = [&](const char* k, const std::string& v) { os << k << " = \"" << v << "\"\n"; };
  auto val = [&](const char* k, auto v) {
    if constexpr (std::is_floating_point_v<decltype(v)>)
      os << k << " = " << num(v) << '\n';
    else
      os << k << " = " << v << '\n';
  };
  str("algo", o.algo);
  if (include_n) val("n", c.diffusion_steps);
  val("seed", c.seed);
  val("eta", c.eta);
  val("beta-min", c.beta_min);
  val("beta-max", c.beta_max);
  val("embed", c.embed_dim);
  val("hidden", c.hidden_dim);
  val("depth", c.depth);
  val("components", c.mixture_components);
  val("actor-lr", c.actor_lr);
  val("critic-lr", c.critic_lr);
  val("gamma", c.gamma);
  val("rho", c.rho);
  val("batch", c.batch_size);
  val("epochs", c.epochs);
  val("steps-per-epoch", c.steps_per_epoch);
  val("max-q-backup", c.max_q_backup);
  val("max-q-samples", c.max_q_samples);
  str("guidance", o.guidance);
  val("eval-interval", c.eval_interval);
  val("eval-size", c.eval_size);
  val("early-stop", c.early_stop);
  val("wall-time", c.record_wall_time);
  if (!o.task.data.empty()) {
    str("data", o.task.data);
  } else {
    str("layout", o.task.layout);
    val("m", o.task.m);
    val("data-seed", o.task.data_seed);
    if (!o.task.reward_means.empty()) str("reward-means", join(o.task.reward_means));
  }
  str("out", o.out);
  return os.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  if (!(f << text) || !f.flush()) throw IoError("cannot write '" + path.string() + "'");
}

struct EvalReport {
  Matrix actions;
  ModeCoverage coverage;
  double expected_reward = 0.0;
  double optimal_share = 0.0;
  std::size_t unique_points = 0;
};

EvalReport evaluate(const Learner& learner, int state_dim, const BanditSpec& spec, int n,
                    std::uint64_t seed) {
  Rng rng(seed);
  EvalReport r;
  r.actions = learner.sample(Matrix::Zero(state_dim, n), rng);
  r.coverage = mode_coverage(r.actions, spec);
  r.expected_reward = true_expected_reward(r.actions, spec);
  r.optimal_share = r.coverage.per_mode[spec.optimal_mode()];
  std::set<std::pair<double, double>> pts;
  for (Eigen::Index j = 0; j < r.actions.cols(); ++j) pts.emplace(r.actions(0, j), r.actions(1, j));
  r.unique_points = pts.size();
  return r;
}

nlohmann::json report_json(const EvalReport& r, const BanditSpec& spec) {
  return {{"layout", to_string(spec.layout)},
          {"n_samples", r.actions.cols()},
          {"mode_coverage", r.coverage.per_mode},
          {"coverage", r.coverage.total()},
          {"ood_fraction", r.coverage.ood},
          {"optimal_mode_share", r.optimal_share},
          {"true_expected_reward", r.expected_reward},
          {"best_reward_mean", spec.best_reward_mean()},
          {"unique_points", r.unique_points}};
}

void write_scatter(const fs::path& path, const Matrix& actions) {
  std::ostringstream os;
  os << "x,y\n";
  for (Eigen::Index j = 0; j < actions.cols(); ++j)
    os << num(actions(0, j)) << ',' << num(actions(1, j)) << '\n';
  write_text(path, os.str());
}

int cmd_gen_data(const TaskOptions& t, std::string out_path, std::ostream& out) {
  if (t.layout.empty()) throw ConfigError("layout: required");
  BanditSpec spec = bandit_spec(t.layout, t.reward_means);
  spec.m = t.m;
  spec.validate();
  if (out_path.empty())
    out_path = (default_output_root() / "data" /
                (t.layout + "-m" + std::to_string(t.m) + "-s" + std::to_string(t.data_seed) + ".csv"))
                   .string();
  const OfflineDataset data = gen_dataset(spec, t.data_seed);
  const fs::path path(out_path);
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  export_dataset(data, path);

  const std::size_t per = spec.m / spec.num_modes();
  out << "wrote " << data.size() << " transitions to " << path.string() << '\n';
  for (std::size_t k = 0; k < spec.num_modes(); ++k) {
    double sum = 0.0;
    for (std::size_t i = k * per; i < (k + 1) * per; ++i) sum += data.rows[i].reward;
    out << "  mode " << k << " center (" << spec.centers[k].x() << ", " << spec.centers[k].y()
        << ") rows " << per << " reward mean " << spec.reward_means[k] << " (empirical "
        << std::setprecision(4) << sum / static_cast<double>(per) << std::setprecision(6) << ")\n";
  }
  return 0;
}

int cmd_train(RunOptions o, std::ostream& out, std::ostream& err) {
  finalize(o);
  if (o.out.empty()) o.out = (default_output_root() / default_run_name(o)).string();
  const OfflineDataset data = load_task(o);
  o.cfg.checkpoint_dir = o.out;

  std::error_code ec;
  fs::create_directories(o.out, ec);
  if (ec) throw IoError("cannot create output directory '" + o.out + "'");
  write_text(fs::path(o.out) / "config.toml", effective_config(o, "train", true));

  const TrainResult result = train(o.cfg, data);
  for (const auto& r : result.log)
    out << "epoch " << r.epoch << " step " << r.step << " l_d " << r.l_d << " l_q " << r.l_q
        << " critic " << r.critic_loss << " |Q| " << r.mean_abs_q << '\n';
  if (result.early_stopped) out << "early stop: L_d increased at epoch " << result.log.back().epoch << '\n';
  if (result.error) {
    err << "error: " << *result.error << '\n';
    return 1;
  }
  out << result.checkpoints.size() << " checkpoints in " << o.out << '\n';
  return 0;
}

struct EvalOptions {
  std::string checkpoint;
  int n_samples = 2000;
  std::uint64_t seed = 0;
  std::string layout;
  std::vector<double> reward_means;
  std::string out;
};

int cmd_eval(const EvalOptions& o, std::ostream& out) {
  if (o.n_samples <= 0) throw ConfigError("n-samples: must be positive");
  const Checkpoint ckpt = load_checkpoint(o.checkpoint);
  const auto learner = load_learner(ckpt);
  std::optional<BanditSpec> spec;
  if (!o.layout.empty())
    spec = bandit_spec(o.layout, o.reward_means);
  else
    spec = spec_from_task(ckpt.config.value("task", std::string()));
  if (!spec) throw ConfigError("layout: checkpoint was not trained on a bandit task; pass --layout");

  const EvalReport r =
      evaluate(*learner, ckpt.scalars.at("state_dim").get<int>(), *spec, o.n_samples, o.seed);
  const fs::path ckpt_path(o.checkpoint);
  const fs::path dir = o.out.empty()
                           ? ckpt_path.parent_path() / ("eval-" + ckpt_path.stem().string())
                           : fs::path(o.out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory '" + dir.string() + "'");

  nlohmann::json doc = report_json(r, *spec);
  doc["checkpoint"] = o.checkpoint;
  doc["algorithm"] = ckpt.algorithm;
  doc["epoch"] = ckpt.epoch;
  doc["seed"] = o.seed;
  write_text(dir / "metrics.json", doc.dump(2) + "\n");
  write_scatter(dir / "scatter.csv", r.actions);

  out << "coverage " << r.coverage.total() << " ood " << r.coverage.ood << " optimal-mode share "
      << r.optimal_share << " expected reward " << r.expected_reward << '\n';
  out << "wrote " << (dir / "metrics.json").string() << " and " << (dir / "scatter.csv").string() << '\n';
  return 0;
}

int cmd_select(const std::string& run_dir, std::ostream& out, std::ostream& err) {
  const fs::path dir(run_dir);
  const fs::path log_path = dir / kMetricsFileName;
  if (!fs::exists(log_path)) throw IoError("no metrics log at '" + log_path.string() + "'");
  const auto log = read_metrics_log(log_path);
  if (log.empty()) throw IoError("metrics log '" + log_path.string() + "' has no records");
  const Selection sel = select_checkpoint_offline(std::span<const MetricsRecord>(log));
  if (sel.warning) err << "warning: only one logged checkpoint; selecting it\n";
  const MetricsRecord& chosen = log[sel.index];
  const fs::path src = checkpoint_path(dir, chosen.epoch);
  if (!fs::exists(src)) throw IoError("checkpoint '" + src.string() + "' is missing");
  const fs::path dst = dir / "selected.bin";
  std::error_code ec;
  fs::copy_file(src, dst, fs::copy_options::overwrite_existing, ec);
  if (ec) throw IoError("cannot copy '" + src.string() + "' to '" + dst.string() + "'");
  out << "selected epoch " << chosen.epoch << " (l_d " << chosen.l_d << "): " << src.string() << '\n';
  out << "copied to " << dst.string() << '\n';
  return 0;
}

int cmd_ablate_n(RunOptions o, std::vector<int> ns, int n_samples, std::ostream& out,
                 std::ostream& err) {
  std::vector<int> unique;
  for (int n : ns) {
    if (std::find(unique.begin(), unique.end(), n) != unique.end()) {
      err << "warning: duplicate N=" << n << " ignored\n";
      continue;
    }
    unique.push_back(n);
  }
  if (n_samples <= 0) throw ConfigError("n-samples: must be positive");
  for (int n : unique) {
    o.cfg.diffusion_steps = n;
    finalize(o);
  }
  if (o.task.layout.empty()) throw ConfigError("layout: ablate-n needs a bandit task");
  if (o.out.empty()) o.out = (default_output_root() / ("ablate-" + o.algo + "-s" + std::to_string(o.cfg.seed))).string();
  std::error_code ec;
  fs::create_directories(o.out, ec);
  if (ec) throw IoError("cannot create output directory '" + o.out + "'");
  write_text(fs::path(o.out) / "config.toml", effective_config(o, "ablate-n", false));

  BanditSpec spec = bandit_spec(o.task.layout, o.task.reward_means);
  spec.m = o.task.m;
  const OfflineDataset data = gen_dataset(spec, o.task.data_seed);

  std::ostringstream csv;
  csv << "n,final_l_d,coverage,ood_fraction,true_expected_reward\n";
  out << std::left << std::setw(6) << "N" << std::setw(12) << "final_l_d" << std::setw(12)
      << "coverage" << std::setw(12) << "ood" << "expected_reward\n";
  for (int n : unique) {
    TrainConfig cfg = o.cfg;
    cfg.diffusion_steps = n;
    cfg.checkpoint_dir = fs::path(o.out) / ("n" + std::to_string(n));
    const TrainResult result = train(cfg, data);
    if (result.error) {
      err << "error: N=" << n << ": " << *result.error << '\n';
      return 1;
    }
    const EvalReport r = evaluate(*result.learner, data.state_dim(), spec, n_samples, cfg.seed);
    const double ld = result.log.empty() ? 0.0 : result.log.back().l_d;
    csv << n << ',' << num(ld) << ',' << num(r.coverage.total()) << ',' << num(r.coverage.ood)
        << ',' << num(r.expected_reward) << '\n';
    out << std::setw(6) << n << std::setw(12) << ld << std::setw(12) << r.coverage.total()
        << std::setw(12) << r.coverage.ood << r.expected_reward << '\n';
  }
  write_text(fs::path(o.out) / "ablation.csv", csv.str());
  out << "wrote " << (fs::path(o.out) / "ablation.csv").string() << '\n';
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Diffusion Q-learning: offline training, evaluation and bandit experiments", "dql"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");
  app.set_config("--config", "",
                 "Config file (TOML/INI) with a [train] or [ablate-n] section; flags take precedence");

  auto* gen = app.add_subcommand("gen-data", "Generate a 2D bandit dataset");
  TaskOptions gen_task;
  gen_task.layout = "edges";
  std::string gen_out;
  gen->add_option("--layout", gen_task.layout, "edges or corners")
      ->check(CLI::IsMember({"edges", "corners"}))
      ->capture_default_str();
  gen->add_option("--m", gen_task.m, "Number of transitions")->capture_default_str();
  gen->add_option("--seed", gen_task.data_seed)->capture_default_str();
  gen->add_option("--reward-means", gen_task.reward_means, "Per-mode reward means")->delimiter(',');
  gen->add_option("--out", gen_out, "Output file");

  auto* train_cmd = app.add_subcommand("train", "Train one policy and checkpoint it");
  RunOptions train_opts;
  add_train_options(train_cmd, train_opts, true);

  auto* eval_cmd = app.add_subcommand("eval", "Sample a checkpointed policy on its bandit");
  EvalOptions eval_opts;
  eval_cmd->add_option("--checkpoint", eval_opts.checkpoint)->required();
  eval_cmd->add_option("--n-samples", eval_opts.n_samples)->capture_default_str();
  eval_cmd->add_option("--seed", eval_opts.seed, "Sampling seed")->capture_default_str();
  eval_cmd->add_option("--layout", eval_opts.layout, "Override the bandit layout")
      ->check(CLI::IsMember({"edges", "corners"}));
  eval_cmd->add_option("--reward-means", eval_opts.reward_means)->delimiter(',');
  eval_cmd->add_option("--out", eval_opts.out, "Output directory");

  auto* select_cmd = app.add_subcommand("select", "Pick the checkpoint with the second-lowest L_d");
  std::string run_dir;
  select_cmd->add_option("--run", run_dir, "Training output directory")->required();

  auto* ablate = app.add_subcommand("ablate-n", "Train and evaluate one run per diffusion step count");
  RunOptions ablate_opts;
  ablate_opts.algo = "bc-diffusion";
  std::vector<int> ns;
  int ablate_samples = 2000;
  add_train_options(ablate, ablate_opts, false);
  ablate->add_option("--n", ns, "Diffusion step counts, comma separated")->delimiter(',')->required();
  ablate->add_option("--n-samples", ablate_samples)->capture_default_str();

  try {
    const std::vector<std::string> ordered = hoist_config(args);
    std::vector<std::string> reversed(ordered.rbegin(), ordered.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    // Help and version requests exit 0; every other parse failure is a usage error.
    return app.exit(e, out, err) == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(gen_task, gen_out, out);
    if (train_cmd->parsed()) return cmd_train(train_opts, out, err);
    if (eval_cmd->parsed()) return cmd_eval(eval_opts, out);
    if (select_cmd->parsed()) return cmd_select(run_dir, out, err);
    if (ablate->parsed()) return cmd_ablate_n(ablate_opts, ns, ablate_samples, out, err);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace dql::cli
