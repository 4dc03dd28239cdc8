#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <gtest/gtest.h>
#include <json.hpp>

#include "dql/bandit.hpp"
#include "dql/checkpoint.hpp"
#include "dql/cli.hpp"
#include "dql/trainer.hpp"

namespace dql {
namespace {

namespace fs = std::filesystem;

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    root_ = fs::temp_directory_path() /
            ("dql_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(root_);
    fs::create_directories(root_);
  }
  void TearDown() override { fs::remove_all(root_); }

  std::string path(const std::string& rel) const { return (root_ / rel).string(); }

  // A few quick epochs of a small network on the corners bandit.
  std::vector<std::string> quick_train(const std::string& algo, const std::string& out) const {
    return {"train",   "--algo",  algo,   "--layout", "corners", "--m",   "400",
            "--hidden", "8",      "--depth", "1",      "--batch", "16",   "--epochs",
            "3",       "--steps-per-epoch", "5", "--eval-size", "64",  "--n", "3",
            "--out",   out};
  }

  fs::path root_;
};

TEST_F(Cli, GenDataWritesRequestedRows) {
  const auto r = run({"gen-data", "--layout", "edges", "--m", "10000", "--seed", "0", "--out",
                      path("d.csv")});
  ASSERT_EQ(r.code, 0) << r.err;
  const OfflineDataset d = import_dataset(path("d.csv"));
  EXPECT_EQ(d.size(), 10000u);
  EXPECT_NE(r.out.find("2500"), std::string::npos);
}

TEST_F(Cli, GenDataIsByteIdenticalOnRerun) {
  ASSERT_EQ(run({"gen-data", "--layout", "corners", "--m", "400", "--out", path("a.csv")}).code, 0);
  ASSERT_EQ(run({"gen-data", "--layout", "corners", "--m", "400", "--out", path("b.csv")}).code, 0);
  EXPECT_EQ(slurp(path("a.csv")), slurp(path("b.csv")));
}

TEST_F(Cli, GenDataRejectsIndivisibleSize) {
  const auto r = run({"gen-data", "--layout", "edges", "--m", "10", "--out", path("d.csv")});
  EXPECT_EQ(r.code, 2);
  EXPECT_FALSE(fs::exists(path("d.csv")));
  EXPECT_FALSE(r.err.empty());
}

TEST_F(Cli, GenDataUnwritablePathFails) {
  const auto r = run({"gen-data", "--layout", "edges", "--m", "40", "--out", "/proc/nope/d.csv"});
  EXPECT_NE(r.code, 0);
  EXPECT_FALSE(r.err.empty());
}

TEST_F(Cli, GenDataHonorsOutputRootVariable) {
  ::setenv(cli::kOutputRootEnv, root_.c_str(), 1);
  const auto r = run({"gen-data", "--layout", "corners", "--m", "40", "--seed", "3"});
  ::unsetenv(cli::kOutputRootEnv);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(root_ / "data" / "corners-m40-s3.csv"));
}

TEST_F(Cli, UnknownAlgorithmIsUsageError) {
  const auto r = run({"train", "--algo", "sac", "--layout", "edges", "--out", path("r")});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE((r.out + r.err).find("diffusion-ql"), std::string::npos);
}

TEST_F(Cli, InvalidFieldRejectedBeforeCompute) {
  const auto r = run({"train", "--layout", "edges", "--gamma", "1.5", "--out", path("r")});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("gamma"), std::string::npos);
  EXPECT_FALSE(fs::exists(path("r/metrics.jsonl")));
}

TEST_F(Cli, TaskSourcesAreExclusive) {
  EXPECT_EQ(run({"train", "--out", path("r")}).code, 2);
  ASSERT_EQ(run({"gen-data", "--layout", "edges", "--m", "40", "--out", path("d.csv")}).code, 0);
  EXPECT_EQ(run({"train", "--layout", "edges", "--data", path("d.csv"), "--out", path("r")}).code, 2);
}

TEST_F(Cli, TrainEvalSelectPipeline) {
  const auto t = run(quick_train("diffusion-ql", path("run")));
  ASSERT_EQ(t.code, 0) << t.err;
  EXPECT_TRUE(fs::exists(path("run/metrics.jsonl")));
  EXPECT_TRUE(fs::exists(path("run/config.toml")));
  EXPECT_EQ(read_metrics_log(path("run/metrics.jsonl")).size(), 3u);

  const auto e = run({"eval", "--checkpoint", path("run/ckpt_e00003.bin"), "--n-samples", "300",
                      "--out", path("ev")});
  ASSERT_EQ(e.code, 0) << e.err;
  const auto doc = nlohmann::json::parse(slurp(path("ev/metrics.json")));
  EXPECT_EQ(doc.at("n_samples").get<int>(), 300);
  EXPECT_EQ(doc.at("layout").get<std::string>(), "corners");
  for (const char* k : {"coverage", "ood_fraction", "true_expected_reward", "mode_coverage"})
    EXPECT_TRUE(doc.contains(k)) << k;
  std::ifstream scatter(path("ev/scatter.csv"));
  std::string line;
  int rows = -1;
  while (std::getline(scatter, line)) ++rows;
  EXPECT_EQ(rows, 300);

  const auto s = run({"select", "--run", path("run")});
  ASSERT_EQ(s.code, 0) << s.err;
  const auto log = read_metrics_log(path("run/metrics.jsonl"));
  const Selection sel = select_checkpoint_offline(log);
  const fs::path chosen = checkpoint_path(path("run"), log[sel.index].epoch);
  EXPECT_EQ(slurp(path("run/selected.bin")), slurp(chosen));
  EXPECT_NE(s.out.find(chosen.filename().string()), std::string::npos);
}

TEST_F(Cli, BcDiffusionForcesEtaZero) {
  auto args = quick_train("bc-diffusion", path("run"));
  args.insert(args.end(), {"--eta", "5"});
  ASSERT_EQ(run(args).code, 0);
  for (const auto& r : read_metrics_log(path("run/metrics.jsonl"))) {
    EXPECT_EQ(r.l_q, 0.0);
    EXPECT_EQ(r.critic_loss, 0.0);
  }
}

TEST_F(Cli, DeterministicPolicyScatterHasOnePoint) {
  ASSERT_EQ(run(quick_train("td3bc", path("run"))).code, 0);
  const auto ev = run({"eval", "--checkpoint", path("run/ckpt_e00003.bin"), "--n-samples", "50",
                       "--out", path("ev")});
  ASSERT_EQ(ev.code, 0) << ev.err;
  std::ifstream scatter(path("ev/scatter.csv"));
  std::string line;
  std::getline(scatter, line);
  std::set<std::string> unique;
  while (std::getline(scatter, line)) unique.insert(line);
  EXPECT_EQ(unique.size(), 1u);
  const auto doc = nlohmann::json::parse(slurp(path("ev/metrics.json")));
  EXPECT_EQ(doc.at("unique_points").get<int>(), 1);
}

TEST_F(Cli, EvalArgumentErrors) {
  ASSERT_EQ(run(quick_train("bc-mle", path("run"))).code, 0);
  EXPECT_EQ(run({"eval", "--checkpoint", path("run/ckpt_e00001.bin"), "--n-samples", "0"}).code, 2);
  EXPECT_EQ(run({"eval"}).code, 2);
  EXPECT_EQ(run({"eval", "--checkpoint", path("missing.bin")}).code, 1);

  // A newer on-disk format is reported as a version problem.
  std::string bytes = slurp(path("run/ckpt_e00001.bin"));
  bytes.replace(0, kCheckpointMagic.size(), "DQL-CKPT-v2");
  std::ofstream(path("v2.bin"), std::ios::binary) << bytes;
  const auto r = run({"eval", "--checkpoint", path("v2.bin")});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("version"), std::string::npos);
}

TEST_F(Cli, SelectWithoutLogFails) {
  fs::create_directories(path("empty"));
  const auto r = run({"select", "--run", path("empty")});
  EXPECT_EQ(r.code, 1);
  EXPECT_FALSE(r.err.empty());
}

TEST_F(Cli, ConfigFileReproducesRun) {
  ASSERT_EQ(run(quick_train("diffusion-ql", path("a"))).code, 0);
  std::string cfg = slurp(path("a/config.toml"));
  const auto pos = cfg.find("\nout = ");
  ASSERT_NE(pos, std::string::npos);
  cfg.replace(pos + 1, cfg.find('\n', pos + 1) - pos - 1, "out = \"" + path("b") + "\"");
  std::ofstream(path("b.toml")) << cfg;
  const auto r = run({"train", "--config", path("b.toml")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(slurp(path("a/metrics.jsonl")), slurp(path("b/metrics.jsonl")));
  EXPECT_EQ(slurp(path("a/ckpt_e00003.bin")), slurp(path("b/ckpt_e00003.bin")));
}

TEST_F(Cli, FlagsOverrideConfigFile) {
  ASSERT_EQ(run(quick_train("diffusion-ql", path("a"))).code, 0);
  const auto r = run({"train", "--config", path("a/config.toml"), "--epochs", "1", "--out", path("c")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(read_metrics_log(path("c/metrics.jsonl")).size(), 1u);
}

TEST_F(Cli, AblationDeduplicatesAndTabulates) {
  const auto r = run({"ablate-n", "--n", "2,3,2", "--layout", "corners", "--m", "400", "--hidden",
                      "8", "--depth", "1", "--batch", "16", "--epochs", "1", "--steps-per-epoch",
                      "3", "--n-samples", "100", "--eval-size", "32", "--out", path("abl")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.err.find("duplicate N=2"), std::string::npos);
  std::ifstream csv(path("abl/ablation.csv"));
  std::string line;
  int rows = -1;
  while (std::getline(csv, line)) ++rows;
  EXPECT_EQ(rows, 2);
  EXPECT_TRUE(fs::exists(path("abl/n2/metrics.jsonl")));
  EXPECT_TRUE(fs::exists(path("abl/n3/metrics.jsonl")));
}

TEST_F(Cli, HelpAndUnknownCommand) {
  EXPECT_EQ(run({"--help"}).code, 0);
  EXPECT_EQ(run({"frobnicate"}).code, 2);
  EXPECT_EQ(run({}).code, 2);
}

}  // namespace
}  // namespace dql
