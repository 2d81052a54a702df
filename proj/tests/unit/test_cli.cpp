#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "crosskd/checkpoint.hpp"
#include "crosskd/cli.hpp"
#include "crosskd/config.hpp"
#include "helpers.hpp"
#include "json.hpp"

namespace crosskd {
namespace {

namespace fs = std::filesystem;

struct Run {
  int code;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

const std::vector<std::string> kTiny{"--set", "data.per_class=4",         "--set", "data.val_per_class=2",
                                     "--set", "data.teacher_per_class=4", "--set", "train.batch_size=8",
                                     "--set", "train.disc_hidden=16",     "--epochs", "2"};

std::vector<std::string> with(std::vector<std::string> head, const std::vector<std::string>& tail = kTiny) {
  head.insert(head.end(), tail.begin(), tail.end());
  return head;
}

class CliFlow : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = testing::temp_dir("cli");
    auto r = cli(with({"pretrain-teacher", "--seed", "1", "--out", (dir_ / "teacher").string()}));
    ASSERT_EQ(r.code, 0) << r.err;
  }
  static fs::path dir_;
  static fs::path teacher() { return dir_ / "teacher" / "teacher.ckpt"; }
};
fs::path CliFlow::dir_;

TEST_F(CliFlow, PretrainWritesOutputs) {
  for (const char* f : {"teacher.ckpt", "metrics.csv", "summary.json", "resolved_config.toml"})
    EXPECT_TRUE(fs::exists(dir_ / "teacher" / f)) << f;
}

TEST_F(CliFlow, DistillIsDeterministicAndWritesOutputs) {
  const auto a = dir_ / "run_a", b = dir_ / "run_b";
  const auto before = slurp(teacher());
  for (const auto& out : {a, b}) {
    auto r = cli(with({"distill", "--teacher", teacher().string(), "--seed", "7", "--out", out.string(),
                       "--log-augment", "--noisy-eval"}));
    ASSERT_EQ(r.code, 0) << r.err;
  }
  EXPECT_EQ(slurp(a / "metrics.csv"), slurp(b / "metrics.csv"));
  EXPECT_EQ(slurp(a / "summary.json"), slurp(b / "summary.json"));
  EXPECT_EQ(slurp(a / "student.ckpt"), slurp(b / "student.ckpt"));
  EXPECT_EQ(slurp(teacher()), before);
  for (const char* f : {"training.ckpt", "student.ckpt", "augment_log.jsonl", "resolved_config.toml"})
    EXPECT_TRUE(fs::exists(a / f)) << f;
  auto summary = nlohmann::json::parse(slurp(a / "summary.json"));
  EXPECT_TRUE(summary["teacher_unchanged"].get<bool>());
  EXPECT_TRUE(summary.contains("val_noisy"));

  std::ifstream log(a / "augment_log.jsonl");
  std::string line;
  std::getline(log, line);
  auto rec = nlohmann::json::parse(line);
  EXPECT_EQ(rec["step"], 0);
  EXPECT_EQ(rec["samples"].size(), 8u);
}

TEST_F(CliFlow, ResolvedConfigReproducesRun) {
  const auto a = dir_ / "snap_a";
  ASSERT_EQ(cli(with({"distill", "--mode", "logits-baseline", "--teacher", teacher().string(), "--seed", "3",
                      "--lambda", "0.5", "--out", a.string()}))
                .code,
            0);
  const auto b = dir_ / "snap_b";
  auto r = cli({"distill", "--config", (a / "resolved_config.toml").string(), "--out", b.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(slurp(a / "metrics.csv"), slurp(b / "metrics.csv"));
  auto cfg = RunConfig::load(b / "resolved_config.toml");
  EXPECT_EQ(cfg.mode, Mode::LogitsBaseline);
  EXPECT_DOUBLE_EQ(cfg.train.lambda, 0.5);
}

TEST_F(CliFlow, EvalExportAndTransferability) {
  const auto run = dir_ / "run_eval";
  ASSERT_EQ(cli(with({"distill", "--teacher", teacher().string(), "--out", run.string()})).code, 0);
  const auto training_bytes = slurp(run / "training.ckpt");

  auto r = cli(with({"export", "--checkpoint", (run / "training.ckpt").string(), "--out",
                     (dir_ / "exported.ckpt").string()}, {}));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(slurp(dir_ / "exported.ckpt"), slurp(run / "student.ckpt"));
  EXPECT_EQ(slurp(run / "training.ckpt"), training_bytes);
  EXPECT_EQ(cli({"export", "--checkpoint", (run / "student.ckpt").string(), "--out", (run / "student.ckpt").string()})
                .code,
            kExitConfig);

  r = cli(with({"eval", "--checkpoint", (dir_ / "exported.ckpt").string(), "--out", run.string(), "--noisy-eval"}));
  ASSERT_EQ(r.code, 0) << r.err;
  auto rec = nlohmann::json::parse(slurp(run / "eval.jsonl"));
  EXPECT_EQ(rec["model"], "student");
  EXPECT_TRUE(rec.contains("noisy"));

  r = cli(with(with({"transferability", "--pair", teacher().string(), teacher().string(), "--out", run.string()}),
               {"--set", "data.val_per_class=20"}));
  ASSERT_EQ(r.code, 0) << r.err;
  auto rep = nlohmann::json::parse(r.out);
  EXPECT_NEAR(rep["mean_cosine"].get<double>(), 1.0, 1e-9);
  EXPECT_TRUE(fs::exists(run / "transferability.jsonl"));
}

TEST_F(CliFlow, ErrorCategoriesMapToExitCodes) {
  EXPECT_EQ(cli(with({"distill", "--out", (dir_ / "x").string()})).code, kExitConfig);
  EXPECT_EQ(cli(with({"distill", "--set", "train.bogus=1", "--out", (dir_ / "x").string()})).code, kExitConfig);
  EXPECT_EQ(cli(with({"distill", "--teacher", (dir_ / "missing.ckpt").string(), "--out", (dir_ / "x").string()}))
                .code,
            kExitIo);
  EXPECT_EQ(cli(with({"distill", "--config", (dir_ / "missing.toml").string()})).code, kExitIo);

  std::ofstream(dir_ / "junk.ckpt") << "junk";
  EXPECT_EQ(cli(with({"eval", "--checkpoint", (dir_ / "junk.ckpt").string(), "--out", (dir_ / "x").string()})).code,
            kExitData);
  auto empty = testing::temp_dir("cli_empty_data");
  fs::create_directories(empty / "train");
  fs::create_directories(empty / "val");
  EXPECT_EQ(cli(with({"distill", "--mode", "student-only", "--set", "data.source=directory", "--set",
                      "data.path=" + empty.string(), "--out", (dir_ / "x").string()}))
                .code,
            kExitData);
  auto r = cli(with({"distill", "--mode", "student-only", "--set", "train.lr=1e200", "--out", (dir_ / "x").string()}));
  EXPECT_EQ(r.code, kExitNumeric);
  EXPECT_NE(r.err.find("training aborted at step"), std::string::npos) << r.err;
}

TEST(Cli, UnknownFlagPrintsUsageAndExitsTwo) {
  auto r = cli({"distill", "--frobnicate"});
  EXPECT_EQ(r.code, kExitConfig);
  EXPECT_NE(r.err.find("Usage"), std::string::npos) << r.err;
  EXPECT_EQ(cli({}).code, kExitConfig);
  EXPECT_EQ(cli({"launch"}).code, kExitConfig);
}

TEST(Cli, ExecutableReportsExitCode) {
  const std::string cmd = std::string(CROSSKD_CLI_PATH) + " distill --frobnicate > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  ASSERT_TRUE(WIFEXITED(status));
  EXPECT_EQ(WEXITSTATUS(status), kExitConfig);
}

}  // namespace
}  // namespace crosskd
