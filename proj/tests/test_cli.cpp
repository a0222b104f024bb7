#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sys/wait.h>

#include "caps/cli/commands.hpp"

#ifndef CAPS_CLI_PATH
#define CAPS_CLI_PATH "caps"
#endif

namespace caps {
namespace {

namespace fs = std::filesystem;

const char* kToyConfig = R"([dataset]
split = 0.6,0.2,0.2

[synthetic]
length = 400
channels = 2
beta = 0.002
noise_std = 0.05
seed = 7

[model]
lookback = 24
horizon = 6
num_layers = 1
num_heads = 2
head_dim = 4
d_channel_token = 4
d_value_token = 4
ffn_expansion = 2

[train]
effective_batch = 8
micro_batch = 4
epochs = 2
max_steps_per_epoch = 4
max_lr = 0.005
)";

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("caps_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    config_ = (dir_ / "run.ini").string();
    std::ofstream(config_) << kToyConfig;
  }
  void TearDown() override { fs::remove_all(dir_); }

  cli::Options options(const std::string& out) {
    cli::Options o;
    o.config = config_;
    o.out = (dir_ / out).string();
    o.log = &sink_;
    return o;
  }

  int run(const std::string& args) {
    const std::string cmd = std::string(CAPS_CLI_PATH) + " " + args + " > " + (dir_ / "stdout.txt").string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }

  fs::path dir_;
  std::string config_;
  std::ostringstream sink_;
};

std::string slurp(const fs::path& p) { return cli::read_file(p.string()); }

TEST_F(CliTest, TrainWritesArtifactsAndIsByteDeterministic) {
  ASSERT_EQ(cli::cmd_train(options("a")), 0);
  ASSERT_EQ(cli::cmd_train(options("b")), 0);
  for (const char* f : {"config.ini", "model.ckpt", "metrics.csv", "test_metrics.csv", "manifest.json"}) {
    EXPECT_TRUE(fs::exists(dir_ / "a" / f)) << f;
  }
  EXPECT_EQ(slurp(dir_ / "a" / "metrics.csv"), slurp(dir_ / "b" / "metrics.csv"));
  EXPECT_EQ(slurp(dir_ / "a" / "model.ckpt"), slurp(dir_ / "b" / "model.ckpt"));
  const auto manifest = nlohmann::json::parse(slurp(dir_ / "a" / "manifest.json"));
  EXPECT_EQ(manifest["seed"], 2026);
  EXPECT_EQ(manifest["inputs"]["config"]["git_blob_sha1"], cli::git_blob_sha1(kToyConfig));
}

TEST_F(CliTest, SeedOverrideChangesRun) {
  cli::Options o = options("a");
  ASSERT_EQ(cli::cmd_train(o), 0);
  o.out = (dir_ / "b").string();
  o.seed = 99;
  ASSERT_EQ(cli::cmd_train(o), 0);
  EXPECT_NE(slurp(dir_ / "a" / "metrics.csv"), slurp(dir_ / "b" / "metrics.csv"));
}

TEST_F(CliTest, EmptyAblationEqualsTrain) {
  ASSERT_EQ(cli::cmd_train(options("train")), 0);
  cli::Options o = options("ablate");
  o.disable = "";
  ASSERT_EQ(cli::cmd_ablate(o), 0);
  EXPECT_EQ(slurp(dir_ / "train" / "metrics.csv"), slurp(dir_ / "ablate" / "metrics.csv"));
  o.out = (dir_ / "noprefix").string();
  o.disable = "prefix";
  ASSERT_EQ(cli::cmd_ablate(o), 0);
  const std::string tagged = slurp(dir_ / "noprefix" / "ablation.csv");
  EXPECT_NE(tagged.find("\"prefix\",\"riemann,clock\""), std::string::npos) << tagged;
}

TEST_F(CliTest, EvalAndInspectReadCheckpoint) {
  cli::Options o = options("run");
  o.horizons = "1,6";
  EXPECT_THROW(cli::cmd_eval(o), ConfigError);  // no checkpoint yet
  ASSERT_EQ(cli::cmd_train(o), 0);
  ASSERT_EQ(cli::cmd_eval(o), 0);
  const std::string eval = slurp(dir_ / "run" / "eval.csv");
  EXPECT_EQ(std::count(eval.begin(), eval.end(), '\n'), 5);
  ASSERT_EQ(cli::cmd_inspect(o), 0);
  const std::string dec = slurp(dir_ / "run" / "decomposition.csv");
  EXPECT_EQ(std::count(dec.begin(), dec.end(), '\n'), 1 + 2 * 30 * 31 / 2);
  o.horizons = "7";
  EXPECT_THROW(cli::cmd_eval(o), ConfigError);
}

TEST_F(CliTest, SynthOutputReloads) {
  ASSERT_EQ(cli::cmd_synth(options("syn")), 0);
  const SeriesTable t = load_csv((dir_ / "syn" / "synthetic.csv").string());
  SyntheticSpec s;
  s.length = 400;
  s.channels = 2;
  s.beta = 0.002;
  s.noise_std = 0.05;
  s.seed = 7;
  EXPECT_EQ(t.values, generate_synthetic(s).table.values);
}

TEST_F(CliTest, VerifyPassesAndSignFlipFailsLocality) {
  cli::Options o;
  o.out = (dir_ / "verify").string();
  ASSERT_EQ(cli::cmd_verify(o), 0);
  std::ifstream in(dir_ / "verify" / "reports.jsonl");
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    EXPECT_TRUE(nlohmann::json::parse(line)["pass"].get<bool>());
    ++n;
  }
  EXPECT_GE(n, 4u);

  ::testing::internal::CaptureStderr();
  const int code = cli::cmd_verify(o, [](GateSignals& g) {
    for (double& x : g.g_tilde.data()) x = -x;
  });
  const std::string err = ::testing::internal::GetCapturedStderr();
  EXPECT_EQ(code, 1);
  EXPECT_NE(err.find("prop3.ii"), std::string::npos);
  EXPECT_EQ(err.find("prop3.iii"), std::string::npos);
}

TEST_F(CliTest, ExitCodesFromBinary) {
  EXPECT_EQ(run("train --config " + (dir_ / "missing.ini").string()), 2);
  EXPECT_EQ(run("ablate --config " + config_ + " --out " + (dir_ / "x").string() + " --disable riemann,prefix,clock"), 2);
  EXPECT_EQ(run("bench --t-list \"\" --out " + (dir_ / "bench").string()), 2);
  EXPECT_EQ(run("bench --t-list 64,128 --out " + (dir_ / "bench").string()), 0);
  EXPECT_TRUE(fs::exists(dir_ / "bench" / "bench.csv"));
  EXPECT_EQ(run("frobnicate"), 2);
  EXPECT_EQ(run("verify --out " + (dir_ / "v").string()), 0);
}

TEST(RunConfig, DefaultsAndRoundTrip) {
  const RunConfig a = parse_run_config(kToyConfig);
  EXPECT_EQ(a.model.lookback, 24u);
  EXPECT_EQ(a.model.caps.phi_mode, PhiMode::kIdentity);
  EXPECT_EQ(a.train.accumulation_steps, 2u);
  EXPECT_EQ(a.run.seed, 2026u);
  const RunConfig b = parse_run_config(to_ini(a));
  EXPECT_EQ(to_ini(b), to_ini(a));
}

TEST(RunConfig, RejectsBadInput) {
  EXPECT_THROW(parse_run_config("[model]\nlookback = 10\n"), ConfigError);  // no data source
  EXPECT_THROW(parse_run_config(std::string(kToyConfig) + "[dataset]\ncsv = x.csv\n"), ConfigError);
  EXPECT_THROW(parse_run_config(std::string(kToyConfig) + "[model]\nlookbak = 3\n"), ConfigError);
  EXPECT_THROW(parse_run_config(std::string(kToyConfig) + "[extra]\na = 1\n"), ConfigError);
  EXPECT_THROW(parse_run_config("[synthetic]\n[model]\nphi = cubic\n"), ConfigError);
  EXPECT_THROW(parse_run_config("[synthetic]\n[model]\npaths = riemann,sideways\n"), ConfigError);
  EXPECT_THROW(parse_run_config("[synthetic]\n[train]\nmicro_batch = 5\n"), ConfigError);
  EXPECT_THROW(parse_run_config("[synthetic]\n[model]\nlookback = ten\n"), ConfigError);
}

TEST(Manifest, GitBlobHash) { EXPECT_EQ(cli::git_blob_sha1("hello\n"), "ce013625030ba8dba906f756967f9e9ca394464a"); }

}  // namespace
}  // namespace caps
