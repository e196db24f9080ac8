#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "talos/cli.hpp"

using namespace talos;
namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code;
  std::string out, err;
};

CliRun cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(std::move(args), out, err);
  return {code, out.str(), err.str()};
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("talos_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    std::ofstream f(dir_ / "ratings.tsv");
    int ts = 0;
    for (int u = 0; u < 30; ++u)
      for (int k = 0; k < 25; ++k) f << "u" << u << "\ti" << (u * 7 + k * 11) % 60 << "\t4\t" << ts++ << '\n';
    std::ofstream cfg(dir_ / "small.conf");
    cfg << "# small run\nmin_rating = none\ncore = 0\nK = 5\nnum_negatives = 16\n"
        << "epochs = 3\ndim = 8\nlr = 1e-2\neval_cutoffs = 5\neval_metric = precision@5\n";
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  CliRun prepare() {
    return cli({"prepare", path("ratings.tsv"), "-c", path("small.conf"), "-o", path("split.txt")});
  }

  fs::path dir_;
};

}  // namespace

TEST(Cli, NoSubcommandIsUsageError) {
  EXPECT_EQ(cli({}).code, kExitUsage);
  EXPECT_EQ(cli({"bogus"}).code, kExitUsage);
}

TEST(Cli, HelpExitsZeroAndListsConfigKeys) {
  auto r = cli({"--help"});
  EXPECT_EQ(r.code, kExitOk);
  for (const auto& k : config_schema()) EXPECT_NE(r.out.find(k.name), std::string::npos) << k.name;
}

TEST(Cli, UnknownConfigKeyIsUsageError) {
  auto r = cli({"simulate", "-s", "sim_trails=10"});
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_NE(r.err.find("unknown config key"), std::string::npos) << r.err;
}

TEST(Cli, BadValueIsUsageError) {
  EXPECT_EQ(cli({"simulate", "-s", "sim_trials=ten"}).code, kExitUsage);
}

TEST(Cli, MissingInputFileIsUsageError) {
  auto r = cli({"prepare", "/nonexistent/ratings.tsv", "-o", "/tmp/x.txt"});
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_NE(r.err.find("not found"), std::string::npos);
  EXPECT_EQ(cli({"train", "/nonexistent/split.txt", "-o", "/tmp/talos_none"}).code, kExitUsage);
  EXPECT_EQ(cli({"simulate", "-c", "/nonexistent/cfg"}).code, kExitUsage);
}

TEST_F(CliTest, PrepareWritesSplitSummary) {
  auto r = prepare();
  ASSERT_EQ(r.code, kExitOk) << r.err;
  auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j["users"], 30);
  EXPECT_EQ(j["mode"], "iid");
  EXPECT_GT(j["validation"].get<int>(), 0);
  EXPECT_TRUE(fs::exists(path("split.txt")));
}

TEST_F(CliTest, TrainThenEvalReproducesLoggedValidation) {
  ASSERT_EQ(prepare().code, kExitOk);
  auto t = cli({"train", path("split.txt"), "-c", path("small.conf"), "-o", path("run")});
  ASSERT_EQ(t.code, kExitOk) << t.err;
  auto summary = nlohmann::json::parse(t.out);
  const int best = summary["best_epoch"];
  ASSERT_GE(best, 1);

  std::ifstream log(path("run/train_log.jsonl"));
  std::string line;
  double logged = -1.0;
  while (std::getline(log, line)) {
    auto j = nlohmann::json::parse(line);
    if (j.contains("epoch") && j["epoch"] == best)
      logged = j["validation"]["metrics"]["precision@5"];
  }
  ASSERT_GE(logged, 0.0);

  auto e = cli({"eval", path("run/checkpoint.bin"), path("split.txt"), "--on", "validation", "-c",
                path("small.conf")});
  ASSERT_EQ(e.code, kExitOk) << e.err;
  auto ej = nlohmann::json::parse(e.out);
  EXPECT_DOUBLE_EQ(ej["metrics"]["precision@5"].get<double>(), logged);
  EXPECT_EQ(ej["epoch"], best);

  auto test = cli({"eval", path("run/checkpoint.bin"), path("split.txt"), "-c", path("small.conf")});
  ASSERT_EQ(test.code, kExitOk);
  EXPECT_DOUBLE_EQ(nlohmann::json::parse(test.out)["metrics"]["precision@5"].get<double>(),
                   summary["test"]["metrics"]["precision@5"].get<double>());

  auto q = cli({"quantile-error", path("run/checkpoint.bin"), path("split.txt")});
  ASSERT_EQ(q.code, kExitOk) << q.err;
  auto qj = nlohmann::json::parse(q.out);
  EXPECT_EQ(qj["K"], 5);
  EXPECT_GE(qj["max_abs_error"].get<double>(), qj["mean_abs_error"].get<double>());
}

TEST_F(CliTest, NanInjectionFailsWithCoordinates) {
  ASSERT_EQ(prepare().code, kExitOk);
  auto r = cli({"train", path("split.txt"), "-c", path("small.conf"), "-s", "lr=1e200", "-s",
                "weight_decay=1e200", "-o", path("nan")});
  EXPECT_EQ(r.code, kExitFailure);
  EXPECT_NE(r.err.find("epoch 1 batch 0"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("non-finite"), std::string::npos) << r.err;
}

TEST_F(CliTest, DataDirFallback) {
  ASSERT_EQ(prepare().code, kExitOk);
  setenv(kDataDirEnv, dir_.c_str(), 1);
  auto q = cli({"train", "split.txt", "-c", path("small.conf"), "-s", "epochs=1", "-o", path("env")});
  unsetenv(kDataDirEnv);
  EXPECT_EQ(q.code, kExitOk) << q.err;
}

TEST_F(CliTest, EvalRejectsMismatchedCheckpoint) {
  ASSERT_EQ(prepare().code, kExitOk);
  ASSERT_EQ(cli({"train", path("split.txt"), "-c", path("small.conf"), "-s", "epochs=1", "-o",
                 path("run")}).code,
            kExitOk);
  std::ofstream other(dir_ / "other.tsv");
  other << "a x\na y\nb x\nb y\n";
  other.close();
  ASSERT_EQ(cli({"prepare", path("other.tsv"), "-c", path("small.conf"), "-o", path("other.txt")}).code,
            kExitOk);
  EXPECT_EQ(cli({"eval", path("run/checkpoint.bin"), path("other.txt")}).code, kExitUsage);
}

TEST(Cli, SimulateSmallRun) {
  auto r = cli({"simulate", "-s", "sim_trials=200"});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j["config"]["trials"], 200);
  EXPECT_EQ(j["pairs"].size(), 8u);
}

TEST(Cli, VerifySelectedChecks) {
  auto r = cli({"verify", "--check", "bound", "-s", "bound_trials=50"});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  auto j = nlohmann::json::parse(r.out);
  EXPECT_TRUE(j["all_passed"].get<bool>());
  ASSERT_EQ(j["checks"].size(), 1u);
  EXPECT_EQ(j["checks"][0]["name"], "precision_bound");
  EXPECT_NE(r.err.find("PASS"), std::string::npos);

  auto t = cli({"verify", "--check", "unbiasedness", "--format", "table"});
  EXPECT_EQ(t.code, kExitOk);
  EXPECT_NE(t.out.find("unbiasedness"), std::string::npos);

  auto all = cli({"verify", "-s", "bound_trials=50", "-s", "dro_trials=50"});
  EXPECT_EQ(all.code, kExitOk) << all.err;
  EXPECT_EQ(nlohmann::json::parse(all.out)["checks"].size(), 3u);
}

TEST(Cli, VerifyEpsilonOutsideRangeIsConfigError) {
  auto r = cli({"verify", "--check", "bound", "-s", "epsilon_log=1.5"});
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_NE(r.err.find("tau"), std::string::npos) << r.err;
  EXPECT_EQ(cli({"verify", "--check", "bound", "-s", "epsilon_log=0.3", "-s", "bound_trials=20"}).code,
            kExitOk);
}
