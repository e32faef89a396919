#include <gtest/gtest.h>

#include <sys/wait.h>

#include <algorithm>
#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CliResult {
  int code = -1;
  std::string out;
};

CliResult run(const std::string& args) {
  const std::string cmd = std::string(COLVNE_CLI) + " " + args + " 2>/dev/null";
  CliResult r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  std::array<char, 4096> buf{};
  while (std::fgets(buf.data(), buf.size(), p)) r.out += buf.data();
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

json summary(const CliResult& r) {
  EXPECT_EQ(std::count(r.out.begin(), r.out.end(), '\n'), 1) << r.out;
  return json::parse(r.out);
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = fs::temp_directory_path() /
          ("colvne_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }

  fs::path write_config(const std::string& text) {
    const fs::path p = dir / "run.json";
    std::ofstream(p) << text;
    return p;
  }

  fs::path dir;
};

constexpr const char* kTinyConfig = R"({"seed":4,
  "train":{"epochs":2,"warmup_epochs":1,"batch_size":8},
  "architecture":{"encoder_widths":[4,4,6],"input_size":16,"proj_hidden":16,"proj_dim":8},
  "augment":{"global_size":16,"local_size":8,"local_views":1},
  "eval":{"probe_epochs":5}})";

}  // namespace

TEST_F(Cli, GradCheckExitsZero) {
  const CliResult r = run("grad-check");
  EXPECT_EQ(r.code, 0);
  const json j = summary(r);
  EXPECT_TRUE(j["passed"].get<bool>());
  EXPECT_EQ(j["cases"].size(), 6u);
}

TEST_F(Cli, MissingConfigIsExitOneNamingThePath) {
  const CliResult r = run("train --config " + (dir / "missing.json").string() + " --out " + (dir / "o").string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(summary(r)["error"].get<std::string>().find("missing.json"), std::string::npos);
}

TEST_F(Cli, UnknownConfigKeyIsExitOne) {
  const auto cfg = write_config(R"({"train":{"epoch":2}})");
  EXPECT_EQ(run("train --config " + cfg.string() + " --out " + (dir / "o").string()).code, 1);
}

TEST_F(Cli, UsageErrorsAreExitOne) {
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("eval --data x").code, 1);
  EXPECT_EQ(run("ablation --config x --out y --axis depth").code, 1);
}

TEST_F(Cli, MissingCheckpointIsExitTwo) {
  const CliResult r = run("eval --checkpoint " + (dir / "none.cvne").string() + " --data " + dir.string());
  EXPECT_EQ(r.code, 2);
}

TEST_F(Cli, CorruptCheckpointIsExitTwo) {
  std::ofstream(dir / "bad.cvne") << "CVNE but not really a checkpoint";
  EXPECT_EQ(run("diagnose --checkpoint " + (dir / "bad.cvne").string() + " --data " + dir.string()).code, 2);
}

TEST_F(Cli, GenerateTrainEvaluateDiagnose) {
  const fs::path data = dir / "data", out = dir / "run";
  CliResult r = run("gen-data --classes 3 --nmax 30 --rho 2 --seed 2 --out " + data.string());
  ASSERT_EQ(r.code, 0) << r.out;
  json j = summary(r);
  EXPECT_EQ(j["seed"], 2);
  EXPECT_EQ(j["config"]["data"]["classes"], 3);
  EXPECT_TRUE(fs::exists(data / "train" / "labels.csv"));
  EXPECT_TRUE(fs::exists(data / "val" / "labels.csv"));

  const auto cfg = write_config(kTinyConfig);
  r = run("train --config " + cfg.string() + " --data " + data.string() + " --out " + out.string());
  ASSERT_EQ(r.code, 0) << r.out;
  j = summary(r);
  EXPECT_EQ(j["seed"], 4);
  EXPECT_EQ(j["config"]["architecture"]["classes"], 3);
  EXPECT_EQ(j["epochs_completed"], 2);
  EXPECT_TRUE(fs::exists(out / "metrics.csv"));
  EXPECT_TRUE(fs::exists(out / "checkpoint.cvne"));

  r = run("eval --checkpoint " + (out / "checkpoint.cvne").string() + " --data " + data.string() + " --out " +
          (dir / "eval").string());
  ASSERT_EQ(r.code, 0) << r.out;
  j = summary(r);
  EXPECT_GE(j["knn_top5"].get<double>(), j["knn_top1"].get<double>());
  std::ifstream report(dir / "eval" / "report.csv");
  std::string text((std::istreambuf_iterator<char>(report)), std::istreambuf_iterator<char>());
  EXPECT_EQ(text.rfind("metric,value\n", 0), 0u);
  EXPECT_NE(text.find("\nknn_top1,"), std::string::npos);

  r = run("diagnose --checkpoint " + (out / "checkpoint.cvne").string() + " --data " + data.string() + " --out " +
          (dir / "diag").string());
  ASSERT_EQ(r.code, 0) << r.out;
  std::ifstream spectrum(dir / "diag" / "spectrum.csv");
  text.assign((std::istreambuf_iterator<char>(spectrum)), std::istreambuf_iterator<char>());
  EXPECT_NE(text.find("\neig_0,"), std::string::npos);
  EXPECT_NE(text.find("\neig_7,"), std::string::npos);
}

TEST_F(Cli, SummaryConfigReproducesTheRun) {
  const auto cfg = write_config(kTinyConfig);
  const std::string flags = " --classes 3 --nmax 20 --rho 2 --seed 6";
  CliResult a = run("train --config " + cfg.string() + flags + " --out " + (dir / "a").string());
  ASSERT_EQ(a.code, 0) << a.out;
  const json first = summary(a);
  const auto replay = dir / "replay.json";
  std::ofstream(replay) << first["config"].dump();
  CliResult b = run("train --config " + replay.string() + " --out " + (dir / "b").string());
  ASSERT_EQ(b.code, 0) << b.out;
  auto slurp = [](const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  };
  EXPECT_EQ(slurp(dir / "a" / "metrics.csv"), slurp(dir / "b" / "metrics.csv"));
  EXPECT_EQ(summary(b)["config"], first["config"]);
}

TEST_F(Cli, BatchAblationCapsAndWritesCsv) {
  const auto cfg = write_config(R"({"seed":1,
    "train":{"epochs":2,"warmup_epochs":1},
    "data":{"classes":3,"n_max":40,"rho":2,"image_size":16},
    "architecture":{"encoder_widths":[4,4,6],"input_size":16,"proj_hidden":16,"proj_dim":8},
    "augment":{"global_size":16,"local_size":8,"local_views":1},
    "eval":{"probe_epochs":3}})");
  const CliResult r = run("ablation --config " + cfg.string() + " --axis batch --out " + (dir / "abl").string());
  ASSERT_EQ(r.code, 0) << r.out;
  const json j = summary(r);
  ASSERT_EQ(j["cells"].size(), 4u);
  EXPECT_NE(j["cells"][3]["note"].get<std::string>().find("capped"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir / "abl" / "ablation_batch.csv"));
}
