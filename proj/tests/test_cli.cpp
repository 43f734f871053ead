#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "exoc/app.hpp"

namespace fs = std::filesystem;
using exoc::app::run;

namespace {

int run_args(std::vector<std::string> args) {
  args.insert(args.begin(), "exoc");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data());
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::size_t line_count(const fs::path& p) {
  std::ifstream in(p);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) ++n;
  return n;
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    root = fs::temp_directory_path() /
           ("exoc_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(root);
    fs::create_directories(root);
  }
  void TearDown() override { fs::remove_all(root); }

  std::string p(const std::string& rel) const { return (root / rel).string(); }

  void generate(const std::string& dir, const std::string& seed = "3") {
    ASSERT_EQ(run_args({"generate", "--users", "60", "--items", "60", "--rho", "0.5", "--sparsity", "0.2",
                        "--mode", "binary", "--selection-scale", "1", "--seed", seed, "--out", p(dir)}),
              0);
  }

  fs::path root;
};

}  // namespace

TEST_F(Cli, GenerateIsByteIdentical) {
  generate("a");
  generate("b");
  for (const char* f : {"train.csv", "test.csv", "features.csv", "meta.json"}) {
    ASSERT_TRUE(fs::exists(root / "a" / f)) << f;
    EXPECT_EQ(slurp(root / "a" / f), slurp(root / "b" / f)) << f;
  }
  generate("c", "4");
  EXPECT_NE(slurp(root / "a" / "train.csv"), slurp(root / "c" / "train.csv"));
}

TEST_F(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run_args({"generate", "--rho", "1.2", "--out", p("x")}), 2);
  EXPECT_EQ(run_args({"generate", "--users", "abc", "--out", p("x")}), 2);
  EXPECT_EQ(run_args({"frobnicate"}), 2);
  EXPECT_EQ(run_args({"train", "--data", p("missing")}), 2);
  generate("d");
  EXPECT_EQ(run_args({"train", "--data", p("d"), "--alpha", "1.5", "--out", p("r")}), 2);
  EXPECT_EQ(run_args({"train", "--data", p("d"), "--method", "sgd", "--out", p("r")}), 2);
  EXPECT_EQ(run_args({"train", "--data", p("d"), "--mode", "continuous", "--out", p("r")}), 2);
  EXPECT_EQ(run_args({"eval", "--ckpt", p("nope.ckpt"), "--method", "naive", "--data", p("d")}), 2);
}

TEST_F(Cli, HelpAndVersionSucceed) {
  EXPECT_EQ(run_args({"--help"}), 0);
  EXPECT_EQ(run_args({"--version"}), 0);
}

TEST_F(Cli, TrainEvalRoundTrip) {
  generate("d");
  ASSERT_EQ(run_args({"train", "--data", p("d"), "--method", "ours-dr", "--epochs", "3", "--out", p("r1")}), 0);
  for (const char* f : {"config.txt", "manifest.json", "best.ckpt", "trace.csv", "metrics.txt", "metrics.csv",
                        "summary.txt"}) {
    EXPECT_TRUE(fs::exists(root / "r1" / f)) << f;
  }
  const std::string manifest = slurp(root / "r1" / "manifest.json");
  EXPECT_NE(manifest.find("\"status\": \"ok\""), std::string::npos) << manifest;
  EXPECT_NE(manifest.find("crc32"), std::string::npos);
  EXPECT_NE(slurp(root / "r1" / "summary.txt").find("rho_hat="), std::string::npos);

  ASSERT_EQ(run_args({"eval", "--run", p("r1"), "--k", "50"}), 0);
  ASSERT_TRUE(fs::exists(root / "r1" / "eval_k50.txt"));
  EXPECT_NE(slurp(root / "r1" / "eval_k50.txt").find("k=50"), std::string::npos);
  ASSERT_EQ(run_args({"eval", "--run", p("r1")}), 0);
  // Same checkpoint, same cutoff: eval reproduces the training-time metrics.
  EXPECT_EQ(slurp(root / "r1" / "eval_k5.txt"), slurp(root / "r1" / "metrics.txt"));

  ASSERT_EQ(run_args({"train", "--config", p("r1/config.txt"), "--out", p("r2")}), 0);
  for (const char* f : {"metrics.txt", "metrics.csv", "summary.txt", "best.ckpt"}) {
    EXPECT_EQ(slurp(root / "r1" / f), slurp(root / "r2" / f)) << f;
  }
}

TEST_F(Cli, FlagsOverrideConfig) {
  generate("d");
  ASSERT_EQ(run_args({"train", "--data", p("d"), "--method", "naive", "--epochs", "2", "--out", p("r1")}), 0);
  ASSERT_EQ(run_args({"train", "--config", p("r1/config.txt"), "--method", "ips", "--out", p("r2")}), 0);
  EXPECT_NE(slurp(root / "r2" / "config.txt").find("method=ips"), std::string::npos);
  EXPECT_EQ(slurp(root / "r2" / "summary.txt").find("rho_hat="), std::string::npos);
}

TEST_F(Cli, EvalRejectsMismatchedData) {
  generate("d");
  ASSERT_EQ(run_args({"train", "--data", p("d"), "--method", "naive", "--epochs", "1", "--out", p("r")}), 0);
  ASSERT_EQ(run_args({"generate", "--users", "30", "--items", "30", "--mode", "binary", "--sparsity", "0.2",
                      "--out", p("small")}),
            0);
  EXPECT_EQ(run_args({"eval", "--ckpt", p("r/best.ckpt"), "--method", "naive", "--data", p("small")}), 2);
}

TEST_F(Cli, SweepWritesOneRowPerRun) {
  ASSERT_EQ(run_args({"sweep", "--axis", "rho", "--values", "-0.5,0,0.5", "--repeats", "3", "--jobs", "4",
                      "--users", "40", "--items", "40", "--sparsity", "0.2", "--mode", "binary", "--epochs", "2",
                      "--method", "ours-naive", "--out", p("s")}),
            0);
  EXPECT_EQ(line_count(root / "s" / "sweep_runs.csv"), 1u + 9u);
  EXPECT_EQ(line_count(root / "s" / "sweep_summary.csv"), 1u + 3u);
  EXPECT_TRUE(fs::exists(root / "s" / "runs" / "rho=0.5" / "r2" / "metrics.txt"));
  EXPECT_EQ(run_args({"sweep", "--axis", "beta", "--values", "1", "--out", p("s2")}), 2);
}

TEST_F(Cli, AlphaSweepSharesDataAcrossValues) {
  ASSERT_EQ(run_args({"sweep", "--axis", "alpha", "--values", "0,1", "--repeats", "2", "--users", "40", "--items",
                      "40", "--sparsity", "0.2", "--mode", "binary", "--epochs", "2", "--seed", "7", "--out",
                      p("s")}),
            0);
  std::ifstream in(root / "s" / "sweep_runs.csv");
  std::string header, line;
  std::getline(in, header);
  std::vector<std::string> data_seeds;
  while (std::getline(in, line)) {
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cols.push_back(c);
    ASSERT_GE(cols.size(), 6u);
    EXPECT_EQ(cols[5], "ok") << line;
    data_seeds.push_back(cols[3]);
  }
  ASSERT_EQ(data_seeds.size(), 4u);
  EXPECT_EQ(data_seeds[0], data_seeds[2]);
  EXPECT_EQ(data_seeds[1], data_seeds[3]);
  EXPECT_NE(data_seeds[0], data_seeds[1]);
}

TEST_F(Cli, RawTripleFilesWithBinarize) {
  {
    std::ofstream tr(root / "train.csv");
    tr << "user_id,item_id,rating\n";
    for (int u = 0; u < 10; ++u)
      for (int i = 0; i < 10; i += 3) tr << u << "," << i << "," << 1 + (u + i) % 5 << "\n";
    std::ofstream te(root / "test.csv");
    te << "user_id,item_id,rating\n";
    for (int u = 0; u < 10; ++u)
      for (int i = 1; i < 10; i += 4) te << u << "," << i << "," << 1 + (u * i) % 5 << "\n";
  }
  EXPECT_EQ(run_args({"train", "--train-file", p("train.csv"), "--test-file", p("test.csv"), "--binarize", "ge:4",
                      "--method", "naive", "--epochs", "2", "--out", p("r")}),
            0);
  EXPECT_TRUE(fs::exists(root / "r" / "metrics.txt"));
  EXPECT_EQ(run_args({"train", "--train-file", p("train.csv"), "--test-file", p("test.csv"), "--binarize", "gt:4",
                      "--out", p("r2")}),
            2);
}
