#include <gtest/gtest.h>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sys/wait.h>

#include <nlohmann/json.hpp>

#include "support/helpers.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

Run run(const std::string& args) {
  const std::string cmd = std::string(MARGIN_LAB_CLI) + " " + args + " 2>&1";
  Run r;
  FILE* p = popen(cmd.c_str(), "r");
  if (p == nullptr) return r;
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string data_flag() { return "--data " + margin_lab::testing::data_dir().string(); }

std::string read_file(const fs::path& p) {
  std::ifstream in(p);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::size_t line_count(const fs::path& p) {
  const auto s = read_file(p);
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

}  // namespace

TEST(Cli, UsageErrors) {
  EXPECT_NE(run("").code, 0);
  EXPECT_NE(run("ensembles --no-such-flag").code, 0);
  EXPECT_NE(run("not-a-command").code, 0);
  EXPECT_NE(run("train").code, 0);  // --out is required
  const auto help = run("--help");
  EXPECT_EQ(help.code, 0);
  EXPECT_NE(help.out.find("spectral-reversal"), std::string::npos);
}

TEST(Cli, MissingDataWritesNothing) {
  const auto dir = margin_lab::testing::temp_dir("cli_missing");
  const auto out = dir / "res";
  const auto r = run("ensembles --data /nonexistent/mnist --out " + out.string());
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.out.find("not found"), std::string::npos) << r.out;
  EXPECT_FALSE(fs::exists(out));
}

TEST(Cli, BadConfigIsRejected) {
  const auto dir = margin_lab::testing::temp_dir("cli_config");
  std::ofstream(dir / "c.json") << R"({"widht": 3})";
  const auto r = run("margin-sweep --config " + (dir / "c.json").string() + " " + data_flag() +
                     " --out " + (dir / "res").string());
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.out.find("widht"), std::string::npos) << r.out;
  EXPECT_FALSE(fs::exists(dir / "res"));
}

TEST(Cli, DataCommand) {
  const auto r = run("data " + data_flag() + " --task mnist:subset=30:classes=0v1");
  ASSERT_EQ(r.code, 0) << r.out;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j["train"]["examples"], 7996);
  EXPECT_EQ(j["test"]["examples"], 2004);
  EXPECT_EQ(j["task"]["examples"], 30);
  EXPECT_EQ(j["task"]["binary"], true);
}

TEST(Cli, TrainThenReport) {
  const auto dir = margin_lab::testing::temp_dir("cli_train");
  const std::string task = "--task mnist:subset=20";
  auto r = run("train " + task + " " + data_flag() + " --depth 2 --width 8 --epochs 5 --out " +
               (dir / "net").string());
  ASSERT_EQ(r.code, 0) << r.out;
  for (const char* f : {"init.json", "checkpoint.json", "train_log.csv", "summary.json"})
    EXPECT_TRUE(fs::exists(dir / "net" / f)) << f;
  EXPECT_EQ(line_count(dir / "net" / "train_log.csv"), 7u);  // header + epochs 0..5
  r = run("report --checkpoint " + (dir / "net" / "checkpoint.json").string() + " " + task + " " +
          data_flag() + " --out " + (dir / "rep").string());
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(line_count(dir / "rep" / "margins.csv"), 21u);
  for (const char* f : {"cdf_raw.csv", "cdf_frob.csv", "cdf_spectral.csv", "summary.json"})
    EXPECT_TRUE(fs::exists(dir / "rep" / f)) << f;
  EXPECT_NE(run("report --checkpoint " + (dir / "nope.json").string() + " --out " +
                (dir / "x").string())
                .code,
            0);
}

TEST(Cli, EnsemblesWritesGrid) {
  const auto dir = margin_lab::testing::temp_dir("cli_ens");
  const auto r = run("ensembles " + data_flag() +
                     " --n-train 40 --n-test 60 --m 1,5 --margin 0.1,1 --seeds 1,2 --out " +
                     (dir / "res").string());
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(line_count(dir / "res" / "grid.csv"), 1u + 2 * 2 * 2);
  EXPECT_EQ(line_count(dir / "res" / "grid_summary.csv"), 1u + 2 * 2);
  EXPECT_TRUE(fs::exists(dir / "res" / "manifest.json"));
  EXPECT_TRUE(fs::exists(dir / "res" / "trials.csv"));
}
