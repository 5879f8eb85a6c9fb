#include "json.hpp"
#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("typeii_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int run(const std::string& args) {
  const std::string cmd = std::string(TYPEII_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path write_config(const fs::path& dir, const std::string& text) {
  const fs::path p = dir / "run.ini";
  std::ofstream(p) << text;
  return p;
}

}  // namespace

TEST(Cli, UsageErrorsExitWithTwo) {
  const auto d = scratch("usage");
  EXPECT_EQ(run(""), 2);
  EXPECT_EQ(run("ode --no-such-flag"), 2);
  EXPECT_EQ(run("ode --config " + write_config(d, "[ode]\nbogus = 1\n").string()), 2);
  EXPECT_EQ(run("ode --config " + (d / "missing.ini").string()), 2);
  EXPECT_EQ(run("ode --config " + write_config(d, "[run]\nexperiment = spectrum\n").string()), 2);
}

TEST(Cli, PreconditionFailuresExitWithThree) {
  const auto d = scratch("precondition");
  const auto cfg = write_config(d, "[ode]\nbracket_lo = 0.5\nbracket_hi = 1.0\n");
  EXPECT_EQ(run("shoot --config " + cfg.string() + " --out " + d.string()), 3);
}

TEST(Cli, OdeRunWritesOutputsDeterministically) {
  const auto a = scratch("ode_a"), b = scratch("ode_b");
  ASSERT_EQ(run("ode --out " + a.string()), 0);
  ASSERT_EQ(run("ode --out " + b.string() + " --jobs 3"), 0);
  for (const char* f : {"trajectory.csv", "exit.json", "summary.json", "config.ini", "provenance.json"}) {
    ASSERT_TRUE(fs::exists(a / "ode" / f)) << f;
  }
  EXPECT_EQ(slurp(a / "ode" / "trajectory.csv"), slurp(b / "ode" / "trajectory.csv"));
  const auto s = nlohmann::json::parse(slurp(a / "ode" / "summary.json"));
  EXPECT_EQ(s["command"], "ode");
  EXPECT_TRUE(s["checks"][0]["pass"].get<bool>());
}

TEST(Cli, SpectrumIsIndependentOfThreadCount) {
  const auto a = scratch("spec_a"), b = scratch("spec_b");
  ASSERT_EQ(run("spectrum --out " + a.string() + " --jobs 1"), 0);
  ASSERT_EQ(run("spectrum --out " + b.string() + " --jobs 4"), 0);
  EXPECT_EQ(slurp(a / "spectrum" / "spectral.json"), slurp(b / "spectrum" / "spectral.json"));
}

TEST(Cli, ReportListsMissingInputs) {
  const auto d = scratch("report");
  ASSERT_EQ(run("ode --out " + d.string()), 0);
  ASSERT_EQ(run("report --out " + d.string()), 0);
  const std::string md = slurp(d / "report" / "report.md");
  EXPECT_NE(md.find("missing"), std::string::npos);
  EXPECT_NE(slurp(d / "report" / "checks.csv").find("\node,"), std::string::npos);
}

TEST(Cli, PrintsDefaultConfig) {
  const auto d = scratch("print");
  const std::string cmd =
      std::string(TYPEII_CLI) + " --print-default-config > " + (d / "default.ini").string();
  ASSERT_EQ(std::system(cmd.c_str()), 0);
  EXPECT_EQ(run("ode --config " + (d / "default.ini").string() + " --out " + d.string()), 0);
}
