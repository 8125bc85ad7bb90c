#include "klq/cli.hpp"
#include "klq/io.hpp"

#include "test_support.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <sys/wait.h>
#include <unistd.h>

namespace klq {
namespace {

namespace fs = std::filesystem;
using io::json;

class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = fs::temp_directory_path() / ("klq_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

int count_lines(const std::string& text) { return static_cast<int>(std::count(text.begin(), text.end(), '\n')); }

void write_json(const fs::path& p, const json& j) { std::ofstream(p) << j.dump(2); }

struct RunResult {
  int code;
  std::string out;
  std::string err;
};

RunResult run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "klq");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

json m2_config() {
  return {{"model", io::model_to_json(testing::m2_model())},
          {"reference", {{"type", "constant"}, {"value", 0.7}}},
          {"kappa", 1.0}};
}

json small_tcl_config() {
  return {{"tcl", {{"horizon", 60}}},
          {"reference", {{"type", "sinusoid"}, {"amplitude_headroom", 0.5}, {"period", 30}}},
          {"kappa", 150.0},
          {"fleet", {{"size", 2000}}},
          {"seed", 5}};
}

TEST(ModelJson, RoundTrip) {
  std::mt19937_64 rng(71);
  for (int trial = 0; trial < 10; ++trial) {
    const auto m = testing::random_model(rng);
    const auto back = io::model_from_json(json::parse(io::model_to_json(m).dump()));
    ASSERT_EQ(back.horizon(), m.horizon());
    for (int u = 0; u < m.num_inputs(); ++u) EXPECT_EQ(back.kernel(u), m.kernel(u));
    for (int k = 0; k <= m.horizon(); ++k) EXPECT_EQ(back.nominal_policy(k), m.nominal_policy(k));
    EXPECT_EQ(back.output(), m.output());
    EXPECT_EQ(back.initial_marginal(), m.initial_marginal());
  }
}

TEST(ModelJson, SharedTableIsExpanded) {
  const json j = io::model_to_json(testing::m2_model());
  EXPECT_TRUE(j.at("nominal_policy").front().front().is_number());
  const auto m = io::model_from_json(j);
  EXPECT_EQ(m.nominal_policies().size(), 3u);
}

TEST(ModelJson, MalformedDocumentsAreFormatErrors) {
  json j = io::model_to_json(testing::m2_model());
  j.erase("output");
  EXPECT_THROW(io::model_from_json(j), io::FormatError);
  j = io::model_to_json(testing::m2_model());
  j["kernels"][0][1] = json::array({1.0});
  EXPECT_THROW(io::model_from_json(j), io::FormatError);
  j = io::model_to_json(testing::m2_model());
  j["nominal_policy"] = json::array({j["nominal_policy"], j["nominal_policy"]});
  EXPECT_THROW(io::model_from_json(j), io::FormatError);
}

TEST(Csv, FormatsShortestRoundTrip) {
  io::CsvTable t({"a", "b"});
  t.add_row(std::vector<double>{0.1, 1.0 / 3.0});
  EXPECT_EQ(t.str(), "a,b\n0.1,0.3333333333333333\n");
  EXPECT_THROW(t.add_row(std::vector<double>{1.0}), std::invalid_argument);
}

TEST(AtomicWrite, ReplacesContentAndLeavesNoTemp) {
  TempDir dir;
  const fs::path p = dir.path() / "sub" / "x.txt";
  io::write_file_atomic(p, "one");
  io::write_file_atomic(p, "two");
  EXPECT_EQ(slurp(p), "two");
  EXPECT_FALSE(fs::exists(dir.path() / "sub" / "x.txt.tmp"));
}

TEST(Fnv, KnownVector) { EXPECT_EQ(io::fnv1a_hex("a"), "af63dc4c8601ec8c"); }

TEST(Cli, SolveM2WritesOutputs) {
  TempDir dir;
  write_json(dir.path() / "m2.json", m2_config());
  const auto r = run_cli({"solve", "--config", (dir.path() / "m2.json").string(), "--out-dir", (dir.path() / "out").string()});
  ASSERT_EQ(r.code, cli::kExitOk) << r.err;
  EXPECT_EQ(count_lines(r.out), 1);
  EXPECT_NE(r.out.find("dual"), std::string::npos);
  const json sol = io::read_json_file(dir.path() / "out" / "solution.json");
  EXPECT_TRUE(sol.at("converged").get<bool>());
  for (const char* key : {"lambda", "dual_value", "primal_value", "relative_entropy", "gap", "policy", "output_means"}) {
    EXPECT_TRUE(sol.contains(key)) << key;
  }
  for (const char* key : {"relative_entropy", "primal_full", "primal_relaxed", "gap", "rms_tracking_error"}) {
    EXPECT_TRUE(sol.at("diagnostics").contains(key)) << key;
  }
  EXPECT_EQ(count_lines(slurp(dir.path() / "out" / "tracking.csv")), 1 + 2);
}

TEST(Cli, UnknownFlagIsUsageError) {
  const auto r = run_cli({"solve", "--frobnicate"});
  EXPECT_EQ(r.code, cli::kExitUsage);
  EXPECT_FALSE(r.err.empty());
}

TEST(Cli, BinaryExitCodes) {
  const std::string bin = KLQ_CLI_PATH;
  const int status = std::system((bin + " solve --frobnicate > /dev/null 2>&1").c_str());
  ASSERT_TRUE(WIFEXITED(status));
  EXPECT_EQ(WEXITSTATUS(status), 2);
}

TEST(Cli, ValidateReportsRowSum) {
  TempDir dir;
  json cfg = m2_config();
  cfg["model"]["kernels"][0][0] = json::array({0.5, 0.4});
  write_json(dir.path() / "bad.json", cfg);
  const auto r = run_cli({"validate", "--config", (dir.path() / "bad.json").string()});
  EXPECT_EQ(r.code, cli::kExitDomain);
  EXPECT_NE(r.out.find("kernel row sum 0.9 != 1"), std::string::npos) << r.out;
}

TEST(Cli, ValidateAcceptsBareModelDocument) {
  TempDir dir;
  write_json(dir.path() / "model.json", io::model_to_json(testing::m2_model()));
  const auto r = run_cli({"validate", "--config", (dir.path() / "model.json").string()});
  EXPECT_EQ(r.code, cli::kExitOk) << r.err;
}

TEST(Cli, ConfigProblemsAreUsageErrors) {
  TempDir dir;
  json cfg = m2_config();
  cfg["bogus"] = 1;
  write_json(dir.path() / "a.json", cfg);
  EXPECT_EQ(run_cli({"solve", "--config", (dir.path() / "a.json").string()}).code, cli::kExitUsage);
  cfg = m2_config();
  cfg["tcl"] = json::object();
  write_json(dir.path() / "b.json", cfg);
  EXPECT_EQ(run_cli({"solve", "--config", (dir.path() / "b.json").string()}).code, cli::kExitUsage);
  EXPECT_EQ(run_cli({"solve", "--config", (dir.path() / "missing.json").string()}).code, cli::kExitUsage);
  std::ofstream(dir.path() / "c.json") << "{ not json";
  EXPECT_EQ(run_cli({"solve", "--config", (dir.path() / "c.json").string()}).code, cli::kExitUsage);
}

TEST(Cli, StrictNonConvergenceIsDomainError) {
  TempDir dir;
  write_json(dir.path() / "m2.json", m2_config());
  const std::string config = (dir.path() / "m2.json").string();
  const std::string out = (dir.path() / "out").string();
  EXPECT_EQ(run_cli({"solve", "--config", config, "--out-dir", out, "--max-iters", "1", "--grad-tol", "1e-300"}).code,
            cli::kExitOk);
  EXPECT_EQ(run_cli({"solve", "--config", config, "--out-dir", out, "--max-iters", "1", "--grad-tol", "1e-300",
                     "--strict"})
                .code,
            cli::kExitDomain);
}

TEST(Cli, FlagsOverrideConfig) {
  TempDir dir;
  write_json(dir.path() / "m2.json", m2_config());
  const auto r = run_cli({"solve", "--config", (dir.path() / "m2.json").string(), "--out-dir",
                          (dir.path() / "out").string(), "--kappa", "3"});
  ASSERT_EQ(r.code, cli::kExitOk) << r.err;
  EXPECT_DOUBLE_EQ(io::read_json_file(dir.path() / "out" / "solution.json").at("kappa").get<double>(), 3.0);
  const json manifest = io::read_json_file(dir.path() / "out" / "manifest.json");
  EXPECT_DOUBLE_EQ(manifest.at("config").at("kappa").get<double>(), 3.0);
}

TEST(Cli, SimulateIsReproducibleAndManifestIsComplete) {
  TempDir dir;
  write_json(dir.path() / "tcl.json", small_tcl_config());
  const std::string config = (dir.path() / "tcl.json").string();
  ASSERT_EQ(run_cli({"simulate", "--config", config, "--out-dir", (dir.path() / "a").string()}).code, cli::kExitOk);
  ASSERT_EQ(run_cli({"simulate", "--config", config, "--out-dir", (dir.path() / "b").string(), "--workers", "3"}).code,
            cli::kExitOk);
  const json manifest = io::read_json_file(dir.path() / "a" / "manifest.json");
  for (const char* key : {"seed", "config_hash", "version", "files"}) EXPECT_TRUE(manifest.contains(key)) << key;
  EXPECT_EQ(manifest.at("seed").get<int>(), 5);
  EXPECT_EQ(manifest.at("version").get<std::string>(), io::kArtifactVersion);
  int csvs = 0;
  for (const auto& f : manifest.at("files")) {
    const std::string name = f.get<std::string>();
    EXPECT_TRUE(fs::exists(dir.path() / "a" / name)) << name;
    if (name.ends_with(".csv")) {
      ++csvs;
      EXPECT_EQ(slurp(dir.path() / "a" / name), slurp(dir.path() / "b" / name)) << name;
    }
  }
  EXPECT_GE(csvs, 3);
  EXPECT_EQ(count_lines(slurp(dir.path() / "a" / "tracking.csv")), 1 + 60);
  EXPECT_EQ(count_lines(slurp(dir.path() / "a" / "trace.csv")), 1 + 60);
  EXPECT_EQ(slurp(dir.path() / "a" / "trace.csv").substr(0, 34), "k,r_k,mean_power,deviation,tv_max\n");
}

TEST(Cli, CouplingHasFifteenPairColumns) {
  TempDir dir;
  json cfg = small_tcl_config();
  cfg["coupling"] = {{"kappas", {150}}};
  write_json(dir.path() / "c.json", cfg);
  const auto r = run_cli({"coupling", "--config", (dir.path() / "c.json").string(), "--out-dir",
                          (dir.path() / "out").string()});
  ASSERT_EQ(r.code, cli::kExitOk) << r.err;
  const std::string csv = slurp(dir.path() / "out" / "coupling.csv");
  const std::string header = csv.substr(0, csv.find('\n'));
  int pair_columns = 0;
  for (std::size_t pos = header.find("tv_"); pos != std::string::npos; pos = header.find("tv_", pos + 1)) {
    if (header.compare(pos, 6, "tv_max") != 0) ++pair_columns;
  }
  EXPECT_EQ(pair_columns, 15);
  EXPECT_EQ(count_lines(csv), 1 + 61);
}

TEST(Cli, MpcWritesWindows) {
  TempDir dir;
  json cfg = small_tcl_config();
  cfg["tcl"]["horizon"] = 80;
  cfg["mpc"] = {{"window", 40}, {"step", 20}, {"total_steps", 40}};
  write_json(dir.path() / "m.json", cfg);
  const auto r = run_cli({"mpc", "--config", (dir.path() / "m.json").string(), "--out-dir",
                          (dir.path() / "out").string()});
  ASSERT_EQ(r.code, cli::kExitOk) << r.err;
  EXPECT_EQ(count_lines(slurp(dir.path() / "out" / "windows.csv")), 1 + 2);
  EXPECT_EQ(count_lines(slurp(dir.path() / "out" / "trace.csv")), 1 + 40);
}

}  // namespace
}  // namespace klq
