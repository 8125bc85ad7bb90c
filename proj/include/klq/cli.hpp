#pragma once

#include "klq/dual.hpp"
#include "klq/fleet.hpp"
#include "klq/io.hpp"
#include "klq/tcl.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace klq::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitDomain = 1;
inline constexpr int kExitUsage = 2;

/// Bad flags or config contents; maps to kExitUsage.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Experiment { Validate, Solve, Simulate, Coupling, Mpc };

struct ReferenceSpec {
  enum class Kind { Nominal, Constant, Sinusoid, File };
  Kind kind = Kind::Nominal;
  double value = 0.0;      // Constant
  double amplitude = 0.0;  // Sinusoid
  std::optional<double> amplitude_headroom;  // TCL only: amplitude as a fraction of headroom
  double period = 0.0;
  double offset = 0.0;
  std::filesystem::path path;  // File: numbers separated by whitespace or commas
};

struct CouplingSettings {
  std::vector<double> kappas{150.0, 600.0};
  double threshold = 0.05;
  bool per_start_reference = true;  // TCL only
  std::vector<Matrix> initial_marginals;  // required for model files
};

struct MpcSettings {
  int window = 120;
  int step = 30;
  int total_steps = 0;  // 0 means the configured horizon
  MarginalSource source = MarginalSource::Empirical;
};

/// Fully resolved run configuration (flags > config document > defaults).
struct RunConfig {
  Experiment experiment = Experiment::Solve;
  std::optional<std::filesystem::path> model_path;
  std::optional<io::json> model_inline;
  std::optional<tcl::TclParams> tcl;
  ReferenceSpec reference;
  double kappa = 1.0;
  std::string basis = "degenerate";
  SolverOptions solver;
  std::uint64_t seed = 1;
  std::filesystem::path out_dir = "out";
  int fleet_size = 10000;
  int workers = 1;
  std::vector<int> snapshots;  // empty means {0, K/2, K}
  CouplingSettings coupling;
  MpcSettings mpc;
  bool strict = false;

  io::json effective;  // the merged document, hashed into the manifest
};

/// Builds a RunConfig from a merged config document. Relative paths resolve
/// against base_dir. Throws UsageError on schema problems.
RunConfig parse_config(const io::json& document, Experiment experiment, const std::filesystem::path& base_dir);

/// Entry point behind the klq executable.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace klq::cli
