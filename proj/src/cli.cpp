#include "klq/cli.hpp"

#include "klq/diagnostics.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>

#include <chrono>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

namespace klq::cli {

namespace fs = std::filesystem;
using io::json;

namespace {

const char* experiment_name(Experiment e) {
  switch (e) {
    case Experiment::Validate: return "validate";
    case Experiment::Solve: return "solve";
    case Experiment::Simulate: return "simulate";
    case Experiment::Coupling: return "coupling";
    case Experiment::Mpc: return "mpc";
  }
  return "?";
}

template <typename T>
T get_as(const json& j, const char* key, const std::string& where) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw UsageError(fmt::format("config: \"{}{}\" has the wrong type", where, key));
  }
}

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw UsageError(fmt::format("config: unknown key \"{}{}\"", where, key));
  }
}

tcl::TclParams parse_tcl(const json& j) {
  if (!j.is_object()) throw UsageError("config: \"tcl\" must be an object");
  reject_unknown(j,
                 {"alpha", "rho", "ambient", "theta_min", "theta_max", "grid_margin", "num_bins", "step_seconds",
                  "eps", "horizon", "kernel_noise"},
                 "tcl.");
  tcl::TclParams p;
  if (j.contains("alpha")) p.alpha = get_as<double>(j, "alpha", "tcl.");
  if (j.contains("rho")) p.rho = get_as<double>(j, "rho", "tcl.");
  if (j.contains("ambient")) p.ambient = get_as<double>(j, "ambient", "tcl.");
  if (j.contains("theta_min")) p.theta_min = get_as<double>(j, "theta_min", "tcl.");
  if (j.contains("theta_max")) p.theta_max = get_as<double>(j, "theta_max", "tcl.");
  if (j.contains("grid_margin")) p.grid_margin = get_as<double>(j, "grid_margin", "tcl.");
  if (j.contains("num_bins")) p.num_bins = get_as<int>(j, "num_bins", "tcl.");
  if (j.contains("step_seconds")) p.step_seconds = get_as<double>(j, "step_seconds", "tcl.");
  if (j.contains("eps")) p.eps = get_as<double>(j, "eps", "tcl.");
  if (j.contains("horizon")) p.horizon = get_as<int>(j, "horizon", "tcl.");
  if (j.contains("kernel_noise")) p.kernel_noise = get_as<bool>(j, "kernel_noise", "tcl.");
  try {
    tcl::validate_params(p);
  } catch (const std::invalid_argument& e) {
    throw UsageError(fmt::format("config: tcl: {}", e.what()));
  }
  return p;
}

ReferenceSpec parse_reference(const json& j, const fs::path& base_dir) {
  if (!j.is_object()) throw UsageError("config: \"reference\" must be an object");
  ReferenceSpec r;
  const std::string type = j.contains("type") ? get_as<std::string>(j, "type", "reference.") : "nominal";
  if (type == "nominal") {
    reject_unknown(j, {"type"}, "reference.");
    r.kind = ReferenceSpec::Kind::Nominal;
  } else if (type == "constant") {
    reject_unknown(j, {"type", "value"}, "reference.");
    r.kind = ReferenceSpec::Kind::Constant;
    r.value = get_as<double>(j, "value", "reference.");
  } else if (type == "sinusoid") {
    reject_unknown(j, {"type", "amplitude", "amplitude_headroom", "period", "offset"}, "reference.");
    r.kind = ReferenceSpec::Kind::Sinusoid;
    if (j.contains("amplitude") == j.contains("amplitude_headroom")) {
      throw UsageError("config: sinusoid reference needs exactly one of amplitude, amplitude_headroom");
    }
    if (j.contains("amplitude")) r.amplitude = get_as<double>(j, "amplitude", "reference.");
    if (j.contains("amplitude_headroom")) r.amplitude_headroom = get_as<double>(j, "amplitude_headroom", "reference.");
    r.period = get_as<double>(j, "period", "reference.");
    if (!(r.period > 0.0)) throw UsageError("config: reference.period must be positive");
    if (j.contains("offset")) r.offset = get_as<double>(j, "offset", "reference.");
  } else if (type == "file") {
    reject_unknown(j, {"type", "path"}, "reference.");
    r.kind = ReferenceSpec::Kind::File;
    r.path = base_dir / get_as<std::string>(j, "path", "reference.");
  } else {
    throw UsageError(fmt::format("config: unknown reference type \"{}\"", type));
  }
  return r;
}

Vector read_number_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError(fmt::format("cannot open reference file {}", path.string()));
  std::stringstream buffer;
  buffer << in.rdbuf();
  std::string text = buffer.str();
  for (char& c : text) {
    if (c == ',') c = ' ';
  }
  std::istringstream tokens(text);
  std::vector<double> values;
  std::string token;
  while (tokens >> token) {
    try {
      std::size_t used = 0;
      values.push_back(std::stod(token, &used));
      if (used != token.size()) throw std::invalid_argument(token);
    } catch (const std::exception&) {
      throw UsageError(fmt::format("reference file {}: \"{}\" is not a number", path.string(), token));
    }
  }
  return Eigen::Map<Vector>(values.data(), static_cast<Eigen::Index>(values.size()));
}

// Per-step reference values, k = 1..length. For TCL runs these are power
// deviations; for model files they are absolute output targets.
Vector reference_values(const ReferenceSpec& spec, int length, double headroom) {
  switch (spec.kind) {
    case ReferenceSpec::Kind::Nominal:
      return Vector::Zero(length);
    case ReferenceSpec::Kind::Constant:
      return Vector::Constant(length, spec.value);
    case ReferenceSpec::Kind::Sinusoid: {
      const double amplitude = spec.amplitude_headroom ? *spec.amplitude_headroom * headroom : spec.amplitude;
      return Vector::Constant(length, spec.offset) + tcl::sinusoid(length, amplitude, spec.period);
    }
    case ReferenceSpec::Kind::File: {
      const Vector values = read_number_file(spec.path);
      if (values.size() < length) {
        throw UsageError(
            fmt::format("reference file {} has {} values, need {}", spec.path.string(), values.size(), length));
      }
      return values.head(length);
    }
  }
  return {};
}

SolverOptions parse_solver(const json& j) {
  if (!j.is_object()) throw UsageError("config: \"solver\" must be an object");
  reject_unknown(j, {"max_iters", "grad_tol", "line_search_tol", "bracket_growth", "method", "memory"}, "solver.");
  SolverOptions o;
  if (j.contains("max_iters")) o.max_iters = get_as<int>(j, "max_iters", "solver.");
  if (j.contains("grad_tol")) o.grad_tol = get_as<double>(j, "grad_tol", "solver.");
  if (j.contains("line_search_tol")) o.line_search_tol = get_as<double>(j, "line_search_tol", "solver.");
  if (j.contains("bracket_growth")) o.bracket_growth = get_as<double>(j, "bracket_growth", "solver.");
  if (j.contains("memory")) o.memory = get_as<int>(j, "memory", "solver.");
  if (j.contains("method")) {
    const auto method = get_as<std::string>(j, "method", "solver.");
    if (method == "lbfgs") {
      o.method = AscentMethod::Lbfgs;
    } else if (method == "gradient") {
      o.method = AscentMethod::Gradient;
    } else {
      throw UsageError(fmt::format("config: unknown solver.method \"{}\"", method));
    }
  }
  if (o.max_iters < 0) throw UsageError("config: solver.max_iters must be non-negative");
  if (o.grad_tol < 0.0) throw UsageError("config: solver.grad_tol must be non-negative");
  return o;
}

KlqModel load_model_source(const RunConfig& cfg, int horizon_override = 0) {
  if (cfg.tcl) {
    tcl::TclParams p = *cfg.tcl;
    if (horizon_override > 0) p.horizon = horizon_override;
    return tcl::build_tcl_model(p);
  }
  const json doc = cfg.model_inline ? *cfg.model_inline : io::read_json_file(*cfg.model_path);
  return io::model_from_json(doc);
}

void require_valid(const KlqModel& model) {
  const auto report = validate_model(model);
  if (!report.ok()) throw std::domain_error(fmt::format("invalid model: {}", report.violations.front()));
}

struct Outputs {
  explicit Outputs(fs::path out_dir) : dir(std::move(out_dir)) {}

  fs::path dir;
  std::vector<std::string> files;
  json summary = json::object();
  json timing = json::object();

  void write(const std::string& name, const std::string& content) {
    io::write_file_atomic(dir / name, content);
    files.push_back(name);
  }
};

std::vector<int> snapshot_times(const RunConfig& cfg, int horizon) {
  std::vector<int> times = cfg.snapshots;
  if (times.empty()) times = {0, horizon / 2, horizon};
  std::set<int> unique;
  for (const int k : times) {
    if (k < 0 || k > horizon) throw UsageError(fmt::format("snapshot time {} outside [0, {}]", k, horizon));
    unique.insert(k);
  }
  return {unique.begin(), unique.end()};
}

void append_marginal_rows(io::CsvTable& table, const std::string& series, const Matrix& nu) {
  for (Eigen::Index s = 0; s < nu.rows(); ++s) {
    for (Eigen::Index u = 0; u < nu.cols(); ++u) {
      table.add_row({series, std::to_string(s), std::to_string(u), io::format_number(nu(s, u))});
    }
  }
}

io::CsvTable marginal_table() { return io::CsvTable({"series", "state", "input", "probability"}); }

io::CsvTable tracking_table(const Vector& reference, const Vector& achieved) {
  io::CsvTable t({"k", "r", "achieved", "error"});
  for (Eigen::Index k = 0; k < reference.size(); ++k) {
    t.add_row({static_cast<double>(k + 1), reference(k), achieved(k), achieved(k) - reference(k)});
  }
  return t;
}

io::CsvTable trace_table(const Vector& reference, const Vector& achieved, const Vector& nominal, const Vector& tv) {
  io::CsvTable t({"k", "r_k", "mean_power", "deviation", "tv_max"});
  for (Eigen::Index k = 0; k < reference.size(); ++k) {
    t.add_row({static_cast<double>(k + 1), reference(k), achieved(k), nominal(k) - achieved(k), tv(k)});
  }
  return t;
}

json solver_json(const SolverOptions& o) {
  return {{"method", o.method == AscentMethod::Lbfgs ? "lbfgs" : "gradient"},
          {"max_iters", o.max_iters},
          {"grad_tol", o.grad_tol},
          {"line_search_tol", o.line_search_tol},
          {"bracket_growth", o.bracket_growth},
          {"memory", o.memory}};
}

void write_manifest(Outputs& out, const RunConfig& cfg, const json& choices) {
  json m;
  m["artifact"] = "klq";
  m["version"] = io::kArtifactVersion;
  m["csv_schema"] = io::kCsvSchemaVersion;
  m["experiment"] = experiment_name(cfg.experiment);
  m["seed"] = cfg.seed;
  m["config_hash"] = io::fnv1a_hex(cfg.effective.dump());
  m["config"] = cfg.effective;
  m["solver"] = solver_json(cfg.solver);
  m["choices"] = choices;
  m["summary"] = out.summary;
  m["timing_seconds"] = out.timing;
  m["files"] = out.files;
  m["created"] = io::timestamp_now();
  io::write_file_atomic(out.dir / "manifest.json", m.dump(2) + "\n");
}

struct SolveOutcome {
  KlqProblem problem;
  Solution solution;
  Vector nominal;  // nominal output means, k = 1..K
};

SolveOutcome solve_scenario(const RunConfig& cfg, Outputs& out) {
  KlqModel model = load_model_source(cfg);
  require_valid(model);
  const Basis basis = parse_basis(cfg.basis, model.horizon());
  const Vector nominal = output_trajectory(propagate_marginals(model, nominal_policy_sequence(model)), model.output());
  const double headroom = cfg.tcl ? tcl::nominal_headroom(model) : 0.0;
  const Vector values = reference_values(cfg.reference, model.horizon(), headroom);
  // TCL references are deviations from nominal power; model-file references
  // are absolute unless nominal-relative by construction.
  Vector target = values;
  if (cfg.tcl || cfg.reference.kind == ReferenceSpec::Kind::Nominal) target = nominal - values;
  KlqProblem problem(std::move(model), basis, target, cfg.kappa);
  const auto clock = std::chrono::steady_clock::now();
  Solution sol = solve(problem, cfg.solver);
  out.timing["solve"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - clock).count();
  out.summary["dual_value"] = sol.dual_value;
  out.summary["iterations"] = sol.iterations;
  out.summary["converged"] = sol.converged;
  out.summary["rms_tracking_error"] = tracking_error(sol, problem.reference()).rms;
  return {std::move(problem), std::move(sol), nominal};
}

int finish(const RunConfig& cfg, bool converged, const std::string& line, std::ostream& out, std::ostream& err) {
  out << line << "\n";
  if (!converged) {
    err << "warning: solver did not converge\n";
    if (cfg.strict) return kExitDomain;
  }
  return kExitOk;
}

int run_validate(const RunConfig& cfg, std::ostream& out) {
  const KlqModel model = load_model_source(cfg);
  const auto report = validate_model(model);
  if (!report.ok()) {
    for (const auto& v : report.violations) out << v << "\n";
    out << fmt::format("invalid: {} violation(s)\n", report.violations.size());
    return kExitDomain;
  }
  out << fmt::format("valid: |S|={} |U|={} K={}\n", model.num_states(), model.num_inputs(), model.horizon());
  return kExitOk;
}

int run_solve(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  Outputs files(cfg.out_dir);
  const SolveOutcome r = solve_scenario(cfg, files);
  const auto& sol = r.solution;
  files.write("solution.json", io::solution_to_json(r.problem, sol).dump(2) + "\n");
  files.write("tracking.csv", tracking_table(r.problem.reference(), sol.output_trajectory).str());
  for (const int k : snapshot_times(cfg, r.problem.horizon())) {
    auto table = marginal_table();
    append_marginal_rows(table, "optimal", sol.marginals.at(k));
    files.write(fmt::format("marginals_k{}.csv", k), table.str());
  }
  write_manifest(files, cfg, json::object());
  return finish(cfg, sol.converged,
                fmt::format("dual_value={} rms_error={} iterations={} converged={}", io::format_number(sol.dual_value),
                            io::format_number(files.summary["rms_tracking_error"].get<double>()), sol.iterations,
                            sol.converged),
                out, err);
}

int run_simulate(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  Outputs files(cfg.out_dir);
  const SolveOutcome r = solve_scenario(cfg, files);
  const auto& sol = r.solution;
  const auto clock = std::chrono::steady_clock::now();
  const FleetRun fleet = simulate_fleet(r.problem.model(), sol.policy, cfg.fleet_size, cfg.seed, cfg.workers);
  files.timing["simulate"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - clock).count();
  const int horizon = r.problem.horizon();
  Vector tv(horizon);
  for (int k = 1; k <= horizon; ++k) tv(k - 1) = total_variation(fleet.empirical[k], sol.marginals.at(k));
  const double rms = tracking_error(fleet.mean_output, r.problem.reference()).rms;
  files.summary["fleet_rms_tracking_error"] = rms;
  files.summary["fleet_tv_max"] = tv.maxCoeff();

  files.write("solution.json", io::solution_to_json(r.problem, sol).dump(2) + "\n");
  files.write("tracking.csv", tracking_table(r.problem.reference(), fleet.mean_output).str());
  files.write("trace.csv", trace_table(r.problem.reference(), fleet.mean_output, r.nominal, tv).str());
  for (const int k : snapshot_times(cfg, horizon)) {
    auto table = marginal_table();
    append_marginal_rows(table, "exact", sol.marginals.at(k));
    append_marginal_rows(table, "empirical", fleet.empirical[k]);
    files.write(fmt::format("marginals_k{}.csv", k), table.str());
  }
  write_manifest(files, cfg, {{"fleet_size", cfg.fleet_size}});
  return finish(cfg, sol.converged,
                fmt::format("dual_value={} rms_error={} iterations={} converged={} fleet_rms_error={}",
                            io::format_number(sol.dual_value),
                            io::format_number(files.summary["rms_tracking_error"].get<double>()), sol.iterations,
                            sol.converged, io::format_number(rms)),
                out, err);
}

int run_coupling(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  Outputs files(cfg.out_dir);
  const KlqModel model = load_model_source(cfg);
  require_valid(model);
  const int horizon = model.horizon();
  const Basis basis = parse_basis(cfg.basis, horizon);
  json choices;

  std::vector<Matrix> starts;
  if (cfg.tcl) {
    starts = tcl::evenly_spaced_point_masses(*cfg.tcl, model);
    choices["initial_marginals"] = "point masses at three temperatures evenly spaced across the deadband, both modes";
  } else {
    starts = cfg.coupling.initial_marginals;
    choices["initial_marginals"] = "from config";
  }
  if (starts.size() < 2) throw UsageError("coupling needs at least two initial marginals");
  for (const auto& start : starts) {
    if (start.rows() != model.num_states() || start.cols() != model.num_inputs()) {
      throw UsageError("coupling: initial marginal has the wrong shape");
    }
    require_valid(model.with_initial_marginal(start));
  }

  const Vector stationary_nominal =
      output_trajectory(propagate_marginals(model, nominal_policy_sequence(model)), model.output());
  const double headroom = cfg.tcl ? tcl::nominal_headroom(model) : 0.0;
  const Vector values = reference_values(cfg.reference, horizon, headroom);
  std::vector<KlqProblem> problems;
  std::vector<Vector> nominals;  // per start
  for (const auto& start : starts) {
    const KlqModel m = model.with_initial_marginal(start);
    nominals.push_back(output_trajectory(propagate_marginals(m, nominal_policy_sequence(m)), m.output()));
  }
  const bool per_start = cfg.tcl && cfg.coupling.per_start_reference;
  choices["reference"] = per_start ? "deviation from each start's own nominal power" : "shared absolute target";
  for (std::size_t i = 0; i < starts.size(); ++i) {
    Vector target = values;
    if (per_start) {
      target = nominals[i] - values;
    } else if (cfg.tcl || cfg.reference.kind == ReferenceSpec::Kind::Nominal) {
      target = stationary_nominal - values;
    }
    problems.emplace_back(model.with_initial_marginal(starts[i]), basis, target, cfg.kappa);
  }

  const auto clock = std::chrono::steady_clock::now();
  const auto runs = coupling_experiment(problems, cfg.coupling.kappas, cfg.solver);
  files.timing["coupling"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - clock).count();

  std::vector<std::string> header{"kappa", "k", "r_k", "mean_power", "deviation", "tv_max"};
  for (const auto& [i, j] : runs.front().pairs) header.push_back(fmt::format("tv_{}_{}", i, j));
  io::CsvTable table(header);
  bool all_converged = true;
  json settling = json::array();
  const double count = static_cast<double>(starts.size());
  for (const auto& run : runs) {
    for (int k = 0; k <= horizon; ++k) {
      double power = 0.0;
      double deviation = 0.0;
      double target = 0.0;
      for (std::size_t i = 0; i < starts.size(); ++i) {
        const auto& sol = run.solutions[i];
        const double p = k == 0 ? mean_output(sol.marginals.at(0), model.output()) : sol.output_trajectory(k - 1);
        const double nominal_k = k == 0 ? p : nominals[i](k - 1);
        power += p / count;
        deviation += (nominal_k - p) / count;
        target += (k == 0 ? p : problems[i].reference()(k - 1)) / count;
      }
      std::vector<double> row{run.kappa, static_cast<double>(k), target, power, deviation, run.tv_max(k)};
      for (Eigen::Index p = 0; p < run.pair_tv.rows(); ++p) row.push_back(run.pair_tv(p, k));
      table.add_row(row);
    }
    for (const auto& sol : run.solutions) all_converged = all_converged && sol.converged;
    settling.push_back({{"kappa", run.kappa}, {"settling_index", settling_index(run.tv_max, cfg.coupling.threshold)}});
  }
  files.summary["settling"] = settling;
  files.summary["threshold"] = cfg.coupling.threshold;
  files.summary["converged"] = all_converged;
  files.write("coupling.csv", table.str());
  for (const int k : snapshot_times(cfg, horizon)) {
    auto snapshot = marginal_table();
    for (const auto& run : runs) {
      for (std::size_t i = 0; i < run.solutions.size(); ++i) {
        append_marginal_rows(snapshot, fmt::format("kappa{}_init{}", io::format_number(run.kappa), i),
                             run.solutions[i].marginals.at(k));
      }
    }
    files.write(fmt::format("marginals_k{}.csv", k), snapshot.str());
  }
  write_manifest(files, cfg, choices);

  std::string line = "coupling:";
  for (const auto& run : runs) {
    line += fmt::format(" kappa={} tv_final={} settling_index={}", io::format_number(run.kappa),
                        io::format_number(run.tv_max(horizon)), settling_index(run.tv_max, cfg.coupling.threshold));
  }
  return finish(cfg, all_converged, line, out, err);
}

int run_mpc(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  Outputs files(cfg.out_dir);
  const auto& s = cfg.mpc;
  if (s.step < 1 || s.window < s.step) throw UsageError("mpc: need 1 <= step <= window");
  const int configured = cfg.tcl ? cfg.tcl->horizon : load_model_source(cfg).horizon();
  const int total = s.total_steps > 0 ? s.total_steps : configured;
  const int needed = ((total - 1) / s.step) * s.step + s.window;
  // TCL models are rebuilt long enough for the last window.
  const KlqModel model = load_model_source(cfg, cfg.tcl ? needed : 0);
  require_valid(model);
  if (model.horizon() < needed) {
    throw UsageError(fmt::format("mpc: model horizon {} shorter than the {} steps the windows need", model.horizon(),
                                 needed));
  }
  const Vector nominal = output_trajectory(propagate_marginals(model, nominal_policy_sequence(model)), model.output());
  const double headroom = cfg.tcl ? tcl::nominal_headroom(model) : 0.0;
  const Vector values = reference_values(cfg.reference, model.horizon(), headroom);
  Vector stream = values;
  if (cfg.tcl || cfg.reference.kind == ReferenceSpec::Kind::Nominal) stream = nominal - values;

  const std::string selector = cfg.basis;
  MpcTemplate tmpl{model, cfg.kappa, [selector](int window) { return parse_basis(selector, window); }, cfg.solver};
  MpcOptions options;
  options.window = s.window;
  options.step = s.step;
  options.total_steps = total;
  options.source = s.source;
  options.exact_initial = model.initial_marginal();
  options.workers = cfg.workers;
  FleetState fleet = make_fleet(model.initial_marginal(), cfg.fleet_size, cfg.seed);

  const auto clock = std::chrono::steady_clock::now();
  const MpcTrace trace = mpc_run(tmpl, options, fleet, stream);
  files.timing["mpc"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - clock).count();

  json window_times = json::array();
  io::CsvTable windows({"start", "converged", "used_fallback", "iterations", "dual_value", "lambda_norm"});
  bool all_converged = true;
  for (const auto& w : trace.windows) {
    windows.add_row({static_cast<double>(w.start), w.converged ? 1.0 : 0.0, w.used_fallback ? 1.0 : 0.0,
                     static_cast<double>(w.iterations), w.dual_value, w.lambda.size() ? w.lambda.norm() : 0.0});
    window_times.push_back(w.solve_seconds);
    all_converged = all_converged && w.converged;
  }
  files.timing["windows"] = window_times;
  const double rms = tracking_error(trace.achieved, trace.reference).rms;
  files.summary["rms_tracking_error"] = rms;
  files.summary["predicted_rms_tracking_error"] = tracking_error(trace.predicted, trace.reference).rms;
  files.summary["windows"] = trace.windows.size();
  files.summary["converged"] = all_converged;

  files.write("trace.csv", trace_table(trace.reference, trace.achieved, nominal.head(total), trace.tv_to_exact).str());
  files.write("tracking.csv", tracking_table(trace.reference, trace.achieved).str());
  files.write("windows.csv", windows.str());
  write_manifest(files, cfg,
                 {{"fleet_size", cfg.fleet_size},
                  {"marginal_source", s.source == MarginalSource::Empirical ? "empirical" : "exact"},
                  {"window", s.window},
                  {"step", s.step},
                  {"total_steps", total}});
  return finish(cfg, all_converged,
                fmt::format("windows={} rms_error={} converged={}", trace.windows.size(), io::format_number(rms),
                            all_converged),
                out, err);
}

struct Flags {
  std::string config;
  std::string out_dir;
  std::optional<double> kappa;
  std::optional<int> max_iters;
  std::optional<double> grad_tol;
  std::string basis;
  std::optional<std::uint64_t> seed;
  std::optional<int> fleet_size;
  std::optional<int> workers;
  bool strict = false;
};

void add_common_flags(CLI::App* cmd, Flags& f, bool solver_flags) {
  cmd->add_option("--config", f.config, "Config document (JSON); a bare model document is accepted")->required();
  cmd->add_option("--out-dir", f.out_dir, "Output directory");
  if (!solver_flags) return;
  cmd->add_option("--kappa", f.kappa, "Tracking penalty")->check(CLI::PositiveNumber);
  cmd->add_option("--max-iters", f.max_iters, "Solver iteration cap")->check(CLI::NonNegativeNumber);
  cmd->add_option("--grad-tol", f.grad_tol, "Gradient tolerance (0 = automatic)")->check(CLI::NonNegativeNumber);
  cmd->add_option("--basis", f.basis, "degenerate | fourier:N[:omega]");
  cmd->add_option("--seed", f.seed, "Random seed");
  cmd->add_option("--fleet-size", f.fleet_size, "Number of simulated agents")->check(CLI::PositiveNumber);
  cmd->add_option("--workers", f.workers, "Simulation threads")->check(CLI::PositiveNumber);
  cmd->add_flag("--strict", f.strict, "Exit 1 when the solver does not converge");
}

json merge_flags(json doc, const Flags& f) {
  if (!f.out_dir.empty()) doc["out_dir"] = f.out_dir;
  if (f.kappa) doc["kappa"] = *f.kappa;
  if (f.max_iters) doc["solver"]["max_iters"] = *f.max_iters;
  if (f.grad_tol) doc["solver"]["grad_tol"] = *f.grad_tol;
  if (!f.basis.empty()) doc["basis"] = f.basis;
  if (f.seed) doc["seed"] = *f.seed;
  if (f.fleet_size) doc["fleet"]["size"] = *f.fleet_size;
  if (f.workers) doc["fleet"]["workers"] = *f.workers;
  if (f.strict) doc["strict"] = true;
  return doc;
}

}  // namespace

RunConfig parse_config(const json& document, Experiment experiment, const fs::path& base_dir) {
  if (!document.is_object()) throw UsageError("config must be a JSON object");
  json doc = document;
  // A bare model document is its own model source.
  if (doc.contains("kernels")) {
    json model = json::object();
    for (const char* key : {"num_states", "num_inputs", "horizon", "kernels", "nominal_policy", "output",
                            "initial_marginal"}) {
      if (doc.contains(key)) {
        model[key] = doc[key];
        doc.erase(key);
      }
    }
    doc["model"] = model;
  }
  reject_unknown(doc,
                 {"model", "tcl", "reference", "kappa", "basis", "solver", "seed", "out_dir", "fleet", "snapshots",
                  "coupling", "mpc", "strict"},
                 "");
  RunConfig cfg;
  cfg.experiment = experiment;
  if (doc.contains("model") == doc.contains("tcl")) {
    throw UsageError("config needs exactly one model source: \"model\" (path or document) or \"tcl\"");
  }
  if (doc.contains("model")) {
    const json& m = doc["model"];
    if (m.is_string()) {
      cfg.model_path = base_dir / m.get<std::string>();
    } else if (m.is_object()) {
      cfg.model_inline = m;
    } else {
      throw UsageError("config: \"model\" must be a path or a model document");
    }
  } else {
    cfg.tcl = parse_tcl(doc["tcl"]);
  }
  if (doc.contains("reference")) cfg.reference = parse_reference(doc["reference"], base_dir);
  if (cfg.reference.amplitude_headroom && !cfg.tcl) {
    throw UsageError("config: reference.amplitude_headroom needs a tcl model");
  }
  if (doc.contains("kappa")) cfg.kappa = get_as<double>(doc, "kappa", "");
  if (!(cfg.kappa > 0.0)) throw UsageError("config: kappa must be positive");
  if (doc.contains("basis")) cfg.basis = get_as<std::string>(doc, "basis", "");
  if (doc.contains("solver")) cfg.solver = parse_solver(doc["solver"]);
  if (doc.contains("seed")) cfg.seed = get_as<std::uint64_t>(doc, "seed", "");
  if (doc.contains("out_dir")) cfg.out_dir = get_as<std::string>(doc, "out_dir", "");
  if (doc.contains("strict")) cfg.strict = get_as<bool>(doc, "strict", "");
  if (doc.contains("snapshots")) cfg.snapshots = get_as<std::vector<int>>(doc, "snapshots", "");
  if (doc.contains("fleet")) {
    const json& f = doc["fleet"];
    reject_unknown(f, {"size", "workers"}, "fleet.");
    if (f.contains("size")) cfg.fleet_size = get_as<int>(f, "size", "fleet.");
    if (f.contains("workers")) cfg.workers = get_as<int>(f, "workers", "fleet.");
    if (cfg.fleet_size < 1 || cfg.workers < 1) throw UsageError("config: fleet size and workers must be positive");
  }
  if (doc.contains("coupling")) {
    const json& c = doc["coupling"];
    reject_unknown(c, {"kappas", "threshold", "reference", "initial_marginals"}, "coupling.");
    if (c.contains("kappas")) cfg.coupling.kappas = get_as<std::vector<double>>(c, "kappas", "coupling.");
    for (const double k : cfg.coupling.kappas) {
      if (!(k > 0.0)) throw UsageError("config: coupling.kappas must be positive");
    }
    if (cfg.coupling.kappas.empty()) throw UsageError("config: coupling.kappas is empty");
    if (c.contains("threshold")) cfg.coupling.threshold = get_as<double>(c, "threshold", "coupling.");
    if (c.contains("reference")) {
      const auto mode = get_as<std::string>(c, "reference", "coupling.");
      if (mode != "per_start" && mode != "shared") {
        throw UsageError("config: coupling.reference must be \"per_start\" or \"shared\"");
      }
      cfg.coupling.per_start_reference = mode == "per_start";
    }
    if (c.contains("initial_marginals")) {
      const json& list = c["initial_marginals"];
      if (!list.is_array()) throw UsageError("config: coupling.initial_marginals must be an array");
      for (const auto& m : list) {
        try {
          cfg.coupling.initial_marginals.push_back(io::matrix_from_json(m, "coupling initial marginal"));
        } catch (const io::FormatError& e) {
          throw UsageError(e.what());
        }
      }
    }
  }
  if (doc.contains("mpc")) {
    const json& m = doc["mpc"];
    reject_unknown(m, {"window", "step", "total_steps", "source"}, "mpc.");
    if (m.contains("window")) cfg.mpc.window = get_as<int>(m, "window", "mpc.");
    if (m.contains("step")) cfg.mpc.step = get_as<int>(m, "step", "mpc.");
    if (m.contains("total_steps")) cfg.mpc.total_steps = get_as<int>(m, "total_steps", "mpc.");
    if (m.contains("source")) {
      const auto source = get_as<std::string>(m, "source", "mpc.");
      if (source == "empirical") {
        cfg.mpc.source = MarginalSource::Empirical;
      } else if (source == "exact") {
        cfg.mpc.source = MarginalSource::Exact;
      } else {
        throw UsageError("config: mpc.source must be \"empirical\" or \"exact\"");
      }
    }
  }
  cfg.effective = doc;
  cfg.effective["experiment"] = experiment_name(experiment);
  return cfg;
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Finite-horizon KL-quadratic control solver and demand-dispatch harness", "klq"};
  app.require_subcommand(1);
  Flags flags;
  struct Entry {
    CLI::App* cmd;
    Experiment experiment;
  };
  std::vector<Entry> entries{
      {app.add_subcommand("validate", "Check a model for stochasticity and support violations"), Experiment::Validate},
      {app.add_subcommand("solve", "Solve the control problem and write the solution"), Experiment::Solve},
      {app.add_subcommand("simulate", "Solve, then simulate a finite fleet under the optimal policy"),
       Experiment::Simulate},
      {app.add_subcommand("coupling", "Solve from several initial marginals and compare them"), Experiment::Coupling},
      {app.add_subcommand("mpc", "Run the receding-horizon loop on a simulated fleet"), Experiment::Mpc},
  };
  for (auto& e : entries) add_common_flags(e.cmd, flags, e.experiment != Experiment::Validate);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  Experiment experiment = Experiment::Solve;
  for (const auto& e : entries) {
    if (e.cmd->parsed()) experiment = e.experiment;
  }

  RunConfig cfg;
  try {
    const fs::path config_path(flags.config);
    const json doc = io::read_json_file(config_path);
    cfg = parse_config(merge_flags(doc, flags), experiment, config_path.parent_path());
  } catch (const std::invalid_argument& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    switch (experiment) {
      case Experiment::Validate: return run_validate(cfg, out);
      case Experiment::Solve: return run_solve(cfg, out, err);
      case Experiment::Simulate: return run_simulate(cfg, out, err);
      case Experiment::Coupling: return run_coupling(cfg, out, err);
      case Experiment::Mpc: return run_mpc(cfg, out, err);
    }
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const io::FormatError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitDomain;
  }
  return kExitOk;
}

}  // namespace klq::cli
