#include "klq/io.hpp"

#include <fmt/format.h>

#include <chrono>
#include <ctime>
#include <fstream>
#include <sstream>
#include <system_error>

namespace klq::io {

namespace {

const json& field(const json& j, const char* name) {
  if (!j.is_object() || !j.contains(name)) throw FormatError(fmt::format("model document: missing field \"{}\"", name));
  return j.at(name);
}

int int_field(const json& j, const char* name) {
  const json& v = field(j, name);
  if (!v.is_number_integer()) throw FormatError(fmt::format("model document: \"{}\" must be an integer", name));
  return v.get<int>();
}

bool is_table(const json& j) { return j.is_array() && !j.empty() && j.front().is_array(); }

void expect_shape(const Matrix& m, Eigen::Index rows, Eigen::Index cols, const std::string& what) {
  if (m.rows() != rows || m.cols() != cols) {
    throw FormatError(fmt::format("{} is {}x{}, expected {}x{}", what, m.rows(), m.cols(), rows, cols));
  }
}

}  // namespace

Matrix matrix_from_json(const json& j, const std::string& what) {
  if (!is_table(j)) throw FormatError(what + " must be a non-empty array of rows");
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = static_cast<Eigen::Index>(j.front().size());
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const json& row = j[static_cast<std::size_t>(r)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols) {
      throw FormatError(fmt::format("{}: row {} has the wrong length", what, r));
    }
    for (Eigen::Index c = 0; c < cols; ++c) {
      const json& v = row[static_cast<std::size_t>(c)];
      if (!v.is_number()) throw FormatError(fmt::format("{}: entry ({}, {}) is not a number", what, r, c));
      m(r, c) = v.get<double>();
    }
  }
  return m;
}

json matrix_to_json(const Matrix& m) {
  json out = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    out.push_back(std::move(row));
  }
  return out;
}

Vector vector_from_json(const json& j, const std::string& what) {
  if (!j.is_array()) throw FormatError(what + " must be an array of numbers");
  Vector v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) throw FormatError(fmt::format("{}: entry {} is not a number", what, i));
    v(static_cast<Eigen::Index>(i)) = j[i].get<double>();
  }
  return v;
}

json vector_to_json(const Vector& v) {
  json out = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v(i));
  return out;
}

KlqModel model_from_json(const json& j) {
  const int ns = int_field(j, "num_states");
  const int nu = int_field(j, "num_inputs");
  const int horizon = int_field(j, "horizon");
  if (ns < 1 || nu < 1 || horizon < 1) throw FormatError("model document: sizes must be positive");

  const json& kernels_json = field(j, "kernels");
  if (!kernels_json.is_array() || static_cast<int>(kernels_json.size()) != nu) {
    throw FormatError(fmt::format("model document: \"kernels\" must hold {} matrices", nu));
  }
  std::vector<Matrix> kernels;
  for (int u = 0; u < nu; ++u) {
    const std::string what = fmt::format("kernel {}", u);
    kernels.push_back(matrix_from_json(kernels_json[static_cast<std::size_t>(u)], what));
    expect_shape(kernels.back(), ns, ns, what);
  }

  const json& policy_json = field(j, "nominal_policy");
  std::vector<Matrix> nominal;
  if (is_table(policy_json) && !policy_json.front().empty() && policy_json.front().front().is_number()) {
    Matrix shared = matrix_from_json(policy_json, "nominal policy");
    expect_shape(shared, ns, nu, "nominal policy");
    nominal.assign(horizon + 1, shared);
  } else {
    if (!policy_json.is_array() || static_cast<int>(policy_json.size()) != horizon + 1) {
      throw FormatError(fmt::format("model document: \"nominal_policy\" must be one table or {} tables", horizon + 1));
    }
    for (int k = 0; k <= horizon; ++k) {
      const std::string what = fmt::format("nominal policy {}", k);
      nominal.push_back(matrix_from_json(policy_json[static_cast<std::size_t>(k)], what));
      expect_shape(nominal.back(), ns, nu, what);
    }
  }

  Matrix output = matrix_from_json(field(j, "output"), "output");
  expect_shape(output, ns, nu, "output");
  Matrix initial = matrix_from_json(field(j, "initial_marginal"), "initial marginal");
  expect_shape(initial, ns, nu, "initial marginal");
  return KlqModel(std::move(kernels), std::move(nominal), std::move(output), std::move(initial));
}

json model_to_json(const KlqModel& model) {
  json j;
  j["num_states"] = model.num_states();
  j["num_inputs"] = model.num_inputs();
  j["horizon"] = model.horizon();
  json kernels = json::array();
  for (const auto& t : model.kernels()) kernels.push_back(matrix_to_json(t));
  j["kernels"] = std::move(kernels);
  const auto& nominal = model.nominal_policies();
  bool shared = true;
  for (const auto& table : nominal) shared = shared && table == nominal.front();
  if (shared) {
    j["nominal_policy"] = matrix_to_json(nominal.front());
  } else {
    json tables = json::array();
    for (const auto& table : nominal) tables.push_back(matrix_to_json(table));
    j["nominal_policy"] = std::move(tables);
  }
  j["output"] = matrix_to_json(model.output());
  j["initial_marginal"] = matrix_to_json(model.initial_marginal());
  return j;
}

json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(fmt::format("cannot open {}", path.string()));
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

KlqModel load_model(const std::filesystem::path& path) { return model_from_json(read_json_file(path)); }

json solution_to_json(const KlqProblem& problem, const Solution& solution) {
  json j;
  j["converged"] = solution.converged;
  j["iterations"] = solution.iterations;
  j["message"] = solution.message;
  j["kappa"] = problem.kappa();
  j["lambda"] = vector_to_json(solution.lambda);
  j["gamma"] = vector_to_json(solution.gamma);
  j["lambda_check"] = vector_to_json(solution.lambda_check);
  j["dual_value"] = solution.dual_value;
  j["primal_value"] = solution.primal_value;
  j["relative_entropy"] = solution.relative_entropy;
  j["gap"] = solution.duality_gap;
  j["gradient"] = vector_to_json(solution.gradient);
  j["output_means"] = vector_to_json(solution.output_trajectory);
  json policy = json::array();
  for (const auto& table : solution.policy.steps) policy.push_back(matrix_to_json(table));
  j["policy"] = std::move(policy);
  j["diagnostics"] = {
      {"relative_entropy", solution.relative_entropy},
      {"primal_full", solution.primal_full},
      {"primal_relaxed", solution.primal_value},
      {"gap", solution.duality_gap},
      {"rms_tracking_error", tracking_error(solution, problem.reference()).rms},
  };
  return j;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
  namespace fs = std::filesystem;
  const fs::path dir = path.has_parent_path() ? path.parent_path() : fs::path(".");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::runtime_error(fmt::format("cannot create {}: {}", dir.string(), ec.message()));
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error(fmt::format("cannot write {}", tmp.string()));
    out << content;
    out.flush();
    if (!out) throw std::runtime_error(fmt::format("write to {} failed", tmp.string()));
  }
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp);
    throw std::runtime_error(fmt::format("cannot rename {} to {}: {}", tmp.string(), path.string(), ec.message()));
  }
}

std::string format_number(double value) { return fmt::format("{}", value); }

CsvTable::CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}

void CsvTable::add_row(const std::vector<double>& values) {
  std::vector<std::string> cells;
  cells.reserve(values.size());
  for (const double v : values) cells.push_back(format_number(v));
  add_row(cells);
}

void CsvTable::add_row(const std::vector<std::string>& cells) {
  if (cells.size() != header_.size()) {
    throw std::invalid_argument(fmt::format("CSV row has {} cells, header has {}", cells.size(), header_.size()));
  }
  rows_.push_back(fmt::format("{}", fmt::join(cells, ",")));
}

std::string CsvTable::str() const {
  std::string out = fmt::format("{}\n", fmt::join(header_, ","));
  for (const auto& row : rows_) {
    out += row;
    out += '\n';
  }
  return out;
}

std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return fmt::format("{:016x}", h);
}

std::string timestamp_now() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm local{};
  localtime_r(&now, &local);
  char buf[64];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%S%z", &local);
  return buf;
}

}  // namespace klq::io
