#pragma once

#include "klq/diagnostics.hpp"
#include "klq/dual.hpp"
#include "klq/mdp.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace klq::io {

using json = nlohmann::json;

inline constexpr const char* kArtifactVersion = "1.0.0";
inline constexpr int kCsvSchemaVersion = 1;

/// Raised for malformed documents: missing fields, wrong nesting, ragged
/// tables. Stochasticity problems are left to validate_model.
class FormatError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

Matrix matrix_from_json(const json& j, const std::string& what);
json matrix_to_json(const Matrix& m);
Vector vector_from_json(const json& j, const std::string& what);
json vector_to_json(const Vector& v);

/// Model document:
///   { "num_states", "num_inputs", "horizon",
///     "kernels": [ |U| matrices |S| x |S| ],
///     "nominal_policy": one |S| x |U| table or K+1 of them,
///     "output": |S| x |U|, "initial_marginal": |S| x |U| }
KlqModel model_from_json(const json& j);
/// Writes a single shared nominal table when all K+1 tables coincide.
json model_to_json(const KlqModel& model);

json read_json_file(const std::filesystem::path& path);
KlqModel load_model(const std::filesystem::path& path);

/// Solution document with a trailing "diagnostics" block.
json solution_to_json(const KlqProblem& problem, const Solution& solution);

/// Writes through a temporary file in the same directory and renames it into
/// place, so readers never see a partial file.
void write_file_atomic(const std::filesystem::path& path, const std::string& content);

/// Shortest round-trip decimal for a double; the same value always prints
/// the same way.
std::string format_number(double value);

/// Simple CSV builder; every row must match the header width.
class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> header);

  void add_row(const std::vector<double>& values);
  void add_row(const std::vector<std::string>& cells);
  std::size_t rows() const { return rows_.size(); }
  std::string str() const;

 private:
  std::vector<std::string> header_;
  std::vector<std::string> rows_;
};

/// FNV-1a 64-bit, printed as 16 hex digits.
std::string fnv1a_hex(const std::string& bytes);

/// Local time in ISO 8601 with offset.
std::string timestamp_now();

}  // namespace klq::io
