#pragma once

#include <Eigen/Dense>
#include <Eigen/SparseCore>

#include <stdexcept>
#include <string>
#include <vector>

namespace klq {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Tolerance used for every stochasticity check on user-supplied tables.
inline constexpr double kStochasticTol = 1e-9;

/// Raised when a divergence would be infinite (nu(s,u) > 0 where the
/// reference conditional assigns zero probability).
class AbsoluteContinuityError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Finite controlled Markov model on X = S x U.
///
/// Every table indexed by (state, input) is stored as an |S| x |U| matrix.
/// Kernels are time-homogeneous; the nominal policy is time-varying and has
/// K+1 tables, index 0..K (index 0 only describes how inputs are drawn at
/// time zero and is never tilted). Storage is dense; a row-compressed copy of
/// each kernel is built at construction for the hot loops. Sparse storage of
/// the tables themselves is left for larger state spaces.
///
/// Instances are immutable once built.
class KlqModel {
 public:
  KlqModel() = default;
  KlqModel(std::vector<Matrix> kernels, std::vector<Matrix> nominal_policies, Matrix output,
           Matrix initial_marginal);

  int num_states() const { return static_cast<int>(output_.rows()); }
  int num_inputs() const { return static_cast<int>(output_.cols()); }
  int num_pairs() const { return num_states() * num_inputs(); }
  int horizon() const { return static_cast<int>(nominal_.size()) - 1; }

  const std::vector<Matrix>& kernels() const { return kernels_; }
  const Matrix& kernel(int u) const { return kernels_.at(u); }
  const std::vector<Matrix>& nominal_policies() const { return nominal_; }
  const Matrix& nominal_policy(int k) const { return nominal_.at(k); }
  const Matrix& output() const { return output_; }
  const Matrix& initial_marginal() const { return initial_; }

  /// Same dynamics and nominal behaviour, different nu_0.
  KlqModel with_initial_marginal(Matrix initial_marginal) const;

  /// Sub-model on [start, start + horizon]: nominal tables start..start+horizon
  /// are re-indexed to 0..horizon.
  KlqModel window(int start, int horizon, Matrix initial_marginal) const;

  /// E(s,u) = sum_{s'} T_u(s,s') f(s').
  Matrix expected_next(const Vector& f) const;

  /// out(s') = sum_{s,u} nu(s,u) T_u(s,s').
  Vector push_forward(const Matrix& nu) const;

 private:
  std::vector<Matrix> kernels_;
  std::vector<Matrix> nominal_;
  Matrix output_;
  Matrix initial_;
  std::vector<Eigen::SparseMatrix<double, Eigen::RowMajor>> sparse_;
};

/// phi_k(u|s) for k = 1..K; steps[k-1] holds phi_k as an |S| x |U| table.
struct PolicySequence {
  std::vector<Matrix> steps;

  int horizon() const { return static_cast<int>(steps.size()); }
  const Matrix& at(int k) const { return steps.at(k - 1); }
};

/// nu_k(s,u) for k = 0..K.
struct MarginalSequence {
  std::vector<Matrix> steps;

  int horizon() const { return static_cast<int>(steps.size()) - 1; }
  const Matrix& at(int k) const { return steps.at(k); }
  Vector state_marginal(int k) const { return steps.at(k).rowwise().sum(); }
};

struct ValidationReport {
  std::vector<std::string> violations;

  bool ok() const { return violations.empty(); }
};

ValidationReport validate_model(const KlqModel& model);

/// Checks row sums, signs and absolute continuity of phi against the
/// model's nominal policy.
ValidationReport validate_policy(const KlqModel& model, const PolicySequence& policy);

/// The nominal policy phi^0_1..phi^0_K as a PolicySequence.
PolicySequence nominal_policy_sequence(const KlqModel& model);

/// P_k(x,x') = T_u(s,s') phi_{k+1}(u'|s') with x = (s,u) flattened as
/// s * |U| + u. Valid for 0 <= k <= K-1.
Matrix policy_to_kernel(const KlqModel& model, const PolicySequence& policy, int k);

/// nu_0 = model.initial_marginal(), nu_k = nu_{k-1} P_{k-1}.
MarginalSequence propagate_marginals(const KlqModel& model, const PolicySequence& policy);

/// Same recursion from an explicit initial marginal.
MarginalSequence propagate_marginals(const KlqModel& model, const PolicySequence& policy,
                                     const Matrix& initial_marginal);

/// <nu, Y>.
double mean_output(const Matrix& nu, const Matrix& output);

/// <nu_k, Y> for k = 1..K (entry k-1).
Vector output_trajectory(const MarginalSequence& marginals, const Matrix& output);

/// Relative entropy rate sum_{s,u} nu(s,u) log(phi(u|s) / phi0(u|s)) where
/// the conditionals are read off the two joint pmfs. Natural log.
double kl_rate(const Matrix& nu, const Matrix& nu_ref);

/// Relative entropy rate with the conditionals given explicitly.
double kl_rate(const Matrix& nu, const Matrix& policy, const Matrix& policy_ref);

/// g_mu(s,u) = log(phi_mu(u|s) / phi0(u|s)) on the support of mu; zero
/// elsewhere.
Matrix kl_rate_subgradient(const Matrix& mu, const Matrix& nu_ref);

/// Full relative entropy D(p || q) between two pmfs of the same shape.
double relative_entropy(const Matrix& p, const Matrix& q);

/// (1/2) sum |a - b|.
double total_variation(const Matrix& a, const Matrix& b);

}  // namespace klq
