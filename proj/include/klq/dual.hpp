#pragma once

#include "klq/basis.hpp"
#include "klq/mdp.hpp"

#include <functional>
#include <stdexcept>
#include <string>

namespace klq {

/// Raised when the dual value or its gradient stops being finite.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Model + reference r_1..r_K + tracking penalty kappa + weight family.
class KlqProblem {
 public:
  KlqProblem(KlqModel model, Basis basis, Vector reference, double kappa);

  const KlqModel& model() const { return model_; }
  const Basis& basis() const { return basis_; }
  const Vector& reference() const { return reference_; }
  const Vector& transformed_reference() const { return transformed_; }
  double kappa() const { return kappa_; }
  int horizon() const { return model_.horizon(); }

  KlqProblem with_initial_marginal(Matrix initial_marginal) const;
  KlqProblem with_kappa(double kappa) const;

 private:
  KlqModel model_;
  Basis basis_;
  Vector reference_;
  Vector transformed_;
  double kappa_;
};

/// g_k(s) for k = 1..K+1; g_{K+1} is identically zero.
struct BackwardMultipliers {
  Matrix values;  // row k-1 holds g_k

  int horizon() const { return static_cast<int>(values.rows()) - 1; }
  Vector at(int k) const { return values.row(k - 1).transpose(); }
};

/// Everything derived from one multiplier vector.
struct DualIterate {
  Vector lambda;
  Vector lambda_check;  // entry k-1 holds lambda_check_k
  BackwardMultipliers g;
  PolicySequence policy;
  MarginalSequence marginals;
  Vector output_means;  // <nu_k, Y>, entry k-1
  double value = 0.0;
  Vector gradient;
};

enum class AscentMethod {
  Lbfgs,     // limited-memory quasi-Newton direction, backtracking line search
  Gradient,  // steepest ascent with a bracketing golden-section line search
};

struct SolverOptions {
  AscentMethod method = AscentMethod::Lbfgs;
  int max_iters = 500;
  int memory = 10;  // L-BFGS correction pairs
  /// Non-positive means 1e-8 * (1 + ||r_hat||_inf).
  double grad_tol = 0.0;
  /// Golden-section tolerance relative to the bracket length (Gradient only).
  double line_search_tol = 1e-10;
  double bracket_growth = 2.0;
};

struct Solution {
  Vector lambda;
  Vector gamma;  // -lambda / kappa
  Vector lambda_check;
  BackwardMultipliers g;
  PolicySequence policy;
  MarginalSequence marginals;
  Vector output_trajectory;
  Vector gradient;
  double dual_value = 0.0;
  double primal_value = 0.0;  // relaxed objective (transformed coordinates)
  double primal_full = 0.0;   // per-step objective
  double relative_entropy = 0.0;
  double duality_gap = 0.0;
  int iterations = 0;
  bool converged = false;
  std::string message;
};

/// log sum_u phi0_k(u|s) exp(sum_{s'} T_u(s,s') f(s') + lambda_check Y(s,u)),
/// max-stabilised.
Vector tilt_operator(const KlqModel& model, int k, double lambda_check, const Vector& f);

/// g_k = T_k(g_{k+1}) for k = K..1 with g_{K+1} = 0.
BackwardMultipliers backward_recursion(const KlqModel& model, const Basis& basis, const Vector& lambda);

/// G(s,u) = sum_{s'} T_u(s,s') g(s').
Matrix aggregate_g(const KlqModel& model, const Vector& g);

/// lambda' r_hat - ||lambda||^2 / (2 kappa) - <nu_0, G_1>.
double dual_value(const KlqProblem& problem, const Vector& lambda);

/// The dual functional at an arbitrary (lambda, g):
/// dual_value-style terms evaluated at g plus sum_k min_s [g_k(s) - T_k(g_{k+1}; s)].
double dual_functional_general(const KlqProblem& problem, const Vector& lambda, const BackwardMultipliers& g);

/// r_hat_n - lambda_n / kappa - sum_k w_n(k) <nu_k^lambda, Y>.
Vector dual_gradient(const KlqProblem& problem, const Vector& lambda);

/// phi_k(u|s) = phi0_k(u|s) exp(sum_{s'} T_u(s,s') g_{k+1}(s') + lambda_check_k Y(s,u) - g_k(s)).
/// Throws NumericalError if a row misses normalisation by more than 1e-6.
PolicySequence policy_from_multipliers(const KlqModel& model, const Basis& basis, const Vector& lambda,
                                       const BackwardMultipliers& g);

/// Value, gradient, policy and marginals at lambda.
DualIterate evaluate_dual(const KlqProblem& problem, const Vector& lambda);

/// Maximiser of a unimodal f on [lo, hi] to within tol.
double golden_section_search(const std::function<double(double)>& f, double lo, double hi, double tol);

/// Maximises the reduced dual; see SolverOptions::method.
Solution solve(const KlqProblem& problem, const SolverOptions& options = {});

/// Tilted recursion of the unrelaxed problem driven directly by per-step
/// multipliers lambda_1..lambda_K, without any basis. Used to cross-check the
/// degenerate basis.
struct DirectSolution {
  BackwardMultipliers g;
  PolicySequence policy;
  MarginalSequence marginals;
};
DirectSolution direct_recursion(const KlqModel& model, const Vector& step_multipliers);

}  // namespace klq
