#pragma once

#include "klq/dual.hpp"

#include <cstdint>
#include <functional>
#include <vector>

namespace klq {

struct StateInput {
  int state = 0;
  int input = 0;
};

using Path = std::vector<StateInput>;  // x_0 .. x_K

struct PathLikelihood {
  double llr = 0.0;
  std::vector<double> deltas;  // Delta_k(x_{k-1}, s_k), entry k-1
};

/// Closed-form log p^lambda / p^0 along a path:
/// sum_k {Delta_k + lambda_check_k Y(x_k)} - G_1(x_0), with
/// Delta_k = G_k(x_{k-1}) - g_k(s_k). Throws AbsoluteContinuityError when the
/// path has zero nominal probability.
PathLikelihood log_likelihood_ratio(const KlqModel& model, const Basis& basis, const Vector& lambda,
                                    const BackwardMultipliers& g, const Path& path);

/// sum_k log(phi_k(u_k|s_k) / phi0_k(u_k|s_k)).
double chain_rule_llr(const KlqModel& model, const PolicySequence& policy, const Path& path);

/// D(p^lambda || p^0) = sum_k lambda_check_k <nu_k, Y> - <nu_0, G_1>.
double relative_entropy(const KlqModel& model, const Basis& basis, const Vector& lambda);

/// sum_k kl_rate(nu_k, phi_k, phi0_k).
double relative_entropy_rate_sum(const KlqModel& model, const PolicySequence& policy,
                                 const MarginalSequence& marginals);

struct PrimalValues {
  double relative_entropy = 0.0;
  double full = 0.0;     // D + (kappa/2) sum_k (<nu_k, Y> - r_k)^2
  double relaxed = 0.0;  // D + (kappa/2) sum_n (<p, Y_hat_n> - r_hat_n)^2
};

PrimalValues primal_value(const KlqProblem& problem, const Vector& lambda);
PrimalValues primal_value(const KlqProblem& problem, const DualIterate& iterate);

struct TrackingError {
  Vector per_step;  // <nu_k, Y> - r_k
  double rms = 0.0;
  double max_abs = 0.0;
};

TrackingError tracking_error(const Vector& achieved, const Vector& reference);
TrackingError tracking_error(const Solution& solution, const Vector& reference);

/// Largest |X|^{K+1} the exhaustive oracles accept.
inline constexpr std::uint64_t kMaxEnumeratedPaths = 1'000'000;

/// Calls visit(path, probability) for every path of positive probability under
/// the chain started at model.initial_marginal() and driven by policy.
/// Refuses instances with more than kMaxEnumeratedPaths candidate paths.
void enumerate_paths(const KlqModel& model, const PolicySequence& policy,
                     const std::function<void(const Path&, double)>& visit);

/// sum_x p(x) log(p(x) / p0(x)) by enumeration.
double exhaustive_relative_entropy(const KlqModel& model, const PolicySequence& policy);

}  // namespace klq
