#include "klq/diagnostics.hpp"

#include <fmt/format.h>

#include <cmath>

namespace klq {

PathLikelihood log_likelihood_ratio(const KlqModel& model, const Basis& basis, const Vector& lambda,
                                    const BackwardMultipliers& g, const Path& path) {
  const int horizon = model.horizon();
  if (static_cast<int>(path.size()) != horizon + 1) {
    throw std::invalid_argument(fmt::format("path has {} entries, expected {}", path.size(), horizon + 1));
  }
  for (int k = 1; k <= horizon; ++k) {
    const auto [s_prev, u_prev] = path[k - 1];
    const auto [s, u] = path[k];
    if (model.kernel(u_prev)(s_prev, s) <= 0.0 || model.nominal_policy(k)(s, u) <= 0.0) {
      throw AbsoluteContinuityError(fmt::format("path leaves the nominal support at k={}", k));
    }
  }
  const Vector lambda_check = basis.expand(lambda);
  PathLikelihood out;
  out.deltas.reserve(horizon);
  const auto [s0, u0] = path[0];
  out.llr = -aggregate_g(model, g.at(1))(s0, u0);
  for (int k = 1; k <= horizon; ++k) {
    const auto [s_prev, u_prev] = path[k - 1];
    const auto [s, u] = path[k];
    const double delta = aggregate_g(model, g.at(k))(s_prev, u_prev) - g.values(k - 1, s);
    out.deltas.push_back(delta);
    out.llr += delta + lambda_check(k - 1) * model.output()(s, u);
  }
  return out;
}

double chain_rule_llr(const KlqModel& model, const PolicySequence& policy, const Path& path) {
  double llr = 0.0;
  for (int k = 1; k <= policy.horizon(); ++k) {
    const auto [s, u] = path.at(k);
    const double ref = model.nominal_policy(k)(s, u);
    if (ref <= 0.0) throw AbsoluteContinuityError(fmt::format("nominal policy is zero at k={}", k));
    llr += std::log(policy.at(k)(s, u)) - std::log(ref);
  }
  return llr;
}

double relative_entropy(const KlqModel& model, const Basis& basis, const Vector& lambda) {
  const auto g = backward_recursion(model, basis, lambda);
  const auto policy = policy_from_multipliers(model, basis, lambda, g);
  const auto marginals = propagate_marginals(model, policy);
  const Vector lambda_check = basis.expand(lambda);
  return lambda_check.dot(output_trajectory(marginals, model.output())) -
         model.initial_marginal().cwiseProduct(aggregate_g(model, g.at(1))).sum();
}

double relative_entropy_rate_sum(const KlqModel& model, const PolicySequence& policy,
                                 const MarginalSequence& marginals) {
  double total = 0.0;
  for (int k = 1; k <= policy.horizon(); ++k) {
    total += kl_rate(marginals.at(k), policy.at(k), model.nominal_policy(k));
  }
  return total;
}

PrimalValues primal_value(const KlqProblem& problem, const DualIterate& iterate) {
  const auto& model = problem.model();
  PrimalValues out;
  out.relative_entropy = iterate.lambda_check.dot(iterate.output_means) -
                         model.initial_marginal().cwiseProduct(aggregate_g(model, iterate.g.at(1))).sum();
  const double half_kappa = 0.5 * problem.kappa();
  out.full = out.relative_entropy + half_kappa * (iterate.output_means - problem.reference()).squaredNorm();
  const Vector transformed = problem.basis().weights() * iterate.output_means;
  out.relaxed = out.relative_entropy + half_kappa * (transformed - problem.transformed_reference()).squaredNorm();
  return out;
}

PrimalValues primal_value(const KlqProblem& problem, const Vector& lambda) {
  return primal_value(problem, evaluate_dual(problem, lambda));
}

TrackingError tracking_error(const Vector& achieved, const Vector& reference) {
  if (achieved.size() != reference.size()) {
    throw std::invalid_argument(
        fmt::format("tracking_error: {} achieved values vs {} reference values", achieved.size(), reference.size()));
  }
  TrackingError out;
  out.per_step = achieved - reference;
  if (out.per_step.size() > 0) {
    out.rms = std::sqrt(out.per_step.squaredNorm() / static_cast<double>(out.per_step.size()));
    out.max_abs = out.per_step.cwiseAbs().maxCoeff();
  }
  return out;
}

TrackingError tracking_error(const Solution& solution, const Vector& reference) {
  return tracking_error(solution.output_trajectory, reference);
}

void enumerate_paths(const KlqModel& model, const PolicySequence& policy,
                     const std::function<void(const Path&, double)>& visit) {
  const int horizon = policy.horizon();
  const auto pairs = static_cast<std::uint64_t>(model.num_pairs());
  std::uint64_t count = 1;
  for (int k = 0; k <= horizon; ++k) {
    if (count > kMaxEnumeratedPaths / pairs + 1) {
      count = kMaxEnumeratedPaths + 1;
      break;
    }
    count *= pairs;
  }
  if (count > kMaxEnumeratedPaths) {
    throw std::invalid_argument(
        fmt::format("enumerate_paths: |X|^(K+1) exceeds {} paths; exhaustive oracles are for small instances",
                    kMaxEnumeratedPaths));
  }
  Path path(horizon + 1);
  // Depth-first over positive-probability extensions.
  std::function<void(int, double)> extend = [&](int k, double prob) {
    if (k > horizon) {
      visit(path, prob);
      return;
    }
    const auto [s_prev, u_prev] = path[k - 1];
    for (int s = 0; s < model.num_states(); ++s) {
      const double t = model.kernel(u_prev)(s_prev, s);
      if (t <= 0.0) continue;
      for (int u = 0; u < model.num_inputs(); ++u) {
        const double phi = policy.at(k)(s, u);
        if (phi <= 0.0) continue;
        path[k] = {s, u};
        extend(k + 1, prob * t * phi);
      }
    }
  };
  const Matrix& nu0 = model.initial_marginal();
  for (int s = 0; s < model.num_states(); ++s) {
    for (int u = 0; u < model.num_inputs(); ++u) {
      if (nu0(s, u) <= 0.0) continue;
      path[0] = {s, u};
      extend(1, nu0(s, u));
    }
  }
}

double exhaustive_relative_entropy(const KlqModel& model, const PolicySequence& policy) {
  double total = 0.0;
  enumerate_paths(model, policy, [&](const Path& path, double prob) {
    double nominal = model.initial_marginal()(path[0].state, path[0].input);
    for (std::size_t k = 1; k < path.size(); ++k) {
      nominal *= model.kernel(path[k - 1].input)(path[k - 1].state, path[k].state) *
                 model.nominal_policy(static_cast<int>(k))(path[k].state, path[k].input);
    }
    if (nominal <= 0.0) throw AbsoluteContinuityError("policy path has zero nominal probability");
    total += prob * (std::log(prob) - std::log(nominal));
  });
  return total;
}

}  // namespace klq
