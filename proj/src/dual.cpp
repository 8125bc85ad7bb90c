#include "klq/dual.hpp"

#include "klq/diagnostics.hpp"

#include <fmt/format.h>

#include <cmath>
#include <deque>
#include <limits>

namespace klq {

namespace {

// Max-stabilised log sum_u phi0(u|s) exp(a(s,u)), restricted to the support of phi0.
Vector log_mix(const Matrix& nominal, const Matrix& exponents) {
  const Eigen::Index ns = nominal.rows();
  Vector out(ns);
  for (Eigen::Index s = 0; s < ns; ++s) {
    double top = -std::numeric_limits<double>::infinity();
    for (Eigen::Index u = 0; u < nominal.cols(); ++u) {
      if (nominal(s, u) > 0.0) top = std::max(top, exponents(s, u));
    }
    double sum = 0.0;
    for (Eigen::Index u = 0; u < nominal.cols(); ++u) {
      if (nominal(s, u) > 0.0) sum += nominal(s, u) * std::exp(exponents(s, u) - top);
    }
    out(s) = top + std::log(sum);
  }
  return out;
}

void check_lambda(const KlqProblem& problem, const Vector& lambda) {
  if (lambda.size() != problem.basis().size()) {
    throw std::invalid_argument(
        fmt::format("lambda has {} entries, basis has {}", lambda.size(), problem.basis().size()));
  }
}

}  // namespace

KlqProblem::KlqProblem(KlqModel model, Basis basis, Vector reference, double kappa)
    : model_(std::move(model)), basis_(std::move(basis)), reference_(std::move(reference)), kappa_(kappa) {
  if (!(kappa_ > 0.0) || !std::isfinite(kappa_)) throw std::invalid_argument("kappa must be positive and finite");
  if (basis_.horizon() != model_.horizon()) {
    throw std::invalid_argument(
        fmt::format("basis horizon {} != model horizon {}", basis_.horizon(), model_.horizon()));
  }
  transformed_ = transform_reference(basis_, reference_);
}

KlqProblem KlqProblem::with_initial_marginal(Matrix initial_marginal) const {
  return KlqProblem(model_.with_initial_marginal(std::move(initial_marginal)), basis_, reference_, kappa_);
}

KlqProblem KlqProblem::with_kappa(double kappa) const { return KlqProblem(model_, basis_, reference_, kappa); }

Vector tilt_operator(const KlqModel& model, int k, double lambda_check, const Vector& f) {
  const Matrix exponents = model.expected_next(f) + lambda_check * model.output();
  return log_mix(model.nominal_policy(k), exponents);
}

BackwardMultipliers backward_recursion(const KlqModel& model, const Basis& basis, const Vector& lambda) {
  const int horizon = model.horizon();
  if (basis.horizon() != horizon) throw std::invalid_argument("basis horizon does not match model horizon");
  const Vector lambda_check = basis.expand(lambda);
  BackwardMultipliers g;
  g.values = Matrix::Zero(horizon + 1, model.num_states());
  Vector next = Vector::Zero(model.num_states());
  for (int k = horizon; k >= 1; --k) {
    next = tilt_operator(model, k, lambda_check(k - 1), next);
    g.values.row(k - 1) = next.transpose();
  }
  return g;
}

Matrix aggregate_g(const KlqModel& model, const Vector& g) { return model.expected_next(g); }

double dual_value(const KlqProblem& problem, const Vector& lambda) {
  check_lambda(problem, lambda);
  const auto g = backward_recursion(problem.model(), problem.basis(), lambda);
  const Matrix first = aggregate_g(problem.model(), g.at(1));
  return lambda.dot(problem.transformed_reference()) - lambda.squaredNorm() / (2.0 * problem.kappa()) -
         problem.model().initial_marginal().cwiseProduct(first).sum();
}

double dual_functional_general(const KlqProblem& problem, const Vector& lambda, const BackwardMultipliers& g) {
  check_lambda(problem, lambda);
  const auto& model = problem.model();
  const int horizon = model.horizon();
  if (g.values.rows() != horizon + 1 || g.values.cols() != model.num_states()) {
    throw std::invalid_argument(fmt::format("g has shape {}x{}, expected {}x{}", g.values.rows(), g.values.cols(),
                                            horizon + 1, model.num_states()));
  }
  if (g.values.row(horizon).cwiseAbs().maxCoeff() != 0.0) {
    throw std::invalid_argument("g_{K+1} must be identically zero");
  }
  const Vector lambda_check = problem.basis().expand(lambda);
  double value = lambda.dot(problem.transformed_reference()) - lambda.squaredNorm() / (2.0 * problem.kappa()) -
                 model.initial_marginal().cwiseProduct(aggregate_g(model, g.at(1))).sum();
  for (int k = 1; k <= horizon; ++k) {
    const Vector slack = g.at(k) - tilt_operator(model, k, lambda_check(k - 1), g.at(k + 1));
    value += slack.minCoeff();
  }
  return value;
}

PolicySequence policy_from_multipliers(const KlqModel& model, const Basis& basis, const Vector& lambda,
                                       const BackwardMultipliers& g) {
  const int horizon = model.horizon();
  const Vector lambda_check = basis.expand(lambda);
  PolicySequence policy;
  policy.steps.reserve(horizon);
  for (int k = 1; k <= horizon; ++k) {
    const Matrix exponents = model.expected_next(g.at(k + 1)) + lambda_check(k - 1) * model.output();
    const Vector gk = g.at(k);
    const Matrix& nominal = model.nominal_policy(k);
    Matrix phi = Matrix::Zero(model.num_states(), model.num_inputs());
    for (int s = 0; s < model.num_states(); ++s) {
      for (int u = 0; u < model.num_inputs(); ++u) {
        if (nominal(s, u) > 0.0) phi(s, u) = nominal(s, u) * std::exp(exponents(s, u) - gk(s));
      }
      const double sum = phi.row(s).sum();
      if (!(std::abs(sum - 1.0) <= 1e-6)) {
        throw NumericalError(fmt::format(
            "policy row (k={}, s={}) sums to {:.12g}; g is inconsistent with lambda", k, s, sum));
      }
      // Round-off in g at large |lambda_check| compounds over long horizons.
      phi.row(s) /= sum;
    }
    policy.steps.push_back(std::move(phi));
  }
  return policy;
}

DualIterate evaluate_dual(const KlqProblem& problem, const Vector& lambda) {
  check_lambda(problem, lambda);
  const auto& model = problem.model();
  DualIterate it;
  it.lambda = lambda;
  it.lambda_check = problem.basis().expand(lambda);
  it.g = backward_recursion(model, problem.basis(), lambda);
  it.value = lambda.dot(problem.transformed_reference()) - lambda.squaredNorm() / (2.0 * problem.kappa()) -
             model.initial_marginal().cwiseProduct(aggregate_g(model, it.g.at(1))).sum();
  it.policy = policy_from_multipliers(model, problem.basis(), lambda, it.g);
  it.marginals = propagate_marginals(model, it.policy);
  it.output_means = output_trajectory(it.marginals, model.output());
  it.gradient = problem.transformed_reference() - lambda / problem.kappa() -
                problem.basis().weights() * it.output_means;
  if (!std::isfinite(it.value) || !it.gradient.allFinite()) {
    throw NumericalError("dual value or gradient is not finite");
  }
  return it;
}

Vector dual_gradient(const KlqProblem& problem, const Vector& lambda) {
  return evaluate_dual(problem, lambda).gradient;
}

double golden_section_search(const std::function<double(double)>& f, double lo, double hi, double tol) {
  if (!(lo < hi)) throw std::invalid_argument("golden_section_search: need lo < hi");
  if (!(tol > 0.0)) throw std::invalid_argument("golden_section_search: need tol > 0");
  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = lo;
  double b = hi;
  double x1 = b - inv_phi * (b - a);
  double x2 = a + inv_phi * (b - a);
  double f1 = f(x1);
  double f2 = f(x2);
  while (b - a > tol) {
    if (f1 < f2) {
      a = x1;
      x1 = x2;
      f1 = f2;
      x2 = a + inv_phi * (b - a);
      f2 = f(x2);
    } else {
      b = x2;
      x2 = x1;
      f2 = f1;
      x1 = b - inv_phi * (b - a);
      f1 = f(x1);
    }
  }
  return 0.5 * (a + b);
}

namespace {

struct AscentResult {
  DualIterate iterate;
  int iterations = 0;
  bool converged = false;
  std::string message;
};

AscentResult gradient_ascent(const KlqProblem& problem, const SolverOptions& options, double grad_tol) {
  const double growth = options.bracket_growth > 1.0 ? options.bracket_growth : 2.0;
  AscentResult res;
  DualIterate& it = res.iterate;
  it = evaluate_dual(problem, Vector::Zero(problem.basis().size()));
  double step = 1.0 / problem.kappa();
  int iter = 0;
  for (; iter < options.max_iters; ++iter) {
    if (it.gradient.cwiseAbs().maxCoeff() <= grad_tol) {
      res.converged = true;
      break;
    }
    const Vector direction = it.gradient;
    const Vector base = it.lambda;
    auto along = [&](double t) { return dual_value(problem, base + t * direction); };

    // Find an improving step, shrinking from the previous accepted length.
    double mid = step;
    double f_mid = along(mid);
    while (!(f_mid > it.value) && mid > 1e-300) {
      mid /= growth;
      f_mid = along(mid);
    }
    if (!(f_mid > it.value)) {
      // Value differences are at round-off; fall back to the directional
      // derivative and take the longest step that is still uphill and
      // shrinks the gradient.
      bool moved = false;
      for (double t = step; t > 1e-300; t /= growth) {
        DualIterate trial = evaluate_dual(problem, base + t * direction);
        if (trial.gradient.dot(direction) >= 0.0 &&
            trial.gradient.cwiseAbs().maxCoeff() < it.gradient.cwiseAbs().maxCoeff()) {
          step = t;
          it = std::move(trial);
          moved = true;
          break;
        }
      }
      if (!moved) {
        res.message = "line search found no ascent along the gradient";
        break;
      }
      continue;
    }
    double lo = 0.0;
    double hi = mid * growth;
    double f_hi = along(hi);
    while (f_hi > f_mid) {
      lo = mid;
      mid = hi;
      f_mid = f_hi;
      hi *= growth;
      f_hi = along(hi);
      if (!std::isfinite(f_hi)) throw NumericalError("dual value became non-finite during bracketing");
    }
    double t = golden_section_search(along, lo, hi, options.line_search_tol * (hi - lo));
    if (!(along(t) >= f_mid)) t = mid;
    step = t;
    it = evaluate_dual(problem, base + t * direction);
  }
  res.iterations = iter;
  return res;
}

// Maximises the concave dual with L-BFGS directions. The first step and
// every memory reset fall back to the scaled gradient lambda += grad / kappa,
// which is the exact maximiser of the quadratic term alone.
AscentResult lbfgs_ascent(const KlqProblem& problem, const SolverOptions& options, double grad_tol) {
  const int memory = std::max(1, options.memory);
  AscentResult res;
  DualIterate& it = res.iterate;
  it = evaluate_dual(problem, Vector::Zero(problem.basis().size()));
  std::deque<std::pair<Vector, Vector>> history;  // (s, y) with y = grad_old - grad_new
  double initial_scale = 1.0 / problem.kappa();
  int iter = 0;
  for (; iter < options.max_iters; ++iter) {
    if (it.gradient.cwiseAbs().maxCoeff() <= grad_tol) {
      res.converged = true;
      break;
    }
    // Two-loop recursion on the negated (convex) objective.
    Vector q = it.gradient;
    std::vector<double> alpha(history.size());
    for (std::size_t i = history.size(); i-- > 0;) {
      const auto& [s, y] = history[i];
      alpha[i] = s.dot(q) / s.dot(y);
      q -= alpha[i] * y;
    }
    double scale = initial_scale;
    if (!history.empty()) {
      const auto& [s, y] = history.back();
      scale = s.dot(y) / y.squaredNorm();
    }
    Vector direction = scale * q;
    for (std::size_t i = 0; i < history.size(); ++i) {
      const auto& [s, y] = history[i];
      const double beta = y.dot(direction) / s.dot(y);
      direction += (alpha[i] - beta) * s;
    }
    double slope = direction.dot(it.gradient);
    if (!(slope > 0.0)) {
      history.clear();
      direction = initial_scale * it.gradient;
      slope = direction.dot(it.gradient);
    }

    // Backtracking with an Armijo condition on the ascent.
    double t = 1.0;
    DualIterate next;
    bool accepted = false;
    for (int trial = 0; trial < 60; ++trial) {
      next = evaluate_dual(problem, it.lambda + t * direction);
      // Far from the optimum the Armijo test decides; near it the value
      // differences drown in round-off and the approximate Wolfe test on the
      // directional derivative takes over.
      const bool armijo = next.value >= it.value + 1e-4 * t * slope;
      const bool flat = std::abs(next.value - it.value) <= 1e-12 * (1.0 + std::abs(it.value));
      const bool approx_wolfe = flat && direction.dot(next.gradient) >= (2e-4 - 1.0) * slope;
      if (armijo || approx_wolfe) {
        accepted = true;
        break;
      }
      t *= 0.5;
    }
    if (!accepted) {
      if (!history.empty()) {
        history.clear();
        continue;
      }
      res.message = "line search found no ascent along the gradient";
      break;
    }
    Vector s = next.lambda - it.lambda;
    Vector y = it.gradient - next.gradient;
    if (s.dot(y) > 1e-12 * s.norm() * y.norm()) {
      history.emplace_back(std::move(s), std::move(y));
      if (static_cast<int>(history.size()) > memory) history.pop_front();
    }
    it = std::move(next);
  }
  res.iterations = iter;
  return res;
}

}  // namespace

Solution solve(const KlqProblem& problem, const SolverOptions& options) {
  const double kappa = problem.kappa();
  const double grad_tol = options.grad_tol > 0.0
                              ? options.grad_tol
                              : 1e-8 * (1.0 + problem.transformed_reference().cwiseAbs().maxCoeff());
  AscentResult res = options.method == AscentMethod::Lbfgs ? lbfgs_ascent(problem, options, grad_tol)
                                                           : gradient_ascent(problem, options, grad_tol);
  DualIterate& it = res.iterate;
  const int iter = res.iterations;
  Solution sol;
  sol.converged = res.converged;
  sol.message = res.message;
  if (!sol.converged && sol.message.empty()) {
    sol.message = fmt::format("no convergence after {} iterations (||grad||_inf = {:.3e})", iter,
                              it.gradient.cwiseAbs().maxCoeff());
  }
  if (sol.converged) sol.message = "converged";

  sol.iterations = iter;
  sol.lambda = it.lambda;
  sol.gamma = -it.lambda / kappa;
  sol.lambda_check = it.lambda_check;
  sol.gradient = it.gradient;
  sol.dual_value = it.value;
  const PrimalValues primal = primal_value(problem, it);
  sol.relative_entropy = primal.relative_entropy;
  sol.primal_value = primal.relaxed;
  sol.primal_full = primal.full;
  sol.duality_gap = sol.primal_value - sol.dual_value;
  sol.g = std::move(it.g);
  sol.policy = std::move(it.policy);
  sol.marginals = std::move(it.marginals);
  sol.output_trajectory = std::move(it.output_means);
  return sol;
}

DirectSolution direct_recursion(const KlqModel& model, const Vector& step_multipliers) {
  const int horizon = model.horizon();
  const int ns = model.num_states();
  const int nu = model.num_inputs();
  if (step_multipliers.size() != horizon) throw std::invalid_argument("need one multiplier per step");
  DirectSolution out;
  out.g.values = Matrix::Zero(horizon + 1, ns);
  // Tilted exponents are kept per step so the policy uses exactly the
  // quantities the recursion normalised.
  std::vector<Matrix> exponents(horizon);
  for (int k = horizon; k >= 1; --k) {
    Matrix a(ns, nu);
    for (int s = 0; s < ns; ++s) {
      for (int u = 0; u < nu; ++u) {
        double next = 0.0;
        for (int s2 = 0; s2 < ns; ++s2) next += model.kernel(u)(s, s2) * out.g.values(k, s2);
        a(s, u) = next + step_multipliers(k - 1) * model.output()(s, u);
      }
    }
    const Matrix& nominal = model.nominal_policy(k);
    for (int s = 0; s < ns; ++s) {
      double top = -std::numeric_limits<double>::infinity();
      for (int u = 0; u < nu; ++u) {
        if (nominal(s, u) > 0.0) top = std::max(top, a(s, u));
      }
      double sum = 0.0;
      for (int u = 0; u < nu; ++u) {
        if (nominal(s, u) > 0.0) sum += nominal(s, u) * std::exp(a(s, u) - top);
      }
      out.g.values(k - 1, s) = top + std::log(sum);
    }
    exponents[k - 1] = std::move(a);
  }
  for (int k = 1; k <= horizon; ++k) {
    Matrix phi = Matrix::Zero(ns, nu);
    const Matrix& nominal = model.nominal_policy(k);
    for (int s = 0; s < ns; ++s) {
      for (int u = 0; u < nu; ++u) {
        if (nominal(s, u) > 0.0) phi(s, u) = nominal(s, u) * std::exp(exponents[k - 1](s, u) - out.g.values(k - 1, s));
      }
      phi.row(s) /= phi.row(s).sum();
    }
    out.policy.steps.push_back(std::move(phi));
  }
  // Forward pass with dense kernels.
  out.marginals.steps.push_back(model.initial_marginal());
  for (int k = 1; k <= horizon; ++k) {
    const Matrix& prev = out.marginals.steps.back();
    Vector states = Vector::Zero(ns);
    for (int s = 0; s < ns; ++s) {
      for (int u = 0; u < nu; ++u) {
        if (prev(s, u) == 0.0) continue;
        for (int s2 = 0; s2 < ns; ++s2) states(s2) += prev(s, u) * model.kernel(u)(s, s2);
      }
    }
    Matrix next(ns, nu);
    for (int s = 0; s < ns; ++s) {
      for (int u = 0; u < nu; ++u) next(s, u) = states(s) * out.policy.steps[k - 1](s, u);
    }
    out.marginals.steps.push_back(std::move(next));
  }
  return out;
}

}  // namespace klq
