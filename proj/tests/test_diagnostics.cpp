#include "klq/diagnostics.hpp"

#include "test_support.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <random>

namespace klq {
namespace {

using testing::m2_model;
using testing::m2_problem;

Vector lambda10() {
  Vector l(2);
  l << 1.0, 0.0;
  return l;
}

// Every element of X^{K+1} for a model with K = 2 on 2 x 2 (64 paths).
std::vector<Path> all_m2_paths() {
  std::vector<Path> out;
  for (int code = 0; code < 64; ++code) {
    Path p;
    int c = code;
    for (int k = 0; k < 3; ++k) {
      p.push_back({(c >> 1) & 1, c & 1});
      c >>= 2;
    }
    out.push_back(p);
  }
  return out;
}

// Nominal probability of a path conditioned on x_0.
double conditional_nominal(const KlqModel& m, const Path& p) {
  double prob = 1.0;
  for (std::size_t k = 1; k < p.size(); ++k) {
    prob *= m.kernel(p[k - 1].input)(p[k - 1].state, p[k].state) * m.nominal_policy(static_cast<int>(k))(p[k].state, p[k].input);
  }
  return prob;
}

TEST(LogLikelihood, ZeroAtOrigin) {
  const auto m = m2_model();
  const auto b = degenerate_basis(2);
  const auto g = backward_recursion(m, b, Vector::Zero(2));
  for (const auto& path : all_m2_paths()) {
    if (conditional_nominal(m, path) == 0.0) continue;
    EXPECT_NEAR(log_likelihood_ratio(m, b, Vector::Zero(2), g, path).llr, 0.0, 1e-15);
  }
}

TEST(LogLikelihood, ClosedFormMatchesChainRuleOnAllM2Paths) {
  const auto m = m2_model();
  const auto b = degenerate_basis(2);
  const auto g = backward_recursion(m, b, lambda10());
  const auto phi = policy_from_multipliers(m, b, lambda10(), g);
  int supported = 0;
  for (const auto& path : all_m2_paths()) {
    if (conditional_nominal(m, path) == 0.0) {
      EXPECT_THROW(log_likelihood_ratio(m, b, lambda10(), g, path), AbsoluteContinuityError);
      continue;
    }
    ++supported;
    EXPECT_NEAR(log_likelihood_ratio(m, b, lambda10(), g, path).llr, chain_rule_llr(m, phi, path), 1e-12);
  }
  EXPECT_EQ(supported, 16);
}

TEST(LogLikelihood, IncrementsHaveZeroMean) {
  const auto m = m2_model();
  const auto b = degenerate_basis(2);
  const auto g = backward_recursion(m, b, lambda10());
  const auto phi = policy_from_multipliers(m, b, lambda10(), g);
  std::vector<double> mean(2, 0.0);
  double total = 0.0;
  enumerate_paths(m, phi, [&](const Path& path, double prob) {
    const auto l = log_likelihood_ratio(m, b, lambda10(), g, path);
    for (int k = 0; k < 2; ++k) mean[k] += prob * l.deltas[k];
    total += prob;
  });
  EXPECT_NEAR(total, 1.0, 1e-15);
  for (double v : mean) EXPECT_NEAR(v, 0.0, 1e-14);
}

TEST(LogLikelihood, RandomModelsAgreeWithChainRule) {
  std::mt19937_64 rng(51);
  testing::RandomModelSpec spec;
  spec.max_states = 3;
  spec.max_horizon = 4;
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = testing::random_problem(rng, spec);
    const Vector lambda = testing::random_vector(rng, p.basis().size());
    const auto g = backward_recursion(p.model(), p.basis(), lambda);
    const auto phi = policy_from_multipliers(p.model(), p.basis(), lambda, g);
    enumerate_paths(p.model(), phi, [&](const Path& path, double) {
      EXPECT_NEAR(log_likelihood_ratio(p.model(), p.basis(), lambda, g, path).llr,
                  chain_rule_llr(p.model(), phi, path), 1e-10);
    });
  }
}

TEST(RelativeEntropy, ThreeRoutesAgreeOnM2) {
  const auto m = m2_model();
  const auto b = degenerate_basis(2);
  const auto it = evaluate_dual(m2_problem(), lambda10());
  const double closed = relative_entropy(m, b, lambda10());
  EXPECT_NEAR(closed, relative_entropy_rate_sum(m, it.policy, it.marginals), 1e-12);
  EXPECT_NEAR(closed, exhaustive_relative_entropy(m, it.policy), 1e-12);
  EXPECT_GT(closed, 0.0);
}

TEST(RelativeEntropy, ZeroAtOrigin) {
  const auto m = m2_model();
  EXPECT_EQ(relative_entropy(m, degenerate_basis(2), Vector::Zero(2)), 0.0);
}

TEST(RelativeEntropy, NonNegativeAndConsistentOnRandomModels) {
  std::mt19937_64 rng(52);
  for (int trial = 0; trial < 100; ++trial) {
    const auto p = testing::random_problem(rng);
    const Vector lambda = testing::random_vector(rng, p.basis().size());
    const double d = relative_entropy(p.model(), p.basis(), lambda);
    EXPECT_GE(d, -1e-12);
    const auto it = evaluate_dual(p, lambda);
    EXPECT_NEAR(d, relative_entropy_rate_sum(p.model(), it.policy, it.marginals), 1e-10 * (1.0 + d));
  }
}

TEST(RelativeEntropy, EnumerationIsGated) {
  std::mt19937_64 rng(53);
  testing::RandomModelSpec spec;
  spec.max_states = 6;
  spec.max_inputs = 3;
  spec.max_horizon = 8;
  auto m = testing::random_model(rng, spec);
  while (std::pow(static_cast<double>(m.num_pairs()), m.horizon() + 1) <= 1e6) m = testing::random_model(rng, spec);
  EXPECT_THROW(exhaustive_relative_entropy(m, nominal_policy_sequence(m)), std::invalid_argument);
}

TEST(EnumeratePaths, ProbabilitiesMatchNominalLaw) {
  const auto m = m2_model();
  std::map<std::vector<int>, double> seen;
  double total = 0.0;
  enumerate_paths(m, nominal_policy_sequence(m), [&](const Path& path, double prob) {
    std::vector<int> key;
    for (const auto& x : path) key.push_back(x.state * 2 + x.input);
    seen[key] = prob;
    total += prob;
  });
  EXPECT_EQ(seen.size(), 8u);
  EXPECT_NEAR(total, 1.0, 1e-15);
  for (const auto& [key, prob] : seen) EXPECT_NEAR(prob, 0.125, 1e-15);
}

TEST(Primal, M2AtOrigin) {
  const auto v = primal_value(m2_problem(), Vector::Zero(2));
  EXPECT_EQ(v.relative_entropy, 0.0);
  EXPECT_NEAR(v.full, 0.04, 1e-15);
  EXPECT_NEAR(v.relaxed, 0.04, 1e-15);
}

TEST(Primal, WeakDualityOnRandomLambda) {
  std::mt19937_64 rng(54);
  for (int trial = 0; trial < 50; ++trial) {
    const auto p = testing::random_problem(rng);
    for (int point = 0; point < 5; ++point) {
      const Vector lambda = testing::random_vector(rng, p.basis().size(), 2.0);
      EXPECT_GE(primal_value(p, lambda).relaxed - dual_value(p, lambda), -1e-10);
    }
  }
}

TEST(Primal, FullEqualsRelaxedForDegenerateBasis) {
  std::mt19937_64 rng(55);
  const auto m = testing::random_model(rng);
  const KlqProblem p(m, degenerate_basis(m.horizon()), testing::random_vector(rng, m.horizon()), 2.0);
  const auto v = primal_value(p, testing::random_vector(rng, m.horizon()));
  EXPECT_NEAR(v.full, v.relaxed, 1e-12);
}

TEST(Tracking, NominalM2) {
  const auto sol = evaluate_dual(m2_problem(), Vector::Zero(2));
  const auto e = tracking_error(sol.output_means, Vector::Constant(2, 0.7));
  EXPECT_NEAR(e.per_step(0), -0.2, 1e-15);
  EXPECT_NEAR(e.per_step(1), -0.2, 1e-15);
  EXPECT_NEAR(e.rms, 0.2, 1e-15);
  EXPECT_NEAR(e.max_abs, 0.2, 1e-15);
}

TEST(Tracking, PerfectAndNormInequality) {
  Vector r(3);
  r << 0.1, 0.2, 0.9;
  EXPECT_EQ(tracking_error(r, r).rms, 0.0);
  Vector a(3);
  a << 0.0, 0.5, 0.4;
  const auto e = tracking_error(a, r);
  EXPECT_GE(e.rms, 0.0);
  EXPECT_LE(e.rms, e.max_abs);
  EXPECT_THROW(tracking_error(a, Vector::Zero(2)), std::invalid_argument);
}

}  // namespace
}  // namespace klq
