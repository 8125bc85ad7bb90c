#include "klq/tcl.hpp"

#include "klq/diagnostics.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <cmath>

namespace klq::tcl {
namespace {

TclParams deterministic_params() {
  TclParams p;
  p.kernel_noise = false;
  p.horizon = 60;
  return p;
}

TEST(Tcl, TemperatureUpdateSigns) {
  const TclParams p;
  EXPECT_DOUBLE_EQ(temperature_update(p, p.ambient, kOff), p.ambient);
  for (double theta : {-5.0, 0.0, 2.0, 4.0, 6.0, 19.0}) {
    EXPECT_LT(temperature_update(p, theta, kOn), theta);
    EXPECT_GT(temperature_update(p, theta, kOff), theta);
  }
}

TEST(Tcl, DeterministicKernelRowsHaveSingleOne) {
  const auto m = build_tcl_model(deterministic_params());
  for (const auto& t : m.kernels()) {
    for (int s = 0; s < m.num_states(); ++s) {
      EXPECT_EQ(t.row(s).maxCoeff(), 1.0);
      EXPECT_EQ((t.row(s).array() > 0.0).count(), 1);
    }
  }
}

TEST(Tcl, DeterministicKernelCarriesMode) {
  const auto p = deterministic_params();
  const auto m = build_tcl_model(p);
  for (int b = 0; b < p.num_bins; ++b) {
    for (int u = 0; u < 2; ++u) {
      const int s = state_index(b, kOff);
      EXPECT_EQ(m.kernel(u)(s, state_index(next_bin(p, b, u), u)), 1.0);
    }
  }
}

TEST(Tcl, NoisyKernelSplitsAcrossNeighbours) {
  const TclParams p;
  const auto m = build_tcl_model(p);
  for (const auto& t : m.kernels()) {
    for (int s = 0; s < m.num_states(); ++s) {
      EXPECT_NEAR(t.row(s).sum(), 1.0, 1e-12);
      EXPECT_LE((t.row(s).array() > 0.0).count(), 2);
    }
  }
}

TEST(Tcl, ThermostatRules) {
  TclParams p;
  p.eps = 0.05;
  const Matrix phi = nominal_thermostat_table(p);
  for (int b = 0; b < p.num_bins; ++b) {
    const double theta = bin_center(p, b);
    if (theta > p.theta_max) {
      EXPECT_DOUBLE_EQ(phi(state_index(b, kOff), kOn), 1.0 - p.eps);
    }
    if (theta < p.theta_min) {
      EXPECT_DOUBLE_EQ(phi(state_index(b, kOn), kOff), 1.0 - p.eps);
    }
    if (theta > p.theta_min && theta < p.theta_max) {
      EXPECT_DOUBLE_EQ(phi(state_index(b, kOn), kOn), 1.0 - p.eps);
      EXPECT_DOUBLE_EQ(phi(state_index(b, kOff), kOff), 1.0 - p.eps);
    }
  }
  EXPECT_GT(phi.minCoeff(), 0.0);
  EXPECT_LE((phi.rowwise().sum().array() - 1.0).abs().maxCoeff(), 1e-15);
}

TEST(Tcl, ModelValidatesForSeveralParameterSets) {
  for (bool noise : {false, true}) {
    for (double eps : {0.01, 0.05, 0.2}) {
      TclParams p;
      p.kernel_noise = noise;
      p.eps = eps;
      p.horizon = 30;
      const auto m = build_tcl_model(p);
      const auto report = validate_model(m);
      EXPECT_TRUE(report.ok()) << (report.ok() ? "" : report.violations.front());
      const Vector power = nominal_power(m);
      EXPECT_GE(power.minCoeff(), 0.0);
      EXPECT_LE(power.maxCoeff(), 1.0);
    }
  }
}

TEST(Tcl, StationaryDutyMatchesEnergyBalance) {
  const TclParams p;
  const auto m = build_tcl_model(p);
  const double duty = mean_output(m.initial_marginal(), m.output());
  EXPECT_NEAR(duty, energy_balance_duty_cycle(p), 0.05);
  const Vector power = nominal_power(m);
  EXPECT_LE((power.array() - duty).abs().maxCoeff(), 1e-9);
  EXPECT_NEAR(nominal_headroom(m), std::min(duty, 1.0 - duty), 1e-12);
}

TEST(Tcl, LongRunPropagationReachesEnergyBalance) {
  TclParams p;
  p.horizon = 5000;
  const auto base = build_tcl_model(p);
  const auto m = base.with_initial_marginal(point_mass_marginal(base, 0, kOff));
  const Vector power = nominal_power(m);
  EXPECT_NEAR(power.tail(500).mean(), energy_balance_duty_cycle(p), 0.05);
}

TEST(Tcl, CoarseGridIsRejected) {
  TclParams p = deterministic_params();
  p.num_bins = 8;
  EXPECT_THROW(build_tcl_model(p), std::invalid_argument);
}

TEST(Tcl, InvalidParamsRejected) {
  TclParams p;
  p.eps = 0.5;
  EXPECT_THROW(validate_params(p), std::invalid_argument);
  p = TclParams{};
  p.theta_min = 7.0;
  EXPECT_THROW(validate_params(p), std::invalid_argument);
  p = TclParams{};
  p.alpha = 1.0;
  EXPECT_THROW(validate_params(p), std::invalid_argument);
}

TEST(Tcl, TrackingProblemSubtractsDeviation) {
  const auto m2 = testing::m2_model();
  const auto problem = build_tracking_problem(m2, Vector::Constant(2, 0.1), 1.0, degenerate_basis(2));
  EXPECT_NEAR(problem.reference()(0), 0.4, 1e-15);
  EXPECT_NEAR(problem.reference()(1), 0.4, 1e-15);
  EXPECT_THROW(build_tracking_problem(m2, Vector::Zero(3), 1.0, degenerate_basis(2)), std::invalid_argument);
}

TEST(Tcl, ZeroDeviationStaysNominal) {
  TclParams p;
  p.horizon = 60;
  const auto m = build_tcl_model(p);
  const auto sol = solve(build_tracking_problem(m, Vector::Zero(60), 150.0, degenerate_basis(60)));
  ASSERT_TRUE(sol.converged);
  EXPECT_LE(sol.relative_entropy, 1e-12);
  EXPECT_LE((sol.output_trajectory - nominal_power(m)).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(Tcl, PointMassesSpanDeadband) {
  const TclParams p;
  const auto m = build_tcl_model(p);
  const auto inits = evenly_spaced_point_masses(p, m);
  ASSERT_EQ(inits.size(), 6u);
  for (const auto& nu : inits) {
    EXPECT_NEAR(nu.sum(), 1.0, 1e-15);
    int state = -1;
    for (int s = 0; s < m.num_states(); ++s) {
      if (nu.row(s).sum() > 0.0) state = s;
    }
    const double theta = bin_center(p, bin_of(state));
    EXPECT_GT(theta, p.theta_min);
    EXPECT_LT(theta, p.theta_max);
  }
}

TEST(Tcl, PowerDeviationInvertsTarget) {
  TclParams p;
  p.horizon = 20;
  const auto m = build_tcl_model(p);
  const Vector dev = sinusoid(20, 0.1, 10.0);
  const auto problem = build_tracking_problem(m, dev, 1.0, degenerate_basis(20));
  EXPECT_LE((power_deviation(m, problem.reference()) - dev).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_NEAR(dev(4), 0.0, 1e-15);
  EXPECT_NEAR(dev(1), 0.1 * std::sin(2.0 * M_PI * 2.0 / 10.0), 1e-15);
}

}  // namespace
}  // namespace klq::tcl
