#include "klq/tcl.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <numbers>

namespace klq::tcl {

void validate_params(const TclParams& p) {
  if (!(p.theta_min < p.theta_max)) throw std::invalid_argument("need theta_min < theta_max");
  if (!(p.alpha > 0.0 && p.alpha < 1.0)) throw std::invalid_argument("need 0 < alpha < 1");
  if (!(p.rho > 0.0)) throw std::invalid_argument("need rho > 0");
  if (p.num_bins < 2) throw std::invalid_argument("need num_bins >= 2");
  if (!(p.eps > 0.0 && p.eps < 0.5)) throw std::invalid_argument("need 0 < eps < 1/2");
  if (p.horizon < 1) throw std::invalid_argument("need horizon >= 1");
  if (!(p.grid_margin >= 0.0)) throw std::invalid_argument("need grid_margin >= 0");
  if (!(p.step_seconds > 0.0)) throw std::invalid_argument("need step_seconds > 0");
}

double bin_width(const TclParams& p) {
  return (p.theta_max - p.theta_min + 2.0 * p.grid_margin) / p.num_bins;
}

double bin_center(const TclParams& p, int bin) {
  return p.theta_min - p.grid_margin + (bin + 0.5) * bin_width(p);
}

double temperature_update(const TclParams& p, double theta, int mode) {
  return theta + p.alpha * (p.ambient - theta) - p.rho * mode;
}

namespace {

// Continuous bin coordinate of a temperature: bin b's centre maps to b.
double bin_coordinate(const TclParams& p, double theta) {
  return (theta - (p.theta_min - p.grid_margin)) / bin_width(p) - 0.5;
}

void check_resolution(const TclParams& p) {
  const double half = 0.5 * bin_width(p);
  const double leak = p.alpha * (p.ambient - p.theta_min);
  if (p.rho < half || leak < half) {
    throw std::invalid_argument(fmt::format(
        "temperature grid too coarse: per-step moves (rho={:g}, leakage at theta_min={:g}) must be at least half "
        "a bin ({:g} degC); increase num_bins",
        p.rho, leak, half));
  }
}

}  // namespace

int next_bin(const TclParams& p, int bin, int mode) {
  const double x = bin_coordinate(p, temperature_update(p, bin_center(p, bin), mode));
  return std::clamp(static_cast<int>(std::lround(x)), 0, p.num_bins - 1);
}

Matrix nominal_thermostat_table(const TclParams& p) {
  validate_params(p);
  Matrix phi(2 * p.num_bins, 2);
  for (int b = 0; b < p.num_bins; ++b) {
    const double theta = bin_center(p, b);
    for (int m = 0; m < 2; ++m) {
      int preferred = m;
      if (theta > p.theta_max) preferred = kOn;
      if (theta < p.theta_min) preferred = kOff;
      const int s = state_index(b, m);
      phi(s, preferred) = 1.0 - p.eps;
      phi(s, 1 - preferred) = p.eps;
    }
  }
  return phi;
}

PolicySequence nominal_thermostat_policy(const TclParams& p) {
  PolicySequence out;
  out.steps.assign(p.horizon, nominal_thermostat_table(p));
  return out;
}

Matrix stationary_marginal(const KlqModel& model) {
  const Matrix& phi = model.nominal_policy(model.horizon());
  Matrix nu = Matrix::Constant(model.num_states(), model.num_inputs(), 1.0 / model.num_pairs());
  for (int iter = 0; iter < 200'000; ++iter) {
    const Vector states = model.push_forward(nu);
    const Matrix next = 0.5 * (nu + Matrix(phi.array().colwise() * states.array()));
    const double change = total_variation(next, nu);
    nu = next;
    if (change < 1e-14) break;
  }
  return nu / nu.sum();
}

KlqModel build_tcl_model(const TclParams& p) {
  validate_params(p);
  if (!p.kernel_noise) check_resolution(p);
  const int ns = 2 * p.num_bins;
  std::vector<Matrix> kernels(2, Matrix::Zero(ns, ns));
  for (int b = 0; b < p.num_bins; ++b) {
    for (int u = 0; u < 2; ++u) {
      Matrix& t = kernels[u];
      for (int m = 0; m < 2; ++m) {
        const int s = state_index(b, m);
        if (!p.kernel_noise) {
          t(s, state_index(next_bin(p, b, u), u)) = 1.0;
          continue;
        }
        const double x = bin_coordinate(p, temperature_update(p, bin_center(p, b), u));
        const double clamped = std::clamp(x, 0.0, static_cast<double>(p.num_bins - 1));
        const int lo = static_cast<int>(std::floor(clamped));
        const int hi = std::min(lo + 1, p.num_bins - 1);
        const double frac = clamped - lo;
        t(s, state_index(lo, u)) += 1.0 - frac;
        t(s, state_index(hi, u)) += frac;
      }
    }
  }
  Matrix output(ns, 2);
  output.col(kOff).setZero();
  output.col(kOn).setOnes();
  const Matrix table = nominal_thermostat_table(p);
  std::vector<Matrix> nominal(p.horizon + 1, table);
  KlqModel draft(kernels, nominal, output, Matrix::Constant(ns, 2, 1.0 / (2 * ns)));
  return draft.with_initial_marginal(stationary_marginal(draft));
}

Matrix point_mass_marginal(const KlqModel& model, int bin, int mode) {
  const int s = state_index(bin, mode);
  if (s < 0 || s >= model.num_states()) throw std::out_of_range("point mass outside the grid");
  Matrix nu = Matrix::Zero(model.num_states(), model.num_inputs());
  nu.row(s) = model.nominal_policy(0).row(s);
  return nu;
}

std::vector<Matrix> evenly_spaced_point_masses(const TclParams& p, const KlqModel& model) {
  std::vector<Matrix> out;
  for (int i = 0; i < 3; ++i) {
    const double theta = p.theta_min + (i + 0.5) / 3.0 * (p.theta_max - p.theta_min);
    const int bin = std::clamp(static_cast<int>(std::lround(bin_coordinate(p, theta))), 0, p.num_bins - 1);
    for (int mode = 0; mode < 2; ++mode) out.push_back(point_mass_marginal(model, bin, mode));
  }
  return out;
}

Vector nominal_power(const KlqModel& model) {
  return output_trajectory(propagate_marginals(model, nominal_policy_sequence(model)), model.output());
}

double energy_balance_duty_cycle(const TclParams& p) {
  return p.alpha * (p.ambient - 0.5 * (p.theta_min + p.theta_max)) / p.rho;
}

double nominal_headroom(const KlqModel& model) {
  const double duty = mean_output(stationary_marginal(model), model.output());
  return std::min(duty, 1.0 - duty);
}

KlqProblem build_tracking_problem(const KlqModel& model, const Vector& deviation, double kappa, const Basis& basis) {
  if (deviation.size() != model.horizon()) {
    throw std::invalid_argument(
        fmt::format("deviation reference has {} steps, model horizon is {}", deviation.size(), model.horizon()));
  }
  return KlqProblem(model, basis, nominal_power(model) - deviation, kappa);
}

std::vector<KlqProblem> per_start_tracking_problems(const KlqModel& model, const std::vector<Matrix>& starts,
                                                    const Vector& deviation, double kappa, const Basis& basis) {
  std::vector<KlqProblem> out;
  out.reserve(starts.size());
  for (const auto& start : starts) {
    out.push_back(build_tracking_problem(model.with_initial_marginal(start), deviation, kappa, basis));
  }
  return out;
}

Vector power_deviation(const KlqModel& model, const Vector& achieved) { return nominal_power(model) - achieved; }

Vector sinusoid(int horizon, double amplitude, double period_steps) {
  Vector r(horizon);
  for (int k = 1; k <= horizon; ++k) r(k - 1) = amplitude * std::sin(2.0 * std::numbers::pi * k / period_steps);
  return r;
}

}  // namespace klq::tcl
