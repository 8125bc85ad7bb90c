#pragma once

#include "klq/dual.hpp"

#include <vector>

namespace klq::tcl {

/// Discretised refrigerator: temperature bins x {off, on}.
///
/// The MDP state is (bin, mode carried from the previous step) and the input
/// is the power mode applied during the step, so a hysteresis thermostat is a
/// Markov policy. The temperature grid covers the deadband widened by
/// grid_margin on both sides.
struct TclParams {
  double alpha = 0.0035;       // thermal leakage per step
  double rho = 0.14;           // cooling per step when on, degC
  double ambient = 20.0;       // degC
  double theta_min = 2.0;      // deadband, degC
  double theta_max = 6.0;
  double grid_margin = 0.2;    // degC added below and above the deadband
  int num_bins = 40;
  double step_seconds = 60.0;
  double eps = 0.05;           // nominal switching randomisation
  int horizon = 360;
  bool kernel_noise = true;    // split each transition over the two bracketing bins
};

void validate_params(const TclParams& params);

inline constexpr int kOff = 0;
inline constexpr int kOn = 1;

inline int state_index(int bin, int mode) { return 2 * bin + mode; }
inline int bin_of(int state) { return state / 2; }
inline int mode_of(int state) { return state % 2; }

double bin_width(const TclParams& params);
double bin_center(const TclParams& params, int bin);

/// theta + alpha (ambient - theta) - rho * mode.
double temperature_update(const TclParams& params, double theta, int mode);

/// Nearest bin to the updated temperature of a bin centre (clamped to the grid).
int next_bin(const TclParams& params, int bin, int mode);

/// Time-homogeneous thermostat table phi0(u | (bin, mode)).
Matrix nominal_thermostat_table(const TclParams& params);

/// The thermostat table repeated for k = 1..K.
PolicySequence nominal_thermostat_policy(const TclParams& params);

/// Stationary marginal of the nominal chain on X (lazy power iteration).
Matrix stationary_marginal(const KlqModel& model);

/// Model with Y(s,u) = u and nu_0 the nominal stationary marginal. Throws
/// std::invalid_argument if the grid is too coarse to resolve the dynamics.
KlqModel build_tcl_model(const TclParams& params);

/// nu_0 = delta_{(bin, mode)} x phi0_0(. | (bin, mode)).
Matrix point_mass_marginal(const KlqModel& model, int bin, int mode);

/// Six point masses: three temperatures evenly spaced across the deadband,
/// each with both modes.
std::vector<Matrix> evenly_spaced_point_masses(const TclParams& params, const KlqModel& model);

/// <nu0_k, Y> for k = 1..K under the nominal policy.
Vector nominal_power(const KlqModel& model);

/// Long-run duty cycle alpha (ambient - theta_mid) / rho.
double energy_balance_duty_cycle(const TclParams& params);

/// min(duty, 1 - duty) of the stationary nominal power.
double nominal_headroom(const KlqModel& model);

/// Converts a power-deviation request into the absolute power target
/// r'_k = <nu0_k, Y> - r_k. Positive deviation (discharge) lowers the target.
KlqProblem build_tracking_problem(const KlqModel& model, const Vector& deviation, double kappa, const Basis& basis);

/// One tracking problem per starting marginal, each measuring the deviation
/// request against the nominal power from its own start.
std::vector<KlqProblem> per_start_tracking_problems(const KlqModel& model, const std::vector<Matrix>& starts,
                                                    const Vector& deviation, double kappa, const Basis& basis);

/// Deviation realised by a power trajectory: <nu0_k, Y> - achieved_k.
Vector power_deviation(const KlqModel& model, const Vector& achieved);

/// A sin(2 pi k / period), k = 1..K.
Vector sinusoid(int horizon, double amplitude, double period_steps);

}  // namespace klq::tcl
