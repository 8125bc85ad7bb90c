#pragma once

#include "klq/dual.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace klq {

/// Counter-based uniform variates: the value depends only on
/// (seed, agent, step, draw), so agents can be simulated in any order or on
/// any number of threads with identical results.
double counter_uniform(std::uint64_t seed, std::uint64_t agent, std::uint64_t step, std::uint64_t draw);

/// A finite population of agents; each agent's X-index is s * |U| + u.
struct FleetState {
  std::vector<int> pairs;
  int time = 0;  // global step counter driving the random streams
  std::uint64_t seed = 0;
  int num_states = 0;
  int num_inputs = 0;

  int size() const { return static_cast<int>(pairs.size()); }
  /// nu^N(x) = (1/N) sum_i 1{X^i = x}, accumulated in agent order.
  Matrix empirical() const;
};

/// Draws each agent's X_0 independently from the marginal.
FleetState make_fleet(const Matrix& marginal, int size, std::uint64_t seed);

/// Advances every agent one step: S' ~ T_u(s, .), then U' ~ policy(. | S').
void step_fleet(FleetState& fleet, const KlqModel& model, const Matrix& policy_next, int workers = 1);

struct FleetRun {
  std::vector<Matrix> empirical;         // k = 0..K
  Vector mean_output;                    // <nu^N_k, Y>, k = 1..K
  std::vector<std::vector<int>> paths;   // per agent X-indices x_0..x_K, when recorded
};

/// Simulates size agents from model.initial_marginal() under policy.
FleetRun simulate_fleet(const KlqModel& model, const PolicySequence& policy, int size, std::uint64_t seed,
                        int workers = 1, bool record_paths = false);

struct MonteCarloGradient {
  Vector gradient;
  Vector standard_error;
  Vector transformed_mean;  // sample mean of Y_hat_n over trajectories
};

/// r_hat - lambda / kappa - E[Y_hat(X)] with the expectation replaced by a
/// sample mean over size trajectories drawn from p^lambda.
MonteCarloGradient monte_carlo_gradient(const KlqProblem& problem, const Vector& lambda, int size,
                                        std::uint64_t seed, int workers = 1);

struct CouplingRun {
  double kappa = 0.0;
  std::vector<Solution> solutions;          // one per initial marginal
  std::vector<std::pair<int, int>> pairs;   // (i, j), i < j
  Matrix pair_tv;                           // pairs x (K+1), column k
  Vector tv_max;                            // k = 0..K
};

/// Solves the problem once per (initial marginal, kappa) and compares the
/// optimal marginal sequences pairwise in total variation.
std::vector<CouplingRun> coupling_experiment(const KlqProblem& problem, const std::vector<Matrix>& initial_marginals,
                                             const std::vector<double>& kappas, const SolverOptions& options = {});

/// Same comparison for problems that differ in more than the initial
/// marginal, e.g. a deviation reference measured against each start's own
/// nominal power. Each problem's kappa is replaced by the listed values.
std::vector<CouplingRun> coupling_experiment(const std::vector<KlqProblem>& problems,
                                             const std::vector<double>& kappas, const SolverOptions& options = {});

/// First k after which tv stays at or below threshold; -1 if never.
int settling_index(const Vector& tv, double threshold);

enum class MarginalSource { Empirical, Exact };

struct MpcTemplate {
  KlqModel model;  // nominal tables must cover every window
  double kappa = 1.0;
  std::function<Basis(int)> basis_for_window;
  SolverOptions solver;
};

struct MpcOptions {
  int window = 0;       // T
  int step = 0;         // t, policies applied per window
  int total_steps = 0;  // closed-loop length
  MarginalSource source = MarginalSource::Empirical;
  /// Starting point of the exact propagation; empty means the fleet's
  /// empirical marginal at entry.
  Matrix exact_initial;
  int workers = 1;
};

struct MpcWindow {
  int start = 0;
  Vector lambda;
  double dual_value = 0.0;
  int iterations = 0;
  bool converged = false;
  bool used_fallback = false;
  double solve_seconds = 0.0;
  Matrix initial_marginal;
};

struct MpcTrace {
  Vector reference;   // k = 1..total_steps
  Vector achieved;    // fleet mean output
  Vector predicted;   // exact mean output of the applied policies
  Vector tv_to_exact; // TV(empirical_k, exact_k)
  std::vector<MpcWindow> windows;
};

/// Receding-horizon loop: estimate nu at t0, solve over [t0, t0 + T], apply
/// the first t policies to the fleet, repeat. reference_stream holds absolute
/// output targets r_1, r_2, ... and must cover every window.
MpcTrace mpc_run(const MpcTemplate& problem_template, const MpcOptions& options, FleetState& fleet,
                 const Vector& reference_stream);

}  // namespace klq
