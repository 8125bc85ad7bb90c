#include "klq/fleet.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <thread>

namespace klq {

namespace {

std::uint64_t splitmix(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Index of the first cumulative weight exceeding v; the last index absorbs
// round-off in the final partial sum.
template <typename Cum>
int pick(const Cum& cumulative, int count, double v) {
  for (int i = 0; i < count; ++i) {
    if (v < cumulative(i)) return i;
  }
  return count - 1;
}

// Row-wise cumulative distributions of every kernel row T_u(s, .).
class KernelSampler {
 public:
  explicit KernelSampler(const KlqModel& model) : num_inputs_(model.num_inputs()) {
    const int ns = model.num_states();
    rows_.resize(static_cast<std::size_t>(ns) * num_inputs_);
    for (int s = 0; s < ns; ++s) {
      for (int u = 0; u < num_inputs_; ++u) {
        auto& row = rows_[static_cast<std::size_t>(s) * num_inputs_ + u];
        double cum = 0.0;
        for (int s2 = 0; s2 < ns; ++s2) {
          const double t = model.kernel(u)(s, s2);
          if (t <= 0.0) continue;
          cum += t;
          row.push_back({s2, cum});
        }
      }
    }
  }

  int sample(int s, int u, double v) const {
    const auto& row = rows_[static_cast<std::size_t>(s) * num_inputs_ + u];
    for (const auto& [next, cum] : row) {
      if (v < cum) return next;
    }
    return row.back().first;
  }

 private:
  int num_inputs_;
  std::vector<std::vector<std::pair<int, double>>> rows_;
};

int sample_marginal(const Matrix& marginal, double v) {
  double cum = 0.0;
  int last = 0;
  for (Eigen::Index s = 0; s < marginal.rows(); ++s) {
    for (Eigen::Index u = 0; u < marginal.cols(); ++u) {
      const double p = marginal(s, u);
      if (p <= 0.0) continue;
      cum += p;
      last = static_cast<int>(s * marginal.cols() + u);
      if (v < cum) return last;
    }
  }
  return last;
}

int advance_agent(int pair, int num_inputs, const KernelSampler& kernels, const Matrix& policy_next,
                  std::uint64_t seed, std::uint64_t agent, std::uint64_t step) {
  const int s = pair / num_inputs;
  const int u = pair % num_inputs;
  const int s2 = kernels.sample(s, u, counter_uniform(seed, agent, step, 0));
  Eigen::VectorXd cum(num_inputs);
  double acc = 0.0;
  for (int v = 0; v < num_inputs; ++v) {
    acc += policy_next(s2, v);
    cum(v) = acc;
  }
  // Skip zero-probability inputs so round-off never selects them.
  const double draw = counter_uniform(seed, agent, step, 1) * acc;
  int u2 = pick(cum, num_inputs, draw);
  while (policy_next(s2, u2) <= 0.0 && u2 > 0) --u2;
  return s2 * num_inputs + u2;
}

template <typename Fn>
void parallel_for(int count, int workers, const Fn& body) {
  workers = std::max(1, std::min(workers, count));
  if (workers == 1) {
    body(0, count);
    return;
  }
  std::vector<std::thread> threads;
  const int chunk = (count + workers - 1) / workers;
  for (int w = 0; w < workers; ++w) {
    const int begin = w * chunk;
    const int end = std::min(count, begin + chunk);
    if (begin >= end) break;
    threads.emplace_back([&body, begin, end] { body(begin, end); });
  }
  for (auto& t : threads) t.join();
}

void step_with(FleetState& fleet, const KernelSampler& kernels, const Matrix& policy_next, int workers) {
  const int step = fleet.time + 1;
  parallel_for(fleet.size(), workers, [&](int begin, int end) {
    for (int i = begin; i < end; ++i) {
      fleet.pairs[i] = advance_agent(fleet.pairs[i], fleet.num_inputs, kernels, policy_next, fleet.seed,
                                     static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(step));
    }
  });
  fleet.time = step;
}

}  // namespace

double counter_uniform(std::uint64_t seed, std::uint64_t agent, std::uint64_t step, std::uint64_t draw) {
  std::uint64_t h = splitmix(seed);
  h = splitmix(h ^ agent);
  h = splitmix(h ^ step);
  h = splitmix(h ^ draw);
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

Matrix FleetState::empirical() const {
  Matrix nu = Matrix::Zero(num_states, num_inputs);
  for (const int x : pairs) nu(x / num_inputs, x % num_inputs) += 1.0;
  if (!pairs.empty()) nu /= static_cast<double>(pairs.size());
  return nu;
}

FleetState make_fleet(const Matrix& marginal, int size, std::uint64_t seed) {
  if (size < 1) throw std::invalid_argument("fleet size must be >= 1");
  FleetState fleet;
  fleet.seed = seed;
  fleet.num_states = static_cast<int>(marginal.rows());
  fleet.num_inputs = static_cast<int>(marginal.cols());
  fleet.pairs.resize(size);
  for (int i = 0; i < size; ++i) fleet.pairs[i] = sample_marginal(marginal, counter_uniform(seed, i, 0, 0));
  return fleet;
}

void step_fleet(FleetState& fleet, const KlqModel& model, const Matrix& policy_next, int workers) {
  step_with(fleet, KernelSampler(model), policy_next, workers);
}

FleetRun simulate_fleet(const KlqModel& model, const PolicySequence& policy, int size, std::uint64_t seed,
                        int workers, bool record_paths) {
  FleetState fleet = make_fleet(model.initial_marginal(), size, seed);
  fleet.num_states = model.num_states();
  const KernelSampler kernels(model);
  FleetRun run;
  run.empirical.reserve(policy.horizon() + 1);
  run.empirical.push_back(fleet.empirical());
  run.mean_output.resize(policy.horizon());
  if (record_paths) {
    run.paths.assign(size, std::vector<int>());
    for (int i = 0; i < size; ++i) {
      run.paths[i].reserve(policy.horizon() + 1);
      run.paths[i].push_back(fleet.pairs[i]);
    }
  }
  for (int k = 1; k <= policy.horizon(); ++k) {
    step_with(fleet, kernels, policy.at(k), workers);
    run.empirical.push_back(fleet.empirical());
    run.mean_output(k - 1) = mean_output(run.empirical.back(), model.output());
    if (record_paths) {
      for (int i = 0; i < size; ++i) run.paths[i].push_back(fleet.pairs[i]);
    }
  }
  return run;
}

MonteCarloGradient monte_carlo_gradient(const KlqProblem& problem, const Vector& lambda, int size,
                                        std::uint64_t seed, int workers) {
  if (size < 2) throw std::invalid_argument("monte_carlo_gradient needs at least two trajectories");
  const auto& model = problem.model();
  const Matrix& w = problem.basis().weights();
  const int n = problem.basis().size();
  const int nu = model.num_inputs();
  const DualIterate it = evaluate_dual(problem, lambda);
  const KernelSampler kernels(model);

  Matrix samples(n, size);
  parallel_for(size, workers, [&](int begin, int end) {
    Vector acc(n);
    for (int i = begin; i < end; ++i) {
      const auto agent = static_cast<std::uint64_t>(i);
      int x = sample_marginal(model.initial_marginal(), counter_uniform(seed, agent, 0, 0));
      acc.setZero();
      for (int k = 1; k <= model.horizon(); ++k) {
        x = advance_agent(x, nu, kernels, it.policy.at(k), seed, agent, static_cast<std::uint64_t>(k));
        acc += w.col(k - 1) * model.output()(x / nu, x % nu);
      }
      samples.col(i) = acc;
    }
  });

  MonteCarloGradient out;
  out.transformed_mean = samples.rowwise().mean();
  const Matrix centered = samples.colwise() - out.transformed_mean;
  const Vector variance = centered.rowwise().squaredNorm() / static_cast<double>(size - 1);
  out.standard_error = (variance / static_cast<double>(size)).cwiseSqrt();
  out.gradient = problem.transformed_reference() - lambda / problem.kappa() - out.transformed_mean;
  return out;
}

std::vector<CouplingRun> coupling_experiment(const std::vector<KlqProblem>& problems,
                                             const std::vector<double>& kappas, const SolverOptions& options) {
  std::vector<CouplingRun> runs;
  if (problems.empty()) return runs;
  const int horizon = problems.front().horizon();
  for (const auto& problem : problems) {
    if (problem.horizon() != horizon) throw std::invalid_argument("coupling problems must share one horizon");
  }
  const int count = static_cast<int>(problems.size());
  for (const double kappa : kappas) {
    CouplingRun run;
    run.kappa = kappa;
    for (const auto& problem : problems) run.solutions.push_back(solve(problem.with_kappa(kappa), options));
    for (int i = 0; i < count; ++i) {
      for (int j = i + 1; j < count; ++j) run.pairs.emplace_back(i, j);
    }
    run.pair_tv = Matrix::Zero(static_cast<Eigen::Index>(run.pairs.size()), horizon + 1);
    for (std::size_t p = 0; p < run.pairs.size(); ++p) {
      const auto& a = run.solutions[run.pairs[p].first].marginals;
      const auto& b = run.solutions[run.pairs[p].second].marginals;
      for (int k = 0; k <= horizon; ++k) run.pair_tv(static_cast<Eigen::Index>(p), k) = total_variation(a.at(k), b.at(k));
    }
    run.tv_max = run.pairs.empty() ? Vector(Vector::Zero(horizon + 1))
                                   : Vector(run.pair_tv.colwise().maxCoeff().transpose());
    runs.push_back(std::move(run));
  }
  return runs;
}

std::vector<CouplingRun> coupling_experiment(const KlqProblem& problem, const std::vector<Matrix>& initial_marginals,
                                             const std::vector<double>& kappas, const SolverOptions& options) {
  std::vector<KlqProblem> problems;
  problems.reserve(initial_marginals.size());
  for (const auto& init : initial_marginals) problems.push_back(problem.with_initial_marginal(init));
  return coupling_experiment(problems, kappas, options);
}

int settling_index(const Vector& tv, double threshold) {
  int index = -1;
  for (Eigen::Index k = tv.size() - 1; k >= 0; --k) {
    if (tv(k) > threshold) break;
    index = static_cast<int>(k);
  }
  return index;
}

MpcTrace mpc_run(const MpcTemplate& tmpl, const MpcOptions& options, FleetState& fleet,
                 const Vector& reference_stream) {
  const int window = options.window;
  const int step = options.step;
  const int total = options.total_steps;
  if (step < 1 || window < step) throw std::invalid_argument("mpc_run: need 1 <= step <= window");
  if (total < 1) throw std::invalid_argument("mpc_run: total_steps must be positive");
  const int last_start = ((total - 1) / step) * step;
  if (last_start + window > tmpl.model.horizon()) {
    throw std::invalid_argument(fmt::format("mpc_run: template horizon {} does not cover window [{}, {}]",
                                            tmpl.model.horizon(), last_start, last_start + window));
  }
  if (reference_stream.size() < last_start + window) {
    throw std::invalid_argument(fmt::format("mpc_run: reference stream has {} steps, need {}",
                                            reference_stream.size(), last_start + window));
  }
  const auto& model = tmpl.model;
  const KernelSampler kernels(model);
  MpcTrace trace;
  trace.reference = reference_stream.head(total);
  trace.achieved = Vector::Zero(total);
  trace.predicted = Vector::Zero(total);

  trace.tv_to_exact = Vector::Zero(total);
  Matrix exact = options.exact_initial.size() > 0 ? options.exact_initial : fleet.empirical();
  std::vector<Matrix> pending;  // policies from the last accepted solve, beyond what was applied
  for (int start = 0; start < total; start += step) {
    MpcWindow record;
    record.start = start;
    record.initial_marginal = options.source == MarginalSource::Empirical ? fleet.empirical() : exact;
    const KlqProblem problem(model.window(start, window, record.initial_marginal),
                             tmpl.basis_for_window(window), reference_stream.segment(start, window), tmpl.kappa);
    const auto clock = std::chrono::steady_clock::now();
    Solution sol;
    bool ok = true;
    try {
      sol = solve(problem, tmpl.solver);
      ok = sol.converged;
    } catch (const NumericalError&) {
      ok = false;
    }
    record.solve_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - clock).count();
    record.converged = ok;
    record.lambda = sol.lambda;
    record.dual_value = sol.dual_value;
    record.iterations = sol.iterations;

    const int applied = std::min(step, total - start);
    std::vector<Matrix> tables;
    if (ok) {
      tables.assign(sol.policy.steps.begin(), sol.policy.steps.end());
    } else {
      record.used_fallback = true;
      tables = pending;
      for (int k = static_cast<int>(tables.size()) + 1; k <= window; ++k) {
        tables.push_back(model.nominal_policy(start + k));
      }
    }
    for (int k = 1; k <= applied; ++k) {
      const Matrix& phi = tables[k - 1];
      step_with(fleet, kernels, phi, options.workers);
      const Vector states = model.push_forward(exact);
      exact = phi.array().colwise() * states.array();
      const Matrix empirical = fleet.empirical();
      trace.achieved(start + k - 1) = mean_output(empirical, model.output());
      trace.tv_to_exact(start + k - 1) = total_variation(empirical, exact);
      trace.predicted(start + k - 1) = mean_output(exact, model.output());
    }
    pending.assign(tables.begin() + applied, tables.end());
    trace.windows.push_back(std::move(record));
  }
  return trace;
}

}  // namespace klq
