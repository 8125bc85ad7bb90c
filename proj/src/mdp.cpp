#include "klq/mdp.hpp"

#include <fmt/format.h>

#include <cmath>

namespace klq {

namespace {

void check_pmf_rows(const Matrix& table, const std::string& label, const std::string& kind,
                    ValidationReport& report) {
  for (Eigen::Index r = 0; r < table.rows(); ++r) {
    if (!table.row(r).allFinite()) {
      report.violations.push_back(fmt::format("{} row {}: non-finite {} entry", label, r, kind));
      continue;
    }
    if ((table.row(r).array() < 0.0).any()) {
      report.violations.push_back(fmt::format("{} row {}: negative {} entry", label, r, kind));
    }
    const double sum = table.row(r).sum();
    if (std::abs(sum - 1.0) > kStochasticTol) {
      report.violations.push_back(fmt::format("{} row {}: {} row sum {:.12g} != 1", label, r, kind, sum));
    }
  }
}

// log(a / b) with the 0 log 0 convention handled by the caller.
double log_ratio(double a, double b) { return std::log(a) - std::log(b); }

}  // namespace

KlqModel::KlqModel(std::vector<Matrix> kernels, std::vector<Matrix> nominal_policies, Matrix output,
                   Matrix initial_marginal)
    : kernels_(std::move(kernels)),
      nominal_(std::move(nominal_policies)),
      output_(std::move(output)),
      initial_(std::move(initial_marginal)) {
  sparse_.reserve(kernels_.size());
  for (const auto& t : kernels_) {
    Eigen::SparseMatrix<double, Eigen::RowMajor> sp = t.sparseView(0.0, 0.0);
    sp.makeCompressed();
    sparse_.push_back(std::move(sp));
  }
}

KlqModel KlqModel::with_initial_marginal(Matrix initial_marginal) const {
  return KlqModel(kernels_, nominal_, output_, std::move(initial_marginal));
}

KlqModel KlqModel::window(int start, int horizon, Matrix initial_marginal) const {
  if (start < 0 || horizon < 1 || start + horizon > this->horizon()) {
    throw std::out_of_range(fmt::format("window [{}, {}] exceeds model horizon {}", start,
                                        start + horizon, this->horizon()));
  }
  std::vector<Matrix> nominal(nominal_.begin() + start, nominal_.begin() + start + horizon + 1);
  return KlqModel(kernels_, std::move(nominal), output_, std::move(initial_marginal));
}

Matrix KlqModel::expected_next(const Vector& f) const {
  Matrix out(num_states(), num_inputs());
  for (int u = 0; u < num_inputs(); ++u) out.col(u) = sparse_[u] * f;
  return out;
}

Vector KlqModel::push_forward(const Matrix& nu) const {
  Vector out = Vector::Zero(num_states());
  for (int u = 0; u < num_inputs(); ++u) out.noalias() += sparse_[u].transpose() * nu.col(u);
  return out;
}

ValidationReport validate_model(const KlqModel& model) {
  ValidationReport report;
  const int ns = model.num_states();
  const int nu = model.num_inputs();
  if (ns < 1) report.violations.push_back("num_states must be positive");
  if (nu < 1) report.violations.push_back("num_inputs must be positive");
  if (model.horizon() < 1) report.violations.push_back("horizon must be positive (need K+1 >= 2 nominal tables)");
  if (static_cast<int>(model.kernels().size()) != nu) {
    report.violations.push_back(
        fmt::format("dimension mismatch: {} kernels for {} inputs", model.kernels().size(), nu));
  }
  for (std::size_t u = 0; u < model.kernels().size(); ++u) {
    const auto& t = model.kernels()[u];
    if (t.rows() != ns || t.cols() != ns) {
      report.violations.push_back(
          fmt::format("dimension mismatch: kernel {} is {}x{}, expected {}x{}", u, t.rows(), t.cols(), ns, ns));
      continue;
    }
    check_pmf_rows(t, fmt::format("kernel {}", u), "kernel", report);
  }
  for (std::size_t k = 0; k < model.nominal_policies().size(); ++k) {
    const auto& phi = model.nominal_policies()[k];
    if (phi.rows() != ns || phi.cols() != nu) {
      report.violations.push_back(fmt::format("dimension mismatch: nominal policy {} is {}x{}", k, phi.rows(),
                                              phi.cols()));
      continue;
    }
    check_pmf_rows(phi, fmt::format("nominal policy {}", k), "policy", report);
  }
  const auto& nu0 = model.initial_marginal();
  if (nu0.rows() != ns || nu0.cols() != nu) {
    report.violations.push_back(
        fmt::format("dimension mismatch: initial marginal is {}x{}", nu0.rows(), nu0.cols()));
  } else {
    if ((nu0.array() < 0.0).any()) report.violations.push_back("negative initial marginal entry");
    if (!nu0.allFinite()) report.violations.push_back("non-finite initial marginal entry");
    const double sum = nu0.sum();
    if (std::abs(sum - 1.0) > kStochasticTol) {
      report.violations.push_back(fmt::format("initial marginal sum {:.12g} != 1", sum));
    }
  }
  if (!model.output().allFinite()) report.violations.push_back("non-finite output entry");
  return report;
}

ValidationReport validate_policy(const KlqModel& model, const PolicySequence& policy) {
  ValidationReport report;
  if (policy.horizon() != model.horizon()) {
    report.violations.push_back(
        fmt::format("policy horizon {} != model horizon {}", policy.horizon(), model.horizon()));
    return report;
  }
  for (int k = 1; k <= policy.horizon(); ++k) {
    const auto& phi = policy.at(k);
    if (phi.rows() != model.num_states() || phi.cols() != model.num_inputs()) {
      report.violations.push_back(fmt::format("dimension mismatch: policy {}", k));
      continue;
    }
    check_pmf_rows(phi, fmt::format("policy {}", k), "policy", report);
    const auto& ref = model.nominal_policy(k);
    if (((phi.array() > 0.0) && (ref.array() <= 0.0)).any()) {
      report.violations.push_back(fmt::format("policy {}: support exceeds nominal support", k));
    }
  }
  return report;
}

PolicySequence nominal_policy_sequence(const KlqModel& model) {
  PolicySequence out;
  out.steps.assign(model.nominal_policies().begin() + 1, model.nominal_policies().end());
  return out;
}

Matrix policy_to_kernel(const KlqModel& model, const PolicySequence& policy, int k) {
  if (k < 0 || k >= policy.horizon()) {
    throw std::out_of_range(fmt::format("policy_to_kernel: k={} outside [0, {}]", k, policy.horizon() - 1));
  }
  const int ns = model.num_states();
  const int nu = model.num_inputs();
  const Matrix& next = policy.at(k + 1);
  Matrix p = Matrix::Zero(ns * nu, ns * nu);
  for (int s = 0; s < ns; ++s) {
    for (int u = 0; u < nu; ++u) {
      for (int s2 = 0; s2 < ns; ++s2) {
        const double t = model.kernel(u)(s, s2);
        if (t == 0.0) continue;
        for (int u2 = 0; u2 < nu; ++u2) p(s * nu + u, s2 * nu + u2) = t * next(s2, u2);
      }
    }
  }
  return p;
}

MarginalSequence propagate_marginals(const KlqModel& model, const PolicySequence& policy) {
  return propagate_marginals(model, policy, model.initial_marginal());
}

MarginalSequence propagate_marginals(const KlqModel& model, const PolicySequence& policy,
                                     const Matrix& initial_marginal) {
  MarginalSequence out;
  out.steps.reserve(policy.horizon() + 1);
  out.steps.push_back(initial_marginal);
  for (int k = 1; k <= policy.horizon(); ++k) {
    const Vector states = model.push_forward(out.steps.back());
    out.steps.push_back(policy.at(k).array().colwise() * states.array());
  }
  return out;
}

double mean_output(const Matrix& nu, const Matrix& output) { return nu.cwiseProduct(output).sum(); }

Vector output_trajectory(const MarginalSequence& marginals, const Matrix& output) {
  Vector out(marginals.horizon());
  for (int k = 1; k <= marginals.horizon(); ++k) out(k - 1) = mean_output(marginals.at(k), output);
  return out;
}

double kl_rate(const Matrix& nu, const Matrix& nu_ref) {
  const Vector states = nu.rowwise().sum();
  const Vector states_ref = nu_ref.rowwise().sum();
  double total = 0.0;
  for (Eigen::Index s = 0; s < nu.rows(); ++s) {
    for (Eigen::Index u = 0; u < nu.cols(); ++u) {
      const double p = nu(s, u);
      if (p <= 0.0) continue;
      if (nu_ref(s, u) <= 0.0) {
        throw AbsoluteContinuityError(
            fmt::format("kl_rate: nu({},{}) = {:g} but the reference conditional is zero", s, u, p));
      }
      total += p * (log_ratio(p, states(s)) - log_ratio(nu_ref(s, u), states_ref(s)));
    }
  }
  return total;
}

double kl_rate(const Matrix& nu, const Matrix& policy, const Matrix& policy_ref) {
  double total = 0.0;
  for (Eigen::Index s = 0; s < nu.rows(); ++s) {
    for (Eigen::Index u = 0; u < nu.cols(); ++u) {
      const double p = nu(s, u);
      if (p <= 0.0 || policy(s, u) <= 0.0) continue;
      if (policy_ref(s, u) <= 0.0) {
        throw AbsoluteContinuityError(
            fmt::format("kl_rate: phi({}|{}) > 0 but the reference policy assigns zero", u, s));
      }
      total += p * log_ratio(policy(s, u), policy_ref(s, u));
    }
  }
  return total;
}

Matrix kl_rate_subgradient(const Matrix& mu, const Matrix& nu_ref) {
  const Vector states = mu.rowwise().sum();
  const Vector states_ref = nu_ref.rowwise().sum();
  Matrix g = Matrix::Zero(mu.rows(), mu.cols());
  for (Eigen::Index s = 0; s < mu.rows(); ++s) {
    for (Eigen::Index u = 0; u < mu.cols(); ++u) {
      if (mu(s, u) <= 0.0) continue;
      if (nu_ref(s, u) <= 0.0) {
        throw AbsoluteContinuityError(
            fmt::format("kl_rate_subgradient: mu({},{}) > 0 but the reference conditional is zero", s, u));
      }
      g(s, u) = log_ratio(mu(s, u), states(s)) - log_ratio(nu_ref(s, u), states_ref(s));
    }
  }
  return g;
}

double relative_entropy(const Matrix& p, const Matrix& q) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const double a = p.data()[i];
    if (a <= 0.0) continue;
    const double b = q.data()[i];
    if (b <= 0.0) throw AbsoluteContinuityError("relative_entropy: p is not absolutely continuous w.r.t. q");
    total += a * log_ratio(a, b);
  }
  return total;
}

double total_variation(const Matrix& a, const Matrix& b) { return 0.5 * (a - b).cwiseAbs().sum(); }

}  // namespace klq
