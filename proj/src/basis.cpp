#include "klq/basis.hpp"

#include <fmt/format.h>

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace klq {

Basis::Basis(Matrix weights) : weights_(std::move(weights)) {
  if (weights_.rows() < 1 || weights_.cols() < 1) throw std::invalid_argument("basis must be non-empty");
  if (weights_.rows() > weights_.cols()) {
    throw std::invalid_argument(fmt::format("basis has N={} rows for horizon K={}", weights_.rows(), weights_.cols()));
  }
  if (!weights_.allFinite()) throw std::invalid_argument("basis weights must be finite");
  for (Eigen::Index n = 0; n < weights_.rows(); ++n) {
    if (weights_.row(n).cwiseAbs().maxCoeff() == 0.0) {
      throw std::invalid_argument(fmt::format("basis row {} is identically zero", n + 1));
    }
  }
}

Vector Basis::expand(const Vector& lambda) const {
  if (lambda.size() != size()) {
    throw std::invalid_argument(fmt::format("lambda has {} entries, basis has {}", lambda.size(), size()));
  }
  return weights_.transpose() * lambda;
}

Basis degenerate_basis(int horizon) {
  if (horizon < 1) throw std::invalid_argument("degenerate_basis: horizon must be >= 1");
  return Basis(Matrix::Identity(horizon, horizon));
}

Basis fourier_basis(int horizon, int count, double omega) {
  if (count < 1 || count % 2 == 0) throw std::invalid_argument(fmt::format("N must be odd (got {})", count));
  if (count > horizon) throw std::invalid_argument(fmt::format("N={} exceeds horizon K={}", count, horizon));
  if (!(omega > 0.0)) throw std::invalid_argument("omega must be positive");
  Matrix w(count, horizon);
  for (int k = 1; k <= horizon; ++k) {
    w(0, k - 1) = 1.0;
    for (int m = 1; m <= (count - 1) / 2; ++m) {
      w(2 * m - 1, k - 1) = std::sin(omega * m * k);
      w(2 * m, k - 1) = std::cos(omega * m * k);
    }
  }
  return Basis(std::move(w));
}

Basis fourier_basis(int horizon, int count) {
  return fourier_basis(horizon, count, 2.0 * std::numbers::pi / horizon);
}

Vector transform_reference(const Basis& basis, const Vector& reference) {
  if (reference.size() != basis.horizon()) {
    throw std::invalid_argument(
        fmt::format("reference length {} != basis horizon {}", reference.size(), basis.horizon()));
  }
  return basis.weights() * reference;
}

Basis parse_basis(const std::string& selector, int horizon) {
  if (selector == "degenerate") return degenerate_basis(horizon);
  constexpr std::string_view prefix = "fourier:";
  if (selector.rfind(prefix, 0) == 0) {
    const std::string rest = selector.substr(prefix.size());
    const auto colon = rest.find(':');
    try {
      std::size_t used = 0;
      const std::string count_text = rest.substr(0, colon);
      const int count = std::stoi(count_text, &used);
      if (used != count_text.size()) throw std::invalid_argument("trailing characters");
      if (colon == std::string::npos) return fourier_basis(horizon, count);
      const std::string omega_text = rest.substr(colon + 1);
      const double omega = std::stod(omega_text, &used);
      if (used != omega_text.size()) throw std::invalid_argument("trailing characters");
      return fourier_basis(horizon, count, omega);
    } catch (const std::logic_error& e) {
      throw std::invalid_argument(fmt::format("bad basis selector '{}': {}", selector, e.what()));
    }
  }
  throw std::invalid_argument(fmt::format("unknown basis selector '{}'", selector));
}

}  // namespace klq
