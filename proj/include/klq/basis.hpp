#pragma once

#include "klq/mdp.hpp"

#include <string>

namespace klq {

/// Weight family w_n(k), n = 1..N, k = 1..K, stored as an N x K matrix whose
/// column j holds time k = j + 1. Rows are kept raw (not orthonormalised);
/// badly conditioned families slow the dual ascent, so keep N well below K.
class Basis {
 public:
  Basis() = default;
  explicit Basis(Matrix weights);

  int size() const { return static_cast<int>(weights_.rows()); }
  int horizon() const { return static_cast<int>(weights_.cols()); }
  const Matrix& weights() const { return weights_; }

  /// lambda_check_k = sum_n lambda_n w_n(k); entry k-1.
  Vector expand(const Vector& lambda) const;

  /// ||w(k)||_2, the Euclidean norm of the k-th column.
  double column_norm(int k) const { return weights_.col(k - 1).norm(); }

 private:
  Matrix weights_;
};

/// w_n(k) = 1{n = k}; the unrelaxed problem.
Basis degenerate_basis(int horizon);

/// Rows {1, sin(omega m k), cos(omega m k) : 1 <= m <= (N-1)/2} at k = 1..K.
Basis fourier_basis(int horizon, int count, double omega);

/// fourier_basis with omega = 2 pi / K.
Basis fourier_basis(int horizon, int count);

/// r_hat_n = sum_k w_n(k) r_k.
Vector transform_reference(const Basis& basis, const Vector& reference);

/// Parses "degenerate" or "fourier:N[:omega]".
Basis parse_basis(const std::string& selector, int horizon);

}  // namespace klq
