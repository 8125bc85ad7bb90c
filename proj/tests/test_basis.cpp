#include "klq/basis.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

namespace klq {
namespace {

TEST(DegenerateBasis, IsIdentity) {
  EXPECT_EQ(degenerate_basis(2).weights(), Matrix::Identity(2, 2));
  EXPECT_EQ(degenerate_basis(1).weights(), Matrix::Identity(1, 1));
  EXPECT_THROW(degenerate_basis(0), std::invalid_argument);
}

TEST(DegenerateBasis, TransformIsIdentity) {
  Vector r(5);
  r << 0.3, -1.0, 2.5, 0.0, 7.0;
  EXPECT_EQ(transform_reference(degenerate_basis(5), r), r);
}

TEST(FourierBasis, ConstantRowOnly) {
  const auto b = fourier_basis(4, 1);
  EXPECT_EQ(b.weights(), Matrix::Ones(1, 4));
}

TEST(FourierBasis, QuarterTurnRows) {
  const auto b = fourier_basis(4, 3, std::numbers::pi / 2.0);
  Matrix expected(3, 4);
  expected << 1, 1, 1, 1, 1, 0, -1, 0, 0, -1, 0, 1;
  EXPECT_LE((b.weights() - expected).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(FourierBasis, RejectsBadArguments) {
  try {
    fourier_basis(4, 2);
    FAIL() << "even N accepted";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("N must be odd"), std::string::npos);
  }
  EXPECT_THROW(fourier_basis(4, 5), std::invalid_argument);
  EXPECT_THROW(fourier_basis(4, 3, 0.0), std::invalid_argument);
}

TEST(FourierBasis, DefaultFrequencyIsOnePeriodPerHorizon) {
  const auto b = fourier_basis(12, 3);
  for (int k = 1; k <= 12; ++k) {
    EXPECT_NEAR(b.weights()(1, k - 1), std::sin(2.0 * std::numbers::pi * k / 12.0), 1e-15);
  }
}

TEST(TransformReference, ConstantSignalSumsUp) {
  const Vector r = Vector::Constant(10, 0.4);
  EXPECT_NEAR(transform_reference(fourier_basis(10, 1), r)(0), 4.0, 1e-14);
}

TEST(TransformReference, SineCoefficient) {
  const auto b = fourier_basis(4, 3, std::numbers::pi / 2.0);
  Vector r(4);
  for (int k = 1; k <= 4; ++k) r(k - 1) = std::sin(std::numbers::pi * k / 2.0);
  EXPECT_NEAR(transform_reference(b, r)(1), 2.0, 1e-14);
}

TEST(TransformReference, IsLinear) {
  std::mt19937_64 rng(21);
  std::normal_distribution<double> normal;
  const auto b = fourier_basis(30, 7);
  for (int trial = 0; trial < 20; ++trial) {
    Vector r(30), q(30);
    for (int k = 0; k < 30; ++k) {
      r(k) = normal(rng);
      q(k) = normal(rng);
    }
    const double a = normal(rng), c = normal(rng);
    const Vector lhs = transform_reference(b, a * r + c * q);
    const Vector rhs = a * transform_reference(b, r) + c * transform_reference(b, q);
    EXPECT_LE((lhs - rhs).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(TransformReference, RejectsLengthMismatch) {
  EXPECT_THROW(transform_reference(degenerate_basis(3), Vector::Zero(4)), std::invalid_argument);
}

TEST(Basis, RejectsZeroRowAndTooManyRows) {
  Matrix w = Matrix::Ones(2, 3);
  w.row(1).setZero();
  EXPECT_THROW(Basis{w}, std::invalid_argument);
  EXPECT_THROW(Basis{Matrix::Ones(4, 3)}, std::invalid_argument);
}

TEST(Basis, ExpandAndColumnNorm) {
  const auto b = fourier_basis(4, 3, std::numbers::pi / 2.0);
  Vector lambda(3);
  lambda << 1.0, 2.0, -1.0;
  const Vector check = b.expand(lambda);
  EXPECT_NEAR(check(0), 1.0 + 2.0 * 1.0, 1e-15);
  EXPECT_NEAR(check(1), 1.0 + 1.0, 1e-15);
  EXPECT_NEAR(b.column_norm(1), std::sqrt(2.0), 1e-15);
}

TEST(ParseBasis, Selectors) {
  EXPECT_EQ(parse_basis("degenerate", 3).weights(), Matrix::Identity(3, 3));
  EXPECT_EQ(parse_basis("fourier:3", 8).size(), 3);
  const auto b = parse_basis("fourier:3:1.5707963267948966", 4);
  EXPECT_NEAR(b.weights()(1, 0), 1.0, 1e-15);
  EXPECT_THROW(parse_basis("fourier:x", 4), std::invalid_argument);
  EXPECT_THROW(parse_basis("wavelet", 4), std::invalid_argument);
}

}  // namespace
}  // namespace klq
