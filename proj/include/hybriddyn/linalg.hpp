#pragma once

#include <Eigen/Cholesky>

#include "hybriddyn/errors.hpp"
#include "hybriddyn/types.hpp"

namespace hybriddyn {

/// Symmetrize and, if needed, add escalating diagonal jitter (1e-8..1e-2 of the
/// mean diagonal scale) until the matrix admits a Cholesky factorization.
/// Throws NonSpdError when even the largest jitter fails.
Matrix spdRepair(const Matrix& m);

/// Multivariate Gaussian parameterized by its precision matrix, with the
/// Cholesky factor and log-determinant cached for repeated evaluation.
class GaussianPrec {
 public:
  GaussianPrec() = default;
  explicit GaussianPrec(const Matrix& precision) { set(precision); }

  void set(const Matrix& precision);

  const Matrix& precision() const { return prec_; }
  double logDetPrecision() const { return logdet_; }
  Index dim() const { return prec_.rows(); }

  double logpdf(const Vector& x, const Vector& mean) const;
  /// Draw from N(mean, precision^{-1}).
  Vector sample(const Vector& mean, Rng& rng) const;
  /// C with C C^T = precision^{-1} (for cubature node placement).
  Matrix covFactor() const;
  Matrix covariance() const;

 private:
  Matrix prec_;
  Matrix chol_;  // lower factor of the precision
  double logdet_ = 0.0;
};

/// log Gamma_d(a), the multivariate gamma function.
double logMultivariateGamma(int d, double a);

double digamma(double x);

}  // namespace hybriddyn
