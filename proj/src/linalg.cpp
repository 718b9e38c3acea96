#include "hybriddyn/linalg.hpp"

#include <cmath>
#include <sstream>

namespace hybriddyn {

Matrix spdRepair(const Matrix& m) {
  if (m.rows() != m.cols()) throw DimensionMismatchError("spdRepair: matrix not square");
  Matrix s = symmetrized(m);
  const double scale = std::max(s.trace() / static_cast<double>(s.rows()), 1.0);
  double jitter = 0.0;
  for (int attempt = 0; attempt <= 7; ++attempt) {
    Matrix candidate = s;
    if (jitter > 0.0) candidate += jitter * Matrix::Identity(s.rows(), s.cols());
    Eigen::LLT<Matrix> llt(candidate);
    if (llt.info() == Eigen::Success && llt.matrixLLT().diagonal().minCoeff() > 0.0)
      return candidate;
    jitter = (jitter == 0.0) ? 1e-8 * scale : jitter * 10.0;
    if (jitter > 1e-2 * scale * 1.0000001) break;
  }
  std::ostringstream msg;
  msg << "spdRepair: matrix of size " << s.rows() << " not positive definite after jitter";
  throw NonSpdError(msg.str());
}

void GaussianPrec::set(const Matrix& precision) {
  prec_ = spdRepair(precision);
  Eigen::LLT<Matrix> llt(prec_);
  chol_ = llt.matrixL();
  logdet_ = 2.0 * chol_.diagonal().array().log().sum();
}

double GaussianPrec::logpdf(const Vector& x, const Vector& mean) const {
  const Vector r = chol_.transpose() * (x - mean);
  return 0.5 * logdet_ - 0.5 * r.squaredNorm() -
         0.5 * static_cast<double>(dim()) * std::log(2.0 * M_PI);
}

Vector GaussianPrec::sample(const Vector& mean, Rng& rng) const {
  std::normal_distribution<double> gauss(0.0, 1.0);
  Vector z(dim());
  for (Index i = 0; i < z.size(); ++i) z[i] = gauss(rng);
  // cov = (L L^T)^{-1}, so mean + L^{-T} z has the right covariance
  return mean + chol_.transpose().triangularView<Eigen::Upper>().solve(z);
}

Matrix GaussianPrec::covFactor() const {
  Matrix id = Matrix::Identity(dim(), dim());
  return chol_.transpose().triangularView<Eigen::Upper>().solve(id);
}

Matrix GaussianPrec::covariance() const {
  Matrix c = covFactor();
  return c * c.transpose();
}

double logMultivariateGamma(int d, double a) {
  double out = 0.25 * d * (d - 1) * std::log(M_PI);
  for (int i = 1; i <= d; ++i) out += std::lgamma(a + 0.5 * (1.0 - i));
  return out;
}

double digamma(double x) {
  if (!(x > 0.0)) throw DomainError("digamma: nonpositive argument");
  double result = 0.0;
  while (x < 6.0) {
    result -= 1.0 / x;
    x += 1.0;
  }
  // asymptotic series
  const double inv = 1.0 / x;
  const double inv2 = inv * inv;
  result += std::log(x) - 0.5 * inv -
            inv2 * (1.0 / 12.0 - inv2 * (1.0 / 120.0 - inv2 * (1.0 / 252.0 - inv2 / 240.0)));
  return result;
}

}  // namespace hybriddyn
