#include "hybriddyn/cubature.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>

#include "hybriddyn/errors.hpp"

namespace hybriddyn::cubature {

Rule gaussHermite(int order) {
  if (order < 1) throw DomainError("gaussHermite: order must be >= 1");
  // Golub-Welsch on the Hermite Jacobi matrix (physicists' weight e^{-x^2}),
  // then refolded so the rule integrates against a standard normal.
  Matrix jacobi = Matrix::Zero(order, order);
  for (int i = 1; i < order; ++i) {
    const double b = std::sqrt(0.5 * i);
    jacobi(i, i - 1) = b;
    jacobi(i - 1, i) = b;
  }
  Eigen::SelfAdjointEigenSolver<Matrix> eig(jacobi);
  Rule rule;
  rule.nodes = std::sqrt(2.0) * eig.eigenvalues();
  rule.weights = eig.eigenvectors().row(0).transpose().array().square();
  rule.weights /= rule.weights.sum();
  return rule;
}

Vector gaussianFeatureMoment(const features::FeatureMap& map, const Rule& rule,
                             const Vector& mean, const Matrix& cov_factor) {
  if (map.kind() == features::FeatureMap::Kind::RandomFourier) {
    const Matrix& freq = map.frequencies();
    Vector out(map.size());
    for (Index f = 0; f < freq.rows(); ++f) {
      const Vector w = freq.row(f).transpose();
      const double damp = 0.5 * (cov_factor.transpose() * w).squaredNorm();
      out[f] = std::exp(-damp) * std::cos(w.dot(mean) + map.phases()[f]);
    }
    return out;
  }
  Vector acc = Vector::Zero(map.size());
  forEachNode(rule, mean.size(), [&](const Vector& z, double w) {
    acc += w * map(Vector(mean + cov_factor * z));
  });
  return acc;
}

}  // namespace hybriddyn::cubature
