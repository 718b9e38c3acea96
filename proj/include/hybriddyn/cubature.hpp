#pragma once

#include "hybriddyn/features.hpp"
#include "hybriddyn/types.hpp"

namespace hybriddyn::cubature {

/// One-dimensional Gauss-Hermite rule, refolded for a standard normal:
/// E[g(Z)] = sum_i weights[i] * g(nodes[i]) with Z ~ N(0, 1).
/// Exact for polynomials of degree <= 2 * order - 1.
struct Rule {
  Vector nodes;
  Vector weights;
};

Rule gaussHermite(int order);

/// Visit every tensor-product node for a dim-dimensional standard normal.
/// f is called with (node vector, scalar weight).
template <typename F>
void forEachNode(const Rule& rule, Index dim, F&& f) {
  const Index q = rule.nodes.size();
  std::vector<Index> idx(dim, 0);
  Vector node(dim);
  while (true) {
    double w = 1.0;
    for (Index j = 0; j < dim; ++j) {
      node[j] = rule.nodes[idx[j]];
      w *= rule.weights[idx[j]];
    }
    f(node, w);
    Index j = 0;
    for (; j < dim; ++j) {
      if (++idx[j] < q) break;
      idx[j] = 0;
    }
    if (j == dim) break;
  }
}

/// E[g(X)] for X ~ N(mean, C C^T).
template <typename G>
double gaussianExpectation(const Rule& rule, const Vector& mean, const Matrix& cov_factor,
                           G&& g) {
  double acc = 0.0;
  forEachNode(rule, mean.size(), [&](const Vector& z, double w) {
    acc += w * g(Vector(mean + cov_factor * z));
  });
  return acc;
}

/// E[psi(X)] for X ~ N(mean, C C^T). Polynomial maps use the tensor rule
/// (exact given enough nodes); Fourier maps use the closed-form cosine moment
/// E[cos(w.x + b)] = exp(-w' Sigma w / 2) cos(w.mean + b), which is exact.
Vector gaussianFeatureMoment(const features::FeatureMap& map, const Rule& rule,
                             const Vector& mean, const Matrix& cov_factor);

}  // namespace hybriddyn::cubature
