#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <utility>

#include "hybriddyn/types.hpp"

namespace testutil {

using hybriddyn::Index;
using hybriddyn::Matrix;
using hybriddyn::Rng;
using hybriddyn::Vector;

inline Vector randomVector(Index n, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> gauss(0.0, scale);
  Vector v(n);
  for (Index i = 0; i < n; ++i) v[i] = gauss(rng);
  return v;
}

inline Matrix randomSpd(Index n, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> gauss(0.0, scale);
  Matrix a(n, n);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < n; ++j) a(i, j) = gauss(rng);
  return a * a.transpose() + 0.5 * scale * scale * Matrix::Identity(n, n);
}

inline Vector finiteDifferenceGradient(const std::function<double(const Vector&)>& f,
                                       const Vector& x, double h = 1e-6) {
  Vector g(x.size());
  for (Index i = 0; i < x.size(); ++i) {
    Vector hi = x, lo = x;
    hi[i] += h;
    lo[i] -= h;
    g[i] = (f(hi) - f(lo)) / (2.0 * h);
  }
  return g;
}

/// Dense BFGS maximizer with backtracking; near the optimum the full
/// quasi-Newton step is accepted within rounding headroom, which drives the
/// gradient far below what plain ascent can reach.
inline Vector ascentMaximize(const std::function<double(const Vector&)>& f,
                             const std::function<Vector(const Vector&)>& grad, Vector x,
                             int max_iters = 20000, double grad_tol = 1e-11) {
  const Index n = x.size();
  double fx = f(x);
  Vector g = grad(x);
  Matrix h_inv = Matrix::Identity(n, n) / std::max(1.0, g.norm());
  for (int it = 0; it < max_iters; ++it) {
    if (g.lpNorm<Eigen::Infinity>() < grad_tol) break;
    Vector dir = h_inv * g;  // ascent direction
    double slope = g.dot(dir);
    if (slope <= 0.0) {
      h_inv = Matrix::Identity(n, n) / std::max(1.0, g.norm());
      dir = h_inv * g;
      slope = g.dot(dir);
    }
    const double slack = 1e-13 * std::max(1.0, std::abs(fx));
    double step = 1.0;
    bool accepted = false;
    Vector x_new;
    double f_new = 0.0;
    for (int half = 0; half < 60; ++half) {
      x_new = x + step * dir;
      const double ft = f(x_new);
      const bool armijo = std::isfinite(ft) && ft >= fx + 1e-4 * step * slope;
      const bool rounding_ok = std::isfinite(ft) && half == 0 && ft >= fx - slack;
      if (armijo || rounding_ok) {
        f_new = ft;
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;
    const Vector g_new = grad(x_new);
    const Vector s = x_new - x;
    const Vector y = g_new - g;  // curvature pair of the maximization problem
    const double sy = -s.dot(y);  // positive for concave objectives
    if (sy > 1e-12 * s.norm() * y.norm()) {
      const Vector hy = h_inv * (-y);
      const double yhy = (-y).dot(hy);
      h_inv += ((sy + yhy) / (sy * sy)) * (s * s.transpose()) -
               (hy * s.transpose() + s * hy.transpose()) / sy;
    }
    x = x_new;
    fx = f_new;
    g = g_new;
  }
  return x;
}

// Unconstrained coordinates for an SPD matrix via its lower Cholesky factor
// with a log-parameterized diagonal.
inline Index spdCoordCount(Index n) { return n * (n + 1) / 2; }

inline Matrix spdFromCoords(const Vector& coords, Index n) {
  Matrix l = Matrix::Zero(n, n);
  Index idx = 0;
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j <= i; ++j) {
      const double v = coords[idx++];
      l(i, j) = (i == j) ? std::exp(v) : v;
    }
  return l * l.transpose();
}

inline Vector spdToCoords(const Matrix& m, Index n) {
  Eigen::LLT<Matrix> llt(m);
  const Matrix l = llt.matrixL();
  Vector coords(spdCoordCount(n));
  Index idx = 0;
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j <= i; ++j) coords[idx++] = (i == j) ? std::log(l(i, i)) : l(i, j);
  return coords;
}

/// Chain rule from a full-matrix gradient onto the unconstrained coordinates.
inline Vector spdGradToCoords(const Matrix& grad_full, const Vector& coords, Index n) {
  Matrix l = Matrix::Zero(n, n);
  Index idx = 0;
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j <= i; ++j) {
      const double v = coords[idx++];
      l(i, j) = (i == j) ? std::exp(v) : v;
    }
  const Matrix gl = (grad_full + grad_full.transpose()) * l;
  Vector g(spdCoordCount(n));
  idx = 0;
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j <= i; ++j) g[idx++] = (i == j) ? gl(i, i) * l(i, i) : gl(i, j);
  return g;
}

inline double gaussianLogPdfPrec(const Vector& x, const Vector& mean, const Matrix& prec) {
  const Vector r = x - mean;
  const double logdet = std::log(prec.determinant());
  return 0.5 * logdet - 0.5 * r.dot(prec * r) -
         0.5 * static_cast<double>(x.size()) * std::log(2.0 * M_PI);
}

}  // namespace testutil
