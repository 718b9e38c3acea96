#pragma once

#include <utility>
#include <vector>

#include "hybriddyn/linalg.hpp"
#include "hybriddyn/types.hpp"

namespace hybriddyn::expfam {

// ---------------------------------------------------------------------------
// Prior parameter blocks
// ---------------------------------------------------------------------------

struct DirichletParams {
  Vector tau;  // pseudo-counts, all entries > 0
};

/// Normal-Wishart over (mu, Omega); the Wishart is parameterized by the scale
/// matrix psi and degrees of freedom nu (precision-based, nu > d-1).
struct NormalWishartParams {
  Vector m;
  double kappa = 1.0;
  Matrix psi;
  double nu = 0.0;
};

/// Matrix-normal-Wishart over a mapping A : R^d -> R^m and its row precision V.
/// kcol is the d x d column precision, psi/nu parameterize the Wishart on V.
struct MatrixNormalWishartParams {
  Matrix m;     // mean mapping, out x in
  Matrix kcol;  // in x in column precision
  Matrix psi;   // out x out Wishart scale
  double nu = 0.0;
};

// ---------------------------------------------------------------------------
// Weighted sufficient statistics
// ---------------------------------------------------------------------------

struct CategoricalStats {
  Vector counts;  // per-category weighted counts

  explicit CategoricalStats(Index k) : counts(Vector::Zero(k)) {}
  void add(Index k, double w) { counts[k] += w; }
  void merge(const CategoricalStats& o) { counts += o.counts; }
};

struct GaussianStats {
  Vector sum_x;   // sum_n w_n x_n
  Matrix sum_xx;  // sum_n w_n x_n x_n^T
  double sum_w = 0.0;

  explicit GaussianStats(Index d) : sum_x(Vector::Zero(d)), sum_xx(Matrix::Zero(d, d)) {}
  void add(const Vector& x, double w) {
    sum_x.noalias() += w * x;
    sum_xx.noalias() += w * x * x.transpose();
    sum_w += w;
  }
  void merge(const GaussianStats& o) {
    sum_x += o.sum_x;
    sum_xx += o.sum_xx;
    sum_w += o.sum_w;
  }
};

struct LinearGaussianStats {
  Matrix yx;  // Y W X^T, out x in
  Matrix xx;  // X W X^T, in x in
  Matrix yy;  // Y W Y^T, out x out
  double sum_w = 0.0;

  LinearGaussianStats(Index out, Index in)
      : yx(Matrix::Zero(out, in)), xx(Matrix::Zero(in, in)), yy(Matrix::Zero(out, out)) {}
  void add(const Vector& x, const Vector& y, double w) {
    yx.noalias() += w * y * x.transpose();
    xx.noalias() += w * x * x.transpose();
    yy.noalias() += w * y * y.transpose();
    sum_w += w;
  }
  void merge(const LinearGaussianStats& o) {
    yx += o.yx;
    xx += o.xx;
    yy += o.yy;
    sum_w += o.sum_w;
  }
};

// ---------------------------------------------------------------------------
// Posterior parameters and modes
// ---------------------------------------------------------------------------

DirichletParams dirichletPosterior(const DirichletParams& prior, const CategoricalStats& stats);

/// Mode (tau - 1) / (sum tau - K); throws DegenerateModeError when any
/// posterior pseudo-count is <= 1 (the mode then sits on the simplex boundary).
Vector dirichletPosteriorMode(const DirichletParams& prior, const CategoricalStats& stats);

/// Mode with mean fallback on DegenerateMode, as used by the M-step.
Vector dirichletMapEstimate(const DirichletParams& prior, const CategoricalStats& stats);

NormalWishartParams nwPosterior(const NormalWishartParams& prior, const GaussianStats& stats);

/// Joint mode of the normal-Wishart: mu = m, Omega = (nu - d) psi.
std::pair<Vector, Matrix> nwPosteriorMode(const NormalWishartParams& prior,
                                          const GaussianStats& stats);

MatrixNormalWishartParams mnwPosterior(const MatrixNormalWishartParams& prior,
                                       const LinearGaussianStats& stats);

/// Joint mode of the matrix-normal-Wishart: A = M, V = (nu - out - 1 + in) psi.
std::pair<Matrix, Matrix> mnwPosteriorMode(const MatrixNormalWishartParams& prior,
                                           const LinearGaussianStats& stats);

// ---------------------------------------------------------------------------
// Log densities (normalized)
// ---------------------------------------------------------------------------

double dirichletLogDensity(const Vector& phi, const DirichletParams& p);
double wishartLogDensity(const Matrix& lambda, const Matrix& psi, double nu);
double nwLogDensity(const Vector& mu, const Matrix& omega, const NormalWishartParams& p);
double mnwLogDensity(const Matrix& a, const Matrix& v, const MatrixNormalWishartParams& p);
/// Zero-mean isotropic Gaussian with scalar precision alpha over n weights.
double isotropicGaussianLogDensity(double sq_norm, Index n, double alpha);

// ---------------------------------------------------------------------------
// Hyperparameter set and empirical-Bayes gradient
// ---------------------------------------------------------------------------

/// The full prior hyperparameter set h. The controller block is ignored for
/// open-loop models (has_controller = false).
struct HyperParams {
  DirichletParams phi_prior;                // tau0
  NormalWishartParams init_prior;           // (0, kappa0, Psi0, nu0)
  MatrixNormalWishartParams dyn_prior;      // (0, R0, Phi0, rho0)
  MatrixNormalWishartParams ctl_prior;      // (0, S0, Gamma0, eps0)
  double omega_alpha = 1e-2;                // precision of the logit-weight prior
  bool has_controller = false;

  /// Weakly informative defaults for given dimensions.
  static HyperParams defaults(Index d, Index m, Index ctl_features, Index k, bool closed_loop);
};

/// Per-group adaptation mask for the empirical-Bayes step.
struct HyperMask {
  bool tau0 = true;
  bool kappa0 = true, psi0 = true, nu0 = true;
  bool r0 = true, phi0 = true, rho0 = true;
  bool s0 = true, gamma0 = true, eps0 = true;
  bool alpha = true;
};

/// Point estimates the factorized prior p(theta | h) is evaluated at.
struct PriorObservations {
  Vector phi;
  std::vector<std::pair<Vector, Matrix>> init;  // (mu, Omega) per regime
  std::vector<std::pair<Matrix, Matrix>> dyn;   // ([A B c], Lambda) per regime
  std::vector<std::pair<Matrix, Matrix>> ctl;   // (K, Delta) per regime
  double omega_sq_norm = 0.0;
  Index omega_count = 0;
};

double logPriorDensity(const PriorObservations& obs, const HyperParams& h);

/// Dimension of the unconstrained hyperparameter vector (masked groups excluded).
Index hyperFreeCount(const HyperParams& h, const HyperMask& mask);

/// Gradient of log p(theta_hat | h) with respect to h in the unconstrained
/// reparameterization (log for positive scalars and pseudo-counts, Cholesky
/// factor with log diagonal for SPD matrices, shifted log for degrees of
/// freedom). Layout matches hyperApplyStep.
Vector hyperLogPriorGradient(const PriorObservations& obs, const HyperParams& h,
                             const HyperMask& mask);

/// Apply an additive step in the unconstrained coordinates and map back.
HyperParams hyperApplyStep(const HyperParams& h, const Vector& step, const HyperMask& mask);

}  // namespace hybriddyn::expfam
