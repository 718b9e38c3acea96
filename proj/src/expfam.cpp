#include "hybriddyn/expfam.hpp"

#include <cmath>
#include <sstream>

namespace hybriddyn::expfam {

namespace {

Matrix spdInverse(const Matrix& m, const char* what) {
  Eigen::LLT<Matrix> llt(symmetrized(m));
  if (llt.info() != Eigen::Success)
    throw DomainError(std::string(what) + ": matrix not positive definite");
  return llt.solve(Matrix::Identity(m.rows(), m.cols()));
}

double spdLogDet(const Matrix& m, const char* what) {
  Eigen::LLT<Matrix> llt(symmetrized(m));
  if (llt.info() != Eigen::Success)
    throw DomainError(std::string(what) + ": matrix not positive definite");
  return 2.0 * Matrix(llt.matrixL()).diagonal().array().log().sum();
}

}  // namespace

// ---------------------------------------------------------------------------
// Posteriors and modes
// ---------------------------------------------------------------------------

DirichletParams dirichletPosterior(const DirichletParams& prior, const CategoricalStats& stats) {
  if (prior.tau.size() != stats.counts.size())
    throw DimensionMismatchError("dirichletPosterior: count/prior size mismatch");
  if (stats.counts.minCoeff() < 0.0) throw DomainError("dirichletPosterior: negative counts");
  return DirichletParams{prior.tau + stats.counts};
}

Vector dirichletPosteriorMode(const DirichletParams& prior, const CategoricalStats& stats) {
  const Vector tau = dirichletPosterior(prior, stats).tau;
  if (tau.minCoeff() <= 1.0)
    throw DegenerateModeError("dirichletPosteriorMode: posterior pseudo-count <= 1");
  return (tau.array() - 1.0).matrix() / (tau.sum() - static_cast<double>(tau.size()));
}

Vector dirichletMapEstimate(const DirichletParams& prior, const CategoricalStats& stats) {
  const Vector tau = dirichletPosterior(prior, stats).tau;
  if (tau.minCoeff() <= 1.0) return tau / tau.sum();  // posterior mean fallback
  return (tau.array() - 1.0).matrix() / (tau.sum() - static_cast<double>(tau.size()));
}

NormalWishartParams nwPosterior(const NormalWishartParams& prior, const GaussianStats& stats) {
  const Index d = prior.m.size();
  if (stats.sum_x.size() != d) throw DimensionMismatchError("nwPosterior: dimension mismatch");
  NormalWishartParams post;
  post.kappa = prior.kappa + stats.sum_w;
  post.m = (prior.kappa * prior.m + stats.sum_x) / post.kappa;
  post.nu = prior.nu + stats.sum_w;
  const Matrix psi_inv = spdInverse(prior.psi, "nwPosterior psi0") + stats.sum_xx +
                         prior.kappa * prior.m * prior.m.transpose() -
                         post.kappa * post.m * post.m.transpose();
  post.psi = spdRepair(psi_inv).llt().solve(Matrix::Identity(d, d));
  post.psi = symmetrized(post.psi);
  return post;
}

std::pair<Vector, Matrix> nwPosteriorMode(const NormalWishartParams& prior,
                                          const GaussianStats& stats) {
  const NormalWishartParams post = nwPosterior(prior, stats);
  const Index d = post.m.size();
  if (post.nu <= static_cast<double>(d))
    throw DomainError("nwPosteriorMode: nu <= d, joint mode undefined");
  Matrix omega = spdRepair((post.nu - static_cast<double>(d)) * post.psi);
  return {post.m, omega};
}

MatrixNormalWishartParams mnwPosterior(const MatrixNormalWishartParams& prior,
                                       const LinearGaussianStats& stats) {
  const Index out = prior.m.rows();
  const Index in = prior.m.cols();
  if (stats.yx.rows() != out || stats.yx.cols() != in)
    throw DimensionMismatchError("mnwPosterior: dimension mismatch");
  MatrixNormalWishartParams post;
  post.kcol = symmetrized(prior.kcol + stats.xx);
  const Matrix rhs = prior.m * prior.kcol + stats.yx;
  Eigen::LLT<Matrix> kllt(spdRepair(post.kcol));
  post.m = kllt.solve(rhs.transpose()).transpose();
  post.nu = prior.nu + stats.sum_w;
  const Matrix psi_inv = spdInverse(prior.psi, "mnwPosterior psi0") + stats.yy +
                         prior.m * prior.kcol * prior.m.transpose() -
                         post.m * post.kcol * post.m.transpose();
  post.psi = spdRepair(psi_inv).llt().solve(Matrix::Identity(out, out));
  post.psi = symmetrized(post.psi);
  return post;
}

std::pair<Matrix, Matrix> mnwPosteriorMode(const MatrixNormalWishartParams& prior,
                                           const LinearGaussianStats& stats) {
  const MatrixNormalWishartParams post = mnwPosterior(prior, stats);
  const Index out = post.m.rows();
  const Index in = post.m.cols();
  // The matrix normal contributes |V|^{in/2} on top of the Wishart exponent,
  // so the joint mode of (A, V) sits at V = (nu - out - 1 + in) psi.
  const double scale = post.nu - static_cast<double>(out) - 1.0 + static_cast<double>(in);
  if (scale <= 0.0) throw DomainError("mnwPosteriorMode: joint mode undefined (nu too small)");
  return {post.m, spdRepair(scale * post.psi)};
}

// ---------------------------------------------------------------------------
// Log densities
// ---------------------------------------------------------------------------

double dirichletLogDensity(const Vector& phi, const DirichletParams& p) {
  if (phi.size() != p.tau.size()) throw DimensionMismatchError("dirichletLogDensity");
  if (phi.minCoeff() <= 0.0) throw DomainError("dirichletLogDensity: off-simplex point");
  double out = std::lgamma(p.tau.sum());
  for (Index k = 0; k < p.tau.size(); ++k)
    out += (p.tau[k] - 1.0) * std::log(phi[k]) - std::lgamma(p.tau[k]);
  return out;
}

double wishartLogDensity(const Matrix& lambda, const Matrix& psi, double nu) {
  const int d = static_cast<int>(lambda.rows());
  const double logdet_lambda = spdLogDet(lambda, "wishartLogDensity lambda");
  const double logdet_psi = spdLogDet(psi, "wishartLogDensity psi");
  const Matrix psi_inv = spdInverse(psi, "wishartLogDensity psi");
  return 0.5 * (nu - d - 1.0) * logdet_lambda - 0.5 * (psi_inv * lambda).trace() -
         0.5 * nu * d * std::log(2.0) - 0.5 * nu * logdet_psi -
         logMultivariateGamma(d, 0.5 * nu);
}

double nwLogDensity(const Vector& mu, const Matrix& omega, const NormalWishartParams& p) {
  const Index d = mu.size();
  const double logdet_omega = spdLogDet(omega, "nwLogDensity omega");
  const Vector r = mu - p.m;
  const double normal = 0.5 * d * std::log(p.kappa) + 0.5 * logdet_omega -
                        0.5 * p.kappa * r.dot(omega * r) - 0.5 * d * std::log(2.0 * M_PI);
  return normal + wishartLogDensity(omega, p.psi, p.nu);
}

double mnwLogDensity(const Matrix& a, const Matrix& v, const MatrixNormalWishartParams& p) {
  const Index out = a.rows();
  const Index in = a.cols();
  const double logdet_v = spdLogDet(v, "mnwLogDensity v");
  const double logdet_k = spdLogDet(p.kcol, "mnwLogDensity kcol");
  const Matrix r = a - p.m;
  const double mn = -0.5 * out * in * std::log(2.0 * M_PI) + 0.5 * in * logdet_v +
                    0.5 * out * logdet_k - 0.5 * (r.transpose() * v * r * p.kcol).trace();
  return mn + wishartLogDensity(v, p.psi, p.nu);
}

double isotropicGaussianLogDensity(double sq_norm, Index n, double alpha) {
  if (alpha <= 0.0) throw DomainError("isotropicGaussianLogDensity: alpha <= 0");
  return 0.5 * n * std::log(alpha) - 0.5 * alpha * sq_norm - 0.5 * n * std::log(2.0 * M_PI);
}

// ---------------------------------------------------------------------------
// Hyperparameters
// ---------------------------------------------------------------------------

HyperParams HyperParams::defaults(Index d, Index m, Index ctl_features, Index k,
                                  bool closed_loop) {
  HyperParams h;
  h.phi_prior.tau = Vector::Ones(k);
  h.init_prior.m = Vector::Zero(d);
  h.init_prior.kappa = 1e-2;
  h.init_prior.psi = Matrix::Identity(d, d);
  h.init_prior.nu = static_cast<double>(d) + 2.0;
  const Index q = d + m + 1;
  h.dyn_prior.m = Matrix::Zero(d, q);
  h.dyn_prior.kcol = 1e-4 * Matrix::Identity(q, q);
  h.dyn_prior.psi = 1e2 * Matrix::Identity(d, d);
  h.dyn_prior.nu = static_cast<double>(d) + 2.0;
  h.has_controller = closed_loop;
  if (closed_loop) {
    h.ctl_prior.m = Matrix::Zero(m, ctl_features);
    h.ctl_prior.kcol = 1e-4 * Matrix::Identity(ctl_features, ctl_features);
    h.ctl_prior.psi = 1e2 * Matrix::Identity(m, m);
    h.ctl_prior.nu = static_cast<double>(m) + 2.0;
  }
  h.omega_alpha = 1e-2;
  return h;
}

double logPriorDensity(const PriorObservations& obs, const HyperParams& h) {
  double out = dirichletLogDensity(obs.phi, h.phi_prior);
  for (const auto& [mu, omega] : obs.init) out += nwLogDensity(mu, omega, h.init_prior);
  for (const auto& [a, v] : obs.dyn) out += mnwLogDensity(a, v, h.dyn_prior);
  if (h.has_controller)
    for (const auto& [gain, delta] : obs.ctl) out += mnwLogDensity(gain, delta, h.ctl_prior);
  if (obs.omega_count > 0)
    out += isotropicGaussianLogDensity(obs.omega_sq_norm, obs.omega_count, h.omega_alpha);
  return out;
}

namespace {

Index lowerTriCount(Index n) { return n * (n + 1) / 2; }

// Unconstrained coordinates of an SPD matrix: lower Cholesky factor entries,
// log on the diagonal.
Vector spdToUnconstrained(const Matrix& psi) {
  Eigen::LLT<Matrix> llt(symmetrized(psi));
  if (llt.info() != Eigen::Success) throw DomainError("hyper: SPD block not positive definite");
  const Matrix l = llt.matrixL();
  Vector out(lowerTriCount(psi.rows()));
  Index idx = 0;
  for (Index i = 0; i < psi.rows(); ++i)
    for (Index j = 0; j <= i; ++j) out[idx++] = (i == j) ? std::log(l(i, i)) : l(i, j);
  return out;
}

Matrix spdFromUnconstrained(const Vector& coords, Index n) {
  Matrix l = Matrix::Zero(n, n);
  Index idx = 0;
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j <= i; ++j) {
      const double v = coords[idx++];
      l(i, j) = (i == j) ? std::exp(v) : v;
    }
  return l * l.transpose();
}

// Chain rule from a full symmetric gradient G = dF/dPsi onto the
// unconstrained Cholesky coordinates.
Vector spdGradToUnconstrained(const Matrix& grad_full, const Matrix& psi) {
  Eigen::LLT<Matrix> llt(symmetrized(psi));
  const Matrix l = llt.matrixL();
  const Matrix gl = (grad_full + grad_full.transpose()) * l;
  Vector out(lowerTriCount(psi.rows()));
  Index idx = 0;
  for (Index i = 0; i < psi.rows(); ++i)
    for (Index j = 0; j <= i; ++j) out[idx++] = (i == j) ? gl(i, i) * l(i, i) : gl(i, j);
  return out;
}

double wishartNuGradient(const std::vector<double>& logdet_obs, const Matrix& psi, double nu) {
  const int d = static_cast<int>(psi.rows());
  const double logdet_psi = spdLogDet(psi, "hyper nu gradient");
  double digamma_sum = 0.0;
  for (int i = 1; i <= d; ++i) digamma_sum += digamma(0.5 * (nu + 1.0 - i));
  double g = 0.0;
  for (double ld : logdet_obs)
    g += 0.5 * ld - 0.5 * d * std::log(2.0) - 0.5 * logdet_psi - 0.5 * digamma_sum;
  return g;
}

struct GroupLayout {
  Index tau, kappa, psi, nu, r, phi, rho, s, gamma, eps, alpha;  // offsets, -1 if masked
  Index total = 0;
};

GroupLayout layoutOf(const HyperParams& h, const HyperMask& mask) {
  GroupLayout lay{};
  Index off = 0;
  auto place = [&off](bool on, Index n) -> Index {
    if (!on) return -1;
    Index at = off;
    off += n;
    return at;
  };
  const Index k = h.phi_prior.tau.size();
  const Index d = h.init_prior.m.size();
  const Index q = h.dyn_prior.kcol.rows();
  lay.tau = place(mask.tau0, k);
  lay.kappa = place(mask.kappa0, 1);
  lay.psi = place(mask.psi0, lowerTriCount(d));
  lay.nu = place(mask.nu0, 1);
  lay.r = place(mask.r0, lowerTriCount(q));
  lay.phi = place(mask.phi0, lowerTriCount(d));
  lay.rho = place(mask.rho0, 1);
  if (h.has_controller) {
    const Index p = h.ctl_prior.kcol.rows();
    const Index m = h.ctl_prior.psi.rows();
    lay.s = place(mask.s0, lowerTriCount(p));
    lay.gamma = place(mask.gamma0, lowerTriCount(m));
    lay.eps = place(mask.eps0, 1);
  } else {
    lay.s = lay.gamma = lay.eps = -1;
  }
  lay.alpha = place(mask.alpha, 1);
  lay.total = off;
  return lay;
}

}  // namespace

Index hyperFreeCount(const HyperParams& h, const HyperMask& mask) {
  return layoutOf(h, mask).total;
}

Vector hyperLogPriorGradient(const PriorObservations& obs, const HyperParams& h,
                             const HyperMask& mask) {
  const GroupLayout lay = layoutOf(h, mask);
  Vector g = Vector::Zero(lay.total);

  if (lay.tau >= 0) {
    const Vector& tau0 = h.phi_prior.tau;
    const double dg_total = digamma(tau0.sum());
    for (Index k = 0; k < tau0.size(); ++k) {
      const double raw = dg_total - digamma(tau0[k]) + std::log(obs.phi[k]);
      g[lay.tau + k] = raw * tau0[k];  // log reparameterization
    }
  }

  const Index d = h.init_prior.m.size();
  if (lay.kappa >= 0) {
    double raw = 0.0;
    for (const auto& [mu, omega] : obs.init)
      raw += 0.5 * d / h.init_prior.kappa - 0.5 * mu.dot(omega * mu);
    g[lay.kappa] = raw * h.init_prior.kappa;
  }
  if (lay.psi >= 0) {
    const Matrix psi_inv = spdInverse(h.init_prior.psi, "hyper psi0");
    Matrix grad_full = Matrix::Zero(d, d);
    for (const auto& [mu, omega] : obs.init)
      grad_full += 0.5 * psi_inv * omega * psi_inv - 0.5 * h.init_prior.nu * psi_inv;
    g.segment(lay.psi, lowerTriCount(d)) = spdGradToUnconstrained(grad_full, h.init_prior.psi);
  }
  if (lay.nu >= 0) {
    std::vector<double> logdets;
    for (const auto& [mu, omega] : obs.init) logdets.push_back(spdLogDet(omega, "hyper omega"));
    const double lb = static_cast<double>(d) - 1.0;
    g[lay.nu] = wishartNuGradient(logdets, h.init_prior.psi, h.init_prior.nu) *
                (h.init_prior.nu - lb);
  }

  auto mnwGroups = [&](const MatrixNormalWishartParams& prior,
                       const std::vector<std::pair<Matrix, Matrix>>& points, Index off_k,
                       Index off_psi, Index off_nu) {
    const Index out_dim = prior.psi.rows();
    const Index in_dim = prior.kcol.rows();
    if (off_k >= 0) {
      const Matrix k_inv = spdInverse(prior.kcol, "hyper kcol");
      Matrix grad_full = Matrix::Zero(in_dim, in_dim);
      for (const auto& [a, v] : points)
        grad_full += 0.5 * out_dim * k_inv - 0.5 * a.transpose() * v * a;
      g.segment(off_k, lowerTriCount(in_dim)) = spdGradToUnconstrained(grad_full, prior.kcol);
    }
    if (off_psi >= 0) {
      const Matrix psi_inv = spdInverse(prior.psi, "hyper mnw psi");
      Matrix grad_full = Matrix::Zero(out_dim, out_dim);
      for (const auto& [a, v] : points)
        grad_full += 0.5 * psi_inv * v * psi_inv - 0.5 * prior.nu * psi_inv;
      g.segment(off_psi, lowerTriCount(out_dim)) = spdGradToUnconstrained(grad_full, prior.psi);
    }
    if (off_nu >= 0) {
      std::vector<double> logdets;
      for (const auto& [a, v] : points) logdets.push_back(spdLogDet(v, "hyper mnw v"));
      const double lb = static_cast<double>(out_dim) - 1.0;
      g[off_nu] = wishartNuGradient(logdets, prior.psi, prior.nu) * (prior.nu - lb);
    }
  };
  mnwGroups(h.dyn_prior, obs.dyn, lay.r, lay.phi, lay.rho);
  if (h.has_controller) mnwGroups(h.ctl_prior, obs.ctl, lay.s, lay.gamma, lay.eps);

  if (lay.alpha >= 0 && obs.omega_count > 0) {
    const double raw = 0.5 * obs.omega_count / h.omega_alpha - 0.5 * obs.omega_sq_norm;
    g[lay.alpha] = raw * h.omega_alpha;
  }
  return g;
}

HyperParams hyperApplyStep(const HyperParams& h, const Vector& step, const HyperMask& mask) {
  const GroupLayout lay = layoutOf(h, mask);
  if (step.size() != lay.total) throw DimensionMismatchError("hyperApplyStep: step size");
  HyperParams out = h;

  if (lay.tau >= 0)
    for (Index k = 0; k < h.phi_prior.tau.size(); ++k)
      out.phi_prior.tau[k] = std::exp(std::log(h.phi_prior.tau[k]) + step[lay.tau + k]);
  if (lay.kappa >= 0)
    out.init_prior.kappa = std::exp(std::log(h.init_prior.kappa) + step[lay.kappa]);
  const Index d = h.init_prior.m.size();
  if (lay.psi >= 0) {
    Vector coords = spdToUnconstrained(h.init_prior.psi) + step.segment(lay.psi, lowerTriCount(d));
    out.init_prior.psi = spdFromUnconstrained(coords, d);
  }
  if (lay.nu >= 0) {
    const double lb = static_cast<double>(d) - 1.0;
    out.init_prior.nu = lb + std::exp(std::log(h.init_prior.nu - lb) + step[lay.nu]);
  }

  auto applyMnw = [&](const MatrixNormalWishartParams& prior, MatrixNormalWishartParams& target,
                      Index off_k, Index off_psi, Index off_nu) {
    const Index out_dim = prior.psi.rows();
    const Index in_dim = prior.kcol.rows();
    if (off_k >= 0) {
      Vector coords = spdToUnconstrained(prior.kcol) + step.segment(off_k, lowerTriCount(in_dim));
      target.kcol = spdFromUnconstrained(coords, in_dim);
    }
    if (off_psi >= 0) {
      Vector coords = spdToUnconstrained(prior.psi) + step.segment(off_psi, lowerTriCount(out_dim));
      target.psi = spdFromUnconstrained(coords, out_dim);
    }
    if (off_nu >= 0) {
      const double lb = static_cast<double>(out_dim) - 1.0;
      target.nu = lb + std::exp(std::log(prior.nu - lb) + step[off_nu]);
    }
  };
  applyMnw(h.dyn_prior, out.dyn_prior, lay.r, lay.phi, lay.rho);
  if (h.has_controller) applyMnw(h.ctl_prior, out.ctl_prior, lay.s, lay.gamma, lay.eps);

  if (lay.alpha >= 0) out.omega_alpha = std::exp(std::log(h.omega_alpha) + step[lay.alpha]);
  return out;
}

}  // namespace hybriddyn::expfam
