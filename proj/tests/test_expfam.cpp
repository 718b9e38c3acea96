#include <doctest.h>

#include <cmath>

#include "hybriddyn/expfam.hpp"
#include "testutil.hpp"

using namespace hybriddyn;
using namespace hybriddyn::expfam;
using testutil::randomSpd;
using testutil::randomVector;

namespace {

Vector vec2(double a, double b) {
  Vector v(2);
  v << a, b;
  return v;
}

// Joint log density of data + normal-Wishart prior as a function of (mu, Lambda).
double nwJoint(const Vector& mu, const Matrix& lambda, const NormalWishartParams& prior,
               const std::vector<std::pair<Vector, double>>& data) {
  double f = nwLogDensity(mu, lambda, prior);
  for (const auto& [x, w] : data) f += w * testutil::gaussianLogPdfPrec(x, mu, lambda);
  return f;
}

double mnwJoint(const Matrix& a, const Matrix& v, const MatrixNormalWishartParams& prior,
                const std::vector<std::tuple<Vector, Vector, double>>& data) {
  double f = mnwLogDensity(a, v, prior);
  for (const auto& [x, y, w] : data) f += w * testutil::gaussianLogPdfPrec(y, a * x, v);
  return f;
}

}  // namespace

TEST_CASE("dirichlet posterior mode matches the grid-maximization oracle") {
  DirichletParams prior{vec2(2.0, 2.0)};
  CategoricalStats stats(2);
  stats.counts = vec2(3.0, 1.0);
  const Vector mode = dirichletPosteriorMode(prior, stats);
  CHECK(mode[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(mode[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(mode.sum() == doctest::Approx(1.0).epsilon(1e-12));

  // grid maximization of the posterior Dirichlet log density over the simplex
  const DirichletParams post = dirichletPosterior(prior, stats);
  double best_p = 0.0, best_f = -1e300;
  for (double p = 1e-4; p < 1.0; p += 1e-4) {
    const double f = dirichletLogDensity(vec2(p, 1.0 - p), post);
    if (f > best_f) {
      best_f = f;
      best_p = p;
    }
  }
  CHECK(std::abs(best_p - mode[0]) < 2e-4);
}

TEST_CASE("dirichlet symmetric and degenerate cases") {
  DirichletParams prior{vec2(2.0, 2.0)};
  CategoricalStats zero(2);
  CHECK(dirichletPosteriorMode(prior, zero)[0] == doctest::Approx(0.5));

  DirichletParams uniform{vec2(1.0, 1.0)};
  CategoricalStats half(2);
  half.counts = vec2(0.5, 0.5);
  CHECK(dirichletMapEstimate(uniform, half)[0] == doctest::Approx(0.5));

  CategoricalStats lopsided(2);
  lopsided.counts = vec2(0.0, 0.5);  // posterior pseudo-count 1.0 <= 1
  CHECK_THROWS_AS(dirichletPosteriorMode(uniform, lopsided), DegenerateModeError);
  const Vector mean = dirichletMapEstimate(uniform, lopsided);
  CHECK(mean[0] == doctest::Approx(1.0 / 2.5));
  CHECK(mean[1] == doctest::Approx(1.5 / 2.5));
}

TEST_CASE("normal-Wishart posterior mode, scalar worked example") {
  NormalWishartParams prior;
  prior.m = Vector::Zero(1);
  prior.kappa = 1.0;
  prior.psi = Matrix::Ones(1, 1);
  prior.nu = 3.0;
  GaussianStats stats(1);
  stats.add(Vector::Ones(1) * 2.0, 1.0);

  const NormalWishartParams post = nwPosterior(prior, stats);
  CHECK(post.kappa == doctest::Approx(2.0));
  CHECK(post.m[0] == doctest::Approx(1.0));
  CHECK(post.nu == doctest::Approx(4.0));
  CHECK(post.psi(0, 0) == doctest::Approx(1.0 / 3.0));

  const auto [mu, omega] = nwPosteriorMode(prior, stats);
  CHECK(mu[0] == doctest::Approx(1.0));
  CHECK(omega(0, 0) == doctest::Approx(1.0));
}

TEST_CASE("normal-Wishart empty data returns the prior mode; symmetry zeroes the mean") {
  NormalWishartParams prior;
  prior.m = Vector::Zero(2);
  prior.kappa = 0.7;
  prior.psi = 2.0 * Matrix::Identity(2, 2);
  prior.nu = 4.5;
  GaussianStats empty(2);
  const auto [mu0, omega0] = nwPosteriorMode(prior, empty);
  CHECK(mu0.norm() == doctest::Approx(0.0));
  CHECK((omega0 - (prior.nu - 2.0) * prior.psi).norm() == doctest::Approx(0.0).epsilon(1e-12));

  GaussianStats sym(2);
  sym.add(vec2(1.5, -0.5), 0.8);
  sym.add(vec2(-1.5, 0.5), 0.8);
  const auto [mu_sym, omega_sym] = nwPosteriorMode(prior, sym);
  CHECK(mu_sym.norm() < 1e-14);
  (void)omega_sym;
}

TEST_CASE("matrix-normal-Wishart: near-flat prior recovers least squares") {
  MatrixNormalWishartParams prior;
  prior.m = Matrix::Zero(1, 1);
  prior.kcol = 1e-6 * Matrix::Identity(1, 1);
  prior.psi = 1e6 * Matrix::Identity(1, 1);
  prior.nu = 3.0;
  LinearGaussianStats stats(1, 1);
  stats.add(Vector::Ones(1) * 2.0, Vector::Ones(1) * 4.0, 1.0);
  const auto [a, v] = mnwPosteriorMode(prior, stats);
  CHECK(a(0, 0) == doctest::Approx(2.0).epsilon(1e-5));
  CHECK(v(0, 0) > 0.0);

  LinearGaussianStats empty(1, 1);
  const auto [a0, v0] = mnwPosteriorMode(prior, empty);
  CHECK(a0(0, 0) == doctest::Approx(0.0));
}

TEST_CASE("duplicated data with halved weights reproduces the original fit") {
  Rng rng(7);
  MatrixNormalWishartParams prior;
  prior.m = Matrix::Zero(2, 3);
  prior.kcol = 0.1 * Matrix::Identity(3, 3);
  prior.psi = Matrix::Identity(2, 2);
  prior.nu = 4.0;
  LinearGaussianStats full(2, 3), halved(2, 3);
  for (int i = 0; i < 12; ++i) {
    const Vector x = randomVector(3, rng);
    const Vector y = randomVector(2, rng);
    full.add(x, y, 1.0);
    halved.add(x, y, 0.5);
    halved.add(x, y, 0.5);
  }
  const auto [a1, v1] = mnwPosteriorMode(prior, full);
  const auto [a2, v2] = mnwPosteriorMode(prior, halved);
  CHECK((a1 - a2).lpNorm<Eigen::Infinity>() < 1e-12);
  CHECK((v1 - v2).lpNorm<Eigen::Infinity>() < 1e-9);
}

TEST_CASE("additivity: batched and sequential posteriors agree") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const Index d = 1 + static_cast<Index>(rng() % 3);
    NormalWishartParams prior;
    prior.m = Vector::Zero(d);
    prior.kappa = 0.5 + 0.1 * static_cast<double>(rng() % 10);
    prior.psi = randomSpd(d, rng);
    prior.nu = static_cast<double>(d) + 1.5;
    GaussianStats s1(d), s2(d), merged(d);
    std::uniform_real_distribution<double> unif(0.1, 2.0);
    for (int i = 0; i < 8; ++i) {
      const Vector x = randomVector(d, rng);
      const double w = unif(rng);
      if (i % 2 == 0)
        s1.add(x, w);
      else
        s2.add(x, w);
      merged.add(x, w);
    }
    const NormalWishartParams direct = nwPosterior(prior, merged);
    const NormalWishartParams sequential = nwPosterior(nwPosterior(prior, s1), s2);
    CHECK(direct.kappa == doctest::Approx(sequential.kappa).epsilon(1e-12));
    CHECK((direct.m - sequential.m).lpNorm<Eigen::Infinity>() < 1e-12);
    CHECK(direct.nu == doctest::Approx(sequential.nu).epsilon(1e-12));
    CHECK((direct.psi - sequential.psi).lpNorm<Eigen::Infinity>() <
          1e-12 * std::max(1.0, direct.psi.lpNorm<Eigen::Infinity>()));
  }
}

TEST_CASE("weight scaling follows the update formulas exactly") {
  Rng rng(13);
  GaussianStats stats(2), scaled(2);
  for (int i = 0; i < 6; ++i) {
    const Vector x = randomVector(2, rng);
    stats.add(x, 0.7);
    scaled.add(x, 2.1);  // three times the weight
  }
  NormalWishartParams prior;
  prior.m = Vector::Zero(2);
  prior.kappa = 1.0;
  prior.psi = Matrix::Identity(2, 2);
  prior.nu = 4.0;
  const auto post = nwPosterior(prior, scaled);
  CHECK(post.kappa == doctest::Approx(prior.kappa + 3.0 * stats.sum_w));
  CHECK(post.nu == doctest::Approx(prior.nu + 3.0 * stats.sum_w));
}

TEST_CASE("posterior modes match numeric maximization of the joint log density") {
  Rng rng(17);
  std::uniform_real_distribution<double> unif(0.3, 1.5);
  for (int trial = 0; trial < 10; ++trial) {
    const Index d = 1 + static_cast<Index>(rng() % 3);

    NormalWishartParams prior;
    prior.m = Vector::Zero(d);
    prior.kappa = unif(rng);
    prior.psi = randomSpd(d, rng);
    prior.nu = static_cast<double>(d) + 1.0 + unif(rng);
    std::vector<std::pair<Vector, double>> data;
    GaussianStats stats(d);
    for (int i = 0; i < 10; ++i) {
      const Vector x = randomVector(d, rng);
      const double w = unif(rng);
      data.emplace_back(x, w);
      stats.add(x, w);
    }
    const auto [mu_hat, omega_hat] = nwPosteriorMode(prior, stats);

    // maximize over (mu, chol coords of Lambda) with analytic gradients
    const Index nc = testutil::spdCoordCount(d);
    auto unpack = [&](const Vector& p) {
      return std::make_pair(Vector(p.head(d)), testutil::spdFromCoords(p.tail(nc), d));
    };
    auto f = [&](const Vector& p) {
      const auto [mu, lambda] = unpack(p);
      return nwJoint(mu, lambda, prior, data);
    };
    auto grad = [&](const Vector& p) {
      const auto [mu, lambda] = unpack(p);
      const Matrix lambda_inv = lambda.llt().solve(Matrix::Identity(d, d));
      Vector gmu = -prior.kappa * (lambda * mu);
      Matrix glam = 0.5 * (1.0 + prior.nu - d - 1.0) * lambda_inv -
                    0.5 * prior.psi.llt().solve(Matrix::Identity(d, d)) -
                    0.5 * prior.kappa * mu * mu.transpose();
      for (const auto& [x, w] : data) {
        gmu += w * (lambda * (x - mu));
        glam += 0.5 * w * lambda_inv - 0.5 * w * (x - mu) * (x - mu).transpose();
      }
      Vector g(d + nc);
      g.head(d) = gmu;
      g.tail(nc) = testutil::spdGradToCoords(glam, Vector(p.tail(nc)), d);
      return g;
    };
    Vector p0(d + nc);
    p0.head(d) = stats.sum_x / stats.sum_w;
    p0.tail(nc) = testutil::spdToCoords(Matrix::Identity(d, d), d);
    const Vector p_star = testutil::ascentMaximize(f, grad, p0);
    const auto [mu_num, lambda_num] = unpack(p_star);
    CHECK((mu_num - mu_hat).lpNorm<Eigen::Infinity>() < 1e-6);
    CHECK((lambda_num - omega_hat).lpNorm<Eigen::Infinity>() <
          1e-6 * std::max(1.0, omega_hat.lpNorm<Eigen::Infinity>()));
  }
}

TEST_CASE("matrix-normal-Wishart mode matches numeric maximization") {
  Rng rng(23);
  std::uniform_real_distribution<double> unif(0.3, 1.5);
  for (int trial = 0; trial < 8; ++trial) {
    const Index out = 1 + static_cast<Index>(rng() % 3);
    const Index in = 1 + static_cast<Index>(rng() % 3);
    MatrixNormalWishartParams prior;
    prior.m = Matrix::Zero(out, in);
    prior.kcol = randomSpd(in, rng);
    prior.psi = randomSpd(out, rng);
    prior.nu = static_cast<double>(out) + 1.0 + unif(rng);
    std::vector<std::tuple<Vector, Vector, double>> data;
    LinearGaussianStats stats(out, in);
    for (int i = 0; i < 12; ++i) {
      const Vector x = randomVector(in, rng);
      const Vector y = randomVector(out, rng);
      const double w = unif(rng);
      data.emplace_back(x, y, w);
      stats.add(x, y, w);
    }
    const auto [a_hat, v_hat] = mnwPosteriorMode(prior, stats);

    const Index nc = testutil::spdCoordCount(out);
    auto unpack = [&](const Vector& p) {
      Matrix a(out, in);
      for (Index j = 0; j < in; ++j) a.col(j) = p.segment(j * out, out);
      return std::make_pair(a, testutil::spdFromCoords(p.tail(nc), out));
    };
    auto f = [&](const Vector& p) {
      const auto [a, v] = unpack(p);
      return mnwJoint(a, v, prior, data);
    };
    auto grad = [&](const Vector& p) {
      const auto [a, v] = unpack(p);
      const Matrix v_inv = v.llt().solve(Matrix::Identity(out, out));
      Matrix ga = -v * a * prior.kcol;
      Matrix gv = 0.5 * (in + prior.nu - out - 1.0) * v_inv -
                  0.5 * prior.psi.llt().solve(Matrix::Identity(out, out)) -
                  0.5 * a * prior.kcol * a.transpose();
      for (const auto& [x, y, w] : data) {
        const Vector r = y - a * x;
        ga += w * (v * r) * x.transpose();
        gv += 0.5 * w * v_inv - 0.5 * w * r * r.transpose();
      }
      Vector g(out * in + nc);
      for (Index j = 0; j < in; ++j) g.segment(j * out, out) = ga.col(j);
      g.tail(nc) = testutil::spdGradToCoords(gv, Vector(p.tail(nc)), out);
      return g;
    };
    Vector p0 = Vector::Zero(out * in + nc);
    p0.tail(nc) = testutil::spdToCoords(Matrix::Identity(out, out), out);
    const Vector p_star = testutil::ascentMaximize(f, grad, p0);
    const auto [a_num, v_num] = unpack(p_star);
    CHECK((a_num - a_hat).lpNorm<Eigen::Infinity>() <
          1e-6 * std::max(1.0, a_hat.lpNorm<Eigen::Infinity>()));
    CHECK((v_num - v_hat).lpNorm<Eigen::Infinity>() <
          1e-6 * std::max(1.0, v_hat.lpNorm<Eigen::Infinity>()));
  }
}

TEST_CASE("uniform Dirichlet density is the constant zero for K = 2") {
  DirichletParams uniform{vec2(1.0, 1.0)};
  for (double p : {0.1, 0.37, 0.85})
    CHECK(dirichletLogDensity(vec2(p, 1.0 - p), uniform) == doctest::Approx(0.0));
}

TEST_CASE("isotropic Gaussian prior on the link weights peaks at zero") {
  const double at_zero = isotropicGaussianLogDensity(0.0, 5, 1.0);
  const double away = isotropicGaussianLogDensity(2.5, 5, 1.0);
  CHECK(at_zero > away);
}

TEST_CASE("normal-Wishart density at its own mode dominates nearby points") {
  Rng rng(29);
  NormalWishartParams prior;
  prior.m = Vector::Zero(2);
  prior.kappa = 1.3;
  prior.psi = randomSpd(2, rng);
  prior.nu = 4.2;
  const Vector mu_mode = prior.m;
  const Matrix omega_mode = (prior.nu - 2.0) * prior.psi;
  const double at_mode = nwLogDensity(mu_mode, omega_mode, prior);
  for (int i = 0; i < 10; ++i) {
    const Vector dmu = 1e-3 * randomVector(2, rng);
    Matrix domega = 1e-3 * randomSpd(2, rng);
    CHECK(at_mode >= nwLogDensity(mu_mode + dmu, omega_mode + domega, prior) - 1e-12);
  }
}

TEST_CASE("hyperparameter gradient matches central finite differences") {
  Rng rng(31);
  const Index d = 2, m = 1, p = 3, k = 2;
  HyperParams h = HyperParams::defaults(d, m, p, k, true);
  h.init_prior.psi = randomSpd(d, rng);
  h.dyn_prior.psi = randomSpd(d, rng);
  h.dyn_prior.kcol = randomSpd(d + m + 1, rng);
  h.ctl_prior.psi = randomSpd(m, rng);
  h.ctl_prior.kcol = randomSpd(p, rng);
  h.omega_alpha = 0.4;

  PriorObservations obs;
  obs.phi = vec2(0.3, 0.7);
  for (int z = 0; z < k; ++z) {
    obs.init.emplace_back(randomVector(d, rng), randomSpd(d, rng));
    obs.dyn.emplace_back(Matrix::Random(d, d + m + 1), randomSpd(d, rng));
    obs.ctl.emplace_back(Matrix::Random(m, p), randomSpd(m, rng));
  }
  obs.omega_sq_norm = 3.7;
  obs.omega_count = 12;

  HyperMask mask;
  const Vector analytic = hyperLogPriorGradient(obs, h, mask);
  const Index n = hyperFreeCount(h, mask);
  REQUIRE(analytic.size() == n);
  auto f = [&](const Vector& step) { return logPriorDensity(obs, hyperApplyStep(h, step, mask)); };
  const Vector numeric = testutil::finiteDifferenceGradient(f, Vector::Zero(n), 1e-6);
  for (Index i = 0; i < n; ++i) {
    const double scale = std::max({1.0, std::abs(analytic[i]), std::abs(numeric[i])});
    CHECK(std::abs(analytic[i] - numeric[i]) / scale < 1e-5);
  }
}

TEST_CASE("hyper gradient vanishes at an optimized h and alpha moves against large weights") {
  Rng rng(37);
  const Index d = 2;
  HyperParams h = HyperParams::defaults(d, 0, 0, 2, false);
  PriorObservations obs;
  obs.phi = vec2(0.4, 0.6);
  for (int z = 0; z < 2; ++z) {
    obs.init.emplace_back(randomVector(d, rng, 0.3), randomSpd(d, rng));
    obs.dyn.emplace_back(Matrix::Random(d, d + 1), randomSpd(d, rng));
  }
  obs.omega_sq_norm = 400.0;
  obs.omega_count = 4;
  HyperMask mask;

  // alpha * ||omega||^2 >> count: the log-alpha gradient must be negative
  h.omega_alpha = 1.0;
  const Vector g0 = hyperLogPriorGradient(obs, h, mask);
  CHECK(g0[hyperFreeCount(h, mask) - 1] < 0.0);

  // ascend to a stationary h, then the gradient must be tiny; tau0 is masked
  // because a single observed simplex point admits no finite maximizer
  mask.tau0 = false;
  const Index n = hyperFreeCount(h, mask);
  auto f = [&](const Vector& s) { return logPriorDensity(obs, hyperApplyStep(h, s, mask)); };
  auto grad = [&](const Vector& s) {
    return hyperLogPriorGradient(obs, hyperApplyStep(h, s, mask), mask);
  };
  const Vector s_star = testutil::ascentMaximize(f, grad, Vector::Zero(n), 50000, 1e-8);
  h = hyperApplyStep(h, s_star, mask);
  CHECK(hyperLogPriorGradient(obs, h, mask).lpNorm<Eigen::Infinity>() < 1e-6);
}

TEST_CASE("masked hyperparameter groups are never touched") {
  Rng rng(41);
  HyperParams h = HyperParams::defaults(2, 0, 0, 2, false);
  HyperMask mask;
  mask.psi0 = false;
  mask.tau0 = false;
  PriorObservations obs;
  obs.phi = vec2(0.2, 0.8);
  obs.init.emplace_back(randomVector(2, rng), randomSpd(2, rng));
  obs.dyn.emplace_back(Matrix::Random(2, 3), randomSpd(2, rng));
  const Vector g = hyperLogPriorGradient(obs, h, mask);
  const HyperParams h2 = hyperApplyStep(h, g, mask);
  CHECK((h2.phi_prior.tau - h.phi_prior.tau).norm() == 0.0);
  CHECK((h2.init_prior.psi - h.init_prior.psi).norm() == 0.0);
  CHECK(h2.init_prior.kappa != h.init_prior.kappa);
}
