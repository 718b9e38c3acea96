#pragma once

#include <vector>

#include "hybriddyn/em.hpp"
#include "hybriddyn/rarhmm.hpp"
#include "testutil.hpp"

namespace testutil {

using hybriddyn::rarhmm::ModelParams;
using hybriddyn::rarhmm::Trajectory;

/// Random but well-conditioned model for oracle comparisons.
inline ModelParams randomModel(int k, Index d, Index m, bool closed, Rng& rng,
                               int ctl_degree = 1, double link_scale = 0.5) {
  ModelParams model;
  model.k = k;
  model.d = d;
  model.m = m;
  Vector phi = randomVector(k, rng).array().abs() + 0.2;
  model.phi = phi / phi.sum();
  for (int z = 0; z < k; ++z) {
    hybriddyn::rarhmm::RegimeInit init;
    init.mu = randomVector(d, rng);
    init.omega.set(randomSpd(d, rng));
    model.init.push_back(std::move(init));

    hybriddyn::rarhmm::RegimeDynamics dyn;
    dyn.a = 0.4 * Matrix::Random(d, d) + 0.4 * Matrix::Identity(d, d);
    dyn.b = m > 0 ? Matrix(0.3 * Matrix::Random(d, m)) : Matrix(d, 0);
    dyn.c = 0.3 * randomVector(d, rng);
    dyn.lambda.set(randomSpd(d, rng) + 2.0 * Matrix::Identity(d, d));
    model.dynamics.push_back(std::move(dyn));
  }
  if (closed) {
    model.ctl_features = hybriddyn::features::FeatureMap::polynomial(d, ctl_degree);
    for (int z = 0; z < k; ++z) {
      hybriddyn::rarhmm::RegimeController ctl;
      ctl.gain = 0.4 * Matrix::Random(m, model.ctl_features.size());
      ctl.delta.set(randomSpd(m, rng) + 2.0 * Matrix::Identity(m, m));
      model.controller.push_back(std::move(ctl));
    }
  }
  model.link = hybriddyn::rarhmm::LogitLink(hybriddyn::rarhmm::LogitLink::Kind::Linear, k, d, m,
                                            0, link_scale, rng);
  return model;
}

inline Trajectory sampleTrajectory(const ModelParams& model, Index t_len, Rng& rng) {
  Trajectory traj;
  traj.x.resize(t_len, model.d);
  traj.u.resize(t_len, model.m);
  std::discrete_distribution<int> first(model.phi.data(), model.phi.data() + model.k);
  int z = first(rng);
  Vector x = model.init[z].omega.sample(model.init[z].mu, rng);
  for (Index t = 0; t < t_len; ++t) {
    traj.x.row(t) = x.transpose();
    Vector u(model.m);
    if (model.m > 0) {
      if (model.closedLoop())
        u = hybriddyn::rarhmm::sampleAction(model, z, x, rng);
      else
        u = randomVector(model.m, rng);
      traj.u.row(t) = u.transpose();
    }
    if (t + 1 < t_len) {
      const auto step = hybriddyn::rarhmm::sampleStep(model, z, x, u, rng);
      z = step.z;
      x = step.x;
    }
  }
  return traj;
}

struct EnumerationResult {
  double loglik = 0.0;
  Matrix gamma;
  std::vector<Matrix> xi;
};

/// Exhaustive K^T path enumeration of the regime posterior; independent of
/// the forward-backward recursions under test.
inline EnumerationResult enumeratePosteriors(const Trajectory& traj, const ModelParams& model) {
  const Index t_len = traj.length();
  const int k = model.k;
  std::vector<int> path(t_len, 0);
  std::vector<double> logps;
  std::vector<std::vector<int>> paths;
  auto stepLogLike = [&](Index t, int z) {
    const Vector xt = traj.x.row(t).transpose();
    double ll;
    if (t == 0) {
      ll = model.init[z].omega.logpdf(xt, model.init[z].mu);
    } else {
      const Vector xp = traj.x.row(t - 1).transpose();
      const Vector up = model.m > 0 ? Vector(traj.u.row(t - 1).transpose()) : Vector(0);
      ll = model.dynamics[z].lambda.logpdf(xt, model.dynamics[z].mean(xp, up));
    }
    if (model.closedLoop()) {
      const Vector ut = traj.u.row(t).transpose();
      ll += model.controller[z].delta.logpdf(ut, model.controllerMean(z, xt));
    }
    return ll;
  };
  while (true) {
    double logp = std::log(model.phi[path[0]]) + stepLogLike(0, path[0]);
    for (Index t = 1; t < t_len; ++t) {
      const Vector xp = traj.x.row(t - 1).transpose();
      const Vector up = model.m > 0 ? Vector(traj.u.row(t - 1).transpose()) : Vector(0);
      logp += std::log(model.link.row(path[t - 1], xp, up)[path[t]]);
      logp += stepLogLike(t, path[t]);
    }
    logps.push_back(logp);
    paths.push_back(path);
    Index t = 0;
    for (; t < t_len; ++t) {
      if (++path[t] < k) break;
      path[t] = 0;
    }
    if (t == t_len) break;
  }
  Eigen::Map<Vector> lp(logps.data(), static_cast<Index>(logps.size()));
  EnumerationResult out;
  out.loglik = hybriddyn::logSumExp(lp);
  out.gamma = Matrix::Zero(t_len, k);
  out.xi.assign(t_len > 1 ? t_len - 1 : 0, Matrix::Zero(k, k));
  for (std::size_t i = 0; i < paths.size(); ++i) {
    const double w = std::exp(logps[i] - out.loglik);
    for (Index t = 0; t < t_len; ++t) out.gamma(t, paths[i][t]) += w;
    for (Index t = 0; t + 1 < t_len; ++t) out.xi[t](paths[i][t], paths[i][t + 1]) += w;
  }
  return out;
}

}  // namespace testutil
