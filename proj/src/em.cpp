#include "hybriddyn/em.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <thread>

namespace hybriddyn::em {

namespace {

// Per-step log-likelihood factors: emissions at t = 0 come from the initial
// Gaussians, afterwards from the affine dynamics; closed-loop models add the
// controller factor at every step.
Matrix logLikelihoodFactors(const Trajectory& traj, const ModelParams& model) {
  const Index t_len = traj.length();
  Matrix loglike(t_len, model.k);
  Matrix ctl_feats;
  if (model.closedLoop()) {
    ctl_feats.resize(t_len, model.ctl_features.size());
    for (Index t = 0; t < t_len; ++t)
      ctl_feats.row(t) = model.ctl_features(Vector(traj.x.row(t).transpose())).transpose();
  }
  for (Index t = 0; t < t_len; ++t) {
    const Vector xt = traj.x.row(t).transpose();
    for (int z = 0; z < model.k; ++z) {
      double ll;
      if (t == 0) {
        ll = model.init[z].omega.logpdf(xt, model.init[z].mu);
      } else {
        const Vector xprev = traj.x.row(t - 1).transpose();
        const Vector uprev = model.m > 0 ? Vector(traj.u.row(t - 1).transpose()) : Vector(0);
        ll = model.dynamics[z].lambda.logpdf(xt, model.dynamics[z].mean(xprev, uprev));
      }
      if (model.closedLoop()) {
        const Vector ut = traj.u.row(t).transpose();
        const Vector mean = model.controller[z].gain * ctl_feats.row(t).transpose();
        ll += model.controller[z].delta.logpdf(ut, mean);
      }
      loglike(t, z) = ll;
    }
  }
  return loglike;
}

double rowEntropy(const Matrix& gamma) {
  double h = 0.0;
  for (Index t = 0; t < gamma.rows(); ++t)
    for (Index k = 0; k < gamma.cols(); ++k)
      if (gamma(t, k) > 0.0) h -= gamma(t, k) * std::log(gamma(t, k));
  return h / static_cast<double>(gamma.rows());
}

}  // namespace

ForwardResult forwardMessages(const Trajectory& traj, const ModelParams& model) {
  const Index t_len = traj.length();
  const int k = model.k;
  ForwardResult res;
  res.alpha.resize(t_len, k);
  res.log_normalizers.resize(t_len);
  res.shift.resize(t_len);
  res.scale.resize(t_len);
  res.like.resize(t_len, k);
  res.trans.reserve(t_len > 0 ? t_len - 1 : 0);

  const Matrix loglike = logLikelihoodFactors(traj, model);
  for (Index t = 0; t < t_len; ++t) {
    res.shift[t] = loglike.row(t).maxCoeff();
    if (!std::isfinite(res.shift[t]))
      throw FilterUnderflowError("forwardMessages: non-finite likelihood at step " +
                                 std::to_string(t));
    res.like.row(t) = (loglike.row(t).array() - res.shift[t]).exp();
  }

  Vector a = model.phi.cwiseProduct(res.like.row(0).transpose());
  for (Index t = 0; t < t_len; ++t) {
    if (t > 0) {
      const Vector xprev = traj.x.row(t - 1).transpose();
      const Vector uprev = model.m > 0 ? Vector(traj.u.row(t - 1).transpose()) : Vector(0);
      res.trans.push_back(model.link.matrix(xprev, uprev));
      const Vector pred = res.trans.back().transpose() * res.alpha.row(t - 1).transpose();
      a = pred.cwiseProduct(res.like.row(t).transpose());
    }
    const double scale = a.sum();
    if (!(scale > 0.0) || !std::isfinite(scale))
      throw FilterUnderflowError("forwardMessages: zero normalizer at step " +
                                 std::to_string(t));
    res.scale[t] = scale;
    res.alpha.row(t) = (a / scale).transpose();
    res.log_normalizers[t] = std::log(scale) + res.shift[t];
  }
  return res;
}

Matrix backwardMessages(const Trajectory& traj, const ModelParams& model,
                        const ForwardResult& fwd) {
  const Index t_len = traj.length();
  const int k = model.k;
  if (fwd.alpha.rows() != t_len)
    throw DimensionMismatchError("backwardMessages: forward pass does not match trajectory");
  Matrix beta = Matrix::Zero(t_len, k);
  beta.row(t_len - 1).setOnes();
  for (Index t = t_len - 2; t >= 0; --t) {
    const Vector weighted =
        beta.row(t + 1).transpose().cwiseProduct(fwd.like.row(t + 1).transpose());
    beta.row(t) = (fwd.trans[t] * weighted / fwd.scale[t + 1]).transpose();
    if (!beta.row(t).allFinite())
      throw FilterUnderflowError("backwardMessages: non-finite message at step " +
                                 std::to_string(t));
  }
  return beta;
}

SmoothedPosteriors smoothedPosteriors(const Trajectory& traj, const ModelParams& model) {
  const ForwardResult fwd = forwardMessages(traj, model);
  const Matrix beta = backwardMessages(traj, model, fwd);
  SmoothedPosteriors post;
  post.loglik = fwd.log_normalizers.sum();
  post.gamma = fwd.alpha.cwiseProduct(beta);
  const Index t_len = traj.length();
  post.xi.reserve(t_len > 0 ? t_len - 1 : 0);
  for (Index t = 0; t + 1 < t_len; ++t) {
    Matrix xi = fwd.trans[t];
    for (int i = 0; i < model.k; ++i)
      for (int j = 0; j < model.k; ++j)
        xi(i, j) *= fwd.alpha(t, i) * fwd.like(t + 1, j) * beta(t + 1, j) / fwd.scale[t + 1];
    post.xi.push_back(std::move(xi));
  }
  return post;
}

std::vector<SmoothedPosteriors> eStep(const Dataset& data, const ModelParams& model,
                                      int threads) {
  std::vector<SmoothedPosteriors> posts(data.size());
  const int workers = std::max(1, std::min<int>(threads, static_cast<int>(data.size())));
  if (workers == 1) {
    for (std::size_t n = 0; n < data.size(); ++n)
      posts[n] = smoothedPosteriors(data[n], model);
    return posts;
  }
  std::vector<std::thread> pool;
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(workers);
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t n = next.fetch_add(1); n < data.size(); n = next.fetch_add(1))
          posts[n] = smoothedPosteriors(data[n], model);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return posts;
}

// ---------------------------------------------------------------------------
// Closed-form M-step
// ---------------------------------------------------------------------------

void mStepClosedForm(const Dataset& data, const std::vector<SmoothedPosteriors>& posts,
                     const expfam::HyperParams& hyper, const EmOptions& opts, ModelParams& model,
                     const std::vector<Vector>* step_weights) {
  const int k = model.k;
  const Index d = model.d;
  const Index m = model.m;
  const Index q = d + m + 1;
  const bool closed = model.closedLoop();
  const Index p = closed ? model.ctl_features.size() : 0;

  expfam::CategoricalStats phi_stats(k);
  std::vector<expfam::GaussianStats> init_stats(k, expfam::GaussianStats(d));
  std::vector<expfam::LinearGaussianStats> dyn_stats(k, expfam::LinearGaussianStats(d, q));
  std::vector<expfam::LinearGaussianStats> ctl_stats(
      k, expfam::LinearGaussianStats(std::max<Index>(m, 1), std::max<Index>(p, 1)));

  for (std::size_t n = 0; n < data.size(); ++n) {
    const Trajectory& traj = data[n];
    const Matrix& gamma = posts[n].gamma;
    const Index t_len = traj.length();
    auto sw = [&](Index t) {
      return traj.weight * (step_weights ? (*step_weights)[n][t] : 1.0);
    };
    Vector in(q);
    in[q - 1] = 1.0;
    for (Index t = 0; t < t_len; ++t) {
      const Vector xt = traj.x.row(t).transpose();
      const double w_t = sw(t);
      if (t == 0) {
        for (int z = 0; z < k; ++z) {
          phi_stats.add(z, gamma(0, z) * w_t);
          init_stats[z].add(xt, gamma(0, z) * w_t);
        }
      } else {
        in.head(d) = traj.x.row(t - 1).transpose();
        if (m > 0) in.segment(d, m) = traj.u.row(t - 1).transpose();
        for (int z = 0; z < k; ++z) dyn_stats[z].add(in, xt, gamma(t, z) * w_t);
      }
      if (closed) {
        const Vector feat = model.ctl_features(xt);
        const Vector ut = traj.u.row(t).transpose();
        for (int z = 0; z < k; ++z) ctl_stats[z].add(feat, ut, gamma(t, z) * w_t);
      }
    }
  }

  if (opts.update_phi) model.phi = expfam::dirichletMapEstimate(hyper.phi_prior, phi_stats);

  if (opts.update_init) {
    for (int z = 0; z < k; ++z) {
      auto [mu, omega] = expfam::nwPosteriorMode(hyper.init_prior, init_stats[z]);
      model.init[z].mu = mu;
      model.init[z].omega.set(omega);
    }
  }

  auto splitAugmented = [&](const Matrix& aug, rarhmm::RegimeDynamics& dyn) {
    dyn.a = aug.leftCols(d);
    dyn.b = m > 0 ? Matrix(aug.middleCols(d, m)) : Matrix(d, 0);
    dyn.c = aug.rightCols(1);
  };

  if (opts.update_dynamics) {
    if (!opts.tied_noise) {
      for (int z = 0; z < k; ++z) {
        auto [aug, lambda] = expfam::mnwPosteriorMode(hyper.dyn_prior, dyn_stats[z]);
        splitAugmented(aug, model.dynamics[z]);
        model.dynamics[z].lambda.set(lambda);
      }
    } else {
      // pooled Wishart statistics: shared noise precision across regimes
      Matrix pooled = Matrix::Zero(d, d);
      double exponent = hyper.dyn_prior.nu - d - 1.0;
      Eigen::LLT<Matrix> psi0(symmetrized(hyper.dyn_prior.psi));
      pooled += psi0.solve(Matrix::Identity(d, d));
      for (int z = 0; z < k; ++z) {
        const auto post = expfam::mnwPosterior(hyper.dyn_prior, dyn_stats[z]);
        splitAugmented(post.m, model.dynamics[z]);
        Eigen::LLT<Matrix> psi(spdRepair(post.psi));
        pooled += psi.solve(Matrix::Identity(d, d)) -
                  psi0.solve(Matrix::Identity(d, d));  // accumulated data part
        exponent += dyn_stats[z].sum_w + static_cast<double>(q);
      }
      if (exponent <= 0.0) throw DomainError("tied-noise update: nonpositive exponent");
      const Matrix lambda = spdRepair(exponent * spdRepair(pooled).llt().solve(
                                                     Matrix::Identity(d, d)));
      for (int z = 0; z < k; ++z) model.dynamics[z].lambda.set(lambda);
    }
  }

  if (closed && opts.update_controller) {
    for (int z = 0; z < k; ++z) {
      auto [gain, delta] = expfam::mnwPosteriorMode(hyper.ctl_prior, ctl_stats[z]);
      model.controller[z].gain = gain;
      model.controller[z].delta.set(delta);
    }
  }
}

// ---------------------------------------------------------------------------
// Transition M-step
// ---------------------------------------------------------------------------

double transitionObjective(const Dataset& data, const std::vector<SmoothedPosteriors>& posts,
                           const rarhmm::LogitLink& link, double alpha,
                           const std::vector<Vector>* step_weights) {
  double obj = 0.0;
  const int k = link.regimes();
  for (std::size_t n = 0; n < data.size(); ++n) {
    const Trajectory& traj = data[n];
    for (Index t = 0; t + 1 < traj.length(); ++t) {
      const double w =
          traj.weight * (step_weights ? (*step_weights)[n][t] : 1.0);
      const Vector xt = traj.x.row(t).transpose();
      const Vector ut = link.actionDim() > 0 ? Vector(traj.u.row(t).transpose()) : Vector(0);
      const Matrix& xi = posts[n].xi[t];
      for (int i = 0; i < k; ++i) {
        const Vector logits = link.logits(i, xt, ut);
        const double lse = logSumExp(logits);
        for (int j = 0; j < k; ++j) obj += w * xi(i, j) * (logits[j] - lse);
      }
    }
  }
  obj += expfam::isotropicGaussianLogDensity(link.sqNorm(), link.paramCount(), alpha);
  return obj;
}

Vector transitionGradient(const Dataset& data, const std::vector<SmoothedPosteriors>& posts,
                          const rarhmm::LogitLink& link, double alpha,
                          const std::vector<Vector>* step_weights) {
  Vector grad = Vector::Zero(link.paramCount());
  const int k = link.regimes();
  Matrix coeff(k, k);
  for (std::size_t n = 0; n < data.size(); ++n) {
    const Trajectory& traj = data[n];
    for (Index t = 0; t + 1 < traj.length(); ++t) {
      const double w =
          traj.weight * (step_weights ? (*step_weights)[n][t] : 1.0);
      const Vector xt = traj.x.row(t).transpose();
      const Vector ut = link.actionDim() > 0 ? Vector(traj.u.row(t).transpose()) : Vector(0);
      const Matrix& xi = posts[n].xi[t];
      for (int i = 0; i < k; ++i) {
        const Vector chi = link.row(i, xt, ut);
        const double mass = xi.row(i).sum();
        coeff.row(i) = w * (xi.row(i) - mass * chi.transpose());
      }
      link.accumulateLogitGrad(xt, ut, coeff, grad);
    }
  }
  grad -= alpha * link.params();
  return grad;
}

namespace {

struct SlotIndex {
  std::uint32_t traj;
  std::uint32_t t;
};

void sgdTransition(const Dataset& data, const std::vector<SmoothedPosteriors>& posts,
                   const SgdOptions& opts, double alpha, rarhmm::LogitLink& link, Rng& rng,
                   const std::vector<Vector>* step_weights) {
  std::vector<SlotIndex> slots;
  for (std::size_t n = 0; n < data.size(); ++n)
    for (Index t = 0; t + 1 < data[n].length(); ++t)
      slots.push_back({static_cast<std::uint32_t>(n), static_cast<std::uint32_t>(t)});
  if (slots.empty()) return;
  const double total = static_cast<double>(slots.size());
  const int k = link.regimes();

  const double before = transitionObjective(data, posts, link, alpha, step_weights);
  const Vector params_before = link.params();

  Vector params = link.params();
  Matrix coeff(k, k);
  long step_counter = 0;
  const Index batch = std::min<Index>(opts.batch, static_cast<Index>(slots.size()));
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    std::shuffle(slots.begin(), slots.end(), rng);
    for (std::size_t start = 0; start < slots.size(); start += batch) {
      const std::size_t stop = std::min(slots.size(), start + batch);
      Vector grad = Vector::Zero(params.size());
      for (std::size_t s = start; s < stop; ++s) {
        const Trajectory& traj = data[slots[s].traj];
        const Index t = slots[s].t;
        const double w =
            traj.weight * (step_weights ? (*step_weights)[slots[s].traj][t] : 1.0);
        const Vector xt = traj.x.row(t).transpose();
        const Vector ut = link.actionDim() > 0 ? Vector(traj.u.row(t).transpose()) : Vector(0);
        const Matrix& xi = posts[slots[s].traj].xi[t];
        for (int i = 0; i < k; ++i) {
          const Vector chi = link.row(i, xt, ut);
          const double mass = xi.row(i).sum();
          coeff.row(i) = w * (xi.row(i) - mass * chi.transpose());
        }
        link.accumulateLogitGrad(xt, ut, coeff, grad);
      }
      grad /= static_cast<double>(stop - start);
      grad -= (alpha / total) * params;  // prior share per slot
      if (!grad.allFinite()) continue;
      const double norm = grad.norm();
      if (norm > opts.clip_norm) grad *= opts.clip_norm / norm;
      const double step = opts.step0 / (1.0 + static_cast<double>(step_counter) / opts.decay_tau);
      params += step * grad;
      link.setParams(params);
      ++step_counter;
    }
  }

  // scheduled epochs must not lose more than a small backoff on the full
  // objective; otherwise keep the previous parameters
  const double after = transitionObjective(data, posts, link, alpha, step_weights);
  if (after < before - 1e-3) link.setParams(params_before);
}

void fullBatchTransition(const Dataset& data, const std::vector<SmoothedPosteriors>& posts,
                         const SgdOptions& opts, double alpha, rarhmm::LogitLink& link,
                         const std::vector<Vector>* step_weights) {
  double obj = transitionObjective(data, posts, link, alpha, step_weights);
  double step = std::max(opts.step0, 1e-4);
  const int max_outer = std::max(10, opts.epochs * 5);
  for (int it = 0; it < max_outer; ++it) {
    Vector grad = transitionGradient(data, posts, link, alpha, step_weights);
    const double gnorm2 = grad.squaredNorm();
    if (gnorm2 < 1e-16) break;
    const Vector params = link.params();
    bool accepted = false;
    for (int half = 0; half < 40; ++half) {
      link.setParams(params + step * grad);
      const double trial = transitionObjective(data, posts, link, alpha, step_weights);
      if (trial >= obj + 1e-4 * step * gnorm2) {
        obj = trial;
        step *= 2.0;
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      link.setParams(params);
      break;
    }
  }
}

}  // namespace

void mStepTransition(const Dataset& data, const std::vector<SmoothedPosteriors>& posts,
                     const SgdOptions& opts, double alpha, rarhmm::LogitLink& link, Rng& rng,
                     const std::vector<Vector>* step_weights) {
  if (link.regimes() < 2) return;
  if (opts.batch == 0)
    fullBatchTransition(data, posts, opts, alpha, link, step_weights);
  else
    sgdTransition(data, posts, opts, alpha, link, rng, step_weights);
}

// ---------------------------------------------------------------------------
// Empirical Bayes
// ---------------------------------------------------------------------------

expfam::HyperParams ebStep(const ModelParams& model, const expfam::HyperParams& hyper,
                           double rho, const expfam::HyperMask& mask) {
  if (!(rho > 0.0)) throw DomainError("ebStep: rho must be positive");
  const expfam::PriorObservations obs = rarhmm::priorObservations(model);
  const Vector grad = expfam::hyperLogPriorGradient(obs, hyper, mask);
  if (grad.size() == 0) return hyper;
  const double base = expfam::logPriorDensity(obs, hyper);
  double scale = rho;
  for (int attempt = 0; attempt < 10; ++attempt) {
    try {
      const expfam::HyperParams trial = expfam::hyperApplyStep(hyper, scale * grad, mask);
      if (expfam::logPriorDensity(obs, trial) >= base) return trial;
    } catch (const Error&) {
      // fall through to a smaller step
    }
    scale *= 0.5;
  }
  return hyper;
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

namespace {

Matrix sampleWishart(const Matrix& psi, double nu, Rng& rng) {
  const Index d = psi.rows();
  Eigen::LLT<Matrix> llt(spdRepair(psi));
  const Matrix l = llt.matrixL();
  Matrix t = Matrix::Zero(d, d);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (Index i = 0; i < d; ++i) {
    std::gamma_distribution<double> chi2(0.5 * (nu - static_cast<double>(i)), 2.0);
    t(i, i) = std::sqrt(std::max(chi2(rng), 1e-12));
    for (Index j = 0; j < i; ++j) t(i, j) = gauss(rng);
  }
  const Matrix lt = l * t;
  return lt * lt.transpose();
}

Matrix sampleMatrixNormal(const Matrix& mean, const Matrix& row_prec, const Matrix& col_prec,
                          Rng& rng) {
  const Index out = mean.rows();
  const Index in = mean.cols();
  std::normal_distribution<double> gauss(0.0, 1.0);
  Matrix g(out, in);
  for (Index i = 0; i < out; ++i)
    for (Index j = 0; j < in; ++j) g(i, j) = gauss(rng);
  const Matrix lv = Eigen::LLT<Matrix>(spdRepair(row_prec)).matrixL();
  const Matrix lk = Eigen::LLT<Matrix>(spdRepair(col_prec)).matrixL();
  Matrix a = lv.transpose().triangularView<Eigen::Upper>().solve(g);
  a = lk.transpose().triangularView<Eigen::Upper>().solve(a.transpose()).transpose();
  return mean + a;
}

Vector sampleDirichlet(const Vector& tau, Rng& rng) {
  Vector out(tau.size());
  for (Index i = 0; i < tau.size(); ++i) {
    std::gamma_distribution<double> gamma(tau[i], 1.0);
    out[i] = std::max(gamma(rng), 1e-12);
  }
  return out / out.sum();
}

struct KMeansResult {
  std::vector<int> labels;
};

KMeansResult kMeans(const Matrix& points, int k, Rng& rng) {
  const Index n = points.rows();
  KMeansResult res;
  res.labels.assign(n, 0);
  if (k <= 1 || n == 0) return res;
  std::uniform_int_distribution<Index> pick(0, n - 1);
  Matrix centers(k, points.cols());
  centers.row(0) = points.row(pick(rng));
  Vector dist = (points.rowwise() - centers.row(0)).rowwise().squaredNorm();
  for (int c = 1; c < k; ++c) {  // k-means++ style seeding
    std::discrete_distribution<Index> weighted(dist.data(), dist.data() + n);
    centers.row(c) = points.row(weighted(rng));
    dist = dist.cwiseMin((points.rowwise() - centers.row(c)).rowwise().squaredNorm());
  }
  for (int iter = 0; iter < 25; ++iter) {
    bool changed = false;
    for (Index i = 0; i < n; ++i) {
      int best = 0;
      double best_d = (points.row(i) - centers.row(0)).squaredNorm();
      for (int c = 1; c < k; ++c) {
        const double dd = (points.row(i) - centers.row(c)).squaredNorm();
        if (dd < best_d) {
          best_d = dd;
          best = c;
        }
      }
      if (res.labels[i] != best) {
        res.labels[i] = best;
        changed = true;
      }
    }
    Matrix sums = Matrix::Zero(k, points.cols());
    Vector counts = Vector::Zero(k);
    for (Index i = 0; i < n; ++i) {
      sums.row(res.labels[i]) += points.row(i);
      counts[res.labels[i]] += 1.0;
    }
    for (int c = 0; c < k; ++c) {
      if (counts[c] > 0.0)
        centers.row(c) = sums.row(c) / counts[c];
      else
        centers.row(c) = points.row(pick(rng));
    }
    if (!changed && iter > 0) break;
  }
  return res;
}

}  // namespace

ModelParams initializeModel(const Dataset& data, const expfam::HyperParams& hyper, int k,
                            const EmOptions& opts, Rng& rng) {
  rarhmm::validateDataset(data);
  if (k < 1) throw DomainError("initializeModel: k must be >= 1");
  const Index d = data.front().x.cols();
  const Index m = data.front().u.cols();

  ModelParams model;
  model.k = k;
  model.d = d;
  model.m = m;
  model.phi = sampleDirichlet(hyper.phi_prior.tau, rng);
  const bool closed = opts.update_controller;
  if (closed) model.ctl_features = features::FeatureMap::polynomial(d, opts.ctl_degree);

  for (int z = 0; z < k; ++z) {
    rarhmm::RegimeInit init;
    Matrix omega = sampleWishart(hyper.init_prior.psi, hyper.init_prior.nu, rng);
    init.omega.set(omega);
    const Vector noise = init.omega.sample(Vector::Zero(d), rng);
    init.mu = hyper.init_prior.m + noise / std::sqrt(hyper.init_prior.kappa);
    model.init.push_back(std::move(init));

    rarhmm::RegimeDynamics dyn;
    Matrix lambda = sampleWishart(hyper.dyn_prior.psi, hyper.dyn_prior.nu, rng);
    const Matrix aug = sampleMatrixNormal(hyper.dyn_prior.m, lambda, hyper.dyn_prior.kcol, rng);
    dyn.a = aug.leftCols(d);
    dyn.b = m > 0 ? Matrix(aug.middleCols(d, m)) : Matrix(d, 0);
    dyn.c = aug.rightCols(1);
    dyn.lambda.set(lambda);
    model.dynamics.push_back(std::move(dyn));

    if (closed) {
      rarhmm::RegimeController ctl;
      Matrix delta = sampleWishart(hyper.ctl_prior.psi, hyper.ctl_prior.nu, rng);
      ctl.gain = sampleMatrixNormal(hyper.ctl_prior.m, delta, hyper.ctl_prior.kcol, rng);
      ctl.delta.set(delta);
      model.controller.push_back(std::move(ctl));
    }
  }

  model.link = rarhmm::LogitLink(opts.link_kind, k, d, m, opts.link_width, 0.01, rng);
  // standardize link inputs by the training set moments
  Index total = 0;
  Vector mean = Vector::Zero(d + m);
  for (const auto& traj : data) {
    for (Index t = 0; t < traj.length(); ++t) {
      mean.head(d) += traj.x.row(t).transpose();
      if (m > 0) mean.tail(m) += traj.u.row(t).transpose();
    }
    total += traj.length();
  }
  mean /= static_cast<double>(total);
  Vector var = Vector::Zero(d + m);
  for (const auto& traj : data)
    for (Index t = 0; t < traj.length(); ++t) {
      var.head(d) += (traj.x.row(t).transpose() - mean.head(d)).array().square().matrix();
      if (m > 0) var.tail(m) += (traj.u.row(t).transpose() - mean.tail(m)).array().square().matrix();
    }
  var /= static_cast<double>(total);
  model.link.setStandardization(mean, var.cwiseSqrt());

  if (k == 1) return model;

  // residual-based regime seeding: cluster per-step global-fit residuals
  // (joined with the state) and run one closed-form M-step on the hard labels
  const Index q = d + m + 1;
  Index slots = 0;
  for (const auto& traj : data) slots += traj.length() - 1;
  Matrix inputs(slots, q);
  Matrix outputs(slots, d);
  Index row = 0;
  for (const auto& traj : data)
    for (Index t = 1; t < traj.length(); ++t) {
      inputs.row(row).head(d) = traj.x.row(t - 1);
      if (m > 0) inputs.row(row).segment(d, m) = traj.u.row(t - 1);
      inputs(row, q - 1) = 1.0;
      outputs.row(row) = traj.x.row(t);
      ++row;
    }
  const Matrix gram = inputs.transpose() * inputs + 1e-8 * Matrix::Identity(q, q);
  const Matrix fit = gram.llt().solve(inputs.transpose() * outputs).transpose();  // d x q
  const Matrix residuals = outputs - inputs * fit.transpose();

  Matrix cluster_feats(slots, d + d);
  cluster_feats.leftCols(d) = inputs.leftCols(d);
  cluster_feats.rightCols(d) = residuals;
  for (Index c = 0; c < cluster_feats.cols(); ++c) {
    const double mu = cluster_feats.col(c).mean();
    const double sd = std::sqrt(
        (cluster_feats.col(c).array() - mu).square().mean() + 1e-12);
    cluster_feats.col(c) = (cluster_feats.col(c).array() - mu) / sd;
  }
  const KMeansResult km = kMeans(cluster_feats, k, rng);

  std::vector<SmoothedPosteriors> posts(data.size());
  row = 0;
  for (std::size_t n = 0; n < data.size(); ++n) {
    const Index t_len = data[n].length();
    posts[n].gamma = Matrix::Zero(t_len, k);
    for (Index t = 1; t < t_len; ++t) posts[n].gamma(t, km.labels[row++]) = 1.0;
    if (t_len > 1)
      posts[n].gamma.row(0) = posts[n].gamma.row(1);
    else
      posts[n].gamma(0, 0) = 1.0;
    for (Index t = 0; t + 1 < t_len; ++t) {
      Matrix xi = Matrix::Zero(k, k);
      Index i = 0, j = 0;
      for (int z = 0; z < k; ++z) {
        if (posts[n].gamma(t, z) > 0.5) i = z;
        if (posts[n].gamma(t + 1, z) > 0.5) j = z;
      }
      xi(i, j) = 1.0;
      posts[n].xi.push_back(std::move(xi));
    }
  }
  EmOptions seed_opts = opts;
  seed_opts.update_phi = seed_opts.update_init = seed_opts.update_dynamics = true;
  mStepClosedForm(data, posts, hyper, seed_opts, model);
  return model;
}

// ---------------------------------------------------------------------------
// Full EM loop
// ---------------------------------------------------------------------------

FitResult fitEm(const Dataset& data, const expfam::HyperParams& hyper_in, int k,
                const EmOptions& opts, Rng& rng) {
  rarhmm::validateDataset(data);
  ModelParams model = initializeModel(data, hyper_in, k, opts, rng);
  expfam::HyperParams hyper = hyper_in;

  FitResult result;
  double prev = std::numeric_limits<double>::quiet_NaN();
  double best = -std::numeric_limits<double>::infinity();
  double total_steps = 0.0;
  for (const auto& traj : data) total_steps += traj.weight * static_cast<double>(traj.length());
  std::vector<int> collapse_count(k, 0);
  bool reseeded = false;

  const auto t_start = std::chrono::steady_clock::now();
  auto seconds = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  };

  auto score = [&](std::vector<SmoothedPosteriors>& posts) {
    posts = eStep(data, model, opts.threads);
    double loglik = 0.0;
    for (std::size_t n = 0; n < data.size(); ++n) loglik += data[n].weight * posts[n].loglik;
    return loglik;
  };

  std::vector<SmoothedPosteriors> posts;
  for (int iter = 0; iter < opts.max_iters; ++iter) {
    const double loglik = score(posts);
    const double lp = loglik + rarhmm::modelLogPrior(model, hyper);

    double entropy = 0.0;
    for (const auto& post : posts) entropy += rowEntropy(post.gamma);
    entropy /= static_cast<double>(posts.size());

    IterationRow row;
    row.iter = iter;
    row.log_posterior = lp;
    row.loglik = loglik;
    row.dq = std::isnan(prev) ? 0.0 : lp - prev;
    row.gamma_entropy = entropy;
    row.seconds = seconds();
    result.diagnostics.push_back(row);
    if (opts.verbose)
      std::fprintf(stderr, "em iter %d: log_posterior=%.6f loglik=%.6f entropy=%.4f\n", iter,
                   lp, loglik, entropy);

    if (lp >= best) {
      best = lp;
      result.model = model;
      result.hyper = hyper;
    }

    // regime starvation bookkeeping
    if (k > 1) {
      Vector resp = Vector::Zero(k);
      for (std::size_t n = 0; n < data.size(); ++n)
        resp += data[n].weight * posts[n].gamma.colwise().sum().transpose();
      for (int z = 0; z < k; ++z) {
        if (resp[z] < 1e-6 * total_steps)
          ++collapse_count[z];
        else
          collapse_count[z] = 0;
        if (collapse_count[z] >= 5) {
          if (reseeded)
            throw AllRegimesCollapsedError("fitEm: regime " + std::to_string(z) +
                                           " starved after re-seeding");
          int donor = 0;
          resp.maxCoeff(&donor);
          std::normal_distribution<double> gauss(0.0, 1.0);
          model.init[z] = model.init[donor];
          model.init[z].mu.array() += 0.05 * gauss(rng);
          model.dynamics[z] = model.dynamics[donor];
          model.dynamics[z].c.array() += 0.05 * gauss(rng);
          if (model.closedLoop()) model.controller[z] = model.controller[donor];
          reseeded = true;
          collapse_count[z] = 0;
        }
      }
    }

    if (!std::isnan(prev) && std::abs(lp - prev) / (std::abs(prev) + 1.0) < opts.tol) break;
    prev = lp;
    if (iter + 1 == opts.max_iters) break;

    mStepClosedForm(data, posts, hyper, opts, model);
    if (opts.update_link)
      mStepTransition(data, posts, opts.sgd, hyper.omega_alpha, model.link, rng);
    if (opts.eb.enabled && iter >= opts.eb.burn_in &&
        (iter - opts.eb.burn_in) % std::max(1, opts.eb.every) == 0)
      hyper = ebStep(model, hyper, opts.eb.step, opts.eb.mask);
  }

  // score the final parameter set so the best-so-far bookkeeping sees it
  const double final_loglik = score(posts);
  const double final_lp = final_loglik + rarhmm::modelLogPrior(model, hyper);
  if (final_lp >= best) {
    result.model = model;
    result.hyper = hyper;
  }
  if (result.model.k == 0) {
    result.model = model;
    result.hyper = hyper;
  }
  return result;
}

}  // namespace hybriddyn::em
