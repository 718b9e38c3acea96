#include "hybriddyn/hbreps.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <limits>
#include <numeric>

namespace hybriddyn::hbreps {

// ---------------------------------------------------------------------------
// ValueFunction
// ---------------------------------------------------------------------------

Index ValueFunction::paramCount() const {
  Index n = 0;
  for (const auto& t : tau) n += t.size();
  return n;
}

ValueFunction ValueFunction::piecewise(const features::FeatureMap& map, int k) {
  ValueFunction v;
  v.regimes = k;
  v.shared = false;
  for (int z = 0; z < k; ++z) {
    v.psi.push_back(map);
    v.tau.push_back(Vector::Zero(map.size()));
  }
  return v;
}

ValueFunction ValueFunction::sharedMap(const features::FeatureMap& map, int k) {
  ValueFunction v;
  v.regimes = k;
  v.shared = true;
  v.psi.push_back(map);
  v.tau.push_back(Vector::Zero(map.size()));
  return v;
}

// ---------------------------------------------------------------------------
// mu_1
// ---------------------------------------------------------------------------

Mu1Model fitMu1(const rarhmm::ModelParams& model, const Matrix& initial_states) {
  const int k = model.k;
  const Index n = initial_states.rows();
  const Index d = initial_states.cols();
  if (n < 2) throw DomainError("fitMu1: need at least two initial states");
  Matrix resp(n, k);
  for (Index i = 0; i < n; ++i) {
    Vector logp(k);
    const Vector x = initial_states.row(i).transpose();
    for (int z = 0; z < k; ++z)
      logp[z] = std::log(std::max(model.phi[z], 1e-300)) +
                model.init[z].omega.logpdf(x, model.init[z].mu);
    resp.row(i) = softmax(logp).transpose();
  }
  Mu1Model mu1;
  mu1.rho = resp.colwise().mean().transpose();
  const Vector global_mean = initial_states.colwise().mean().transpose();
  Matrix global_cov = Matrix::Zero(d, d);
  for (Index i = 0; i < n; ++i) {
    const Vector r = initial_states.row(i).transpose() - global_mean;
    global_cov += r * r.transpose();
  }
  global_cov = global_cov / static_cast<double>(n) + 1e-9 * Matrix::Identity(d, d);
  for (int z = 0; z < k; ++z) {
    const double mass = resp.col(z).sum();
    if (mass < 1e-8 * static_cast<double>(n)) {
      mu1.mean.push_back(global_mean);
      mu1.cov_factor.push_back(Matrix(global_cov.llt().matrixL()));
      continue;
    }
    Vector mean = (initial_states.transpose() * resp.col(z)) / mass;
    Matrix cov = Matrix::Zero(d, d);
    for (Index i = 0; i < n; ++i) {
      const Vector r = initial_states.row(i).transpose() - mean;
      cov += resp(i, z) * r * r.transpose();
    }
    cov = cov / mass + 1e-9 * Matrix::Identity(d, d);
    mu1.mean.push_back(std::move(mean));
    mu1.cov_factor.push_back(Matrix(spdRepair(cov).llt().matrixL()));
  }
  return mu1;
}

// ---------------------------------------------------------------------------
// Expectations and advantage
// ---------------------------------------------------------------------------

double expectedNextValue(const rarhmm::ModelParams& model, const ValueFunction& value,
                         const Vector& x, const Vector& u, const Vector& zpost,
                         int cubature_order) {
  if (zpost.size() != model.k) throw DimensionMismatchError("expectedNextValue: zpost size");
  const cubature::Rule rule = cubature::gaussHermite(cubature_order);
  Vector nextval(model.k);
  for (int zn = 0; zn < model.k; ++zn) {
    const Vector mean = model.dynamics[zn].mean(x, u);
    const Matrix cov_factor = model.dynamics[zn].lambda.covFactor();
    const int b = value.blockOf(zn);
    nextval[zn] =
        value.tau[b].dot(cubature::gaussianFeatureMoment(value.psi[b], rule, mean, cov_factor));
  }
  double out = 0.0;
  for (int z = 0; z < model.k; ++z) {
    if (zpost[z] == 0.0) continue;
    out += zpost[z] * model.link.row(z, x, u).dot(nextval);
  }
  return out;
}

double expectedInitialValue(const ValueFunction& value, const Mu1Model& mu1,
                            int cubature_order) {
  const cubature::Rule rule = cubature::gaussHermite(cubature_order);
  double out = 0.0;
  for (int z = 0; z < static_cast<int>(mu1.rho.size()); ++z) {
    const int b = value.blockOf(z);
    out += mu1.rho[z] * value.tau[b].dot(cubature::gaussianFeatureMoment(
                            value.psi[b], rule, mu1.mean[z], mu1.cov_factor[z]));
  }
  return out;
}

double advantage(const WeightedSample& sample, const ValueFunction& value,
                 const rarhmm::ModelParams& model, const Mu1Model& mu1, double theta_reset,
                 int cubature_order) {
  double vcur = 0.0;
  for (int z = 0; z < model.k; ++z)
    if (sample.zpost[z] > 0.0) vcur += sample.zpost[z] * value.eval(sample.x, z);
  return sample.reward +
         (1.0 - theta_reset) * expectedInitialValue(value, mu1, cubature_order) +
         theta_reset *
             expectedNextValue(model, value, sample.x, sample.u, sample.zpost, cubature_order) -
         vcur;
}

// ---------------------------------------------------------------------------
// DualProblem
// ---------------------------------------------------------------------------

DualProblem::DualProblem(const std::vector<WeightedSample>& samples,
                         const rarhmm::ModelParams& model, const ValueFunction& value_shape,
                         const Mu1Model& mu1, const RepsConfig& config)
    : shape_(value_shape),
      epsilon_(config.epsilon),
      theta_(config.theta_reset),
      eta_floor_(config.eta_floor),
      n_samples_(static_cast<Index>(samples.size())),
      k_(model.k) {
  if (samples.size() < 10) throw DomainError("DualProblem: need at least 10 samples");
  const cubature::Rule rule = cubature::gaussHermite(config.cubatureOrder());
  const int blocks = shape_.blocks();
  for (int b = 0; b < blocks; ++b) tau_total_ += shape_.tau[b].size();

  rewards_.resize(n_samples_);
  zpost_.resize(n_samples_, k_);
  chi_.resize(n_samples_, static_cast<Index>(k_) * k_);
  psix_.resize(blocks);
  for (int b = 0; b < blocks; ++b) psix_[b].resize(n_samples_, shape_.psi[b].size());
  next_moment_.resize(k_);
  std::vector<Matrix> cov_factor(k_);
  for (int zn = 0; zn < k_; ++zn) {
    cov_factor[zn] = model.dynamics[zn].lambda.covFactor();
    next_moment_[zn].resize(n_samples_, shape_.psi[shape_.blockOf(zn)].size());
  }

  for (Index s = 0; s < n_samples_; ++s) {
    const WeightedSample& smp = samples[s];
    rewards_[s] = smp.reward;
    zpost_.row(s) = smp.zpost.transpose();
    const Matrix trans = model.link.matrix(smp.x, smp.u);
    for (int i = 0; i < k_; ++i)
      for (int j = 0; j < k_; ++j) chi_(s, static_cast<Index>(i) * k_ + j) = trans(i, j);
    for (int b = 0; b < blocks; ++b) psix_[b].row(s) = shape_.psi[b](smp.x).transpose();
    for (int zn = 0; zn < k_; ++zn) {
      const Vector mean = model.dynamics[zn].mean(smp.x, smp.u);
      next_moment_[zn].row(s) =
          cubature::gaussianFeatureMoment(shape_.psi[shape_.blockOf(zn)], rule, mean,
                                          cov_factor[zn])
              .transpose();
    }
  }

  mu1_grad_.assign(blocks, Vector());
  for (int b = 0; b < blocks; ++b) mu1_grad_[b] = Vector::Zero(shape_.psi[b].size());
  for (int z = 0; z < k_; ++z) {
    const int b = shape_.blockOf(z);
    mu1_grad_[b] += mu1.rho[z] * cubature::gaussianFeatureMoment(shape_.psi[b], rule,
                                                                 mu1.mean[z], mu1.cov_factor[z]);
  }
}

Vector DualProblem::pack(double eta, const ValueFunction& value) const {
  Vector params(paramCount());
  params[0] = std::log(std::max(eta - eta_floor_, 1e-12));
  Index off = 1;
  for (const auto& t : value.tau) {
    params.segment(off, t.size()) = t;
    off += t.size();
  }
  return params;
}

void DualProblem::unpack(const Vector& params, double& eta, ValueFunction& value) const {
  eta = eta_floor_ + std::exp(params[0]);
  value = shape_;
  Index off = 1;
  for (auto& t : value.tau) {
    t = params.segment(off, t.size());
    off += t.size();
  }
}

namespace {

struct DualCore {
  double g = 0.0;
  double deta = 0.0;
  std::vector<Vector> dtau;
  Matrix posterior;  // S x K softmax weights
  double kl = 0.0;
};

}  // namespace

// Shared evaluation of the dual, its gradient, and diagnostics.
static DualCore evalDual(const ValueFunction& value, double eta, double epsilon, double theta,
                         const Vector& rewards, const Matrix& zpost,
                         const std::vector<Matrix>& psix,
                         const std::vector<Matrix>& next_moment, const Matrix& chi,
                         const std::vector<Vector>& mu1_grad, int k, bool need_grad) {
  const Index s_count = rewards.size();
  const int blocks = value.blocks();

  double emu1 = 0.0;
  for (int b = 0; b < blocks; ++b) emu1 += value.tau[b].dot(mu1_grad[b]);

  Matrix nextval(s_count, k);
  for (int zn = 0; zn < k; ++zn)
    nextval.col(zn) = next_moment[zn] * value.tau[value.blockOf(zn)];
  std::vector<Vector> vx(blocks);
  for (int b = 0; b < blocks; ++b) vx[b] = psix[b] * value.tau[b];

  Matrix adv(s_count, k);
  for (int z = 0; z < k; ++z) {
    Vector trans_mix = Vector::Zero(s_count);
    for (int zn = 0; zn < k; ++zn)
      trans_mix += chi.col(static_cast<Index>(z) * k + zn).cwiseProduct(nextval.col(zn));
    adv.col(z) = rewards.array() + (1.0 - theta) * emu1 + theta * trans_mix.array() -
                 vx[value.blockOf(z)].array();
  }

  Matrix logits(s_count, k);
  for (Index s = 0; s < s_count; ++s)
    for (int z = 0; z < k; ++z)
      logits(s, z) = zpost(s, z) > 0.0
                         ? std::log(zpost(s, z)) + adv(s, z) / eta
                         : -std::numeric_limits<double>::infinity();
  const double shift = logits.maxCoeff();
  Matrix weights = (logits.array() - shift).exp();
  const double zsum = weights.sum();
  const double log_mean = shift + std::log(zsum) - std::log(static_cast<double>(s_count));

  DualCore core;
  core.g = eta * epsilon + eta * log_mean;
  core.posterior = weights / zsum;
  const double mean_adv = (core.posterior.array() * adv.array()).sum();
  core.deta = epsilon + log_mean - mean_adv / eta;

  // empirical KL of the joint (sample, regime) weights against the reference
  for (Index s = 0; s < s_count; ++s)
    for (int z = 0; z < k; ++z)
      if (core.posterior(s, z) > 0.0)
        core.kl += core.posterior(s, z) *
                   (std::log(core.posterior(s, z) * static_cast<double>(s_count)) -
                    std::log(zpost(s, z)));

  if (need_grad) {
    core.dtau.assign(blocks, Vector());
    for (int b = 0; b < blocks; ++b)
      core.dtau[b] = (1.0 - theta) * mu1_grad[b];  // total posterior mass is one
    // theta-term: sum over next regimes of the posterior-mixed transition mass
    for (int zn = 0; zn < k; ++zn) {
      Vector mass = Vector::Zero(s_count);
      for (int z = 0; z < k; ++z)
        mass += core.posterior.col(z).cwiseProduct(chi.col(static_cast<Index>(z) * k + zn));
      core.dtau[value.blockOf(zn)] += theta * next_moment[zn].transpose() * mass;
    }
    for (int z = 0; z < k; ++z)
      core.dtau[value.blockOf(z)] -= psix[value.blockOf(z)].transpose() * core.posterior.col(z);
  }
  return core;
}

std::pair<double, Vector> DualProblem::valueGrad(const Vector& params) const {
  double eta;
  ValueFunction value;
  unpack(params, eta, value);
  const DualCore core = evalDual(value, eta, epsilon_, theta_, rewards_, zpost_, psix_,
                                 next_moment_, chi_, mu1_grad_, k_, true);
  Vector grad(paramCount());
  grad[0] = core.deta * (eta - eta_floor_);  // chain through eta = floor + exp(xi)
  Index off = 1;
  for (const auto& dt : core.dtau) {
    grad.segment(off, dt.size()) = dt;
    off += dt.size();
  }
  return {core.g, grad};
}

std::pair<double, Vector> DualProblem::dualAt(double eta, const ValueFunction& value) const {
  const DualCore core = evalDual(value, eta, epsilon_, theta_, rewards_, zpost_, psix_,
                                 next_moment_, chi_, mu1_grad_, k_, true);
  Vector grad(paramCount());
  grad[0] = core.deta;
  Index off = 1;
  for (const auto& dt : core.dtau) {
    grad.segment(off, dt.size()) = dt;
    off += dt.size();
  }
  return {core.g, grad};
}

double DualProblem::empiricalKl(double eta, const ValueFunction& value) const {
  const DualCore core = evalDual(value, eta, epsilon_, theta_, rewards_, zpost_, psix_,
                                 next_moment_, chi_, mu1_grad_, k_, false);
  return core.kl;
}

Vector DualProblem::mixedAdvantages(double /*eta*/, const ValueFunction& value) const {
  // advantages do not depend on eta
  Matrix nextval(n_samples_, k_);
  for (int zn = 0; zn < k_; ++zn)
    nextval.col(zn) = next_moment_[zn] * value.tau[value.blockOf(zn)];
  double emu1 = 0.0;
  for (int b = 0; b < value.blocks(); ++b) emu1 += value.tau[b].dot(mu1_grad_[b]);
  Vector out = Vector::Zero(n_samples_);
  for (int z = 0; z < k_; ++z) {
    Vector trans_mix = Vector::Zero(n_samples_);
    for (int zn = 0; zn < k_; ++zn)
      trans_mix += chi_.col(static_cast<Index>(z) * k_ + zn).cwiseProduct(nextval.col(zn));
    const Vector vv = psix_[value.blockOf(z)] * value.tau[value.blockOf(z)];
    out += zpost_.col(z).cwiseProduct(
        (rewards_.array() + (1.0 - theta_) * emu1 + theta_ * trans_mix.array() - vv.array())
            .matrix());
  }
  return out;
}

// ---------------------------------------------------------------------------
// L-BFGS
// ---------------------------------------------------------------------------

namespace {

struct LbfgsOutcome {
  Vector x;
  double f = 0.0;
  Vector grad;
  int evals = 0;
};

template <typename Fn>
LbfgsOutcome lbfgsMinimize(Fn&& fn, const Vector& x0, int max_evals, double grad_tol) {
  const int history = 10;
  std::deque<Vector> s_hist, y_hist;
  std::deque<double> rho_hist;

  LbfgsOutcome out;
  out.x = x0;
  auto [f, g] = fn(out.x);
  out.f = f;
  out.grad = g;
  out.evals = 1;

  while (out.evals < max_evals && out.grad.template lpNorm<Eigen::Infinity>() > grad_tol) {
    // two-loop recursion
    Vector q = out.grad;
    std::vector<double> alpha(s_hist.size());
    for (int i = static_cast<int>(s_hist.size()) - 1; i >= 0; --i) {
      alpha[i] = rho_hist[i] * s_hist[i].dot(q);
      q -= alpha[i] * y_hist[i];
    }
    if (!s_hist.empty()) {
      const double gamma =
          s_hist.back().dot(y_hist.back()) / y_hist.back().squaredNorm();
      q *= gamma;
    }
    for (std::size_t i = 0; i < s_hist.size(); ++i) {
      const double beta = rho_hist[i] * y_hist[i].dot(q);
      q += (alpha[i] - beta) * s_hist[i];
    }
    Vector direction = -q;
    double slope = out.grad.dot(direction);
    if (slope >= 0.0) {  // fall back to steepest descent
      direction = -out.grad;
      slope = -out.grad.squaredNorm();
    }

    double step = s_hist.empty() ? std::min(1.0, 1.0 / out.grad.norm()) : 1.0;
    bool accepted = false;
    Vector x_new;
    double f_new = 0.0;
    Vector g_new;
    for (int half = 0; half < 40 && out.evals < max_evals; ++half) {
      x_new = out.x + step * direction;
      auto [ft, gt] = fn(x_new);
      ++out.evals;
      if (std::isfinite(ft) && ft <= out.f + 1e-4 * step * slope) {
        f_new = ft;
        g_new = gt;
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;

    const Vector s = x_new - out.x;
    const Vector y = g_new - out.grad;
    const double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      s_hist.push_back(s);
      y_hist.push_back(y);
      rho_hist.push_back(1.0 / sy);
      if (static_cast<int>(s_hist.size()) > history) {
        s_hist.pop_front();
        y_hist.pop_front();
        rho_hist.pop_front();
      }
    }
    out.x = x_new;
    out.f = f_new;
    out.grad = g_new;
  }
  return out;
}

}  // namespace

DualSolution minimizeDual(const DualProblem& problem, double eta_init,
                          const ValueFunction& value_init, const RepsConfig& config) {
  const Vector x0 = problem.pack(std::max(eta_init, config.eta_floor * 2.0), value_init);
  const LbfgsOutcome res = lbfgsMinimize(
      [&](const Vector& p) { return problem.valueGrad(p); }, x0, config.dual_max_evals,
      config.dual_grad_tol);

  DualSolution sol;
  problem.unpack(res.x, sol.eta, sol.value);
  sol.dual = res.f;
  sol.evaluations = res.evals;
  sol.advantages = problem.mixedAdvantages(sol.eta, sol.value);
  const double amax = sol.advantages.maxCoeff();
  sol.weights = ((sol.advantages.array() - amax) / sol.eta).exp();

  const double wsum = sol.weights.sum();
  const Vector wn = sol.weights / wsum;
  sol.ess = 1.0 / wn.squaredNorm();
  sol.kl = problem.empiricalKl(sol.eta, sol.value);
  if (sol.ess < 3.0)
    throw DegenerateWeightsError("minimizeDual: effective sample size " +
                                 std::to_string(sol.ess) + " < 3");
  return sol;
}

std::pair<double, Vector> dualValueGrad(const std::vector<WeightedSample>& samples,
                                        const ValueFunction& value, double eta, double epsilon,
                                        const rarhmm::ModelParams& model, const Mu1Model& mu1,
                                        const RepsConfig& config) {
  RepsConfig cfg = config;
  cfg.epsilon = epsilon;
  DualProblem problem(samples, model, value, mu1, cfg);
  return problem.dualAt(eta, value);
}

// ---------------------------------------------------------------------------
// Weighted Baum-Welch policy improvement
// ---------------------------------------------------------------------------

void weightedBaumWelch(const rarhmm::Dataset& episodes,
                       const std::vector<Vector>& step_weights, rarhmm::ModelParams& model,
                       const expfam::HyperParams& hyper, const em::EmOptions& opts, Rng& rng) {
  if (episodes.size() != step_weights.size())
    throw DimensionMismatchError("weightedBaumWelch: weights do not match episodes");
  double total = 0.0, mass = 0.0;
  for (std::size_t n = 0; n < episodes.size(); ++n) {
    if (step_weights[n].size() != episodes[n].length())
      throw DimensionMismatchError("weightedBaumWelch: weight length mismatch");
    if (step_weights[n].minCoeff() < 0.0 || !step_weights[n].allFinite())
      throw DomainError("weightedBaumWelch: weights must be positive and finite");
    total += static_cast<double>(episodes[n].length());
    mass += step_weights[n].sum();
  }
  if (mass <= 0.0) throw DomainError("weightedBaumWelch: zero weight mass");
  std::vector<Vector> normalized(step_weights);
  for (auto& w : normalized) w *= total / mass;  // mean-one normalization

  for (int sweep = 0; sweep < std::max(1, opts.max_iters); ++sweep) {
    const auto posts = em::eStep(episodes, model, opts.threads);
    em::mStepClosedForm(episodes, posts, hyper, opts, model, &normalized);
    if (opts.update_link)
      em::mStepTransition(episodes, posts, opts.sgd, hyper.omega_alpha, model.link, rng,
                          &normalized);
  }
}

// ---------------------------------------------------------------------------
// Main loop
// ---------------------------------------------------------------------------

namespace {

struct CollectedBatch {
  std::vector<WeightedSample> samples;
  rarhmm::Dataset episodes;
  std::vector<std::pair<std::size_t, Index>> slot;  // sample -> (episode, step)
};

CollectedBatch collectOnPolicy(const envs::EnvSpec& env, const rarhmm::ModelParams& policy,
                               const RepsConfig& config, Rng& rng) {
  CollectedBatch batch;
  const double floor = config.exploration_floor_frac * env.action_limit;
  const int cap = config.max_episode > 0
                      ? config.max_episode
                      : static_cast<int>(5.0 / std::max(1e-6, 1.0 - config.theta_reset));
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  while (static_cast<int>(batch.samples.size()) < config.samples_per_iter) {
    envs::HybridPolicy pi(policy, true, floor, env.action_limit);
    Vector x = envs::sampleInitialState(env, envs::InitKind::Task, rng);
    std::vector<Vector> xs, us, beliefs;
    std::vector<double> rewards;
    std::vector<Vector> xnexts;
    for (int t = 0; t < cap; ++t) {
      const Vector u = pi.act(x, rng);
      const envs::StepResult step = envs::envStep(env, x, u, rng);
      xs.push_back(x);
      us.push_back(u);
      beliefs.push_back(pi.belief());
      rewards.push_back(step.reward);
      xnexts.push_back(step.next_state);
      x = step.next_state;
      if (static_cast<int>(batch.samples.size()) + static_cast<int>(xs.size()) >=
          config.samples_per_iter)
        break;
      if (unif(rng) > config.theta_reset) break;  // reset event
    }
    rarhmm::Trajectory episode;
    episode.dt = env.dt;
    episode.env = env.name();
    episode.id = "episode-" + std::to_string(batch.episodes.size());
    const Index len = static_cast<Index>(xs.size());
    episode.x.resize(len, env.stateDim());
    episode.u.resize(len, env.actionDim());
    for (Index t = 0; t < len; ++t) {
      episode.x.row(t) = xs[t].transpose();
      episode.u.row(t) = us[t].transpose();
      WeightedSample smp;
      smp.x = xs[t];
      smp.u = us[t];
      smp.xnext = xnexts[t];
      smp.zpost = beliefs[t];
      smp.reward = rewards[t];
      batch.samples.push_back(std::move(smp));
      batch.slot.emplace_back(batch.episodes.size(), t);
    }
    batch.episodes.push_back(std::move(episode));
  }
  return batch;
}

std::pair<double, double> evaluatePolicy(const envs::EnvSpec& env,
                                         const rarhmm::ModelParams& policy,
                                         const RepsConfig& config, std::uint64_t seed) {
  Vector per_rollout(config.eval_rollouts);
  for (int r = 0; r < config.eval_rollouts; ++r) {
    Rng rng(splitSeed(seed, r));
    envs::HybridPolicy pi(policy, false, 0.0, env.action_limit);
    Vector x = envs::sampleInitialState(env, envs::InitKind::Task, rng);
    double acc = 0.0;
    for (int t = 0; t < config.eval_horizon; ++t) {
      const Vector u = pi.act(x, rng);
      const envs::StepResult step = envs::envStep(env, x, u, rng);
      acc += step.reward;
      x = step.next_state;
    }
    per_rollout[r] = acc / static_cast<double>(config.eval_horizon);
  }
  const double mean = per_rollout.mean();
  const double var = (per_rollout.array() - mean).square().mean();
  return {mean, std::sqrt(var)};
}

Vector stateBandwidth(const envs::EnvSpec& env, std::uint64_t seed) {
  Rng rng(seed);
  const int n = 512;
  Matrix states(n, env.stateDim());
  for (int i = 0; i < n; ++i)
    states.row(i) = envs::sampleInitialState(env, envs::InitKind::Explore, rng).transpose();
  Vector bw(env.stateDim());
  for (Index c = 0; c < states.cols(); ++c) {
    const double mu = states.col(c).mean();
    bw[c] = std::max(std::sqrt((states.col(c).array() - mu).square().mean()), 1e-3);
  }
  return bw;
}

}  // namespace

RlResult hbrepsIterate(const envs::EnvSpec& env, const rarhmm::ModelParams& model,
                       const RepsConfig& config, const expfam::HyperParams& hyper, Rng& rng) {
  if (model.d != env.stateDim() || model.m != env.actionDim())
    throw DimensionMismatchError("hbrepsIterate: model does not match environment dims");
  if (config.mode == RepsConfig::Mode::FlatReps && model.k != 1)
    throw DomainError("hbrepsIterate: flat REPS requires a single-regime model");

  RlResult result;
  result.policy = model;
  const Index d = model.d;
  const Index m = model.m;

  // policy features
  if (config.mode == RepsConfig::Mode::FlatReps)
    result.policy.ctl_features = features::FeatureMap::randomFourier(
        d, config.fourier_policy_count, stateBandwidth(env, splitSeed(rng(), 101)), rng());
  else
    result.policy.ctl_features = features::FeatureMap::polynomial(d, config.policy_degree);
  const Index p = result.policy.ctl_features.size();

  // fresh stochastic controller: zero gains, exploration-scaled noise
  result.policy.controller.clear();
  const double sigma0 = config.init_policy_std_frac * env.action_limit;
  for (int z = 0; z < model.k; ++z) {
    rarhmm::RegimeController ctl;
    ctl.gain = Matrix::Zero(m, p);
    ctl.delta.set(Matrix::Identity(m, m) / (sigma0 * sigma0));
    result.policy.controller.push_back(std::move(ctl));
  }

  expfam::HyperParams rl_hyper = hyper;
  rl_hyper.has_controller = true;
  rl_hyper.ctl_prior.m = Matrix::Zero(m, p);
  rl_hyper.ctl_prior.kcol = 1e-4 * Matrix::Identity(p, p);
  rl_hyper.ctl_prior.psi = 1e2 * Matrix::Identity(m, m);
  rl_hyper.ctl_prior.nu = static_cast<double>(m) + 2.0;

  // value model
  if (config.mode == RepsConfig::Mode::HbReps)
    result.value = ValueFunction::piecewise(features::FeatureMap::polynomial(d, config.value_degree),
                                            model.k);
  else
    result.value = ValueFunction::sharedMap(
        features::FeatureMap::randomFourier(d, config.fourier_count,
                                            stateBandwidth(env, splitSeed(rng(), 202)), rng()),
        model.k);

  // initial-state mixture from the task's start distribution
  Matrix init_states(config.mu1_samples, d);
  for (int i = 0; i < config.mu1_samples; ++i) {
    Rng r2(splitSeed(rng(), 300 + i));
    init_states.row(i) = envs::sampleInitialState(env, envs::InitKind::Task, r2).transpose();
  }
  const Mu1Model mu1 = fitMu1(result.policy, init_states);

  em::EmOptions bw_opts;
  bw_opts.max_iters = config.bw_sweeps;
  bw_opts.update_phi = false;
  bw_opts.update_init = false;
  bw_opts.update_dynamics = config.update_dynamics;
  bw_opts.update_link = false;
  bw_opts.update_controller = true;

  if (config.epsilon > 1e6)
    std::fprintf(stderr, "hbreps: epsilon %.3g is effectively unconstrained; "
                         "weights follow the greedy limit\n", config.epsilon);

  double eta = config.eta_init;
  for (int iter = 0; iter < config.iters; ++iter) {
    CollectedBatch batch = collectOnPolicy(env, result.policy, config, rng);
    DualProblem problem(batch.samples, result.policy, result.value, mu1, config);
    DualSolution sol = minimizeDual(problem, eta, result.value, config);
    result.value = sol.value;
    eta = std::max(sol.eta, 10.0 * config.eta_floor);

    std::vector<Vector> weights(batch.episodes.size());
    for (std::size_t n = 0; n < batch.episodes.size(); ++n)
      weights[n] = Vector::Zero(batch.episodes[n].length());
    for (std::size_t s = 0; s < batch.samples.size(); ++s)
      weights[batch.slot[s].first][batch.slot[s].second] = sol.weights[s];
    weightedBaumWelch(batch.episodes, weights, result.policy, rl_hyper, bw_opts, rng);

    const auto [mean_r, std_r] = evaluatePolicy(env, result.policy, config,
                                                splitSeed(rng(), 7000 + iter));
    IterRow row;
    row.iter = iter;
    row.mean_reward = mean_r;
    row.std_reward = std_r;
    row.eta = sol.eta;
    row.dual = sol.dual;
    row.kl_empirical = sol.kl;
    row.ess = sol.ess;
    result.curve.push_back(row);
  }
  return result;
}

}  // namespace hybriddyn::hbreps
