#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "hybriddyn/expfam.hpp"
#include "hybriddyn/rarhmm.hpp"

namespace hybriddyn::em {

using rarhmm::Dataset;
using rarhmm::ModelParams;
using rarhmm::Trajectory;

/// One-slice and two-slice smoothed regime marginals of one trajectory.
struct SmoothedPosteriors {
  Matrix gamma;            // T x K
  std::vector<Matrix> xi;  // T-1 entries of K x K
  double loglik = 0.0;
};

struct SgdOptions {
  int batch = 256;         // 0 selects the full-batch line-search update
  double step0 = 1e-2;
  double decay_tau = 100.0;
  int epochs = 5;
  double clip_norm = 100.0;
};

struct EbOptions {
  bool enabled = true;
  double step = 1e-2;
  int burn_in = 3;
  int every = 1;
  expfam::HyperMask mask;
};

struct EmOptions {
  int max_iters = 100;
  double tol = 1e-6;
  SgdOptions sgd;
  EbOptions eb;
  bool update_dynamics = true;
  bool update_init = true;
  bool update_phi = true;
  bool update_link = true;
  bool update_controller = false;  // closed-loop (cloning) mode
  bool tied_noise = false;
  rarhmm::LogitLink::Kind link_kind = rarhmm::LogitLink::Kind::Linear;
  int link_width = 16;
  int ctl_degree = 1;  // controller feature degree in closed-loop mode
  int threads = 1;
  bool verbose = false;
};

/// Scaled forward pass. `alpha` rows are the filtered marginals; the sum of
/// `log_normalizers` is the trajectory marginal log-likelihood. The per-step
/// likelihood factors and transition matrices are cached for the matching
/// backward pass.
struct ForwardResult {
  Matrix alpha;            // T x K
  Vector log_normalizers;  // T
  // cache shared with the backward recursion
  Matrix like;             // T x K, exp(loglike - shift)
  Vector shift;            // T
  Vector scale;            // T, shifted normalizers
  std::vector<Matrix> trans;  // T-1 entries of K x K
};

ForwardResult forwardMessages(const Trajectory& traj, const ModelParams& model);

/// Scaled backward messages; the last row is identically one.
Matrix backwardMessages(const Trajectory& traj, const ModelParams& model,
                        const ForwardResult& fwd);

SmoothedPosteriors smoothedPosteriors(const Trajectory& traj, const ModelParams& model);

std::vector<SmoothedPosteriors> eStep(const Dataset& data, const ModelParams& model,
                                      int threads);

/// Closed-form MAP updates of (phi, initial states, dynamics, controllers).
/// Optional per-step weights multiply the responsibilities before the
/// sufficient statistics are accumulated (weighted Baum-Welch).
void mStepClosedForm(const Dataset& data, const std::vector<SmoothedPosteriors>& posts,
                     const expfam::HyperParams& hyper, const EmOptions& opts, ModelParams& model,
                     const std::vector<Vector>* step_weights = nullptr);

/// Expected transition log-likelihood plus the Gaussian log prior on the link
/// weights, evaluated at the link's current parameters (full batch).
double transitionObjective(const Dataset& data, const std::vector<SmoothedPosteriors>& posts,
                           const rarhmm::LogitLink& link, double alpha,
                           const std::vector<Vector>* step_weights = nullptr);

Vector transitionGradient(const Dataset& data, const std::vector<SmoothedPosteriors>& posts,
                          const rarhmm::LogitLink& link, double alpha,
                          const std::vector<Vector>* step_weights = nullptr);

/// Stochastic (or full-batch line-search, when opts.batch == 0) ascent on the
/// transition term of Q.
void mStepTransition(const Dataset& data, const std::vector<SmoothedPosteriors>& posts,
                     const SgdOptions& opts, double alpha, rarhmm::LogitLink& link, Rng& rng,
                     const std::vector<Vector>* step_weights = nullptr);

/// One empirical-Bayes ascent step on log p(theta_hat | h) in the
/// unconstrained reparameterization, with backtracking (up to 10 halvings).
expfam::HyperParams ebStep(const ModelParams& model, const expfam::HyperParams& hyper,
                           double rho, const expfam::HyperMask& mask);

struct IterationRow {
  int iter = 0;
  double log_posterior = 0.0;
  double loglik = 0.0;
  double dq = 0.0;
  double gamma_entropy = 0.0;
  double seconds = 0.0;
};

struct FitResult {
  ModelParams model;
  expfam::HyperParams hyper;
  std::vector<IterationRow> diagnostics;
};

/// Draw a model from the prior (Algorithm-style initialization), then refine
/// the draw with one residual-based regime seeding pass.
ModelParams initializeModel(const Dataset& data, const expfam::HyperParams& hyper, int k,
                            const EmOptions& opts, Rng& rng);

FitResult fitEm(const Dataset& data, const expfam::HyperParams& hyper, int k,
                const EmOptions& opts, Rng& rng);

}  // namespace hybriddyn::em
