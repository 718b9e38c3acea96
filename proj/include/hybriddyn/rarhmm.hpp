#pragma once

#include <string>
#include <vector>

#include "hybriddyn/expfam.hpp"
#include "hybriddyn/features.hpp"
#include "hybriddyn/linalg.hpp"
#include "hybriddyn/types.hpp"

namespace hybriddyn::rarhmm {

/// State-action dependent multi-class logit link: per source regime i, a
/// function f(x, u; omega_i) producing K logits whose softmax is the
/// transition row. Inputs are standardized by stored mean/std.
class LogitLink {
 public:
  enum class Kind { Linear, Mlp };

  LogitLink() = default;
  /// Weights drawn N(0, init_std^2).
  LogitLink(Kind kind, int k, Index d, Index m, int width, double init_std, Rng& rng);

  Kind kind() const { return kind_; }
  int regimes() const { return k_; }
  Index inputDim() const { return d_ + m_; }
  Index stateDim() const { return d_; }
  Index actionDim() const { return m_; }
  int width() const { return width_; }

  void setStandardization(const Vector& mean, const Vector& std);
  const Vector& inputMean() const { return in_mean_; }
  const Vector& inputStd() const { return in_std_; }

  Vector logits(int from, const Vector& x, const Vector& u) const;
  /// Max-shifted softmax of logits(from, x, u).
  Vector row(int from, const Vector& x, const Vector& u) const;
  /// All K rows stacked: out(i, j) = chi_ij(x, u).
  Matrix matrix(const Vector& x, const Vector& u) const;

  Index paramCount() const { return params_.size(); }
  const Vector& params() const { return params_; }
  void setParams(const Vector& p);
  double sqNorm() const { return params_.squaredNorm(); }

  /// Accumulate d/d(params) of sum_ij coeff(i, j) * logit_j(i; x, u) into grad.
  /// With coeff(i, j) = xi(i, j) - rowsum_i * chi_ij this is the gradient of
  /// the expected transition log-likelihood at one step.
  void accumulateLogitGrad(const Vector& x, const Vector& u, const Matrix& coeff,
                           Eigen::Ref<Vector> grad) const;

 private:
  Vector standardize(const Vector& x, const Vector& u) const;
  // parameter slices per source regime
  Index blockSize() const;

  Kind kind_ = Kind::Linear;
  int k_ = 1;
  Index d_ = 0, m_ = 0;
  int width_ = 0;
  Vector params_;
  Vector in_mean_, in_std_;
};

struct RegimeInit {
  Vector mu;
  GaussianPrec omega;
};

struct RegimeDynamics {
  Matrix a;  // d x d
  Matrix b;  // d x m
  Vector c;  // d
  GaussianPrec lambda;

  Vector mean(const Vector& x, const Vector& u) const {
    Vector out = a * x + c;
    if (b.cols() > 0) out.noalias() += b * u;
    return out;
  }
};

struct RegimeController {
  Matrix gain;  // m x p over feature map
  GaussianPrec delta;
};

/// Full rARHMM parameter set. The controller block is absent in the open-loop
/// (exogenous input) configuration.
struct ModelParams {
  int k = 1;
  Index d = 0;
  Index m = 0;
  Vector phi;
  std::vector<RegimeInit> init;
  std::vector<RegimeDynamics> dynamics;
  std::vector<RegimeController> controller;
  features::FeatureMap ctl_features;
  LogitLink link;

  bool closedLoop() const { return !controller.empty(); }
  Vector controllerMean(int z, const Vector& x) const {
    return controller[z].gain * ctl_features(x);
  }
};

struct Trajectory {
  Matrix x;  // T x d
  Matrix u;  // T x m (zero columns when the input is absent)
  double dt = 0.0;
  double weight = 1.0;
  std::string id;
  std::string env;

  Index length() const { return x.rows(); }
};

using Dataset = std::vector<Trajectory>;

void validateDataset(const Dataset& data);

Vector transitionRow(const ModelParams& model, int from, const Vector& x, const Vector& u);

struct StepSample {
  int z;
  Vector x;
};

/// One generative step: z' ~ chi(z, x, u), x' ~ N(dyn mean, Lambda^{-1}).
StepSample sampleStep(const ModelParams& model, int z, const Vector& x, const Vector& u,
                      Rng& rng);

Vector sampleAction(const ModelParams& model, int z, const Vector& x, Rng& rng);

/// Mean forecast: filter the history to a regime belief, then propagate
/// belief-mixed affine means through the link for `horizon` steps.
/// `controls` holds the future inputs (horizon x m; ignored when m = 0).
Matrix forecast(const ModelParams& model, const Trajectory& history, const Matrix& controls,
                Index horizon);

double modelLogPrior(const ModelParams& model, const expfam::HyperParams& hyper);

/// Eq. of the MAP objective: sum of per-trajectory marginal log-likelihoods
/// (weighted) plus the log prior.
double logPosterior(const Dataset& data, const ModelParams& model,
                    const expfam::HyperParams& hyper);

long countParameters(const ModelParams& model);

/// Collect the point estimates the factorized prior is evaluated at.
expfam::PriorObservations priorObservations(const ModelParams& model);

}  // namespace hybriddyn::rarhmm
