#include "hybriddyn/rarhmm.hpp"

#include <cmath>
#include <sstream>

#include "hybriddyn/em.hpp"

namespace hybriddyn::rarhmm {

// ---------------------------------------------------------------------------
// LogitLink
// ---------------------------------------------------------------------------

LogitLink::LogitLink(Kind kind, int k, Index d, Index m, int width, double init_std, Rng& rng)
    : kind_(kind), k_(k), d_(d), m_(m), width_(kind == Kind::Mlp ? width : 0) {
  params_.resize(static_cast<Index>(k_) * blockSize());
  std::normal_distribution<double> gauss(0.0, init_std);
  for (Index i = 0; i < params_.size(); ++i) params_[i] = init_std > 0.0 ? gauss(rng) : 0.0;
  in_mean_ = Vector::Zero(d_ + m_);
  in_std_ = Vector::Ones(d_ + m_);
}

Index LogitLink::blockSize() const {
  const Index din = d_ + m_;
  if (kind_ == Kind::Linear) return static_cast<Index>(k_) * (din + 1);
  return width_ * din + width_ + static_cast<Index>(k_) * width_ + k_;
}

void LogitLink::setStandardization(const Vector& mean, const Vector& std) {
  if (mean.size() != d_ + m_ || std.size() != d_ + m_)
    throw DimensionMismatchError("LogitLink::setStandardization");
  in_mean_ = mean;
  in_std_ = std.cwiseMax(1e-8);
}

void LogitLink::setParams(const Vector& p) {
  if (p.size() != params_.size()) throw DimensionMismatchError("LogitLink::setParams");
  params_ = p;
}

Vector LogitLink::standardize(const Vector& x, const Vector& u) const {
  Vector s(d_ + m_);
  s.head(d_) = x;
  if (m_ > 0) s.tail(m_) = u;
  return (s - in_mean_).cwiseQuotient(in_std_);
}

Vector LogitLink::logits(int from, const Vector& x, const Vector& u) const {
  if (x.size() != d_ || u.size() != m_) throw DimensionMismatchError("LogitLink::logits input");
  const Vector s = standardize(x, u);
  const Index din = d_ + m_;
  const double* block = params_.data() + static_cast<Index>(from) * blockSize();
  if (kind_ == Kind::Linear) {
    Eigen::Map<const Matrix> w(block, k_, din + 1);
    Vector out = w.rightCols(1);
    out.noalias() += w.leftCols(din) * s;
    return out;
  }
  Eigen::Map<const Matrix> w1(block, width_, din);
  Eigen::Map<const Vector> b1(block + width_ * din, width_);
  Eigen::Map<const Matrix> w2(block + width_ * din + width_, k_, width_);
  Eigen::Map<const Vector> b2(block + width_ * din + width_ + static_cast<Index>(k_) * width_,
                              k_);
  const Vector hidden = ((w1 * s + b1).array().tanh()).matrix();
  return w2 * hidden + b2;
}

Vector LogitLink::row(int from, const Vector& x, const Vector& u) const {
  return softmax(logits(from, x, u));
}

Matrix LogitLink::matrix(const Vector& x, const Vector& u) const {
  Matrix out(k_, k_);
  for (int i = 0; i < k_; ++i) out.row(i) = row(i, x, u).transpose();
  return out;
}

void LogitLink::accumulateLogitGrad(const Vector& x, const Vector& u, const Matrix& coeff,
                                    Eigen::Ref<Vector> grad) const {
  const Vector s = standardize(x, u);
  const Index din = d_ + m_;
  for (int i = 0; i < k_; ++i) {
    const Vector c = coeff.row(i).transpose();
    if (c.isZero(0.0)) continue;
    const Index off = static_cast<Index>(i) * blockSize();
    double* gblock = grad.data() + off;
    if (kind_ == Kind::Linear) {
      Eigen::Map<Matrix> gw(gblock, k_, din + 1);
      gw.leftCols(din).noalias() += c * s.transpose();
      gw.rightCols(1) += c;
    } else {
      const double* block = params_.data() + off;
      Eigen::Map<const Matrix> w1(block, width_, din);
      Eigen::Map<const Vector> b1(block + width_ * din, width_);
      Eigen::Map<const Matrix> w2(block + width_ * din + width_, k_, width_);
      const Vector pre = w1 * s + b1;
      const Vector hidden = pre.array().tanh().matrix();
      Eigen::Map<Matrix> gw1(gblock, width_, din);
      Eigen::Map<Vector> gb1(gblock + width_ * din, width_);
      Eigen::Map<Matrix> gw2(gblock + width_ * din + width_, k_, width_);
      Eigen::Map<Vector> gb2(gblock + width_ * din + width_ + static_cast<Index>(k_) * width_,
                             k_);
      gw2.noalias() += c * hidden.transpose();
      gb2 += c;
      const Vector ghidden = w2.transpose() * c;
      const Vector gpre = ghidden.cwiseProduct((1.0 - hidden.array().square()).matrix());
      gw1.noalias() += gpre * s.transpose();
      gb1 += gpre;
    }
  }
}

// ---------------------------------------------------------------------------
// Model operations
// ---------------------------------------------------------------------------

void validateDataset(const Dataset& data) {
  if (data.empty()) throw DomainError("dataset is empty");
  const Index d = data.front().x.cols();
  const Index m = data.front().u.cols();
  for (const auto& traj : data) {
    if (traj.x.cols() != d || traj.u.cols() != m)
      throw DimensionMismatchError("dataset: trajectory '" + traj.id +
                                   "' has inconsistent dimensions");
    if (traj.u.rows() != traj.x.rows() && m > 0)
      throw DimensionMismatchError("dataset: trajectory '" + traj.id +
                                   "' has mismatched x/u lengths");
    if (traj.x.rows() < 1)
      throw DomainError("dataset: trajectory '" + traj.id + "' is empty");
    if (!traj.x.allFinite() || !traj.u.allFinite())
      throw NonFiniteError("dataset: trajectory '" + traj.id + "' has non-finite entries");
    if (traj.weight < 0.0)
      throw DomainError("dataset: trajectory '" + traj.id + "' has negative weight");
  }
}

Vector transitionRow(const ModelParams& model, int from, const Vector& x, const Vector& u) {
  if (from < 0 || from >= model.k) throw DimensionMismatchError("transitionRow: regime index");
  return model.link.row(from, x, u);
}

StepSample sampleStep(const ModelParams& model, int z, const Vector& x, const Vector& u,
                      Rng& rng) {
  const Vector row = transitionRow(model, z, x, u);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const double r = unif(rng);
  int znext = model.k - 1;
  double acc = 0.0;
  for (int j = 0; j < model.k; ++j) {
    acc += row[j];
    if (r <= acc) {
      znext = j;
      break;
    }
  }
  const Vector mean = model.dynamics[znext].mean(x, u);
  return StepSample{znext, model.dynamics[znext].lambda.sample(mean, rng)};
}

Vector sampleAction(const ModelParams& model, int z, const Vector& x, Rng& rng) {
  if (!model.closedLoop()) throw DomainError("sampleAction: model has no controller block");
  return model.controller[z].delta.sample(model.controllerMean(z, x), rng);
}

Matrix forecast(const ModelParams& model, const Trajectory& history, const Matrix& controls,
                Index horizon) {
  if (history.length() < 1) throw DomainError("forecast: empty history");
  if (model.m > 0 && controls.rows() < horizon)
    throw DimensionMismatchError("forecast: not enough future controls");
  const em::ForwardResult fwd = em::forwardMessages(history, model);
  Vector belief = fwd.alpha.row(fwd.alpha.rows() - 1).transpose();
  Vector x = history.x.row(history.length() - 1).transpose();
  Matrix out(horizon, model.d);
  for (Index s = 0; s < horizon; ++s) {
    const Vector u = model.m > 0 ? Vector(controls.row(s).transpose()) : Vector(0);
    belief = model.link.matrix(x, u).transpose() * belief;
    belief /= belief.sum();
    Vector mixed = Vector::Zero(model.d);
    for (int j = 0; j < model.k; ++j) mixed += belief[j] * model.dynamics[j].mean(x, u);
    out.row(s) = mixed.transpose();
    x = mixed;
  }
  return out;
}

expfam::PriorObservations priorObservations(const ModelParams& model) {
  expfam::PriorObservations obs;
  obs.phi = model.phi;
  for (int z = 0; z < model.k; ++z) {
    obs.init.emplace_back(model.init[z].mu, model.init[z].omega.precision());
    Matrix aug(model.d, model.d + model.m + 1);
    aug.leftCols(model.d) = model.dynamics[z].a;
    if (model.m > 0) aug.middleCols(model.d, model.m) = model.dynamics[z].b;
    aug.rightCols(1) = model.dynamics[z].c;
    obs.dyn.emplace_back(aug, model.dynamics[z].lambda.precision());
    if (model.closedLoop())
      obs.ctl.emplace_back(model.controller[z].gain, model.controller[z].delta.precision());
  }
  obs.omega_sq_norm = model.link.sqNorm();
  obs.omega_count = model.link.paramCount();
  return obs;
}

double modelLogPrior(const ModelParams& model, const expfam::HyperParams& hyper) {
  return expfam::logPriorDensity(priorObservations(model), hyper);
}

double logPosterior(const Dataset& data, const ModelParams& model,
                    const expfam::HyperParams& hyper) {
  double out = modelLogPrior(model, hyper);
  for (const auto& traj : data) {
    const em::ForwardResult fwd = em::forwardMessages(traj, model);
    out += traj.weight * fwd.log_normalizers.sum();
  }
  return out;
}

long countParameters(const ModelParams& model) {
  const long k = model.k;
  const long d = model.d;
  const long m = model.m;
  long count = k - 1;                          // initial categorical on the simplex
  count += k * (d + d * (d + 1) / 2);          // initial Gaussians
  count += k * (d * d + d * m + d + d * (d + 1) / 2);  // affine dynamics + noise
  if (model.closedLoop()) {
    const long p = model.ctl_features.size();
    count += k * (m * p + m * (m + 1) / 2);
  }
  count += model.link.paramCount();
  return count;
}

}  // namespace hybriddyn::rarhmm
