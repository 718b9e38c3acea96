#pragma once

#include <vector>

#include "hybriddyn/cubature.hpp"
#include "hybriddyn/em.hpp"
#include "hybriddyn/envs.hpp"
#include "hybriddyn/rarhmm.hpp"

namespace hybriddyn::hbreps {

/// Piecewise value model V(x, z) = tau_z' psi_z(x). With `shared` set, a
/// single feature map and coefficient vector back every regime (the flat and
/// Fourier-value baselines).
struct ValueFunction {
  std::vector<features::FeatureMap> psi;  // one per block
  std::vector<Vector> tau;                // one per block
  int regimes = 1;
  bool shared = false;

  int blockOf(int z) const { return shared ? 0 : z; }
  int blocks() const { return static_cast<int>(tau.size()); }
  double eval(const Vector& x, int z) const {
    const int b = blockOf(z);
    return tau[b].dot(psi[b](x));
  }
  Index paramCount() const;

  static ValueFunction piecewise(const features::FeatureMap& map, int k);
  static ValueFunction sharedMap(const features::FeatureMap& map, int k);
};

/// Initial mixture mu_1(x, z): per-regime weights and Gaussian moments.
struct Mu1Model {
  Vector rho;
  std::vector<Vector> mean;
  std::vector<Matrix> cov_factor;  // C with C C' = covariance
};

/// Fit the per-regime Gaussian mixture of initial states, with regime
/// responsibilities taken from the model's initial blocks.
Mu1Model fitMu1(const rarhmm::ModelParams& model, const Matrix& initial_states);

struct RepsConfig {
  enum class Mode { HbReps, HiReps, FlatReps };
  Mode mode = Mode::HbReps;
  double epsilon = 0.5;       // KL trust region
  double theta_reset = 0.98;  // discount / reset probability
  int samples_per_iter = 5000;
  int iters = 30;
  int value_degree = 3;
  int policy_degree = 3;
  int cubature_order = 0;  // 0 picks ceil((value_degree + 1) / 2)
  double eta_floor = 1e-8;
  double eta_init = 1.0;
  int fourier_count = 75;        // value features of the baselines
  int fourier_policy_count = 50; // flat-REPS policy features
  int eval_rollouts = 20;
  int eval_horizon = 250;
  int max_episode = 0;  // 0 picks 5 / (1 - theta_reset)
  double exploration_floor_frac = 0.05;  // of the action limit
  double init_policy_std_frac = 0.4;     // of the action limit
  int bw_sweeps = 2;
  bool update_dynamics = false;  // refresh dynamics during policy improvement
  int mu1_samples = 512;
  int dual_max_evals = 500;
  double dual_grad_tol = 1e-6;

  int cubatureOrder() const {
    return cubature_order > 0 ? cubature_order : (value_degree + 2) / 2;
  }
};

struct WeightedSample {
  Vector x;
  Vector u;
  Vector xnext;
  Vector zpost;  // filtered q(z | x, u)
  double reward = 0.0;
  double advantage = 0.0;
  double weight = 1.0;
};

/// E_{x', z'}[V(x', z')] given (x, u) and the current-regime posterior:
/// transition mixture through the link, Gauss-Hermite (or closed-form
/// Fourier) integration over the affine-Gaussian next state.
double expectedNextValue(const rarhmm::ModelParams& model, const ValueFunction& value,
                         const Vector& x, const Vector& u, const Vector& zpost,
                         int cubature_order);

double expectedInitialValue(const ValueFunction& value, const Mu1Model& mu1,
                            int cubature_order);

/// A = r + (1 - theta) E_mu1[V] + theta E[V(x', z')] - V(x, z), with both
/// V-terms mixed by the sample's regime posterior.
double advantage(const WeightedSample& sample, const ValueFunction& value,
                 const rarhmm::ModelParams& model, const Mu1Model& mu1, double theta_reset,
                 int cubature_order);

/// Precomputed per-sample quantities: the dual and its gradient are cheap
/// closures over this workspace.
class DualProblem {
 public:
  DualProblem(const std::vector<WeightedSample>& samples, const rarhmm::ModelParams& model,
              const ValueFunction& value_shape, const Mu1Model& mu1, const RepsConfig& config);

  Index paramCount() const { return 1 + tau_total_; }
  Vector pack(double eta, const ValueFunction& value) const;
  void unpack(const Vector& params, double& eta, ValueFunction& value) const;

  /// Dual value and gradient in the unconstrained coordinates
  /// [log(eta - floor); tau blocks].
  std::pair<double, Vector> valueGrad(const Vector& params) const;

  /// Dual value and gradient in natural coordinates (eta first).
  std::pair<double, Vector> dualAt(double eta, const ValueFunction& value) const;

  /// Per-sample posterior-mixed advantages at the given parameters.
  Vector mixedAdvantages(double eta, const ValueFunction& value) const;

  /// KL of the joint exponentiated-advantage weights against the reference
  /// sample distribution.
  double empiricalKl(double eta, const ValueFunction& value) const;

  const ValueFunction& shape() const { return shape_; }

 private:
  Vector advantagesFlat(const ValueFunction& value) const;  // (s, z) pairs

  ValueFunction shape_;
  double epsilon_;
  double theta_;
  double eta_floor_;
  Index n_samples_ = 0;
  int k_ = 1;
  Index tau_total_ = 0;
  Vector rewards_;
  Matrix zpost_;                    // S x K
  std::vector<Matrix> psix_;        // per block: S x p
  std::vector<Matrix> next_moment_; // per regime z': S x p(block(z'))
  Matrix chi_;                      // S x (K*K), row-major rows of the link
  std::vector<Vector> mu1_grad_;    // per block
};

struct DualSolution {
  double eta = 0.0;
  ValueFunction value;
  Vector weights;     // per sample, max-shifted exp(A / eta)
  Vector advantages;  // posterior-mixed, per sample
  double dual = 0.0;
  double kl = 0.0;  // empirical KL of the joint sample-regime weights
  double ess = 0.0;
  int evaluations = 0;
};

/// Quasi-Newton minimization of the dual; throws DegenerateWeightsError when
/// the effective sample size of the converged weights falls below 3.
DualSolution minimizeDual(const DualProblem& problem, double eta_init,
                          const ValueFunction& value_init, const RepsConfig& config);

/// Convenience wrapper matching the dual evaluation contract.
std::pair<double, Vector> dualValueGrad(const std::vector<WeightedSample>& samples,
                                        const ValueFunction& value, double eta, double epsilon,
                                        const rarhmm::ModelParams& model, const Mu1Model& mu1,
                                        const RepsConfig& config);

/// Policy improvement: weighted Baum-Welch sweeps. The E-step is unchanged;
/// the M-step responsibilities are scaled by the normalized per-step weights,
/// and by default only the controller blocks move.
void weightedBaumWelch(const rarhmm::Dataset& episodes,
                       const std::vector<Vector>& step_weights, rarhmm::ModelParams& model,
                       const expfam::HyperParams& hyper, const em::EmOptions& opts, Rng& rng);

struct IterRow {
  int iter = 0;
  double mean_reward = 0.0;
  double std_reward = 0.0;
  double eta = 0.0;
  double dual = 0.0;
  double kl_empirical = 0.0;
  double ess = 0.0;
};

struct RlResult {
  rarhmm::ModelParams policy;  // closed-loop model carrying the learned controller
  ValueFunction value;
  std::vector<IterRow> curve;
};

/// Algorithm: sample interactions under the current stochastic hybrid policy,
/// minimize the dual, improve the policy by weighted Baum-Welch, repeat.
RlResult hbrepsIterate(const envs::EnvSpec& env, const rarhmm::ModelParams& model,
                       const RepsConfig& config, const expfam::HyperParams& hyper, Rng& rng);

}  // namespace hybriddyn::hbreps
