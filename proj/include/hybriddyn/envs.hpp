#pragma once

#include <functional>
#include <string>

#include "hybriddyn/rarhmm.hpp"
#include "hybriddyn/types.hpp"

namespace hybriddyn::envs {

enum class EnvId {
  BouncingBall,
  PendulumPolar,
  PendulumCartesian,
  CartpolePolar,
  CartpoleCartesian,
  CartpoleWall,
};

/// Simulated benchmark system. Physical constants default to the documented
/// values; all of them are plain fields and may be overridden.
struct EnvSpec {
  EnvId id = EnvId::PendulumPolar;
  double dt = 0.01;
  Vector noise_std;       // per-state additive Gaussian std
  double action_limit = 2.5;

  double gravity = 9.81;
  double mass = 1.0;        // pendulum bob / pole mass
  double length = 1.0;      // pendulum length / pole half-length
  double damping = 0.05;
  double restitution = 0.8;   // bouncing ball
  double cart_mass = 1.0;     // cart-pole
  double spring_k = 100.0;    // elastic wall
  double wall_offset = 0.1;   // pole tip displacement engaging the wall

  static EnvSpec byName(const std::string& name);
  std::string name() const;
  Index stateDim() const;
  Index actionDim() const;
};

struct StepResult {
  Vector next_state;
  double reward = 0.0;
  int regime = 0;  // ground-truth regime hint (ball flight/impact, wall contact)
};

/// Integrate one control step (RK4 for the smooth systems, event-handled
/// impacts for the ball), add state noise, and evaluate the reward. The
/// action is clipped to the spec's limit. Throws NonFiniteError when the
/// state diverges beyond 1e6.
StepResult envStep(const EnvSpec& spec, const Vector& state, const Vector& action, Rng& rng);

enum class InitKind { Explore, Task };

Vector sampleInitialState(const EnvSpec& spec, InitKind kind, Rng& rng);

using Policy = std::function<Vector(const Vector& state, Rng& rng)>;
/// Stateful policies (belief filters) need a fresh instance per rollout.
using PolicyFactory = std::function<Policy(int trajectory)>;

Policy randomPolicy(const EnvSpec& spec);

/// Energy-shaping swing-up with a stabilizing catch near the upright
/// equilibrium. Supports the pendulum and cart-pole families.
Vector scriptedExpert(const EnvSpec& spec, const Vector& state);

Policy expertPolicy(const EnvSpec& spec, double exploration_std = 0.0);

PolicyFactory statelessPolicy(Policy policy);

/// Collect n trajectories of t steps each. Per-trajectory generators are
/// seeded from the master seed, so collection order does not matter.
rarhmm::Dataset collectTrajectories(const EnvSpec& spec, const PolicyFactory& policy, int n,
                                    int t, InitKind init, std::uint64_t seed);

/// Mean over dimensions of MSE / per-dimension variance.
double nmse(const Matrix& predictions, const Matrix& truth, const Vector& variance);

/// Filtered-belief executor of a closed-loop hybrid model: maintains the
/// regime belief through the link and dynamics/controller likelihoods and
/// emits either the belief-mixed mean action or a sampled one.
class HybridPolicy {
 public:
  HybridPolicy(const rarhmm::ModelParams& model, bool sample_actions = false,
               double exploration_floor = 0.0, double action_clip = 0.0);

  void reset();
  Vector act(const Vector& x, Rng& rng);
  const Vector& belief() const { return belief_; }

 private:
  const rarhmm::ModelParams* model_;
  bool sample_actions_;
  double floor_;
  double clip_;
  Vector belief_;
  Vector last_x_, last_u_;
  bool fresh_ = true;
};

PolicyFactory modelPolicyFactory(const rarhmm::ModelParams& model, bool sample_actions = false,
                                 double exploration_floor = 0.0, double action_clip = 0.0);

}  // namespace hybriddyn::envs
