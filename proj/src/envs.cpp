#include "hybriddyn/envs.hpp"

#include <cmath>
#include <memory>

#include "hybriddyn/errors.hpp"

namespace hybriddyn::envs {

namespace {

Vector constantVector(Index n, double v) { return Vector::Constant(n, v); }

double clip(double v, double lo, double hi) { return std::min(hi, std::max(lo, v)); }

// ---- smooth vector fields -------------------------------------------------

Vector pendulumField(const EnvSpec& s, const Vector& st, double u) {
  // state (theta, thetadot), theta measured from upright
  Vector dot(2);
  dot[0] = st[1];
  dot[1] = (s.mass * s.gravity * s.length * std::sin(st[0]) - s.damping * st[1] + u) /
           (s.mass * s.length * s.length);
  return dot;
}

Vector cartpoleField(const EnvSpec& s, const Vector& st, double u) {
  // state (x, xdot, theta, thetadot), theta from upright; classic rail
  // equations with pole half-length s.length
  const double total = s.cart_mass + s.mass;
  const double ct = std::cos(st[2]);
  const double sn = std::sin(st[2]);
  const double tmp = (u + s.mass * s.length * st[3] * st[3] * sn) / total;
  const double thetaacc = (s.gravity * sn - ct * tmp) /
                          (s.length * (4.0 / 3.0 - s.mass * ct * ct / total));
  const double xacc = tmp - s.mass * s.length * thetaacc * ct / total;
  Vector dot(4);
  dot[0] = st[1];
  dot[1] = xacc;
  dot[2] = st[3];
  dot[3] = thetaacc;
  return dot;
}

Vector cartpoleWallField(const EnvSpec& s, const Vector& st, double u, bool* contact) {
  // point-mass pole linearized around upright, elastic wall on the tip
  const double tip = st[0] + s.length * st[2];
  double fw = 0.0;
  if (tip > s.wall_offset) {
    fw = -s.spring_k * (tip - s.wall_offset);
    if (contact) *contact = true;
  }
  const double mc = s.cart_mass, mp = s.mass, l = s.length, g = s.gravity;
  const double det = mc * mp * l * l;
  const double r1 = u + fw;
  const double r2 = mp * g * l * st[2] + fw * l;
  // inverse of [[mc+mp, mp l], [mp l, mp l^2]]
  const double xacc = (mp * l * l * r1 - mp * l * r2) / det;
  const double thetaacc = (-mp * l * r1 + (mc + mp) * r2) / det;
  Vector dot(4);
  dot[0] = st[1];
  dot[1] = xacc;
  dot[2] = st[3];
  dot[3] = thetaacc;
  return dot;
}

template <typename Field>
Vector rk4(const Vector& state, double dt, Field&& f) {
  const Vector k1 = f(state);
  const Vector k2 = f(Vector(state + 0.5 * dt * k1));
  const Vector k3 = f(Vector(state + 0.5 * dt * k2));
  const Vector k4 = f(Vector(state + dt * k3));
  return state + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

// analytic free fall with impact events inside one step
Vector ballAdvance(const EnvSpec& s, const Vector& state, int* regime) {
  double h = state[0], v = state[1], remaining = s.dt;
  const double g = s.gravity;
  for (int bounce = 0; bounce < 64 && remaining > 0.0; ++bounce) {
    const double disc = v * v + 2.0 * g * h;
    const double t_hit = disc >= 0.0 ? (v + std::sqrt(disc)) / g : -1.0;
    if (t_hit < 0.0 || t_hit >= remaining) {
      h += v * remaining - 0.5 * g * remaining * remaining;
      v -= g * remaining;
      remaining = 0.0;
      break;
    }
    const double v_impact = v - g * t_hit;
    remaining -= t_hit;
    h = 0.0;
    v = -s.restitution * v_impact;
    if (regime) *regime = 1;
    if (v < 1e-6) {  // Zeno rest
      v = 0.0;
      remaining = 0.0;
    }
  }
  Vector out(2);
  out[0] = std::max(h, 0.0);
  out[1] = v;
  return out;
}

double pendulumReward(double theta, double thetadot, double u) {
  const double w = wrapAngle(theta);
  return -(w * w + 0.1 * thetadot * thetadot + 1e-3 * u * u);
}

double cartpoleReward(double x, double xdot, double theta, double thetadot, double u) {
  const double w = wrapAngle(theta);
  return -(x * x + 10.0 * w * w + 0.1 * xdot * xdot + 0.1 * thetadot * thetadot +
           1e-3 * u * u);
}

struct PolarView {
  double theta;
  double thetadot;
};

PolarView pendulumPolarOf(const EnvSpec& spec, const Vector& state) {
  if (spec.id == EnvId::PendulumCartesian) return {std::atan2(state[1], state[0]), state[2]};
  return {state[0], state[1]};
}

}  // namespace

// ---------------------------------------------------------------------------
// EnvSpec
// ---------------------------------------------------------------------------

EnvSpec EnvSpec::byName(const std::string& name) {
  EnvSpec s;
  if (name == "bouncing_ball") {
    s.id = EnvId::BouncingBall;
    s.dt = 0.05;
    s.noise_std = constantVector(2, 1e-3);
    s.action_limit = 0.0;
  } else if (name == "pendulum_polar" || name == "pendulum_cartesian") {
    s.id = name == "pendulum_polar" ? EnvId::PendulumPolar : EnvId::PendulumCartesian;
    s.dt = 0.02;
    s.noise_std = constantVector(s.id == EnvId::PendulumPolar ? 2 : 3, 1e-2);
    s.action_limit = 2.5;
  } else if (name == "cartpole_polar" || name == "cartpole_cartesian") {
    s.id = name == "cartpole_polar" ? EnvId::CartpolePolar : EnvId::CartpoleCartesian;
    s.dt = 0.01;
    s.noise_std = constantVector(s.id == EnvId::CartpolePolar ? 4 : 5, 1e-2);
    s.action_limit = 5.0;
    s.mass = 0.1;
    s.length = 0.5;
  } else if (name == "cartpole_wall") {
    s.id = EnvId::CartpoleWall;
    s.dt = 0.01;
    s.noise_std = constantVector(4, 1e-4);
    s.action_limit = 5.0;
    s.mass = 0.1;
    s.length = 0.5;
  } else {
    throw UnsupportedEnvError("unknown environment '" + name + "'");
  }
  return s;
}

std::string EnvSpec::name() const {
  switch (id) {
    case EnvId::BouncingBall: return "bouncing_ball";
    case EnvId::PendulumPolar: return "pendulum_polar";
    case EnvId::PendulumCartesian: return "pendulum_cartesian";
    case EnvId::CartpolePolar: return "cartpole_polar";
    case EnvId::CartpoleCartesian: return "cartpole_cartesian";
    case EnvId::CartpoleWall: return "cartpole_wall";
  }
  return "unknown";
}

Index EnvSpec::stateDim() const {
  switch (id) {
    case EnvId::BouncingBall: return 2;
    case EnvId::PendulumPolar: return 2;
    case EnvId::PendulumCartesian: return 3;
    case EnvId::CartpolePolar: return 4;
    case EnvId::CartpoleCartesian: return 5;
    case EnvId::CartpoleWall: return 4;
  }
  return 0;
}

Index EnvSpec::actionDim() const { return id == EnvId::BouncingBall ? 0 : 1; }

// ---------------------------------------------------------------------------
// Stepping
// ---------------------------------------------------------------------------

StepResult envStep(const EnvSpec& spec, const Vector& state, const Vector& action, Rng& rng) {
  if (state.size() != spec.stateDim()) throw DimensionMismatchError("envStep: state dimension");
  if (action.size() != spec.actionDim())
    throw DimensionMismatchError("envStep: action dimension");
  const double u =
      spec.actionDim() > 0 ? clip(action[0], -spec.action_limit, spec.action_limit) : 0.0;

  StepResult res;
  res.regime = 0;
  switch (spec.id) {
    case EnvId::BouncingBall: {
      res.next_state = ballAdvance(spec, state, &res.regime);
      res.reward = 0.0;
      break;
    }
    case EnvId::PendulumPolar: {
      Vector next = rk4(state, spec.dt, [&](const Vector& s) { return pendulumField(spec, s, u); });
      next[0] = wrapAngle(next[0]);
      res.next_state = next;
      res.reward = pendulumReward(state[0], state[1], u);
      break;
    }
    case EnvId::PendulumCartesian: {
      Vector polar(2);
      polar << std::atan2(state[1], state[0]), state[2];
      Vector next = rk4(polar, spec.dt, [&](const Vector& s) { return pendulumField(spec, s, u); });
      Vector obs(3);
      obs << std::cos(next[0]), std::sin(next[0]), next[1];
      res.next_state = obs;
      res.reward = pendulumReward(polar[0], polar[1], u);
      break;
    }
    case EnvId::CartpolePolar: {
      Vector next = rk4(state, spec.dt, [&](const Vector& s) { return cartpoleField(spec, s, u); });
      next[2] = wrapAngle(next[2]);
      res.next_state = next;
      res.reward = cartpoleReward(state[0], state[1], state[2], state[3], u);
      break;
    }
    case EnvId::CartpoleCartesian: {
      Vector polar(4);
      polar << state[0], state[1], std::atan2(state[3], state[2]), state[4];
      Vector next = rk4(polar, spec.dt, [&](const Vector& s) { return cartpoleField(spec, s, u); });
      Vector obs(5);
      obs << next[0], next[1], std::cos(next[2]), std::sin(next[2]), next[3];
      res.next_state = obs;
      res.reward = cartpoleReward(polar[0], polar[1], polar[2], polar[3], u);
      break;
    }
    case EnvId::CartpoleWall: {
      bool contact = false;
      Vector next = rk4(state, spec.dt, [&](const Vector& s) {
        bool c = false;
        Vector f = cartpoleWallField(spec, s, u, &c);
        contact = contact || c;
        return f;
      });
      res.next_state = next;
      res.reward = cartpoleReward(state[0], state[1], state[2], state[3], u);
      res.regime = contact ? 1 : 0;
      break;
    }
  }

  if (spec.noise_std.size() > 0 && spec.noise_std.maxCoeff() > 0.0) {
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (Index i = 0; i < res.next_state.size(); ++i)
      res.next_state[i] += spec.noise_std[std::min<Index>(i, spec.noise_std.size() - 1)] *
                           gauss(rng);
    if (spec.id == EnvId::BouncingBall) res.next_state[0] = std::max(res.next_state[0], 0.0);
    if (spec.id == EnvId::PendulumPolar) res.next_state[0] = wrapAngle(res.next_state[0]);
    if (spec.id == EnvId::CartpolePolar) res.next_state[2] = wrapAngle(res.next_state[2]);
    if (spec.id == EnvId::PendulumCartesian) {
      const double norm = std::hypot(res.next_state[0], res.next_state[1]);
      if (norm > 0.0) res.next_state.head(2) /= norm;
    }
    if (spec.id == EnvId::CartpoleCartesian) {
      const double norm = std::hypot(res.next_state[2], res.next_state[3]);
      if (norm > 0.0) res.next_state.segment(2, 2) /= norm;
    }
  }

  if (!res.next_state.allFinite() || res.next_state.cwiseAbs().maxCoeff() > 1e6)
    throw NonFiniteError("envStep: state diverged in " + spec.name());
  return res;
}

// ---------------------------------------------------------------------------
// Initial states and policies
// ---------------------------------------------------------------------------

Vector sampleInitialState(const EnvSpec& spec, InitKind kind, Rng& rng) {
  std::uniform_real_distribution<double> unif(-1.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  switch (spec.id) {
    case EnvId::BouncingBall: {
      Vector s(2);
      s << 1.25 + 0.75 * unif(rng), 2.0 * unif(rng);
      return s;
    }
    case EnvId::PendulumPolar:
    case EnvId::PendulumCartesian: {
      double theta, thetadot;
      if (kind == InitKind::Explore) {
        theta = M_PI * unif(rng);
        thetadot = 8.0 * unif(rng);
      } else {
        theta = wrapAngle(M_PI + 0.05 * gauss(rng));
        thetadot = 0.05 * gauss(rng);
      }
      if (spec.id == EnvId::PendulumPolar) {
        Vector s(2);
        s << theta, thetadot;
        return s;
      }
      Vector s(3);
      s << std::cos(theta), std::sin(theta), thetadot;
      return s;
    }
    case EnvId::CartpolePolar:
    case EnvId::CartpoleCartesian: {
      double x, xdot, theta, thetadot;
      if (kind == InitKind::Explore) {
        x = unif(rng);
        xdot = 2.0 * unif(rng);
        theta = M_PI * unif(rng);
        thetadot = 4.0 * unif(rng);
      } else {
        x = 0.05 * gauss(rng);
        xdot = 0.05 * gauss(rng);
        theta = 0.05 * gauss(rng);
        thetadot = 0.05 * gauss(rng);
      }
      if (spec.id == EnvId::CartpolePolar) {
        Vector s(4);
        s << x, xdot, theta, thetadot;
        return s;
      }
      Vector s(5);
      s << x, xdot, std::cos(theta), std::sin(theta), thetadot;
      return s;
    }
    case EnvId::CartpoleWall: {
      Vector s(4);
      if (kind == InitKind::Explore)
        s << 0.1 * unif(rng), 0.5 * unif(rng), 0.15 * unif(rng), 0.5 * unif(rng);
      else
        s << 0.02 * gauss(rng), 0.02 * gauss(rng), 0.05 + 0.02 * gauss(rng), 0.02 * gauss(rng);
      return s;
    }
  }
  throw UnsupportedEnvError("sampleInitialState: unknown env");
}

Policy randomPolicy(const EnvSpec& spec) {
  const Index m = spec.actionDim();
  const double limit = spec.action_limit;
  return [m, limit](const Vector&, Rng& rng) {
    std::uniform_real_distribution<double> unif(-limit, limit);
    Vector u(m);
    for (Index i = 0; i < m; ++i) u[i] = unif(rng);
    return u;
  };
}

Vector scriptedExpert(const EnvSpec& spec, const Vector& state) {
  Vector u(1);
  switch (spec.id) {
    case EnvId::PendulumPolar:
    case EnvId::PendulumCartesian: {
      const PolarView p = pendulumPolarOf(spec, state);
      const double theta = wrapAngle(p.theta);
      const double thetadot = p.thetadot;
      const double ml2 = spec.mass * spec.length * spec.length;
      const double mgl = spec.mass * spec.gravity * spec.length;
      // energy relative to the upright rest state
      const double energy = 0.5 * ml2 * thetadot * thetadot + mgl * (std::cos(theta) - 1.0);
      if (std::abs(theta) < 0.3 && std::abs(thetadot) < 1.2) {
        u[0] = -20.0 * theta - 4.0 * thetadot;  // stabilizing catch
      } else if (std::abs(thetadot) < 1e-2 && std::cos(theta) < 0.0) {
        u[0] = spec.action_limit;  // kick out of the hanging rest point
      } else {
        u[0] = -2.0 * energy * thetadot;  // pump toward the homoclinic orbit
      }
      u[0] = clip(u[0], -spec.action_limit, spec.action_limit);
      return u;
    }
    case EnvId::CartpolePolar:
    case EnvId::CartpoleCartesian:
    case EnvId::CartpoleWall: {
      Vector s(4);
      if (spec.id == EnvId::CartpoleCartesian)
        s << state[0], state[1], std::atan2(state[3], state[2]), state[4];
      else
        s << state[0], state[1], state[2], state[3];
      const double theta = spec.id == EnvId::CartpoleWall ? s[2] : wrapAngle(s[2]);
      if (std::abs(theta) < 0.4) {
        u[0] = 2.0 * s[0] + 3.0 * s[1] - 35.0 * theta - 7.0 * s[3];
      } else {
        // pole energy pumping through the cart, with mild centering
        const double mgl = spec.mass * spec.gravity * spec.length;
        const double j = spec.mass * spec.length * spec.length;
        const double energy = 0.5 * j * s[3] * s[3] + mgl * (std::cos(theta) - 1.0);
        u[0] = 1.5 * energy * s[3] * std::cos(theta) - 0.5 * s[0] - 0.5 * s[1];
      }
      u[0] = clip(u[0], -spec.action_limit, spec.action_limit);
      return u;
    }
    case EnvId::BouncingBall:
      throw UnsupportedEnvError("scriptedExpert: bouncing ball has no actuator");
  }
  throw UnsupportedEnvError("scriptedExpert: unknown env");
}

Policy expertPolicy(const EnvSpec& spec, double exploration_std) {
  return [spec, exploration_std](const Vector& x, Rng& rng) {
    Vector u = scriptedExpert(spec, x);
    if (exploration_std > 0.0) {
      std::normal_distribution<double> gauss(0.0, exploration_std);
      for (Index i = 0; i < u.size(); ++i)
        u[i] = clip(u[i] + gauss(rng), -spec.action_limit, spec.action_limit);
    }
    return u;
  };
}

PolicyFactory statelessPolicy(Policy policy) {
  return [policy](int) { return policy; };
}

rarhmm::Dataset collectTrajectories(const EnvSpec& spec, const PolicyFactory& policy, int n,
                                    int t, InitKind init, std::uint64_t seed) {
  if (n < 1 || t < 1) throw DomainError("collectTrajectories: n and t must be >= 1");
  rarhmm::Dataset data;
  data.reserve(n);
  for (int traj_i = 0; traj_i < n; ++traj_i) {
    Rng rng(splitSeed(seed, traj_i));
    Policy pi = policy(traj_i);
    rarhmm::Trajectory traj;
    traj.dt = spec.dt;
    traj.weight = 1.0;
    traj.id = "traj-" + std::to_string(traj_i);
    traj.env = spec.name();
    traj.x.resize(t, spec.stateDim());
    traj.u.resize(t, spec.actionDim());
    Vector x = sampleInitialState(spec, init, rng);
    for (int step = 0; step < t; ++step) {
      Vector u = pi(x, rng);
      for (Index i = 0; i < u.size(); ++i) u[i] = clip(u[i], -spec.action_limit, spec.action_limit);
      traj.x.row(step) = x.transpose();
      traj.u.row(step) = u.transpose();
      if (step + 1 < t) x = envStep(spec, x, u, rng).next_state;
    }
    data.push_back(std::move(traj));
  }
  return data;
}

double nmse(const Matrix& predictions, const Matrix& truth, const Vector& variance) {
  if (predictions.rows() != truth.rows() || predictions.cols() != truth.cols())
    throw DimensionMismatchError("nmse: prediction/truth shapes differ");
  if (variance.size() != truth.cols()) throw DimensionMismatchError("nmse: normalizer size");
  if (variance.minCoeff() <= 0.0) throw DomainError("nmse: normalizer must be positive");
  double acc = 0.0;
  for (Index c = 0; c < truth.cols(); ++c)
    acc += (predictions.col(c) - truth.col(c)).squaredNorm() /
           (static_cast<double>(truth.rows()) * variance[c]);
  return acc / static_cast<double>(truth.cols());
}

// ---------------------------------------------------------------------------
// HybridPolicy
// ---------------------------------------------------------------------------

HybridPolicy::HybridPolicy(const rarhmm::ModelParams& model, bool sample_actions,
                           double exploration_floor, double action_clip)
    : model_(&model),
      sample_actions_(sample_actions),
      floor_(exploration_floor),
      clip_(action_clip) {
  if (!model.closedLoop()) throw DomainError("HybridPolicy: model has no controller block");
  reset();
}

void HybridPolicy::reset() {
  belief_ = model_->phi;
  fresh_ = true;
}

Vector HybridPolicy::act(const Vector& x, Rng& rng) {
  const int k = model_->k;
  Vector logb(k);
  if (fresh_) {
    for (int z = 0; z < k; ++z)
      logb[z] = std::log(std::max(model_->phi[z], 1e-300)) +
                model_->init[z].omega.logpdf(x, model_->init[z].mu);
  } else {
    const Vector propagated = model_->link.matrix(last_x_, last_u_).transpose() * belief_;
    for (int z = 0; z < k; ++z) {
      const Vector mean = model_->dynamics[z].mean(last_x_, last_u_);
      logb[z] = std::log(std::max(propagated[z], 1e-300)) +
                model_->dynamics[z].lambda.logpdf(x, mean);
    }
  }
  belief_ = softmax(logb);

  const Vector feat = model_->ctl_features(x);
  Vector u;
  if (sample_actions_) {
    std::discrete_distribution<int> pick(belief_.data(), belief_.data() + k);
    const int z = pick(rng);
    u = model_->controller[z].delta.sample(model_->controller[z].gain * feat, rng);
  } else {
    u = Vector::Zero(model_->m);
    for (int z = 0; z < k; ++z) u += belief_[z] * (model_->controller[z].gain * feat);
  }
  if (sample_actions_ && floor_ > 0.0) {
    std::normal_distribution<double> gauss(0.0, floor_);
    for (Index i = 0; i < u.size(); ++i) u[i] += gauss(rng);
  }
  if (clip_ > 0.0)
    for (Index i = 0; i < u.size(); ++i) u[i] = clip(u[i], -clip_, clip_);

  // fold the executed action's likelihood into the belief
  for (int z = 0; z < k; ++z)
    logb[z] = std::log(std::max(belief_[z], 1e-300)) +
              model_->controller[z].delta.logpdf(u, model_->controller[z].gain * feat);
  belief_ = softmax(logb);

  last_x_ = x;
  last_u_ = u;
  fresh_ = false;
  return u;
}

PolicyFactory modelPolicyFactory(const rarhmm::ModelParams& model, bool sample_actions,
                                 double exploration_floor, double action_clip) {
  auto owned = std::make_shared<rarhmm::ModelParams>(model);
  return [owned, sample_actions, exploration_floor, action_clip](int) {
    auto state =
        std::make_shared<HybridPolicy>(*owned, sample_actions, exploration_floor, action_clip);
    return Policy([owned, state](const Vector& x, Rng& rng) { return state->act(x, rng); });
  };
}

}  // namespace hybriddyn::envs
