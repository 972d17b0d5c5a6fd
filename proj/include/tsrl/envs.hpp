#pragma once

#include <tsrl/common.hpp>
#include <tsrl/data.hpp>
#include <tsrl/rng.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace tsrl::envs {

enum class BehaviorPolicy { random, medium, noisy_expert };

inline BehaviorPolicy behavior_from_string(const std::string& s) {
  if (s == "random") return BehaviorPolicy::random;
  if (s == "medium") return BehaviorPolicy::medium;
  if (s == "noisy_expert") return BehaviorPolicy::noisy_expert;
  throw ArgumentError("unknown behavior policy: " + s);
}

struct EvalReport {
  double mean_return = 0.0;
  double std_return = 0.0;
  double normalized_score = 0.0;
  int episodes = 0;
  int seeds = 0;
};

using EnvParams = std::map<std::string, double>;

/// Synthetic dynamical system with closed-form forward derivative F(s,a)
/// and a closed-form reverse derivative G(s', a) implied by time-reversal
/// symmetry. For the reversible systems G inverts the step exactly; for
/// pointmass_friction G is the reverse of the frictionless law, so friction
/// shows up as a ground-truth symmetry violation.
class OracleEnv {
 public:
  enum class Kind { linear_reversible, pendulum, pointmass_friction };

  std::string name;
  Kind kind = Kind::linear_reversible;
  int state_dim = 0;
  int action_dim = 0;
  int horizon = 200;
  RowVecd action_bound;  // symmetric [-b, b] per dimension
  std::uint64_t seed = 0;

  // linear_reversible: s' = s + A_d s + B_d a, (I + A_d) invertible
  Matd A_d, B_d, step_mat, step_mat_inv;
  // pendulum
  double omega_sq = 10.0, ctrl_gain = 5.0, dt = 0.05;
  // pointmass_friction
  double mu = 0.0;

  Vecd clip_action(const Vecd& a) const {
    Vecd out = a;
    for (Eigen::Index i = 0; i < out.size(); ++i) {
      const double b = action_bound(0, i);
      out(i) = std::clamp(out(i), -b, b);
    }
    return out;
  }

  Vecd reset(Rng& rng) const {
    Vecd s(state_dim);
    switch (kind) {
      case Kind::linear_reversible:
        for (int i = 0; i < state_dim; ++i) s(i) = rng.uniform(-1.0, 1.0);
        break;
      case Kind::pendulum:
        s(0) = rng.uniform(-1.0, 1.0);
        s(1) = rng.uniform(-0.5, 0.5);
        break;
      case Kind::pointmass_friction:
        s(0) = rng.uniform(-1.0, 1.0);
        s(1) = rng.uniform(-1.0, 1.0);
        s(2) = rng.uniform(-0.5, 0.5);
        s(3) = rng.uniform(-0.5, 0.5);
        break;
    }
    return s;
  }

  /// F(s, a): the exact discrete-time state derivative, step(s,a) - s.
  Vecd forward_derivative(const Vecd& s, const Vecd& a) const {
    switch (kind) {
      case Kind::linear_reversible:
        return A_d * s + B_d * a;
      case Kind::pendulum: {
        Vecd d(2);
        d(0) = dt * s(1);
        d(1) = dt * (-omega_sq * std::sin(s(0)) + ctrl_gain * a(0));
        return d;
      }
      case Kind::pointmass_friction: {
        Vecd d(4);
        d(0) = dt * s(2);
        d(1) = dt * s(3);
        d(2) = dt * (a(0) - mu * s(2));
        d(3) = dt * (a(1) - mu * s(3));
        return d;
      }
    }
    throw std::logic_error("unreachable");
  }

  Vecd step_state(const Vecd& s, const Vecd& a) const { return s + forward_derivative(s, a); }

  /// G(s', a): reverse derivative of the time-reversal symmetric law, i.e.
  /// the -ds the symmetric system would need to return from s' to s.
  /// pointmass_friction deliberately uses the mu = 0 law here.
  Vecd reverse_derivative(const Vecd& s_next, const Vecd& a) const {
    switch (kind) {
      case Kind::linear_reversible:
        // s = (I+A)^-1 (s' - B a);  G = s - s'
        return (step_mat_inv - Matd::Identity(state_dim, state_dim)) * s_next -
               step_mat_inv * B_d * a;
      case Kind::pendulum: {
        // Newton-invert theta from theta' = theta + dt*thetadot(theta).
        const double u = ctrl_gain * a(0);
        double theta = s_next(0);
        for (int it = 0; it < 50; ++it) {
          const double f = theta - s_next(0) + dt * s_next(1) +
                           dt * dt * omega_sq * std::sin(theta) - dt * dt * u;
          const double fp = 1.0 + dt * dt * omega_sq * std::cos(theta);
          const double step = f / fp;
          theta -= step;
          if (std::abs(step) < 1e-15) break;
        }
        const double thetadot = s_next(1) + dt * omega_sq * std::sin(theta) - dt * u;
        Vecd g(2);
        g(0) = theta - s_next(0);
        g(1) = thetadot - s_next(1);
        return g;
      }
      case Kind::pointmass_friction: {
        Vecd g(4);
        g(0) = -dt * s_next(2) + dt * dt * a(0);
        g(1) = -dt * s_next(3) + dt * dt * a(1);
        g(2) = -dt * a(0);
        g(3) = -dt * a(1);
        return g;
      }
    }
    throw std::logic_error("unreachable");
  }

  double reward(const Vecd& s, const Vecd& a) const {
    switch (kind) {
      case Kind::linear_reversible:
        // state cost saturates so an unstable policy cannot stretch the
        // normalized-score scale arbitrarily
        return -(std::min(s.squaredNorm(), 4.0) + 0.1 * a.squaredNorm());
      case Kind::pendulum:
        return -(s(0) * s(0) + 0.1 * s(1) * s(1) + 0.001 * a(0) * a(0));
      case Kind::pointmass_friction:
        return -(s.head(2).squaredNorm() + 0.1 * s.tail(2).squaredNorm() +
                 0.01 * a.squaredNorm());
    }
    throw std::logic_error("unreachable");
  }

  Vecd expert_action(const Vecd& s) const {
    switch (kind) {
      case Kind::linear_reversible:
        return clip_action(-lqr_gain_ * s);
      case Kind::pendulum: {
        Vecd a(1);
        a(0) = -(3.0 * s(0) + 1.0 * s(1)) / ctrl_gain * omega_sq / 3.0;
        return clip_action(a);
      }
      case Kind::pointmass_friction: {
        Vecd a(2);
        a(0) = -(0.8 * s(0) + 1.4 * s(2));
        a(1) = -(0.8 * s(1) + 1.4 * s(3));
        return clip_action(a);
      }
    }
    throw std::logic_error("unreachable");
  }

  Vecd behavior_action(const Vecd& s, BehaviorPolicy kind_, Rng& rng) const {
    Vecd a(action_dim);
    switch (kind_) {
      case BehaviorPolicy::random:
        for (int i = 0; i < action_dim; ++i)
          a(i) = rng.uniform(-action_bound(0, i), action_bound(0, i));
        return a;
      case BehaviorPolicy::medium: {
        Vecd base = 0.35 * expert_action(s);
        for (int i = 0; i < action_dim; ++i) base(i) += 0.2 * rng.normal();
        return clip_action(base);
      }
      case BehaviorPolicy::noisy_expert: {
        Vecd base = expert_action(s);
        for (int i = 0; i < action_dim; ++i) base(i) += 0.05 * rng.normal();
        return clip_action(base);
      }
    }
    throw std::logic_error("unreachable");
  }

  void finalize() {
    if (kind == Kind::linear_reversible) {
      step_mat = Matd::Identity(state_dim, state_dim) + A_d;
      step_mat_inv = step_mat.inverse();
      lqr_gain_ = solve_lqr();
    }
  }

 private:
  Matd lqr_gain_;

  /// Discrete Riccati iteration for cost s'Qs + a'Ra with Q = I, R = 0.1 I.
  Matd solve_lqr() const {
    const Matd M = step_mat;
    const Matd& B = B_d;
    const Matd Q = Matd::Identity(state_dim, state_dim);
    const Matd R = 0.1 * Matd::Identity(action_dim, action_dim);
    Matd P = Q;
    for (int it = 0; it < 500; ++it) {
      const Matd BtP = B.transpose() * P;
      const Matd K = (R + BtP * B).ldlt().solve(BtP * M);
      const Matd Pn = Q + M.transpose() * P * (M - B * K);
      if ((Pn - P).cwiseAbs().maxCoeff() < 1e-12) {
        P = Pn;
        break;
      }
      P = Pn;
    }
    const Matd BtP = B.transpose() * P;
    return (R + BtP * B).ldlt().solve(BtP * M);
  }
};

/// Ground-truth T-symmetry violation: || F(s,a) + G(step(s,a), a) ||^2.
inline double analytic_tsym_residual(const OracleEnv& env, const Vecd& s, const Vecd& a) {
  const Vecd f = env.forward_derivative(s, a);
  const Vecd g = env.reverse_derivative(s + f, a);
  return (f + g).squaredNorm();
}

inline OracleEnv make_env(const std::string& name, const EnvParams& params, std::uint64_t seed) {
  auto get = [&](const std::string& key, double dflt) {
    auto it = params.find(key);
    return it == params.end() ? dflt : it->second;
  };
  OracleEnv env;
  env.name = name;
  env.seed = seed;
  if (name == "linear_reversible") {
    env.kind = OracleEnv::Kind::linear_reversible;
    env.state_dim = 4;
    env.horizon = static_cast<int>(get("horizon", 200));
    const bool a_zero = get("a_zero", 0) != 0;
    const bool b_identity = get("b_identity", 0) != 0;
    if (a_zero) {
      env.A_d = Matd::Zero(4, 4);
    } else {
      // Two planar rotations with a mild expansion: I + A_d is invertible,
      // so the step is exactly reversible, while the open loop is unstable
      // enough that uncontrolled states drift away.
      const double t1 = get("theta1", 0.25), t2 = get("theta2", 0.15);
      const double growth = get("growth", 1.05);
      Matd rot = Matd::Zero(4, 4);
      rot.block<2, 2>(0, 0) << std::cos(t1), -std::sin(t1), std::sin(t1), std::cos(t1);
      rot.block<2, 2>(2, 2) << std::cos(t2), -std::sin(t2), std::sin(t2), std::cos(t2);
      env.A_d = growth * rot - Matd::Identity(4, 4);
    }
    if (b_identity) {
      env.action_dim = 4;
      env.B_d = Matd::Identity(4, 4);
    } else {
      env.action_dim = 2;
      env.B_d = Matd(4, 2);
      env.B_d << 0.5, 0.1, 0.1, 0.5, 0.4, -0.2, -0.2, 0.4;
    }
    env.action_bound = RowVecd::Constant(env.action_dim, 1.0);
  } else if (name == "pendulum") {
    env.kind = OracleEnv::Kind::pendulum;
    env.state_dim = 2;
    env.action_dim = 1;
    env.horizon = static_cast<int>(get("horizon", 200));
    env.omega_sq = get("omega_sq", 10.0);
    env.ctrl_gain = get("ctrl_gain", 5.0);
    env.dt = get("dt", 0.05);
    env.action_bound = RowVecd::Constant(1, 2.0);
  } else if (name == "pointmass_friction") {
    env.kind = OracleEnv::Kind::pointmass_friction;
    env.state_dim = 4;
    env.action_dim = 2;
    env.horizon = static_cast<int>(get("horizon", 150));
    env.mu = get("mu", 0.0);
    env.dt = get("dt", 0.1);
    env.action_bound = RowVecd::Constant(2, 1.0);
  } else {
    throw ArgumentError("unknown oracle environment: " + name);
  }
  env.finalize();
  return env;
}

/// Episodic rollouts with the given behavior policy, concatenated until
/// exactly n transitions. Episode ends are marked as timeouts (these tasks
/// have no absorbing terminal states).
inline data::TransitionDataset collect_dataset(const OracleEnv& env, BehaviorPolicy policy,
                                               Eigen::Index n, std::uint64_t seed) {
  if (n < 1) throw ArgumentError("collect_dataset: n must be >= 1");
  data::TransitionDataset d;
  d.states.resize(n, env.state_dim);
  d.actions.resize(n, env.action_dim);
  d.next_states.resize(n, env.state_dim);
  d.rewards.resize(n);
  d.terminals.assign(static_cast<std::size_t>(n), 0);
  d.timeouts.assign(static_cast<std::size_t>(n), 0);
  Eigen::Index row = 0;
  std::uint64_t episode = 0;
  while (row < n) {
    Rng reset_rng = Rng::derive(seed, "reset", episode);
    Rng policy_rng = Rng::derive(seed, "policy", episode);
    Vecd s = env.reset(reset_rng);
    for (int t = 0; t < env.horizon && row < n; ++t, ++row) {
      const Vecd a = env.behavior_action(s, policy, policy_rng);
      const Vecd s_next = env.step_state(s, a);
      d.states.row(row) = s.transpose();
      d.actions.row(row) = a.transpose();
      d.next_states.row(row) = s_next.transpose();
      d.rewards(row) = env.reward(s, a);
      if (t == env.horizon - 1) d.timeouts[static_cast<std::size_t>(row)] = 1;
      s = s_next;
    }
    ++episode;
  }
  d.name = env.name + "-" + std::to_string(n);
  d.validate();
  return d;
}

using ActFn = std::function<Vecd(const Vecd&)>;

inline double rollout_return(const OracleEnv& env, const ActFn& act, Rng& reset_rng) {
  Vecd s = env.reset(reset_rng);
  double ret = 0.0;
  for (int t = 0; t < env.horizon; ++t) {
    const Vecd a = env.clip_action(act(s));
    ret += env.reward(s, a);
    s = env.step_state(s, a);
  }
  return ret;
}

struct ScoreRefs {
  double random_ref = 0.0;
  double expert_ref = 0.0;
};

namespace detail {

inline double mean_return(const OracleEnv& env, const ActFn& act, int episodes,
                          std::uint64_t seed) {
  double total = 0.0;
  for (int e = 0; e < episodes; ++e) {
    Rng rng = Rng::derive(seed, "ref-episode", static_cast<std::uint64_t>(e));
    total += rollout_return(env, act, rng);
  }
  return total / episodes;
}

inline std::string env_signature(const OracleEnv& env) {
  std::ostringstream os;
  os << env.name << ":" << env.state_dim << ":" << env.action_dim << ":" << env.horizon << ":"
     << env.mu << ":" << env.omega_sq << ":" << env.dt;
  return os.str();
}

}  // namespace detail

/// Normalization references for the env: mean return of the uniform-random
/// policy and of the scripted expert, computed once per process under a
/// fixed protocol (100 episodes, fixed seed) and cached.
inline ScoreRefs score_refs(const OracleEnv& env) {
  static std::map<std::string, ScoreRefs> cache;
  const std::string key = detail::env_signature(env);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  constexpr std::uint64_t kRefSeed = 90210;
  Rng random_rng = Rng::derive(kRefSeed, "ref-random-actions");
  ScoreRefs refs;
  refs.random_ref = detail::mean_return(
      env,
      [&](const Vecd& s) {
        (void)s;
        Vecd a(env.action_dim);
        for (int i = 0; i < env.action_dim; ++i)
          a(i) = random_rng.uniform(-env.action_bound(0, i), env.action_bound(0, i));
        return a;
      },
      100, kRefSeed);
  refs.expert_ref = detail::mean_return(
      env, [&](const Vecd& s) { return env.expert_action(s); }, 100, kRefSeed + 1);
  cache[key] = refs;
  return refs;
}

inline double normalized_score(const OracleEnv& env, double mean_return) {
  const ScoreRefs refs = score_refs(env);
  return 100.0 * (mean_return - refs.random_ref) / (refs.expert_ref - refs.random_ref);
}

/// Evaluation protocol: `episodes` rollouts for each seed in `seeds`;
/// mean/std over all episodes x seeds.
inline EvalReport evaluate_policy(const OracleEnv& env, const ActFn& act, int episodes,
                                  const std::vector<std::uint64_t>& seeds) {
  if (episodes < 1) throw ArgumentError("evaluate_policy: episodes must be >= 1");
  if (seeds.empty()) throw ArgumentError("evaluate_policy: need at least one seed");
  std::vector<double> returns;
  for (std::uint64_t seed : seeds) {
    for (int e = 0; e < episodes; ++e) {
      Rng rng = Rng::derive(seed, "eval-episode", static_cast<std::uint64_t>(e));
      returns.push_back(rollout_return(env, act, rng));
    }
  }
  EvalReport rep;
  rep.episodes = episodes;
  rep.seeds = static_cast<int>(seeds.size());
  const auto n = static_cast<double>(returns.size());
  for (double r : returns) rep.mean_return += r;
  rep.mean_return /= n;
  if (returns.size() > 1) {
    double ss = 0.0;
    for (double r : returns) ss += (r - rep.mean_return) * (r - rep.mean_return);
    rep.std_return = std::sqrt(ss / (n - 1.0));
  }
  rep.normalized_score = normalized_score(env, rep.mean_return);
  return rep;
}

}  // namespace tsrl::envs
