#pragma once

#include <tsrl/augmentation.hpp>
#include <tsrl/common.hpp>
#include <tsrl/data.hpp>
#include <tsrl/nn.hpp>
#include <tsrl/tdm.hpp>

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

namespace tsrl::agent {

struct TsrlConfig {
  double actor_lr = 3e-4;
  double critic_lr = 3e-4;
  double gamma = 0.99;
  double rho = 0.005;  // target update rate
  double policy_noise = 0.2;
  double noise_clip = 0.5;
  int policy_update_freq = 2;
  std::int64_t iterations = 1000000;
  double alpha0 = 2.5;
  double lambda1 = 5.0;
  double lambda2 = 1.0;
  double dropout_rate = 0.0;
  bool no_r = false;  // critics consume raw (s, a) instead of the latent pair
  bool no_p = false;  // replace both latent constraints by a raw behavior-cloning term
  bool no_a = false;  // disable latent-space augmentation
  Eigen::Index batch_size = 256;
  int k = 1;  // augmented samples per transition
  std::vector<Eigen::Index> policy_hidden = {512, 512};
  std::vector<Eigen::Index> critic_hidden = {512, 512};

  void validate() const {
    if (!(gamma > 0.0 && gamma < 1.0)) throw ArgumentError("tsrl config: gamma must be in (0,1)");
    if (!(rho > 0.0 && rho <= 1.0)) throw ArgumentError("tsrl config: rho must be in (0,1]");
    if (actor_lr <= 0.0 || critic_lr <= 0.0)
      throw ArgumentError("tsrl config: learning rates must be > 0");
    if (policy_update_freq < 1) throw ArgumentError("tsrl config: policy_update_freq must be >= 1");
    if (batch_size < 1) throw ArgumentError("tsrl config: batch_size must be >= 1");
    if (iterations < 1) throw ArgumentError("tsrl config: iterations must be >= 1");
    if (k < 0) throw ArgumentError("tsrl config: k must be >= 0");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0)
      throw ArgumentError("tsrl config: dropout_rate must be in [0,1)");
  }
};

/// alpha = alpha0 / mean(|Q|), denominator floored; treated as a constant.
inline double alpha_normalizer(const Vecd& q_values, double alpha0) {
  if (q_values.size() == 0) throw ArgumentError("alpha_normalizer: empty batch");
  const double denom = std::max(q_values.cwiseAbs().mean(), 1e-8);
  return alpha0 / denom;
}

/// TD3-style actor-critic over the frozen TDM's latents. The policy maps
/// normalized raw states to bounded actions; the twin critics consume
/// (z_s, z_a) pairs (or raw pairs under no_r).
template <class S>
struct TsrlAgent {
  TsrlConfig cfg;
  tdm::TdmModel<S> tdm_model;  // frozen; never receives gradients
  RowVec<S> action_bound;

  nn::Mlp<S> policy, policy_target;
  nn::Mlp<S> q1, q2, q1_target, q2_target;
  nn::Adam<S> opt_policy, opt_q1, opt_q2;
  std::int64_t step_count = 0;

  Eigen::Index critic_input_dim() const {
    return cfg.no_r ? tdm_model.state_dim + tdm_model.action_dim
                    : tdm_model.latent_state_dim + tdm_model.latent_action_dim;
  }

  /// Deterministic bounded policy on normalized states; no dropout.
  Mat<S> policy_forward(const Mat<S>& states) const {
    Mat<S> raw = policy.forward(states).array().tanh();
    return (raw.array().rowwise() * action_bound.row(0).array()).matrix();
  }

  Mat<S> target_policy_forward(const Mat<S>& states) const {
    Mat<S> raw = policy_target.forward(states).array().tanh();
    return (raw.array().rowwise() * action_bound.row(0).array()).matrix();
  }

  /// Evaluation-time action for a raw (unnormalized) state.
  Vecd act(const Vecd& raw_state) const {
    if (raw_state.size() != tdm_model.state_dim)
      throw ArgumentError("act: state dimension mismatch");
    const Vecd norm = data::normalize_state(raw_state, tdm_model.stats);
    Mat<S> s(1, norm.size());
    s.row(0) = norm.transpose().template cast<S>();
    Vecd a = policy_forward(s).row(0).template cast<double>().transpose();
    for (Eigen::Index i = 0; i < a.size(); ++i) {
      const double b = static_cast<double>(action_bound(0, i));
      a(i) = std::clamp(a(i), -b, b);
    }
    return a;
  }
};

template <class S>
TsrlAgent<S> make_agent(const tdm::TdmModel<S>& model, const TsrlConfig& cfg,
                        const RowVecd& action_bound, std::uint64_t seed) {
  cfg.validate();
  TsrlAgent<S> agent;
  agent.cfg = cfg;
  agent.tdm_model = model;
  agent.action_bound = action_bound.template cast<S>();
  Rng rng = Rng::derive(seed, "tsrl-init");
  agent.policy = nn::Mlp<S>::init(model.state_dim, cfg.policy_hidden, model.action_dim, rng);
  const Eigen::Index qin = agent.critic_input_dim();
  agent.q1 = nn::Mlp<S>::init(qin, cfg.critic_hidden, 1, rng);
  agent.q2 = nn::Mlp<S>::init(qin, cfg.critic_hidden, 1, rng);
  agent.policy_target = agent.policy;
  agent.q1_target = agent.q1;
  agent.q2_target = agent.q2;
  agent.opt_policy = nn::Adam<S>(agent.policy, cfg.actor_lr);
  agent.opt_q1 = nn::Adam<S>(agent.q1, cfg.critic_lr);
  agent.opt_q2 = nn::Adam<S>(agent.q2, cfg.critic_lr);
  return agent;
}

/// Raw-space minibatch in the normalized state space.
template <class S>
struct RawBatch {
  Mat<S> s, a, s_next;
  Vec<S> rewards;
  Vec<S> done;  // environment terminals only; timeouts bootstrap normally
};

template <class S>
RawBatch<S> sample_raw_batch(const data::TransitionDataset& d, Eigen::Index batch_size,
                             Rng& rng) {
  RawBatch<S> b;
  b.s.resize(batch_size, d.state_dim());
  b.a.resize(batch_size, d.action_dim());
  b.s_next.resize(batch_size, d.state_dim());
  b.rewards.resize(batch_size);
  b.done.resize(batch_size);
  for (Eigen::Index i = 0; i < batch_size; ++i) {
    const auto r = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(d.n())));
    b.s.row(i) = d.states.row(r).template cast<S>();
    b.a.row(i) = d.actions.row(r).template cast<S>();
    b.s_next.row(i) = d.next_states.row(r).template cast<S>();
    b.rewards(i) = static_cast<S>(d.rewards(r));
    b.done(i) = d.terminal_at(r) ? S(1) : S(0);
  }
  return b;
}

/// Inputs the critics train on: current pair, target pair, reward, done.
template <class S>
struct CriticBatch {
  Mat<S> in_now;      // rows of (z_s | z_a) or raw (s | a)
  Mat<S> in_next;     // rows for the target critics
  Vec<S> rewards;
  Vec<S> done;
};

/// Clipped-double-Q regression: y = r + gamma (1-done) min(Q1', Q2')(next);
/// both critics fit y by squared error, gradients stop at y.
template <class S>
double critic_update(TsrlAgent<S>& agent, const CriticBatch<S>& cb, double* q_mean_out = nullptr) {
  const Mat<S> q1n = agent.q1_target.forward(cb.in_next);
  const Mat<S> q2n = agent.q2_target.forward(cb.in_next);
  const Mat<S> qmin = q1n.cwiseMin(q2n);
  Mat<S> y(cb.rewards.size(), 1);
  for (Eigen::Index i = 0; i < y.rows(); ++i)
    y(i, 0) = cb.rewards(i) +
              static_cast<S>(agent.cfg.gamma) * (S(1) - cb.done(i)) * qmin(i, 0);

  ad::Tape<S> t;
  nn::MlpVars<S> q1v = nn::register_mlp(t, agent.q1, true);
  nn::MlpVars<S> q2v = nn::register_mlp(t, agent.q2, true);
  ad::Var x = t.constant(cb.in_now);
  ad::Var target = t.constant(y);
  ad::Var q1_out = nn::apply(t, q1v, x);
  ad::Var q2_out = nn::apply(t, q2v, x);
  ad::Var loss = t.add(t.mean_all(t.rowwise_sqnorm(t.sub(q1_out, target))),
                       t.mean_all(t.rowwise_sqnorm(t.sub(q2_out, target))));
  const double value = static_cast<double>(t.val(loss)(0, 0));
  if (!std::isfinite(value)) throw NumericalError("non-finite critic loss");
  if (q_mean_out) *q_mean_out = static_cast<double>(t.val(q1_out).mean());
  t.backward(loss);
  agent.opt_q1.step(agent.q1, t, q1v);
  agent.opt_q2.step(agent.q2, t, q2v);
  return value;
}

struct PolicyUpdateResult {
  double loss = 0.0;
  double alpha = 0.0;
  double q_mean = 0.0;
};

/// Maximizes alpha Q1(phi(s, pi(s))) - lambda1 ||z_a^pi - z_a||^2
///   - lambda2 l_tsym(phi(s, pi(s))), batch-mean. Gradients flow through the
/// frozen encoder/critic into the policy but never into their parameters.
/// Under no_p both constraint terms become the raw BC term ||pi(s) - a||^2.
template <class S>
PolicyUpdateResult policy_update(TsrlAgent<S>& agent, const RawBatch<S>& batch, double lambda1,
                                 double lambda2, Rng& rng) {
  const auto& cfg = agent.cfg;
  ad::Tape<S> t;
  nn::MlpVars<S> pol = nn::register_mlp(t, agent.policy, true);
  nn::MlpVars<S> enc = nn::register_mlp(t, agent.tdm_model.encoder, false);
  nn::MlpVars<S> q1v = nn::register_mlp(t, agent.q1, false);

  ad::Var s_const = t.constant(batch.s);
  ad::Var pre = cfg.dropout_rate > 0.0
                    ? nn::apply_dropout(t, pol, s_const, cfg.dropout_rate, rng)
                    : nn::apply(t, pol, s_const);
  ad::Var a_pi = t.mul_rowvec(t.tanh_(pre), agent.action_bound);

  const Eigen::Index dz = agent.tdm_model.latent_state_dim;
  const Eigen::Index dw = agent.tdm_model.latent_action_dim;
  ad::Var z_pi;  // phi(s, pi(s)) when any latent consumer needs it
  if (!cfg.no_r || !cfg.no_p) z_pi = nn::apply(t, enc, t.concat_cols(s_const, a_pi));

  ad::Var q_in = cfg.no_r ? t.concat_cols(s_const, a_pi) : z_pi;
  ad::Var q_out = nn::apply(t, q1v, q_in);

  const double alpha =
      alpha_normalizer(Matd(t.val(q_out).template cast<double>()).col(0), cfg.alpha0);

  ad::Var loss = t.scale(t.mean_all(q_out), static_cast<S>(-alpha));
  if (cfg.no_p) {
    ad::Var bc = t.mean_all(t.rowwise_sqnorm(t.sub(a_pi, t.constant(batch.a))));
    loss = t.add(loss, bc);
  } else {
    auto [zs_data, za_data] = agent.tdm_model.encode(batch.s, batch.a);
    ad::Var za_pi = t.slice_cols(z_pi, dz, dw);
    if (lambda1 != 0.0) {
      ad::Var dev = t.mean_all(t.rowwise_sqnorm(t.sub(za_pi, t.constant(za_data))));
      loss = t.add(loss, t.scale(dev, static_cast<S>(lambda1)));
    }
    if (lambda2 != 0.0) {
      nn::MlpVars<S> fv = nn::register_mlp(t, agent.tdm_model.fwd_dyn, false);
      nn::MlpVars<S> gv = nn::register_mlp(t, agent.tdm_model.rvs_dyn, false);
      ad::Var zs_pi = t.slice_cols(z_pi, 0, dz);
      ad::Var f_out = nn::apply(t, fv, t.concat_cols(zs_pi, za_pi));
      ad::Var g_out = nn::apply(t, gv, t.concat_cols(t.add(zs_pi, f_out), za_pi));
      ad::Var tsym = t.mean_all(t.rowwise_sqnorm(t.add(f_out, g_out)));
      loss = t.add(loss, t.scale(tsym, static_cast<S>(lambda2)));
    }
  }
  PolicyUpdateResult res;
  res.loss = static_cast<double>(t.val(loss)(0, 0));
  if (!std::isfinite(res.loss)) throw NumericalError("non-finite policy loss");
  res.alpha = alpha;
  res.q_mean = static_cast<double>(t.val(q_out).mean());
  t.backward(loss);
  agent.opt_policy.step(agent.policy, t, pol);
  return res;
}

template <class S>
void soft_update_targets(TsrlAgent<S>& agent) {
  nn::soft_update(agent.q1_target, agent.q1, agent.cfg.rho);
  nn::soft_update(agent.q2_target, agent.q2, agent.cfg.rho);
  nn::soft_update(agent.policy_target, agent.policy, agent.cfg.rho);
}

struct StepMetrics {
  double critic_loss = 0.0;
  std::optional<double> policy_loss;
  std::optional<double> alpha;
  double kept_fraction = 0.0;
  double q_mean = 0.0;
};

/// One TSRL iteration: encode the raw batch, augment in latent space unless
/// disabled, regress the critics, and update policy + targets on schedule.
template <class S>
StepMetrics train_step(TsrlAgent<S>& agent, const RawBatch<S>& raw,
                       const aug::AugmentationRule& rule, Rng& rng) {
  const auto& cfg = agent.cfg;
  const auto& model = agent.tdm_model;
  const Eigen::Index B = raw.s.rows();
  StepMetrics metrics;

  // Target actions: smoothed target policy in raw action space, clipped.
  Mat<S> a_next = agent.target_policy_forward(raw.s_next);
  for (Eigen::Index r = 0; r < a_next.rows(); ++r)
    for (Eigen::Index c = 0; c < a_next.cols(); ++c) {
      const double noise = std::clamp(cfg.policy_noise * rng.normal(), -cfg.noise_clip,
                                      cfg.noise_clip);
      const double b = static_cast<double>(agent.action_bound(0, c));
      a_next(r, c) = static_cast<S>(
          std::clamp(static_cast<double>(a_next(r, c)) + noise, -b, b));
    }

  CriticBatch<S> cb;
  const bool augment = !cfg.no_a && !cfg.no_r && cfg.k > 0;
  if (cfg.no_r) {
    cb.in_now.resize(B, raw.s.cols() + raw.a.cols());
    cb.in_now << raw.s, raw.a;
    cb.in_next.resize(B, raw.s.cols() + raw.a.cols());
    cb.in_next << raw.s_next, a_next;
    cb.rewards = raw.rewards;
    cb.done = raw.done;
  } else {
    auto [zs, za] = model.encode(raw.s, raw.a);
    auto [zt_s, zt_a] = model.encode(raw.s_next, a_next);

    aug::AugmentedRows<S> extra;
    if (augment) {
      Mat<S> zs_next_enc = model.encode(raw.s_next, raw.a).first;
      aug::LatentBatch<S> lb{zs, za, zs_next_enc, raw.rewards, raw.done};
      extra = aug::augment_batch(model, lb, rule, rng);
      metrics.kept_fraction = extra.kept_fraction();
    }
    const Eigen::Index total = B + extra.count();
    const Eigen::Index zc = model.latent_state_dim + model.latent_action_dim;
    cb.in_now.resize(total, zc);
    cb.in_next.resize(total, zc);
    cb.rewards.resize(total);
    cb.done.resize(total);
    cb.in_now.topRows(B) << zs, za;
    cb.in_next.topRows(B) << zt_s, zt_a;
    cb.rewards.head(B) = raw.rewards;
    cb.done.head(B) = raw.done;
    if (extra.count() > 0) {
      cb.in_now.bottomRows(extra.count()) << extra.zs, extra.za;
      // Augmented rows have no raw state for the target policy; the target
      // pair reuses the row's own action latent.
      cb.in_next.bottomRows(extra.count()) << extra.zs_next, extra.za;
      cb.rewards.tail(extra.count()) = extra.rewards;
      cb.done.tail(extra.count()) = extra.done;
    }
  }

  metrics.critic_loss = critic_update(agent, cb, &metrics.q_mean);
  ++agent.step_count;
  if (agent.step_count % cfg.policy_update_freq == 0) {
    PolicyUpdateResult res = policy_update(agent, raw, cfg.lambda1, cfg.lambda2, rng);
    metrics.policy_loss = res.loss;
    metrics.alpha = res.alpha;
    metrics.q_mean = res.q_mean;
    soft_update_targets(agent);
  }
  return metrics;
}

}  // namespace tsrl::agent
