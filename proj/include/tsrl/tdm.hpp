#pragma once

#include <tsrl/common.hpp>
#include <tsrl/data.hpp>
#include <tsrl/nn.hpp>
#include <tsrl/rng.hpp>
#include <tsrl/tape.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

namespace tsrl::tdm {

enum class Variant { tdm, tdm_no_ode, ae_fwd_rep, ae_rep };

inline std::string variant_name(Variant v) {
  switch (v) {
    case Variant::tdm: return "tdm";
    case Variant::tdm_no_ode: return "tdm_no_ode";
    case Variant::ae_fwd_rep: return "ae_fwd_rep";
    case Variant::ae_rep: return "ae_rep";
  }
  throw std::logic_error("unreachable");
}

inline Variant variant_from_string(const std::string& s) {
  if (s == "tdm") return Variant::tdm;
  if (s == "tdm_no_ode") return Variant::tdm_no_ode;
  if (s == "ae_fwd_rep") return Variant::ae_fwd_rep;
  if (s == "ae_rep") return Variant::ae_rep;
  throw ArgumentError("unknown tdm variant: " + s);
}

struct TdmConfig {
  Eigen::Index latent_state_dim = 0;   // 0 resolves to the raw state dim
  Eigen::Index latent_action_dim = 0;  // 0 resolves to the raw action dim
  std::vector<Eigen::Index> encoder_hidden = {512, 256, 128};
  std::vector<Eigen::Index> dynamics_hidden = {512, 512, 512};
  std::vector<Eigen::Index> decoder_hidden;  // empty -> reversed encoder_hidden
  double learning_rate = 3e-4;
  double w_rec = 1.0, w_ds = 1.0, w_fwd = 0.1, w_rvs = 0.1, w_tsym = 1.0;
  double l1_scale = 1e-5;
  Eigen::Index training_epochs = 2000;  // total, the first pretrain_epochs are rec-only
  Eigen::Index pretrain_epochs = 200;
  Eigen::Index batch_size = 256;
  bool enhanced_tsym = false;
  Variant variant = Variant::tdm;

  void validate() const {
    if (training_epochs < 1 || pretrain_epochs < 0)
      throw ArgumentError("tdm config: epochs must be positive");
    if (batch_size < 1) throw ArgumentError("tdm config: batch_size must be positive");
    if (learning_rate <= 0.0) throw ArgumentError("tdm config: learning_rate must be > 0");
    for (double w : {w_rec, w_ds, w_fwd, w_rvs, w_tsym, l1_scale})
      if (w < 0.0) throw ArgumentError("tdm config: loss weights must be non-negative");
    for (auto h : encoder_hidden)
      if (h < 1) throw ArgumentError("tdm config: encoder_hidden must be positive");
    for (auto h : dynamics_hidden)
      if (h < 1) throw ArgumentError("tdm config: dynamics_hidden must be positive");
  }

  std::vector<Eigen::Index> resolved_decoder_hidden() const {
    if (!decoder_hidden.empty()) return decoder_hidden;
    return {encoder_hidden.rbegin(), encoder_hidden.rend()};
  }
};

/// Encoder phi(s,a) -> (z_s, z_a), decoders psi_s(z, delta) / psi_a(z_a),
/// and the latent forward/reverse dynamics f, g. States are expected in the
/// normalized space described by `stats`.
template <class S>
struct TdmModel {
  TdmConfig cfg;
  Eigen::Index state_dim = 0, action_dim = 0;
  Eigen::Index latent_state_dim = 0, latent_action_dim = 0;
  data::NormalizationStats stats;

  nn::Mlp<S> encoder;     // (d_s + d_a) -> (d_z + d_w)
  nn::Mlp<S> dec_state;   // (d_z + 1)   -> d_s, the extra input is the delta indicator
  nn::Mlp<S> dec_action;  // d_w -> d_a
  nn::Mlp<S> fwd_dyn;     // (d_z + d_w) -> d_z
  nn::Mlp<S> rvs_dyn;     // (d_z + d_w) -> d_z

  std::pair<Mat<S>, Mat<S>> encode(const Mat<S>& states, const Mat<S>& actions) const {
    if (states.cols() != state_dim || actions.cols() != action_dim ||
        states.rows() != actions.rows())
      throw ArgumentError("encode: input dims do not match the model");
    Mat<S> x(states.rows(), state_dim + action_dim);
    x << states, actions;
    Mat<S> z = encoder.forward(x);
    return {z.leftCols(latent_state_dim), z.rightCols(latent_action_dim)};
  }

  /// Per-row T-symmetry consistency || f(z) + g(z_s + f(z), z_a) ||^2.
  Vec<S> tsym_residual_latent(const Mat<S>& zs, const Mat<S>& za) const {
    Mat<S> zin(zs.rows(), zs.cols() + za.cols());
    zin << zs, za;
    Mat<S> f = fwd_dyn.forward(zin);
    Mat<S> gin(zs.rows(), zs.cols() + za.cols());
    gin << (zs + f), za;
    Mat<S> g = rvs_dyn.forward(gin);
    return (f + g).rowwise().squaredNorm();
  }

  std::uint64_t param_hash() const {
    std::uint64_t h = encoder.param_hash();
    h = dec_state.param_hash(h);
    h = dec_action.param_hash(h);
    h = fwd_dyn.param_hash(h);
    h = rvs_dyn.param_hash(h);
    return h;
  }
};

template <class S>
TdmModel<S> make_model(const TdmConfig& cfg, Eigen::Index state_dim, Eigen::Index action_dim,
                       const data::NormalizationStats& stats, std::uint64_t seed) {
  cfg.validate();
  TdmModel<S> m;
  m.cfg = cfg;
  m.state_dim = state_dim;
  m.action_dim = action_dim;
  m.latent_state_dim = cfg.latent_state_dim > 0 ? cfg.latent_state_dim : state_dim;
  m.latent_action_dim = cfg.latent_action_dim > 0 ? cfg.latent_action_dim : action_dim;
  m.cfg.latent_state_dim = m.latent_state_dim;
  m.cfg.latent_action_dim = m.latent_action_dim;
  m.stats = stats;
  Rng rng = Rng::derive(seed, "tdm-init");
  const auto dec_hidden = cfg.resolved_decoder_hidden();
  m.encoder = nn::Mlp<S>::init(state_dim + action_dim, cfg.encoder_hidden,
                               m.latent_state_dim + m.latent_action_dim, rng);
  m.dec_state = nn::Mlp<S>::init(m.latent_state_dim + 1, dec_hidden, state_dim, rng);
  m.dec_action = nn::Mlp<S>::init(m.latent_action_dim, dec_hidden, action_dim, rng);
  m.fwd_dyn = nn::Mlp<S>::init(m.latent_state_dim + m.latent_action_dim, cfg.dynamics_hidden,
                               m.latent_state_dim, rng);
  m.rvs_dyn = nn::Mlp<S>::init(m.latent_state_dim + m.latent_action_dim, cfg.dynamics_hidden,
                               m.latent_state_dim, rng);
  return m;
}

/// Which loss terms a training phase / variant optimizes.
struct LossSelect {
  bool rec = false, ds = false, fwd = false, rvs = false, tsym = false, l1 = false;
  bool ode_form = true;  // false: f and g regress the latent differences directly
  bool enhanced = false;
  bool unit_weights = false;  // ae_fwd_rep is defined with plain unit weights

  static LossSelect pretrain() {
    LossSelect s;
    s.rec = true;
    return s;
  }

  static LossSelect for_variant(Variant v, bool enhanced) {
    LossSelect s;
    switch (v) {
      case Variant::tdm:
        s = {true, true, true, true, true, true, true, enhanced, false};
        break;
      case Variant::tdm_no_ode:
        s = {true, true, true, true, true, true, false, enhanced, false};
        break;
      case Variant::ae_fwd_rep:
        s = {true, true, true, false, false, false, false, false, true};
        break;
      case Variant::ae_rep:
        s = LossSelect::pretrain();
        break;
    }
    return s;
  }
};

template <class S>
struct TdmParamVars {
  nn::MlpVars<S> encoder, dec_state, dec_action, fwd_dyn, rvs_dyn;
};

/// Nets that receive updates under a given selection.
struct TrainedNets {
  bool encoder = false, decoders = false, fwd = false, rvs = false;
};

inline TrainedNets trained_nets(const LossSelect& sel) {
  TrainedNets tn;
  tn.encoder = true;
  tn.decoders = sel.rec || sel.ds;
  tn.fwd = sel.fwd || sel.tsym || sel.ds;
  tn.rvs = sel.rvs || sel.tsym;
  return tn;
}

template <class S>
TdmParamVars<S> register_model(ad::Tape<S>& t, const TdmModel<S>& m, const TrainedNets& tn) {
  TdmParamVars<S> pv;
  pv.encoder = nn::register_mlp(t, m.encoder, tn.encoder);
  pv.dec_state = nn::register_mlp(t, m.dec_state, tn.decoders);
  pv.dec_action = nn::register_mlp(t, m.dec_action, tn.decoders);
  pv.fwd_dyn = nn::register_mlp(t, m.fwd_dyn, tn.fwd);
  pv.rvs_dyn = nn::register_mlp(t, m.rvs_dyn, tn.rvs);
  return pv;
}

template <class S>
struct TdmTermVars {
  ad::Var rec, ds, fwd, rvs, tsym, l1, total;
};

/// Builds the selected loss terms on the tape. Every term is mean-reduced
/// over the batch. The ODE-form fwd/rvs terms regress the latent dynamics
/// onto the directional derivative of the encoder along sdot (resp. -sdot),
/// carried by the tangent path so that backward() sees the full
/// second-order dependence on the encoder parameters.
template <class S>
TdmTermVars<S> build_losses(ad::Tape<S>& t, const TdmModel<S>& model,
                            const TdmParamVars<S>& pv, const Mat<S>& s, const Mat<S>& a,
                            const Mat<S>& s_next, const LossSelect& sel) {
  using ad::Var;
  const Eigen::Index B = s.rows();
  const Eigen::Index dz = model.latent_state_dim;
  const Eigen::Index dw = model.latent_action_dim;

  Mat<S> x1m(B, s.cols() + a.cols());
  x1m << s, a;
  Var x1 = t.constant(x1m);
  Mat<S> sdot_m = s_next - s;

  const bool need_jvp1 = sel.ode_form && sel.fwd;
  const bool need_enc2 = sel.rvs || sel.enhanced || (sel.fwd && !sel.ode_form);

  Var z1, j1;
  if (need_jvp1) {
    Mat<S> u1m = Mat<S>::Zero(B, s.cols() + a.cols());
    u1m.leftCols(s.cols()) = sdot_m;
    auto [z, j] = nn::apply_with_jvp(t, pv.encoder, x1, t.constant(u1m));
    z1 = z;
    j1 = j;
  } else {
    z1 = nn::apply(t, pv.encoder, x1);
  }
  Var zs = t.slice_cols(z1, 0, dz);
  Var za = t.slice_cols(z1, dz, dw);

  Var z2, zs2, za2, j2;
  if (need_enc2 || (sel.rvs && sel.ode_form)) {
    Mat<S> x2m(B, s.cols() + a.cols());
    x2m << s_next, a;
    Var x2 = t.constant(x2m);
    if (sel.rvs && sel.ode_form) {
      Mat<S> u2m = Mat<S>::Zero(B, s.cols() + a.cols());
      u2m.leftCols(s.cols()) = -sdot_m;
      auto [z, j] = nn::apply_with_jvp(t, pv.encoder, x2, t.constant(u2m));
      z2 = z;
      j2 = j;
    } else {
      z2 = nn::apply(t, pv.encoder, x2);
    }
    zs2 = t.slice_cols(z2, 0, dz);
    za2 = t.slice_cols(z2, dz, dw);
  }

  TdmTermVars<S> terms;
  auto msq = [&](Var diff) { return t.mean_all(t.rowwise_sqnorm(diff)); };

  if (sel.rec) {
    Var dec_in = t.concat_cols(zs, t.constant(Mat<S>::Zero(B, 1)));
    Var s_hat = nn::apply(t, pv.dec_state, dec_in);
    Var a_hat = nn::apply(t, pv.dec_action, za);
    terms.rec = t.add(msq(t.sub(t.constant(s), s_hat)), msq(t.sub(t.constant(a), a_hat)));
  }

  Var f_out;
  if (sel.ds || sel.fwd || sel.tsym) f_out = nn::apply(t, pv.fwd_dyn, t.concat_cols(zs, za));

  if (sel.ds) {
    Var dec_in = t.concat_cols(f_out, t.constant(Mat<S>::Ones(B, 1)));
    Var ds_hat = nn::apply(t, pv.dec_state, dec_in);
    terms.ds = msq(t.sub(t.constant(sdot_m), ds_hat));
  }

  if (sel.fwd) {
    Var target = sel.ode_form ? t.slice_cols(j1, 0, dz) : t.sub(zs2, zs);
    terms.fwd = msq(t.sub(target, f_out));
  }

  if (sel.rvs) {
    Var g_out = nn::apply(t, pv.rvs_dyn, t.concat_cols(zs2, za2));
    Var target = sel.ode_form ? t.slice_cols(j2, 0, dz) : t.sub(zs, zs2);
    terms.rvs = msq(t.sub(target, g_out));
  }

  if (sel.tsym) {
    Var g_at_prop = nn::apply(t, pv.rvs_dyn, t.concat_cols(t.add(zs, f_out), za));
    terms.tsym = msq(t.add(f_out, g_at_prop));
    if (sel.enhanced) {
      Var g_at_enc = nn::apply(t, pv.rvs_dyn, t.concat_cols(zs2, za));
      terms.tsym = t.add(terms.tsym, msq(t.add(f_out, g_at_enc)));
    }
  }

  if (sel.l1)
    terms.l1 = t.add(nn::l1_penalty(t, pv.fwd_dyn), nn::l1_penalty(t, pv.rvs_dyn));

  const double w_rec = sel.unit_weights ? 1.0 : model.cfg.w_rec;
  const double w_ds = sel.unit_weights ? 1.0 : model.cfg.w_ds;
  const double w_fwd = sel.unit_weights ? 1.0 : model.cfg.w_fwd;
  const double w_rvs = sel.unit_weights ? 1.0 : model.cfg.w_rvs;
  const double w_tsym = sel.unit_weights ? 1.0 : model.cfg.w_tsym;

  Var total;
  auto accumulate = [&](Var term, double w) {
    if (!term.valid() || w == 0.0) return;
    Var weighted = w == 1.0 ? term : t.scale(term, static_cast<S>(w));
    total = total.valid() ? t.add(total, weighted) : weighted;
  };
  accumulate(terms.rec, w_rec);
  accumulate(terms.ds, w_ds);
  accumulate(terms.fwd, w_fwd);
  accumulate(terms.rvs, w_rvs);
  accumulate(terms.tsym, w_tsym);
  accumulate(terms.l1, model.cfg.l1_scale);
  terms.total = total;
  return terms;
}

namespace detail {

template <class S>
double term_value(const ad::Tape<S>& t, ad::Var v) {
  return v.valid() ? static_cast<double>(t.val(v)(0, 0)) : 0.0;
}

template <class S>
TdmTermVars<S> eval_losses(const TdmModel<S>& model, const Mat<S>& s, const Mat<S>& a,
                           const Mat<S>& s_next, const LossSelect& sel, ad::Tape<S>& t) {
  TdmParamVars<S> pv = register_model(t, model, TrainedNets{});
  return build_losses(t, model, pv, s, a, s_next, sel);
}

}  // namespace detail

// ---- per-term loss values (forward only) ----

template <class S>
double loss_reconstruction(const TdmModel<S>& m, const Mat<S>& s, const Mat<S>& a) {
  ad::Tape<S> t;
  LossSelect sel;
  sel.rec = true;
  auto terms = detail::eval_losses(m, s, a, s, sel, t);
  return detail::term_value(t, terms.rec);
}

template <class S>
double loss_forward_ode(const TdmModel<S>& m, const Mat<S>& s, const Mat<S>& a,
                        const Mat<S>& s_next) {
  ad::Tape<S> t;
  LossSelect sel;
  sel.fwd = true;
  auto terms = detail::eval_losses(m, s, a, s_next, sel, t);
  return detail::term_value(t, terms.fwd);
}

template <class S>
double loss_ds_reconstruction(const TdmModel<S>& m, const Mat<S>& s, const Mat<S>& a,
                              const Mat<S>& s_next) {
  ad::Tape<S> t;
  LossSelect sel;
  sel.ds = true;
  auto terms = detail::eval_losses(m, s, a, s_next, sel, t);
  return detail::term_value(t, terms.ds);
}

template <class S>
double loss_reverse_ode(const TdmModel<S>& m, const Mat<S>& s, const Mat<S>& a,
                        const Mat<S>& s_next) {
  ad::Tape<S> t;
  LossSelect sel;
  sel.rvs = true;
  auto terms = detail::eval_losses(m, s, a, s_next, sel, t);
  return detail::term_value(t, terms.rvs);
}

template <class S>
double loss_tsym(const TdmModel<S>& m, const Mat<S>& zs, const Mat<S>& za) {
  return static_cast<double>(m.tsym_residual_latent(zs, za).mean());
}

template <class S>
double loss_tsym_enhanced(const TdmModel<S>& m, const Mat<S>& zs, const Mat<S>& za,
                          const Mat<S>& zs_next) {
  Mat<S> zin(zs.rows(), zs.cols() + za.cols());
  zin << zs, za;
  Mat<S> f = m.fwd_dyn.forward(zin);
  Mat<S> gin(zs.rows(), zs.cols() + za.cols());
  gin << zs_next, za;
  Mat<S> g = m.rvs_dyn.forward(gin);
  return loss_tsym(m, zs, za) + static_cast<double>((f + g).rowwise().squaredNorm().mean());
}

struct TdmLossValues {
  double rec = 0.0, ds = 0.0, fwd = 0.0, rvs = 0.0, tsym = 0.0, l1 = 0.0, total = 0.0;
};

/// All terms of the variant's objective on one batch, weighted as trained.
template <class S>
TdmLossValues loss_total(const TdmModel<S>& m, const Mat<S>& s, const Mat<S>& a,
                         const Mat<S>& s_next) {
  ad::Tape<S> t;
  const LossSelect sel = LossSelect::for_variant(m.cfg.variant, m.cfg.enhanced_tsym);
  auto terms = detail::eval_losses(m, s, a, s_next, sel, t);
  TdmLossValues v;
  v.rec = detail::term_value(t, terms.rec);
  v.ds = detail::term_value(t, terms.ds);
  v.fwd = detail::term_value(t, terms.fwd);
  v.rvs = detail::term_value(t, terms.rvs);
  v.tsym = detail::term_value(t, terms.tsym);
  v.l1 = detail::term_value(t, terms.l1);
  v.total = detail::term_value(t, terms.total);
  return v;
}

/// Per-sample T-symmetry scores of a (normalized) dataset; no gradients.
template <class S>
Vecd tsym_scores(const TdmModel<S>& m, const data::TransitionDataset& d) {
  constexpr Eigen::Index kChunk = 8192;
  Vecd out(d.n());
  for (Eigen::Index start = 0; start < d.n(); start += kChunk) {
    const Eigen::Index len = std::min<Eigen::Index>(kChunk, d.n() - start);
    Mat<S> s = d.states.middleRows(start, len).template cast<S>();
    Mat<S> a = d.actions.middleRows(start, len).template cast<S>();
    auto [zs, za] = m.encode(s, a);
    Vec<S> scores = m.tsym_residual_latent(zs, za);
    out.segment(start, len) = scores.template cast<double>();
  }
  return out;
}

struct EpochLog {
  Eigen::Index epoch = 0;
  bool pretrain = false;
  TdmLossValues losses;
};

template <class S>
struct TdmTrainResult {
  TdmModel<S> model;
  std::vector<EpochLog> history;
  double final_loss = 0.0;
};

/// Receives the partially trained model and a reason string when training
/// aborts on a non-finite loss, so the caller can persist a diagnostic
/// checkpoint before the NumericalError propagates.
template <class S>
using DiagnosticSink = std::function<void(const TdmModel<S>&, const std::string&)>;

/// Two-phase training: `pretrain_epochs` of reconstruction-only updates for
/// the encoder/decoders, then the variant's full objective with Adam at the
/// configured rate. Deterministic given (dataset, config, seed). Non-finite
/// losses abort with NumericalError after notifying `diag`.
template <class S>
TdmTrainResult<S> train_tdm(const data::TransitionDataset& normalized,
                            const data::NormalizationStats& stats, const TdmConfig& cfg,
                            std::uint64_t seed, const DiagnosticSink<S>& diag = {}) {
  cfg.validate();
  normalized.validate();
  TdmTrainResult<S> result;
  result.model = make_model<S>(cfg, normalized.state_dim(), normalized.action_dim(), stats, seed);
  TdmModel<S>& model = result.model;

  nn::Adam<S> opt_enc(model.encoder, cfg.learning_rate);
  nn::Adam<S> opt_dec_s(model.dec_state, cfg.learning_rate);
  nn::Adam<S> opt_dec_a(model.dec_action, cfg.learning_rate);
  nn::Adam<S> opt_fwd(model.fwd_dyn, cfg.learning_rate);
  nn::Adam<S> opt_rvs(model.rvs_dyn, cfg.learning_rate);

  const Mat<S> all_s = normalized.states.template cast<S>();
  const Mat<S> all_a = normalized.actions.template cast<S>();
  const Mat<S> all_sn = normalized.next_states.template cast<S>();

  Rng shuffle_rng = Rng::derive(seed, "tdm-batches");
  const LossSelect full_sel = LossSelect::for_variant(cfg.variant, cfg.enhanced_tsym);
  const LossSelect pre_sel = LossSelect::pretrain();

  for (Eigen::Index epoch = 0; epoch < cfg.training_epochs; ++epoch) {
    const bool pretrain = epoch < cfg.pretrain_epochs && cfg.variant != Variant::ae_rep;
    const LossSelect& sel = pretrain ? pre_sel : full_sel;
    const TrainedNets tn = trained_nets(sel);
    auto perm = shuffle_rng.permutation(normalized.n());

    TdmLossValues epoch_mean;
    Eigen::Index batches = 0;
    for (Eigen::Index b0 = 0; b0 < normalized.n(); b0 += cfg.batch_size) {
      const Eigen::Index len = std::min<Eigen::Index>(cfg.batch_size, normalized.n() - b0);
      Mat<S> s(len, normalized.state_dim()), a(len, normalized.action_dim()),
          sn(len, normalized.state_dim());
      for (Eigen::Index i = 0; i < len; ++i) {
        const Eigen::Index r = perm[static_cast<std::size_t>(b0 + i)];
        s.row(i) = all_s.row(r);
        a.row(i) = all_a.row(r);
        sn.row(i) = all_sn.row(r);
      }
      ad::Tape<S> t;
      TdmParamVars<S> pv = register_model(t, model, tn);
      TdmTermVars<S> terms = build_losses(t, model, pv, s, a, sn, sel);
      const double total = detail::term_value(t, terms.total);
      if (!std::isfinite(total)) {
        const std::string msg = "non-finite TDM loss at epoch " + std::to_string(epoch) +
                                ", batch " + std::to_string(batches);
        if (diag) diag(model, msg);
        throw NumericalError(msg);
      }
      t.backward(terms.total);
      if (tn.encoder) opt_enc.step(model.encoder, t, pv.encoder);
      if (tn.decoders) {
        opt_dec_s.step(model.dec_state, t, pv.dec_state);
        opt_dec_a.step(model.dec_action, t, pv.dec_action);
      }
      if (tn.fwd) opt_fwd.step(model.fwd_dyn, t, pv.fwd_dyn);
      if (tn.rvs) opt_rvs.step(model.rvs_dyn, t, pv.rvs_dyn);

      epoch_mean.rec += detail::term_value(t, terms.rec);
      epoch_mean.ds += detail::term_value(t, terms.ds);
      epoch_mean.fwd += detail::term_value(t, terms.fwd);
      epoch_mean.rvs += detail::term_value(t, terms.rvs);
      epoch_mean.tsym += detail::term_value(t, terms.tsym);
      epoch_mean.l1 += detail::term_value(t, terms.l1);
      epoch_mean.total += total;
      ++batches;
    }
    const double inv = 1.0 / static_cast<double>(batches);
    epoch_mean.rec *= inv;
    epoch_mean.ds *= inv;
    epoch_mean.fwd *= inv;
    epoch_mean.rvs *= inv;
    epoch_mean.tsym *= inv;
    epoch_mean.l1 *= inv;
    epoch_mean.total *= inv;
    result.history.push_back({epoch, pretrain, epoch_mean});
  }
  result.final_loss = result.history.back().losses.total;
  return result;
}

}  // namespace tsrl::tdm
