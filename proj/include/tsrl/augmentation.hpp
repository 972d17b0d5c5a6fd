#pragma once

#include <tsrl/common.hpp>
#include <tsrl/data.hpp>
#include <tsrl/rng.hpp>
#include <tsrl/tdm.hpp>

#include <algorithm>
#include <vector>

namespace tsrl::aug {

/// Latent-space augmentation rule: quantile threshold h over training-set
/// T-symmetry scores, Gaussian perturbation scale, and the per-dimension
/// latent-state std it is multiplied with.
struct AugmentationRule {
  double threshold = 0.0;  // h
  double tau = 0.5;
  double noise_scale = 0.01;
  Vecd sigma_zs;
  int k = 1;
};

/// Linear-interpolation empirical quantile of `scores` at probability tau.
inline double compute_threshold(const Vecd& scores, double tau) {
  if (scores.size() == 0) throw ArgumentError("compute_threshold: empty scores");
  if (!(tau > 0.0 && tau < 1.0)) throw ArgumentError("compute_threshold: tau must be in (0,1)");
  std::vector<double> sorted(scores.data(), scores.data() + scores.size());
  std::sort(sorted.begin(), sorted.end());
  const double pos = tau * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(pos);
  if (lo + 1 >= sorted.size()) return sorted.back();
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

/// Per-dimension sample std of the latent states of a (normalized) dataset.
template <class S>
Vecd latent_state_std(const tdm::TdmModel<S>& model, const data::TransitionDataset& d) {
  constexpr Eigen::Index kChunk = 8192;
  Vecd sum = Vecd::Zero(model.latent_state_dim);
  Vecd sumsq = Vecd::Zero(model.latent_state_dim);
  for (Eigen::Index start = 0; start < d.n(); start += kChunk) {
    const Eigen::Index len = std::min<Eigen::Index>(kChunk, d.n() - start);
    auto [zs, za] = model.encode(d.states.middleRows(start, len).template cast<S>(),
                                 d.actions.middleRows(start, len).template cast<S>());
    sum += zs.template cast<double>().colwise().sum().transpose();
    sumsq += zs.template cast<double>().array().square().colwise().sum().matrix().transpose();
  }
  const double n = static_cast<double>(d.n());
  Vecd mean = sum / n;
  Vecd var = (sumsq - n * mean.cwiseProduct(mean)) / (n - 1.0);
  return var.cwiseMax(0.0).cwiseSqrt();
}

/// Threshold and sigma computed from the same model and dataset, which is
/// the precondition for every later filtering decision.
template <class S>
AugmentationRule make_rule(const tdm::TdmModel<S>& model, const data::TransitionDataset& d,
                           double tau, double noise_scale, int k) {
  if (k < 0) throw ArgumentError("make_rule: k must be >= 0");
  if (noise_scale < 0.0) throw ArgumentError("make_rule: noise_scale must be >= 0");
  AugmentationRule rule;
  rule.tau = tau;
  rule.noise_scale = noise_scale;
  rule.k = k;
  rule.threshold = compute_threshold(tdm::tsym_scores(model, d), tau);
  rule.sigma_zs = latent_state_std(model, d);
  return rule;
}

/// z_s + eps with eps ~ N(0, (noise_scale * sigma_zs_i)^2) per dimension.
template <class S>
Mat<S> perturb_latent(const Mat<S>& zs, const Vecd& sigma_zs, double noise_scale, Rng& rng) {
  if (zs.cols() != sigma_zs.size())
    throw ArgumentError("perturb_latent: sigma dimension mismatch");
  Mat<S> out = zs;
  for (Eigen::Index r = 0; r < zs.rows(); ++r)
    for (Eigen::Index c = 0; c < zs.cols(); ++c)
      out(r, c) += static_cast<S>(noise_scale * sigma_zs(c) * rng.normal());
  return out;
}

/// Augmented next latent state: (z_s + eps) + f(z_s + eps, z_a).
template <class S>
Mat<S> propagate_next(const tdm::TdmModel<S>& model, const Mat<S>& zs_pert, const Mat<S>& za) {
  Mat<S> zin(zs_pert.rows(), zs_pert.cols() + za.cols());
  zin << zs_pert, za;
  return zs_pert + model.fwd_dyn.forward(zin);
}

template <class S>
struct LatentBatch {
  Mat<S> zs, za, zs_next;
  Vec<S> rewards;
  Vec<S> done;
};

template <class S>
struct AugmentedRows {
  Mat<S> zs, za, zs_next;
  Vec<S> rewards;
  Vec<S> done;
  Eigen::Index attempted = 0;

  Eigen::Index count() const { return zs.rows(); }
  double kept_fraction() const {
    return attempted == 0 ? 0.0 : static_cast<double>(count()) / static_cast<double>(attempted);
  }
};

/// Draws k perturbations per input row and keeps exactly those whose
/// perturbed T-symmetry score is <= rule.threshold. Rewards and done flags
/// are copied from the source transitions.
template <class S>
AugmentedRows<S> augment_batch(const tdm::TdmModel<S>& model, const LatentBatch<S>& batch,
                               const AugmentationRule& rule, Rng& rng) {
  const Eigen::Index B = batch.zs.rows();
  AugmentedRows<S> out;
  out.attempted = B * rule.k;
  std::vector<Eigen::Index> kept_src;
  Mat<S> kept_zs(out.attempted, batch.zs.cols());
  Eigen::Index kept = 0;
  for (int rep = 0; rep < rule.k; ++rep) {
    Mat<S> zp = perturb_latent(batch.zs, rule.sigma_zs, rule.noise_scale, rng);
    Vec<S> scores = model.tsym_residual_latent(zp, batch.za);
    for (Eigen::Index i = 0; i < B; ++i) {
      if (static_cast<double>(scores(i)) <= rule.threshold) {
        kept_zs.row(kept++) = zp.row(i);
        kept_src.push_back(i);
      }
    }
  }
  const auto m = kept;
  out.zs = kept_zs.topRows(m);
  out.za.resize(m, batch.za.cols());
  out.rewards.resize(m);
  out.done.resize(m);
  for (Eigen::Index j = 0; j < m; ++j) {
    const Eigen::Index src = kept_src[static_cast<std::size_t>(j)];
    out.za.row(j) = batch.za.row(src);
    out.rewards(j) = batch.rewards(src);
    out.done(j) = batch.done(src);
  }
  out.zs_next = m > 0 ? propagate_next(model, out.zs, out.za) : Mat<S>(0, batch.zs.cols());
  return out;
}

}  // namespace tsrl::aug
