#pragma once

#include <tsrl/data.hpp>
#include <tsrl/envs.hpp>
#include <tsrl/nn.hpp>
#include <tsrl/tdm.hpp>

#include <filesystem>
#include <random>
#include <string>

namespace test_support {

using tsrl::Matd;
using tsrl::RowVecd;
using tsrl::Vecd;

inline std::filesystem::path temp_dir(const std::string& tag) {
  auto dir = std::filesystem::temp_directory_path() /
             ("tsrl_test_" + tag + "_" + std::to_string(::getpid()));
  std::filesystem::create_directories(dir);
  return dir;
}

/// Single affine layer with the given weight/bias, usable as a stub net.
template <class S>
tsrl::nn::Mlp<S> affine(const tsrl::Mat<S>& W, const tsrl::RowVec<S>& b) {
  tsrl::nn::Mlp<S> m;
  m.layers.push_back({W, b});
  return m;
}

template <class S>
tsrl::nn::Mlp<S> constant_net(Eigen::Index in, const tsrl::RowVec<S>& value) {
  return affine<S>(tsrl::Mat<S>::Zero(value.cols(), in), value);
}

/// TDM whose every piece is an injectable affine map. Dims: d_z = d_s,
/// d_w = d_a; encoder is identity unless replaced.
template <class S>
tsrl::tdm::TdmModel<S> stub_model(Eigen::Index d_s, Eigen::Index d_a) {
  tsrl::tdm::TdmModel<S> m;
  m.state_dim = d_s;
  m.action_dim = d_a;
  m.latent_state_dim = d_s;
  m.latent_action_dim = d_a;
  m.cfg.latent_state_dim = d_s;
  m.cfg.latent_action_dim = d_a;
  m.stats.mean = Vecd::Zero(d_s);
  m.stats.std = Vecd::Ones(d_s);
  const Eigen::Index dza = d_s + d_a;
  m.encoder = affine<S>(tsrl::Mat<S>::Identity(dza, dza), tsrl::RowVec<S>::Zero(dza));
  // psi_s ignores the indicator column by default: [I | 0]
  tsrl::Mat<S> Wd = tsrl::Mat<S>::Zero(d_s, d_s + 1);
  Wd.leftCols(d_s) = tsrl::Mat<S>::Identity(d_s, d_s);
  m.dec_state = affine<S>(Wd, tsrl::RowVec<S>::Zero(d_s));
  m.dec_action = affine<S>(tsrl::Mat<S>::Identity(d_a, d_a), tsrl::RowVec<S>::Zero(d_a));
  m.fwd_dyn = affine<S>(tsrl::Mat<S>::Zero(d_s, dza), tsrl::RowVec<S>::Zero(d_s));
  m.rvs_dyn = affine<S>(tsrl::Mat<S>::Zero(d_s, dza), tsrl::RowVec<S>::Zero(d_s));
  return m;
}

/// The analytically consistent TDM for the linear_reversible system:
/// identity encoder/decoders, f = [A_d B_d], g derived from the inverse
/// step map. Every loss term of the full objective vanishes on data from
/// the same system.
inline tsrl::tdm::TdmModel<double> exact_linear_model(const tsrl::envs::OracleEnv& env) {
  auto m = stub_model<double>(env.state_dim, env.action_dim);
  const Eigen::Index d_s = env.state_dim, d_a = env.action_dim;
  Matd Wf(d_s, d_s + d_a);
  Wf << env.A_d, env.B_d;
  m.fwd_dyn = affine<double>(Wf, RowVecd::Zero(d_s));
  const Matd inv = env.step_mat_inv;
  Matd Wg(d_s, d_s + d_a);
  Wg << (inv - Matd::Identity(d_s, d_s)), (-inv * env.B_d);
  m.rvs_dyn = affine<double>(Wg, RowVecd::Zero(d_s));
  return m;
}

/// Deterministic batch of normalized-ish random inputs.
inline Matd random_matrix(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed,
                          double scale = 1.0) {
  tsrl::Rng rng(seed);
  return scale * rng.gaussian<double>(rows, cols);
}

}  // namespace test_support
