#pragma once

#include <tsrl/agent.hpp>
#include <tsrl/common.hpp>
#include <tsrl/tdm.hpp>

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <string>

namespace tsrl::io {

constexpr int kCheckpointVersion = 1;

using nlohmann::json;

template <class S>
json matrix_to_json(const Mat<S>& m) {
  json j;
  j["rows"] = m.rows();
  j["cols"] = m.cols();
  json data = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) data.push_back(static_cast<double>(m(r, c)));
  j["data"] = std::move(data);
  return j;
}

template <class S>
Mat<S> matrix_from_json(const json& j) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const auto& data = j.at("data");
  if (static_cast<Eigen::Index>(data.size()) != rows * cols)
    throw FormatError("checkpoint: matrix payload size mismatch");
  Mat<S> m(rows, cols);
  std::size_t k = 0;
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = static_cast<S>(data[k++].get<double>());
  return m;
}

template <class S>
json mlp_to_json(const nn::Mlp<S>& m) {
  json layers = json::array();
  for (const auto& l : m.layers) {
    json lj;
    lj["W"] = matrix_to_json<S>(l.W);
    lj["b"] = matrix_to_json<S>(Mat<S>(l.b));
    layers.push_back(std::move(lj));
  }
  return layers;
}

template <class S>
nn::Mlp<S> mlp_from_json(const json& j) {
  nn::Mlp<S> m;
  for (const auto& lj : j) {
    nn::Linear<S> l;
    l.W = matrix_from_json<S>(lj.at("W"));
    l.b = matrix_from_json<S>(lj.at("b")).row(0);
    m.layers.push_back(std::move(l));
  }
  return m;
}

inline json stats_to_json(const data::NormalizationStats& st) {
  json j;
  j["mean"] = matrix_to_json<double>(Matd(st.mean));
  j["std"] = matrix_to_json<double>(Matd(st.std));
  j["hash"] = st.hash();
  return j;
}

inline data::NormalizationStats stats_from_json(const json& j) {
  data::NormalizationStats st;
  st.mean = matrix_from_json<double>(j.at("mean")).col(0);
  st.std = matrix_from_json<double>(j.at("std")).col(0);
  return st;
}

inline json tdm_config_to_json(const tdm::TdmConfig& c) {
  json j;
  j["latent_state_dim"] = c.latent_state_dim;
  j["latent_action_dim"] = c.latent_action_dim;
  j["encoder_hidden"] = c.encoder_hidden;
  j["dynamics_hidden"] = c.dynamics_hidden;
  j["decoder_hidden"] = c.decoder_hidden;
  j["learning_rate"] = c.learning_rate;
  j["w_rec"] = c.w_rec;
  j["w_ds"] = c.w_ds;
  j["w_fwd"] = c.w_fwd;
  j["w_rvs"] = c.w_rvs;
  j["w_tsym"] = c.w_tsym;
  j["l1_scale"] = c.l1_scale;
  j["training_epochs"] = c.training_epochs;
  j["pretrain_epochs"] = c.pretrain_epochs;
  j["batch_size"] = c.batch_size;
  j["enhanced_tsym"] = c.enhanced_tsym;
  j["variant"] = tdm::variant_name(c.variant);
  return j;
}

inline tdm::TdmConfig tdm_config_from_json(const json& j) {
  tdm::TdmConfig c;
  c.latent_state_dim = j.at("latent_state_dim").get<Eigen::Index>();
  c.latent_action_dim = j.at("latent_action_dim").get<Eigen::Index>();
  c.encoder_hidden = j.at("encoder_hidden").get<std::vector<Eigen::Index>>();
  c.dynamics_hidden = j.at("dynamics_hidden").get<std::vector<Eigen::Index>>();
  c.decoder_hidden = j.at("decoder_hidden").get<std::vector<Eigen::Index>>();
  c.learning_rate = j.at("learning_rate").get<double>();
  c.w_rec = j.at("w_rec").get<double>();
  c.w_ds = j.at("w_ds").get<double>();
  c.w_fwd = j.at("w_fwd").get<double>();
  c.w_rvs = j.at("w_rvs").get<double>();
  c.w_tsym = j.at("w_tsym").get<double>();
  c.l1_scale = j.at("l1_scale").get<double>();
  c.training_epochs = j.at("training_epochs").get<Eigen::Index>();
  c.pretrain_epochs = j.at("pretrain_epochs").get<Eigen::Index>();
  c.batch_size = j.at("batch_size").get<Eigen::Index>();
  c.enhanced_tsym = j.at("enhanced_tsym").get<bool>();
  c.variant = tdm::variant_from_string(j.at("variant").get<std::string>());
  return c;
}

template <class S>
constexpr const char* scalar_tag() {
  if constexpr (std::is_same_v<S, double>)
    return "f64";
  else
    return "f32";
}

template <class S>
json tdm_to_json(const tdm::TdmModel<S>& m) {
  json j;
  j["format_version"] = kCheckpointVersion;
  j["kind"] = "tdm";
  j["scalar"] = scalar_tag<S>();
  j["state_dim"] = m.state_dim;
  j["action_dim"] = m.action_dim;
  j["latent_state_dim"] = m.latent_state_dim;
  j["latent_action_dim"] = m.latent_action_dim;
  j["variant"] = tdm::variant_name(m.cfg.variant);
  j["config"] = tdm_config_to_json(m.cfg);
  j["normalization"] = stats_to_json(m.stats);
  j["params"]["encoder"] = mlp_to_json(m.encoder);
  j["params"]["dec_state"] = mlp_to_json(m.dec_state);
  j["params"]["dec_action"] = mlp_to_json(m.dec_action);
  j["params"]["fwd_dyn"] = mlp_to_json(m.fwd_dyn);
  j["params"]["rvs_dyn"] = mlp_to_json(m.rvs_dyn);
  return j;
}

template <class S>
tdm::TdmModel<S> tdm_from_json(const json& j) {
  if (j.value("kind", "") != "tdm") throw FormatError("checkpoint: not a TDM checkpoint");
  if (j.at("format_version").get<int>() != kCheckpointVersion)
    throw FormatError("checkpoint: unsupported format version");
  tdm::TdmModel<S> m;
  m.cfg = tdm_config_from_json(j.at("config"));
  m.state_dim = j.at("state_dim").get<Eigen::Index>();
  m.action_dim = j.at("action_dim").get<Eigen::Index>();
  m.latent_state_dim = j.at("latent_state_dim").get<Eigen::Index>();
  m.latent_action_dim = j.at("latent_action_dim").get<Eigen::Index>();
  m.stats = stats_from_json(j.at("normalization"));
  m.encoder = mlp_from_json<S>(j.at("params").at("encoder"));
  m.dec_state = mlp_from_json<S>(j.at("params").at("dec_state"));
  m.dec_action = mlp_from_json<S>(j.at("params").at("dec_action"));
  m.fwd_dyn = mlp_from_json<S>(j.at("params").at("fwd_dyn"));
  m.rvs_dyn = mlp_from_json<S>(j.at("params").at("rvs_dyn"));
  return m;
}

inline json load_json_file(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ArgumentError("cannot open " + path.string());
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw FormatError("bad JSON in " + path.string() + ": " + e.what());
  }
  return j;
}

inline void save_json_file(const json& j, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw ArgumentError("cannot write " + path.string());
  f << j.dump(2) << "\n";
}

template <class S>
void save_tdm(const tdm::TdmModel<S>& m, const std::filesystem::path& path) {
  save_json_file(tdm_to_json(m), path);
}

template <class S>
tdm::TdmModel<S> load_tdm(const std::filesystem::path& path) {
  return tdm_from_json<S>(load_json_file(path));
}

inline json tsrl_config_to_json(const agent::TsrlConfig& c) {
  json j;
  j["actor_lr"] = c.actor_lr;
  j["critic_lr"] = c.critic_lr;
  j["gamma"] = c.gamma;
  j["rho"] = c.rho;
  j["policy_noise"] = c.policy_noise;
  j["noise_clip"] = c.noise_clip;
  j["policy_update_freq"] = c.policy_update_freq;
  j["iterations"] = c.iterations;
  j["alpha0"] = c.alpha0;
  j["lambda1"] = c.lambda1;
  j["lambda2"] = c.lambda2;
  j["dropout_rate"] = c.dropout_rate;
  j["no_r"] = c.no_r;
  j["no_p"] = c.no_p;
  j["no_a"] = c.no_a;
  j["batch_size"] = c.batch_size;
  j["k"] = c.k;
  j["policy_hidden"] = c.policy_hidden;
  j["critic_hidden"] = c.critic_hidden;
  return j;
}

inline agent::TsrlConfig tsrl_config_from_json(const json& j) {
  agent::TsrlConfig c;
  c.actor_lr = j.at("actor_lr").get<double>();
  c.critic_lr = j.at("critic_lr").get<double>();
  c.gamma = j.at("gamma").get<double>();
  c.rho = j.at("rho").get<double>();
  c.policy_noise = j.at("policy_noise").get<double>();
  c.noise_clip = j.at("noise_clip").get<double>();
  c.policy_update_freq = j.at("policy_update_freq").get<int>();
  c.iterations = j.at("iterations").get<std::int64_t>();
  c.alpha0 = j.at("alpha0").get<double>();
  c.lambda1 = j.at("lambda1").get<double>();
  c.lambda2 = j.at("lambda2").get<double>();
  c.dropout_rate = j.at("dropout_rate").get<double>();
  c.no_r = j.at("no_r").get<bool>();
  c.no_p = j.at("no_p").get<bool>();
  c.no_a = j.at("no_a").get<bool>();
  c.batch_size = j.at("batch_size").get<Eigen::Index>();
  c.k = j.at("k").get<int>();
  c.policy_hidden = j.at("policy_hidden").get<std::vector<Eigen::Index>>();
  c.critic_hidden = j.at("critic_hidden").get<std::vector<Eigen::Index>>();
  return c;
}

template <class S>
json adam_to_json(const nn::Adam<S>& opt) {
  const auto st = opt.export_state();
  json j;
  j["t"] = st.t;
  json mw = json::array(), vw = json::array(), mb = json::array(), vb = json::array();
  for (const auto& m : st.mw) mw.push_back(matrix_to_json<S>(m));
  for (const auto& m : st.vw) vw.push_back(matrix_to_json<S>(m));
  for (const auto& m : st.mb) mb.push_back(matrix_to_json<S>(Mat<S>(m)));
  for (const auto& m : st.vb) vb.push_back(matrix_to_json<S>(Mat<S>(m)));
  j["mw"] = std::move(mw);
  j["vw"] = std::move(vw);
  j["mb"] = std::move(mb);
  j["vb"] = std::move(vb);
  return j;
}

template <class S>
void adam_from_json(nn::Adam<S>& opt, const json& j) {
  typename nn::Adam<S>::State st;
  st.t = j.at("t").get<std::int64_t>();
  for (const auto& m : j.at("mw")) st.mw.push_back(matrix_from_json<S>(m));
  for (const auto& m : j.at("vw")) st.vw.push_back(matrix_from_json<S>(m));
  for (const auto& m : j.at("mb")) st.mb.push_back(RowVec<S>(matrix_from_json<S>(m).row(0)));
  for (const auto& m : j.at("vb")) st.vb.push_back(RowVec<S>(matrix_from_json<S>(m).row(0)));
  opt.import_state(st);
}

/// Full agent checkpoint: embeds the frozen TDM, all network parameters and
/// optimizer state so training can resume.
template <class S>
json agent_to_json(const agent::TsrlAgent<S>& a, const std::string& env_recipe = {}) {
  json j;
  j["format_version"] = kCheckpointVersion;
  j["kind"] = "tsrl";
  j["scalar"] = scalar_tag<S>();
  j["config"] = tsrl_config_to_json(a.cfg);
  j["action_bound"] = matrix_to_json<S>(Mat<S>(a.action_bound));
  j["step_count"] = a.step_count;
  j["env_recipe"] = env_recipe;
  j["tdm"] = tdm_to_json(a.tdm_model);
  j["params"]["policy"] = mlp_to_json(a.policy);
  j["params"]["policy_target"] = mlp_to_json(a.policy_target);
  j["params"]["q1"] = mlp_to_json(a.q1);
  j["params"]["q2"] = mlp_to_json(a.q2);
  j["params"]["q1_target"] = mlp_to_json(a.q1_target);
  j["params"]["q2_target"] = mlp_to_json(a.q2_target);
  j["optimizer"]["policy"] = adam_to_json(a.opt_policy);
  j["optimizer"]["q1"] = adam_to_json(a.opt_q1);
  j["optimizer"]["q2"] = adam_to_json(a.opt_q2);
  return j;
}

template <class S>
agent::TsrlAgent<S> agent_from_json(const json& j, std::string* env_recipe = nullptr) {
  if (j.value("kind", "") != "tsrl") throw FormatError("checkpoint: not a TSRL checkpoint");
  if (j.at("format_version").get<int>() != kCheckpointVersion)
    throw FormatError("checkpoint: unsupported format version");
  agent::TsrlAgent<S> a;
  a.cfg = tsrl_config_from_json(j.at("config"));
  a.tdm_model = tdm_from_json<S>(j.at("tdm"));
  a.action_bound = matrix_from_json<S>(j.at("action_bound")).row(0);
  a.step_count = j.at("step_count").get<std::int64_t>();
  if (env_recipe) *env_recipe = j.value("env_recipe", "");
  a.policy = mlp_from_json<S>(j.at("params").at("policy"));
  a.policy_target = mlp_from_json<S>(j.at("params").at("policy_target"));
  a.q1 = mlp_from_json<S>(j.at("params").at("q1"));
  a.q2 = mlp_from_json<S>(j.at("params").at("q2"));
  a.q1_target = mlp_from_json<S>(j.at("params").at("q1_target"));
  a.q2_target = mlp_from_json<S>(j.at("params").at("q2_target"));
  a.opt_policy = nn::Adam<S>(a.policy, a.cfg.actor_lr);
  a.opt_q1 = nn::Adam<S>(a.q1, a.cfg.critic_lr);
  a.opt_q2 = nn::Adam<S>(a.q2, a.cfg.critic_lr);
  adam_from_json(a.opt_policy, j.at("optimizer").at("policy"));
  adam_from_json(a.opt_q1, j.at("optimizer").at("q1"));
  adam_from_json(a.opt_q2, j.at("optimizer").at("q2"));
  return a;
}

template <class S>
void save_agent(const agent::TsrlAgent<S>& a, const std::filesystem::path& path,
                const std::string& env_recipe = {}) {
  save_json_file(agent_to_json(a, env_recipe), path);
}

template <class S>
agent::TsrlAgent<S> load_agent(const std::filesystem::path& path,
                               std::string* env_recipe = nullptr) {
  return agent_from_json<S>(load_json_file(path), env_recipe);
}

}  // namespace tsrl::io
