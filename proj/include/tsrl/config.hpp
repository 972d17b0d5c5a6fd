#pragma once

#include <tsrl/agent.hpp>
#include <tsrl/envs.hpp>
#include <tsrl/tdm.hpp>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace tsrl::harness {

/// Flat "key = value" text config with '#' comments and dotted keys.
/// CLI overrides are applied on top of the file before typed reads.
class KeyValues {
 public:
  static KeyValues parse_file(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw ArgumentError("cannot open config file " + path.string());
    KeyValues kv;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
      ++lineno;
      const std::string stripped = strip_comment(line);
      if (trim(stripped).empty()) continue;
      const auto eq = stripped.find('=');
      if (eq == std::string::npos)
        throw FormatError(path.string() + ":" + std::to_string(lineno) +
                          ": expected 'key = value'");
      const std::string key = trim(stripped.substr(0, eq));
      const std::string value = trim(stripped.substr(eq + 1));
      if (key.empty())
        throw FormatError(path.string() + ":" + std::to_string(lineno) + ": empty key");
      kv.values_[key] = value;
    }
    return kv;
  }

  /// "key=value" override strings from the command line.
  void apply_override(const std::string& spec) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos)
      throw ArgumentError("override must look like key=value, got: " + spec);
    values_[trim(spec.substr(0, eq))] = trim(spec.substr(eq + 1));
  }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get_string(const std::string& key, const std::string& dflt) const {
    touch(key);
    auto it = values_.find(key);
    return it == values_.end() ? dflt : it->second;
  }

  double get_double(const std::string& key, double dflt) const {
    touch(key);
    auto it = values_.find(key);
    if (it == values_.end()) return dflt;
    try {
      std::size_t pos = 0;
      const double v = std::stod(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      throw FormatError("config key '" + key + "': expected a number, got '" + it->second + "'");
    }
  }

  std::int64_t get_int(const std::string& key, std::int64_t dflt) const {
    const double v = get_double(key, static_cast<double>(dflt));
    const auto i = static_cast<std::int64_t>(v);
    if (static_cast<double>(i) != v)
      throw FormatError("config key '" + key + "': expected an integer");
    return i;
  }

  bool get_bool(const std::string& key, bool dflt) const {
    touch(key);
    auto it = values_.find(key);
    if (it == values_.end()) return dflt;
    if (it->second == "true" || it->second == "1") return true;
    if (it->second == "false" || it->second == "0") return false;
    throw FormatError("config key '" + key + "': expected true/false");
  }

  std::vector<Eigen::Index> get_index_list(const std::string& key,
                                           std::vector<Eigen::Index> dflt) const {
    touch(key);
    auto it = values_.find(key);
    if (it == values_.end()) return dflt;
    std::vector<Eigen::Index> out;
    std::stringstream ss(it->second);
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = trim(item);
      if (item.empty()) continue;
      out.push_back(static_cast<Eigen::Index>(std::stoll(item)));
    }
    return out;
  }

  /// Keys present in the file but never read by the harness are typos.
  void check_all_consumed() const {
    std::vector<std::string> unknown;
    for (const auto& [k, v] : values_)
      if (consumed_.find(k) == consumed_.end()) unknown.push_back(k);
    if (!unknown.empty()) {
      std::string msg = "unknown config keys:";
      for (const auto& k : unknown) msg += " " + k;
      throw ValidationError(msg);
    }
  }

  const std::map<std::string, std::string>& raw() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
  mutable std::set<std::string> consumed_;

  void touch(const std::string& key) const { consumed_.insert(key); }

  static std::string strip_comment(const std::string& s) {
    const auto pos = s.find('#');
    return pos == std::string::npos ? s : s.substr(0, pos);
  }

  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }
};

struct DataConfig {
  std::string source_path;  // keyed-array file or columnar dir
  std::string env;          // oracle env recipe name (exclusive with source_path)
  envs::EnvParams env_params;
  std::string behavior = "medium";
  Eigen::Index n_transitions = 5000;
  std::uint64_t collect_seed = 1;
  Eigen::Index subsample_target = 0;  // 0 = off
  int filter_dim = -1;                // < 0 = off
  double filter_fraction = 1.0;
};

struct EvalConfig {
  int episodes = 5;
  int seeds = 3;
  std::int64_t interval = 1000;
};

struct RunConfig {
  std::filesystem::path out_dir;
  std::uint64_t seed = 0;
  int precision = 64;  // 32 or 64
  bool overwrite = false;
  DataConfig data;
  tdm::TdmConfig tdm;
  agent::TsrlConfig tsrl;
  double aug_tau = 0.5;
  double aug_noise_scale = 0.01;
  int aug_k = 1;
  EvalConfig eval;
  std::int64_t log_interval = 1000;
  std::string tdm_regime;   // optional epoch preset
  std::string tsrl_regime;  // optional lambda preset
};

/// Epoch presets keyed by dataset scale.
inline void apply_tdm_regime(tdm::TdmConfig& c, const std::string& regime) {
  if (regime == "locomotion_10k") {
    c.training_epochs = 2000;
    c.pretrain_epochs = 200;
  } else if (regime == "locomotion_100k") {
    c.training_epochs = 1000;
    c.pretrain_epochs = 100;
  } else if (regime == "locomotion_full") {
    c.training_epochs = 200;
    c.pretrain_epochs = 20;
  } else if (regime == "adroit_10k") {
    c.training_epochs = 2000;
    c.pretrain_epochs = 0;
  } else if (regime == "adroit_full") {
    c.training_epochs = 200;
    c.pretrain_epochs = 0;
  } else {
    throw ArgumentError("unknown tdm regime: " + regime);
  }
}

/// Constraint-weight presets per dataset scale.
inline void apply_tsrl_regime(agent::TsrlConfig& c, const std::string& regime) {
  if (regime == "mujoco_full_a") {
    c.lambda1 = 5.0;
    c.lambda2 = 1.0;
  } else if (regime == "mujoco_full_b") {
    c.lambda1 = 10.0;
    c.lambda2 = 1.0;
  } else if (regime == "mujoco_10k_a") {
    c.lambda1 = 100.0;
    c.lambda2 = 100.0;
  } else if (regime == "mujoco_10k_b") {
    c.lambda1 = 200.0;
    c.lambda2 = 100.0;
  } else if (regime == "adroit") {
    c.lambda1 = 10000.0;
    c.lambda2 = 1.0;
  } else {
    throw ArgumentError("unknown tsrl regime: " + regime);
  }
}

inline RunConfig run_config_from_keyvalues(const KeyValues& kv) {
  RunConfig rc;
  rc.out_dir = kv.get_string("run.out_dir", "");
  rc.seed = static_cast<std::uint64_t>(kv.get_int("run.seed", 0));
  rc.precision = static_cast<int>(kv.get_int("run.precision", 64));
  if (rc.precision != 32 && rc.precision != 64)
    throw ArgumentError("run.precision must be 32 or 64");
  rc.overwrite = kv.get_bool("run.overwrite", false);

  rc.data.source_path = kv.get_string("data.source", "");
  rc.data.env = kv.get_string("data.env", "");
  for (const char* p : {"mu", "horizon", "theta1", "theta2", "a_zero", "b_identity", "omega_sq",
                        "ctrl_gain", "dt"}) {
    const std::string key = std::string("data.env.") + p;
    if (kv.has(key)) rc.data.env_params[p] = kv.get_double(key, 0.0);
  }
  rc.data.behavior = kv.get_string("data.behavior", "medium");
  rc.data.n_transitions = kv.get_int("data.n_transitions", 5000);
  rc.data.collect_seed = static_cast<std::uint64_t>(kv.get_int("data.collect_seed", 1));
  rc.data.subsample_target = kv.get_int("data.subsample_target", 0);
  rc.data.filter_dim = static_cast<int>(kv.get_int("data.filter_dim", -1));
  rc.data.filter_fraction = kv.get_double("data.filter_fraction", 1.0);

  rc.tdm_regime = kv.get_string("tdm.regime", "");
  if (!rc.tdm_regime.empty()) apply_tdm_regime(rc.tdm, rc.tdm_regime);
  rc.tdm.latent_state_dim = kv.get_int("tdm.latent_state_dim", rc.tdm.latent_state_dim);
  rc.tdm.latent_action_dim = kv.get_int("tdm.latent_action_dim", rc.tdm.latent_action_dim);
  rc.tdm.encoder_hidden = kv.get_index_list("tdm.encoder_hidden", rc.tdm.encoder_hidden);
  rc.tdm.dynamics_hidden = kv.get_index_list("tdm.dynamics_hidden", rc.tdm.dynamics_hidden);
  rc.tdm.decoder_hidden = kv.get_index_list("tdm.decoder_hidden", rc.tdm.decoder_hidden);
  rc.tdm.learning_rate = kv.get_double("tdm.learning_rate", rc.tdm.learning_rate);
  rc.tdm.w_rec = kv.get_double("tdm.w_rec", rc.tdm.w_rec);
  rc.tdm.w_ds = kv.get_double("tdm.w_ds", rc.tdm.w_ds);
  rc.tdm.w_fwd = kv.get_double("tdm.w_fwd", rc.tdm.w_fwd);
  rc.tdm.w_rvs = kv.get_double("tdm.w_rvs", rc.tdm.w_rvs);
  rc.tdm.w_tsym = kv.get_double("tdm.w_tsym", rc.tdm.w_tsym);
  rc.tdm.l1_scale = kv.get_double("tdm.l1_scale", rc.tdm.l1_scale);
  rc.tdm.training_epochs = kv.get_int("tdm.training_epochs", rc.tdm.training_epochs);
  rc.tdm.pretrain_epochs = kv.get_int("tdm.pretrain_epochs", rc.tdm.pretrain_epochs);
  rc.tdm.batch_size = kv.get_int("tdm.batch_size", rc.tdm.batch_size);
  rc.tdm.enhanced_tsym = kv.get_bool("tdm.enhanced_tsym", rc.tdm.enhanced_tsym);
  rc.tdm.variant = tdm::variant_from_string(
      kv.get_string("tdm.variant", tdm::variant_name(rc.tdm.variant)));

  rc.tsrl_regime = kv.get_string("tsrl.regime", "");
  if (!rc.tsrl_regime.empty()) apply_tsrl_regime(rc.tsrl, rc.tsrl_regime);
  rc.tsrl.actor_lr = kv.get_double("tsrl.actor_lr", rc.tsrl.actor_lr);
  rc.tsrl.critic_lr = kv.get_double("tsrl.critic_lr", rc.tsrl.critic_lr);
  rc.tsrl.gamma = kv.get_double("tsrl.gamma", rc.tsrl.gamma);
  rc.tsrl.rho = kv.get_double("tsrl.rho", rc.tsrl.rho);
  rc.tsrl.policy_noise = kv.get_double("tsrl.policy_noise", rc.tsrl.policy_noise);
  rc.tsrl.noise_clip = kv.get_double("tsrl.noise_clip", rc.tsrl.noise_clip);
  rc.tsrl.policy_update_freq =
      static_cast<int>(kv.get_int("tsrl.policy_update_freq", rc.tsrl.policy_update_freq));
  rc.tsrl.iterations = kv.get_int("tsrl.iterations", rc.tsrl.iterations);
  rc.tsrl.alpha0 = kv.get_double("tsrl.alpha0", rc.tsrl.alpha0);
  rc.tsrl.lambda1 = kv.get_double("tsrl.lambda1", rc.tsrl.lambda1);
  rc.tsrl.lambda2 = kv.get_double("tsrl.lambda2", rc.tsrl.lambda2);
  rc.tsrl.dropout_rate = kv.get_double("tsrl.dropout_rate", rc.tsrl.dropout_rate);
  rc.tsrl.no_r = kv.get_bool("tsrl.no_r", rc.tsrl.no_r);
  rc.tsrl.no_p = kv.get_bool("tsrl.no_p", rc.tsrl.no_p);
  rc.tsrl.no_a = kv.get_bool("tsrl.no_a", rc.tsrl.no_a);
  rc.tsrl.batch_size = kv.get_int("tsrl.batch_size", rc.tsrl.batch_size);
  rc.tsrl.k = static_cast<int>(kv.get_int("tsrl.k", rc.tsrl.k));
  rc.tsrl.policy_hidden = kv.get_index_list("tsrl.policy_hidden", rc.tsrl.policy_hidden);
  rc.tsrl.critic_hidden = kv.get_index_list("tsrl.critic_hidden", rc.tsrl.critic_hidden);

  rc.aug_tau = kv.get_double("aug.tau", rc.aug_tau);
  rc.aug_noise_scale = kv.get_double("aug.noise_scale", rc.aug_noise_scale);
  rc.aug_k = static_cast<int>(kv.get_int("aug.k", rc.aug_k));
  rc.tsrl.k = rc.aug_k;

  rc.eval.episodes = static_cast<int>(kv.get_int("eval.episodes", rc.eval.episodes));
  rc.eval.seeds = static_cast<int>(kv.get_int("eval.seeds", rc.eval.seeds));
  rc.eval.interval = kv.get_int("eval.interval", rc.eval.interval);
  rc.log_interval = kv.get_int("log.interval", rc.log_interval);

  kv.check_all_consumed();
  return rc;
}

inline RunConfig load_run_config(const std::filesystem::path& path,
                                 const std::vector<std::string>& overrides) {
  KeyValues kv = KeyValues::parse_file(path);
  for (const auto& o : overrides) kv.apply_override(o);
  return run_config_from_keyvalues(kv);
}

inline void validate_for_training(const RunConfig& rc) {
  if (rc.out_dir.empty()) throw ArgumentError("run.out_dir is required");
  const bool has_file = !rc.data.source_path.empty();
  const bool has_env = !rc.data.env.empty();
  if (has_file == has_env)
    throw ArgumentError("exactly one of data.source or data.env must be set");
  if (has_file && !std::filesystem::exists(rc.data.source_path))
    throw ArgumentError("data.source does not exist: " + rc.data.source_path);
  if (rc.eval.interval % rc.log_interval != 0)
    throw ArgumentError("eval.interval must be a multiple of log.interval");
  rc.tdm.validate();
  rc.tsrl.validate();
  if (!(rc.aug_tau > 0.0 && rc.aug_tau < 1.0)) throw ArgumentError("aug.tau must be in (0,1)");
  if (rc.aug_noise_scale < 0.0) throw ArgumentError("aug.noise_scale must be >= 0");
}

namespace detail {

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline std::string fmt_list(const std::vector<Eigen::Index>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(v[i]);
  }
  return s;
}

}  // namespace detail

/// Fully resolved, re-runnable echo of a config in the same file format.
inline std::string serialize_run_config(const RunConfig& rc) {
  using detail::fmt_double;
  using detail::fmt_list;
  std::ostringstream os;
  os << "# resolved run config\n";
  os << "run.out_dir = " << rc.out_dir.string() << "\n";
  os << "run.seed = " << rc.seed << "\n";
  os << "run.precision = " << rc.precision << "\n";
  os << "run.overwrite = " << (rc.overwrite ? "true" : "false") << "\n";
  if (!rc.data.source_path.empty()) os << "data.source = " << rc.data.source_path << "\n";
  if (!rc.data.env.empty()) {
    os << "data.env = " << rc.data.env << "\n";
    for (const auto& [k, v] : rc.data.env_params)
      os << "data.env." << k << " = " << fmt_double(v) << "\n";
    os << "data.behavior = " << rc.data.behavior << "\n";
    os << "data.n_transitions = " << rc.data.n_transitions << "\n";
    os << "data.collect_seed = " << rc.data.collect_seed << "\n";
  }
  if (rc.data.subsample_target > 0)
    os << "data.subsample_target = " << rc.data.subsample_target << "\n";
  if (rc.data.filter_dim >= 0) {
    os << "data.filter_dim = " << rc.data.filter_dim << "\n";
    os << "data.filter_fraction = " << fmt_double(rc.data.filter_fraction) << "\n";
  }
  os << "tdm.latent_state_dim = " << rc.tdm.latent_state_dim << "\n";
  os << "tdm.latent_action_dim = " << rc.tdm.latent_action_dim << "\n";
  os << "tdm.encoder_hidden = " << fmt_list(rc.tdm.encoder_hidden) << "\n";
  os << "tdm.dynamics_hidden = " << fmt_list(rc.tdm.dynamics_hidden) << "\n";
  if (!rc.tdm.decoder_hidden.empty())
    os << "tdm.decoder_hidden = " << fmt_list(rc.tdm.decoder_hidden) << "\n";
  os << "tdm.learning_rate = " << fmt_double(rc.tdm.learning_rate) << "\n";
  os << "tdm.w_rec = " << fmt_double(rc.tdm.w_rec) << "\n";
  os << "tdm.w_ds = " << fmt_double(rc.tdm.w_ds) << "\n";
  os << "tdm.w_fwd = " << fmt_double(rc.tdm.w_fwd) << "\n";
  os << "tdm.w_rvs = " << fmt_double(rc.tdm.w_rvs) << "\n";
  os << "tdm.w_tsym = " << fmt_double(rc.tdm.w_tsym) << "\n";
  os << "tdm.l1_scale = " << fmt_double(rc.tdm.l1_scale) << "\n";
  os << "tdm.training_epochs = " << rc.tdm.training_epochs << "\n";
  os << "tdm.pretrain_epochs = " << rc.tdm.pretrain_epochs << "\n";
  os << "tdm.batch_size = " << rc.tdm.batch_size << "\n";
  os << "tdm.enhanced_tsym = " << (rc.tdm.enhanced_tsym ? "true" : "false") << "\n";
  os << "tdm.variant = " << tdm::variant_name(rc.tdm.variant) << "\n";
  os << "tsrl.actor_lr = " << fmt_double(rc.tsrl.actor_lr) << "\n";
  os << "tsrl.critic_lr = " << fmt_double(rc.tsrl.critic_lr) << "\n";
  os << "tsrl.gamma = " << fmt_double(rc.tsrl.gamma) << "\n";
  os << "tsrl.rho = " << fmt_double(rc.tsrl.rho) << "\n";
  os << "tsrl.policy_noise = " << fmt_double(rc.tsrl.policy_noise) << "\n";
  os << "tsrl.noise_clip = " << fmt_double(rc.tsrl.noise_clip) << "\n";
  os << "tsrl.policy_update_freq = " << rc.tsrl.policy_update_freq << "\n";
  os << "tsrl.iterations = " << rc.tsrl.iterations << "\n";
  os << "tsrl.alpha0 = " << fmt_double(rc.tsrl.alpha0) << "\n";
  os << "tsrl.lambda1 = " << fmt_double(rc.tsrl.lambda1) << "\n";
  os << "tsrl.lambda2 = " << fmt_double(rc.tsrl.lambda2) << "\n";
  os << "tsrl.dropout_rate = " << fmt_double(rc.tsrl.dropout_rate) << "\n";
  os << "tsrl.no_r = " << (rc.tsrl.no_r ? "true" : "false") << "\n";
  os << "tsrl.no_p = " << (rc.tsrl.no_p ? "true" : "false") << "\n";
  os << "tsrl.no_a = " << (rc.tsrl.no_a ? "true" : "false") << "\n";
  os << "tsrl.batch_size = " << rc.tsrl.batch_size << "\n";
  os << "tsrl.policy_hidden = " << fmt_list(rc.tsrl.policy_hidden) << "\n";
  os << "tsrl.critic_hidden = " << fmt_list(rc.tsrl.critic_hidden) << "\n";
  os << "aug.tau = " << fmt_double(rc.aug_tau) << "\n";
  os << "aug.noise_scale = " << fmt_double(rc.aug_noise_scale) << "\n";
  os << "aug.k = " << rc.aug_k << "\n";
  os << "eval.episodes = " << rc.eval.episodes << "\n";
  os << "eval.seeds = " << rc.eval.seeds << "\n";
  os << "eval.interval = " << rc.eval.interval << "\n";
  os << "log.interval = " << rc.log_interval << "\n";
  return os.str();
}

}  // namespace tsrl::harness
