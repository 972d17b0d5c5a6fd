#pragma once

#include <tsrl/agent.hpp>
#include <tsrl/augmentation.hpp>
#include <tsrl/checkpoint.hpp>
#include <tsrl/config.hpp>
#include <tsrl/dataset_io.hpp>
#include <tsrl/envs.hpp>
#include <tsrl/metrics.hpp>
#include <tsrl/plot.hpp>
#include <tsrl/tdm.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

namespace tsrl::harness {

namespace fs = std::filesystem;

inline envs::OracleEnv env_from_config(const RunConfig& rc) {
  if (rc.data.env.empty()) throw ArgumentError("config has no data.env recipe");
  return envs::make_env(rc.data.env, rc.data.env_params, rc.data.collect_seed);
}

/// Loads a file source or collects from the oracle recipe, then applies the
/// optional subsample/filter steps. Fully deterministic given the config.
inline data::TransitionDataset resolve_dataset(const RunConfig& rc) {
  data::TransitionDataset d;
  if (!rc.data.source_path.empty()) {
    d = data::load_dataset(rc.data.source_path);
  } else {
    const envs::OracleEnv env = env_from_config(rc);
    d = envs::collect_dataset(env, envs::behavior_from_string(rc.data.behavior),
                              rc.data.n_transitions, rc.data.collect_seed);
  }
  if (rc.data.filter_dim >= 0)
    d = data::filter_by_feature(d, rc.data.filter_dim, rc.data.filter_fraction);
  if (rc.data.subsample_target > 0)
    d = data::subsample_trajectories(d, rc.data.subsample_target, rc.data.collect_seed);
  return d;
}

/// Without overwrite an existing non-empty output directory is never touched.
inline void prepare_out_dir(const fs::path& dir, bool overwrite) {
  if (fs::exists(dir) && !fs::is_directory(dir))
    throw ArgumentError("output path exists and is not a directory: " + dir.string());
  if (fs::exists(dir) && !fs::is_empty(dir) && !overwrite)
    throw ArgumentError("output directory not empty (pass --overwrite to reuse): " +
                        dir.string());
  fs::create_directories(dir);
}

inline void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw ArgumentError("cannot write " + path.string());
  f << text;
}

inline std::string fmt_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// ---- train-tdm ----

struct TrainTdmOutput {
  fs::path checkpoint;
  double final_loss = 0.0;
};

template <class S>
TrainTdmOutput run_train_tdm_impl(const RunConfig& rc) {
  validate_for_training(rc);
  prepare_out_dir(rc.out_dir, rc.overwrite);
  write_text_file(rc.out_dir / "config_resolved.cfg", serialize_run_config(rc));

  data::TransitionDataset raw = resolve_dataset(rc);
  auto [normalized, stats] = data::normalize_states(raw);

  tdm::DiagnosticSink<S> diag = [&](const tdm::TdmModel<S>& m, const std::string& reason) {
    io::save_tdm(m, rc.out_dir / "tdm_checkpoint_diagnostic.json");
    write_text_file(rc.out_dir / "abort_reason.txt", reason + "\n");
  };
  tdm::TdmTrainResult<S> result = tdm::train_tdm<S>(normalized, stats, rc.tdm, rc.seed, diag);

  JsonlWriter metrics(rc.out_dir / "tdm_metrics.jsonl");
  for (const auto& e : result.history) {
    nlohmann::json rec;
    rec["epoch"] = e.epoch;
    rec["phase"] = e.pretrain ? "pretrain" : "full";
    rec["loss_total"] = e.losses.total;
    rec["loss_rec"] = e.losses.rec;
    rec["loss_ds"] = e.losses.ds;
    rec["loss_fwd"] = e.losses.fwd;
    rec["loss_rvs"] = e.losses.rvs;
    rec["loss_tsym"] = e.losses.tsym;
    rec["loss_l1"] = e.losses.l1;
    metrics.write(rec);
  }
  const fs::path ckpt = rc.out_dir / "tdm_checkpoint.json";
  io::save_tdm(result.model, ckpt);
  return {ckpt, result.final_loss};
}

inline TrainTdmOutput run_train_tdm(const RunConfig& rc) {
  return rc.precision == 32 ? run_train_tdm_impl<float>(rc) : run_train_tdm_impl<double>(rc);
}

// ---- train-tsrl ----

struct TrainTsrlOutput {
  fs::path checkpoint;
  std::optional<envs::EvalReport> final_eval;
};

inline RowVecd action_bounds_from_data(const data::TransitionDataset& d) {
  return d.actions.cwiseAbs().colwise().maxCoeff();
}

template <class S>
TrainTsrlOutput run_train_tsrl_impl(const RunConfig& rc, const fs::path& tdm_ckpt) {
  validate_for_training(rc);
  tdm::TdmModel<S> model = io::load_tdm<S>(tdm_ckpt);

  data::TransitionDataset raw = resolve_dataset(rc);
  if (raw.state_dim() != model.state_dim || raw.action_dim() != model.action_dim)
    throw CompatibilityError("TDM checkpoint dims do not match the dataset");
  data::NormalizationStats stats = data::compute_stats(raw);
  if (stats.hash() != model.stats.hash())
    throw CompatibilityError(
        "normalization stats mismatch: the TSRL dataset differs from the one the TDM was "
        "trained on");
  data::TransitionDataset normalized = data::apply_normalization(raw, stats);

  prepare_out_dir(rc.out_dir, rc.overwrite);
  write_text_file(rc.out_dir / "config_resolved.cfg", serialize_run_config(rc));

  std::optional<envs::OracleEnv> env;
  std::string recipe;
  if (!rc.data.env.empty()) {
    env = env_from_config(rc);
    nlohmann::json rj;
    rj["env"] = rc.data.env;
    rj["params"] = rc.data.env_params;
    recipe = rj.dump();
  }

  const RowVecd bounds = env ? RowVecd(env->action_bound) : action_bounds_from_data(raw);
  agent::TsrlAgent<S> ag = agent::make_agent<S>(model, rc.tsrl, bounds, rc.seed);

  // Threshold and latent stds come from the training set under the same
  // model that will score the perturbations.
  aug::AugmentationRule rule =
      aug::make_rule(model, normalized, rc.aug_tau, rc.aug_noise_scale, rc.aug_k);

  std::vector<std::uint64_t> eval_seeds;
  for (int k = 0; k < rc.eval.seeds; ++k)
    eval_seeds.push_back(fnv1a64("eval-seed", rc.seed) + static_cast<std::uint64_t>(k));
  envs::ActFn act = [&](const Vecd& s) { return ag.act(s); };

  JsonlWriter metrics(rc.out_dir / "metrics.jsonl");
  Rng train_rng = Rng::derive(rc.seed, "tsrl-train");

  double sum_critic = 0.0, sum_policy = 0.0, sum_alpha = 0.0, sum_kept = 0.0, sum_q = 0.0;
  std::int64_t n_critic = 0, n_policy = 0;

  try {
    for (std::int64_t step = 1; step <= rc.tsrl.iterations; ++step) {
      agent::RawBatch<S> batch =
          agent::sample_raw_batch<S>(normalized, rc.tsrl.batch_size, train_rng);
      agent::StepMetrics m = agent::train_step(ag, batch, rule, train_rng);
      sum_critic += m.critic_loss;
      sum_kept += m.kept_fraction;
      sum_q += m.q_mean;
      ++n_critic;
      if (m.policy_loss) {
        sum_policy += *m.policy_loss;
        sum_alpha += *m.alpha;
        ++n_policy;
      }
      if (step % rc.log_interval == 0) {
        nlohmann::json rec;
        rec["step"] = step;
        rec["critic_loss"] = sum_critic / static_cast<double>(n_critic);
        rec["policy_loss"] =
            n_policy > 0 ? nlohmann::json(sum_policy / static_cast<double>(n_policy))
                         : nlohmann::json(nullptr);
        rec["alpha"] = n_policy > 0 ? nlohmann::json(sum_alpha / static_cast<double>(n_policy))
                                    : nlohmann::json(nullptr);
        rec["kept_fraction"] = sum_kept / static_cast<double>(n_critic);
        rec["q_mean"] = sum_q / static_cast<double>(n_critic);
        if (env && step % rc.eval.interval == 0) {
          const envs::EvalReport rep =
              envs::evaluate_policy(*env, act, rc.eval.episodes, eval_seeds);
          rec["eval_return_mean"] = rep.mean_return;
          rec["eval_return_std"] = rep.std_return;
          rec["normalized_score"] = rep.normalized_score;
        } else {
          rec["eval_return_mean"] = nullptr;
          rec["eval_return_std"] = nullptr;
          rec["normalized_score"] = nullptr;
        }
        metrics.write(rec);
        sum_critic = sum_policy = sum_alpha = sum_kept = sum_q = 0.0;
        n_critic = n_policy = 0;
      }
    }
  } catch (const NumericalError&) {
    io::save_agent(ag, rc.out_dir / "tsrl_checkpoint_diagnostic.json", recipe);
    throw;
  }

  TrainTsrlOutput out;
  out.checkpoint = rc.out_dir / "tsrl_checkpoint.json";
  io::save_agent(ag, out.checkpoint, recipe);
  if (env) {
    out.final_eval = envs::evaluate_policy(*env, act, rc.eval.episodes, eval_seeds);
    nlohmann::json fj;
    fj["mean_return"] = out.final_eval->mean_return;
    fj["std_return"] = out.final_eval->std_return;
    fj["normalized_score"] = out.final_eval->normalized_score;
    fj["episodes"] = out.final_eval->episodes;
    fj["seeds"] = out.final_eval->seeds;
    io::save_json_file(fj, rc.out_dir / "eval_final.json");
  }
  return out;
}

inline TrainTsrlOutput run_train_tsrl(const RunConfig& rc, const fs::path& tdm_ckpt) {
  return rc.precision == 32 ? run_train_tsrl_impl<float>(rc, tdm_ckpt)
                            : run_train_tsrl_impl<double>(rc, tdm_ckpt);
}

// ---- score ----

/// Per-sample T-symmetry scores as CSV plus a summary JSON with the tau
/// quantiles used by the augmentation rule.
inline nlohmann::json run_score(const fs::path& tdm_ckpt, const fs::path& dataset_path,
                                const fs::path& out_csv, const fs::path& out_summary) {
  tdm::TdmModel<double> model = io::load_tdm<double>(tdm_ckpt);
  data::TransitionDataset raw = data::load_dataset(dataset_path);
  if (raw.state_dim() != model.state_dim || raw.action_dim() != model.action_dim)
    throw CompatibilityError("TDM checkpoint dims do not match the dataset");
  data::TransitionDataset normalized = data::apply_normalization(raw, model.stats);
  const Vecd scores = tdm::tsym_scores(model, normalized);

  std::ofstream csv(out_csv);
  if (!csv) throw ArgumentError("cannot write " + out_csv.string());
  csv << "index,score\n";
  for (Eigen::Index i = 0; i < scores.size(); ++i)
    csv << i << "," << fmt_g17(scores(i)) << "\n";

  nlohmann::json summary;
  summary["n"] = scores.size();
  summary["mean"] = scores.mean();
  summary["min"] = scores.minCoeff();
  summary["max"] = scores.maxCoeff();
  summary["quantile_50"] = aug::compute_threshold(scores, 0.5);
  summary["quantile_70"] = aug::compute_threshold(scores, 0.7);
  io::save_json_file(summary, out_summary);
  return summary;
}

// ---- subsample / filter ----

inline void run_subsample(const fs::path& in, const fs::path& out, Eigen::Index target,
                          std::uint64_t seed) {
  data::TransitionDataset d = data::load_dataset(in);
  data::save_dataset(data::subsample_trajectories(d, target, seed), out);
}

inline void run_filter(const fs::path& in, const fs::path& out, Eigen::Index dim,
                       double fraction) {
  data::TransitionDataset d = data::load_dataset(in);
  data::save_dataset(data::filter_by_feature(d, dim, fraction), out);
}

// ---- augment-preview ----

/// Acceptance-rate statistics for the latent augmentation under a trained
/// model: threshold, kept fraction, and a histogram of perturbed scores.
inline nlohmann::json run_augment_preview(const fs::path& tdm_ckpt, const fs::path& dataset_path,
                                          double tau, double noise_scale, int k,
                                          std::uint64_t seed) {
  tdm::TdmModel<double> model = io::load_tdm<double>(tdm_ckpt);
  data::TransitionDataset raw = data::load_dataset(dataset_path);
  data::TransitionDataset normalized = data::apply_normalization(raw, model.stats);
  aug::AugmentationRule rule = aug::make_rule(model, normalized, tau, noise_scale, k);

  Rng rng = Rng::derive(seed, "augment-preview");
  constexpr Eigen::Index kChunk = 8192;
  Eigen::Index attempted = 0, kept = 0;
  std::vector<double> perturbed_scores;
  for (Eigen::Index start = 0; start < normalized.n(); start += kChunk) {
    const Eigen::Index len = std::min<Eigen::Index>(kChunk, normalized.n() - start);
    auto [zs, za] = model.encode(normalized.states.middleRows(start, len),
                                 normalized.actions.middleRows(start, len));
    for (int rep = 0; rep < k; ++rep) {
      Matd zp = aug::perturb_latent(zs, rule.sigma_zs, rule.noise_scale, rng);
      Vecd sc = model.tsym_residual_latent(zp, za);
      for (Eigen::Index i = 0; i < sc.size(); ++i) {
        perturbed_scores.push_back(sc(i));
        ++attempted;
        if (sc(i) <= rule.threshold) ++kept;
      }
    }
  }
  nlohmann::json out;
  out["threshold"] = rule.threshold;
  out["tau"] = tau;
  out["noise_scale"] = noise_scale;
  out["k"] = k;
  out["n"] = normalized.n();
  out["attempted"] = attempted;
  out["kept"] = kept;
  out["kept_fraction"] =
      attempted == 0 ? 0.0 : static_cast<double>(kept) / static_cast<double>(attempted);
  const int bins = 20;
  double smax = 0.0;
  for (double s : perturbed_scores) smax = std::max(smax, s);
  if (smax == 0.0) smax = 1.0;
  std::vector<std::int64_t> counts(bins, 0);
  for (double s : perturbed_scores) {
    int b = static_cast<int>(s / smax * bins);
    counts[static_cast<std::size_t>(std::min(b, bins - 1))]++;
  }
  out["histogram"]["max_score"] = smax;
  out["histogram"]["bins"] = bins;
  out["histogram"]["counts"] = counts;
  return out;
}

// ---- evaluate ----

inline nlohmann::json run_evaluate(const fs::path& agent_ckpt, const std::string& env_name,
                                   const envs::EnvParams& params, int episodes, int seeds,
                                   std::uint64_t seed_base) {
  std::string recipe;
  agent::TsrlAgent<double> ag = io::load_agent<double>(agent_ckpt, &recipe);
  envs::OracleEnv env = [&] {
    if (!env_name.empty()) return envs::make_env(env_name, params, seed_base);
    if (recipe.empty())
      throw ArgumentError("checkpoint has no embedded env recipe; pass --env");
    const auto rj = nlohmann::json::parse(recipe);
    envs::EnvParams p;
    for (const auto& [k, v] : rj.at("params").items()) p[k] = v.get<double>();
    return envs::make_env(rj.at("env").get<std::string>(), p, seed_base);
  }();
  std::vector<std::uint64_t> eval_seeds;
  for (int k = 0; k < seeds; ++k) eval_seeds.push_back(seed_base + static_cast<std::uint64_t>(k));
  const envs::EvalReport rep = envs::evaluate_policy(
      env, [&](const Vecd& s) { return ag.act(s); }, episodes, eval_seeds);
  nlohmann::json j;
  j["mean_return"] = rep.mean_return;
  j["std_return"] = rep.std_return;
  j["normalized_score"] = rep.normalized_score;
  j["episodes"] = rep.episodes;
  j["seeds"] = rep.seeds;
  return j;
}

}  // namespace tsrl::harness
