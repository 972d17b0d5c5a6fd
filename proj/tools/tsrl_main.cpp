#include <tsrl/harness.hpp>

#include <CLI11.hpp>

#include <iostream>

namespace {

using tsrl::harness::RunConfig;

RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  return tsrl::harness::load_run_config(path, overrides);
}

tsrl::envs::EnvParams parse_params(const std::vector<std::string>& specs) {
  tsrl::envs::EnvParams params;
  for (const auto& spec : specs) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos)
      throw tsrl::ArgumentError("--param must look like key=value, got: " + spec);
    params[spec.substr(0, eq)] = std::stod(spec.substr(eq + 1));
  }
  return params;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"T-symmetry enforced dynamics model and offline RL toolchain"};
  app.require_subcommand(1);

  std::string config_path, tdm_ckpt, agent_ckpt, dataset_path, out_path, env_name;
  std::string field = "normalized_score";
  std::vector<std::string> overrides, param_specs, metrics_files;
  std::string out_csv = "scores.csv", out_summary = "score_summary.json";
  std::int64_t target = 0;
  std::uint64_t seed = 0, seed_base = 9000;
  Eigen::Index dim = 0;
  double fraction = 1.0, tau = 0.5, noise_scale = 0.01;
  int k = 1, episodes = 5, seeds = 3;
  bool overwrite = false;

  auto* cmd_tdm = app.add_subcommand("train-tdm", "Train the dynamics model from a config");
  cmd_tdm->add_option("--config", config_path, "run config file")->required();
  cmd_tdm->add_option("--set", overrides, "override config keys (key=value)");
  cmd_tdm->add_flag("--overwrite", overwrite, "reuse a non-empty output directory");

  auto* cmd_tsrl = app.add_subcommand("train-tsrl", "Train the offline RL agent on a frozen TDM");
  cmd_tsrl->add_option("--config", config_path, "run config file")->required();
  cmd_tsrl->add_option("--tdm", tdm_ckpt, "TDM checkpoint path")->required();
  cmd_tsrl->add_option("--set", overrides, "override config keys (key=value)");
  cmd_tsrl->add_flag("--overwrite", overwrite, "reuse a non-empty output directory");

  auto* cmd_score = app.add_subcommand("score", "Per-sample T-symmetry scores for a dataset");
  cmd_score->add_option("--tdm", tdm_ckpt)->required();
  cmd_score->add_option("--dataset", dataset_path)->required();
  cmd_score->add_option("--out-csv", out_csv);
  cmd_score->add_option("--out-summary", out_summary);

  auto* cmd_sub = app.add_subcommand("subsample", "Draw whole trajectories up to a target size");
  cmd_sub->add_option("--dataset", dataset_path)->required();
  cmd_sub->add_option("--out", out_path)->required();
  cmd_sub->add_option("--target", target, "target transition count")->required();
  cmd_sub->add_option("--seed", seed);

  auto* cmd_filter = app.add_subcommand("filter", "Keep rows below a feature-fraction cutoff");
  cmd_filter->add_option("--dataset", dataset_path)->required();
  cmd_filter->add_option("--out", out_path)->required();
  cmd_filter->add_option("--dim", dim, "state feature index")->required();
  cmd_filter->add_option("--fraction", fraction, "fraction of the feature max")->required();

  auto* cmd_aug = app.add_subcommand("augment-preview", "Augmentation acceptance statistics");
  cmd_aug->add_option("--tdm", tdm_ckpt)->required();
  cmd_aug->add_option("--dataset", dataset_path)->required();
  cmd_aug->add_option("--tau", tau);
  cmd_aug->add_option("--noise-scale", noise_scale);
  cmd_aug->add_option("--k", k);
  cmd_aug->add_option("--seed", seed);
  cmd_aug->add_option("--out", out_path, "write the JSON report here as well");

  auto* cmd_eval = app.add_subcommand("evaluate", "Evaluate a TSRL checkpoint in its env");
  cmd_eval->add_option("--checkpoint", agent_ckpt)->required();
  cmd_eval->add_option("--env", env_name, "override the embedded env recipe");
  cmd_eval->add_option("--param", param_specs, "env parameter overrides (key=value)");
  cmd_eval->add_option("--episodes", episodes);
  cmd_eval->add_option("--seeds", seeds);
  cmd_eval->add_option("--seed-base", seed_base);
  cmd_eval->add_option("--out", out_path);

  auto* cmd_plot = app.add_subcommand("plot", "Render learning curves with min/max bands");
  cmd_plot->add_option("--out", out_path, "output SVG path")->required();
  cmd_plot->add_option("--field", field, "metrics field to plot");
  cmd_plot->add_option("files", metrics_files, "metrics JSONL files (one per seed)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (*cmd_tdm) {
      RunConfig rc = load_config(config_path, overrides);
      if (overwrite) rc.overwrite = true;
      const auto out = tsrl::harness::run_train_tdm(rc);
      std::cout << out.checkpoint.string() << "\n";
    } else if (*cmd_tsrl) {
      RunConfig rc = load_config(config_path, overrides);
      if (overwrite) rc.overwrite = true;
      const auto out = tsrl::harness::run_train_tsrl(rc, tdm_ckpt);
      std::cout << out.checkpoint.string() << "\n";
      if (out.final_eval) {
        std::cout << "final normalized score: " << out.final_eval->normalized_score << " (return "
                  << out.final_eval->mean_return << " +- " << out.final_eval->std_return
                  << ")\n";
      }
    } else if (*cmd_score) {
      const auto summary = tsrl::harness::run_score(tdm_ckpt, dataset_path, out_csv, out_summary);
      std::cout << summary.dump(2) << "\n";
    } else if (*cmd_sub) {
      tsrl::harness::run_subsample(dataset_path, out_path, target, seed);
      std::cout << out_path << "\n";
    } else if (*cmd_filter) {
      tsrl::harness::run_filter(dataset_path, out_path, dim, fraction);
      std::cout << out_path << "\n";
    } else if (*cmd_aug) {
      const auto report =
          tsrl::harness::run_augment_preview(tdm_ckpt, dataset_path, tau, noise_scale, k, seed);
      if (!out_path.empty()) tsrl::io::save_json_file(report, out_path);
      std::cout << report.dump(2) << "\n";
    } else if (*cmd_eval) {
      const auto report = tsrl::harness::run_evaluate(agent_ckpt, env_name,
                                                      parse_params(param_specs), episodes, seeds,
                                                      seed_base);
      if (!out_path.empty()) tsrl::io::save_json_file(report, out_path);
      std::cout << report.dump(2) << "\n";
    } else if (*cmd_plot) {
      std::vector<std::filesystem::path> files(metrics_files.begin(), metrics_files.end());
      tsrl::harness::plot_metrics(files, field, out_path);
      std::cout << out_path << "\n";
    }
  } catch (const tsrl::NumericalError& e) {
    std::cerr << "numerical abort: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
