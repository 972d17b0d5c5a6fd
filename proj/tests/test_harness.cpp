#include <tsrl/harness.hpp>

#include <catch2/catch_amalgamated.hpp>

#include <fstream>
#include <sstream>

#include "support.hpp"

using namespace tsrl;
using namespace tsrl::harness;
using test_support::random_matrix;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p);
  REQUIRE(f);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

/// Tiny but complete linear-env run config.
RunConfig tiny_config(const std::filesystem::path& out, std::uint64_t seed) {
  RunConfig rc;
  rc.out_dir = out;
  rc.seed = seed;
  rc.data.env = "linear_reversible";
  rc.data.behavior = "medium";
  rc.data.n_transitions = 256;
  rc.data.collect_seed = 3;
  rc.tdm.encoder_hidden = {8};
  rc.tdm.dynamics_hidden = {8};
  rc.tdm.training_epochs = 4;
  rc.tdm.pretrain_epochs = 1;
  rc.tdm.batch_size = 128;
  rc.tsrl.policy_hidden = {8};
  rc.tsrl.critic_hidden = {8};
  rc.tsrl.batch_size = 32;
  rc.tsrl.iterations = 40;
  rc.tsrl.lambda1 = 1.0;
  rc.tsrl.lambda2 = 1.0;
  rc.log_interval = 20;
  rc.eval.interval = 20;
  rc.eval.episodes = 2;
  rc.eval.seeds = 2;
  return rc;
}

}  // namespace

TEST_CASE("config: file parsing, overrides, unknown keys") {
  const auto dir = test_support::temp_dir("cfg");
  const auto path = dir / "run.cfg";
  {
    std::ofstream f(path);
    f << "# comment\n";
    f << "run.out_dir = /tmp/x\n";
    f << "run.seed = 5\n";
    f << "data.env = linear_reversible\n";
    f << "data.env.mu = 0.25   # inline comment\n";
    f << "tdm.encoder_hidden = 32, 16\n";
    f << "tsrl.lambda1 = 7\n";
  }
  RunConfig rc = load_run_config(path, {"run.seed=9", "tsrl.lambda2=3"});
  CHECK(rc.out_dir == "/tmp/x");
  CHECK(rc.seed == 9);  // override wins over the file
  CHECK(rc.data.env_params.at("mu") == 0.25);
  CHECK(rc.tdm.encoder_hidden == std::vector<Eigen::Index>{32, 16});
  CHECK(rc.tsrl.lambda1 == 7.0);
  CHECK(rc.tsrl.lambda2 == 3.0);

  {
    std::ofstream f(path, std::ios::app);
    f << "tdm.typo_key = 1\n";
  }
  CHECK_THROWS_AS(load_run_config(path, {}), ValidationError);

  {
    std::ofstream f(dir / "bad.cfg");
    f << "not a key value line\n";
  }
  CHECK_THROWS_AS(load_run_config(dir / "bad.cfg", {}), FormatError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("config: regime presets resolve the documented epoch pairs") {
  const auto dir = test_support::temp_dir("cfg2");
  const auto path = dir / "run.cfg";
  {
    std::ofstream f(path);
    f << "tdm.regime = locomotion_10k\n";
  }
  RunConfig rc = load_run_config(path, {});
  CHECK(rc.tdm.training_epochs == 2000);
  CHECK(rc.tdm.pretrain_epochs == 200);

  RunConfig rc2 = load_run_config(path, {"tdm.regime=adroit_10k"});
  CHECK(rc2.tdm.training_epochs == 2000);
  CHECK(rc2.tdm.pretrain_epochs == 0);

  // explicit keys beat the regime
  RunConfig rc3 = load_run_config(path, {"tdm.training_epochs=7"});
  CHECK(rc3.tdm.training_epochs == 7);
  CHECK(rc3.tdm.pretrain_epochs == 200);

  RunConfig rc4 = load_run_config(path, {"tsrl.regime=mujoco_10k_a"});
  CHECK(rc4.tsrl.lambda1 == 100.0);
  CHECK(rc4.tsrl.lambda2 == 100.0);

  CHECK_THROWS_AS(load_run_config(path, {"tsrl.regime=warehouse"}), ArgumentError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("config: echo round-trips to the same resolved config") {
  const auto dir = test_support::temp_dir("cfg3");
  RunConfig rc = tiny_config(dir / "out", 11);
  rc.data.env_params["mu"] = 0.5;
  const std::string echo = serialize_run_config(rc);
  const auto echo_path = dir / "echo.cfg";
  write_text_file(echo_path, echo);
  RunConfig back = load_run_config(echo_path, {});
  CHECK(back.seed == rc.seed);
  CHECK(back.data.env == rc.data.env);
  CHECK(back.data.env_params.at("mu") == 0.5);
  CHECK(back.tdm.training_epochs == rc.tdm.training_epochs);
  CHECK(back.tsrl.lambda1 == rc.tsrl.lambda1);
  CHECK(back.eval.interval == rc.eval.interval);
  CHECK(serialize_run_config(back) == echo);
  std::filesystem::remove_all(dir);
}

TEST_CASE("config: validation catches structural mistakes") {
  const auto dir = test_support::temp_dir("cfg4");
  RunConfig rc = tiny_config(dir / "out", 1);
  rc.data.source_path = "also-a-file";  // both sources set
  CHECK_THROWS_AS(validate_for_training(rc), ArgumentError);

  RunConfig rc2 = tiny_config(dir / "out", 1);
  rc2.data.env.clear();  // no source at all
  CHECK_THROWS_AS(validate_for_training(rc2), ArgumentError);

  RunConfig rc3 = tiny_config(dir / "out", 1);
  rc3.eval.interval = 30;  // not a multiple of log interval 20
  CHECK_THROWS_AS(validate_for_training(rc3), ArgumentError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("checkpoints: TDM and agent round-trip bitwise") {
  envs::OracleEnv env = envs::make_env("linear_reversible", {}, 0);
  auto d = envs::collect_dataset(env, envs::BehaviorPolicy::medium, 128, 5);
  auto [norm, stats] = data::normalize_states(d);
  tdm::TdmConfig cfg;
  cfg.encoder_hidden = {6};
  cfg.dynamics_hidden = {6};
  cfg.training_epochs = 2;
  cfg.pretrain_epochs = 0;
  cfg.batch_size = 64;
  auto trained = tdm::train_tdm<double>(norm, stats, cfg, 6);

  const auto dir = test_support::temp_dir("ckpt");
  const auto tdm_path = dir / "tdm.json";
  io::save_tdm(trained.model, tdm_path);
  auto loaded = io::load_tdm<double>(tdm_path);
  CHECK(loaded.param_hash() == trained.model.param_hash());
  CHECK(loaded.stats.hash() == stats.hash());
  CHECK(loaded.latent_state_dim == trained.model.latent_state_dim);

  agent::TsrlConfig acfg;
  acfg.policy_hidden = {6};
  acfg.critic_hidden = {6};
  acfg.batch_size = 16;
  auto ag = agent::make_agent<double>(loaded, acfg, RowVecd(env.action_bound), 7);
  const auto agent_path = dir / "agent.json";
  io::save_agent(ag, agent_path, "{\"env\":\"linear_reversible\",\"params\":{}}");
  auto ag2 = io::load_agent<double>(agent_path);
  CHECK(ag2.policy.param_hash() == ag.policy.param_hash());
  CHECK(ag2.q1_target.param_hash() == ag.q1_target.param_hash());
  CHECK(ag2.tdm_model.param_hash() == ag.tdm_model.param_hash());

  // wrong kind is rejected
  CHECK_THROWS_AS(io::load_agent<double>(tdm_path), FormatError);
  CHECK_THROWS_AS(io::load_tdm<double>(agent_path), FormatError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("checkpoints: optimizer state makes resumed training identical") {
  auto model = test_support::stub_model<double>(2, 1);
  agent::TsrlConfig acfg;
  acfg.policy_hidden = {6};
  acfg.critic_hidden = {6};
  acfg.no_a = true;

  auto make_batch = [](int i) {
    agent::RawBatch<double> b;
    b.s = random_matrix(8, 2, 40 + i);
    b.a = random_matrix(8, 1, 80 + i).array().tanh();
    b.s_next = b.s;
    b.rewards = Vecd::Ones(8);
    b.done = Vecd::Zero(8);
    return b;
  };
  aug::AugmentationRule rule;
  rule.sigma_zs = Vecd::Ones(2);

  // uninterrupted
  auto a1 = agent::make_agent<double>(model, acfg, RowVecd::Ones(1), 50);
  Rng rng1(51);
  for (int i = 0; i < 5; ++i) agent::train_step(a1, make_batch(i), rule, rng1);

  // save after 2 steps, load, continue with the same rng stream
  auto a2 = agent::make_agent<double>(model, acfg, RowVecd::Ones(1), 50);
  Rng rng2(51);
  for (int i = 0; i < 2; ++i) agent::train_step(a2, make_batch(i), rule, rng2);
  const auto dir = test_support::temp_dir("resume");
  io::save_agent(a2, dir / "agent.json");
  auto a3 = io::load_agent<double>(dir / "agent.json");
  for (int i = 2; i < 5; ++i) agent::train_step(a3, make_batch(i), rule, rng2);

  CHECK(a3.policy.param_hash() == a1.policy.param_hash());
  CHECK(a3.q1.param_hash() == a1.q1.param_hash());
  CHECK(a3.q2_target.param_hash() == a1.q2_target.param_hash());
  CHECK(a3.step_count == a1.step_count);
  std::filesystem::remove_all(dir);
}

TEST_CASE("metrics: jsonl read errors carry line numbers") {
  const auto dir = test_support::temp_dir("jsonl");
  const auto path = dir / "m.jsonl";
  {
    std::ofstream f(path);
    f << R"({"step": 1, "critic_loss": 0.5})" << "\n";
    f << "{broken\n";
  }
  try {
    read_jsonl(path);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find(":2:") != std::string::npos);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("plot: single seed collapses the band; bad input is rejected") {
  const auto dir = test_support::temp_dir("plot");
  const auto m1 = dir / "s1.jsonl";
  const auto m2 = dir / "s2.jsonl";
  auto write_metrics = [](const std::filesystem::path& p, double offset) {
    std::ofstream f(p);
    for (int step = 10; step <= 50; step += 10) {
      nlohmann::json rec;
      rec["step"] = step;
      rec["normalized_score"] = offset + step;
      f << rec.dump() << "\n";
    }
  };
  write_metrics(m1, 0.0);
  write_metrics(m2, 5.0);

  Series s1 = read_series(m1, "normalized_score");
  BandData solo = build_band({s1});
  for (std::size_t i = 0; i < solo.steps.size(); ++i) {
    CHECK(solo.lo[i] == solo.mean[i]);
    CHECK(solo.hi[i] == solo.mean[i]);
  }

  BandData both = build_band({s1, read_series(m2, "normalized_score")});
  for (std::size_t i = 0; i < both.steps.size(); ++i) {
    CHECK(both.hi[i] - both.lo[i] == Catch::Approx(5.0));
    CHECK(both.mean[i] == Catch::Approx(both.lo[i] + 2.5));
  }

  const auto svg = dir / "out.svg";
  plot_metrics({m1, m2}, "normalized_score", svg);
  const std::string content = slurp(svg);
  CHECK(content.find("<svg") != std::string::npos);
  CHECK(content.find("polygon") != std::string::npos);
  CHECK(content.find("polyline") != std::string::npos);

  CHECK_THROWS_AS(plot_metrics({}, "normalized_score", svg), ArgumentError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("run_train_tdm: artifacts, overwrite guard, byte-identical reruns") {
  const auto dir = test_support::temp_dir("traintdm");
  RunConfig rc = tiny_config(dir / "a", 31);
  auto out = run_train_tdm(rc);
  CHECK(std::filesystem::exists(out.checkpoint));
  CHECK(std::filesystem::exists(rc.out_dir / "config_resolved.cfg"));
  CHECK(std::filesystem::exists(rc.out_dir / "tdm_metrics.jsonl"));

  // refuses to clobber without overwrite
  CHECK_THROWS_AS(run_train_tdm(rc), ArgumentError);
  rc.overwrite = true;
  auto out2 = run_train_tdm(rc);
  CHECK(out2.final_loss == out.final_loss);

  // identical seed in a fresh dir gives byte-identical metrics
  RunConfig rc2 = tiny_config(dir / "b", 31);
  auto out3 = run_train_tdm(rc2);
  CHECK(slurp(rc.out_dir / "tdm_metrics.jsonl") == slurp(rc2.out_dir / "tdm_metrics.jsonl"));
  CHECK(slurp(out.checkpoint) == slurp(out3.checkpoint));
  std::filesystem::remove_all(dir);
}

TEST_CASE("run_train_tsrl: end to end with eval records and determinism") {
  const auto dir = test_support::temp_dir("traintsrl");
  RunConfig rc = tiny_config(dir / "tdm", 32);
  auto tdm_out = run_train_tdm(rc);

  RunConfig rl1 = tiny_config(dir / "rl1", 33);
  auto rl_out = run_train_tsrl(rl1, tdm_out.checkpoint);
  CHECK(std::filesystem::exists(rl_out.checkpoint));
  REQUIRE(rl_out.final_eval.has_value());
  CHECK(std::filesystem::exists(rl1.out_dir / "eval_final.json"));

  auto records = read_jsonl(rl1.out_dir / "metrics.jsonl");
  REQUIRE(records.size() == 2);  // 40 iterations, log every 20
  for (const auto& rec : records) {
    CHECK(rec.contains("step"));
    CHECK(rec.contains("critic_loss"));
    CHECK(rec.contains("policy_loss"));
    CHECK(rec.contains("alpha"));
    CHECK(rec.contains("kept_fraction"));
    CHECK(rec.contains("eval_return_mean"));
    CHECK(rec.contains("eval_return_std"));
    CHECK(rec.contains("normalized_score"));
    CHECK_FALSE(rec["normalized_score"].is_null());  // eval interval == log interval
  }

  RunConfig rl2 = tiny_config(dir / "rl2", 33);
  run_train_tsrl(rl2, tdm_out.checkpoint);
  CHECK(slurp(rl1.out_dir / "metrics.jsonl") == slurp(rl2.out_dir / "metrics.jsonl"));
  std::filesystem::remove_all(dir);
}

TEST_CASE("run_train_tsrl: checkpoint compatibility is enforced") {
  const auto dir = test_support::temp_dir("compat");
  RunConfig rc = tiny_config(dir / "tdm", 34);
  auto tdm_out = run_train_tdm(rc);

  // different collection seed -> different normalization stats -> refused
  RunConfig other = tiny_config(dir / "rl", 35);
  other.data.collect_seed = 999;
  CHECK_THROWS_AS(run_train_tsrl(other, tdm_out.checkpoint), CompatibilityError);

  // different env dims -> refused before any training
  RunConfig wrongdims = tiny_config(dir / "rl2", 36);
  wrongdims.data.env = "pendulum";
  CHECK_THROWS_AS(run_train_tsrl(wrongdims, tdm_out.checkpoint), CompatibilityError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("run_score: csv row count and reload into compute_threshold") {
  const auto dir = test_support::temp_dir("score");
  RunConfig rc = tiny_config(dir / "tdm", 37);
  auto tdm_out = run_train_tdm(rc);

  // materialize the same dataset to a file
  data::TransitionDataset d = resolve_dataset(rc);
  const auto data_path = dir / "data.h5";
  data::save_dataset(d, data_path);

  const auto csv = dir / "scores.csv";
  const auto summary_path = dir / "summary.json";
  auto summary = run_score(tdm_out.checkpoint, data_path, csv, summary_path);
  CHECK(summary["n"].get<Eigen::Index>() == d.n());

  // reload the csv and recompute the 50% quantile
  std::ifstream f(csv);
  std::string line;
  std::getline(f, line);
  CHECK(line == "index,score");
  std::vector<double> scores;
  while (std::getline(f, line)) {
    const auto comma = line.find(',');
    REQUIRE(comma != std::string::npos);
    scores.push_back(std::stod(line.substr(comma + 1)));
  }
  REQUIRE(static_cast<Eigen::Index>(scores.size()) == d.n());
  Vecd v = Eigen::Map<Vecd>(scores.data(), static_cast<Eigen::Index>(scores.size()));
  CHECK(aug::compute_threshold(v, 0.5) ==
        Catch::Approx(summary["quantile_50"].get<double>()).epsilon(1e-12));
  std::filesystem::remove_all(dir);
}

TEST_CASE("run_augment_preview: sane acceptance statistics") {
  const auto dir = test_support::temp_dir("preview");
  RunConfig rc = tiny_config(dir / "tdm", 38);
  auto tdm_out = run_train_tdm(rc);
  data::TransitionDataset d = resolve_dataset(rc);
  const auto data_path = dir / "data.h5";
  data::save_dataset(d, data_path);

  auto report = run_augment_preview(tdm_out.checkpoint, data_path, 0.5, 0.01, 1, 7);
  CHECK(report["n"].get<Eigen::Index>() == d.n());
  CHECK(report["attempted"].get<Eigen::Index>() == d.n());
  const double kept = report["kept_fraction"].get<double>();
  CHECK(kept >= 0.0);
  CHECK(kept <= 1.0);
  std::int64_t total = 0;
  for (const auto& c : report["histogram"]["counts"]) total += c.get<std::int64_t>();
  CHECK(total == report["attempted"].get<std::int64_t>());
  std::filesystem::remove_all(dir);
}

TEST_CASE("run_evaluate: embedded recipe and explicit env override") {
  const auto dir = test_support::temp_dir("eval");
  RunConfig rc = tiny_config(dir / "tdm", 39);
  auto tdm_out = run_train_tdm(rc);
  RunConfig rl = tiny_config(dir / "rl", 39);
  auto rl_out = run_train_tsrl(rl, tdm_out.checkpoint);

  auto rep = run_evaluate(rl_out.checkpoint, "", {}, 2, 2, 1000);
  CHECK(rep.contains("normalized_score"));
  CHECK(rep["episodes"].get<int>() == 2);
  CHECK(rep["seeds"].get<int>() == 2);

  auto rep2 = run_evaluate(rl_out.checkpoint, "linear_reversible", {}, 2, 2, 1000);
  CHECK(rep2["mean_return"].get<double>() == Catch::Approx(rep["mean_return"].get<double>()));
  std::filesystem::remove_all(dir);
}
