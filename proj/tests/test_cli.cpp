#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "uwm/cli.hpp"
#include "uwm/config.hpp"

using namespace uwm;
namespace fs = std::filesystem;

#ifndef UWM_LAB_BIN
#define UWM_LAB_BIN "uwm_lab"
#endif

namespace {

struct TempDir {
  fs::path path;
  TempDir() : path(fs::temp_directory_path() / ("uwm_cli_" + std::to_string(::getpid()) + "_" +
                                                std::to_string(counter++))) {
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  static int counter;
};
int TempDir::counter = 0;

nlohmann::json tiny_config_json() {
  ExperimentConfig c;
  c.env.episode_steps = 40;
  c.env.action_policy = "uniform";
  c.data.n_train = 10;
  c.data.n_probe = 10;
  c.data.n_eval = 25;
  c.data.t_max = 19;
  c.data.indicator_eval_size = 100;
  c.train.steps = 20;
  c.train.batch = 4;
  c.train.t_min = 6;
  c.train.t_max = 18;
  c.train.log_every = 5;
  c.seeds = {1};
  return config_to_json(c);
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(UWM_LAB_BIN) + " " + args + " > /dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WEXITSTATUS(rc);
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p);
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("config: unknown keys are rejected before any work") {
  nlohmann::json j = tiny_config_json();
  j["typo_key"] = 1;
  REQUIRE_THROWS_AS(config_from_json(j), ConfigError);
  nlohmann::json j2 = tiny_config_json();
  j2["train"]["learning_rate"] = 0.1;  // wrong name
  REQUIRE_THROWS_AS(config_from_json(j2), ConfigError);
}

TEST_CASE("config: invalid stride fails before any work") {
  nlohmann::json j = tiny_config_json();
  j["env"]["obs_stride"] = 0;
  REQUIRE_THROWS_AS(config_from_json(j), ConfigError);
}

TEST_CASE("config: schema version is enforced") {
  nlohmann::json j = tiny_config_json();
  j["schema_version"] = 2;
  REQUIRE_THROWS_AS(config_from_json(j), ConfigError);
}

TEST_CASE("cli: exit codes distinguish config, data, and success") {
  TempDir tmp;
  const fs::path cfg_path = tmp.path / "cfg.json";
  nlohmann::json j = tiny_config_json();
  j["out_dir"] = (tmp.path / "out").string();
  std::ofstream(cfg_path) << j.dump(1);

  // config error: malformed key
  {
    nlohmann::json bad = j;
    bad["bogus"] = true;
    const fs::path bad_path = tmp.path / "bad.json";
    std::ofstream(bad_path) << bad.dump(1);
    REQUIRE(run_cli("simulate --config " + bad_path.string()) == 2);
  }
  // data error: eval before training
  REQUIRE(run_cli("eval --config " + cfg_path.string()) == 3);
  // success: simulate
  REQUIRE(run_cli("simulate --config " + cfg_path.string()) == 0);
  REQUIRE(fs::exists(tmp.path / "out" / "data_seed_1" / "train.jsonl"));
  REQUIRE(fs::exists(tmp.path / "out" / "resolved_config.json"));
}

TEST_CASE("cli: simulate is byte-deterministic and exports 100 indicator lines") {
  TempDir tmp;
  nlohmann::json j = tiny_config_json();
  const fs::path out1 = tmp.path / "o1", out2 = tmp.path / "o2";
  const fs::path cfg_path = tmp.path / "cfg.json";
  std::ofstream(cfg_path) << j.dump(1);

  REQUIRE(run_cli("simulate --config " + cfg_path.string() + " --out " + out1.string()) == 0);
  REQUIRE(run_cli("simulate --config " + cfg_path.string() + " --out " + out2.string()) == 0);
  for (const char* f : {"train.jsonl", "probe.jsonl", "eval.jsonl", "indicator_eval.jsonl"}) {
    const std::string a = slurp(out1 / "data_seed_1" / f);
    REQUIRE(a == slurp(out2 / "data_seed_1" / f));
    REQUIRE(!a.empty());
  }
  std::ifstream ind(out1 / "data_seed_1" / "indicator_eval.jsonl");
  int lines = 0;
  std::string line;
  while (std::getline(ind, line)) ++lines;
  REQUIRE(lines == 100);
}

TEST_CASE("cli: train then eval produce reports; reruns are byte-identical") {
  TempDir tmp;
  nlohmann::json j = tiny_config_json();
  j["out_dir"] = (tmp.path / "run").string();
  const fs::path cfg_path = tmp.path / "cfg.json";
  std::ofstream(cfg_path) << j.dump(1);

  REQUIRE(run_cli("train --config " + cfg_path.string()) == 0);
  const fs::path seed_dir = tmp.path / "run" / "seed_1";
  REQUIRE(fs::exists(seed_dir / "metrics.jsonl"));
  REQUIRE(fs::exists(seed_dir / "checkpoint.json"));
  const std::string metrics1 = slurp(seed_dir / "metrics.jsonl");

  // rerun into a fresh directory: metrics bytes identical
  nlohmann::json j2 = j;
  j2["out_dir"] = (tmp.path / "run2").string();
  const fs::path cfg2 = tmp.path / "cfg2.json";
  std::ofstream(cfg2) << j2.dump(1);
  REQUIRE(run_cli("train --config " + cfg2.string()) == 0);
  REQUIRE(slurp(tmp.path / "run2" / "seed_1" / "metrics.jsonl") == metrics1);

  REQUIRE(run_cli("eval --config " + cfg_path.string()) == 0);
  REQUIRE(fs::exists(seed_dir / "report.json"));
  REQUIRE(fs::exists(seed_dir / "delta_r2.csv"));
  REQUIRE(fs::exists(seed_dir / "retrieval.csv"));

  // report aggregation
  REQUIRE(run_cli("report --config " + cfg_path.string()) == 0);
  REQUIRE(fs::exists(tmp.path / "run" / "summary.json"));
}

TEST_CASE("cli: theorem-check reports zero violations on random pairs") {
  TempDir tmp;
  nlohmann::json j = tiny_config_json();
  j["out_dir"] = (tmp.path / "thm").string();
  j["theorem"] = {{"pairs", 25}, {"oracle_dim", 4}, {"oracle_trials", 16}, {"oracle_steps", 200}};
  const fs::path cfg_path = tmp.path / "cfg.json";
  std::ofstream(cfg_path) << j.dump(1);
  REQUIRE(run_cli("theorem-check --config " + cfg_path.string()) == 0);
  nlohmann::json rep;
  std::ifstream((tmp.path / "thm" / "theorem_report.json").string()) >> rep;
  REQUIRE(rep.at("bound_violations").get<int>() == 0);
  REQUIRE(rep.at("pass").get<bool>());
}

TEST_CASE("library: checkpoint meta reconstructs the dataset and model for eval") {
  TempDir tmp;
  ExperimentConfig c = config_from_json(tiny_config_json());
  c.out_dir = (tmp.path / "run").string();
  c.train.steps = 10;
  cmd_train(c);
  const auto reports = cmd_eval(c);
  REQUIRE(reports.size() == 1);
  REQUIRE(reports[0].contains("context_probe"));
  REQUIRE(reports[0].at("param_count").get<std::size_t>() > 1000);
}
