#include <cstdio>
#include <exception>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "uwm/cli.hpp"

namespace {

uwm::ExperimentConfig load_with_overrides(const std::string& config_path, std::uint64_t seed,
                                          bool seed_set, const std::string& out_override) {
  uwm::ExperimentConfig cfg = uwm::load_config(config_path);
  if (seed_set) cfg.seeds = {seed};
  if (!out_override.empty()) cfg.out_dir = out_override;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"uwm_lab: density-matrix world-model experiments"};
  app.require_subcommand(1);

  std::string config_path, out_override, checkpoint_path;
  std::uint64_t seed = 0;
  bool seed_set = false;

  auto add_common = [&](CLI::App* sub, bool config_required = true) {
    auto* copt = sub->add_option("--config", config_path, "experiment config (JSON)");
    if (config_required) copt->required();
    sub->add_option("--seed", seed, "override the config's seed list with one seed")
        ->each([&](const std::string&) { seed_set = true; });
    sub->add_option("--out", out_override, "override the config's out_dir");
  };

  auto* sim = app.add_subcommand("simulate", "generate datasets and write JSON-lines files");
  add_common(sim);
  auto* train = app.add_subcommand("train", "run seeded training, write metrics + checkpoints");
  add_common(train);
  auto* eval = app.add_subcommand("eval", "run the evaluation battery on checkpoints");
  add_common(eval);
  eval->add_option("--checkpoint", checkpoint_path, "evaluate one checkpoint file");
  auto* theorem = app.add_subcommand("theorem-check", "spectrum-mismatch bound verification");
  add_common(theorem);
  auto* sweep = app.add_subcommand("sweep", "anti-collapse protocol x seed grid");
  add_common(sweep);
  auto* report = app.add_subcommand("report", "aggregate per-seed eval reports");
  add_common(report);

  CLI11_PARSE(app, argc, argv);

  try {
    const uwm::ExperimentConfig cfg = load_with_overrides(config_path, seed, seed_set, out_override);
    if (sim->parsed()) {
      uwm::cmd_simulate(cfg);
    } else if (train->parsed()) {
      uwm::cmd_train(cfg);
    } else if (eval->parsed()) {
      uwm::cmd_eval(cfg, checkpoint_path);
    } else if (theorem->parsed()) {
      const auto rep = uwm::cmd_theorem_to_dir(cfg);
      std::cout << rep.dump(1) << "\n";
      if (!rep.at("pass").get<bool>()) return 4;
    } else if (sweep->parsed()) {
      const auto rep = uwm::cmd_sweep(cfg);
      std::cout << rep.at("summary").dump(1) << "\n";
    } else if (report->parsed()) {
      std::cout << uwm::cmd_report(cfg).dump(1) << "\n";
    }
  } catch (const uwm::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const uwm::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const uwm::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  } catch (const uwm::ContractViolation& e) {
    std::cerr << "contract violation: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
