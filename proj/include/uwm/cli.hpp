#pragma once

#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <atomic>
#include <thread>
#include <vector>

#include <json.hpp>

#include "uwm/config.hpp"
#include "uwm/errors.hpp"
#include "uwm/evalsuite.hpp"
#include "uwm/models.hpp"
#include "uwm/spectral.hpp"
#include "uwm/springworld.hpp"
#include "uwm/trainer.hpp"
#include "uwm/version.hpp"

namespace uwm {

namespace fs = std::filesystem;

inline std::uint64_t dataset_seed_for(std::uint64_t run_seed) {
  return mix64(run_seed, 0x44415441ull);
}

inline int env_thread_count() {
  if (const char* v = std::getenv("UWM_THREADS")) {
    const int n = std::atoi(v);
    if (n >= 1) return n;
  }
  return 1;
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write: " + path);
  f << text;
}

inline void write_resolved_config(const ExperimentConfig& cfg, const std::string& dir) {
  fs::create_directories(dir);
  nlohmann::json j = config_to_json(cfg);
  j["code_version"] = kCodeVersion;
  write_text((fs::path(dir) / "resolved_config.json").string(), j.dump(1) + "\n");
}

inline void write_csv(const std::string& path, const std::string& header,
                      const std::vector<std::string>& rows) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write: " + path);
  f << header << "\n";
  for (const auto& r : rows) f << r << "\n";
}

// ---------------------------------------------------------------------------
// Model construction from config / checkpoint meta.
// ---------------------------------------------------------------------------

struct BuiltModel {
  std::unique_ptr<JepaModel> model;
  diff::ParamStore theta, xi;
  nlohmann::json meta;
};

inline std::size_t uwm_count_for(const ExperimentConfig& cfg) {
  diff::ParamStore scratch;
  Rng r(1);
  UwmConfig uc;
  uc.dims = LatentDims{cfg.d_sys, cfg.d_env};
  uc.action_conditioned = cfg.action_conditioned;
  uc.meas_hidden = cfg.meas_hidden;
  uc.head_hidden = cfg.head_hidden;
  uc.latent = cfg.latent;
  UwmModel m(uc, scratch, r);
  return m.trainable_count(scratch);
}

inline BuiltModel build_model(const ExperimentConfig& cfg, std::uint64_t run_seed) {
  BuiltModel bm;
  Rng init_rng(mix64(run_seed, 0x4D4F444Cull));
  const ModelKind kind = model_kind_from(cfg.model_kind);
  int resolved_hidden = 0;
  if (kind == ModelKind::Uwm) {
    UwmConfig uc;
    uc.dims = LatentDims{cfg.d_sys, cfg.d_env};
    uc.action_conditioned = cfg.action_conditioned;
    uc.meas_hidden = cfg.meas_hidden;
    uc.head_hidden = cfg.head_hidden;
    uc.latent = cfg.latent;
    bm.model = std::make_unique<UwmModel>(uc, bm.theta, init_rng);
  } else {
    VectorConfig vc;
    vc.kind = kind;
    vc.predictor = cfg.predictor == "mlp_plain" ? PredictorKind::MlpPlain : PredictorKind::MlpResidual;
    vc.actions_in_input = cfg.action_conditioned;
    vc.hidden = cfg.hidden_override;
    vc.latent = cfg.latent;
    vc.head_hidden = cfg.head_hidden;
    vc.pred_hidden = cfg.pred_hidden;
    vc.mlp_window = cfg.mlp_window;
    if (vc.hidden == 0) vc.match_target = uwm_count_for(cfg);
    auto vm = std::make_unique<VectorModel>(vc, bm.theta, init_rng);
    resolved_hidden = vm->config().hidden;
    bm.model = std::move(vm);
  }
  bm.xi = bm.theta;
  bm.meta = config_to_json(cfg);
  bm.meta["run_seed"] = run_seed;
  bm.meta["resolved_hidden"] = resolved_hidden;
  bm.meta["param_count"] = bm.model->trainable_count(bm.theta);
  return bm;
}

inline BuiltModel build_from_checkpoint(const std::string& path) {
  const Checkpoint ck = read_checkpoint(path);
  ExperimentConfig cfg = config_from_json([&] {
    nlohmann::json j = ck.meta;
    j.erase("run_seed");
    j.erase("resolved_hidden");
    j.erase("param_count");
    j.erase("code_version");
    return j;
  }());
  if (ck.meta.contains("resolved_hidden") && ck.meta["resolved_hidden"].get<int>() > 0 &&
      cfg.hidden_override == 0)
    cfg.hidden_override = ck.meta["resolved_hidden"].get<int>();
  BuiltModel bm = build_model(cfg, ck.meta.at("run_seed").get<std::uint64_t>());
  load_param_store(ck.theta, bm.theta);
  load_param_store(ck.xi, bm.xi);
  bm.model->post_optimizer_step(bm.theta);
  bm.meta = ck.meta;
  return bm;
}

inline Dataset dataset_for_run(const ExperimentConfig& cfg, std::uint64_t run_seed) {
  return make_datasets(cfg.env, cfg.data, dataset_seed_for(run_seed));
}

// ---------------------------------------------------------------------------
// simulate: write the dataset splits as JSON-lines plus the indicator sets.
// ---------------------------------------------------------------------------

inline nlohmann::json indicator_sample_json(const IndicatorSample& s) {
  return nlohmann::json{{"episode_index", s.episode_index},
                        {"t", s.t},
                        {"actions", s.actions},
                        {"label", s.label}};
}

inline void cmd_simulate(const ExperimentConfig& cfg) {
  write_resolved_config(cfg, cfg.out_dir);
  for (std::uint64_t seed : cfg.seeds) {
    const Dataset d = dataset_for_run(cfg, seed);
    const fs::path dir = fs::path(cfg.out_dir) / ("data_seed_" + std::to_string(seed));
    fs::create_directories(dir);
    write_episodes_jsonl((dir / "train.jsonl").string(), d.train);
    write_episodes_jsonl((dir / "probe.jsonl").string(), d.probe);
    write_episodes_jsonl((dir / "eval.jsonl").string(), d.eval);
    {
      std::ofstream f((dir / "indicator_eval.jsonl").string());
      for (const auto& s : d.indicator_eval) f << indicator_sample_json(s).dump() << "\n";
    }
    {
      std::ofstream f((dir / "indicator_train.jsonl").string());
      for (const auto& s : d.indicator_train) f << indicator_sample_json(s).dump() << "\n";
    }
    nlohmann::json meta{{"code_version", kCodeVersion},
                        {"seed", seed},
                        {"dataset_seed", dataset_seed_for(seed)},
                        {"indicator_label0", d.indicator_label0},
                        {"indicator_label1", d.indicator_label1}};
    write_text((dir / "meta.json").string(), meta.dump(1) + "\n");
  }
}

// ---------------------------------------------------------------------------
// train: one run directory per seed, each with metrics.jsonl + checkpoint.
// ---------------------------------------------------------------------------

inline std::vector<RunPaths> cmd_train(const ExperimentConfig& cfg) {
  write_resolved_config(cfg, cfg.out_dir);
  std::vector<RunPaths> out;
  for (std::uint64_t seed : cfg.seeds) {
    const Dataset data = dataset_for_run(cfg, seed);
    BuiltModel bm = build_model(cfg, seed);
    TrainConfig tc = cfg.train;
    tc.seed = seed;
    RunPaths rp = run_experiment(*bm.model, bm.theta, bm.xi, data, tc, bm.meta, cfg.out_dir,
                                 "seed_" + std::to_string(seed));
    nlohmann::json run_meta{{"code_version", kCodeVersion}, {"seed", seed}};
    write_text((fs::path(rp.dir) / "run_meta.json").string(), run_meta.dump(1) + "\n");
    out.push_back(rp);
  }
  return out;
}

// ---------------------------------------------------------------------------
// eval: full measurement battery for one checkpoint.
// ---------------------------------------------------------------------------

inline nlohmann::json cmd_eval_checkpoint(const std::string& checkpoint_path,
                                          const std::string& out_dir) {
  if (!fs::exists(checkpoint_path))
    throw DataError("checkpoint not found: " + checkpoint_path +
                    " (run the train command first, or pass --checkpoint)");
  BuiltModel bm = build_from_checkpoint(checkpoint_path);
  ExperimentConfig cfg = config_from_json([&] {
    nlohmann::json j = bm.meta;
    j.erase("run_seed");
    j.erase("resolved_hidden");
    j.erase("param_count");
    j.erase("code_version");
    return j;
  }());
  const std::uint64_t run_seed = bm.meta.at("run_seed").get<std::uint64_t>();
  const Dataset data = dataset_for_run(cfg, run_seed);
  const ModelHandle h{bm.model.get(), &bm.theta, &bm.xi};

  fs::create_directories(out_dir);
  nlohmann::json rep;
  rep["code_version"] = kCodeVersion;
  rep["model_kind"] = cfg.model_kind;
  rep["seed"] = run_seed;
  rep["param_count"] = bm.model->trainable_count(bm.theta);

  const ContextProbeResult cp = context_probe(h, data, cfg.ridge);
  rep["context_probe"] = {{"r2", cp.r2}, {"effective_rank", cp.effective_rank}};
  const CollapseOutcome col = collapse_entry(h, data);
  rep["collapse"] = {{"probe_r2", col.probe_r2}, {"effective_rank", col.eff_rank}, {"pass", col.pass}};

  std::vector<std::string> csv_rows;
  if (!bm.model->action_conditioned()) {
    const auto rows = delta_r2(h, data, cfg.horizons, cfg.ridge);
    nlohmann::json jr = nlohmann::json::array();
    for (const auto& r : rows) {
      jr.push_back({{"k", r.k}, {"teacher", r.teacher}, {"blind", r.blind}, {"delta", r.delta}});
      csv_rows.push_back(std::to_string(r.k) + "," + std::to_string(r.teacher) + "," +
                         std::to_string(r.blind) + "," + std::to_string(r.delta));
    }
    rep["delta_r2"] = jr;
    write_csv((fs::path(out_dir) / "delta_r2.csv").string(), "k,teacher,blind,delta", csv_rows);

    const int pool = std::min<int>(cfg.retrieval_pool, static_cast<int>(data.eval_anchors.size()));
    const auto ret = retrieval_top1(h, data, cfg.horizons, pool);
    nlohmann::json jt = nlohmann::json::array();
    csv_rows.clear();
    for (const auto& r : ret) {
      jt.push_back({{"k", r.k}, {"top1", r.top1}});
      csv_rows.push_back(std::to_string(r.k) + "," + std::to_string(r.top1));
    }
    rep["retrieval"] = jt;
    rep["retrieval_pool"] = pool;
    write_csv((fs::path(out_dir) / "retrieval.csv").string(), "k,top1", csv_rows);
  } else {
    const IndicatorOutcome ind =
        indicator_battery(h, data, cfg.indicator_conditions, mix64(run_seed, 0x494E44ull), cfg.ridge);
    nlohmann::json ji;
    csv_rows.clear();
    for (const auto& [cond, acc] : ind.accuracy) {
      ji[cond] = {{"accuracy", acc},
                  {"pred0", ind.histogram.at(cond).first},
                  {"pred1", ind.histogram.at(cond).second}};
      csv_rows.push_back(cond + "," + std::to_string(acc) + "," +
                         std::to_string(ind.histogram.at(cond).first) + "," +
                         std::to_string(ind.histogram.at(cond).second));
    }
    rep["indicator"] = ji;
    rep["indicator_prior"] = ind.prior;
    rep["indicator_permuted_labels"] = ind.permuted_label_accuracy;
    write_csv((fs::path(out_dir) / "indicator.csv").string(), "condition,accuracy,pred0,pred1",
              csv_rows);

    if (auto* uwm = dynamic_cast<UwmModel*>(bm.model.get())) {
      const HsControlsOutcome hs = action_hs_controls(h, data, cfg.hs_conditions,
                                                      mix64(run_seed, 0x4853ull), cfg.hs_max_samples);
      nlohmann::json jh;
      csv_rows.clear();
      for (const auto& [cond, d] : hs.mean_distance) {
        jh[cond] = d;
        csv_rows.push_back(cond + "," + std::to_string(d));
      }
      rep["hs_controls"] = jh;
      write_csv((fs::path(out_dir) / "hs_controls.csv").string(), "condition,mean_distance",
                csv_rows);
      rep["h1_h0_ratio"] = uwm->h1_h0_ratio(bm.theta);
      rep["commutator"] = uwm->commutator_diag(bm.theta);
    }
  }
  write_text((fs::path(out_dir) / "report.json").string(), rep.dump(1) + "\n");
  return rep;
}

// Evaluate every seed_*/checkpoint.json under the config's out_dir.
inline std::vector<nlohmann::json> cmd_eval(const ExperimentConfig& cfg,
                                            const std::string& checkpoint_override = "") {
  std::vector<nlohmann::json> reports;
  if (!checkpoint_override.empty()) {
    reports.push_back(cmd_eval_checkpoint(checkpoint_override,
                                          fs::path(checkpoint_override).parent_path().string()));
    return reports;
  }
  for (std::uint64_t seed : cfg.seeds) {
    const fs::path dir = fs::path(cfg.out_dir) / ("seed_" + std::to_string(seed));
    reports.push_back(cmd_eval_checkpoint((dir / "checkpoint.json").string(), dir.string()));
  }
  return reports;
}

// ---------------------------------------------------------------------------
// theorem-check: spectrum-mismatch bound, orbit projection, brute-force
// oracle; emits a JSON report of bounds, achieved distances, oracle gaps.
// ---------------------------------------------------------------------------

inline nlohmann::json cmd_theorem(const ExperimentConfig& cfg) {
  Rng rng(mix64(cfg.seeds[0], 0x5448454Full));
  const int d = cfg.d_sys * cfg.d_env;
  nlohmann::json rep;
  rep["code_version"] = kCodeVersion;
  rep["dim"] = d;
  rep["pairs"] = cfg.theorem_pairs;

  double max_achieved_gap = 0.0, max_proj_bound = 0.0;
  int bound_violations = 0;
  for (int i = 0; i < cfg.theorem_pairs; ++i) {
    const DensityMatrix rho = random_density(d, rng);
    const DensityMatrix sigma = random_density(d, rng);
    const OrbitGap g = spectrum_mismatch(rho, sigma);
    const double achieved =
        hs_distance_sq(conj_unitary_sym(g.aligning_unitary, rho.matrix()), sigma.matrix());
    max_achieved_gap = std::max(max_achieved_gap, std::abs(achieved - g.bound));
    if (achieved < g.bound - 1e-8) ++bound_violations;
    max_proj_bound = std::max(max_proj_bound, spectrum_mismatch(rho, orbit_project_target(rho, sigma)).bound);
  }
  rep["max_achieved_minus_bound"] = max_achieved_gap;
  rep["max_orbit_projected_bound"] = max_proj_bound;
  rep["bound_violations"] = bound_violations;

  // oracle on a reduced dimension
  nlohmann::json oracle = nlohmann::json::array();
  double max_below = 0.0, max_above = 0.0;
  for (int i = 0; i < 3; ++i) {
    const DensityMatrix rho = random_density(cfg.oracle_dim, rng);
    DensityMatrix sigma = i == 0 ? DensityMatrix{conj_unitary_sym(random_unitary(cfg.oracle_dim, rng),
                                                                  rho.matrix())}
                                 : random_density(cfg.oracle_dim, rng);
    const OrbitGap g = spectrum_mismatch(rho, sigma);
    const double best = brute_force_orbit_min(rho, sigma, cfg.oracle_trials, cfg.oracle_steps, rng);
    oracle.push_back({{"bound", g.bound}, {"oracle_min", best}, {"gap", best - g.bound}});
    max_below = std::max(max_below, g.bound - best);
    max_above = std::max(max_above, best - g.bound);
  }
  rep["oracle"] = oracle;
  rep["oracle_max_below_bound"] = max_below;
  rep["oracle_max_above_bound"] = max_above;
  rep["pass"] = bound_violations == 0 && max_achieved_gap <= 1e-8 && max_proj_bound <= 1e-10 &&
                max_below <= 1e-6 && max_above <= 1e-3;
  return rep;
}

inline nlohmann::json cmd_theorem_to_dir(const ExperimentConfig& cfg) {
  write_resolved_config(cfg, cfg.out_dir);
  const nlohmann::json rep = cmd_theorem(cfg);
  write_text((fs::path(cfg.out_dir) / "theorem_report.json").string(), rep.dump(1) + "\n");
  return rep;
}

// ---------------------------------------------------------------------------
// sweep: anti-collapse grid (six protocols x seeds), each cell trained and
// probed; emits the protocol x seed matrix plus per-protocol mean/std.
// ---------------------------------------------------------------------------

struct SweepCell {
  std::string protocol;
  std::uint64_t seed = 0;
  double probe_r2 = 0.0;
  double eff_rank = 0.0;
  bool pass = false;
};

inline SweepCell run_sweep_cell(const ExperimentConfig& base, Protocol proto, std::uint64_t seed) {
  ExperimentConfig cfg = base;
  cfg.train.protocol = proto;
  cfg.train.seed = seed;
  const Dataset data = dataset_for_run(cfg, seed);
  BuiltModel bm = build_model(cfg, seed);
  TrainConfig tc = cfg.train;
  tc.seed = seed;
  JepaTrainer trainer(*bm.model, bm.theta, bm.xi, data, tc);
  for (int s = 0; s < tc.steps; ++s) trainer.step_once();
  const ModelHandle h{bm.model.get(), &bm.theta, &bm.xi};
  const CollapseOutcome c = collapse_entry(h, data);
  SweepCell cell;
  cell.protocol = protocol_name(proto);
  cell.seed = seed;
  cell.probe_r2 = c.probe_r2;
  cell.eff_rank = c.eff_rank;
  cell.pass = c.pass;
  return cell;
}

inline nlohmann::json cmd_sweep(const ExperimentConfig& cfg) {
  write_resolved_config(cfg, cfg.out_dir);
  const std::vector<Protocol> protos{Protocol::None,      Protocol::Contrastive,
                                     Protocol::EmaOnly,   Protocol::EmaVicreg,
                                     Protocol::EmaBarlow, Protocol::EmaLogdet};
  std::vector<SweepCell> cells(protos.size() * cfg.seeds.size());
  std::vector<std::pair<int, std::pair<Protocol, std::uint64_t>>> jobs;
  for (std::size_t p = 0; p < protos.size(); ++p)
    for (std::size_t s = 0; s < cfg.seeds.size(); ++s)
      jobs.push_back({static_cast<int>(p * cfg.seeds.size() + s), {protos[p], cfg.seeds[s]}});

  const int n_threads = std::min<int>(env_thread_count(), static_cast<int>(jobs.size()));
  if (n_threads <= 1) {
    for (const auto& [slot, job] : jobs)
      cells[static_cast<std::size_t>(slot)] = run_sweep_cell(cfg, job.first, job.second);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (int t = 0; t < n_threads; ++t)
      pool.emplace_back([&] {
        for (;;) {
          const std::size_t i = next.fetch_add(1);
          if (i >= jobs.size()) return;
          cells[static_cast<std::size_t>(jobs[i].first)] =
              run_sweep_cell(cfg, jobs[i].second.first, jobs[i].second.second);
        }
      });
    for (auto& th : pool) th.join();
  }

  nlohmann::json rep;
  rep["code_version"] = kCodeVersion;
  nlohmann::json jcells = nlohmann::json::array();
  std::vector<std::string> csv_rows;
  bool all_pass = true;
  for (const auto& c : cells) {
    jcells.push_back({{"protocol", c.protocol},
                      {"seed", c.seed},
                      {"probe_r2", c.probe_r2},
                      {"effective_rank", c.eff_rank},
                      {"pass", c.pass}});
    csv_rows.push_back(c.protocol + "," + std::to_string(c.seed) + "," + std::to_string(c.probe_r2) +
                       "," + std::to_string(c.eff_rank) + "," + (c.pass ? "1" : "0"));
    all_pass = all_pass && c.pass;
  }
  rep["cells"] = jcells;
  nlohmann::json summary = nlohmann::json::array();
  for (std::size_t p = 0; p < protos.size(); ++p) {
    std::vector<double> r2s;
    for (std::size_t s = 0; s < cfg.seeds.size(); ++s)
      r2s.push_back(cells[p * cfg.seeds.size() + s].probe_r2);
    const SeedStats st = seed_stats(r2s);
    summary.push_back({{"protocol", protocol_name(protos[p])},
                       {"mean", st.mean},
                       {"std", st.stddev},
                       {"seeds", st.n}});
  }
  rep["summary"] = summary;
  rep["all_pass"] = all_pass;
  write_csv((fs::path(cfg.out_dir) / "sweep.csv").string(), "protocol,seed,probe_r2,effective_rank,pass",
            csv_rows);
  write_text((fs::path(cfg.out_dir) / "sweep.json").string(), rep.dump(1) + "\n");
  return rep;
}

// ---------------------------------------------------------------------------
// report: aggregate per-seed eval reports under out_dir into seed statistics.
// ---------------------------------------------------------------------------

inline nlohmann::json cmd_report(const ExperimentConfig& cfg) {
  std::vector<nlohmann::json> reports;
  for (std::uint64_t seed : cfg.seeds) {
    const fs::path p = fs::path(cfg.out_dir) / ("seed_" + std::to_string(seed)) / "report.json";
    if (!fs::exists(p)) throw DataError("missing eval report: " + p.string() + " (run eval first)");
    std::ifstream f(p.string());
    nlohmann::json j;
    f >> j;
    reports.push_back(std::move(j));
  }
  nlohmann::json out;
  out["code_version"] = kCodeVersion;
  out["n_seeds"] = reports.size();
  auto collect = [&](auto getter) {
    std::vector<double> xs;
    for (const auto& r : reports) xs.push_back(getter(r));
    return xs;
  };
  {
    const auto xs = collect([](const nlohmann::json& r) {
      return r.at("context_probe").at("r2").get<double>();
    });
    const SeedStats st = seed_stats(xs);
    out["context_probe_r2"] = {{"mean", st.mean}, {"std", st.stddev}, {"values", xs}};
  }
  if (reports[0].contains("delta_r2")) {
    nlohmann::json per_k = nlohmann::json::array();
    const auto& first = reports[0].at("delta_r2");
    for (std::size_t i = 0; i < first.size(); ++i) {
      std::vector<double> deltas, teachers, blinds;
      for (const auto& r : reports) {
        deltas.push_back(r.at("delta_r2")[i].at("delta").get<double>());
        teachers.push_back(r.at("delta_r2")[i].at("teacher").get<double>());
        blinds.push_back(r.at("delta_r2")[i].at("blind").get<double>());
      }
      per_k.push_back({{"k", first[i].at("k")},
                       {"delta_mean", seed_stats(deltas).mean},
                       {"delta_std", seed_stats(deltas).stddev},
                       {"teacher_mean", seed_stats(teachers).mean},
                       {"blind_mean", seed_stats(blinds).mean}});
    }
    out["delta_r2"] = per_k;
  }
  if (reports[0].contains("indicator")) {
    nlohmann::json per_cond;
    for (auto it = reports[0].at("indicator").begin(); it != reports[0].at("indicator").end(); ++it) {
      std::vector<double> accs;
      for (const auto& r : reports) accs.push_back(r.at("indicator").at(it.key()).at("accuracy").get<double>());
      const SeedStats st = seed_stats(accs);
      per_cond[it.key()] = {{"mean", st.mean}, {"std", st.stddev}};
    }
    out["indicator"] = per_cond;
  }
  if (reports[0].contains("hs_controls")) {
    nlohmann::json per_cond;
    for (auto it = reports[0].at("hs_controls").begin(); it != reports[0].at("hs_controls").end(); ++it) {
      std::vector<double> ds;
      for (const auto& r : reports) ds.push_back(r.at("hs_controls").at(it.key()).get<double>());
      const SeedStats st = seed_stats(ds);
      per_cond[it.key()] = {{"mean", st.mean}, {"std", st.stddev}};
    }
    out["hs_controls"] = per_cond;
  }
  if (reports[0].contains("h1_h0_ratio")) {
    const auto xs = collect([](const nlohmann::json& r) { return r.at("h1_h0_ratio").get<double>(); });
    const SeedStats st = seed_stats(xs);
    out["h1_h0_ratio"] = {{"mean", st.mean}, {"std", st.stddev}, {"values", xs}};
  }
  write_text((fs::path(cfg.out_dir) / "summary.json").string(), out.dump(1) + "\n");
  return out;
}

}  // namespace uwm
