#pragma once

#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "uwm/errors.hpp"
#include "uwm/springworld.hpp"
#include "uwm/trainer.hpp"

namespace uwm {

// Schema-versioned experiment configuration. Parsing is strict: unknown keys
// anywhere in the document are rejected before any work happens.
struct ExperimentConfig {
  std::string out_dir = "runs/exp";
  std::vector<std::uint64_t> seeds{1, 2, 3};

  SimParams env;
  DatasetConfig data;

  std::string model_kind = "uwm";
  bool action_conditioned = false;
  std::string predictor = "unitary";  // unitary | mlp_plain | mlp_residual
  int d_sys = 8, d_env = 2;
  int latent = 16, meas_hidden = 32, head_hidden = 32, pred_hidden = 24;
  int mlp_window = 1;
  int hidden_override = 0;  // vector models; 0 solves for parameter match

  TrainConfig train;

  std::vector<int> horizons{1, 3, 5, 10, 20};
  int retrieval_pool = 500;
  double ridge = 1e-3;
  std::vector<std::string> indicator_conditions{"correct", "no_action", "shuffled", "wrong"};
  std::vector<std::string> hs_conditions{"correct", "reversed", "base", "wrong", "shuffled", "negated"};
  int hs_max_samples = 200;

  // theorem-check settings
  int theorem_pairs = 100;
  int oracle_dim = 8;
  int oracle_trials = 64;
  int oracle_steps = 500;
};

namespace detail {

inline void expect_keys(const nlohmann::json& j, const std::string& where,
                        const std::set<std::string>& allowed) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key()))
      throw ConfigError(where + ": unknown key '" + it.key() + "'");
}

template <typename T>
void get_if(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  using detail::expect_keys;
  using detail::get_if;
  expect_keys(j, "config",
              {"schema_version", "out_dir", "seeds", "env", "data", "model", "train", "eval",
               "theorem"});
  if (!j.contains("schema_version") || j.at("schema_version").get<int>() != 1)
    throw ConfigError("config: schema_version must be 1");

  ExperimentConfig c;
  get_if(j, "out_dir", c.out_dir);
  get_if(j, "seeds", c.seeds);
  if (c.seeds.empty()) throw ConfigError("config: seeds must be non-empty");

  if (j.contains("env")) {
    const auto& e = j.at("env");
    expect_keys(e, "env", {"omega", "dt", "force", "noise_sigma", "episode_steps", "obs_stride",
                           "init_scale", "action_policy", "switch_prob"});
    get_if(e, "omega", c.env.omega);
    get_if(e, "dt", c.env.dt);
    get_if(e, "force", c.env.force);
    get_if(e, "noise_sigma", c.env.noise_sigma);
    get_if(e, "episode_steps", c.env.episode_steps);
    get_if(e, "obs_stride", c.env.obs_stride);
    get_if(e, "init_scale", c.env.init_scale);
    get_if(e, "action_policy", c.env.action_policy);
    get_if(e, "switch_prob", c.env.switch_prob);
  }
  if (c.env.obs_stride < 1) throw ConfigError("env.obs_stride must be >= 1");
  if (c.env.episode_steps < 2) throw ConfigError("env.episode_steps must be >= 2");
  if (c.env.noise_sigma < 0) throw ConfigError("env.noise_sigma must be >= 0");
  if (c.env.action_policy != "uniform" && c.env.action_policy != "zero" &&
      c.env.action_policy != "persistent")
    throw ConfigError("env.action_policy must be 'uniform', 'persistent', or 'zero'");
  if (c.env.switch_prob < 0.0 || c.env.switch_prob > 1.0)
    throw ConfigError("env.switch_prob must be in [0,1]");

  if (j.contains("data")) {
    const auto& d = j.at("data");
    expect_keys(d, "data",
                {"n_train", "n_probe", "n_eval", "anchors_per_episode", "t_min", "t_max",
                 "indicator_k", "indicator_eval_size", "indicator_train_per_episode"});
    get_if(d, "n_train", c.data.n_train);
    get_if(d, "n_probe", c.data.n_probe);
    get_if(d, "n_eval", c.data.n_eval);
    get_if(d, "anchors_per_episode", c.data.anchors_per_episode);
    get_if(d, "t_min", c.data.t_min);
    get_if(d, "t_max", c.data.t_max);
    get_if(d, "indicator_k", c.data.indicator_k);
    get_if(d, "indicator_eval_size", c.data.indicator_eval_size);
    get_if(d, "indicator_train_per_episode", c.data.indicator_train_per_episode);
  }

  if (j.contains("model")) {
    const auto& m = j.at("model");
    expect_keys(m, "model",
                {"kind", "action_conditioned", "predictor", "d_sys", "d_env", "latent",
                 "meas_hidden", "head_hidden", "pred_hidden", "mlp_window", "hidden_override"});
    get_if(m, "kind", c.model_kind);
    get_if(m, "action_conditioned", c.action_conditioned);
    get_if(m, "predictor", c.predictor);
    get_if(m, "d_sys", c.d_sys);
    get_if(m, "d_env", c.d_env);
    get_if(m, "latent", c.latent);
    get_if(m, "meas_hidden", c.meas_hidden);
    get_if(m, "head_hidden", c.head_hidden);
    get_if(m, "pred_hidden", c.pred_hidden);
    get_if(m, "mlp_window", c.mlp_window);
    get_if(m, "hidden_override", c.hidden_override);
  }
  model_kind_from(c.model_kind);  // validates
  if (c.predictor != "unitary" && c.predictor != "mlp_plain" && c.predictor != "mlp_residual")
    throw ConfigError("model.predictor must be unitary | mlp_plain | mlp_residual");
  if (c.model_kind == "uwm" && c.predictor != "unitary")
    throw ConfigError("uwm uses the unitary predictor");
  if (c.model_kind != "uwm" && c.predictor == "unitary")
    throw ConfigError("vector models need an mlp predictor");
  if (c.d_sys < 1 || c.d_env < 1 || c.d_sys * c.d_env > 64)
    throw ConfigError("model dims out of range (d_total must be <= 64)");

  if (j.contains("train")) {
    const auto& t = j.at("train");
    expect_keys(t, "train",
                {"horizon", "target_mode", "protocol", "lr", "tau", "steps", "batch",
                 "reg_weight", "temperature", "t_min", "t_max", "log_every", "checkpoint_every"});
    get_if(t, "horizon", c.train.horizon);
    std::string mode = target_mode_name(c.train.mode);
    get_if(t, "target_mode", mode);
    c.train.mode = target_mode_from(mode);
    std::string proto = protocol_name(c.train.protocol);
    get_if(t, "protocol", proto);
    c.train.protocol = protocol_from(proto);
    get_if(t, "lr", c.train.lr);
    get_if(t, "tau", c.train.tau);
    get_if(t, "steps", c.train.steps);
    get_if(t, "batch", c.train.batch);
    get_if(t, "reg_weight", c.train.reg_weight);
    get_if(t, "temperature", c.train.temperature);
    get_if(t, "t_min", c.train.t_min);
    get_if(t, "t_max", c.train.t_max);
    get_if(t, "log_every", c.train.log_every);
    get_if(t, "checkpoint_every", c.train.checkpoint_every);
  }
  if (c.train.horizon < 1) throw ConfigError("train.horizon must be >= 1");
  if (c.train.steps < 1 || c.train.batch < 2) throw ConfigError("train.steps/batch out of range");
  if (c.train.tau < 0.0 || c.train.tau >= 1.0) throw ConfigError("train.tau must be in [0,1)");

  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    expect_keys(e, "eval",
                {"horizons", "retrieval_pool", "ridge", "indicator_conditions", "hs_conditions",
                 "hs_max_samples"});
    get_if(e, "horizons", c.horizons);
    get_if(e, "retrieval_pool", c.retrieval_pool);
    get_if(e, "ridge", c.ridge);
    get_if(e, "indicator_conditions", c.indicator_conditions);
    get_if(e, "hs_conditions", c.hs_conditions);
    get_if(e, "hs_max_samples", c.hs_max_samples);
  }

  if (j.contains("theorem")) {
    const auto& t = j.at("theorem");
    expect_keys(t, "theorem", {"pairs", "oracle_dim", "oracle_trials", "oracle_steps"});
    get_if(t, "pairs", c.theorem_pairs);
    get_if(t, "oracle_dim", c.oracle_dim);
    get_if(t, "oracle_trials", c.oracle_trials);
    get_if(t, "oracle_steps", c.oracle_steps);
  }
  if (c.oracle_dim > 8) throw ConfigError("theorem.oracle_dim must be <= 8");
  return c;
}

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["out_dir"] = c.out_dir;
  j["seeds"] = c.seeds;
  j["env"] = {{"omega", c.env.omega},       {"dt", c.env.dt},
              {"force", c.env.force},       {"noise_sigma", c.env.noise_sigma},
              {"episode_steps", c.env.episode_steps}, {"obs_stride", c.env.obs_stride},
              {"init_scale", c.env.init_scale},       {"action_policy", c.env.action_policy},
              {"switch_prob", c.env.switch_prob}};
  j["data"] = {{"n_train", c.data.n_train},
               {"n_probe", c.data.n_probe},
               {"n_eval", c.data.n_eval},
               {"anchors_per_episode", c.data.anchors_per_episode},
               {"t_min", c.data.t_min},
               {"t_max", c.data.t_max},
               {"indicator_k", c.data.indicator_k},
               {"indicator_eval_size", c.data.indicator_eval_size},
               {"indicator_train_per_episode", c.data.indicator_train_per_episode}};
  j["model"] = {{"kind", c.model_kind},
                {"action_conditioned", c.action_conditioned},
                {"predictor", c.predictor},
                {"d_sys", c.d_sys},
                {"d_env", c.d_env},
                {"latent", c.latent},
                {"meas_hidden", c.meas_hidden},
                {"head_hidden", c.head_hidden},
                {"pred_hidden", c.pred_hidden},
                {"mlp_window", c.mlp_window},
                {"hidden_override", c.hidden_override}};
  j["train"] = {{"horizon", c.train.horizon},
                {"target_mode", target_mode_name(c.train.mode)},
                {"protocol", protocol_name(c.train.protocol)},
                {"lr", c.train.lr},
                {"tau", c.train.tau},
                {"steps", c.train.steps},
                {"batch", c.train.batch},
                {"reg_weight", c.train.reg_weight},
                {"temperature", c.train.temperature},
                {"t_min", c.train.t_min},
                {"t_max", c.train.t_max},
                {"log_every", c.train.log_every},
                {"checkpoint_every", c.train.checkpoint_every}};
  j["eval"] = {{"horizons", c.horizons},
               {"retrieval_pool", c.retrieval_pool},
               {"ridge", c.ridge},
               {"indicator_conditions", c.indicator_conditions},
               {"hs_conditions", c.hs_conditions},
               {"hs_max_samples", c.hs_max_samples}};
  j["theorem"] = {{"pairs", c.theorem_pairs},
                  {"oracle_dim", c.oracle_dim},
                  {"oracle_trials", c.oracle_trials},
                  {"oracle_steps", c.oracle_steps}};
  return j;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config: " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const std::exception& e) {
    throw ConfigError("config parse error in " + path + ": " + e.what());
  }
  return config_from_json(j);
}

}  // namespace uwm
