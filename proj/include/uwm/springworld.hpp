#pragma once

#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "uwm/errors.hpp"
#include "uwm/rng.hpp"

namespace uwm {

// Partially observed spring benchmark: noisy position observed every
// obs_stride steps, velocity always hidden, discrete force actions.
// None of the dynamics constants come from a published source; they are
// lab defaults and every one is overridable in the config.
struct SimParams {
  double omega = 1.0;
  double dt = 0.1;
  double force = 0.5;
  double noise_sigma = 0.05;
  int episode_steps = 60;
  int obs_stride = 3;
  double init_scale = 0.8;  // std of the initial (x, v) draw
  // Logged-episode policy: "zero" for the action-free experiments, "uniform"
  // for iid uniform draws, "persistent" for a run-length policy that redraws
  // with probability switch_prob per step (its continuation is partly
  // inferable from the context, unlike a freshly sampled branch).
  std::string action_policy = "uniform";
  double switch_prob = 0.25;
};

inline const std::vector<int>& action_alphabet() {
  static const std::vector<int> a{-2, -1, 0, 1, 2};
  return a;
}

struct SimState {
  double x = 0.0;
  double v = 0.0;
  int t = 0;
};

// Symplectic Euler with additive action force.
inline SimState step(const SimState& s, int a, const SimParams& p) {
  SimState n;
  n.v = s.v + p.dt * (-p.omega * p.omega * s.x + p.force * static_cast<double>(a));
  n.x = s.x + p.dt * n.v;
  n.t = s.t + 1;
  return n;
}

inline double observe(const SimState& s, double noise_sigma, Rng& rng) {
  if (noise_sigma < 0.0) throw ContractViolation("observe: negative noise_sigma");
  return s.x + noise_sigma * (noise_sigma > 0.0 ? rng.gaussian() : 0.0);
}

// Counter-based variant: the noise at (episode, step) is a pure function of
// the keys, so a counterfactual branch that replays the logged actions
// reproduces the logged observations bit for bit.
inline double observe_keyed(const SimState& s, double noise_sigma, std::uint64_t dataset_seed,
                            std::uint64_t episode_id, int t) {
  if (noise_sigma < 0.0) throw ContractViolation("observe: negative noise_sigma");
  if (noise_sigma == 0.0) return s.x;
  return s.x + noise_sigma * keyed_gaussian(dataset_seed, episode_id, static_cast<std::uint64_t>(t));
}

struct Episode {
  std::uint64_t id = 0;
  int stride = 3;
  std::vector<double> xs, vs;       // states at t = 0 .. T-1
  std::vector<int> actions;         // actions[t] drives t -> t+1 (length T-1)
  std::vector<double> obs;          // defined where obs_mask[t] != 0
  std::vector<std::uint8_t> obs_mask;

  int steps() const { return static_cast<int>(xs.size()); }
  SimState state_at(int t) const { return SimState{xs[static_cast<std::size_t>(t)], vs[static_cast<std::size_t>(t)], t}; }
};

inline Episode simulate_episode(const SimParams& p, std::uint64_t dataset_seed,
                                std::uint64_t episode_id) {
  Rng rng(mix64(dataset_seed, episode_id, 0x45505349ull));  // per-episode stream
  Episode e;
  e.id = episode_id;
  e.stride = p.obs_stride;
  SimState s;
  s.x = p.init_scale * rng.gaussian();
  s.v = p.init_scale * rng.gaussian();
  s.t = 0;
  const int T = p.episode_steps;
  e.xs.reserve(static_cast<std::size_t>(T));
  e.vs.reserve(static_cast<std::size_t>(T));
  e.obs.assign(static_cast<std::size_t>(T), 0.0);
  e.obs_mask.assign(static_cast<std::size_t>(T), 0);
  int cur = 0;
  bool cur_drawn = false;
  for (int t = 0; t < T; ++t) {
    e.xs.push_back(s.x);
    e.vs.push_back(s.v);
    if (t % p.obs_stride == 0) {
      e.obs[static_cast<std::size_t>(t)] = observe_keyed(s, p.noise_sigma, dataset_seed, episode_id, t);
      e.obs_mask[static_cast<std::size_t>(t)] = 1;
    }
    if (t + 1 < T) {
      int a = 0;
      if (p.action_policy == "uniform") {
        a = action_alphabet()[static_cast<std::size_t>(rng.below(action_alphabet().size()))];
      } else if (p.action_policy == "persistent") {
        if (!cur_drawn) {
          cur = action_alphabet()[static_cast<std::size_t>(rng.below(action_alphabet().size()))];
          cur_drawn = true;
        }
        if (rng.uniform() < p.switch_prob)
          cur = action_alphabet()[static_cast<std::size_t>(rng.below(action_alphabet().size()))];
        a = cur;
      } else if (p.action_policy != "zero") {
        throw ConfigError("unknown action_policy '" + p.action_policy + "'");
      }
      e.actions.push_back(a);
      s = step(s, a, p);
    }
  }
  return e;
}

// Simulator branch advanced from an internal state under the given actions.
// Emits the states after each action and the strided observations of the
// branch, with noise drawn from the same keyed stream as the source episode.
struct Branch {
  std::vector<SimState> states;           // states at t0+1 .. t0+len
  std::vector<double> obs;                // aligned with states
  std::vector<std::uint8_t> obs_mask;
};

inline Branch counterfactual_rollout(const SimState& s_t, const std::vector<int>& actions,
                                     const SimParams& p, std::uint64_t dataset_seed,
                                     std::uint64_t episode_id) {
  Branch b;
  SimState s = s_t;
  for (int a : actions) {
    s = step(s, a, p);
    b.states.push_back(s);
    const bool observed = (s.t % p.obs_stride) == 0;
    b.obs_mask.push_back(observed ? 1 : 0);
    b.obs.push_back(observed ? observe_keyed(s, p.noise_sigma, dataset_seed, episode_id, s.t) : 0.0);
  }
  return b;
}

// One sample of the hidden-velocity indicator task: context up to t, the
// next K actions, and the sign of the true velocity at t+K.
struct IndicatorSample {
  int episode_index = 0;   // into the owning split
  int t = 0;
  std::vector<int> actions;  // a_t .. a_{t+K-1}
  int label = 0;             // 1[v_{t+K} > 0]
};

struct Anchor {
  int episode_index = 0;
  int t = 0;
};

struct DatasetConfig {
  int n_train = 192;
  int n_probe = 120;
  int n_eval = 120;
  int anchors_per_episode = 5;
  int t_min = 10;
  int t_max = 39;                  // inclusive; t_max + longest horizon must fit
  int indicator_k = 5;
  int indicator_eval_size = 500;
  int indicator_train_per_episode = 8;
};

struct Dataset {
  SimParams params;
  DatasetConfig cfg;
  std::uint64_t seed = 0;
  std::vector<Episode> train, probe, eval;
  std::vector<Anchor> probe_anchors;  // into probe split
  std::vector<Anchor> eval_anchors;   // into eval split
  std::vector<IndicatorSample> indicator_train;  // episodes from probe split
  std::vector<IndicatorSample> indicator_eval;   // episodes from eval split
  int indicator_label0 = 0, indicator_label1 = 0;  // recorded eval balance
};

namespace detail {

// Distinct anchor times per episode: duplicate contexts would make retrieval
// targets ambiguous and waste probe samples.
inline std::vector<Anchor> pick_anchors(int n_episodes, int per_episode, int t_min, int t_max,
                                        Rng& rng) {
  std::vector<Anchor> out;
  std::vector<int> ts;
  for (int e = 0; e < n_episodes; ++e) {
    ts.clear();
    for (int t = t_min; t <= t_max; ++t) ts.push_back(t);
    rng.shuffle(ts);
    const int take = std::min<int>(per_episode, static_cast<int>(ts.size()));
    for (int k = 0; k < take; ++k) out.push_back(Anchor{e, ts[static_cast<std::size_t>(k)]});
  }
  return out;
}

inline std::vector<IndicatorSample> pick_indicator(const std::vector<Episode>& eps,
                                                   int per_episode, int t_min, int t_max, int K,
                                                   Rng& rng) {
  std::vector<IndicatorSample> out;
  for (int e = 0; e < static_cast<int>(eps.size()); ++e) {
    const Episode& ep = eps[static_cast<std::size_t>(e)];
    for (int k = 0; k < per_episode; ++k) {
      IndicatorSample s;
      s.episode_index = e;
      s.t = rng.uniform_int(t_min, std::min(t_max, ep.steps() - K - 1));
      for (int j = 0; j < K; ++j) s.actions.push_back(ep.actions[static_cast<std::size_t>(s.t + j)]);
      s.label = ep.vs[static_cast<std::size_t>(s.t + K)] > 0.0 ? 1 : 0;
      out.push_back(std::move(s));
    }
  }
  return out;
}

}  // namespace detail

// All randomness is derived from the single seed; trajectory splits are
// disjoint by construction (distinct episode id ranges).
inline Dataset make_datasets(const SimParams& params, const DatasetConfig& cfg,
                             std::uint64_t seed) {
  if (cfg.t_max + 20 >= params.episode_steps)
    throw ConfigError("make_datasets: t_max + horizon 20 exceeds episode length");
  if (cfg.t_min < 1 || cfg.t_min > cfg.t_max) throw ConfigError("make_datasets: bad anchor range");
  if (params.obs_stride < 1) throw ConfigError("make_datasets: obs_stride must be >= 1");

  Dataset d;
  d.params = params;
  d.cfg = cfg;
  d.seed = seed;
  std::uint64_t next_id = 0;
  for (int i = 0; i < cfg.n_train; ++i) d.train.push_back(simulate_episode(params, seed, next_id++));
  for (int i = 0; i < cfg.n_probe; ++i) d.probe.push_back(simulate_episode(params, seed, next_id++));
  for (int i = 0; i < cfg.n_eval; ++i) d.eval.push_back(simulate_episode(params, seed, next_id++));

  Rng anchor_rng(mix64(seed, 0xA12C9055ull));
  d.probe_anchors = detail::pick_anchors(cfg.n_probe, cfg.anchors_per_episode, cfg.t_min, cfg.t_max, anchor_rng);
  d.eval_anchors = detail::pick_anchors(cfg.n_eval, cfg.anchors_per_episode, cfg.t_min, cfg.t_max, anchor_rng);

  Rng ind_rng(mix64(seed, 0x1D1CA70Bull));
  d.indicator_train = detail::pick_indicator(d.probe, cfg.indicator_train_per_episode, cfg.t_min,
                                             cfg.t_max, cfg.indicator_k, ind_rng);
  const int per_eval = (cfg.indicator_eval_size + cfg.n_eval - 1) / cfg.n_eval;
  auto ind_eval = detail::pick_indicator(d.eval, per_eval, cfg.t_min, cfg.t_max, cfg.indicator_k, ind_rng);
  if (static_cast<int>(ind_eval.size()) < cfg.indicator_eval_size)
    throw ConfigError("make_datasets: not enough eval episodes for the indicator set");
  ind_eval.resize(static_cast<std::size_t>(cfg.indicator_eval_size));
  d.indicator_eval = std::move(ind_eval);
  for (const auto& s : d.indicator_eval) (s.label ? d.indicator_label1 : d.indicator_label0)++;
  return d;
}

// ---------------------------------------------------------------------------
// JSON-lines episode files: one episode per line, nulls for masked steps.
// Doubles survive the round trip bit-exactly.
// ---------------------------------------------------------------------------

inline nlohmann::json episode_to_json(const Episode& e) {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["id"] = e.id;
  j["stride"] = e.stride;
  j["xs"] = e.xs;
  j["vs"] = e.vs;
  j["actions"] = e.actions;
  nlohmann::json obs = nlohmann::json::array();
  for (std::size_t t = 0; t < e.obs.size(); ++t) {
    if (e.obs_mask[t])
      obs.push_back(e.obs[t]);
    else
      obs.push_back(nullptr);
  }
  j["obs"] = obs;
  return j;
}

inline Episode episode_from_json(const nlohmann::json& j) {
  if (!j.contains("schema_version") || j["schema_version"].get<int>() != 1)
    throw DataError("episode: unsupported schema_version");
  Episode e;
  e.id = j.at("id").get<std::uint64_t>();
  e.stride = j.at("stride").get<int>();
  e.xs = j.at("xs").get<std::vector<double>>();
  e.vs = j.at("vs").get<std::vector<double>>();
  e.actions = j.at("actions").get<std::vector<int>>();
  for (const auto& o : j.at("obs")) {
    if (o.is_null()) {
      e.obs.push_back(0.0);
      e.obs_mask.push_back(0);
    } else {
      e.obs.push_back(o.get<double>());
      e.obs_mask.push_back(1);
    }
  }
  if (e.xs.size() != e.vs.size() || e.xs.size() != e.obs.size() ||
      e.actions.size() + 1 != e.xs.size())
    throw DataError("episode: inconsistent field lengths for id " + std::to_string(e.id));
  return e;
}

inline void write_episodes_jsonl(const std::string& path, const std::vector<Episode>& eps) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot open for writing: " + path);
  for (const auto& e : eps) f << episode_to_json(e).dump() << "\n";
}

inline std::vector<Episode> read_episodes_jsonl(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open for reading: " + path);
  std::vector<Episode> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    out.push_back(episode_from_json(nlohmann::json::parse(line)));
  }
  return out;
}

}  // namespace uwm
