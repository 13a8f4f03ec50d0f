#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "uwm/diffcore.hpp"
#include "uwm/errors.hpp"
#include "uwm/models.hpp"
#include "uwm/rng.hpp"
#include "uwm/springworld.hpp"

namespace uwm {

enum class TargetMode { TeacherForced, Counterfactual };
enum class Protocol { None, Contrastive, EmaOnly, EmaVicreg, EmaBarlow, EmaLogdet };

inline std::string target_mode_name(TargetMode m) {
  return m == TargetMode::TeacherForced ? "teacher_forced" : "counterfactual";
}
inline TargetMode target_mode_from(const std::string& s) {
  if (s == "teacher_forced") return TargetMode::TeacherForced;
  if (s == "counterfactual") return TargetMode::Counterfactual;
  throw ConfigError("unknown target_mode '" + s + "'");
}

inline std::string protocol_name(Protocol p) {
  switch (p) {
    case Protocol::None: return "none";
    case Protocol::Contrastive: return "contrastive";
    case Protocol::EmaOnly: return "ema_only";
    case Protocol::EmaVicreg: return "ema_vicreg";
    case Protocol::EmaBarlow: return "ema_barlow";
    default: return "ema_logdet";
  }
}
inline Protocol protocol_from(const std::string& s) {
  for (Protocol p : {Protocol::None, Protocol::Contrastive, Protocol::EmaOnly,
                     Protocol::EmaVicreg, Protocol::EmaBarlow, Protocol::EmaLogdet})
    if (protocol_name(p) == s) return p;
  throw ConfigError("unknown protocol '" + s + "'");
}

// Protocols without the ema_ prefix use a stop-gradient copy of the online
// parameters as the target network (tau treated as 0).
inline bool protocol_uses_ema(Protocol p) {
  return p == Protocol::EmaOnly || p == Protocol::EmaVicreg || p == Protocol::EmaBarlow ||
         p == Protocol::EmaLogdet;
}

struct TrainConfig {
  int horizon = 5;
  TargetMode mode = TargetMode::TeacherForced;
  Protocol protocol = Protocol::EmaOnly;
  double lr = 1e-3;
  double tau = 0.995;
  int steps = 2000;
  int batch = 24;
  double reg_weight = 0.1;
  double temperature = 0.1;
  int t_min = 9;
  int t_max = 45;
  int log_every = 25;
  int checkpoint_every = 0;  // 0: final checkpoint only
  std::uint64_t seed = 1;
};

struct MetricsRow {
  std::int64_t step = 0;
  double loss = 0.0;   // latent matching term
  double reg = 0.0;    // protocol penalty (unweighted)
  double h1_h0 = 0.0;  // action-binding diagnostic (UWM action models)
};

// The stop-gradient target latents for one batch element; `actions` is what
// the predictor must be fed to match them.
struct TargetSpec {
  std::vector<double> latent;
  std::vector<int> actions;  // empty: roll base dynamics k steps
};

class JepaTrainer {
 public:
  JepaTrainer(JepaModel& model, diff::ParamStore& theta, diff::ParamStore& xi,
              const Dataset& data, const TrainConfig& cfg)
      : model_(model), theta_(theta), xi_(xi), data_(data), cfg_(cfg),
        opt_(diff::AdamConfig{cfg.lr, 0.9, 0.999, 1e-8}),
        rng_(mix64(cfg.seed, 0x7261494Eull)) {
    if (cfg_.horizon < 1) throw ConfigError("horizon must be >= 1");
    const int T = data_.params.episode_steps;
    if (cfg_.t_max + cfg_.horizon > T - 1)
      throw ConfigError("t_max + horizon exceeds episode length");
    if (data_.train.empty()) throw ConfigError("empty training split");
    xi_.copy_values_from(theta_);
  }

  // Builds the stop-gradient target for (episode, t). In counterfactual mode
  // the branch actions are freshly sampled per call unless `forced_actions`
  // pins them (used by tests and the relabeling check).
  TargetSpec make_target(const Episode& e, int t, Rng& rng,
                         const std::vector<int>* forced_actions = nullptr) const {
    TargetSpec out;
    const int k = cfg_.horizon;
    if (cfg_.mode == TargetMode::TeacherForced) {
      out.latent = model_.latent_plain(xi_, context_input(e, t + k), 0, nullptr);
      if (model_.action_conditioned())
        out.actions.assign(e.actions.begin() + t, e.actions.begin() + t + k);
      return out;
    }
    // counterfactual: encode prefix || simulator branch under fresh actions
    if (e.vs.empty()) throw ContractViolation("counterfactual target needs simulator states");
    if (forced_actions) {
      out.actions = *forced_actions;
    } else {
      for (int j = 0; j < k; ++j)
        out.actions.push_back(action_alphabet()[static_cast<std::size_t>(rng.below(5))]);
    }
    const Branch b = counterfactual_rollout(e.state_at(t), out.actions, data_.params,
                                            data_.seed, e.id);
    out.latent = model_.latent_plain(xi_, context_with_branch(e, t, b, out.actions), 0, nullptr);
    if (!model_.action_conditioned()) out.actions.clear();
    return out;
  }

  MetricsRow step_once() {
    theta_.zero_grad();
    diff::Tape tape(theta_);
    const TapeCtx ctx = model_.begin_tape(tape);

    std::vector<int> sample_losses, hhat_nodes, target_nodes;
    for (int b = 0; b < cfg_.batch; ++b) {
      const Episode& e = data_.train[static_cast<std::size_t>(rng_.below(data_.train.size()))];
      const int t0 = rng_.uniform_int(cfg_.t_min, cfg_.t_max);
      const TargetSpec tgt = make_target(e, t0, rng_);
      const int enc = model_.encode_tape(tape, ctx, context_input(e, t0));
      const int pred = model_.predict_tape(tape, ctx, enc, cfg_.horizon,
                                           tgt.actions.empty() ? nullptr : &tgt.actions);
      const int hhat = model_.project_tape(tape, ctx, pred);
      const int tnode = tape.const_rvec(tgt.latent);
      sample_losses.push_back(tape.sq_dist(hhat, tnode));
      hhat_nodes.push_back(hhat);
      target_nodes.push_back(tnode);
    }
    const int mse = tape.mean_scalars(sample_losses);
    int total = mse;
    double reg_value = 0.0;
    if (const int pen = penalty_node(tape, hhat_nodes, target_nodes); pen >= 0) {
      reg_value = tape.value(pen);
      total = tape.add(mse, tape.scale(pen, cfg_.reg_weight));
    }

    MetricsRow row;
    row.step = opt_.steps_taken() + 1;
    row.loss = tape.value(mse);
    if (!std::isfinite(tape.value(total)))
      throw NumericError("non-finite training loss at step " + std::to_string(row.step));
    tape.backward(total);
    opt_.step(theta_);
    model_.post_optimizer_step(theta_);
    if (protocol_uses_ema(cfg_.protocol))
      xi_.ema_from(theta_, cfg_.tau);
    else
      xi_.copy_values_from(theta_);
    row.reg = reg_value;
    if (auto* uwm = dynamic_cast<UwmModel*>(&model_)) row.h1_h0 = uwm->h1_h0_ratio(theta_);
    return row;
  }

  diff::Adam& optimizer() { return opt_; }
  Rng& rng() { return rng_; }
  const TrainConfig& config() const { return cfg_; }

 private:
  int penalty_node(diff::Tape& tape, const std::vector<int>& hhat,
                   const std::vector<int>& targets) const {
    switch (cfg_.protocol) {
      case Protocol::None:
      case Protocol::EmaOnly:
        return -1;
      case Protocol::EmaVicreg:
        return tape.vicreg_pen(tape.stack_rows(hhat));
      case Protocol::EmaBarlow:
        return tape.barlow_pen(tape.stack_rows(hhat), tape.stack_rows(targets));
      case Protocol::EmaLogdet:
        return tape.logdet_pen(tape.stack_rows(hhat));
      default:
        return tape.info_nce(tape.stack_rows(hhat), tape.stack_rows(targets), cfg_.temperature);
    }
  }

  JepaModel& model_;
  diff::ParamStore& theta_;
  diff::ParamStore& xi_;
  const Dataset& data_;
  TrainConfig cfg_;
  diff::Adam opt_;
  Rng rng_;
};

// Standalone penalty evaluation (no gradients); batch rows are latents.
inline double regularize_value(const std::vector<std::vector<double>>& online,
                               const std::vector<std::vector<double>>& target, Protocol kind,
                               double temperature = 0.1) {
  if (kind == Protocol::None || kind == Protocol::EmaOnly) return 0.0;
  diff::ParamStore dummy;
  diff::Tape t(dummy);
  std::vector<int> on, tg;
  for (const auto& r : online) on.push_back(t.const_rvec(r));
  for (const auto& r : target) tg.push_back(t.const_rvec(r));
  const int o = t.stack_rows(on);
  switch (kind) {
    case Protocol::EmaVicreg: return t.value(t.vicreg_pen(o));
    case Protocol::EmaBarlow: return t.value(t.barlow_pen(o, t.stack_rows(tg)));
    case Protocol::EmaLogdet: return t.value(t.logdet_pen(o));
    default: return t.value(t.info_nce(o, t.stack_rows(tg), temperature));
  }
}

// ---------------------------------------------------------------------------
// Seeded experiment runner: metrics JSON-lines + checkpoints, byte-identical
// across reruns with the same config and seed.
// ---------------------------------------------------------------------------

struct RunPaths {
  std::string dir;
  std::string metrics;
  std::string checkpoint;
};

inline nlohmann::json metrics_row_json(const MetricsRow& r) {
  nlohmann::json j;
  j["step"] = r.step;
  j["loss"] = r.loss;
  j["reg"] = r.reg;
  j["h1_h0"] = r.h1_h0;
  return j;
}

inline RunPaths run_experiment(JepaModel& model, diff::ParamStore& theta, diff::ParamStore& xi,
                               const Dataset& data, const TrainConfig& cfg,
                               const nlohmann::json& model_meta, const std::string& out_dir,
                               const std::string& run_name,
                               const std::function<void(const MetricsRow&)>& on_log = {}) {
  namespace fs = std::filesystem;
  RunPaths paths;
  paths.dir = (fs::path(out_dir) / run_name).string();
  fs::create_directories(paths.dir);
  paths.metrics = (fs::path(paths.dir) / "metrics.jsonl").string();
  paths.checkpoint = (fs::path(paths.dir) / "checkpoint.json").string();

  std::ofstream metrics(paths.metrics);
  if (!metrics) throw DataError("cannot write metrics log: " + paths.metrics);

  JepaTrainer trainer(model, theta, xi, data, cfg);
  for (int s = 0; s < cfg.steps; ++s) {
    MetricsRow row;
    try {
      row = trainer.step_once();
    } catch (const NumericError& e) {
      metrics << nlohmann::json{{"aborted", true}, {"step", s + 1}, {"error", e.what()}}.dump() << "\n";
      throw;
    }
    if ((s + 1) % cfg.log_every == 0 || s + 1 == cfg.steps) {
      metrics << metrics_row_json(row).dump() << "\n";
      if (on_log) on_log(row);
    }
    if (cfg.checkpoint_every > 0 && (s + 1) % cfg.checkpoint_every == 0 && s + 1 != cfg.steps)
      write_checkpoint((fs::path(paths.dir) / ("checkpoint_step_" + std::to_string(s + 1) + ".json")).string(),
                       model_kind_name(model.kind()), model_meta, s + 1, trainer.rng().state(),
                       theta, xi);
  }
  write_checkpoint(paths.checkpoint, model_kind_name(model.kind()), model_meta, cfg.steps,
                   trainer.rng().state(), theta, xi);
  return paths;
}

// ---------------------------------------------------------------------------
// Directly supervised recurrent positive control: an action-conditioned LSTM
// trained with binary cross-entropy on the hidden-velocity indicator.
// ---------------------------------------------------------------------------

struct SupervisedConfig {
  int hidden = 12;
  int steps = 1200;
  int batch = 32;
  double lr = 3e-3;
  std::uint64_t seed = 1;
};

struct SupervisedResult {
  double acc_correct = 0.0;
  double acc_wrong = 0.0;
  double untrained_acc = 0.0;
  int hidden = 0;
};

// Input sequence for one indicator sample: the context observations up to t,
// then K observation-free steps carrying the condition's actions. Nothing at
// or after t+K is ever visible.
inline SeqInput indicator_input(const Episode& e, int t, const std::vector<int>& actions) {
  SeqInput s = context_input(e, t);
  for (int a : actions) {
    s.obs.push_back(0.0);
    s.mask.push_back(0);
    s.past_action.push_back(a);
  }
  return s;
}

namespace detail {

struct SupervisedNet {
  VectorConfig vcfg;
  std::unique_ptr<VectorModel> net;
  int wlog = -1, blog = -1;

  SupervisedNet(diff::ParamStore& ps, int hidden, Rng& rng) {
    vcfg.kind = ModelKind::Lstm;
    vcfg.actions_in_input = true;
    vcfg.hidden = hidden;
    net = std::make_unique<VectorModel>(vcfg, ps, rng);
    wlog = ps.add_real_mat("logit.w", 1, vcfg.latent);
    blog = ps.add_real_vec("logit.b", 1);
    for (auto& v : ps.at(wlog).value) v = 0.25 * rng.gaussian();
  }

  double logit_plain(const diff::ParamStore& ps, const SeqInput& in) const {
    const std::vector<double> z = net->encode_plain(ps, in);
    double acc = ps.at(blog).value[0];
    for (std::size_t i = 0; i < z.size(); ++i) acc += ps.at(wlog).value[i] * z[i];
    return acc;
  }
};

}  // namespace detail

inline SupervisedResult supervised_control(const Dataset& data, const SupervisedConfig& cfg) {
  if (data.indicator_train.empty() || data.indicator_eval.empty())
    throw ConfigError("supervised_control: indicator datasets missing");
  diff::ParamStore ps;
  Rng init_rng(mix64(cfg.seed, 0x5355504Eull));
  detail::SupervisedNet net(ps, cfg.hidden, init_rng);

  Rng rng(mix64(cfg.seed, 0x53555052ull));
  auto wrong_actions = [&](Rng& r, std::size_t n) {
    std::vector<int> a;
    for (std::size_t j = 0; j < n; ++j) a.push_back(action_alphabet()[static_cast<std::size_t>(r.below(5))]);
    return a;
  };

  auto evaluate = [&](bool wrong) {
    Rng wr(mix64(cfg.seed, 0x45564157ull));  // shared across conditions
    int hits = 0;
    for (const auto& s : data.indicator_eval) {
      const Episode& e = data.eval[static_cast<std::size_t>(s.episode_index)];
      const std::vector<int> acts = wrong ? wrong_actions(wr, s.actions.size()) : s.actions;
      const double z = net.logit_plain(ps, indicator_input(e, s.t, acts));
      hits += ((z > 0.0) == (s.label == 1)) ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(data.indicator_eval.size());
  };

  SupervisedResult out;
  out.hidden = cfg.hidden;
  out.untrained_acc = evaluate(false);

  diff::Adam opt(diff::AdamConfig{cfg.lr, 0.9, 0.999, 1e-8});
  for (int s = 0; s < cfg.steps; ++s) {
    ps.zero_grad();
    diff::Tape tape(ps);
    const TapeCtx ctx = net.net->begin_tape(tape);
    const int wlog_leaf = tape.leaf(net.wlog);
    const int blog_leaf = tape.leaf(net.blog);
    std::vector<int> logits;
    std::vector<double> labels;
    for (int b = 0; b < cfg.batch; ++b) {
      const auto& smp = data.indicator_train[static_cast<std::size_t>(rng.below(data.indicator_train.size()))];
      const Episode& e = data.probe[static_cast<std::size_t>(smp.episode_index)];
      const int z = net.net->encode_tape(tape, ctx, indicator_input(e, smp.t, smp.actions));
      logits.push_back(tape.add(tape.matvec(wlog_leaf, z), blog_leaf));
      labels.push_back(static_cast<double>(smp.label));
    }
    const int loss = tape.bce_logits(logits, labels);
    tape.backward(loss);
    opt.step(ps);
  }

  out.acc_correct = evaluate(false);
  out.acc_wrong = evaluate(true);
  return out;
}

}  // namespace uwm
