#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "uwm/diffcore.hpp"
#include "uwm/errors.hpp"
#include "uwm/qlinalg.hpp"
#include "uwm/rng.hpp"
#include "uwm/springworld.hpp"
#include "uwm/version.hpp"

namespace uwm {

enum class ModelKind { Uwm, Lstm, Gru, Orthogonal, Mlp };
enum class PredictorKind { Unitary, MlpPlain, MlpResidual };

inline std::string model_kind_name(ModelKind k) {
  switch (k) {
    case ModelKind::Uwm: return "uwm";
    case ModelKind::Lstm: return "lstm";
    case ModelKind::Gru: return "gru";
    case ModelKind::Orthogonal: return "orthogonal";
    default: return "mlp";
  }
}

inline ModelKind model_kind_from(const std::string& s) {
  if (s == "uwm") return ModelKind::Uwm;
  if (s == "lstm") return ModelKind::Lstm;
  if (s == "gru") return ModelKind::Gru;
  if (s == "orthogonal") return ModelKind::Orthogonal;
  if (s == "mlp") return ModelKind::Mlp;
  throw ConfigError("unknown model kind '" + s + "'");
}

// Observation sequence fed to an encoder. past_action[j] is the action that
// led into step j (0 for the first step); only encoders with an action head
// read it. The UWM encoder is deliberately action-blind: actions enter the
// architecture through the predictor alone.
struct SeqInput {
  std::vector<double> obs;
  std::vector<std::uint8_t> mask;
  std::vector<int> past_action;
  int len() const { return static_cast<int>(obs.size()); }
};

inline SeqInput context_input(const Episode& e, int t) {
  SeqInput s;
  for (int j = 0; j <= t; ++j) {
    s.obs.push_back(e.obs[static_cast<std::size_t>(j)]);
    s.mask.push_back(e.obs_mask[static_cast<std::size_t>(j)]);
    s.past_action.push_back(j == 0 ? 0 : e.actions[static_cast<std::size_t>(j - 1)]);
  }
  return s;
}

inline SeqInput context_with_branch(const Episode& e, int t, const Branch& b,
                                    const std::vector<int>& branch_actions) {
  SeqInput s = context_input(e, t);
  for (std::size_t j = 0; j < b.states.size(); ++j) {
    s.obs.push_back(b.obs[j]);
    s.mask.push_back(b.obs_mask[j]);
    s.past_action.push_back(branch_actions[j]);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Shared trainer/eval interface. begin_tape builds the per-tape shared nodes
// (parameter leaves, precomputed unitaries); the returned context is handed
// back to the encode/predict/project calls for that tape.
// ---------------------------------------------------------------------------

struct TapeCtx {
  std::vector<int> leaves;          // per-parameter leaf node ids
  std::array<int, 5> u_act{{-1, -1, -1, -1, -1}};
  std::array<int, 4> u_pow{{-1, -1, -1, -1}};  // [unused, U, U^2, U^3]
};

class JepaModel {
 public:
  virtual ~JepaModel() = default;
  virtual ModelKind kind() const = 0;
  virtual bool action_conditioned() const = 0;

  virtual TapeCtx begin_tape(diff::Tape& t) const = 0;
  virtual int encode_tape(diff::Tape& t, const TapeCtx& c, const SeqInput& in) const = 0;
  // actions == nullptr rolls the base dynamics k steps
  virtual int predict_tape(diff::Tape& t, const TapeCtx& c, int state, int k,
                           const std::vector<int>* actions) const = 0;
  virtual int project_tape(diff::Tape& t, const TapeCtx& c, int state) const = 0;

  // Plain forward on an arbitrary parameter set (theta or the EMA copy).
  virtual std::vector<double> latent_plain(const diff::ParamStore& ps, const SeqInput& in, int k,
                                           const std::vector<int>* actions) const = 0;

  virtual std::size_t trainable_count(const diff::ParamStore& ps) const = 0;
  // cache invalidation / manifold retraction after an optimizer step
  virtual void post_optimizer_step(diff::ParamStore& ps) = 0;
  virtual std::vector<int> param_ids() const = 0;
};

// ---------------------------------------------------------------------------
// UWM: density-matrix belief over a system (x) environment space, measurement
// sandwich on observations, one base-dynamics conjugation per time step, and
// a unitary (optionally action-conditioned) predictor.
// ---------------------------------------------------------------------------

struct UwmConfig {
  LatentDims dims{8, 2};
  bool action_conditioned = false;
  int meas_hidden = 32;
  int head_hidden = 32;
  int latent = 16;
  double k_eps = 1e-6;
  double dt = 1.0;  // redundant with ||H||; fixed
  double h0_init = 0.02;
};

class UwmModel : public JepaModel {
 public:
  UwmModel(const UwmConfig& cfg, diff::ParamStore& ps, Rng& init_rng) : cfg_(cfg) {
    const int ds = cfg.dims.d_sys;
    const int a_out = 2 * ds * ds;
    w1_ = ps.add_real_mat("meas.w1", cfg.meas_hidden, 2);
    b1_ = ps.add_real_vec("meas.b1", cfg.meas_hidden);
    w2_ = ps.add_real_mat("meas.w2", a_out, cfg.meas_hidden);
    b2_ = ps.add_real_vec("meas.b2", a_out);
    h0_ = ps.add_complex_mat("gen.h0", cfg.dims.d_total(), cfg.dims.d_total());
    if (cfg.action_conditioned)
      h1_ = ps.add_complex_mat("gen.h1", cfg.dims.d_total(), cfg.dims.d_total());
    hw1_ = ps.add_real_mat("head.w1", cfg.head_hidden, ds * ds);
    hb1_ = ps.add_real_vec("head.b1", cfg.head_hidden);
    hw2_ = ps.add_real_mat("head.w2", cfg.latent, cfg.head_hidden);
    hb2_ = ps.add_real_vec("head.b2", cfg.latent);

    auto gauss_fill = [&](int id, double scale) {
      for (auto& v : ps.at(id).value) v = scale * init_rng.gaussian();
    };
    gauss_fill(w1_, 1.0 / std::sqrt(2.0));
    gauss_fill(w2_, 0.05 / std::sqrt(static_cast<double>(cfg.meas_hidden)));
    // bias the measurement output toward A = I so the initial sandwich is
    // well-conditioned (K ~ I, trace ~ 1)
    for (int i = 0; i < ds; ++i) ps.at(b2_).value[2 * static_cast<std::size_t>(i * ds + i)] = 1.0;
    gauss_fill(h0_, cfg.h0_init);
    // h1 stays exactly zero: the action channel must earn its magnitude
    gauss_fill(hw1_, 1.0 / std::sqrt(static_cast<double>(ds * ds)));
    gauss_fill(hw2_, 1.0 / std::sqrt(static_cast<double>(cfg.head_hidden)));
  }

  ModelKind kind() const override { return ModelKind::Uwm; }
  bool action_conditioned() const override { return cfg_.action_conditioned; }
  const UwmConfig& config() const { return cfg_; }
  int h0_param() const { return h0_; }
  int h1_param() const { return h1_; }

  // ---- cached unitaries (plain path) ----------------------------------------

  struct UnitaryCache {
    ComplexMatrix u1, u2, u3;             // base dynamics powers
    std::array<ComplexMatrix, 5> u_act;   // per alphabet value
    bool has_actions = false;
  };

  const UnitaryCache& cache(const diff::ParamStore& ps) const {
    if (!cache_valid_ || cached_store_ != &ps) rebuild_cache(ps);
    return cache_;
  }

  void post_optimizer_step(diff::ParamStore&) override { cache_valid_ = false; }

  // ---- taped path -------------------------------------------------------------

  TapeCtx begin_tape(diff::Tape& t) const override {
    TapeCtx c;
    const int h0_leaf = t.leaf(h0_);
    const int h0_herm = t.herm_from_free(h0_leaf);
    const int u1 = t.expm_gen(h0_herm, cfg_.dt);
    c.u_pow[1] = u1;
    c.u_pow[2] = t.matmul(u1, u1);
    c.u_pow[3] = t.matmul(c.u_pow[2], u1);
    if (cfg_.action_conditioned) {
      const int h1_herm = t.herm_from_free(t.leaf(h1_));
      for (int a = -2; a <= 2; ++a) {
        const int ha = t.axpy(h0_herm, h1_herm, static_cast<double>(a));
        c.u_act[static_cast<std::size_t>(a + 2)] = t.expm_gen(ha, cfg_.dt);
      }
    }
    c.leaves = {t.leaf(w1_), t.leaf(b1_), t.leaf(w2_), t.leaf(b2_),
                t.leaf(hw1_), t.leaf(hb1_), t.leaf(hw2_), t.leaf(hb2_)};
    return c;
  }

  int encode_tape(diff::Tape& t, const TapeCtx& c, const SeqInput& in) const override {
    int rho = t.const_cmat(DensityMatrix::maximally_mixed(cfg_.dims.d_total()).matrix());
    int pos = 0;  // dynamics applied up to this step
    for (int j = 0; j < in.len(); ++j) {
      if (!in.mask[static_cast<std::size_t>(j)]) continue;
      rho = advance_tape(t, c, rho, j - pos);
      pos = j;
      const int a_vec = measurement_tape(t, c, in.obs[static_cast<std::size_t>(j)]);
      const int a_mat = t.cmat_from_real(a_vec, cfg_.dims.d_sys, cfg_.dims.d_sys);
      const int k = t.aat_eps(a_mat, cfg_.k_eps);
      const int lifted = t.lift_env(k, cfg_.dims.d_env);
      rho = t.sandwich_renorm(lifted, rho, j);
    }
    rho = advance_tape(t, c, rho, in.len() - 1 - pos);
    return rho;
  }

  int predict_tape(diff::Tape& t, const TapeCtx& c, int state, int k,
                   const std::vector<int>* actions) const override {
    if (actions) {
      int rho = state;
      for (int j = 0; j < k; ++j)
        rho = t.conj_unitary(action_node(c, (*actions)[static_cast<std::size_t>(j)]), rho);
      return rho;
    }
    return advance_tape(t, c, state, k);
  }

  int project_tape(diff::Tape& t, const TapeCtx& c, int state) const override {
    const int red = t.ptrace_env(state, cfg_.dims.d_env);
    const int flat = t.flatten_herm(red);
    const int h = t.tanh_(t.add(t.matvec(c.leaves[4], flat), c.leaves[5]));
    return t.add(t.matvec(c.leaves[6], h), c.leaves[7]);
  }

  // ---- plain path ---------------------------------------------------------------

  ComplexMatrix encode_plain(const diff::ParamStore& ps, const SeqInput& in) const {
    const UnitaryCache& uc = cache(ps);
    ComplexMatrix rho = DensityMatrix::maximally_mixed(cfg_.dims.d_total()).matrix();
    int pos = 0;
    for (int j = 0; j < in.len(); ++j) {
      if (!in.mask[static_cast<std::size_t>(j)]) continue;
      rho = advance_plain(uc, rho, j - pos);
      pos = j;
      const ComplexMatrix klift = lift_to_joint(measurement_plain(ps, in.obs[static_cast<std::size_t>(j)]),
                                                cfg_.dims.d_env);
      double r = 0.0;
      ComplexMatrix next = sandwich_renorm_sym(klift, rho, r);
      if (next.empty())
        throw NumericError("degenerate measurement: Tr(K rho K^H) = " + std::to_string(r) +
                           " at step " + std::to_string(j));
      rho = std::move(next);
    }
    return advance_plain(uc, rho, in.len() - 1 - pos);
  }

  ComplexMatrix predict_plain(const diff::ParamStore& ps, const ComplexMatrix& rho0, int k,
                              const std::vector<int>* actions) const {
    const UnitaryCache& uc = cache(ps);
    ComplexMatrix rho = rho0;
    if (actions) {
      for (int j = 0; j < k; ++j) {
        const int a = (*actions)[static_cast<std::size_t>(j)];
        rho = conj_unitary_sym(uc.u_act[static_cast<std::size_t>(a + 2)], rho);
      }
      return rho;
    }
    return advance_plain(uc, rho, k);
  }

  std::vector<double> project_plain(const diff::ParamStore& ps, const ComplexMatrix& rho) const {
    const ComplexMatrix red = partial_trace_env(rho, cfg_.dims);
    std::vector<double> flat = flatten_hermitian(red);
    std::vector<double> h = mlp_layer(ps, hw1_, hb1_, flat, true);
    return mlp_layer(ps, hw2_, hb2_, h, false);
  }

  std::vector<double> latent_plain(const diff::ParamStore& ps, const SeqInput& in, int k,
                                   const std::vector<int>* actions) const override {
    ComplexMatrix rho = encode_plain(ps, in);
    if (k > 0 || actions) rho = predict_plain(ps, rho, k, actions);
    return project_plain(ps, rho);
  }

  // Flatten layout shared with the tape op: Re diag, then (Re, Im) upper.
  static std::vector<double> flatten_hermitian(const ComplexMatrix& r) {
    const int d = r.rows();
    std::vector<double> out(static_cast<std::size_t>(d) * d);
    int p = 0;
    for (int i = 0; i < d; ++i) out[static_cast<std::size_t>(p++)] = r(i, i).real();
    for (int i = 0; i < d; ++i)
      for (int j = i + 1; j < d; ++j) {
        out[static_cast<std::size_t>(p++)] = r(i, j).real();
        out[static_cast<std::size_t>(p++)] = r(i, j).imag();
      }
    return out;
  }

  // ---- diagnostics -----------------------------------------------------------

  double h1_h0_ratio(const diff::ParamStore& ps) const {
    if (!cfg_.action_conditioned) return 0.0;
    return herm_norm(ps, h1_) / std::max(herm_norm(ps, h0_), 1e-300);
  }

  // ||[H0, H1]|| / (||H0|| ||H1||)
  double commutator_diag(const diff::ParamStore& ps) const {
    if (!cfg_.action_conditioned) return 0.0;
    const ComplexMatrix a = herm_of(ps, h0_);
    const ComplexMatrix b = herm_of(ps, h1_);
    ComplexMatrix comm = a * b - b * a;
    return comm.frobenius_norm() / std::max(a.frobenius_norm() * b.frobenius_norm(), 1e-300);
  }

  std::size_t trainable_count(const diff::ParamStore& ps) const override {
    std::size_t n = 0;
    for (int id : param_ids()) n += ps.at(id).value.size();
    return n;
  }

  std::vector<int> param_ids() const override {
    std::vector<int> ids{w1_, b1_, w2_, b2_, h0_, hw1_, hb1_, hw2_, hb2_};
    if (cfg_.action_conditioned) ids.push_back(h1_);
    return ids;
  }

  ComplexMatrix herm_of(const diff::ParamStore& ps, int id) const {
    const auto& p = ps.at(id);
    ComplexMatrix m(p.rows, p.cols);
    for (int i = 0; i < p.rows * p.cols; ++i)
      m.data()[i] = cplx(p.value[2 * static_cast<std::size_t>(i)], p.value[2 * static_cast<std::size_t>(i) + 1]);
    return hermitize(m);
  }

 private:
  double herm_norm(const diff::ParamStore& ps, int id) const { return herm_of(ps, id).frobenius_norm(); }

  int action_node(const TapeCtx& c, int a) const {
    if (!cfg_.action_conditioned)
      throw ContractViolation("predict with actions on a non-action UWM");
    if (a < -2 || a > 2) throw ContractViolation("uncached action value " + std::to_string(a));
    return c.u_act[static_cast<std::size_t>(a + 2)];
  }

  int advance_tape(diff::Tape& t, const TapeCtx& c, int rho, int gap) const {
    while (gap >= 3) {
      rho = t.conj_unitary(c.u_pow[3], rho);
      gap -= 3;
    }
    if (gap > 0) rho = t.conj_unitary(c.u_pow[static_cast<std::size_t>(gap)], rho);
    return rho;
  }

  ComplexMatrix advance_plain(const UnitaryCache& uc, ComplexMatrix rho, int gap) const {
    while (gap >= 3) {
      rho = conj_unitary_sym(uc.u3, rho);
      gap -= 3;
    }
    if (gap == 1) rho = conj_unitary_sym(uc.u1, rho);
    if (gap == 2) rho = conj_unitary_sym(uc.u2, rho);
    return rho;
  }

  int measurement_tape(diff::Tape& t, const TapeCtx& c, double o) const {
    const int x = t.const_rvec({o, 1.0});
    const int h = t.tanh_(t.add(t.matvec(c.leaves[0], x), c.leaves[1]));
    return t.add(t.matvec(c.leaves[2], h), c.leaves[3]);
  }

  ComplexMatrix measurement_plain(const diff::ParamStore& ps, double o) const {
    std::vector<double> h = mlp_layer(ps, w1_, b1_, {o, 1.0}, true);
    std::vector<double> a_vec = mlp_layer(ps, w2_, b2_, h, false);
    const int ds = cfg_.dims.d_sys;
    ComplexMatrix a(ds, ds);
    for (int i = 0; i < ds * ds; ++i)
      a.data()[i] = cplx(a_vec[2 * static_cast<std::size_t>(i)], a_vec[2 * static_cast<std::size_t>(i) + 1]);
    ComplexMatrix k = a * a.adjoint();
    for (int i = 0; i < ds; ++i) k(i, i) += cfg_.k_eps;
    return k;
  }

  std::vector<double> mlp_layer(const diff::ParamStore& ps, int w_id, int b_id,
                                const std::vector<double>& x, bool tanh_act) const {
    const auto& w = ps.at(w_id);
    const auto& b = ps.at(b_id);
    std::vector<double> y(static_cast<std::size_t>(w.rows));
    for (int i = 0; i < w.rows; ++i) {
      double acc = b.value[static_cast<std::size_t>(i)];
      const double* wi = w.value.data() + static_cast<std::size_t>(i) * w.cols;
      for (int j = 0; j < w.cols; ++j) acc += wi[j] * x[static_cast<std::size_t>(j)];
      y[static_cast<std::size_t>(i)] = tanh_act ? std::tanh(acc) : acc;
    }
    return y;
  }

  void rebuild_cache(const diff::ParamStore& ps) const {
    const ComplexMatrix h0 = herm_of(ps, h0_);
    const EigResult e0 = hermitian_eig(h0);
    cache_.u1 = expm_hermitian_generator(h0, cfg_.dt, &e0);
    cache_.u2 = cache_.u1 * cache_.u1;
    cache_.u3 = cache_.u2 * cache_.u1;
    cache_.has_actions = cfg_.action_conditioned;
    if (cfg_.action_conditioned) {
      const ComplexMatrix h1 = herm_of(ps, h1_);
      for (int a = -2; a <= 2; ++a) {
        ComplexMatrix ha = h0;
        ComplexMatrix h1s = h1;
        h1s *= cplx(static_cast<double>(a), 0.0);
        ha += h1s;
        cache_.u_act[static_cast<std::size_t>(a + 2)] = expm_hermitian_generator(ha, cfg_.dt);
      }
    }
    cache_valid_ = true;
    cached_store_ = &ps;
  }

  UwmConfig cfg_;
  int w1_ = -1, b1_ = -1, w2_ = -1, b2_ = -1;
  int h0_ = -1, h1_ = -1;
  int hw1_ = -1, hb1_ = -1, hw2_ = -1, hb2_ = -1;
  mutable UnitaryCache cache_;
  mutable bool cache_valid_ = false;
  mutable const diff::ParamStore* cached_store_ = nullptr;
};

// ---------------------------------------------------------------------------
// Vector-latent baselines: LSTM / GRU / orthogonal-transition RNN encoders
// and a windowed MLP, each mapped to a 16-dim latent, with MLP predictors
// (one-shot horizon-conditioned, or per-step action-conditioned for the
// counterfactual runs). Hidden sizes are solved to parameter-match the UWM
// trainable count within 5%.
// ---------------------------------------------------------------------------

struct VectorConfig {
  ModelKind kind = ModelKind::Lstm;
  PredictorKind predictor = PredictorKind::MlpResidual;
  bool actions_in_input = false;  // action experiments concatenate one-hots
  int hidden = 0;                 // 0: solve for parameter match
  int latent = 16;
  int head_hidden = 32;
  int pred_hidden = 24;
  int mlp_window = 1;             // observed frames visible to the MLP encoder
  std::size_t match_target = 0;   // UWM trainable count to match (0: keep hidden)
};

class VectorModel : public JepaModel {
 public:
  VectorModel(const VectorConfig& cfg, diff::ParamStore& ps, Rng& init_rng) : cfg_(cfg) {
    if (cfg_.hidden == 0) {
      if (cfg_.match_target == 0) throw ConfigError("VectorModel: hidden or match_target required");
      cfg_.hidden = solve_hidden(cfg_, cfg_.match_target);
    }
    const int h = cfg_.hidden;
    const int in = input_dim(cfg_);
    switch (cfg_.kind) {
      case ModelKind::Lstm:
        w_ = ps.add_real_mat("enc.w", 4 * h, h + in);
        b_ = ps.add_real_vec("enc.b", 4 * h);
        h0p_ = ps.add_real_vec("enc.h0", h);
        c0p_ = ps.add_real_vec("enc.c0", h);
        break;
      case ModelKind::Gru:
        w_ = ps.add_real_mat("enc.wrz", 2 * h, h + in);
        b_ = ps.add_real_vec("enc.brz", 2 * h);
        wn_ = ps.add_real_mat("enc.wn", h, h + in);
        bn_ = ps.add_real_vec("enc.bn", h);
        h0p_ = ps.add_real_vec("enc.h0", h);
        break;
      case ModelKind::Orthogonal:
        w_ = ps.add_real_mat("enc.whh", h, h);
        wn_ = ps.add_real_mat("enc.wxh", h, in);
        b_ = ps.add_real_vec("enc.b", h);
        h0p_ = ps.add_real_vec("enc.h0", h);
        break;
      case ModelKind::Mlp:
        w_ = ps.add_real_mat("enc.w1", h, 2 * cfg_.mlp_window);
        b_ = ps.add_real_vec("enc.b1", h);
        break;
      default:
        throw ConfigError("VectorModel: bad kind");
    }
    wl_ = ps.add_real_mat("enc.latent_w", cfg_.latent, h);
    bl_ = ps.add_real_vec("enc.latent_b", cfg_.latent);

    const int pin = cfg_.actions_in_input ? cfg_.latent + 5 : cfg_.latent + 1;
    pw1_ = ps.add_real_mat("pred.w1", cfg_.pred_hidden, pin);
    pb1_ = ps.add_real_vec("pred.b1", cfg_.pred_hidden);
    pw2_ = ps.add_real_mat("pred.w2", cfg_.latent, cfg_.pred_hidden);
    pb2_ = ps.add_real_vec("pred.b2", cfg_.latent);

    hw1_ = ps.add_real_mat("head.w1", cfg_.head_hidden, cfg_.latent);
    hb1_ = ps.add_real_vec("head.b1", cfg_.head_hidden);
    hw2_ = ps.add_real_mat("head.w2", cfg_.latent, cfg_.head_hidden);
    hb2_ = ps.add_real_vec("head.b2", cfg_.latent);

    for (int id : {w_, wn_, wl_, pw1_, pw2_, hw1_, hw2_}) {
      if (id < 0) continue;
      auto& p = ps.at(id);
      const double scale = 1.0 / std::sqrt(static_cast<double>(p.cols));
      for (auto& v : p.value) v = scale * init_rng.gaussian();
    }
    if (cfg_.kind == ModelKind::Lstm) {
      // forget-gate bias starts open
      auto& bv = ps.at(b_).value;
      for (int i = h; i < 2 * h; ++i) bv[static_cast<std::size_t>(i)] = 1.0;
    }
    if (cfg_.kind == ModelKind::Orthogonal) orthogonalize(ps);
  }

  ModelKind kind() const override { return cfg_.kind; }
  bool action_conditioned() const override { return cfg_.actions_in_input; }
  const VectorConfig& config() const { return cfg_; }

  static int input_dim(const VectorConfig& cfg) {
    return cfg.actions_in_input ? 7 : 2;  // (obs, presence [, one-hot action])
  }

  // Trainable scalars for a candidate hidden size (mirrors construction).
  static std::size_t count_for(const VectorConfig& cfg, int h) {
    const int in = input_dim(cfg);
    std::size_t n = 0;
    switch (cfg.kind) {
      case ModelKind::Lstm: n += static_cast<std::size_t>(4 * h) * (h + in) + 4 * h + 2 * h; break;
      case ModelKind::Gru:
        n += static_cast<std::size_t>(2 * h) * (h + in) + 2 * h;
        n += static_cast<std::size_t>(h) * (h + in) + h + h;
        break;
      case ModelKind::Orthogonal:
        n += static_cast<std::size_t>(h) * h + static_cast<std::size_t>(h) * in + h + h;
        break;
      case ModelKind::Mlp: n += static_cast<std::size_t>(h) * (2 * cfg.mlp_window) + h; break;
      default: break;
    }
    n += static_cast<std::size_t>(cfg.latent) * h + cfg.latent;  // latent map
    const int pin = cfg.actions_in_input ? cfg.latent + 5 : cfg.latent + 1;
    n += static_cast<std::size_t>(cfg.pred_hidden) * pin + cfg.pred_hidden +
         static_cast<std::size_t>(cfg.latent) * cfg.pred_hidden + cfg.latent;
    n += static_cast<std::size_t>(cfg.head_hidden) * cfg.latent + cfg.head_hidden +
         static_cast<std::size_t>(cfg.latent) * cfg.head_hidden + cfg.latent;
    return n;
  }

  static int solve_hidden(const VectorConfig& cfg, std::size_t target) {
    int best_h = 2;
    double best_gap = 1e18;
    for (int h = 2; h <= 2048; ++h) {
      const double gap = std::abs(static_cast<double>(count_for(cfg, h)) - static_cast<double>(target));
      if (gap < best_gap) {
        best_gap = gap;
        best_h = h;
      }
    }
    return best_h;
  }

  // ---- taped path -----------------------------------------------------------

  TapeCtx begin_tape(diff::Tape& t) const override {
    TapeCtx c;
    for (int id : param_ids()) c.leaves.push_back(t.leaf(id));
    return c;
  }

  int encode_tape(diff::Tape& t, const TapeCtx& c, const SeqInput& in) const override {
    if (cfg_.kind == ModelKind::Mlp) {
      const int x = t.const_rvec(mlp_features(in));
      const int h = t.tanh_(t.add(t.matvec(lf(c, w_), x), lf(c, b_)));
      return t.add(t.matvec(lf(c, wl_), h), lf(c, bl_));
    }
    int h = lf(c, h0p_);
    int cstate = cfg_.kind == ModelKind::Lstm ? lf(c, c0p_) : -1;
    const int nh = cfg_.hidden;
    for (int j = 0; j < in.len(); ++j) {
      const int x = t.const_rvec(step_features(in, j));
      if (cfg_.kind == ModelKind::Lstm) {
        const int v = t.concat({x, h});
        const int pre = t.add(t.matvec(lf(c, w_), v), lf(c, b_));
        const int i_g = t.sigmoid_(t.slice(pre, 0, nh));
        const int f_g = t.sigmoid_(t.slice(pre, nh, nh));
        const int g_g = t.tanh_(t.slice(pre, 2 * nh, nh));
        const int o_g = t.sigmoid_(t.slice(pre, 3 * nh, nh));
        cstate = t.add(t.mul(f_g, cstate), t.mul(i_g, g_g));
        h = t.mul(o_g, t.tanh_(cstate));
      } else if (cfg_.kind == ModelKind::Gru) {
        const int v = t.concat({x, h});
        const int pre = t.add(t.matvec(lf(c, w_), v), lf(c, b_));
        const int r_g = t.sigmoid_(t.slice(pre, 0, nh));
        const int z_g = t.sigmoid_(t.slice(pre, nh, nh));
        const int vn = t.concat({x, t.mul(r_g, h)});
        const int n_g = t.tanh_(t.add(t.matvec(lf(c, wn_), vn), lf(c, bn_)));
        // h' = z h + (1 - z) n
        h = t.add(t.mul(z_g, h), t.sub(n_g, t.mul(z_g, n_g)));
      } else {  // orthogonal transition
        const int pre = t.add(t.matvec(lf(c, w_), h), t.add(t.matvec(lf(c, wn_), x), lf(c, b_)));
        h = t.tanh_(pre);
      }
    }
    return t.add(t.matvec(lf(c, wl_), h), lf(c, bl_));
  }

  int predict_tape(diff::Tape& t, const TapeCtx& c, int state, int k,
                   const std::vector<int>* actions) const override {
    if (actions) {
      int z = state;
      for (int j = 0; j < k; ++j) {
        const int x = t.concat({z, t.const_rvec(one_hot((*actions)[static_cast<std::size_t>(j)]))});
        const int out = pred_mlp_tape(t, c, x);
        z = cfg_.predictor == PredictorKind::MlpPlain ? out : t.add(z, out);
      }
      return z;
    }
    if (k == 0) return state;
    const int x = t.concat({state, t.const_rvec({static_cast<double>(k) / 5.0})});
    const int out = pred_mlp_tape(t, c, x);
    return cfg_.predictor == PredictorKind::MlpPlain ? out : t.add(state, out);
  }

  int project_tape(diff::Tape& t, const TapeCtx& c, int state) const override {
    const int h = t.tanh_(t.add(t.matvec(lf(c, hw1_), state), lf(c, hb1_)));
    return t.add(t.matvec(lf(c, hw2_), h), lf(c, hb2_));
  }

  // ---- plain path -------------------------------------------------------------

  std::vector<double> encode_plain(const diff::ParamStore& ps, const SeqInput& in) const {
    if (cfg_.kind == ModelKind::Mlp) {
      std::vector<double> h = layer(ps, w_, b_, mlp_features(in), true);
      return layer(ps, wl_, bl_, h, false);
    }
    const int nh = cfg_.hidden;
    std::vector<double> h = ps.at(h0p_).value;
    std::vector<double> cst = cfg_.kind == ModelKind::Lstm ? ps.at(c0p_).value : std::vector<double>();
    for (int j = 0; j < in.len(); ++j) {
      const std::vector<double> x = step_features(in, j);
      if (cfg_.kind == ModelKind::Lstm) {
        std::vector<double> v = x;
        v.insert(v.end(), h.begin(), h.end());
        const std::vector<double> pre = layer(ps, w_, b_, v, false);
        for (int i = 0; i < nh; ++i) {
          const double ig = sigm(pre[static_cast<std::size_t>(i)]);
          const double fg = sigm(pre[static_cast<std::size_t>(nh + i)]);
          const double gg = std::tanh(pre[static_cast<std::size_t>(2 * nh + i)]);
          const double og = sigm(pre[static_cast<std::size_t>(3 * nh + i)]);
          cst[static_cast<std::size_t>(i)] = fg * cst[static_cast<std::size_t>(i)] + ig * gg;
          h[static_cast<std::size_t>(i)] = og * std::tanh(cst[static_cast<std::size_t>(i)]);
        }
      } else if (cfg_.kind == ModelKind::Gru) {
        std::vector<double> v = x;
        v.insert(v.end(), h.begin(), h.end());
        const std::vector<double> pre = layer(ps, w_, b_, v, false);
        std::vector<double> vn = x;
        for (int i = 0; i < nh; ++i)
          vn.push_back(sigm(pre[static_cast<std::size_t>(i)]) * h[static_cast<std::size_t>(i)]);
        const std::vector<double> n = layer(ps, wn_, bn_, vn, true);
        for (int i = 0; i < nh; ++i) {
          const double zg = sigm(pre[static_cast<std::size_t>(nh + i)]);
          h[static_cast<std::size_t>(i)] = zg * h[static_cast<std::size_t>(i)] + (1.0 - zg) * n[static_cast<std::size_t>(i)];
        }
      } else {
        std::vector<double> pre = layer(ps, w_, nullptr_id(), h, false);
        const std::vector<double> xin = layer(ps, wn_, b_, x, false);
        for (int i = 0; i < nh; ++i)
          h[static_cast<std::size_t>(i)] = std::tanh(pre[static_cast<std::size_t>(i)] + xin[static_cast<std::size_t>(i)]);
      }
    }
    return layer(ps, wl_, bl_, h, false);
  }

  std::vector<double> predict_plain(const diff::ParamStore& ps, std::vector<double> z, int k,
                                    const std::vector<int>* actions) const {
    if (actions) {
      for (int j = 0; j < k; ++j) {
        std::vector<double> x = z;
        const std::vector<double> oh = one_hot((*actions)[static_cast<std::size_t>(j)]);
        x.insert(x.end(), oh.begin(), oh.end());
        std::vector<double> out = pred_mlp_plain(ps, x);
        if (cfg_.predictor == PredictorKind::MlpPlain)
          z = std::move(out);
        else
          for (std::size_t i = 0; i < z.size(); ++i) z[i] += out[i];
      }
      return z;
    }
    if (k == 0) return z;
    std::vector<double> x = z;
    x.push_back(static_cast<double>(k) / 5.0);
    std::vector<double> out = pred_mlp_plain(ps, x);
    if (cfg_.predictor == PredictorKind::MlpPlain) return out;
    for (std::size_t i = 0; i < z.size(); ++i) out[i] += z[i];
    return out;
  }

  std::vector<double> project_plain(const diff::ParamStore& ps, const std::vector<double>& z) const {
    std::vector<double> h = layer(ps, hw1_, hb1_, z, true);
    return layer(ps, hw2_, hb2_, h, false);
  }

  std::vector<double> latent_plain(const diff::ParamStore& ps, const SeqInput& in, int k,
                                   const std::vector<int>* actions) const override {
    std::vector<double> z = encode_plain(ps, in);
    if (k > 0 || actions) z = predict_plain(ps, z, k, actions);
    return project_plain(ps, z);
  }

  std::size_t trainable_count(const diff::ParamStore& ps) const override {
    std::size_t n = 0;
    for (int id : param_ids()) n += ps.at(id).value.size();
    return n;
  }

  void post_optimizer_step(diff::ParamStore& ps) override {
    if (cfg_.kind == ModelKind::Orthogonal) orthogonalize(ps);
  }

  std::vector<int> param_ids() const override {
    std::vector<int> ids;
    for (int id : {w_, b_, wn_, bn_, h0p_, c0p_, wl_, bl_, pw1_, pb1_, pw2_, pb2_, hw1_, hb1_, hw2_, hb2_})
      if (id >= 0) ids.push_back(id);
    return ids;
  }

 private:
  static double sigm(double x) { return 1.0 / (1.0 + std::exp(-x)); }
  static int nullptr_id() { return -1; }

  int lf(const TapeCtx& c, int id) const {
    const auto ids = param_ids();
    for (std::size_t i = 0; i < ids.size(); ++i)
      if (ids[i] == id) return c.leaves[i];
    throw ContractViolation("parameter leaf not found");
  }

  static std::vector<double> one_hot(int a) {
    std::vector<double> v(5, 0.0);
    if (a < -2 || a > 2) throw ContractViolation("uncached action value " + std::to_string(a));
    v[static_cast<std::size_t>(a + 2)] = 1.0;
    return v;
  }

  std::vector<double> step_features(const SeqInput& in, int j) const {
    std::vector<double> x{in.mask[static_cast<std::size_t>(j)] ? in.obs[static_cast<std::size_t>(j)] : 0.0,
                          in.mask[static_cast<std::size_t>(j)] ? 1.0 : 0.0};
    if (cfg_.actions_in_input) {
      const std::vector<double> oh = one_hot(in.past_action[static_cast<std::size_t>(j)]);
      x.insert(x.end(), oh.begin(), oh.end());
    }
    return x;
  }

  // The MLP sees only the last `mlp_window` observed frames: (value, age/10)
  // per frame, newest first. History before the window cannot influence it.
  std::vector<double> mlp_features(const SeqInput& in) const {
    std::vector<double> f(static_cast<std::size_t>(2 * cfg_.mlp_window), 0.0);
    int got = 0;
    const int last = in.len() - 1;
    for (int j = last; j >= 0 && got < cfg_.mlp_window; --j) {
      if (!in.mask[static_cast<std::size_t>(j)]) continue;
      f[static_cast<std::size_t>(2 * got)] = in.obs[static_cast<std::size_t>(j)];
      f[static_cast<std::size_t>(2 * got + 1)] = static_cast<double>(last - j) / 10.0;
      ++got;
    }
    return f;
  }

  int pred_mlp_tape(diff::Tape& t, const TapeCtx& c, int x) const {
    const int h = t.tanh_(t.add(t.matvec(lf(c, pw1_), x), lf(c, pb1_)));
    return t.add(t.matvec(lf(c, pw2_), h), lf(c, pb2_));
  }

  std::vector<double> pred_mlp_plain(const diff::ParamStore& ps, const std::vector<double>& x) const {
    std::vector<double> h = layer(ps, pw1_, pb1_, x, true);
    return layer(ps, pw2_, pb2_, h, false);
  }

  std::vector<double> layer(const diff::ParamStore& ps, int w_id, int b_id,
                            const std::vector<double>& x, bool tanh_act) const {
    const auto& w = ps.at(w_id);
    std::vector<double> y(static_cast<std::size_t>(w.rows));
    for (int i = 0; i < w.rows; ++i) {
      double acc = b_id >= 0 ? ps.at(b_id).value[static_cast<std::size_t>(i)] : 0.0;
      const double* wi = w.value.data() + static_cast<std::size_t>(i) * w.cols;
      for (int j = 0; j < w.cols; ++j) acc += wi[j] * x[static_cast<std::size_t>(j)];
      y[static_cast<std::size_t>(i)] = tanh_act ? std::tanh(acc) : acc;
    }
    return y;
  }

  void orthogonalize(diff::ParamStore& ps) {
    auto& p = ps.at(w_);
    const int h = p.rows;
    ComplexMatrix m(h, h);
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < h; ++j) m(i, j) = p.value[static_cast<std::size_t>(i) * h + j];
    const ComplexMatrix q = qr_unitary(m);
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < h; ++j) p.value[static_cast<std::size_t>(i) * h + j] = q(i, j).real();
  }

  VectorConfig cfg_;
  int w_ = -1, b_ = -1, wn_ = -1, bn_ = -1, h0p_ = -1, c0p_ = -1;
  int wl_ = -1, bl_ = -1;
  int pw1_ = -1, pb1_ = -1, pw2_ = -1, pb2_ = -1;
  int hw1_ = -1, hb1_ = -1, hw2_ = -1, hb2_ = -1;
};

// ---------------------------------------------------------------------------
// Checkpoints: versioned JSON with named flat float arrays; doubles survive
// the round trip bit-exactly.
// ---------------------------------------------------------------------------

struct Checkpoint {
  std::string model_kind;
  nlohmann::json meta;  // model configuration needed to rebuild
  std::int64_t step = 0;
  std::vector<std::uint64_t> rng_state;
  nlohmann::json theta;  // name -> flat array
  nlohmann::json xi;
};

inline void save_param_store(nlohmann::json& out, const diff::ParamStore& ps) {
  for (const auto& p : ps.items()) out[p.name] = p.value;
}

inline void load_param_store(const nlohmann::json& in, diff::ParamStore& ps) {
  for (auto& p : ps.items()) {
    if (!in.contains(p.name)) throw DataError("checkpoint missing parameter '" + p.name + "'");
    const auto v = in.at(p.name).get<std::vector<double>>();
    if (v.size() != p.value.size())
      throw DataError("checkpoint parameter '" + p.name + "' has wrong length");
    p.value = v;
  }
}

inline void write_checkpoint(const std::string& path, const std::string& kind,
                             const nlohmann::json& meta, std::int64_t step,
                             const std::vector<std::uint64_t>& rng_state,
                             const diff::ParamStore& theta, const diff::ParamStore& xi) {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["code_version"] = kCodeVersion;
  j["model_kind"] = kind;
  j["meta"] = meta;
  j["step"] = step;
  j["rng_state"] = rng_state;
  save_param_store(j["theta"], theta);
  save_param_store(j["xi"], xi);
  std::ofstream f(path);
  if (!f) throw DataError("cannot write checkpoint: " + path);
  f << j.dump(1) << "\n";
}

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot read checkpoint: " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const std::exception& e) {
    throw DataError("corrupt checkpoint " + path + ": " + e.what());
  }
  if (!j.contains("schema_version") || j["schema_version"].get<int>() != 1)
    throw DataError("checkpoint schema_version unsupported: " + path);
  Checkpoint c;
  c.model_kind = j.at("model_kind").get<std::string>();
  c.meta = j.at("meta");
  c.step = j.at("step").get<std::int64_t>();
  c.rng_state = j.at("rng_state").get<std::vector<std::uint64_t>>();
  c.theta = j.at("theta");
  c.xi = j.at("xi");
  return c;
}

}  // namespace uwm
