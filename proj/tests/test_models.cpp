#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "uwm/cli.hpp"
#include "uwm/models.hpp"
#include "uwm/qlinalg.hpp"
#include "uwm/rng.hpp"
#include "uwm/spectral.hpp"

using namespace uwm;
using diff::ParamStore;
using diff::Tape;

namespace {

struct UwmFixture {
  ParamStore ps;
  std::unique_ptr<UwmModel> model;

  explicit UwmFixture(bool actions = false, std::uint64_t seed = 7) {
    UwmConfig cfg;
    cfg.action_conditioned = actions;
    Rng rng(seed);
    model = std::make_unique<UwmModel>(cfg, ps, rng);
  }

  // measurement net emits A = c * I regardless of the observation
  void force_identity_measurement(double c) {
    auto& w2 = ps.at(2).value;  // meas.w2
    std::fill(w2.begin(), w2.end(), 0.0);
    auto& b2 = ps.at(3).value;  // meas.b2
    std::fill(b2.begin(), b2.end(), 0.0);
    for (int i = 0; i < 8; ++i) b2[2 * static_cast<std::size_t>(i * 8 + i)] = c;
    model->post_optimizer_step(ps);
  }

  void force_rank1_measurement() {
    auto& w2 = ps.at(2).value;
    std::fill(w2.begin(), w2.end(), 0.0);
    auto& b2 = ps.at(3).value;
    std::fill(b2.begin(), b2.end(), 0.0);
    b2[0] = 1.0;  // A = E_00
    model->post_optimizer_step(ps);
  }

  void zero_generator() {
    auto& h0 = ps.at(4).value;  // gen.h0
    std::fill(h0.begin(), h0.end(), 0.0);
    model->post_optimizer_step(ps);
  }
};

SeqInput seq_of(const std::vector<double>& obs, const std::vector<std::uint8_t>& mask) {
  SeqInput s;
  s.obs = obs;
  s.mask = mask;
  s.past_action.assign(obs.size(), 0);
  return s;
}

}  // namespace

TEST_CASE("uwm encode: no observations leaves the maximally mixed state") {
  UwmFixture f;
  const ComplexMatrix rho = f.model->encode_plain(f.ps, seq_of({0, 0, 0, 0, 0}, {0, 0, 0, 0, 0}));
  REQUIRE(std::sqrt(hs_distance_sq(rho, DensityMatrix::maximally_mixed(16).matrix())) <= 1e-12);
}

TEST_CASE("uwm encode: identity-proportional measurements leave the state maximally mixed") {
  UwmFixture f;
  f.force_identity_measurement(0.7);
  const ComplexMatrix rho =
      f.model->encode_plain(f.ps, seq_of({0.3, 0.0, 0.0, -0.2, 0.0, 0.0, 0.9},
                                         {1, 0, 0, 1, 0, 0, 1}));
  REQUIRE(std::sqrt(hs_distance_sq(rho, DensityMatrix::maximally_mixed(16).matrix())) <= 1e-12);
}

TEST_CASE("uwm encode: rank-1 measurement collapses the reduced state to a pure state") {
  UwmFixture f;
  f.force_rank1_measurement();
  f.zero_generator();
  const ComplexMatrix rho = f.model->encode_plain(f.ps, seq_of({0.5}, {1}));
  const DensityMatrix red{partial_trace_env(rho, LatentDims{8, 2})};
  REQUIRE(purity(red) >= 1.0 - 1e-5);
  REQUIRE(std::abs(red.matrix()(0, 0).real() - 1.0) <= 1e-5);
}

TEST_CASE("uwm encode: taped forward equals plain forward") {
  UwmFixture f(true);
  const SeqInput in = seq_of({0.3, 0.0, 0.0, -0.4, 0.0, 0.0, 0.8, 0.0}, {1, 0, 0, 1, 0, 0, 1, 0});
  const std::vector<int> actions{1, -2, 0, 2, -1};

  Tape t(f.ps);
  const TapeCtx ctx = f.model->begin_tape(t);
  const int enc = f.model->encode_tape(t, ctx, in);
  const int pred = f.model->predict_tape(t, ctx, enc, 5, &actions);
  const int proj = f.model->project_tape(t, ctx, pred);

  const ComplexMatrix rho_p = f.model->encode_plain(f.ps, in);
  const ComplexMatrix pred_p = f.model->predict_plain(f.ps, rho_p, 5, &actions);
  const std::vector<double> lat_p = f.model->project_plain(f.ps, pred_p);

  REQUIRE(std::sqrt(hs_distance_sq(t.cval(enc), rho_p)) <= 1e-13);
  REQUIRE(std::sqrt(hs_distance_sq(t.cval(pred), pred_p)) <= 1e-13);
  const auto& lat_t = t.rvec(proj);
  for (std::size_t i = 0; i < lat_p.size(); ++i)
    REQUIRE(lat_t[i] == Catch::Approx(lat_p[i]).margin(1e-13));
  // and the one-call wrapper agrees
  const auto lat_w = f.model->latent_plain(f.ps, in, 5, &actions);
  for (std::size_t i = 0; i < lat_p.size(); ++i) REQUIRE(lat_w[i] == lat_p[i]);
}

TEST_CASE("uwm predict: identity at k=0, semigroup, spectral drift at k=30") {
  UwmFixture f;
  Rng rng(5);
  const DensityMatrix rho0 = random_density(16, rng);
  const ComplexMatrix p0 = f.model->predict_plain(f.ps, rho0.matrix(), 0, nullptr);
  REQUIRE(hs_distance_sq(p0, rho0.matrix()) <= 1e-28);

  const ComplexMatrix p2 = f.model->predict_plain(f.ps, rho0.matrix(), 2, nullptr);
  const ComplexMatrix p11 = f.model->predict_plain(
      f.ps, f.model->predict_plain(f.ps, rho0.matrix(), 1, nullptr), 1, nullptr);
  REQUIRE(std::sqrt(hs_distance_sq(p2, p11)) <= 1e-10);

  std::vector<DensityMatrix> rollout{rho0};
  ComplexMatrix cur = rho0.matrix();
  for (int k = 0; k < 30; ++k) {
    cur = f.model->predict_plain(f.ps, cur, 1, nullptr);
    rollout.push_back(DensityMatrix{cur});
  }
  REQUIRE(invariant_drift(rollout).max_any() <= 1e-6);
}

TEST_CASE("uwm predict_actions: inert channel, commuting case, constant sequences") {
  SECTION("zero action term makes the output action-independent") {
    UwmFixture f(true);  // h1 is initialized to exactly zero
    Rng rng(9);
    const DensityMatrix rho = random_density(16, rng);
    const std::vector<int> a1{2, -1, 0, 1, 2}, a2{-2, -2, -2, -2, -2};
    const ComplexMatrix r1 = f.model->predict_plain(f.ps, rho.matrix(), 5, &a1);
    const ComplexMatrix r2 = f.model->predict_plain(f.ps, rho.matrix(), 5, &a2);
    REQUIRE(std::sqrt(hs_distance_sq(r1, r2)) <= 1e-12);
  }

  SECTION("commuting diagonal generators depend on actions only through the sum") {
    UwmFixture f(true);
    // overwrite h0, h1 with diagonal Hermitian matrices
    auto set_diag = [&](int pid, double scale) {
      auto& v = f.ps.at(pid).value;
      std::fill(v.begin(), v.end(), 0.0);
      for (int i = 0; i < 16; ++i) v[2 * static_cast<std::size_t>(i * 16 + i)] = scale * (i - 7.5);
    };
    set_diag(f.model->h0_param(), 0.05);
    set_diag(f.model->h1_param(), 0.03);
    f.model->post_optimizer_step(f.ps);
    Rng rng(11);
    const DensityMatrix rho = random_density(16, rng);
    const std::vector<int> a1{2, -1, 0, 1, 1}, a2{1, 1, 1, 0, 0};  // both sum to 3
    const ComplexMatrix r1 = f.model->predict_plain(f.ps, rho.matrix(), 5, &a1);
    const ComplexMatrix r2 = f.model->predict_plain(f.ps, rho.matrix(), 5, &a2);
    REQUIRE(std::sqrt(hs_distance_sq(r1, r2)) <= 1e-10);
  }

  SECTION("all-equal actions match repeated single-action conjugation") {
    UwmFixture f(true, 13);
    auto& h1 = f.ps.at(f.model->h1_param()).value;
    Rng hr(3);
    for (auto& v : h1) v = 0.04 * hr.gaussian();
    f.model->post_optimizer_step(f.ps);
    Rng rng(15);
    const DensityMatrix rho = random_density(16, rng);
    const std::vector<int> as{2, 2, 2, 2};
    ComplexMatrix expect = rho.matrix();
    const std::vector<int> one{2};
    for (int j = 0; j < 4; ++j) expect = f.model->predict_plain(f.ps, expect, 1, &one);
    const ComplexMatrix got = f.model->predict_plain(f.ps, rho.matrix(), 4, &as);
    REQUIRE(std::sqrt(hs_distance_sq(got, expect)) <= 1e-10);
  }

  SECTION("uncached action raises") {
    UwmFixture f(true);
    Rng rng(1);
    const DensityMatrix rho = random_density(16, rng);
    const std::vector<int> bad{3};
    REQUIRE_THROWS_AS(f.model->predict_plain(f.ps, rho.matrix(), 1, &bad), ContractViolation);
  }
}

TEST_CASE("readout distinguishes isospectral joint states with different reduced states") {
  UwmFixture f;
  // rho1 = |0><0|_S (x) I/2_E ; rho2 swaps joint basis levels 1 and 2, which
  // entangles the factors and changes the reduced state
  ComplexMatrix rho1(16, 16);
  rho1(0, 0) = 0.5;
  rho1(1, 1) = 0.5;
  ComplexMatrix perm = ComplexMatrix::identity(16);
  perm(1, 1) = 0.0;
  perm(2, 2) = 0.0;
  perm(1, 2) = 1.0;
  perm(2, 1) = 1.0;
  const ComplexMatrix rho2 = conj_unitary_sym(perm, rho1);
  REQUIRE(density_spectrum(DensityMatrix{rho1}).linf_distance(density_spectrum(DensityMatrix{rho2})) <= 1e-12);
  const std::vector<double> l1 = f.model->project_plain(f.ps, rho1);
  const std::vector<double> l2 = f.model->project_plain(f.ps, rho2);
  double diff = 0.0;
  for (std::size_t i = 0; i < l1.size(); ++i) diff += (l1[i] - l2[i]) * (l1[i] - l2[i]);
  REQUIRE(std::sqrt(diff) > 1e-6);
}

TEST_CASE("readout on the maximally mixed state is deterministic across constructions") {
  UwmFixture f1(false, 21), f2(false, 21);
  const auto r1 = f1.model->project_plain(f1.ps, DensityMatrix::maximally_mixed(16).matrix());
  const auto r2 = f2.model->project_plain(f2.ps, DensityMatrix::maximally_mixed(16).matrix());
  REQUIRE(r1 == r2);
  REQUIRE(r1.size() == 16);
  for (double v : r1) REQUIRE(std::isfinite(v));
}

TEST_CASE("readout gradient passes the finite-difference check") {
  UwmFixture f;
  Rng rng(31);
  const DensityMatrix rho = random_density(16, rng);
  auto build = [&](Tape& t) {
    const TapeCtx ctx = f.model->begin_tape(t);
    const int lat = f.model->project_tape(t, ctx, t.const_cmat(rho.matrix()));
    std::vector<double> tgt(16, 0.1);
    return t.scale(t.sq_dist(lat, t.const_rvec(tgt)), 0.05);
  };
  REQUIRE(diff::grad_check(f.ps, build, rng, 64).max_rel_err <= 1e-4);
}

TEST_CASE("uwm encode invariants hold under fuzzed observation sequences") {
  UwmFixture f(false, 33);
  Rng rng(77);
  for (int trial = 0; trial < 10000; ++trial) {
    const int len = 1 + static_cast<int>(rng.below(7));
    SeqInput in;
    for (int j = 0; j < len; ++j) {
      in.obs.push_back(rng.uniform(-3.0, 3.0));
      in.mask.push_back(rng.below(2) ? 1 : 0);
      in.past_action.push_back(0);
    }
    const ComplexMatrix rho = f.model->encode_plain(f.ps, in);
    REQUIRE(std::abs(rho.trace().real() - 1.0) <= 1e-10);
    REQUIRE(hermiticity_defect(rho) <= 1e-12);
  }
  // eigenvalue check on a smaller sample (needs a decomposition per state)
  Rng rng2(78);
  for (int trial = 0; trial < 100; ++trial) {
    SeqInput in;
    for (int j = 0; j < 6; ++j) {
      in.obs.push_back(rng2.uniform(-3.0, 3.0));
      in.mask.push_back(1);
      in.past_action.push_back(0);
    }
    const Spectrum sp = hermitian_eig(f.model->encode_plain(f.ps, in)).spectrum;
    REQUIRE(sp.values.back() >= -1e-9);
  }
}

TEST_CASE("vector models: parameter counts match the uwm budget within 5%") {
  ExperimentConfig cfg;
  const std::size_t target_plain = uwm_count_for(cfg);
  cfg.action_conditioned = true;
  const std::size_t target_cf = uwm_count_for(cfg);
  cfg.action_conditioned = false;

  for (const char* kind : {"lstm", "gru", "orthogonal", "mlp"}) {
    ExperimentConfig c = cfg;
    c.model_kind = kind;
    c.predictor = "mlp_residual";
    BuiltModel bm = build_model(c, 5);
    const double ratio = static_cast<double>(bm.model->trainable_count(bm.theta)) /
                         static_cast<double>(target_plain);
    INFO(kind << " ratio " << ratio);
    REQUIRE(std::abs(ratio - 1.0) <= 0.05);
  }
  // counterfactual variant with the action head
  ExperimentConfig c = cfg;
  c.model_kind = "lstm";
  c.predictor = "mlp_residual";
  c.action_conditioned = true;
  BuiltModel bm = build_model(c, 5);
  const double ratio = static_cast<double>(bm.model->trainable_count(bm.theta)) /
                       static_cast<double>(target_cf);
  REQUIRE(std::abs(ratio - 1.0) <= 0.05);
}

TEST_CASE("vector models: taped encode equals plain encode") {
  for (const char* kind : {"lstm", "gru", "orthogonal", "mlp"}) {
    ExperimentConfig c;
    c.model_kind = kind;
    c.predictor = "mlp_residual";
    c.action_conditioned = std::string(kind) == "lstm";
    BuiltModel bm = build_model(c, 11);
    SeqInput in;
    Rng rng(3);
    for (int j = 0; j < 9; ++j) {
      in.obs.push_back(rng.uniform(-1.0, 1.0));
      in.mask.push_back(j % 3 == 0 ? 1 : 0);
      in.past_action.push_back(static_cast<int>(rng.below(5)) - 2);
    }
    auto* vm = dynamic_cast<VectorModel*>(bm.model.get());
    REQUIRE(vm != nullptr);
    Tape t(bm.theta);
    const TapeCtx ctx = vm->begin_tape(t);
    const int enc = vm->encode_tape(t, ctx, in);
    const std::vector<double> plain = vm->encode_plain(bm.theta, in);
    const auto& taped = t.rvec(enc);
    REQUIRE(taped.size() == plain.size());
    for (std::size_t i = 0; i < plain.size(); ++i)
      REQUIRE(taped[i] == Catch::Approx(plain[i]).margin(1e-12));
  }
}

TEST_CASE("vector models: zero-length input yields the learned initial latent") {
  ExperimentConfig c;
  c.model_kind = "lstm";
  c.predictor = "mlp_residual";
  BuiltModel bm = build_model(c, 17);
  auto* vm = dynamic_cast<VectorModel*>(bm.model.get());
  const SeqInput empty;
  const std::vector<double> z = vm->encode_plain(bm.theta, empty);
  REQUIRE(z.size() == 16);
  for (double v : z) REQUIRE(std::isfinite(v));
}

TEST_CASE("mlp encoder ignores history beyond its window") {
  ExperimentConfig c;
  c.model_kind = "mlp";
  c.predictor = "mlp_plain";
  c.mlp_window = 1;
  BuiltModel bm = build_model(c, 19);
  auto* vm = dynamic_cast<VectorModel*>(bm.model.get());
  SeqInput a = seq_of({0.5, 0.0, 0.0, -0.9, 0.0, 0.0, 0.4}, {1, 0, 0, 1, 0, 0, 1});
  SeqInput b = seq_of({-0.9, 0.0, 0.0, 0.5, 0.0, 0.0, 0.4}, {1, 0, 0, 1, 0, 0, 1});
  REQUIRE(vm->encode_plain(bm.theta, a) == vm->encode_plain(bm.theta, b));
}

TEST_CASE("orthogonal transition stays orthogonal after retraction") {
  ExperimentConfig c;
  c.model_kind = "orthogonal";
  c.predictor = "mlp_plain";
  BuiltModel bm = build_model(c, 23);
  auto* vm = dynamic_cast<VectorModel*>(bm.model.get());
  // perturb and retract
  auto& w = bm.theta.at(0).value;
  Rng rng(5);
  for (auto& v : w) v += 0.05 * rng.gaussian();
  vm->post_optimizer_step(bm.theta);
  const int h = vm->config().hidden;
  double defect = 0.0;
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < h; ++j) {
      double dot = 0.0;
      for (int k = 0; k < h; ++k)
        dot += w[static_cast<std::size_t>(k) * h + i] * w[static_cast<std::size_t>(k) * h + j];
      defect += std::abs(dot - (i == j ? 1.0 : 0.0));
    }
  REQUIRE(defect <= 1e-9);
}

TEST_CASE("checkpoint round trip is bit-exact") {
  ExperimentConfig c;
  c.action_conditioned = true;
  BuiltModel bm = build_model(c, 29);
  // perturb values so they are not just the init
  Rng rng(7);
  for (auto& p : bm.theta.items())
    for (auto& v : p.value) v += 0.01 * rng.gaussian();
  const std::string path = (std::filesystem::temp_directory_path() / "uwm_ckpt_test.json").string();
  write_checkpoint(path, "uwm", bm.meta, 123, {1, 2, 3, 4}, bm.theta, bm.xi);
  BuiltModel back = build_from_checkpoint(path);
  REQUIRE(back.model->kind() == ModelKind::Uwm);
  for (std::size_t i = 0; i < bm.theta.items().size(); ++i) {
    REQUIRE(back.theta.items()[i].name == bm.theta.items()[i].name);
    REQUIRE(back.theta.items()[i].value == bm.theta.items()[i].value);
    REQUIRE(back.xi.items()[i].value == bm.xi.items()[i].value);
  }
  std::filesystem::remove(path);
}

TEST_CASE("action-binding diagnostics are computable") {
  UwmFixture f(true);
  REQUIRE(f.model->h1_h0_ratio(f.ps) == 0.0);  // h1 starts at zero
  auto& h1 = f.ps.at(f.model->h1_param()).value;
  Rng rng(3);
  for (auto& v : h1) v = 0.02 * rng.gaussian();
  REQUIRE(f.model->h1_h0_ratio(f.ps) > 0.0);
  REQUIRE(f.model->commutator_diag(f.ps) > 0.0);
  REQUIRE(f.model->commutator_diag(f.ps) < 10.0);
}
