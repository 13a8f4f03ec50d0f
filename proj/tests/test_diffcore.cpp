#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "uwm/diffcore.hpp"
#include "uwm/qlinalg.hpp"
#include "uwm/rng.hpp"

using namespace uwm;
using namespace uwm::diff;

namespace {

void fill_gaussian(ParamStore& ps, int id, Rng& rng, double scale) {
  for (auto& v : ps.at(id).value) v = scale * rng.gaussian();
}

}  // namespace

TEST_CASE("hermitian_from_free: fixed points and antisymmetrization") {
  ParamStore ps;
  const int p = ps.add_complex_mat("m", 2, 2);
  // m = i E_{12}
  ps.at(p).value[2 * 1 + 1] = 1.0;  // imag part of entry (0,1)
  Tape t(ps);
  const int h = t.herm_from_free(t.leaf(p));
  const ComplexMatrix& hv = t.cval(h);
  REQUIRE(hv(0, 1) == cplx(0.0, 0.5));
  REQUIRE(hv(1, 0) == cplx(0.0, -0.5));
  REQUIRE(hermiticity_defect(hv) == 0.0);

  // already-Hermitian input is unchanged
  ParamStore ps2;
  const int q = ps2.add_complex_mat("h", 3, 3);
  Rng rng(1);
  fill_gaussian(ps2, q, rng, 1.0);
  // symmetrize the raw storage first
  {
    Tape t0(ps2);
    const int raw = t0.leaf(q);
    const ComplexMatrix sym = hermitize(t0.cval(raw));
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        ps2.at(q).value[2 * static_cast<std::size_t>(i * 3 + j)] = sym(i, j).real();
        ps2.at(q).value[2 * static_cast<std::size_t>(i * 3 + j) + 1] = sym(i, j).imag();
      }
  }
  Tape t2(ps2);
  const int h2 = t2.herm_from_free(t2.leaf(q));
  REQUIRE(hs_distance_sq(t2.cval(h2), hermitize(t2.cval(h2))) <= 1e-30);
}

TEST_CASE("grad of ||herm(m)||_F^2 against finite differences") {
  ParamStore ps;
  const int p = ps.add_complex_mat("m", 4, 4);
  Rng rng(2);
  fill_gaussian(ps, p, rng, 0.7);
  auto build = [&](Tape& t) {
    const int h = t.herm_from_free(t.leaf(p));
    const int f = t.flatten_herm(h);
    // ||h||_F^2 != sum of flat coords squared (off-diagonals counted once),
    // but any scalar built from the flatten is a valid gradient target; use
    // squared distance to zero.
    const int z = t.const_rvec(std::vector<double>(t.rvec(f).size(), 0.0));
    return t.sq_dist(f, z);
  };
  const auto rep = grad_check(ps, build, rng, 64);
  REQUIRE(rep.max_rel_err <= 1e-4);
}

TEST_CASE("expm gradient: diagonal, random, and exactly degenerate spectra") {
  Rng rng(3);

  SECTION("random 8x8 against finite differences") {
    ParamStore ps;
    const int p = ps.add_complex_mat("h", 8, 8);
    fill_gaussian(ps, p, rng, 0.4);
    ParamStore target_store;  // fixed random target matrix
    ComplexMatrix target(8, 8);
    for (int i = 0; i < 8; ++i)
      for (int j = 0; j < 8; ++j) target(i, j) = cplx(rng.gaussian(), rng.gaussian()) * 0.3;
    auto build = [&](Tape& t) {
      const int h = t.herm_from_free(t.leaf(p));
      const int u = t.expm_gen(h, 0.37);
      // scalar: ||U - T||_F^2 via flatten of hermitized difference is not
      // available; use Re Tr((U-T)(U-T)^H) through matmul nodes:
      const int diff_r = t.flatten_herm(t.herm_from_free(t.matmul(u, t.const_cmat(target.adjoint()))));
      const int z = t.const_rvec(std::vector<double>(t.rvec(diff_r).size(), 0.0));
      return t.sq_dist(diff_r, z);
    };
    const auto rep = grad_check(ps, build, rng, 64);
    REQUIRE(rep.max_rel_err <= 1e-4);
  }

  SECTION("exactly degenerate spectrum (h built from identity) stays finite") {
    ParamStore ps;
    const int p = ps.add_complex_mat("h", 4, 4);
    for (int i = 0; i < 4; ++i) ps.at(p).value[2 * static_cast<std::size_t>(i * 4 + i)] = 1.0;  // h = I
    auto build = [&](Tape& t) {
      const int h = t.herm_from_free(t.leaf(p));
      const int u = t.expm_gen(h, 0.5);
      const int rho = t.const_cmat([] {
        ComplexMatrix r(4, 4);
        r(0, 0) = 0.7;
        r(1, 1) = 0.3;
        return r;
      }());
      const int out = t.conj_unitary(u, rho);
      const int f = t.flatten_herm(out);
      std::vector<double> tgt(16, 0.1);
      // modest loss scale keeps the central-difference arithmetic well away
      // from the roundoff floor at exactly-zero gradient coordinates
      return t.scale(t.sq_dist(f, t.const_rvec(tgt)), 0.02);
    };
    Rng lrng(5);
    const auto rep = grad_check(ps, build, lrng, 64);
    REQUIRE(rep.max_rel_err <= 1e-4);
    for (double g : ps.at(p).grad) REQUIRE(std::isfinite(g));
  }

  SECTION("diagonal commuting case matches d/dlambda of the phases") {
    // h diagonal, upstream loss = -Re U_00 => dL/dh_00(real) = -d/dl cos(-l dt) = -dt sin(l dt)
    ParamStore ps;
    const int p = ps.add_complex_mat("h", 2, 2);
    ps.at(p).value[0] = 0.9;  // h_00 = 0.9
    ps.at(p).value[2 * 3] = 0.2;
    const double dt = 0.61;
    ps.zero_grad();
    Tape t(ps);
    const int h = t.herm_from_free(t.leaf(p));
    const int u = t.expm_gen(h, dt);
    // loss = first flat coordinate of hermitize(U) = Re U_00
    const int f = t.flatten_herm(t.herm_from_free(u));
    const int loss = t.slice(f, 0, 1);
    t.backward(loss);
    const double expect = -dt * std::sin(0.9 * dt);
    REQUIRE(ps.at(p).grad[0] == Catch::Approx(expect).margin(1e-10));
  }
}

TEST_CASE("conjugation pullback equals U^H G U") {
  Rng rng(8);
  ParamStore ps;
  const int p = ps.add_complex_mat("rho", 6, 6);
  fill_gaussian(ps, p, rng, 0.5);
  ComplexMatrix u_raw(6, 6);
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 6; ++j) u_raw(i, j) = cplx(rng.gaussian(), rng.gaussian());
  const ComplexMatrix u = qr_unitary(u_raw);

  ps.zero_grad();
  Tape t(ps);
  const int rho = t.herm_from_free(t.leaf(p));
  const int out = t.conj_unitary(t.const_cmat(u), rho);
  const int f = t.flatten_herm(out);
  std::vector<double> tgt(36, 0.05);
  const int loss = t.sq_dist(f, t.const_rvec(tgt));
  t.backward(loss);

  // independent: gradient w.r.t. rho pulled back by hand
  ParamStore ps2;
  const int p2 = ps2.add_complex_mat("rho", 6, 6);
  ps2.at(p2).value = ps.at(p).value;
  Rng check_rng(1);
  auto build = [&](Tape& tt) {
    const int r2 = tt.herm_from_free(tt.leaf(p2));
    const int o2 = tt.conj_unitary(tt.const_cmat(u), r2);
    const int f2 = tt.flatten_herm(o2);
    return tt.sq_dist(f2, tt.const_rvec(tgt));
  };
  const auto rep = grad_check(ps2, build, check_rng, 72);
  REQUIRE(rep.max_rel_err <= 1e-4);
  for (std::size_t k = 0; k < ps.at(p).grad.size(); ++k)
    REQUIRE(ps.at(p).grad[k] == Catch::Approx(ps2.at(p2).grad[k]).margin(1e-12));
}

TEST_CASE("measurement sandwich with renormalization against finite differences") {
  Rng rng(13);
  ParamStore ps;
  const int pa = ps.add_complex_mat("a", 4, 4);
  fill_gaussian(ps, pa, rng, 0.4);
  // bias A toward identity so the sandwich trace is well away from zero
  for (int i = 0; i < 4; ++i) ps.at(pa).value[2 * static_cast<std::size_t>(i * 4 + i)] += 1.0;
  const ComplexMatrix rho0 = [] {
    ComplexMatrix r(8, 8);
    for (int i = 0; i < 8; ++i) r(i, i) = 1.0 / 8.0;
    return r;
  }();
  auto build = [&](Tape& t) {
    const int a = t.leaf(pa);
    const int k = t.aat_eps(a, 1e-6);
    const int lifted = t.lift_env(k, 2);
    const int rho = t.sandwich_renorm(lifted, t.const_cmat(rho0), 7);
    const int red = t.ptrace_env(rho, 2);
    const int f = t.flatten_herm(red);
    std::vector<double> tgt(16, 0.2);
    return t.sq_dist(f, t.const_rvec(tgt));
  };
  const auto rep = grad_check(ps, build, rng, 64);
  REQUIRE(rep.max_rel_err <= 1e-4);
}

TEST_CASE("linear map gradient is exact to 1e-7") {
  Rng rng(17);
  ParamStore ps;
  const int w = ps.add_real_mat("w", 5, 9);
  const int b = ps.add_real_vec("b", 5);
  fill_gaussian(ps, w, rng, 0.8);
  fill_gaussian(ps, b, rng, 0.8);
  std::vector<double> x(9), tgt(5, 0.3);
  for (auto& v : x) v = rng.gaussian();
  auto build = [&](Tape& t) {
    const int y = t.add(t.matvec(t.leaf(w), t.const_rvec(x)), t.leaf(b));
    return t.sq_dist(y, t.const_rvec(tgt));
  };
  const auto rep = grad_check(ps, build, rng, 64);
  REQUIRE(rep.max_rel_err <= 1e-7);
}

TEST_CASE("real network primitives pass finite differences") {
  Rng rng(19);
  ParamStore ps;
  const int w1 = ps.add_real_mat("w1", 7, 4);
  const int b1 = ps.add_real_vec("b1", 7);
  const int w2 = ps.add_real_mat("w2", 3, 7);
  fill_gaussian(ps, w1, rng, 0.6);
  fill_gaussian(ps, b1, rng, 0.6);
  fill_gaussian(ps, w2, rng, 0.6);
  std::vector<double> x(4);
  for (auto& v : x) v = rng.gaussian();
  auto build = [&](Tape& t) {
    const int h = t.tanh_(t.add(t.matvec(t.leaf(w1), t.const_rvec(x)), t.leaf(b1)));
    const int s = t.sigmoid_(t.slice(h, 0, 3));
    const int y = t.mul(t.matvec(t.leaf(w2), h), s);
    const int c = t.concat({y, s});
    std::vector<double> tgt(6, 0.25);
    return t.sq_dist(c, t.const_rvec(tgt));
  };
  const auto rep = grad_check(ps, build, rng, 80);
  REQUIRE(rep.max_rel_err <= 1e-4);
}

TEST_CASE("fused batch objectives pass finite differences") {
  Rng rng(23);
  const int N = 9, D = 5;
  ParamStore ps;
  std::vector<int> rows;
  for (int i = 0; i < N; ++i) {
    const int p = ps.add_real_vec("z" + std::to_string(i), D);
    fill_gaussian(ps, p, rng, 1.1);
    rows.push_back(p);
  }
  std::vector<double> tmat(static_cast<std::size_t>(N) * D);
  for (auto& v : tmat) v = rng.gaussian();

  auto stack_leaves = [&](Tape& t) {
    std::vector<int> leaf_ids;
    for (int p : rows) leaf_ids.push_back(t.leaf(p));
    return t.stack_rows(leaf_ids);
  };

  SECTION("vicreg") {
    auto build = [&](Tape& t) { return t.vicreg_pen(stack_leaves(t)); };
    REQUIRE(grad_check(ps, build, rng, 45).max_rel_err <= 1e-4);
  }
  SECTION("barlow") {
    auto build = [&](Tape& t) {
      Node dummy;  // target as const matrix node
      int tconst = -1;
      {
        // build through stack of const rows to reuse shapes
        std::vector<int> trows;
        for (int i = 0; i < N; ++i)
          trows.push_back(t.const_rvec(std::vector<double>(tmat.begin() + i * D, tmat.begin() + (i + 1) * D)));
        tconst = t.stack_rows(trows);
      }
      return t.barlow_pen(stack_leaves(t), tconst);
    };
    REQUIRE(grad_check(ps, build, rng, 45).max_rel_err <= 1e-4);
  }
  SECTION("logdet") {
    auto build = [&](Tape& t) { return t.logdet_pen(stack_leaves(t), 1e-2); };
    REQUIRE(grad_check(ps, build, rng, 45).max_rel_err <= 1e-4);
  }
  SECTION("info_nce") {
    auto build = [&](Tape& t) {
      std::vector<int> trows;
      for (int i = 0; i < N; ++i)
        trows.push_back(t.const_rvec(std::vector<double>(tmat.begin() + i * D, tmat.begin() + (i + 1) * D)));
      return t.info_nce(stack_leaves(t), t.stack_rows(trows), 0.1);
    };
    REQUIRE(grad_check(ps, build, rng, 45).max_rel_err <= 1e-4);
  }
  SECTION("bce_logits") {
    auto build = [&](Tape& t) {
      std::vector<int> logits;
      std::vector<double> labels;
      for (int i = 0; i < N; ++i) {
        logits.push_back(t.slice(t.leaf(rows[static_cast<std::size_t>(i)]), 0, 1));
        labels.push_back(i % 2 == 0 ? 1.0 : 0.0);
      }
      return t.bce_logits(logits, labels);
    };
    REQUIRE(grad_check(ps, build, rng, 45).max_rel_err <= 1e-4);
  }
}

TEST_CASE("two identical forward+backward passes give bit-identical gradients") {
  Rng rng(29);
  ParamStore ps;
  const int p = ps.add_complex_mat("h", 6, 6);
  fill_gaussian(ps, p, rng, 0.5);
  auto run = [&]() {
    ps.zero_grad();
    Tape t(ps);
    const int h = t.herm_from_free(t.leaf(p));
    const int u = t.expm_gen(h, 0.4);
    const int rho = t.conj_unitary(u, t.const_cmat(DensityMatrix::maximally_mixed(6).matrix()));
    const int k = t.aat_eps(t.matmul(u, rho), 1e-6);
    const int f = t.flatten_herm(t.herm_from_free(k));
    std::vector<double> tgt(36, 0.1);
    const int loss = t.sq_dist(f, t.const_rvec(tgt));
    t.backward(loss);
    return ps.at(p).grad;
  };
  const auto g1 = run();
  const auto g2 = run();
  REQUIRE(g1 == g2);
}

TEST_CASE("adam step and ema update identities") {
  ParamStore theta;
  const int p = theta.add_real_vec("w", 3);
  theta.at(p).value = {1.0, -2.0, 0.5};
  ParamStore xi;
  xi.add_real_vec("w", 3);
  xi.copy_values_from(theta);

  // gradient never flows into xi: its update is the pure EMA formula
  theta.at(p).grad = {100.0, -50.0, 3.0};  // garbage gradients on theta
  const std::vector<double> xi_before = xi.at(0).value;
  const std::vector<double> th = theta.at(p).value;
  xi.ema_from(theta, 0.9);
  for (int k = 0; k < 3; ++k) {
    const double expect = xi_before[static_cast<std::size_t>(k)] +
                          (1.0 - 0.9) * (th[static_cast<std::size_t>(k)] - xi_before[static_cast<std::size_t>(k)]);
    REQUIRE(xi.at(0).value[static_cast<std::size_t>(k)] == expect);  // bitwise
  }

  Adam opt;
  opt.step(theta);
  REQUIRE(theta.at(p).value[0] < 1.0);  // moved against gradient
  REQUIRE(theta.at(p).value[1] > -2.0);
}

TEST_CASE("non-finite loss raises a numeric error") {
  ParamStore ps;
  const int p = ps.add_real_vec("w", 2);
  ps.at(p).value = {1e308, 1e308};
  Tape t(ps);
  const int x = t.leaf(p);
  const int y = t.mul(x, x);
  const int loss = t.sq_dist(y, t.const_rvec({0.0, 0.0}));
  REQUIRE(!std::isfinite(t.value(loss)));
  REQUIRE_THROWS_AS(t.backward(loss), NumericError);
}
