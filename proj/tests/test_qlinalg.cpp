#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "uwm/qlinalg.hpp"
#include "uwm/rng.hpp"
#include "uwm/spectral.hpp"

using namespace uwm;

namespace {

ComplexMatrix random_hermitian(int n, Rng& rng, double scale = 1.0) {
  ComplexMatrix m(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) m(i, j) = cplx(rng.gaussian(), rng.gaussian()) * scale;
  return hermitize(m);
}

// Independent reconstruction oracle: entrywise V diag(lambda) V^H.
double reconstruction_error(const ComplexMatrix& m, const EigResult& e) {
  const int n = m.rows();
  double err = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      cplx acc = 0.0;
      for (int k = 0; k < n; ++k)
        acc += e.vectors(i, k) * e.spectrum.values[static_cast<std::size_t>(k)] *
               std::conj(e.vectors(j, k));
      err += std::norm(acc - m(i, j));
    }
  return std::sqrt(err);
}

double unitarity_defect(const ComplexMatrix& v) {
  return hs_distance_sq(v * v.adjoint(), ComplexMatrix::identity(v.rows()));
}

}  // namespace

TEST_CASE("hermitian_eig: identity and diagonal cases") {
  const EigResult e_id = hermitian_eig(ComplexMatrix::identity(4));
  for (double lam : e_id.spectrum.values) REQUIRE(lam == Catch::Approx(1.0).margin(1e-14));

  ComplexMatrix d(2, 2);
  d(0, 0) = 3.0;
  d(1, 1) = -1.0;
  const EigResult e = hermitian_eig(d);
  REQUIRE(e.spectrum.values[0] == Catch::Approx(3.0).margin(1e-14));
  REQUIRE(e.spectrum.values[1] == Catch::Approx(-1.0).margin(1e-14));
  // permuted identity eigenbasis
  REQUIRE(std::abs(e.vectors(0, 0)) == Catch::Approx(1.0).margin(1e-12));
  REQUIRE(std::abs(e.vectors(1, 1)) == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("hermitian_eig: random reconstruction up to dim 64") {
  Rng rng(42);
  for (int n : {3, 8, 16, 33, 64}) {
    const ComplexMatrix m = random_hermitian(n, rng);
    const EigResult e = hermitian_eig(m);
    REQUIRE(reconstruction_error(m, e) <= 1e-8 * std::max(1.0, m.frobenius_norm()));
    REQUIRE(unitarity_defect(e.vectors) <= 1e-16);
    for (std::size_t k = 1; k < e.spectrum.values.size(); ++k)
      REQUIRE(e.spectrum.values[k - 1] >= e.spectrum.values[k]);
  }
}

TEST_CASE("hermitian_eig: contract violations name the offence") {
  ComplexMatrix rect(2, 3);
  REQUIRE_THROWS_AS(hermitian_eig(rect), ContractViolation);
  ComplexMatrix nh(3, 3);
  nh(0, 1) = cplx(1.0, 0.0);
  nh(1, 0) = cplx(5.0, 2.0);
  try {
    hermitian_eig(nh);
    FAIL("expected ContractViolation");
  } catch (const ContractViolation& err) {
    REQUIRE(std::string(err.what()).find("m^H") != std::string::npos);
  }
}

TEST_CASE("expm: zero generator and diagonal phase") {
  const ComplexMatrix u0 = expm_hermitian_generator(ComplexMatrix(3, 3), 0.7);
  REQUIRE(hs_distance_sq(u0, ComplexMatrix::identity(3)) <= 1e-24);

  const double dt = 0.3;
  ComplexMatrix h(2, 2);
  h(0, 0) = M_PI / dt;
  const ComplexMatrix u = expm_hermitian_generator(h, dt);
  REQUIRE(u(0, 0).real() == Catch::Approx(-1.0).margin(1e-12));
  REQUIRE(std::abs(u(0, 0).imag()) <= 1e-12);
  REQUIRE(u(1, 1).real() == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("expm: unitarity and inverse-time composition at dim 16") {
  Rng rng(7);
  const ComplexMatrix h = random_hermitian(16, rng);
  const ComplexMatrix u = expm_hermitian_generator(h, 0.1);
  REQUIRE(std::sqrt(hs_distance_sq(u * u.adjoint(), ComplexMatrix::identity(16))) <= 1e-8);
  const ComplexMatrix uinv = expm_hermitian_generator(h, -0.1);
  REQUIRE(std::sqrt(hs_distance_sq(u * uinv, ComplexMatrix::identity(16))) <= 1e-8);
}

TEST_CASE("partial_trace_env: trivial identities") {
  LatentDims dims{8, 2};
  const DensityMatrix mixed16 = DensityMatrix::maximally_mixed(16);
  const ComplexMatrix red = partial_trace_env(mixed16.matrix(), dims);
  REQUIRE(hs_distance_sq(red, DensityMatrix::maximally_mixed(8).matrix()) <= 1e-28);

  // product state rho_S (x) rho_E reduces to rho_S exactly
  Rng rng(3);
  const DensityMatrix rs = random_density(8, rng);
  const DensityMatrix re = random_density(2, rng);
  ComplexMatrix prod(16, 16);
  for (int s = 0; s < 8; ++s)
    for (int s2 = 0; s2 < 8; ++s2)
      for (int e = 0; e < 2; ++e)
        for (int e2 = 0; e2 < 2; ++e2)
          prod(s * 2 + e, s2 * 2 + e2) = rs.matrix()(s, s2) * re.matrix()(e, e2);
  REQUIRE(std::sqrt(hs_distance_sq(partial_trace_env(prod, dims), rs.matrix())) <= 1e-12);
}

TEST_CASE("partial_trace_env: random state against explicit double-sum oracle") {
  Rng rng(11);
  LatentDims dims{8, 2};
  const DensityMatrix rho = random_density(16, rng);
  const ComplexMatrix red = partial_trace_env(rho.matrix(), dims);

  // oracle: explicit sum over environment indices
  for (int s = 0; s < 8; ++s)
    for (int s2 = 0; s2 < 8; ++s2) {
      cplx acc = 0.0;
      for (int e = 0; e < 2; ++e) acc += rho.matrix()(s * 2 + e, s2 * 2 + e);
      REQUIRE(std::abs(acc - red(s, s2)) <= 1e-14);
    }

  REQUIRE(std::abs(red.trace().real() - 1.0) <= 1e-10);
  const Spectrum sp = hermitian_eig(red).spectrum;
  REQUIRE(sp.values.back() >= -1e-9);
  // linearity spot-check: ptrace(a*rho1 + b*rho2) = a*ptrace(rho1) + ...
  const DensityMatrix rho2 = random_density(16, rng);
  ComplexMatrix mix = rho.matrix();
  mix *= cplx(0.3, 0.0);
  ComplexMatrix m2 = rho2.matrix();
  m2 *= cplx(0.7, 0.0);
  mix += m2;
  ComplexMatrix lhs = partial_trace_env(mix, dims);
  ComplexMatrix rhs = partial_trace_env(rho.matrix(), dims);
  rhs *= cplx(0.3, 0.0);
  ComplexMatrix rhs2 = partial_trace_env(rho2.matrix(), dims);
  rhs2 *= cplx(0.7, 0.0);
  rhs += rhs2;
  REQUIRE(std::sqrt(hs_distance_sq(lhs, rhs)) <= 1e-13);
}

TEST_CASE("hs_distance_sq: trivial values and summation oracle") {
  const ComplexMatrix id = ComplexMatrix::identity(3);
  REQUIRE(hs_distance_sq(id, id) == 0.0);

  ComplexMatrix a(2, 2), b(2, 2);
  a(0, 0) = 1.0;
  b(1, 1) = 1.0;
  REQUIRE(hs_distance_sq(a, b) == Catch::Approx(2.0).margin(1e-15));

  Rng rng(9);
  ComplexMatrix x(5, 5), y(5, 5);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j) {
      x(i, j) = cplx(rng.gaussian(), rng.gaussian());
      y(i, j) = cplx(rng.gaussian(), rng.gaussian());
    }
  // oracle: Tr((x-y)^H (x-y)) by explicit summation
  cplx tr = 0.0;
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j) tr += std::conj(x(j, i) - y(j, i)) * (x(j, i) - y(j, i));
  REQUIRE(hs_distance_sq(x, y) == Catch::Approx(tr.real()).epsilon(1e-13));
  REQUIRE(hs_distance_sq(x, y) == Catch::Approx(hs_distance_sq(y, x)));
  ComplexMatrix bad(4, 5);
  REQUIRE_THROWS_AS(hs_distance_sq(x, bad), ContractViolation);
}

TEST_CASE("purity and entropy: closed-form cases") {
  ComplexMatrix pure(4, 4);
  pure(0, 0) = 1.0;
  const DensityMatrix rho_pure{pure};
  REQUIRE(purity(rho_pure) == Catch::Approx(1.0).margin(1e-12));
  REQUIRE(von_neumann_entropy(rho_pure) == Catch::Approx(0.0).margin(1e-12));

  const DensityMatrix mixed = DensityMatrix::maximally_mixed(16);
  REQUIRE(purity(mixed) == Catch::Approx(1.0 / 16.0).margin(1e-12));
  REQUIRE(von_neumann_entropy(mixed) == Catch::Approx(std::log(16.0)).margin(1e-10));

  ComplexMatrix r2(4, 4);
  r2(0, 0) = 0.5;
  r2(1, 1) = 0.5;
  REQUIRE(von_neumann_entropy(DensityMatrix{r2}) == Catch::Approx(std::log(2.0)).margin(1e-10));
}

TEST_CASE("unitary conjugation preserves spectrum, purity, entropy") {
  Rng rng(21);
  for (int rep = 0; rep < 5; ++rep) {
    const DensityMatrix rho = random_density(16, rng);
    const ComplexMatrix u = random_unitary(16, rng);
    const DensityMatrix rotated{conj_unitary_sym(u, rho.matrix())};
    REQUIRE(density_spectrum(rotated).linf_distance(density_spectrum(rho)) <= 1e-9);
    REQUIRE(std::abs(purity(rotated) - purity(rho)) <= 1e-9);
    REQUIRE(std::abs(von_neumann_entropy(rotated) - von_neumann_entropy(rho)) <= 1e-9);
  }
}

TEST_CASE("partial trace commutes with system-local conjugation") {
  Rng rng(33);
  LatentDims dims{8, 2};
  const DensityMatrix rho = random_density(16, rng);
  const ComplexMatrix a_sys = random_unitary(8, rng);
  const ComplexMatrix lifted = lift_to_joint(a_sys, 2);
  const ComplexMatrix lhs = partial_trace_env(conj_unitary_sym(lifted, rho.matrix()), dims);
  const ComplexMatrix rhs = conj_unitary_sym(a_sys, partial_trace_env(rho.matrix(), dims));
  REQUIRE(std::sqrt(hs_distance_sq(lhs, rhs)) <= 1e-9);
}

TEST_CASE("qr_unitary returns a unitary factor") {
  Rng rng(5);
  ComplexMatrix m(6, 6);
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 6; ++j) m(i, j) = cplx(rng.gaussian(), rng.gaussian());
  const ComplexMatrix q = qr_unitary(m);
  REQUIRE(std::sqrt(hs_distance_sq(q * q.adjoint(), ComplexMatrix::identity(6))) <= 1e-12);
}
