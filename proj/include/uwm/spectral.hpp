#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "uwm/complex_matrix.hpp"
#include "uwm/qlinalg.hpp"
#include "uwm/rng.hpp"

namespace uwm {

// Result of the spectrum-mismatch bound for a context/target pair: the
// minimum achievable squared HS distance over the unitary orbit of the
// context, together with a unitary that attains it.
struct OrbitGap {
  Spectrum context_spectrum;
  Spectrum target_spectrum;
  double bound = 0.0;               // squared HS distance
  ComplexMatrix aligning_unitary;   // maps sorted eigenbasis of rho to sigma's
};

// min_U ||U rho U^H - sigma||_F^2 = || lambda_down(rho) - lambda_down(sigma) ||_2^2,
// attained by U* = V_sigma V_rho^H with both eigenbases sorted non-increasing.
inline OrbitGap spectrum_mismatch(const DensityMatrix& rho, const DensityMatrix& sigma) {
  if (rho.dim() != sigma.dim())
    throw ContractViolation("spectrum_mismatch: dims " + std::to_string(rho.dim()) + " vs " +
                            std::to_string(sigma.dim()));
  const EigResult er = hermitian_eig(rho.matrix());
  const EigResult es = hermitian_eig(sigma.matrix());
  OrbitGap g;
  g.context_spectrum = er.spectrum;
  g.target_spectrum = es.spectrum;
  g.bound = er.spectrum.l2_distance_sq(es.spectrum);
  g.aligning_unitary = es.vectors * er.vectors.adjoint();
  return g;
}

// Target rewritten onto the context's orbit: keep sigma's sorted eigenvectors,
// substitute rho's sorted spectrum.
inline DensityMatrix orbit_project_target(const DensityMatrix& rho_context,
                                          const DensityMatrix& sigma_target) {
  if (rho_context.dim() != sigma_target.dim())
    throw ContractViolation("orbit_project_target: dimension mismatch");
  const EigResult er = hermitian_eig(rho_context.matrix());
  const EigResult es = hermitian_eig(sigma_target.matrix());
  const int d = rho_context.dim();
  ComplexMatrix out(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) {
      cplx acc = 0.0;
      for (int k = 0; k < d; ++k)
        acc += es.vectors(i, k) * er.spectrum.values[static_cast<std::size_t>(k)] *
               std::conj(es.vectors(j, k));
      out(i, j) = acc;
    }
  return DensityMatrix(out);
}

inline ComplexMatrix random_unitary(int d, Rng& rng) {
  ComplexMatrix m(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) m(i, j) = cplx(rng.gaussian(), rng.gaussian());
  return qr_unitary(m);
}

// Independent numerical verification of the theorem's optimum: random-restart
// projected gradient descent on U(d). Each restart takes `steps` iterations of
// a backtracking gradient step followed by QR retraction; returns the best
// squared distance found.
inline double brute_force_orbit_min(const DensityMatrix& rho, const DensityMatrix& sigma,
                                    int trials, int steps, Rng& rng) {
  if (rho.dim() != sigma.dim())
    throw ContractViolation("brute_force_orbit_min: dimension mismatch");
  if (trials < 16) throw ContractViolation("brute_force_orbit_min: trials must be >= 16");
  const int d = rho.dim();
  const ComplexMatrix& R = rho.matrix();
  const ComplexMatrix& S = sigma.matrix();

  auto objective = [&](const ComplexMatrix& u) {
    return hs_distance_sq(u * R * u.adjoint(), S);
  };

  double best = objective(ComplexMatrix::identity(d));
  for (int trial = 0; trial < trials; ++trial) {
    ComplexMatrix u = random_unitary(d, rng);
    double f = objective(u);
    double eta = 0.5;
    for (int it = 0; it < steps; ++it) {
      // Euclidean gradient of ||U R U^H - S||^2 is 4 (U R U^H - S) U R;
      // project onto the tangent space (skew-Hermitian generators) and take
      // a normalized step with backtracking, QR-retracted to the group.
      ComplexMatrix m = u * R * u.adjoint();
      m -= S;
      ComplexMatrix g = m * u * R;
      g *= cplx(4.0, 0.0);
      ComplexMatrix p = g * u.adjoint();
      ComplexMatrix skew = p;
      skew -= p.adjoint();
      skew *= cplx(0.5, 0.0);
      const double xn = skew.frobenius_norm();
      if (xn < 1e-13) break;  // stationary on the manifold
      bool moved = false;
      for (int bt = 0; bt < 30 && !moved; ++bt) {
        ComplexMatrix cand = skew * u;
        cand *= cplx(-eta / xn, 0.0);
        cand += u;
        cand = qr_unitary(cand);
        const double fc = objective(cand);
        if (fc < f) {
          u = std::move(cand);
          f = fc;
          eta *= 1.3;
          moved = true;
        } else {
          eta *= 0.5;
        }
      }
      if (!moved) break;
    }
    best = std::min(best, f);
  }
  return best;
}

// Per-step drift of the spectral functionals along a rollout, relative to the
// initial state.
struct InvariantDrift {
  std::vector<double> purity_drift;    // |purity_k - purity_0|, k = 1..
  std::vector<double> entropy_drift;
  std::vector<double> spectrum_drift;  // inf-norm
  double max_purity = 0.0, max_entropy = 0.0, max_spectrum = 0.0;
  double max_any() const { return std::max({max_purity, max_entropy, max_spectrum}); }
};

inline InvariantDrift invariant_drift(const std::vector<DensityMatrix>& rollout) {
  if (rollout.size() < 2)
    throw ContractViolation("invariant_drift: need at least 2 states");
  InvariantDrift out;
  const double p0 = purity(rollout[0]);
  const double s0 = von_neumann_entropy(rollout[0]);
  const Spectrum sp0 = density_spectrum(rollout[0]);
  for (std::size_t k = 1; k < rollout.size(); ++k) {
    const double dp = std::abs(purity(rollout[k]) - p0);
    const double ds = std::abs(von_neumann_entropy(rollout[k]) - s0);
    const double dl = density_spectrum(rollout[k]).linf_distance(sp0);
    out.purity_drift.push_back(dp);
    out.entropy_drift.push_back(ds);
    out.spectrum_drift.push_back(dl);
    out.max_purity = std::max(out.max_purity, dp);
    out.max_entropy = std::max(out.max_entropy, ds);
    out.max_spectrum = std::max(out.max_spectrum, dl);
  }
  return out;
}

// Random density matrix: rho = A A^H / Tr(A A^H) with Gaussian A. `rank`
// limits the number of columns of A (full rank when 0).
inline DensityMatrix random_density(int d, Rng& rng, int rank = 0) {
  const int r = rank > 0 ? rank : d;
  ComplexMatrix a(d, r);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < r; ++j) a(i, j) = cplx(rng.gaussian(), rng.gaussian());
  ComplexMatrix rho = a * a.adjoint();
  const double tr = rho.trace().real();
  rho *= cplx(1.0 / tr, 0.0);
  return DensityMatrix(rho);
}

}  // namespace uwm
