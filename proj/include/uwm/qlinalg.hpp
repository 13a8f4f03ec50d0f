#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "uwm/complex_matrix.hpp"
#include "uwm/errors.hpp"

namespace uwm {

// Latent-space factorization: total = system (x) environment, indexed
// system-major, i.e. joint index i = s * d_env + e.
struct LatentDims {
  int d_sys = 8;
  int d_env = 2;
  int d_total() const { return d_sys * d_env; }
};

// Eigenvalues sorted non-increasing.
struct Spectrum {
  std::vector<double> values;

  double linf_distance(const Spectrum& o) const {
    double m = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i)
      m = std::max(m, std::abs(values[i] - o.values[i]));
    return m;
  }
  double l2_distance_sq(const Spectrum& o) const {
    double s = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double d = values[i] - o.values[i];
      s += d * d;
    }
    return s;
  }
};

struct EigResult {
  Spectrum spectrum;       // sorted non-increasing
  ComplexMatrix vectors;   // columns are the matching eigenvectors
};

namespace detail {

// One cyclic sweep of complex Jacobi rotations. Rotations are applied in a
// fixed (p,q) order with deterministic branch structure, so the
// decomposition is bit-reproducible for identical inputs.
inline bool jacobi_sweep(ComplexMatrix& a, ComplexMatrix& v, double threshold) {
  const int n = a.rows();
  bool rotated = false;
  for (int p = 0; p < n - 1; ++p) {
    for (int q = p + 1; q < n; ++q) {
      const cplx apq = a(p, q);
      const double mag = std::abs(apq);
      if (mag <= threshold) continue;
      rotated = true;

      const double app = a(p, p).real();
      const double aqq = a(q, q).real();
      const cplx phase = apq / mag;  // e^{i phi}

      // Zero the (p,q) entry of J^H A J with
      // J = [[c, -s e^{i phi}], [s e^{-i phi}, c]]; t = s/c solves
      // t^2 - 2 theta t - 1 = 0 with theta = (aqq - app) / (2 |apq|).
      const double theta = (aqq - app) / (2.0 * mag);
      double t;
      if (theta >= 0.0)
        t = -1.0 / (theta + std::sqrt(1.0 + theta * theta));
      else
        t = -1.0 / (theta - std::sqrt(1.0 + theta * theta));
      const double c = 1.0 / std::sqrt(1.0 + t * t);
      const double s = t * c;
      const cplx s_pos = s * phase;              // s e^{i phi}
      const cplx s_neg = s * std::conj(phase);   // s e^{-i phi}

      // Right-multiply columns p,q of A and V by J.
      for (int k = 0; k < n; ++k) {
        const cplx akp = a(k, p), akq = a(k, q);
        a(k, p) = c * akp + s_neg * akq;
        a(k, q) = -s_pos * akp + c * akq;
        const cplx vkp = v(k, p), vkq = v(k, q);
        v(k, p) = c * vkp + s_neg * vkq;
        v(k, q) = -s_pos * vkp + c * vkq;
      }
      // Left-multiply rows p,q of A by J^H.
      for (int k = 0; k < n; ++k) {
        const cplx apk = a(p, k), aqk = a(q, k);
        a(p, k) = c * apk + s_pos * aqk;
        a(q, k) = -s_neg * apk + c * aqk;
      }
      // Clean the rotated pair exactly.
      a(p, q) = 0.0;
      a(q, p) = 0.0;
      a(p, p) = cplx(a(p, p).real(), 0.0);
      a(q, q) = cplx(a(q, q).real(), 0.0);
    }
  }
  return rotated;
}

inline double offdiag_norm(const ComplexMatrix& a) {
  double s = 0.0;
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j)
      if (i != j) s += std::norm(a(i, j));
  return std::sqrt(s);
}

}  // namespace detail

// Eigendecomposition of a Hermitian matrix via cyclic complex Jacobi
// rotations. Returns m = V diag(lambda) V^H with lambda sorted
// non-increasing; ties keep the pre-sort column order (stable).
inline EigResult hermitian_eig(const ComplexMatrix& m) {
  if (m.rows() != m.cols())
    throw ContractViolation("hermitian_eig: non-square input " + m.shape_str());
  const double fro = m.frobenius_norm();
  const double herm_defect = hermiticity_defect(m);
  if (herm_defect > 1e-8 * std::max(1.0, fro))
    throw ContractViolation("hermitian_eig: non-Hermitian input, ||m - m^H||_F = " +
                            std::to_string(herm_defect));
  const int n = m.rows();

  ComplexMatrix a = hermitize(m);
  ComplexMatrix v = ComplexMatrix::identity(n);

  const double stop = 1e-15 * std::max(1.0, fro);
  for (int sweep = 0; sweep < 60; ++sweep) {
    if (detail::offdiag_norm(a) <= stop) break;
    if (!detail::jacobi_sweep(a, v, stop / (n * n + 1.0))) break;
  }

  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int i, int j) { return a(i, i).real() > a(j, j).real(); });

  EigResult r;
  r.spectrum.values.resize(static_cast<std::size_t>(n));
  r.vectors = ComplexMatrix(n, n);
  for (int j = 0; j < n; ++j) {
    r.spectrum.values[static_cast<std::size_t>(j)] = a(order[static_cast<std::size_t>(j)], order[static_cast<std::size_t>(j)]).real();
    for (int i = 0; i < n; ++i) r.vectors(i, j) = v(i, order[static_cast<std::size_t>(j)]);
  }
  return r;
}

// U = exp(-i h dt) for Hermitian h, through the eigendecomposition:
// U = V exp(-i lambda dt) V^H. Unitary to ~1e-14 at these dimensions.
inline ComplexMatrix expm_hermitian_generator(const ComplexMatrix& h, double dt,
                                              const EigResult* precomputed = nullptr) {
  if (!std::isfinite(dt)) throw ContractViolation("expm_hermitian_generator: non-finite dt");
  EigResult local;
  const EigResult& e = precomputed ? *precomputed : (local = hermitian_eig(h));
  const int n = h.rows();
  ComplexMatrix u(n, n);
  // u = V diag(e^{-i lambda dt}) V^H without forming the diagonal matrix.
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      cplx acc = 0.0;
      for (int k = 0; k < n; ++k) {
        const double ph = -e.spectrum.values[static_cast<std::size_t>(k)] * dt;
        acc += e.vectors(i, k) * cplx(std::cos(ph), std::sin(ph)) * std::conj(e.vectors(j, k));
      }
      u(i, j) = acc;
    }
  }
  return u;
}

// Hermitian PSD unit-trace latent state. Construction symmetrizes and runs
// the cheap checks; the PSD check needs an eigendecomposition and is done by
// validate(), which module boundaries and tests call explicitly.
class DensityMatrix {
 public:
  DensityMatrix() = default;

  explicit DensityMatrix(const ComplexMatrix& m) : mat_(hermitize(m)) {
    if (mat_.rows() != mat_.cols())
      throw ContractViolation("DensityMatrix: non-square " + mat_.shape_str());
    if (!mat_.all_finite()) throw ContractViolation("DensityMatrix: non-finite entries");
    const double tr_err = std::abs(mat_.trace() - cplx(1.0, 0.0));
    if (tr_err > 1e-8)
      throw ContractViolation("DensityMatrix: |Tr rho - 1| = " + std::to_string(tr_err));
  }

  static DensityMatrix maximally_mixed(int d) {
    ComplexMatrix m(d, d);
    for (int i = 0; i < d; ++i) m(i, i) = 1.0 / d;
    return DensityMatrix(m);
  }

  int dim() const { return mat_.rows(); }
  const ComplexMatrix& matrix() const { return mat_; }

  void validate() const {
    const double tr_err = std::abs(mat_.trace() - cplx(1.0, 0.0));
    if (tr_err > 1e-10)
      throw ContractViolation("DensityMatrix: |Tr rho - 1| = " + std::to_string(tr_err));
    const double min_eig = hermitian_eig(mat_).spectrum.values.back();
    if (min_eig < -1e-9)
      throw ContractViolation("DensityMatrix: min eigenvalue " + std::to_string(min_eig));
  }

 private:
  ComplexMatrix mat_;
};

// Tr_E over the environment factor; system-major indexing (i = s*d_env + e).
inline ComplexMatrix partial_trace_env(const ComplexMatrix& rho, const LatentDims& dims) {
  if (rho.rows() != dims.d_total() || rho.cols() != dims.d_total())
    throw ContractViolation("partial_trace_env: state is " + rho.shape_str() + ", dims give " +
                            std::to_string(dims.d_total()));
  ComplexMatrix out(dims.d_sys, dims.d_sys);
  for (int s = 0; s < dims.d_sys; ++s)
    for (int s2 = 0; s2 < dims.d_sys; ++s2) {
      cplx acc = 0.0;
      for (int e = 0; e < dims.d_env; ++e) acc += rho(s * dims.d_env + e, s2 * dims.d_env + e);
      out(s, s2) = acc;
    }
  return out;
}

// K (x) I_env under the same indexing.
inline ComplexMatrix lift_to_joint(const ComplexMatrix& k_sys, int d_env) {
  const int ds = k_sys.rows();
  ComplexMatrix out(ds * d_env, ds * d_env);
  for (int s = 0; s < ds; ++s)
    for (int s2 = 0; s2 < ds; ++s2) {
      const cplx v = k_sys(s, s2);
      if (v == cplx(0.0, 0.0)) continue;
      for (int e = 0; e < d_env; ++e) out(s * d_env + e, s2 * d_env + e) = v;
    }
  return out;
}

inline double hs_distance_sq(const ComplexMatrix& a, const ComplexMatrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ContractViolation("hs_distance_sq shape mismatch: " + a.shape_str() + " vs " + b.shape_str());
  double s = 0.0;
  const cplx* pa = a.data();
  const cplx* pb = b.data();
  for (std::size_t k = 0; k < a.size(); ++k) s += std::norm(pa[k] - pb[k]);
  return s;
}

inline double purity(const DensityMatrix& rho) {
  // Tr(rho^2) = ||rho||_F^2 for Hermitian rho.
  const double f = rho.matrix().frobenius_norm();
  return f * f;
}

// Von Neumann entropy in nats; eigenvalues below 1e-12 are treated as 0.
inline double von_neumann_entropy(const DensityMatrix& rho) {
  const Spectrum sp = hermitian_eig(rho.matrix()).spectrum;
  double s = 0.0;
  for (double lam : sp.values) {
    if (lam < 1e-12) continue;
    s -= lam * std::log(lam);
  }
  return s;
}

inline Spectrum density_spectrum(const DensityMatrix& rho) {
  return hermitian_eig(rho.matrix()).spectrum;
}

// Q factor of a modified Gram-Schmidt QR with the diagonal of R made real
// positive; maps any full-rank matrix to the nearest-ish unitary and is the
// retraction used for gradient steps on the unitary group.
inline ComplexMatrix qr_unitary(const ComplexMatrix& m) {
  const int n = m.rows();
  ComplexMatrix q = m;
  for (int j = 0; j < n; ++j) {
    for (int k = 0; k < j; ++k) {
      cplx dot = 0.0;
      for (int i = 0; i < n; ++i) dot += std::conj(q(i, k)) * q(i, j);
      for (int i = 0; i < n; ++i) q(i, j) -= dot * q(i, k);
    }
    double nrm = 0.0;
    for (int i = 0; i < n; ++i) nrm += std::norm(q(i, j));
    nrm = std::sqrt(nrm);
    if (nrm < 1e-300) throw NumericError("qr_unitary: rank-deficient column " + std::to_string(j));
    for (int i = 0; i < n; ++i) q(i, j) /= nrm;
    // fix the phase so R_jj > 0 (deterministic representative)
    cplx piv = 0.0;
    for (int i = 0; i < n; ++i) piv += std::conj(q(i, j)) * m(i, j);
    const double pm = std::abs(piv);
    if (pm > 1e-300) {
      const cplx ph = piv / pm;
      for (int i = 0; i < n; ++i) q(i, j) *= ph;
    }
  }
  return q;
}

// Shared state-update kernels. Both the tape primitives and the plain
// (target/eval) forward paths call these, so the two paths produce
// bit-identical states. Each update ends in an exact symmetrization.

// hermitize(U A U^H)
inline ComplexMatrix conj_unitary_sym(const ComplexMatrix& u, const ComplexMatrix& a) {
  return hermitize(u * a * u.adjoint());
}

// hermitize(M rho M^H / Re Tr(M rho M^H)); writes the trace to r_out.
inline ComplexMatrix sandwich_renorm_sym(const ComplexMatrix& m, const ComplexMatrix& rho,
                                         double& r_out) {
  ComplexMatrix s = m * rho * m.adjoint();
  r_out = s.trace().real();
  if (!(r_out >= 1e-12)) return ComplexMatrix();  // caller raises with context
  s *= cplx(1.0 / r_out, 0.0);
  return hermitize(s);
}

}  // namespace uwm
