#pragma once

#include <cmath>
#include <complex>
#include <string>
#include <vector>

#include "uwm/errors.hpp"

namespace uwm {

using cplx = std::complex<double>;

// Dense row-major complex matrix. The ambient type for every latent-space
// object in the lab; dimensions stay small (<= 64) so storage is a flat
// vector and kernels are plain loops.
class ComplexMatrix {
 public:
  ComplexMatrix() = default;
  ComplexMatrix(int rows, int cols) : rows_(rows), cols_(cols), a_(static_cast<std::size_t>(rows) * cols) {}

  static ComplexMatrix identity(int n) {
    ComplexMatrix m(n, n);
    for (int i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  static ComplexMatrix zero(int rows, int cols) { return ComplexMatrix(rows, cols); }

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  bool empty() const { return a_.empty(); }

  cplx& operator()(int i, int j) { return a_[static_cast<std::size_t>(i) * cols_ + j]; }
  const cplx& operator()(int i, int j) const { return a_[static_cast<std::size_t>(i) * cols_ + j]; }

  cplx* data() { return a_.data(); }
  const cplx* data() const { return a_.data(); }
  std::size_t size() const { return a_.size(); }

  ComplexMatrix adjoint() const {
    ComplexMatrix r(cols_, rows_);
    for (int i = 0; i < rows_; ++i)
      for (int j = 0; j < cols_; ++j) r(j, i) = std::conj((*this)(i, j));
    return r;
  }

  ComplexMatrix conjugate() const {
    ComplexMatrix r(rows_, cols_);
    for (std::size_t k = 0; k < a_.size(); ++k) r.a_[k] = std::conj(a_[k]);
    return r;
  }

  cplx trace() const {
    cplx t = 0.0;
    for (int i = 0; i < std::min(rows_, cols_); ++i) t += (*this)(i, i);
    return t;
  }

  double frobenius_norm() const {
    double s = 0.0;
    for (const cplx& z : a_) s += std::norm(z);
    return std::sqrt(s);
  }

  bool all_finite() const {
    for (const cplx& z : a_)
      if (!std::isfinite(z.real()) || !std::isfinite(z.imag())) return false;
    return true;
  }

  ComplexMatrix& operator+=(const ComplexMatrix& o) {
    check_same_shape(o, "operator+=");
    for (std::size_t k = 0; k < a_.size(); ++k) a_[k] += o.a_[k];
    return *this;
  }
  ComplexMatrix& operator-=(const ComplexMatrix& o) {
    check_same_shape(o, "operator-=");
    for (std::size_t k = 0; k < a_.size(); ++k) a_[k] -= o.a_[k];
    return *this;
  }
  ComplexMatrix& operator*=(cplx s) {
    for (auto& z : a_) z *= s;
    return *this;
  }

  friend ComplexMatrix operator+(ComplexMatrix a, const ComplexMatrix& b) { return a += b; }
  friend ComplexMatrix operator-(ComplexMatrix a, const ComplexMatrix& b) { return a -= b; }
  friend ComplexMatrix operator*(cplx s, ComplexMatrix a) { return a *= s; }
  friend ComplexMatrix operator*(ComplexMatrix a, cplx s) { return a *= s; }

  friend ComplexMatrix operator*(const ComplexMatrix& a, const ComplexMatrix& b) {
    if (a.cols_ != b.rows_)
      throw ContractViolation("matmul shape mismatch: " + a.shape_str() + " * " + b.shape_str());
    ComplexMatrix c(a.rows_, b.cols_);
    // i-k-j order keeps the inner loop contiguous in both b and c.
    for (int i = 0; i < a.rows_; ++i) {
      cplx* ci = c.a_.data() + static_cast<std::size_t>(i) * b.cols_;
      for (int k = 0; k < a.cols_; ++k) {
        const cplx aik = a(i, k);
        if (aik == cplx(0.0, 0.0)) continue;
        const cplx* bk = b.a_.data() + static_cast<std::size_t>(k) * b.cols_;
        for (int j = 0; j < b.cols_; ++j) ci[j] += aik * bk[j];
      }
    }
    return c;
  }

  std::string shape_str() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
  }

 private:
  void check_same_shape(const ComplexMatrix& o, const char* who) const {
    if (rows_ != o.rows_ || cols_ != o.cols_)
      throw ContractViolation(std::string(who) + " shape mismatch: " + shape_str() + " vs " + o.shape_str());
  }

  int rows_ = 0, cols_ = 0;
  std::vector<cplx> a_;
};

inline ComplexMatrix hermitize(const ComplexMatrix& m) {
  ComplexMatrix r(m.rows(), m.cols());
  for (int i = 0; i < m.rows(); ++i)
    for (int j = 0; j < m.cols(); ++j) r(i, j) = 0.5 * (m(i, j) + std::conj(m(j, i)));
  return r;
}

inline double hermiticity_defect(const ComplexMatrix& m) {
  double s = 0.0;
  for (int i = 0; i < m.rows(); ++i)
    for (int j = 0; j < m.cols(); ++j) s += std::norm(m(i, j) - std::conj(m(j, i)));
  return std::sqrt(s);
}

// Real part of <a,b>_F = Tr(a^H b).
inline double hs_inner_re(const ComplexMatrix& a, const ComplexMatrix& b) {
  double s = 0.0;
  const cplx* pa = a.data();
  const cplx* pb = b.data();
  for (std::size_t k = 0; k < a.size(); ++k)
    s += pa[k].real() * pb[k].real() + pa[k].imag() * pb[k].imag();
  return s;
}

}  // namespace uwm
