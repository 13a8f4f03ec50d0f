#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "uwm/complex_matrix.hpp"
#include "uwm/errors.hpp"
#include "uwm/qlinalg.hpp"
#include "uwm/rng.hpp"

namespace uwm::diff {

// ---------------------------------------------------------------------------
// Parameters. Everything the optimizer sees is a flat real vector; complex
// matrices are stored as interleaved (re, im) pairs. Gradients land in the
// same layout, with the convention g = dL/dRe + i dL/dIm folded back to the
// pair, so the optimizer never needs to know about complex structure.
// ---------------------------------------------------------------------------

enum class ParamKind { RealVec, RealMat, ComplexMat };

struct Parameter {
  std::string name;
  ParamKind kind = ParamKind::RealVec;
  int rows = 1, cols = 0;  // RealVec: rows == 1, cols == length
  std::vector<double> value;
  std::vector<double> grad;
  std::vector<double> adam_m, adam_v;
};

class ParamStore {
 public:
  int add_real_vec(const std::string& name, int n) {
    return add(name, ParamKind::RealVec, 1, n, static_cast<std::size_t>(n));
  }
  int add_real_mat(const std::string& name, int r, int c) {
    return add(name, ParamKind::RealMat, r, c, static_cast<std::size_t>(r) * c);
  }
  int add_complex_mat(const std::string& name, int r, int c) {
    return add(name, ParamKind::ComplexMat, r, c, 2 * static_cast<std::size_t>(r) * c);
  }

  Parameter& at(int id) { return items_[static_cast<std::size_t>(id)]; }
  const Parameter& at(int id) const { return items_[static_cast<std::size_t>(id)]; }
  int count() const { return static_cast<int>(items_.size()); }

  void zero_grad() {
    for (auto& p : items_) std::fill(p.grad.begin(), p.grad.end(), 0.0);
  }

  std::size_t total_scalars() const {
    std::size_t n = 0;
    for (const auto& p : items_) n += p.value.size();
    return n;
  }

  // EMA toward `online`, written as xi += (1 - tau)(theta - xi) so the update
  // identity holds bitwise.
  void ema_from(const ParamStore& online, double tau) {
    for (std::size_t i = 0; i < items_.size(); ++i) {
      auto& xi = items_[i].value;
      const auto& th = online.items_[i].value;
      for (std::size_t k = 0; k < xi.size(); ++k) xi[k] += (1.0 - tau) * (th[k] - xi[k]);
    }
  }

  void copy_values_from(const ParamStore& o) {
    for (std::size_t i = 0; i < items_.size(); ++i) items_[i].value = o.items_[i].value;
  }

  std::vector<Parameter>& items() { return items_; }
  const std::vector<Parameter>& items() const { return items_; }

 private:
  int add(const std::string& name, ParamKind kind, int r, int c, std::size_t n) {
    Parameter p;
    p.name = name;
    p.kind = kind;
    p.rows = r;
    p.cols = c;
    p.value.assign(n, 0.0);
    p.grad.assign(n, 0.0);
    p.adam_m.assign(n, 0.0);
    p.adam_v.assign(n, 0.0);
    items_.push_back(std::move(p));
    return static_cast<int>(items_.size()) - 1;
  }

  std::vector<Parameter> items_;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  void step(ParamStore& ps) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& p : ps.items()) {
      for (std::size_t k = 0; k < p.value.size(); ++k) {
        const double g = p.grad[k];
        p.adam_m[k] = cfg_.beta1 * p.adam_m[k] + (1.0 - cfg_.beta1) * g;
        p.adam_v[k] = cfg_.beta2 * p.adam_v[k] + (1.0 - cfg_.beta2) * g * g;
        const double mhat = p.adam_m[k] / bc1;
        const double vhat = p.adam_v[k] / bc2;
        p.value[k] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
  }

  std::int64_t steps_taken() const { return t_; }
  void set_steps_taken(std::int64_t t) { t_ = t; }
  AdamConfig& config() { return cfg_; }

 private:
  AdamConfig cfg_;
  std::int64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Tape. Reverse-mode over matrix-level primitives. Complex adjoints follow
// the convention dL = Re Tr(G^H dC), i.e. G packs dL/dRe + i dL/dIm per
// entry; real payloads carry plain gradients.
// ---------------------------------------------------------------------------

enum class Op : std::uint8_t {
  // complex
  LeafC, ConstC, HermFromFree, ExpmGen, MatMul, ConjUnitary, SandwichRenorm,
  LiftEnv, PTraceEnv, AAdagEps, CMatFromReal, AxpyC, FlattenHerm,
  // real
  LeafR, ConstR, MatVec, AddR, SubR, MulR, ScaleR, Tanh, Sigmoid,
  Concat, Slice, SqDist, MeanScalars, StackRows,
  // fused batch objectives
  VicregPen, BarlowPen, LogdetPen, InfoNce, BceLogits,
};

struct Node {
  Op op;
  int a = -1, b = -1;
  std::vector<int> ins;
  ComplexMatrix cv, cg;
  std::vector<double> rv, rg;
  int rrows = 0, rcols = 0;  // real payload shape (vectors: rrows == 1)
  double x0 = 0.0, x1 = 0.0;
  int param = -1;
  int tag = -1;  // caller-supplied context (e.g. sequence step) for errors
  bool needs_grad = false;
  std::shared_ptr<EigResult> eig;
  std::vector<double> aux;
};

class Tape {
 public:
  explicit Tape(ParamStore& ps) : ps_(&ps) {}

  // ---- leaves -------------------------------------------------------------

  int leaf(int param_id) {
    const Parameter& p = ps_->at(param_id);
    Node n;
    n.param = param_id;
    n.needs_grad = true;
    if (p.kind == ParamKind::ComplexMat) {
      n.op = Op::LeafC;
      n.cv = ComplexMatrix(p.rows, p.cols);
      for (int i = 0; i < p.rows * p.cols; ++i)
        n.cv.data()[i] = cplx(p.value[2 * static_cast<std::size_t>(i)],
                              p.value[2 * static_cast<std::size_t>(i) + 1]);
    } else {
      n.op = Op::LeafR;
      n.rv = p.value;
      n.rrows = p.kind == ParamKind::RealVec ? 1 : p.rows;
      n.rcols = p.kind == ParamKind::RealVec ? p.cols : p.cols;
    }
    return push(std::move(n));
  }

  int const_cmat(ComplexMatrix m) {
    Node n;
    n.op = Op::ConstC;
    n.cv = std::move(m);
    return push(std::move(n));
  }

  int const_rvec(std::vector<double> v) {
    Node n;
    n.op = Op::ConstR;
    n.rrows = 1;
    n.rcols = static_cast<int>(v.size());
    n.rv = std::move(v);
    return push(std::move(n));
  }

  // ---- complex primitives ---------------------------------------------------

  int herm_from_free(int a) {
    const ComplexMatrix& m = nodes_[static_cast<std::size_t>(a)].cv;
    if (m.rows() != m.cols())
      throw ContractViolation("herm_from_free: non-square input " + m.shape_str());
    Node n;
    n.op = Op::HermFromFree;
    n.a = a;
    n.cv = hermitize(m);
    return push_unary(std::move(n), a);
  }

  int expm_gen(int h, double dt) {
    Node n;
    n.op = Op::ExpmGen;
    n.a = h;
    n.x0 = dt;
    n.eig = std::make_shared<EigResult>(hermitian_eig(nodes_[static_cast<std::size_t>(h)].cv));
    n.cv = expm_hermitian_generator(nodes_[static_cast<std::size_t>(h)].cv, dt, n.eig.get());
    return push_unary(std::move(n), h);
  }

  int matmul(int a, int b) {
    Node n;
    n.op = Op::MatMul;
    n.a = a;
    n.b = b;
    n.cv = nodes_[static_cast<std::size_t>(a)].cv * nodes_[static_cast<std::size_t>(b)].cv;
    return push_binary(std::move(n), a, b);
  }

  // hermitize(U A U^H); the symmetrization keeps every latent state exactly
  // Hermitian and its pullback is folded into backward.
  int conj_unitary(int u, int a) {
    Node n;
    n.op = Op::ConjUnitary;
    n.a = u;
    n.b = a;
    n.cv = conj_unitary_sym(nodes_[static_cast<std::size_t>(u)].cv,
                            nodes_[static_cast<std::size_t>(a)].cv);
    return push_binary(std::move(n), u, a);
  }

  // hermitize(M rho M^H / Re Tr(...)); the trace is cached for backward.
  int sandwich_renorm(int m, int rho, int step_tag = -1) {
    double r = 0.0;
    ComplexMatrix out = sandwich_renorm_sym(nodes_[static_cast<std::size_t>(m)].cv,
                                            nodes_[static_cast<std::size_t>(rho)].cv, r);
    if (out.empty())
      throw NumericError("degenerate measurement: Tr(K rho K^H) = " + std::to_string(r) +
                         " at step " + std::to_string(step_tag));
    Node n;
    n.op = Op::SandwichRenorm;
    n.a = m;
    n.b = rho;
    n.x0 = r;
    n.tag = step_tag;
    n.cv = std::move(out);
    return push_binary(std::move(n), m, rho);
  }

  int lift_env(int k, int d_env) {
    Node n;
    n.op = Op::LiftEnv;
    n.a = k;
    n.x0 = d_env;
    n.cv = lift_to_joint(nodes_[static_cast<std::size_t>(k)].cv, d_env);
    return push_unary(std::move(n), k);
  }

  int ptrace_env(int rho, int d_env) {
    Node n;
    n.op = Op::PTraceEnv;
    n.a = rho;
    n.x0 = d_env;
    const ComplexMatrix& r = nodes_[static_cast<std::size_t>(rho)].cv;
    LatentDims d{r.rows() / d_env, d_env};
    n.cv = partial_trace_env(r, d);
    return push_unary(std::move(n), rho);
  }

  // K = A A^H + eps I
  int aat_eps(int a, double eps) {
    const ComplexMatrix& A = nodes_[static_cast<std::size_t>(a)].cv;
    ComplexMatrix k = A * A.adjoint();
    for (int i = 0; i < k.rows(); ++i) k(i, i) += eps;
    Node n;
    n.op = Op::AAdagEps;
    n.a = a;
    n.x0 = eps;
    n.cv = std::move(k);
    return push_unary(std::move(n), a);
  }

  // Real vector of length 2*r*c (interleaved re, im) -> r x c complex matrix.
  int cmat_from_real(int v, int rows, int cols) {
    const auto& rv = nodes_[static_cast<std::size_t>(v)].rv;
    if (static_cast<int>(rv.size()) != 2 * rows * cols)
      throw ContractViolation("cmat_from_real: need " + std::to_string(2 * rows * cols) +
                              " reals, got " + std::to_string(rv.size()));
    Node n;
    n.op = Op::CMatFromReal;
    n.a = v;
    n.cv = ComplexMatrix(rows, cols);
    for (int i = 0; i < rows * cols; ++i)
      n.cv.data()[i] = cplx(rv[2 * static_cast<std::size_t>(i)], rv[2 * static_cast<std::size_t>(i) + 1]);
    return push_unary(std::move(n), v);
  }

  // C = A + s B with real constant s.
  int axpy(int a, int b, double s) {
    Node n;
    n.op = Op::AxpyC;
    n.a = a;
    n.b = b;
    n.x0 = s;
    n.cv = nodes_[static_cast<std::size_t>(a)].cv + cplx(s, 0.0) * nodes_[static_cast<std::size_t>(b)].cv;
    return push_binary(std::move(n), a, b);
  }

  // Hermitian d x d -> d^2 reals: Re diag, then (Re, Im) of the upper triangle.
  int flatten_herm(int rho) {
    const ComplexMatrix& r = nodes_[static_cast<std::size_t>(rho)].cv;
    const int d = r.rows();
    Node n;
    n.op = Op::FlattenHerm;
    n.a = rho;
    n.rrows = 1;
    n.rcols = d * d;
    n.rv.resize(static_cast<std::size_t>(d) * d);
    int p = 0;
    for (int i = 0; i < d; ++i) n.rv[static_cast<std::size_t>(p++)] = r(i, i).real();
    for (int i = 0; i < d; ++i)
      for (int j = i + 1; j < d; ++j) {
        n.rv[static_cast<std::size_t>(p++)] = r(i, j).real();
        n.rv[static_cast<std::size_t>(p++)] = r(i, j).imag();
      }
    return push_unary(std::move(n), rho);
  }

  // ---- real primitives ------------------------------------------------------

  int matvec(int w, int x) {
    const Node& W = nodes_[static_cast<std::size_t>(w)];
    const Node& X = nodes_[static_cast<std::size_t>(x)];
    if (W.rcols != X.rcols || X.rrows != 1)
      throw ContractViolation("matvec shape mismatch");
    Node n;
    n.op = Op::MatVec;
    n.a = w;
    n.b = x;
    n.rrows = 1;
    n.rcols = W.rrows;
    n.rv.assign(static_cast<std::size_t>(W.rrows), 0.0);
    for (int i = 0; i < W.rrows; ++i) {
      double acc = 0.0;
      const double* wi = W.rv.data() + static_cast<std::size_t>(i) * W.rcols;
      for (int j = 0; j < W.rcols; ++j) acc += wi[j] * X.rv[static_cast<std::size_t>(j)];
      n.rv[static_cast<std::size_t>(i)] = acc;
    }
    return push_binary(std::move(n), w, x);
  }

  int add(int a, int b) { return ew2(Op::AddR, a, b); }
  int sub(int a, int b) { return ew2(Op::SubR, a, b); }
  int mul(int a, int b) { return ew2(Op::MulR, a, b); }

  int scale(int a, double s) {
    Node n = ew_clone(a);
    n.op = Op::ScaleR;
    n.a = a;
    n.x0 = s;
    for (auto& v : n.rv) v *= s;
    return push_unary(std::move(n), a);
  }

  int tanh_(int a) {
    Node n = ew_clone(a);
    n.op = Op::Tanh;
    n.a = a;
    for (auto& v : n.rv) v = std::tanh(v);
    return push_unary(std::move(n), a);
  }

  int sigmoid_(int a) {
    Node n = ew_clone(a);
    n.op = Op::Sigmoid;
    n.a = a;
    for (auto& v : n.rv) v = 1.0 / (1.0 + std::exp(-v));
    return push_unary(std::move(n), a);
  }

  int concat(const std::vector<int>& parts) {
    Node n;
    n.op = Op::Concat;
    n.ins = parts;
    n.rrows = 1;
    for (int p : parts) {
      const auto& rv = nodes_[static_cast<std::size_t>(p)].rv;
      n.rv.insert(n.rv.end(), rv.begin(), rv.end());
      n.needs_grad = n.needs_grad || nodes_[static_cast<std::size_t>(p)].needs_grad;
    }
    n.rcols = static_cast<int>(n.rv.size());
    return push(std::move(n));
  }

  int slice(int a, int offset, int len) {
    const auto& rv = nodes_[static_cast<std::size_t>(a)].rv;
    Node n;
    n.op = Op::Slice;
    n.a = a;
    n.x0 = offset;
    n.rrows = 1;
    n.rcols = len;
    n.rv.assign(rv.begin() + offset, rv.begin() + offset + len);
    return push_unary(std::move(n), a);
  }

  // || a - b ||^2 as a scalar node.
  int sq_dist(int a, int b) {
    const auto& va = nodes_[static_cast<std::size_t>(a)].rv;
    const auto& vb = nodes_[static_cast<std::size_t>(b)].rv;
    if (va.size() != vb.size()) throw ContractViolation("sq_dist length mismatch");
    double s = 0.0;
    for (std::size_t k = 0; k < va.size(); ++k) {
      const double d = va[k] - vb[k];
      s += d * d;
    }
    Node n;
    n.op = Op::SqDist;
    n.a = a;
    n.b = b;
    n.rrows = 1;
    n.rcols = 1;
    n.rv = {s};
    return push_binary(std::move(n), a, b);
  }

  int mean_scalars(const std::vector<int>& xs) {
    Node n;
    n.op = Op::MeanScalars;
    n.ins = xs;
    n.rrows = 1;
    n.rcols = 1;
    double s = 0.0;
    for (int x : xs) {
      s += nodes_[static_cast<std::size_t>(x)].rv[0];
      n.needs_grad = n.needs_grad || nodes_[static_cast<std::size_t>(x)].needs_grad;
    }
    n.rv = {s / static_cast<double>(xs.size())};
    return push(std::move(n));
  }

  int stack_rows(const std::vector<int>& rows) {
    Node n;
    n.op = Op::StackRows;
    n.ins = rows;
    n.rrows = static_cast<int>(rows.size());
    n.rcols = nodes_[static_cast<std::size_t>(rows[0])].rcols;
    for (int r : rows) {
      const Node& src = nodes_[static_cast<std::size_t>(r)];
      if (src.rcols != n.rcols) throw ContractViolation("stack_rows ragged input");
      n.rv.insert(n.rv.end(), src.rv.begin(), src.rv.end());
      n.needs_grad = n.needs_grad || src.needs_grad;
    }
    return push(std::move(n));
  }

  // ---- fused batch objectives ----------------------------------------------

  // Variance hinge toward std 1 plus mean squared off-diagonal covariance.
  int vicreg_pen(int m) {
    Node n;
    n.op = Op::VicregPen;
    n.a = m;
    n.rrows = 1;
    n.rcols = 1;
    n.rv = {vicreg_forward(nodes_[static_cast<std::size_t>(m)], nullptr)};
    return push_unary(std::move(n), m);
  }

  // || cross-correlation(online, target) - I ||_F^2 on standardized columns.
  int barlow_pen(int online, int target) {
    Node n;
    n.op = Op::BarlowPen;
    n.a = online;
    n.b = target;
    n.rrows = 1;
    n.rcols = 1;
    n.rv = {barlow_forward(nodes_[static_cast<std::size_t>(online)],
                           nodes_[static_cast<std::size_t>(target)], nullptr)};
    return push_unary(std::move(n), online);  // target branch carries no grad
  }

  // -logdet(cov + eps I)
  int logdet_pen(int m, double eps = 1e-4) {
    Node n;
    n.op = Op::LogdetPen;
    n.a = m;
    n.x0 = eps;
    n.rrows = 1;
    n.rcols = 1;
    n.rv = {logdet_forward(nodes_[static_cast<std::size_t>(m)], eps, nullptr)};
    return push_unary(std::move(n), m);
  }

  // InfoNCE with in-batch negatives; row b's positive is target row b.
  int info_nce(int online, int target, double temperature) {
    Node n;
    n.op = Op::InfoNce;
    n.a = online;
    n.b = target;
    n.x0 = temperature;
    n.rrows = 1;
    n.rcols = 1;
    n.rv = {infonce_forward(nodes_[static_cast<std::size_t>(online)],
                            nodes_[static_cast<std::size_t>(target)], temperature, nullptr)};
    return push_unary(std::move(n), online);
  }

  // Mean binary cross-entropy with logits.
  int bce_logits(const std::vector<int>& logits, const std::vector<double>& labels) {
    Node n;
    n.op = Op::BceLogits;
    n.ins = logits;
    n.aux = labels;
    n.rrows = 1;
    n.rcols = 1;
    double s = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
      const double z = nodes_[static_cast<std::size_t>(logits[i])].rv[0];
      const double sp = z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
      s += sp - labels[i] * z;
      n.needs_grad = n.needs_grad || nodes_[static_cast<std::size_t>(logits[i])].needs_grad;
    }
    n.rv = {s / static_cast<double>(logits.size())};
    return push(std::move(n));
  }

  // ---- access ---------------------------------------------------------------

  double value(int id) const { return nodes_[static_cast<std::size_t>(id)].rv[0]; }
  const std::vector<double>& rvec(int id) const { return nodes_[static_cast<std::size_t>(id)].rv; }
  const ComplexMatrix& cval(int id) const { return nodes_[static_cast<std::size_t>(id)].cv; }
  std::size_t node_count() const { return nodes_.size(); }

  // ---- reverse pass ----------------------------------------------------------

  void backward(int loss) {
    Node& ln = nodes_[static_cast<std::size_t>(loss)];
    if (ln.rv.size() != 1) throw ContractViolation("backward: loss is not a scalar");
    if (!std::isfinite(ln.rv[0])) throw NumericError("backward: non-finite loss");
    ln.rg.assign(1, 1.0);
    for (int id = loss; id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (!n.needs_grad) continue;
      if (n.rg.empty() && n.cg.empty()) continue;
      dispatch_backward(n);
    }
  }

 private:
  // ---- helpers ----------------------------------------------------------------

  int push(Node&& n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }
  int push_unary(Node&& n, int a) {
    n.needs_grad = n.needs_grad || nodes_[static_cast<std::size_t>(a)].needs_grad;
    return push(std::move(n));
  }
  int push_binary(Node&& n, int a, int b) {
    n.needs_grad = n.needs_grad || nodes_[static_cast<std::size_t>(a)].needs_grad ||
                   nodes_[static_cast<std::size_t>(b)].needs_grad;
    return push(std::move(n));
  }

  int ew2(Op op, int a, int b) {
    const Node& na = nodes_[static_cast<std::size_t>(a)];
    const Node& nb = nodes_[static_cast<std::size_t>(b)];
    if (na.rv.size() != nb.rv.size()) throw ContractViolation("elementwise length mismatch");
    Node n;
    n.op = op;
    n.a = a;
    n.b = b;
    n.rrows = na.rrows;
    n.rcols = na.rcols;
    n.rv.resize(na.rv.size());
    for (std::size_t k = 0; k < n.rv.size(); ++k) {
      switch (op) {
        case Op::AddR: n.rv[k] = na.rv[k] + nb.rv[k]; break;
        case Op::SubR: n.rv[k] = na.rv[k] - nb.rv[k]; break;
        default: n.rv[k] = na.rv[k] * nb.rv[k]; break;
      }
    }
    return push_binary(std::move(n), a, b);
  }

  Node ew_clone(int a) {
    Node n;
    n.rv = nodes_[static_cast<std::size_t>(a)].rv;
    n.rrows = nodes_[static_cast<std::size_t>(a)].rrows;
    n.rcols = nodes_[static_cast<std::size_t>(a)].rcols;
    return n;
  }

  void add_cgrad(int id, const ComplexMatrix& g) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.needs_grad) return;
    if (n.cg.empty()) n.cg = ComplexMatrix(n.cv.rows(), n.cv.cols());
    n.cg += g;
  }

  std::vector<double>& rgrad_of(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.rg.empty()) n.rg.assign(n.rv.size(), 0.0);
    return n.rg;
  }

  // ---- fused-objective kernels (forward; grad optionally accumulated) --------

  static void center_columns(const Node& m, std::vector<double>& xt, std::vector<double>& mu) {
    const int N = m.rrows, d = m.rcols;
    mu.assign(static_cast<std::size_t>(d), 0.0);
    for (int i = 0; i < N; ++i)
      for (int j = 0; j < d; ++j) mu[static_cast<std::size_t>(j)] += m.rv[static_cast<std::size_t>(i) * d + j];
    for (auto& v : mu) v /= N;
    xt.resize(static_cast<std::size_t>(N) * d);
    for (int i = 0; i < N; ++i)
      for (int j = 0; j < d; ++j)
        xt[static_cast<std::size_t>(i) * d + j] = m.rv[static_cast<std::size_t>(i) * d + j] - mu[static_cast<std::size_t>(j)];
  }

  // Subtract per-column means of g: the pullback of centering.
  static void centering_pullback(std::vector<double>& g, int N, int d) {
    for (int j = 0; j < d; ++j) {
      double cm = 0.0;
      for (int i = 0; i < N; ++i) cm += g[static_cast<std::size_t>(i) * d + j];
      cm /= N;
      for (int i = 0; i < N; ++i) g[static_cast<std::size_t>(i) * d + j] -= cm;
    }
  }

  double vicreg_forward(const Node& m, std::vector<double>* grad_out) const {
    const int N = m.rrows, d = m.rcols;
    if (N < 2) throw ContractViolation("vicreg_pen: batch must be >= 2");
    std::vector<double> xt, mu;
    center_columns(m, xt, mu);
    std::vector<double> stdv(static_cast<std::size_t>(d));
    double var_pen = 0.0;
    for (int j = 0; j < d; ++j) {
      double v = 0.0;
      for (int i = 0; i < N; ++i) {
        const double x = xt[static_cast<std::size_t>(i) * d + j];
        v += x * x;
      }
      v /= (N - 1);
      stdv[static_cast<std::size_t>(j)] = std::sqrt(v + 1e-4);
      var_pen += std::max(0.0, 1.0 - stdv[static_cast<std::size_t>(j)]);
    }
    var_pen /= d;
    // covariance off-diagonal
    std::vector<double> c(static_cast<std::size_t>(d) * d, 0.0);
    for (int i = 0; i < N; ++i)
      for (int j = 0; j < d; ++j) {
        const double xij = xt[static_cast<std::size_t>(i) * d + j];
        for (int k = 0; k < d; ++k) c[static_cast<std::size_t>(j) * d + k] += xij * xt[static_cast<std::size_t>(i) * d + k];
      }
    for (auto& v : c) v /= (N - 1);
    double cov_pen = 0.0;
    for (int j = 0; j < d; ++j)
      for (int k = 0; k < d; ++k)
        if (j != k) cov_pen += c[static_cast<std::size_t>(j) * d + k] * c[static_cast<std::size_t>(j) * d + k];
    cov_pen /= d;

    if (grad_out) {
      std::vector<double>& g = *grad_out;
      g.assign(static_cast<std::size_t>(N) * d, 0.0);
      for (int i = 0; i < N; ++i)
        for (int j = 0; j < d; ++j) {
          const double xij = xt[static_cast<std::size_t>(i) * d + j];
          double gij = 0.0;
          if (stdv[static_cast<std::size_t>(j)] < 1.0)
            gij -= xij / (d * (N - 1.0) * stdv[static_cast<std::size_t>(j)]);
          double cov_g = 0.0;  // (4 / (d (N-1))) [xt C]_ij over off-diagonal C
          for (int k = 0; k < d; ++k)
            if (k != j) cov_g += xt[static_cast<std::size_t>(i) * d + k] * c[static_cast<std::size_t>(k) * d + j];
          gij += 4.0 * cov_g / (d * (N - 1.0));
          g[static_cast<std::size_t>(i) * d + j] = gij;
        }
      centering_pullback(g, N, d);
    }
    return var_pen + cov_pen;
  }

  static void standardize_columns(const Node& m, std::vector<double>& z, std::vector<double>& sig,
                                  std::vector<double>& xt) {
    const int N = m.rrows, d = m.rcols;
    std::vector<double> mu;
    center_columns(m, xt, mu);
    sig.assign(static_cast<std::size_t>(d), 0.0);
    for (int j = 0; j < d; ++j) {
      double v = 0.0;
      for (int i = 0; i < N; ++i) {
        const double x = xt[static_cast<std::size_t>(i) * d + j];
        v += x * x;
      }
      sig[static_cast<std::size_t>(j)] = std::sqrt(v / (N - 1) + 1e-6);
    }
    z.resize(static_cast<std::size_t>(N) * d);
    for (int i = 0; i < N; ++i)
      for (int j = 0; j < d; ++j)
        z[static_cast<std::size_t>(i) * d + j] = xt[static_cast<std::size_t>(i) * d + j] / sig[static_cast<std::size_t>(j)];
  }

  double barlow_forward(const Node& online, const Node& target, std::vector<double>* grad_out) const {
    const int N = online.rrows, d = online.rcols;
    if (N < 2) throw ContractViolation("barlow_pen: batch must be >= 2");
    if (target.rrows != N || target.rcols != d) throw ContractViolation("barlow_pen shape mismatch");
    std::vector<double> z, zs, zxt, t, ts, txt;
    standardize_columns(online, z, zs, zxt);
    standardize_columns(target, t, ts, txt);
    std::vector<double> c(static_cast<std::size_t>(d) * d, 0.0);
    for (int i = 0; i < N; ++i)
      for (int j = 0; j < d; ++j)
        for (int k = 0; k < d; ++k)
          c[static_cast<std::size_t>(j) * d + k] += z[static_cast<std::size_t>(i) * d + j] * t[static_cast<std::size_t>(i) * d + k];
    for (auto& v : c) v /= (N - 1);
    double pen = 0.0;
    for (int j = 0; j < d; ++j)
      for (int k = 0; k < d; ++k) {
        const double delta = c[static_cast<std::size_t>(j) * d + k] - (j == k ? 1.0 : 0.0);
        pen += delta * delta;
      }
    if (grad_out) {
      // dP/dC = 2 (C - I); dC/dz = t / (N-1); then standardization pullback.
      std::vector<double> gz(static_cast<std::size_t>(N) * d, 0.0);
      for (int i = 0; i < N; ++i)
        for (int j = 0; j < d; ++j) {
          double acc = 0.0;
          for (int k = 0; k < d; ++k) {
            const double gc = 2.0 * (c[static_cast<std::size_t>(j) * d + k] - (j == k ? 1.0 : 0.0));
            acc += gc * t[static_cast<std::size_t>(i) * d + k];
          }
          gz[static_cast<std::size_t>(i) * d + j] = acc / (N - 1);
        }
      // z = xt / sigma per column: dL/dx_k = (g_k - mean g)/sigma - z_k * sum(g z)/((N-1) sigma)
      std::vector<double>& g = *grad_out;
      g.assign(static_cast<std::size_t>(N) * d, 0.0);
      for (int j = 0; j < d; ++j) {
        double gm = 0.0, gzdot = 0.0;
        for (int i = 0; i < N; ++i) {
          gm += gz[static_cast<std::size_t>(i) * d + j];
          gzdot += gz[static_cast<std::size_t>(i) * d + j] * z[static_cast<std::size_t>(i) * d + j];
        }
        gm /= N;
        for (int i = 0; i < N; ++i) {
          const double gi = gz[static_cast<std::size_t>(i) * d + j];
          g[static_cast<std::size_t>(i) * d + j] =
              (gi - gm) / zs[static_cast<std::size_t>(j)] -
              z[static_cast<std::size_t>(i) * d + j] * gzdot / ((N - 1.0) * zs[static_cast<std::size_t>(j)]);
        }
      }
    }
    return pen;
  }

  double logdet_forward(const Node& m, double eps, std::vector<double>* grad_out) const {
    const int N = m.rrows, d = m.rcols;
    if (N < 2) throw ContractViolation("logdet_pen: batch must be >= 2");
    std::vector<double> xt, mu;
    center_columns(m, xt, mu);
    ComplexMatrix cov(d, d);
    for (int i = 0; i < N; ++i)
      for (int j = 0; j < d; ++j)
        for (int k = 0; k < d; ++k)
          cov(j, k) += xt[static_cast<std::size_t>(i) * d + j] * xt[static_cast<std::size_t>(i) * d + k];
    for (int j = 0; j < d; ++j)
      for (int k = 0; k < d; ++k) cov(j, k) /= (N - 1);
    for (int j = 0; j < d; ++j) cov(j, j) += eps;
    const EigResult e = hermitian_eig(cov);
    double s = 0.0;
    for (double lam : e.spectrum.values) s -= std::log(std::max(lam, 1e-300));
    if (grad_out) {
      // d(-logdet M) = -Tr(M^{-1} dM); M^{-1} from the eigendecomposition.
      ComplexMatrix minv(d, d);
      for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) {
          cplx acc = 0.0;
          for (int k = 0; k < d; ++k)
            acc += e.vectors(i, k) * std::conj(e.vectors(j, k)) /
                   std::max(e.spectrum.values[static_cast<std::size_t>(k)], 1e-300);
          minv(i, j) = acc;
        }
      std::vector<double>& g = *grad_out;
      g.assign(static_cast<std::size_t>(N) * d, 0.0);
      for (int i = 0; i < N; ++i)
        for (int j = 0; j < d; ++j) {
          double acc = 0.0;
          for (int k = 0; k < d; ++k)
            acc += xt[static_cast<std::size_t>(i) * d + k] * minv(k, j).real();
          g[static_cast<std::size_t>(i) * d + j] = -2.0 * acc / (N - 1.0);
        }
      centering_pullback(g, N, d);
    }
    return s;
  }

  double infonce_forward(const Node& online, const Node& target, double temp,
                         std::vector<double>* grad_out) const {
    const int N = online.rrows, d = online.rcols;
    if (N < 2) throw ContractViolation("info_nce: batch must be >= 2");
    if (target.rrows != N || target.rcols != d) throw ContractViolation("info_nce shape mismatch");
    std::vector<double> logits(static_cast<std::size_t>(N) * N);
    for (int b = 0; b < N; ++b)
      for (int j = 0; j < N; ++j) {
        double acc = 0.0;
        for (int k = 0; k < d; ++k)
          acc += online.rv[static_cast<std::size_t>(b) * d + k] * target.rv[static_cast<std::size_t>(j) * d + k];
        logits[static_cast<std::size_t>(b) * N + j] = acc / temp;
      }
    double loss = 0.0;
    std::vector<double> probs(static_cast<std::size_t>(N) * N);
    for (int b = 0; b < N; ++b) {
      double mx = logits[static_cast<std::size_t>(b) * N];
      for (int j = 1; j < N; ++j) mx = std::max(mx, logits[static_cast<std::size_t>(b) * N + j]);
      double z = 0.0;
      for (int j = 0; j < N; ++j) z += std::exp(logits[static_cast<std::size_t>(b) * N + j] - mx);
      const double lse = mx + std::log(z);
      loss -= logits[static_cast<std::size_t>(b) * N + b] - lse;
      for (int j = 0; j < N; ++j)
        probs[static_cast<std::size_t>(b) * N + j] = std::exp(logits[static_cast<std::size_t>(b) * N + j] - lse);
    }
    loss /= N;
    if (grad_out) {
      std::vector<double>& g = *grad_out;
      g.assign(static_cast<std::size_t>(N) * d, 0.0);
      for (int b = 0; b < N; ++b)
        for (int k = 0; k < d; ++k) {
          double acc = 0.0;
          for (int j = 0; j < N; ++j)
            acc += probs[static_cast<std::size_t>(b) * N + j] * target.rv[static_cast<std::size_t>(j) * d + k];
          acc -= target.rv[static_cast<std::size_t>(b) * d + k];
          g[static_cast<std::size_t>(b) * d + k] = acc / (N * temp);
        }
    }
    return loss;
  }

  // ---- backward dispatch ------------------------------------------------------

  void dispatch_backward(Node& n) {
    switch (n.op) {
      case Op::LeafC: {
        Parameter& p = ps_->at(n.param);
        if (n.cg.empty()) return;
        for (int i = 0; i < p.rows * p.cols; ++i) {
          p.grad[2 * static_cast<std::size_t>(i)] += n.cg.data()[i].real();
          p.grad[2 * static_cast<std::size_t>(i) + 1] += n.cg.data()[i].imag();
        }
        return;
      }
      case Op::LeafR: {
        Parameter& p = ps_->at(n.param);
        if (n.rg.empty()) return;
        for (std::size_t k = 0; k < p.grad.size(); ++k) p.grad[k] += n.rg[k];
        return;
      }
      case Op::ConstC:
      case Op::ConstR:
        return;

      case Op::HermFromFree: {
        if (n.cg.empty()) return;
        ComplexMatrix g = n.cg;
        g += n.cg.adjoint();
        g *= cplx(0.5, 0.0);
        add_cgrad(n.a, g);
        return;
      }
      case Op::ExpmGen: {
        if (n.cg.empty()) return;
        const EigResult& e = *n.eig;
        const int d = n.cv.rows();
        const double dt = n.x0;
        // G_H = V (conj(Phi) o (V^H G V)) V^H with the Daleckii-Krein kernel
        // Phi_jk = (e^{-i l_j dt} - e^{-i l_k dt}) / (l_j - l_k), diagonal
        // limit -i dt e^{-i l dt} for |l_j - l_k| < 1e-8.
        ComplexMatrix inner = e.vectors.adjoint() * n.cg * e.vectors;
        for (int j = 0; j < d; ++j)
          for (int k = 0; k < d; ++k) {
            const double lj = e.spectrum.values[static_cast<std::size_t>(j)];
            const double lk = e.spectrum.values[static_cast<std::size_t>(k)];
            cplx phi;
            if (std::abs(lj - lk) < 1e-8) {
              const double lm = 0.5 * (lj + lk);
              phi = cplx(0.0, -dt) * cplx(std::cos(lm * dt), -std::sin(lm * dt));
            } else {
              const cplx ej(std::cos(lj * dt), -std::sin(lj * dt));
              const cplx ek(std::cos(lk * dt), -std::sin(lk * dt));
              phi = (ej - ek) / cplx(lj - lk, 0.0);
            }
            inner(j, k) *= std::conj(phi);
          }
        add_cgrad(n.a, e.vectors * inner * e.vectors.adjoint());
        return;
      }
      case Op::MatMul: {
        if (n.cg.empty()) return;
        add_cgrad(n.a, n.cg * nodes_[static_cast<std::size_t>(n.b)].cv.adjoint());
        add_cgrad(n.b, nodes_[static_cast<std::size_t>(n.a)].cv.adjoint() * n.cg);
        return;
      }
      case Op::ConjUnitary: {
        if (n.cg.empty()) return;
        const ComplexMatrix& U = nodes_[static_cast<std::size_t>(n.a)].cv;
        const ComplexMatrix& A = nodes_[static_cast<std::size_t>(n.b)].cv;
        // pull back through the symmetrization first
        ComplexMatrix gh = n.cg;
        gh += n.cg.adjoint();
        gh *= cplx(0.5, 0.0);
        add_cgrad(n.b, U.adjoint() * gh * U);
        add_cgrad(n.a, gh * U * A.adjoint() + gh.adjoint() * U * A);
        return;
      }
      case Op::SandwichRenorm: {
        if (n.cg.empty()) return;
        const double r = n.x0;
        const ComplexMatrix& M = nodes_[static_cast<std::size_t>(n.a)].cv;
        const ComplexMatrix& rho = nodes_[static_cast<std::size_t>(n.b)].cv;
        ComplexMatrix gh = n.cg;
        gh += n.cg.adjoint();
        gh *= cplx(0.5, 0.0);
        // out = S'/r with S' = hermitize(S), r = Re Tr S':
        // G_{S'} = (G_h - Re<G_h,out> I) / r; the hermitize pullback is a
        // no-op on the already-symmetrized G_h.
        const double c = hs_inner_re(gh, n.cv);
        ComplexMatrix gs = gh;
        for (int i = 0; i < gs.rows(); ++i) gs(i, i) -= c;
        gs *= cplx(1.0 / r, 0.0);
        add_cgrad(n.b, M.adjoint() * gs * M);
        add_cgrad(n.a, gs * M * rho.adjoint() + gs.adjoint() * M * rho);
        return;
      }
      case Op::LiftEnv: {
        if (n.cg.empty()) return;
        const int d_env = static_cast<int>(n.x0);
        LatentDims d{n.cg.rows() / d_env, d_env};
        add_cgrad(n.a, partial_trace_env(n.cg, d));
        return;
      }
      case Op::PTraceEnv: {
        if (n.cg.empty()) return;
        add_cgrad(n.a, lift_to_joint(n.cg, static_cast<int>(n.x0)));
        return;
      }
      case Op::AAdagEps: {
        if (n.cg.empty()) return;
        const ComplexMatrix& A = nodes_[static_cast<std::size_t>(n.a)].cv;
        add_cgrad(n.a, (n.cg + n.cg.adjoint()) * A);
        return;
      }
      case Op::CMatFromReal: {
        if (n.cg.empty()) return;
        auto& g = rgrad_of(n.a);
        for (int i = 0; i < n.cv.rows() * n.cv.cols(); ++i) {
          g[2 * static_cast<std::size_t>(i)] += n.cg.data()[i].real();
          g[2 * static_cast<std::size_t>(i) + 1] += n.cg.data()[i].imag();
        }
        return;
      }
      case Op::AxpyC: {
        if (n.cg.empty()) return;
        add_cgrad(n.a, n.cg);
        ComplexMatrix gb = n.cg;
        gb *= cplx(n.x0, 0.0);
        add_cgrad(n.b, gb);
        return;
      }
      case Op::FlattenHerm: {
        if (n.rg.empty()) return;
        const ComplexMatrix& r = nodes_[static_cast<std::size_t>(n.a)].cv;
        const int d = r.rows();
        ComplexMatrix g(d, d);
        int p = 0;
        for (int i = 0; i < d; ++i) g(i, i) = cplx(n.rg[static_cast<std::size_t>(p++)], 0.0);
        for (int i = 0; i < d; ++i)
          for (int j = i + 1; j < d; ++j) {
            const double gre = n.rg[static_cast<std::size_t>(p++)];
            const double gim = n.rg[static_cast<std::size_t>(p++)];
            g(i, j) = cplx(gre, gim);
          }
        add_cgrad(n.a, g);
        return;
      }

      case Op::MatVec: {
        if (n.rg.empty()) return;
        Node& W = nodes_[static_cast<std::size_t>(n.a)];
        Node& X = nodes_[static_cast<std::size_t>(n.b)];
        if (W.needs_grad) {
          auto& gw = rgrad_of(n.a);
          for (int i = 0; i < W.rrows; ++i)
            for (int j = 0; j < W.rcols; ++j)
              gw[static_cast<std::size_t>(i) * W.rcols + j] += n.rg[static_cast<std::size_t>(i)] * X.rv[static_cast<std::size_t>(j)];
        }
        if (X.needs_grad) {
          auto& gx = rgrad_of(n.b);
          for (int i = 0; i < W.rrows; ++i) {
            const double gi = n.rg[static_cast<std::size_t>(i)];
            if (gi == 0.0) continue;
            const double* wi = W.rv.data() + static_cast<std::size_t>(i) * W.rcols;
            for (int j = 0; j < W.rcols; ++j) gx[static_cast<std::size_t>(j)] += gi * wi[j];
          }
        }
        return;
      }
      case Op::AddR: {
        if (n.rg.empty()) return;
        if (nodes_[static_cast<std::size_t>(n.a)].needs_grad) {
          auto& g = rgrad_of(n.a);
          for (std::size_t k = 0; k < g.size(); ++k) g[k] += n.rg[k];
        }
        if (nodes_[static_cast<std::size_t>(n.b)].needs_grad) {
          auto& g = rgrad_of(n.b);
          for (std::size_t k = 0; k < g.size(); ++k) g[k] += n.rg[k];
        }
        return;
      }
      case Op::SubR: {
        if (n.rg.empty()) return;
        if (nodes_[static_cast<std::size_t>(n.a)].needs_grad) {
          auto& g = rgrad_of(n.a);
          for (std::size_t k = 0; k < g.size(); ++k) g[k] += n.rg[k];
        }
        if (nodes_[static_cast<std::size_t>(n.b)].needs_grad) {
          auto& g = rgrad_of(n.b);
          for (std::size_t k = 0; k < g.size(); ++k) g[k] -= n.rg[k];
        }
        return;
      }
      case Op::MulR: {
        if (n.rg.empty()) return;
        const Node& A = nodes_[static_cast<std::size_t>(n.a)];
        const Node& B = nodes_[static_cast<std::size_t>(n.b)];
        if (A.needs_grad) {
          auto& g = rgrad_of(n.a);
          for (std::size_t k = 0; k < g.size(); ++k) g[k] += n.rg[k] * B.rv[k];
        }
        if (B.needs_grad) {
          auto& g = rgrad_of(n.b);
          for (std::size_t k = 0; k < g.size(); ++k) g[k] += n.rg[k] * A.rv[k];
        }
        return;
      }
      case Op::ScaleR: {
        if (n.rg.empty()) return;
        auto& g = rgrad_of(n.a);
        for (std::size_t k = 0; k < g.size(); ++k) g[k] += n.rg[k] * n.x0;
        return;
      }
      case Op::Tanh: {
        if (n.rg.empty()) return;
        auto& g = rgrad_of(n.a);
        for (std::size_t k = 0; k < g.size(); ++k) g[k] += n.rg[k] * (1.0 - n.rv[k] * n.rv[k]);
        return;
      }
      case Op::Sigmoid: {
        if (n.rg.empty()) return;
        auto& g = rgrad_of(n.a);
        for (std::size_t k = 0; k < g.size(); ++k) g[k] += n.rg[k] * n.rv[k] * (1.0 - n.rv[k]);
        return;
      }
      case Op::Concat: {
        if (n.rg.empty()) return;
        std::size_t off = 0;
        for (int p : n.ins) {
          Node& src = nodes_[static_cast<std::size_t>(p)];
          if (src.needs_grad) {
            auto& g = rgrad_of(p);
            for (std::size_t k = 0; k < src.rv.size(); ++k) g[k] += n.rg[off + k];
          }
          off += src.rv.size();
        }
        return;
      }
      case Op::Slice: {
        if (n.rg.empty()) return;
        auto& g = rgrad_of(n.a);
        const std::size_t off = static_cast<std::size_t>(n.x0);
        for (std::size_t k = 0; k < n.rv.size(); ++k) g[off + k] += n.rg[k];
        return;
      }
      case Op::SqDist: {
        if (n.rg.empty()) return;
        const double gs = n.rg[0];
        const Node& A = nodes_[static_cast<std::size_t>(n.a)];
        const Node& B = nodes_[static_cast<std::size_t>(n.b)];
        if (A.needs_grad) {
          auto& g = rgrad_of(n.a);
          for (std::size_t k = 0; k < g.size(); ++k) g[k] += 2.0 * gs * (A.rv[k] - B.rv[k]);
        }
        if (B.needs_grad) {
          auto& g = rgrad_of(n.b);
          for (std::size_t k = 0; k < g.size(); ++k) g[k] -= 2.0 * gs * (A.rv[k] - B.rv[k]);
        }
        return;
      }
      case Op::MeanScalars: {
        if (n.rg.empty()) return;
        const double gs = n.rg[0] / static_cast<double>(n.ins.size());
        for (int x : n.ins)
          if (nodes_[static_cast<std::size_t>(x)].needs_grad) rgrad_of(x)[0] += gs;
        return;
      }
      case Op::StackRows: {
        if (n.rg.empty()) return;
        std::size_t off = 0;
        for (int r : n.ins) {
          Node& src = nodes_[static_cast<std::size_t>(r)];
          if (src.needs_grad) {
            auto& g = rgrad_of(r);
            for (std::size_t k = 0; k < src.rv.size(); ++k) g[k] += n.rg[off + k];
          }
          off += src.rv.size();
        }
        return;
      }

      case Op::VicregPen: {
        if (n.rg.empty()) return;
        std::vector<double> g;
        vicreg_forward(nodes_[static_cast<std::size_t>(n.a)], &g);
        auto& ga = rgrad_of(n.a);
        for (std::size_t k = 0; k < ga.size(); ++k) ga[k] += n.rg[0] * g[k];
        return;
      }
      case Op::BarlowPen: {
        if (n.rg.empty()) return;
        std::vector<double> g;
        barlow_forward(nodes_[static_cast<std::size_t>(n.a)], nodes_[static_cast<std::size_t>(n.b)], &g);
        auto& ga = rgrad_of(n.a);
        for (std::size_t k = 0; k < ga.size(); ++k) ga[k] += n.rg[0] * g[k];
        return;
      }
      case Op::LogdetPen: {
        if (n.rg.empty()) return;
        std::vector<double> g;
        logdet_forward(nodes_[static_cast<std::size_t>(n.a)], n.x0, &g);
        auto& ga = rgrad_of(n.a);
        for (std::size_t k = 0; k < ga.size(); ++k) ga[k] += n.rg[0] * g[k];
        return;
      }
      case Op::InfoNce: {
        if (n.rg.empty()) return;
        std::vector<double> g;
        infonce_forward(nodes_[static_cast<std::size_t>(n.a)], nodes_[static_cast<std::size_t>(n.b)], n.x0, &g);
        auto& ga = rgrad_of(n.a);
        for (std::size_t k = 0; k < ga.size(); ++k) ga[k] += n.rg[0] * g[k];
        return;
      }
      case Op::BceLogits: {
        if (n.rg.empty()) return;
        const double gs = n.rg[0] / static_cast<double>(n.ins.size());
        for (std::size_t i = 0; i < n.ins.size(); ++i) {
          Node& z = nodes_[static_cast<std::size_t>(n.ins[i])];
          if (!z.needs_grad) continue;
          const double sig = 1.0 / (1.0 + std::exp(-z.rv[0]));
          rgrad_of(n.ins[i])[0] += gs * (sig - n.aux[i]);
        }
        return;
      }
    }
  }

  ParamStore* ps_;
  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Gradient checking: central differences with step 1e-5 on a random subset
// of at least 64 real coordinates (all of them when fewer exist). The
// reported relative error uses max(|analytic|, |numeric|, 1e-8) as the
// denominator.
// ---------------------------------------------------------------------------

struct GradCheckReport {
  double max_rel_err = 0.0;
  int coords_checked = 0;
};

// `build` must construct the scalar objective on the given tape
// deterministically (same inputs -> same loss).
inline GradCheckReport grad_check(ParamStore& ps,
                                  const std::function<int(Tape&)>& build,
                                  Rng& rng, int target_coords = 64,
                                  double step = 1e-5) {
  ps.zero_grad();
  {
    Tape t(ps);
    const int loss = build(t);
    if (!std::isfinite(t.value(loss))) throw NumericError("grad_check: non-finite loss");
    t.backward(loss);
  }
  std::vector<std::pair<int, std::size_t>> coords;
  for (int pi = 0; pi < ps.count(); ++pi)
    for (std::size_t k = 0; k < ps.at(pi).value.size(); ++k) coords.emplace_back(pi, k);
  rng.shuffle(coords);
  const std::size_t n_check = std::min<std::size_t>(coords.size(), static_cast<std::size_t>(target_coords));

  auto eval = [&]() {
    Tape t(ps);
    return t.value(build(t));
  };

  GradCheckReport rep;
  rep.coords_checked = static_cast<int>(n_check);
  for (std::size_t c = 0; c < n_check; ++c) {
    auto [pi, k] = coords[c];
    double& v = ps.at(pi).value[k];
    const double saved = v;
    v = saved + step;
    const double lp = eval();
    v = saved - step;
    const double lm = eval();
    v = saved;
    const double numeric = (lp - lm) / (2.0 * step);
    const double analytic = ps.at(pi).grad[k];
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    rep.max_rel_err = std::max(rep.max_rel_err, std::abs(analytic - numeric) / denom);
  }
  return rep;
}

}  // namespace uwm::diff
