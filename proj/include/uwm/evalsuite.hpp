#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "uwm/errors.hpp"
#include "uwm/models.hpp"
#include "uwm/qlinalg.hpp"
#include "uwm/rng.hpp"
#include "uwm/springworld.hpp"

namespace uwm {

struct ModelHandle {
  JepaModel* model = nullptr;
  const diff::ParamStore* theta = nullptr;
  const diff::ParamStore* xi = nullptr;
};

// ---------------------------------------------------------------------------
// Frozen linear probes: closed-form ridge on standardized features, scored
// as R^2 = 1 - SSE/SST on a held-out split. Negative values are reported
// as-is.
// ---------------------------------------------------------------------------

struct LinearProbe {
  std::vector<double> w;
  double b = 0.0;
  std::vector<double> mu, sigma;  // feature standardization from the fit split
  double ridge = 1e-3;

  double predict(const std::vector<double>& x) const {
    double acc = b;
    for (std::size_t j = 0; j < w.size(); ++j) acc += w[j] * (x[j] - mu[j]) / sigma[j];
    return acc;
  }
};

namespace detail {

// Cholesky solve for small SPD systems.
inline std::vector<double> spd_solve(std::vector<double> a, std::vector<double> rhs, int n) {
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j <= i; ++j) {
      double s = a[static_cast<std::size_t>(i) * n + j];
      for (int k = 0; k < j; ++k)
        s -= a[static_cast<std::size_t>(i) * n + k] * a[static_cast<std::size_t>(j) * n + k];
      if (i == j) {
        if (s <= 0.0) throw NumericError("spd_solve: matrix not positive definite");
        a[static_cast<std::size_t>(i) * n + j] = std::sqrt(s);
      } else {
        a[static_cast<std::size_t>(i) * n + j] = s / a[static_cast<std::size_t>(j) * n + j];
      }
    }
  }
  for (int i = 0; i < n; ++i) {
    double s = rhs[static_cast<std::size_t>(i)];
    for (int k = 0; k < i; ++k) s -= a[static_cast<std::size_t>(i) * n + k] * rhs[static_cast<std::size_t>(k)];
    rhs[static_cast<std::size_t>(i)] = s / a[static_cast<std::size_t>(i) * n + i];
  }
  for (int i = n - 1; i >= 0; --i) {
    double s = rhs[static_cast<std::size_t>(i)];
    for (int k = i + 1; k < n; ++k) s -= a[static_cast<std::size_t>(k) * n + i] * rhs[static_cast<std::size_t>(k)];
    rhs[static_cast<std::size_t>(i)] = s / a[static_cast<std::size_t>(i) * n + i];
  }
  return rhs;
}

}  // namespace detail

inline LinearProbe fit_probe(const std::vector<std::vector<double>>& latents,
                             const std::vector<double>& targets, double ridge = 1e-3) {
  const int n = static_cast<int>(latents.size());
  if (n < 10) throw ContractViolation("fit_probe: need at least 10 samples");
  const int d = static_cast<int>(latents[0].size());
  double ty = 0.0, tyy = 0.0;
  for (double y : targets) ty += y, tyy += y * y;
  const double var_y = tyy / n - (ty / n) * (ty / n);
  if (var_y <= 1e-14) throw ContractViolation("fit_probe: zero-variance targets");

  LinearProbe p;
  p.ridge = ridge;
  p.mu.assign(static_cast<std::size_t>(d), 0.0);
  p.sigma.assign(static_cast<std::size_t>(d), 0.0);
  for (const auto& x : latents)
    for (int j = 0; j < d; ++j) p.mu[static_cast<std::size_t>(j)] += x[static_cast<std::size_t>(j)];
  for (auto& m : p.mu) m /= n;
  for (const auto& x : latents)
    for (int j = 0; j < d; ++j) {
      const double c = x[static_cast<std::size_t>(j)] - p.mu[static_cast<std::size_t>(j)];
      p.sigma[static_cast<std::size_t>(j)] += c * c;
    }
  for (auto& s : p.sigma) s = std::sqrt(s / n + 1e-12);

  // normal equations on standardized features
  std::vector<double> g(static_cast<std::size_t>(d) * d, 0.0), rhs(static_cast<std::size_t>(d), 0.0);
  const double ybar = ty / n;
  for (int i = 0; i < n; ++i) {
    std::vector<double> z(static_cast<std::size_t>(d));
    for (int j = 0; j < d; ++j)
      z[static_cast<std::size_t>(j)] =
          (latents[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] - p.mu[static_cast<std::size_t>(j)]) /
          p.sigma[static_cast<std::size_t>(j)];
    const double yc = targets[static_cast<std::size_t>(i)] - ybar;
    for (int j = 0; j < d; ++j) {
      rhs[static_cast<std::size_t>(j)] += z[static_cast<std::size_t>(j)] * yc / n;
      for (int k = j; k < d; ++k)
        g[static_cast<std::size_t>(j) * d + k] += z[static_cast<std::size_t>(j)] * z[static_cast<std::size_t>(k)] / n;
    }
  }
  for (int j = 0; j < d; ++j) {
    for (int k = 0; k < j; ++k) g[static_cast<std::size_t>(j) * d + k] = g[static_cast<std::size_t>(k) * d + j];
    g[static_cast<std::size_t>(j) * d + j] += ridge;
  }
  p.w = detail::spd_solve(std::move(g), std::move(rhs), d);
  p.b = ybar;  // intercept on centered target; features are centered too
  return p;
}

inline double probe_r2(const LinearProbe& p, const std::vector<std::vector<double>>& latents,
                       const std::vector<double>& targets) {
  const int n = static_cast<int>(latents.size());
  double ybar = 0.0;
  for (double y : targets) ybar += y;
  ybar /= n;
  double sse = 0.0, sst = 0.0;
  for (int i = 0; i < n; ++i) {
    const double e = targets[static_cast<std::size_t>(i)] - p.predict(latents[static_cast<std::size_t>(i)]);
    sse += e * e;
    const double c = targets[static_cast<std::size_t>(i)] - ybar;
    sst += c * c;
  }
  if (sst <= 1e-14) throw ContractViolation("probe_r2: zero-variance targets");
  return 1.0 - sse / sst;
}

// ---------------------------------------------------------------------------
// Latent extraction helpers.
// ---------------------------------------------------------------------------

// Context latent at each anchor; target is the next-step hidden velocity.
inline void context_latents(const ModelHandle& h, const std::vector<Episode>& split,
                            const std::vector<Anchor>& anchors,
                            std::vector<std::vector<double>>& lat, std::vector<double>& vel) {
  lat.clear();
  vel.clear();
  for (const Anchor& a : anchors) {
    const Episode& e = split[static_cast<std::size_t>(a.episode_index)];
    lat.push_back(h.model->latent_plain(*h.theta, context_input(e, a.t), 0, nullptr));
    vel.push_back(e.vs[static_cast<std::size_t>(a.t + 1)]);
  }
}

// Held-out context probe (fit on probe split, scored on eval split).
struct ContextProbeResult {
  double r2 = 0.0;
  double effective_rank = 0.0;
};

inline double effective_rank(const std::vector<std::vector<double>>& latents) {
  const int n = static_cast<int>(latents.size());
  const int d = static_cast<int>(latents[0].size());
  std::vector<double> mu(static_cast<std::size_t>(d), 0.0);
  for (const auto& x : latents)
    for (int j = 0; j < d; ++j) mu[static_cast<std::size_t>(j)] += x[static_cast<std::size_t>(j)];
  for (auto& m : mu) m /= n;
  ComplexMatrix cov(d, d);
  for (const auto& x : latents)
    for (int j = 0; j < d; ++j)
      for (int k = 0; k < d; ++k)
        cov(j, k) += (x[static_cast<std::size_t>(j)] - mu[static_cast<std::size_t>(j)]) *
                     (x[static_cast<std::size_t>(k)] - mu[static_cast<std::size_t>(k)]);
  for (int j = 0; j < d; ++j)
    for (int k = 0; k < d; ++k) cov(j, k) /= std::max(1, n - 1);
  const Spectrum sp = hermitian_eig(cov).spectrum;
  // eigenvalues below 1e-12 are treated as exact zeros; a batch with no
  // surviving variance has effective rank 1 by convention
  double total = 0.0;
  for (double lam : sp.values)
    if (lam >= 1e-12) total += lam;
  if (total <= 0.0) return 1.0;
  double ent = 0.0;
  for (double lam : sp.values) {
    if (lam < 1e-12) continue;
    const double q = lam / total;
    ent -= q * std::log(q);
  }
  return std::exp(ent);
}

inline ContextProbeResult context_probe(const ModelHandle& h, const Dataset& data,
                                        double ridge = 1e-3) {
  std::vector<std::vector<double>> fit_lat, eval_lat;
  std::vector<double> fit_y, eval_y;
  context_latents(h, data.probe, data.probe_anchors, fit_lat, fit_y);
  context_latents(h, data.eval, data.eval_anchors, eval_lat, eval_y);
  const LinearProbe p = fit_probe(fit_lat, fit_y, ridge);
  ContextProbeResult out;
  out.r2 = probe_r2(p, eval_lat, eval_y);
  out.effective_rank = effective_rank(eval_lat);
  return out;
}

// ---------------------------------------------------------------------------
// Teacher-vs-blind probing. For each horizon the probe is fit once on the
// teacher latents of the probe split and frozen; teacher and blind are then
// scored on the eval split. DeltaR2 = teacher - blind.
// ---------------------------------------------------------------------------

struct DeltaR2Row {
  int k = 0;
  double teacher = 0.0;
  double blind = 0.0;
  double delta = 0.0;
};

inline std::vector<DeltaR2Row> delta_r2(const ModelHandle& h, const Dataset& data,
                                        const std::vector<int>& horizons, double ridge = 1e-3) {
  if (data.eval_anchors.size() < 20) throw ContractViolation("delta_r2: too few eval anchors");
  std::vector<DeltaR2Row> rows;
  for (int k : horizons) {
    std::vector<std::vector<double>> fit_lat, teach_lat, blind_lat;
    std::vector<double> fit_y, eval_y;
    for (const Anchor& a : data.probe_anchors) {
      const Episode& e = data.probe[static_cast<std::size_t>(a.episode_index)];
      fit_lat.push_back(h.model->latent_plain(*h.xi, context_input(e, a.t + k), 0, nullptr));
      fit_y.push_back(e.vs[static_cast<std::size_t>(a.t + k)]);
    }
    for (const Anchor& a : data.eval_anchors) {
      const Episode& e = data.eval[static_cast<std::size_t>(a.episode_index)];
      teach_lat.push_back(h.model->latent_plain(*h.xi, context_input(e, a.t + k), 0, nullptr));
      blind_lat.push_back(h.model->latent_plain(*h.theta, context_input(e, a.t), k, nullptr));
      eval_y.push_back(e.vs[static_cast<std::size_t>(a.t + k)]);
    }
    const LinearProbe p = fit_probe(fit_lat, fit_y, ridge);
    DeltaR2Row r;
    r.k = k;
    r.teacher = probe_r2(p, teach_lat, eval_y);
    r.blind = probe_r2(p, blind_lat, eval_y);
    r.delta = r.teacher - r.blind;
    rows.push_back(r);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Top-1 retrieval of the true future latent among a candidate pool, in the
// projected space; ties resolved toward the lower candidate index.
// ---------------------------------------------------------------------------

struct RetrievalRow {
  int k = 0;
  double top1 = 0.0;
};

inline std::vector<RetrievalRow> retrieval_top1(const ModelHandle& h, const Dataset& data,
                                                const std::vector<int>& horizons, int pool) {
  if (static_cast<int>(data.eval_anchors.size()) < pool)
    throw ContractViolation("retrieval_top1: candidate pool larger than anchor set");
  if (pool < 100) throw ContractViolation("retrieval_top1: pool must be >= 100");
  std::vector<RetrievalRow> rows;
  for (int k : horizons) {
    std::vector<std::vector<double>> pred, cand;
    for (int i = 0; i < pool; ++i) {
      const Anchor& a = data.eval_anchors[static_cast<std::size_t>(i)];
      const Episode& e = data.eval[static_cast<std::size_t>(a.episode_index)];
      pred.push_back(h.model->latent_plain(*h.theta, context_input(e, a.t), k, nullptr));
      cand.push_back(h.model->latent_plain(*h.xi, context_input(e, a.t + k), 0, nullptr));
    }
    int hits = 0;
    for (int i = 0; i < pool; ++i) {
      int best = 0;
      double best_d = 0.0;
      for (int j = 0; j < pool; ++j) {
        double dist = 0.0;
        for (std::size_t c = 0; c < pred[static_cast<std::size_t>(i)].size(); ++c) {
          const double diff = pred[static_cast<std::size_t>(i)][c] - cand[static_cast<std::size_t>(j)][c];
          dist += diff * diff;
        }
        if (j == 0 || dist < best_d) {
          best_d = dist;
          best = j;
        }
      }
      hits += best == i ? 1 : 0;
    }
    rows.push_back(RetrievalRow{k, static_cast<double>(hits) / pool});
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Hidden-velocity indicator battery. The linear classifier is fit on
// correct-action rolled latents of the probe-split indicator samples and
// frozen; each test-time condition perturbs only the action sequence.
// ---------------------------------------------------------------------------

struct IndicatorOutcome {
  std::map<std::string, double> accuracy;
  std::map<std::string, std::pair<int, int>> histogram;  // predictions (class0, class1)
  double prior = 0.5;  // majority-class rate of the eval set
  double permuted_label_accuracy = 0.0;
};

inline std::vector<int> condition_actions(const std::string& cond, const std::vector<int>& correct,
                                          Rng& rng) {
  if (cond == "correct") return correct;
  if (cond == "no_action") return std::vector<int>(correct.size(), 0);
  if (cond == "shuffled") {
    std::vector<int> s = correct;
    rng.shuffle(s);
    return s;
  }
  if (cond == "wrong") {
    std::vector<int> w;
    for (std::size_t j = 0; j < correct.size(); ++j)
      w.push_back(action_alphabet()[static_cast<std::size_t>(rng.below(5))]);
    return w;
  }
  if (cond == "negated") {
    std::vector<int> n = correct;
    for (int& a : n) a = -a;
    return n;
  }
  if (cond == "reversed") {
    std::vector<int> r(correct.rbegin(), correct.rend());
    return r;
  }
  throw ConfigError("unknown action condition '" + cond + "'");
}

inline IndicatorOutcome indicator_battery(const ModelHandle& h, const Dataset& data,
                                          const std::vector<std::string>& conditions,
                                          std::uint64_t eval_seed, double ridge = 1e-3) {
  if (data.indicator_eval.empty()) throw ContractViolation("indicator_battery: no eval samples");
  const int K = data.cfg.indicator_k;

  auto rolled = [&](const std::vector<Episode>& split, const IndicatorSample& s,
                    const std::vector<int>& acts) {
    const Episode& e = split[static_cast<std::size_t>(s.episode_index)];
    return h.model->latent_plain(*h.theta, context_input(e, s.t), K, &acts);
  };

  std::vector<std::vector<double>> fit_lat;
  std::vector<double> fit_y;
  for (const auto& s : data.indicator_train) {
    fit_lat.push_back(rolled(data.probe, s, s.actions));
    fit_y.push_back(s.label ? 1.0 : -1.0);
  }
  const LinearProbe clf = fit_probe(fit_lat, fit_y, ridge);

  IndicatorOutcome out;
  int n1 = 0;
  for (const auto& s : data.indicator_eval) n1 += s.label;
  const int n = static_cast<int>(data.indicator_eval.size());
  out.prior = std::max(n1, n - n1) / static_cast<double>(n);

  for (const auto& cond : conditions) {
    Rng rng(mix64(eval_seed, std::hash<std::string>{}(cond)));
    int hits = 0, pred0 = 0, pred1 = 0;
    for (const auto& s : data.indicator_eval) {
      const std::vector<int> acts = condition_actions(cond, s.actions, rng);
      const double yhat = clf.predict(rolled(data.eval, s, acts));
      const int pred = yhat > 0.0 ? 1 : 0;
      (pred ? pred1 : pred0)++;
      hits += pred == s.label ? 1 : 0;
    }
    out.accuracy[cond] = static_cast<double>(hits) / n;
    out.histogram[cond] = {pred0, pred1};
  }

  // destroyed-signal sanity: permuted labels should give ~prior accuracy
  {
    Rng prm(mix64(eval_seed, 0x7065726Dull));
    std::vector<double> perm_y = fit_y;
    prm.shuffle(perm_y);
    const LinearProbe clf_perm = fit_probe(fit_lat, perm_y, ridge);
    int hits = 0;
    for (const auto& s : data.indicator_eval) {
      const double yhat = clf_perm.predict(rolled(data.eval, s, s.actions));
      hits += ((yhat > 0.0 ? 1 : 0) == s.label) ? 1 : 0;
    }
    out.permuted_label_accuracy = static_cast<double>(hits) / n;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Action-perturbation controls: HS distance between the predicted reduced
// state and the reduced target encoded from the correct counterfactual
// branch. "base" rolls the base dynamics (the action term zeroed at eval).
// ---------------------------------------------------------------------------

struct HsControlsOutcome {
  std::map<std::string, double> mean_distance;
};

inline HsControlsOutcome action_hs_controls(const ModelHandle& h, const Dataset& data,
                                            const std::vector<std::string>& conditions,
                                            std::uint64_t eval_seed, int max_samples = 200) {
  auto* uwm = dynamic_cast<UwmModel*>(h.model);
  if (!uwm || !uwm->action_conditioned())
    throw ContractViolation("action_hs_controls: needs an action-conditioned UWM model");
  const int K = data.cfg.indicator_k;
  const LatentDims dims = uwm->config().dims;

  HsControlsOutcome out;
  std::map<std::string, double> sums;
  const int n = std::min<int>(max_samples, static_cast<int>(data.indicator_eval.size()));
  Rng branch_rng(mix64(eval_seed, 0x68736374ull));
  std::map<std::string, Rng> cond_rngs;
  for (const auto& c : conditions)
    cond_rngs.emplace(c, Rng(mix64(eval_seed, std::hash<std::string>{}(c))));

  for (int i = 0; i < n; ++i) {
    const IndicatorSample& s = data.indicator_eval[static_cast<std::size_t>(i)];
    const Episode& e = data.eval[static_cast<std::size_t>(s.episode_index)];
    // fresh counterfactual action sequence defines the correct branch
    std::vector<int> correct;
    for (int j = 0; j < K; ++j)
      correct.push_back(action_alphabet()[static_cast<std::size_t>(branch_rng.below(5))]);
    const Branch br = counterfactual_rollout(e.state_at(s.t), correct, data.params, data.seed, e.id);
    const ComplexMatrix target_red = partial_trace_env(
        uwm->encode_plain(*h.xi, context_with_branch(e, s.t, br, correct)), dims);
    const ComplexMatrix rho_t = uwm->encode_plain(*h.theta, context_input(e, s.t));
    for (const auto& cond : conditions) {
      ComplexMatrix pred;
      if (cond == "base") {
        pred = uwm->predict_plain(*h.theta, rho_t, K, nullptr);
      } else {
        const std::vector<int> acts = condition_actions(cond, correct, cond_rngs.at(cond));
        pred = uwm->predict_plain(*h.theta, rho_t, K, &acts);
      }
      sums[cond] += std::sqrt(hs_distance_sq(partial_trace_env(pred, dims), target_red));
    }
  }
  for (auto& [cond, sum] : sums) out.mean_distance[cond] = sum / n;
  return out;
}

// ---------------------------------------------------------------------------
// Collapse dashboard entry and rule.
// ---------------------------------------------------------------------------

struct CollapseOutcome {
  double probe_r2 = 0.0;
  double eff_rank = 0.0;
  bool pass = false;
};

inline CollapseOutcome collapse_entry(const ModelHandle& h, const Dataset& data) {
  const ContextProbeResult p = context_probe(h, data);
  CollapseOutcome c;
  c.probe_r2 = p.r2;
  c.eff_rank = p.effective_rank;
  c.pass = !(c.probe_r2 < 0.05 || c.eff_rank < 2.0);
  return c;
}

// ---------------------------------------------------------------------------
// Seed statistics: mean/std and Welch's two-sided t-test.
// ---------------------------------------------------------------------------

struct SeedStats {
  double mean = 0.0;
  double stddev = 0.0;  // unbiased
  int n = 0;
};

inline SeedStats seed_stats(const std::vector<double>& xs) {
  SeedStats s;
  s.n = static_cast<int>(xs.size());
  if (s.n < 1) throw ContractViolation("seed_stats: empty");
  for (double x : xs) s.mean += x;
  s.mean /= s.n;
  if (s.n > 1) {
    double acc = 0.0;
    for (double x : xs) acc += (x - s.mean) * (x - s.mean);
    s.stddev = std::sqrt(acc / (s.n - 1));
  }
  return s;
}

namespace detail {

inline double betacf(double a, double b, double x) {
  const int kMaxIter = 200;
  const double kEps = 3e-14, kFpMin = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0, d = 1.0 - qab * x / qap;
  if (std::abs(d) < kFpMin) d = kFpMin;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::abs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::abs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) break;
  }
  return h;
}

// Regularized incomplete beta I_x(a, b).
inline double incbeta(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double lnbt = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) +
                      b * std::log(1.0 - x);
  const double bt = std::exp(lnbt);
  if (x < (a + 1.0) / (a + b + 2.0)) return bt * betacf(a, b, x) / a;
  return 1.0 - bt * betacf(b, a, 1.0 - x) / b;
}

}  // namespace detail

// Two-sided p for Student's t with nu degrees of freedom.
inline double student_two_sided_p(double t, double nu) {
  if (!std::isfinite(t)) return 0.0;
  const double x = nu / (nu + t * t);
  return detail::incbeta(0.5 * nu, 0.5, x);
}

struct WelchResult {
  double t = 0.0;
  double dof = 0.0;
  double p = 1.0;
};

inline WelchResult welch_test(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() < 2 || b.size() < 2) throw ContractViolation("welch_test: need >= 2 seeds per group");
  const SeedStats sa = seed_stats(a), sb = seed_stats(b);
  const double va = sa.stddev * sa.stddev / sa.n;
  const double vb = sb.stddev * sb.stddev / sb.n;
  WelchResult w;
  if (va + vb <= 0.0) {
    // both groups degenerate: identical means give p = 1, otherwise 0
    w.t = sa.mean == sb.mean ? 0.0 : std::numeric_limits<double>::infinity();
    w.dof = static_cast<double>(sa.n + sb.n - 2);
    w.p = sa.mean == sb.mean ? 1.0 : 0.0;
    return w;
  }
  w.t = (sa.mean - sb.mean) / std::sqrt(va + vb);
  w.dof = (va + vb) * (va + vb) /
          (va * va / (sa.n - 1) + vb * vb / (sb.n - 1));
  w.p = student_two_sided_p(w.t, w.dof);
  return w;
}

}  // namespace uwm
