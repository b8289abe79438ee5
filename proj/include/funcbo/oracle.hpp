#pragma once

// Ground-truth computations for tests and diagnostics. Nothing here is called
// by the algorithms under test, and only numkit primitives are shared with
// them: the quadratic-testbed solutions are assembled from the raw data with
// their own loops.

#include <algorithm>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "funcbo/numkit.hpp"
#include "funcbo/tasks.hpp"

namespace funcbo::oracle {

struct OracleReport {
  std::string quantity;
  double algorithm = 0.0;  // norm of the algorithm's value (or the scalar itself)
  double oracle = 0.0;     // norm of the oracle's value
  double abs_error = 0.0;
  double rel_error = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

inline OracleReport compare(const std::string& quantity, std::span<const double> alg,
                            std::span<const double> ora, double tol) {
  require_dims(alg.size(), ora.size(), "oracle compare");
  OracleReport r;
  r.quantity = quantity;
  r.algorithm = norm2(alg);
  r.oracle = norm2(ora);
  r.abs_error = norm2(sub(alg, ora));
  r.rel_error = r.abs_error / std::max(1e-12, r.oracle);
  r.tolerance = tol;
  r.pass = r.rel_error <= tol;
  return r;
}

inline OracleReport compare_scalar(const std::string& quantity, double alg, double ora, double tol) {
  const double a[1] = {alg}, o[1] = {ora};
  OracleReport r = compare(quantity, a, o, tol);
  r.algorithm = alg;
  r.oracle = ora;
  return r;
}

// ---------------------------------------------------------------------------
// Quadratic testbed

/// f_ω(t_i) = W t_i for every row, W = ω reshaped d_v x d_t.
inline Mat quad_outer_predictions(const QuadInstance& q, const ParamVector& omega, const Dataset& d) {
  const auto& o = q.opts;
  Mat f(d.size(), o.d_v);
  for (std::size_t i = 0; i < d.size(); ++i)
    for (std::size_t k = 0; k < o.d_v; ++k) {
      double s = 0.0;
      for (std::size_t l = 0; l < o.d_t; ++l) s += omega[k * o.d_t + l] * d.y(i, l);
      f(i, k) = s;
    }
  return f;
}

/// V* = argmin_V mean_i ‖f_ω(t_i) − V x_i‖² + (R_in/2)‖V‖²  (d_v x d_x)
inline Mat exact_inner_solve(const QuadInstance& q, const ParamVector& omega) {
  const auto& o = q.opts;
  const Dataset& d = q.d_in;
  const double n = static_cast<double>(d.size());
  const Mat f = quad_outer_predictions(q, omega, d);
  Mat lhs(o.d_x, o.d_x);
  Mat rhs(o.d_x, o.d_v);
  for (std::size_t i = 0; i < d.size(); ++i)
    for (std::size_t a = 0; a < o.d_x; ++a) {
      for (std::size_t b = 0; b < o.d_x; ++b) lhs(a, b) += 2.0 * d.x(i, a) * d.x(i, b) / n;
      for (std::size_t k = 0; k < o.d_v; ++k) rhs(a, k) += 2.0 * d.x(i, a) * f(i, k) / n;
    }
  for (std::size_t a = 0; a < o.d_x; ++a) lhs(a, a) += o.ridge;
  return transpose(spd_solve(lhs, rhs));
}

/// Restricted adjoint weights from the full quadratic over vec(W_a):
/// Q = mean_in (x xᵀ ⊗ H) + R_adj I with H = 2I, b = mean_out x ⊗ d.
inline Mat exact_adjoint_solve(const QuadInstance& q, const ParamVector& omega, const Mat& v_star) {
  (void)omega;  // the squared outer loss does not depend on ω
  const auto& o = q.opts;
  const std::size_t dim = o.d_v * o.d_x;
  Mat Q(dim, dim);
  Vec b(dim, 0.0);
  const double n = static_cast<double>(q.d_in.size());
  const double m = static_cast<double>(q.d_out.size());
  for (std::size_t i = 0; i < q.d_in.size(); ++i)
    for (std::size_t k = 0; k < o.d_v; ++k)
      for (std::size_t l = 0; l < o.d_x; ++l)
        for (std::size_t l2 = 0; l2 < o.d_x; ++l2)
          Q(k * o.d_x + l, k * o.d_x + l2) += 2.0 * q.d_in.x(i, l) * q.d_in.x(i, l2) / n;
  for (std::size_t r = 0; r < dim; ++r) Q(r, r) += o.ridge;
  for (std::size_t j = 0; j < q.d_out.size(); ++j)
    for (std::size_t k = 0; k < o.d_v; ++k) {
      double h = 0.0;
      for (std::size_t l = 0; l < o.d_x; ++l) h += v_star(k, l) * q.d_out.x(j, l);
      const double dk = 2.0 * (h - q.d_out.y(j, o.d_t + k));
      for (std::size_t l = 0; l < o.d_x; ++l) b[k * o.d_x + l] += q.d_out.x(j, l) * dk / m;
    }
  for (double& e : b) e = -e;
  return Mat(o.d_v, o.d_x, spd_solve(Q, b));
}

/// F(ω) = mean_out ‖o − V*(ω) x‖².
inline double quad_value(const QuadInstance& q, const ParamVector& omega) {
  const auto& o = q.opts;
  const Mat v = exact_inner_solve(q, omega);
  double s = 0.0;
  for (std::size_t j = 0; j < q.d_out.size(); ++j)
    for (std::size_t k = 0; k < o.d_v; ++k) {
      double h = 0.0;
      for (std::size_t l = 0; l < o.d_x; ++l) h += v(k, l) * q.d_out.x(j, l);
      const double r = q.d_out.y(j, o.d_t + k) - h;
      s += r * r;
    }
  return s / static_cast<double>(q.d_out.size());
}

/// Central differences with eps_i = eps·(1 + |ω_i|).
inline Vec fd_total_grad(const std::function<double(const ParamVector&)>& F, const ParamVector& omega,
                         double eps = 1e-5) {
  require(eps > 0.0, ErrorCode::precondition, "fd_total_grad: eps must be positive");
  Vec g(omega.size());
  ParamVector w = omega;
  for (std::size_t i = 0; i < omega.size(); ++i) {
    const double h = eps * (1.0 + std::abs(omega[i]));
    w[i] = omega[i] + h;
    const double fp = F(w);
    w[i] = omega[i] - h;
    const double fm = F(w);
    w[i] = omega[i];
    require(std::isfinite(fp) && std::isfinite(fm), ErrorCode::non_finite,
            "fd_total_grad: non-finite F at coordinate " + std::to_string(i));
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

inline Vec quad_grad(const QuadInstance& q, const ParamVector& omega, double eps = 1e-5) {
  return fd_total_grad([&](const ParamVector& w) { return quad_value(q, w); }, omega, eps);
}

/// Hessian of the (exactly quadratic) F by second differences with unit steps.
inline Mat quad_hessian(const QuadInstance& q) {
  const std::size_t d = q.omega_dim();
  const ParamVector zero(d, 0.0);
  const double f0 = quad_value(q, zero);
  Vec fi(d);
  for (std::size_t i = 0; i < d; ++i) {
    ParamVector e = zero;
    e[i] = 1.0;
    fi[i] = quad_value(q, e);
  }
  Mat h(d, d);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = i; j < d; ++j) {
      ParamVector e = zero;
      e[i] += 1.0;
      e[j] += 1.0;
      h(i, j) = h(j, i) = quad_value(q, e) - fi[i] - fi[j] + f0;
    }
  return h;
}

// ---------------------------------------------------------------------------
// Spectra

/// Eigenvalues of a small symmetric matrix by cyclic Jacobi rotations, ascending.
inline Vec symmetric_eigenvalues(Mat a, double tol = 1e-14, std::size_t max_sweeps = 100) {
  require(a.rows == a.cols, ErrorCode::dimension_mismatch, "symmetric_eigenvalues: not square");
  const std::size_t n = a.rows;
  for (std::size_t sweep = 0; sweep < max_sweeps; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t r = p + 1; r < n; ++r) off += a(p, r) * a(p, r);
    if (off <= tol * tol * std::max(1.0, frobenius(a) * frobenius(a))) break;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t r = p + 1; r < n; ++r) {
        if (a(p, r) == 0.0) continue;
        const double theta = (a(r, r) - a(p, p)) / (2.0 * a(p, r));
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akr = a(k, r);
          a(k, p) = c * akp - s * akr;
          a(k, r) = s * akp + c * akr;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), ark = a(r, k);
          a(p, k) = c * apk - s * ark;
          a(r, k) = s * apk + c * ark;
        }
      }
  }
  Vec ev(n);
  for (std::size_t i = 0; i < n; ++i) ev[i] = a(i, i);
  std::sort(ev.begin(), ev.end());
  return ev;
}

/// Extreme eigenvalues of c·XᵀX/n + R·I, the Hessian of every linear fit here.
inline std::pair<double, double> feature_spectrum(const Mat& x, double curvature, double ridge) {
  Mat g(x.cols, x.cols);
  for (std::size_t i = 0; i < x.rows; ++i)
    for (std::size_t a = 0; a < x.cols; ++a)
      for (std::size_t b = 0; b < x.cols; ++b) g(a, b) += curvature * x(i, a) * x(i, b) / static_cast<double>(x.rows);
  for (std::size_t a = 0; a < x.cols; ++a) g(a, a) += ridge;
  const Vec ev = symmetric_eigenvalues(g);
  return {ev.front(), ev.back()};
}

// ---------------------------------------------------------------------------
// Per-sample adjoint minimization

/// Minimizer of ½ mean_i aᵀH_i a + mean_i aᵀd_i over functions that take one
/// value per distinct input row (B_in = B_out), returned per sample.
inline Mat grouped_adjoint(const Mat& x, const std::vector<Mat>& hessians, const Mat& d) {
  require_dims(hessians.size(), x.rows, "grouped_adjoint hessians");
  require_dims(d.rows, x.rows, "grouped_adjoint targets");
  const std::size_t dv = d.cols;
  std::map<std::vector<double>, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < x.rows; ++i) groups[x.row_vec(i)].push_back(i);
  Mat a(x.rows, dv);
  for (const auto& [key, members] : groups) {
    Mat h(dv, dv);
    Vec b(dv, 0.0);
    for (std::size_t i : members) {
      for (std::size_t k = 0; k < h.data.size(); ++k) h.data[k] += hessians[i].data[k];
      for (std::size_t k = 0; k < dv; ++k) b[k] -= d(i, k);
    }
    const Vec sol = spd_solve(h, b);
    for (std::size_t i : members) a.set_row(i, sol);
  }
  return a;
}

// ---------------------------------------------------------------------------
// Quantiles (linear interpolation between order statistics)

inline double quantile(Vec v, double q) {
  require(!v.empty(), ErrorCode::empty_input, "quantile of an empty sample");
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

inline double median(Vec v) { return quantile(std::move(v), 0.5); }

// ---------------------------------------------------------------------------
// Bias probe

struct Budget {
  std::string label;
  bool exact = false;
  std::size_t M = 0;
  std::size_t K = 0;
};

struct BiasRow {
  Budget budget;
  Vec biases;  // one per seed
  double median_bias = 0.0;
};

/// Median ‖ĝ − ∇F‖ over seeds for each (M, K) budget on the quadratic testbed.
/// Iterative budgets run full-batch gradient descent from zero at step 1/L.
inline std::vector<BiasRow> bias_probe(const std::vector<Budget>& budgets, const std::vector<std::uint64_t>& seeds,
                                       const QuadOptions& opts = {}) {
  std::vector<BiasRow> rows;
  for (const Budget& b : budgets) rows.push_back({b, {}, 0.0});
  for (std::uint64_t seed : seeds) {
    const QuadInstance q = make_quad_instance(seed, opts);
    const BilevelProblem p = make_quad_problem(q);
    Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
    ParamVector omega(q.omega_dim());
    for (double& w : omega) w = rng.normal();
    const Vec g_true = quad_grad(q, omega);
    const double L_in = feature_spectrum(q.d_in.x, 2.0, q.opts.ridge).second;
    for (auto& row : rows) {
      OptimConfig cfg = quad_exact_config(q);
      ParamVector theta(p.inner_model->num_params(), 0.0);
      ParamVector xi(p.adjoint_model->num_params(), 0.0);
      const auto& inner = static_cast<const LinearModel&>(*p.inner_model);
      const auto& adj = static_cast<const LinearModel&>(*p.adjoint_model);
      if (row.budget.exact) {
        theta = exact_inner_linear(*p.inner_loss, inner, omega, q.d_in, cfg.R_in);
        const AdjointProblem ap = build_adjoint_problem(*p.inner_loss, *p.outer_loss, omega, inner, theta, q.d_in, q.d_out);
        xi = exact_adjoint_linear(ap, adj, p.inner_loss->curvature(), cfg.R_adj);
      } else {
        cfg.M = row.budget.M;
        cfg.K = row.budget.K;
        cfg.eta_in = 1.0 / L_in;
        cfg.eta_adj = 1.0 / L_in;
        Rng brng(seed);
        Optimizer oi(OptimizerKind::sgd, cfg.eta_in), oa(OptimizerKind::sgd, cfg.eta_adj);
        theta = inner_opt(*p.inner_loss, inner, omega, theta, q.d_in, cfg, brng, oi).params;
        xi = adjoint_opt(*p.inner_loss, *p.outer_loss, omega, inner, theta, adj, xi, q.d_in, q.d_out, cfg, brng, oa)
                 .params;
      }
      const ParamVector g = total_grad(*p.inner_loss, *p.outer_loss, omega, inner, theta, adj, xi, q.d_in, q.d_out);
      row.biases.push_back(norm2(sub(g, g_true)));
    }
  }
  for (auto& row : rows) row.median_bias = median(row.biases);
  return rows;
}

}  // namespace funcbo::oracle
