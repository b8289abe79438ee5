#pragma once

// FuncID core: empirical inner/adjoint objectives, the inner and adjoint
// optimization loops, implicit total-gradient assembly and the outer loop.

#include <chrono>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "funcbo/losses.hpp"
#include "funcbo/models.hpp"
#include "funcbo/numkit.hpp"

namespace funcbo {

// ---------------------------------------------------------------------------
// Data

struct Dataset {
  Mat x;  // n x d_x
  Mat y;  // n x d_y (task-specific targets)

  std::size_t size() const { return x.rows; }

  Dataset rows(std::span<const std::size_t> idx) const {
    Dataset out{Mat(idx.size(), x.cols), Mat(idx.size(), y.cols)};
    for (std::size_t k = 0; k < idx.size(); ++k) {
      require(idx[k] < size(), ErrorCode::precondition, "Dataset::rows index out of range");
      out.x.set_row(k, x.row(idx[k]));
      out.y.set_row(k, y.row(idx[k]));
    }
    return out;
  }

  void validate(const char* what) const {
    require(size() > 0, ErrorCode::empty_input, std::string(what) + " is empty");
    require_dims(y.rows, x.rows, what);
    require(all_finite(x.data) && all_finite(y.data), ErrorCode::non_finite,
            std::string(what) + " has non-finite entries");
  }
};

/// Indices of a batch of size b drawn with replacement; b == 0 selects the
/// whole set in order.
inline std::vector<std::size_t> sample_batch(Rng& rng, std::size_t n, std::size_t b) {
  std::vector<std::size_t> idx;
  if (b == 0) {
    idx.resize(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    return idx;
  }
  idx.resize(b);
  for (auto& i : idx) i = rng.index(n);
  return idx;
}

// ---------------------------------------------------------------------------
// Optimizers

enum class OptimizerKind { sgd, adam };

inline const char* to_string(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "adam"; }

inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "adam") return OptimizerKind::adam;
  throw Error(ErrorCode::config, "unknown optimizer '" + s + "'");
}

class Optimizer {
 public:
  Optimizer(OptimizerKind kind = OptimizerKind::sgd, double lr = 1e-2)
      : kind_(kind), lr_(lr) {}

  void step(ParamVector& p, const ParamVector& g) {
    require_dims(g.size(), p.size(), "optimizer gradient");
    if (kind_ == OptimizerKind::sgd) {
      axpy(-lr_, g, p);
      return;
    }
    if (m_.size() != p.size()) {
      m_.assign(p.size(), 0.0);
      v_.assign(p.size(), 0.0);
      t_ = 0;
    }
    ++t_;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < p.size(); ++i) {
      m_[i] = beta1 * m_[i] + (1.0 - beta1) * g[i];
      v_[i] = beta2 * v_[i] + (1.0 - beta2) * g[i] * g[i];
      p[i] -= lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps);
    }
  }

  void reset() {
    m_.clear();
    v_.clear();
    t_ = 0;
  }

  OptimizerKind kind() const { return kind_; }
  double lr() const { return lr_; }

  static constexpr double beta1 = 0.9;
  static constexpr double beta2 = 0.999;
  static constexpr double eps = 1e-8;

 private:
  OptimizerKind kind_;
  double lr_;
  Vec m_, v_;
  std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Configuration

enum class InnerMode { iterative, exact_linear };
enum class AdjointMode { iterative, exact_linear, closed_form_rl };

inline const char* to_string(InnerMode m) { return m == InnerMode::iterative ? "iterative" : "exact_linear"; }
inline const char* to_string(AdjointMode m) {
  switch (m) {
    case AdjointMode::iterative: return "iterative";
    case AdjointMode::exact_linear: return "exact_linear";
    case AdjointMode::closed_form_rl: return "closed_form_rl";
  }
  return "?";
}

struct OptimConfig {
  std::size_t N = 100;  // outer iterations
  std::size_t M = 10;   // inner steps per outer iteration
  std::size_t K = 10;   // adjoint steps per outer iteration
  double eta_out = 1e-2;
  double eta_in = 1e-2;
  double eta_adj = 1e-2;
  std::size_t batch_in = 0;   // 0 = full batch
  std::size_t batch_out = 0;  // 0 = full batch
  bool same_batch = false;    // B_out reuses the B_in indices (needs D_in == D_out)
  bool warm_start = true;
  OptimizerKind opt_out = OptimizerKind::sgd;
  OptimizerKind opt_in = OptimizerKind::sgd;
  OptimizerKind opt_adj = OptimizerKind::sgd;
  double R_in = 0.0;
  double R_adj = 0.0;
  InnerMode inner_mode = InnerMode::iterative;
  AdjointMode adjoint_mode = AdjointMode::iterative;

  void validate() const {
    require(eta_out > 0 && eta_in > 0 && eta_adj > 0, ErrorCode::config, "step sizes must be positive");
    require(R_in >= 0 && R_adj >= 0, ErrorCode::config, "ridge weights must be non-negative");
    require(inner_mode == InnerMode::exact_linear || M >= 1, ErrorCode::config,
            "M must be >= 1 for the iterative inner solver");
    require(adjoint_mode != AdjointMode::iterative || K >= 1, ErrorCode::config,
            "K must be >= 1 for the iterative adjoint solver");
    if (adjoint_mode == AdjointMode::closed_form_rl) {
      require(same_batch, ErrorCode::config, "closed_form_rl needs same_batch = true");
      require(R_adj == 0.0, ErrorCode::config, "closed_form_rl needs R_adj = 0");
    }
  }
};

/// Running cost meters. HVP flops count only the Hessian-vector products of
/// the adjoint linear system.
struct CostMeter {
  double hvp_flops = 0.0;
  std::size_t hvp_calls = 0;
  std::size_t hvp_dim = 0;

  void add_hvp(std::size_t dim, double flops) {
    hvp_dim = dim;
    hvp_flops += flops;
    ++hvp_calls;
  }
};

// ---------------------------------------------------------------------------
// Problem

struct BilevelProblem {
  std::shared_ptr<PointwiseLoss> inner_loss;
  std::shared_ptr<PointwiseLoss> outer_loss;
  Dataset d_in;
  Dataset d_out;
  std::shared_ptr<const Model> inner_model;
  /// Adjoint approximator; ignored when `adjoint_from_inner` is set or the
  /// closed-form RL path is used.
  std::shared_ptr<const Model> adjoint_model;
  /// Rebuilds the adjoint model from the current inner iterate (used by the
  /// linear-on-hidden-features variant).
  std::function<std::shared_ptr<const Model>(const Model&, const ParamVector&)> adjoint_from_inner;
  ParamVector omega0;

  std::size_t omega_dim() const { return inner_loss->omega_dim(); }
  std::size_t value_dim() const { return inner_loss->value_dim(); }

  void validate() const {
    require(inner_loss && outer_loss, ErrorCode::precondition, "problem needs both losses");
    require(inner_model != nullptr, ErrorCode::precondition, "problem needs an inner model");
    d_in.validate("D_in");
    d_out.validate("D_out");
    require_dims(outer_loss->omega_dim(), inner_loss->omega_dim(), "outer/inner omega dims");
    require_dims(outer_loss->value_dim(), inner_loss->value_dim(), "outer/inner value dims");
    require_dims(inner_model->output_dim(), inner_loss->value_dim(), "inner model output");
    require_dims(inner_model->input_dim(), d_in.x.cols, "inner model input");
    require_dims(d_in.x.cols, inner_loss->x_dim(), "D_in inputs");
    require_dims(d_in.y.cols, inner_loss->y_dim(), "D_in targets");
    require_dims(d_out.x.cols, outer_loss->x_dim(), "D_out inputs");
    require_dims(d_out.y.cols, outer_loss->y_dim(), "D_out targets");
    require_dims(omega0.size(), omega_dim(), "omega0");
    if (adjoint_model) require_dims(adjoint_model->output_dim(), value_dim(), "adjoint model output");
  }
};

struct LossGrad {
  double value = 0.0;
  ParamVector grad;
};

// ---------------------------------------------------------------------------
// Inner problem

/// mean_i ℓ_in(ω, τ(θ)(x_i), x_i, y_i) + R_in‖θ‖²/2 and its θ-gradient.
inline LossGrad empirical_inner_loss(const PointwiseLoss& loss, const Model& model,
                                     const ParamVector& omega, const ParamVector& theta,
                                     const Dataset& batch, double R_in) {
  require(batch.size() > 0, ErrorCode::empty_input, "empirical_inner_loss: empty batch");
  const Mat v = model.forward(theta, batch.x);
  const BundleBatch b = loss.eval_batch(omega, v, batch.x, batch.y);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  LossGrad out;
  out.value = pairwise_sum(b.value) * inv_n + 0.5 * R_in * dot(theta, theta);
  Mat cot = b.grad_v;
  for (double& c : cot.data) c *= inv_n;
  out.grad = model.vjp_params(theta, batch.x, cot);
  axpy(R_in, theta, out.grad);
  return out;
}

struct OptResult {
  ParamVector params;
  Vec trace;  // objective value before each step, then the final value
};

inline void check_finite_step(const LossGrad& lg, const char* loop, std::size_t step) {
  if (!std::isfinite(lg.value) || !all_finite(lg.grad)) {
    throw Error(ErrorCode::non_finite,
                std::string(loop) + ": non-finite loss or gradient at step " + std::to_string(step));
  }
}

/// M optimizer steps on the empirical inner loss, a fresh batch each step.
inline OptResult inner_opt(const PointwiseLoss& loss, const Model& model, const ParamVector& omega,
                           ParamVector theta, const Dataset& d_in, const OptimConfig& cfg, Rng& rng,
                           Optimizer& opt) {
  OptResult out;
  const bool full = cfg.batch_in == 0;
  const Dataset* batch = &d_in;
  Dataset sampled;
  for (std::size_t m = 0; m < cfg.M; ++m) {
    if (!full) {
      sampled = d_in.rows(sample_batch(rng, d_in.size(), cfg.batch_in));
      batch = &sampled;
    }
    const LossGrad lg = empirical_inner_loss(loss, model, omega, theta, *batch, cfg.R_in);
    check_finite_step(lg, "inner_opt", m);
    out.trace.push_back(lg.value);
    opt.step(theta, lg.grad);
  }
  if (cfg.M > 0 && full) {
    const LossGrad lg = empirical_inner_loss(loss, model, omega, theta, d_in, cfg.R_in);
    check_finite_step(lg, "inner_opt", cfg.M);
    out.trace.push_back(lg.value);
  }
  out.params = std::move(theta);
  return out;
}

/// Solves (c ΦᵀΦ/n + R·I) Wᵀ = rhs, the shared system of every linear
/// closed-form path; throws singular_system with a hint when it cannot.
inline Mat solve_feature_system(const Mat& phi, double curvature, double ridge, const Mat& rhs,
                                const char* what) {
  const double inv_n = 1.0 / static_cast<double>(phi.rows);
  Mat gram = matmul_tn(phi, phi);
  for (double& g : gram.data) g *= curvature * inv_n;
  for (std::size_t i = 0; i < gram.rows; ++i) gram(i, i) += ridge;
  // symmetrize round-off
  for (std::size_t i = 0; i < gram.rows; ++i)
    for (std::size_t j = i + 1; j < gram.cols; ++j) {
      const double s = 0.5 * (gram(i, j) + gram(j, i));
      gram(i, j) = gram(j, i) = s;
    }
  const double scale = std::max(1e-300, norm_inf(gram.data));
  try {
    const Mat l = cholesky(gram);
    double dmin = l(0, 0);
    for (std::size_t i = 1; i < l.rows; ++i) dmin = std::min(dmin, l(i, i));
    if (dmin * dmin < 1e-13 * scale) throw NotPositiveDefinite(0, dmin * dmin);
    Mat x(rhs.rows, rhs.cols);
    Vec col(rhs.rows);
    for (std::size_t j = 0; j < rhs.cols; ++j) {
      for (std::size_t i = 0; i < rhs.rows; ++i) col[i] = rhs(i, j);
      const Vec s = cholesky_solve(l, col);
      for (std::size_t i = 0; i < rhs.rows; ++i) x(i, j) = s[i];
    }
    return x;
  } catch (const NotPositiveDefinite&) {
    throw Error(ErrorCode::singular_system,
                std::string(what) + ": feature system is singular; use a positive ridge (R > 0)");
  }
}

/// Exact minimizer of the empirical inner loss over a LinearModel; valid for
/// losses whose v-Hessian is c·I (all losses in this library).
inline ParamVector exact_inner_linear(const PointwiseLoss& loss, const LinearModel& model,
                                      const ParamVector& omega, const Dataset& batch, double R_in) {
  require(batch.size() > 0, ErrorCode::empty_input, "exact_inner_linear: empty batch");
  const BundleBatch b0 = loss.eval_at_zero(omega, batch.x, batch.y);
  const Mat phi = model.features().apply(batch.x);
  Mat rhs = matmul_tn(phi, b0.grad_v);  // d1 x d_v
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (double& r : rhs.data) r *= -inv_n;
  const Mat wt = solve_feature_system(phi, loss.curvature(), R_in, rhs, "exact inner solve");
  return transpose(wt).data;
}

// ---------------------------------------------------------------------------
// Adjoint problem

/// The quadratic adjoint problem at a fixed inner solution ĥ: per-sample
/// Hessians H_i on B_in and targets d_j = ∂_v ℓ_out on B_out.
struct AdjointProblem {
  Dataset b_in;
  Dataset b_out;
  BundleBatch inner;  // H_i in hess_v
  Mat d;              // m x d_v
};

inline AdjointProblem build_adjoint_problem(const PointwiseLoss& inner_loss,
                                            const PointwiseLoss& outer_loss, const ParamVector& omega,
                                            const Model& inner_model, const ParamVector& theta,
                                            Dataset b_in, Dataset b_out) {
  require(b_in.size() > 0 && b_out.size() > 0, ErrorCode::empty_input, "adjoint problem: empty batch");
  AdjointProblem p;
  p.inner = inner_loss.eval_batch(omega, inner_model.forward(theta, b_in.x), b_in.x, b_in.y);
  p.d = outer_loss.eval_batch(omega, inner_model.forward(theta, b_out.x), b_out.x, b_out.y).grad_v;
  p.b_in = std::move(b_in);
  p.b_out = std::move(b_out);
  return p;
}

/// ½ mean_in aᵀHa + mean_out aᵀd for explicit adjoint values; the H-term is a
/// Hessian-vector product in output space of dimension d_v.
inline double adjoint_objective_values(const AdjointProblem& p, const Mat& a_in, const Mat& a_out,
                                       Mat* cot_in = nullptr, Mat* cot_out = nullptr,
                                       CostMeter* meter = nullptr) {
  const std::size_t n = p.b_in.size(), m = p.b_out.size(), dv = p.d.cols;
  require_dims(a_in.rows, n, "adjoint values (B_in)");
  require_dims(a_out.rows, m, "adjoint values (B_out)");
  Vec quad(n), lin(m);
  if (cot_in) *cot_in = Mat(n, dv);
  if (cot_out) *cot_out = Mat(m, dv);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec ha = p.inner.hess_apply(i, a_in.row(i));
    quad[i] = 0.5 * dot(a_in.row(i), ha);
    if (cot_in)
      for (std::size_t k = 0; k < dv; ++k) (*cot_in)(i, k) = ha[k] / static_cast<double>(n);
  }
  if (meter) meter->add_hvp(dv, 2.0 * static_cast<double>(n * dv * dv));
  for (std::size_t j = 0; j < m; ++j) {
    lin[j] = dot(a_out.row(j), p.d.row(j));
    if (cot_out)
      for (std::size_t k = 0; k < dv; ++k) (*cot_out)(j, k) = p.d(j, k) / static_cast<double>(m);
  }
  return pairwise_sum(quad) / static_cast<double>(n) + pairwise_sum(lin) / static_cast<double>(m);
}

/// Empirical adjoint objective for a parametric adjoint ν(ξ), plus R_adj‖ξ‖²/2.
inline LossGrad empirical_adjoint_loss(const AdjointProblem& p, const Model& adjoint,
                                       const ParamVector& xi, double R_adj,
                                       CostMeter* meter = nullptr) {
  const Mat a_in = adjoint.forward(xi, p.b_in.x);
  const Mat a_out = adjoint.forward(xi, p.b_out.x);
  Mat cot_in, cot_out;
  LossGrad out;
  out.value = adjoint_objective_values(p, a_in, a_out, &cot_in, &cot_out, meter) +
              0.5 * R_adj * dot(xi, xi);
  out.grad = adjoint.vjp_params(xi, p.b_in.x, cot_in);
  const ParamVector g_out = adjoint.vjp_params(xi, p.b_out.x, cot_out);
  axpy(1.0, g_out, out.grad);
  axpy(R_adj, xi, out.grad);
  return out;
}

/// K optimizer steps on the empirical adjoint objective. With full batches
/// the adjoint problem is assembled once; otherwise fresh batches are drawn
/// each step.
inline OptResult adjoint_opt(const PointwiseLoss& inner_loss, const PointwiseLoss& outer_loss,
                             const ParamVector& omega, const Model& inner_model,
                             const ParamVector& theta, const Model& adjoint, ParamVector xi,
                             const Dataset& d_in, const Dataset& d_out, const OptimConfig& cfg,
                             Rng& rng, Optimizer& opt, CostMeter* meter = nullptr) {
  OptResult out;
  const bool full = cfg.batch_in == 0 && cfg.batch_out == 0 && !cfg.same_batch;
  std::optional<AdjointProblem> fixed;
  if (full || (cfg.same_batch && cfg.batch_in == 0))
    fixed = build_adjoint_problem(inner_loss, outer_loss, omega, inner_model, theta, d_in, d_out);
  for (std::size_t k = 0; k < cfg.K; ++k) {
    std::optional<AdjointProblem> fresh;
    if (!fixed) {
      const auto idx_in = sample_batch(rng, d_in.size(), cfg.batch_in);
      const auto idx_out = cfg.same_batch ? idx_in : sample_batch(rng, d_out.size(), cfg.batch_out);
      fresh = build_adjoint_problem(inner_loss, outer_loss, omega, inner_model, theta,
                                    d_in.rows(idx_in), d_out.rows(idx_out));
    }
    const LossGrad lg = empirical_adjoint_loss(fixed ? *fixed : *fresh, adjoint, xi, cfg.R_adj, meter);
    check_finite_step(lg, "adjoint_opt", k);
    out.trace.push_back(lg.value);
    opt.step(xi, lg.grad);
  }
  if (cfg.K > 0 && fixed) {
    const LossGrad lg = empirical_adjoint_loss(*fixed, adjoint, xi, cfg.R_adj);
    check_finite_step(lg, "adjoint_opt", cfg.K);
    out.trace.push_back(lg.value);
  }
  out.params = std::move(xi);
  return out;
}

/// Closed-form weights of the adjoint restricted to a(x) = Wφ(x):
/// (c ΦᵀΦ/n + R_adj I) Wᵀ = −ΨᵀD/m. Returns W (d_v x d₁).
inline Mat linear_adjoint_solve(const Mat& phi_in, const Mat& psi_out, const Mat& d,
                                double curvature, double R_adj = 1e-6) {
  require(phi_in.rows > 0 && psi_out.rows > 0, ErrorCode::empty_input, "linear_adjoint_solve: empty batch");
  require_dims(psi_out.cols, phi_in.cols, "linear_adjoint_solve feature widths");
  require_dims(d.rows, psi_out.rows, "linear_adjoint_solve targets");
  Mat rhs = matmul_tn(psi_out, d);
  const double inv_m = 1.0 / static_cast<double>(psi_out.rows);
  for (double& r : rhs.data) r *= -inv_m;
  return transpose(solve_feature_system(phi_in, curvature, R_adj, rhs, "linear adjoint solve"));
}

/// Exact adjoint over a LinearModel for an assembled adjoint problem.
inline ParamVector exact_adjoint_linear(const AdjointProblem& p, const LinearModel& adjoint,
                                        double curvature, double R_adj) {
  const Mat phi = adjoint.features().apply(p.b_in.x);
  const Mat psi = adjoint.features().apply(p.b_out.x);
  return linear_adjoint_solve(phi, psi, p.d, curvature, R_adj).data;
}

/// a(x_i) = −∂_v f(ĥ(x_i), y_i) / c on a batch shared by both levels, the
/// minimizer of the unregularized adjoint objective over per-sample values.
inline Mat closed_form_adjoint_rl(const PointwiseLoss& inner_loss, const PointwiseLoss& outer_loss,
                                  const ParamVector& omega, const Mat& v, const Dataset& batch) {
  require(batch.size() > 0, ErrorCode::empty_input, "closed_form_adjoint_rl: empty batch");
  const double c = inner_loss.curvature();
  require(c > 0.0, ErrorCode::precondition, "closed_form_adjoint_rl: inner curvature must be positive");
  Mat a = outer_loss.eval_batch(omega, v, batch.x, batch.y).grad_v;
  for (double& x : a.data) x = -x / c;
  return a;
}

// ---------------------------------------------------------------------------
// Total gradient

/// g_Exp + g_Imp = mean_out ∂_ω ℓ_out(ω, ĥ) + mean_in ∂_{ω,v} ℓ_in(ω, ĥ)·â,
/// from explicit inner values V and adjoint values A.
inline ParamVector total_grad_values(const PointwiseLoss& inner_loss, const PointwiseLoss& outer_loss,
                                     const ParamVector& omega, const Dataset& b_in, const Mat& v_in,
                                     const Mat& a_in, const Dataset& b_out, const Mat& v_out,
                                     CostMeter* meter = nullptr) {
  require(b_in.size() > 0 && b_out.size() > 0, ErrorCode::empty_input, "total_grad: empty batch");
  const Vec w_out(b_out.size(), 1.0 / static_cast<double>(b_out.size()));
  const Vec w_in(b_in.size(), 1.0 / static_cast<double>(b_in.size()));
  ParamVector g = outer_loss.grad_omega_batch(omega, v_out, b_out.x, b_out.y, w_out);
  const ParamVector g_imp = inner_loss.cross_apply_batch(omega, v_in, b_in.x, b_in.y, a_in, w_in);
  axpy(1.0, g_imp, g);
  if (meter) meter->hvp_dim = inner_loss.value_dim();
  return g;
}

inline ParamVector total_grad(const PointwiseLoss& inner_loss, const PointwiseLoss& outer_loss,
                              const ParamVector& omega, const Model& inner_model,
                              const ParamVector& theta, const Model& adjoint, const ParamVector& xi,
                              const Dataset& b_in, const Dataset& b_out, CostMeter* meter = nullptr) {
  return total_grad_values(inner_loss, outer_loss, omega, b_in, inner_model.forward(theta, b_in.x),
                           adjoint.forward(xi, b_in.x), b_out, inner_model.forward(theta, b_out.x),
                           meter);
}

/// mean_out ℓ_out(ω, ĥ(x), x, y)
inline double empirical_outer_loss(const PointwiseLoss& outer_loss, const ParamVector& omega,
                                   const Model& inner_model, const ParamVector& theta,
                                   const Dataset& batch) {
  const BundleBatch b = outer_loss.eval_batch(omega, inner_model.forward(theta, batch.x), batch.x, batch.y);
  return pairwise_sum(b.value) / static_cast<double>(batch.size());
}

// ---------------------------------------------------------------------------
// Outer loop

struct RunRecord {
  std::size_t iter = 0;
  double outer_loss = 0.0;
  double inner_loss = 0.0;
  std::optional<double> adjoint_loss;
  double grad_norm = 0.0;
  std::optional<double> grad_bias;
  std::size_t hvp_dim = 0;
  std::size_t inner_steps = 0;
  std::size_t adjoint_steps = 0;
  std::optional<double> wall_ms;
  std::optional<double> eval_metric;
  double hvp_flops = 0.0;  // not part of the CSV
};

/// Mutable state of one run, visible to hooks.
struct RunState {
  std::size_t iter = 0;
  ParamVector omega;
  ParamVector theta;
  ParamVector xi;
  std::shared_ptr<const Model> adjoint_model;
  ParamVector last_grad;
};

struct RunHooks {
  /// Called before each outer iteration (e.g. to refresh a lagged network).
  std::function<void(RunState&)> before_iteration;
  /// Called after the outer update.
  std::function<void(RunState&)> after_update;
  /// Oracle gradient at ω for the bias column.
  std::function<std::optional<ParamVector>(const ParamVector&)> oracle_grad;
  /// Evaluation metric recorded in the eval_metric column.
  std::function<std::optional<double>(const RunState&)> eval_metric;
};

struct RunResult {
  std::vector<ParamVector> omegas;  // ω_0 .. ω_N
  std::vector<RunRecord> records;
  RunState state;
  CostMeter meter;
};

struct RunOptions {
  bool record_wall_ms = false;
  bool keep_trajectory = true;
  /// Receives each record as soon as it is complete (streaming to disk).
  std::function<void(const RunRecord&)> on_record;
};

inline std::shared_ptr<const Model> current_adjoint(const BilevelProblem& p, const ParamVector& theta) {
  if (p.adjoint_from_inner) return p.adjoint_from_inner(*p.inner_model, theta);
  return p.adjoint_model;
}

/// Factory for the linear adjoint on the inner network's last hidden layer.
inline std::function<std::shared_ptr<const Model>(const Model&, const ParamVector&)>
hidden_feature_adjoint() {
  return [](const Model& inner, const ParamVector& theta) -> std::shared_ptr<const Model> {
    const auto* mlp = dynamic_cast<const Mlp*>(&inner);
    require(mlp != nullptr, ErrorCode::precondition, "hidden-feature adjoint needs an MLP inner model");
    require(mlp->spec().layers() >= 2, ErrorCode::precondition,
            "hidden-feature adjoint needs at least one hidden layer");
    return std::make_shared<LinearModel>(FeatureMap::mlp_hidden(*mlp, theta), mlp->output_dim());
  };
}

/// Inner phase shared by the outer loops: an exact solve on a fresh batch or
/// M optimizer steps. Returns the recorded inner loss.
inline double inner_phase(const BilevelProblem& problem, const OptimConfig& cfg, const ParamVector& omega,
                          ParamVector& theta, Rng& batch_rng, Optimizer& opt_in) {
  const PointwiseLoss& lin = *problem.inner_loss;
  const Model& inner = *problem.inner_model;
  if (cfg.inner_mode == InnerMode::exact_linear) {
    const auto* inner_linear = dynamic_cast<const LinearModel*>(&inner);
    require(inner_linear != nullptr, ErrorCode::config, "inner_mode exact_linear needs a linear inner model");
    const Dataset b = cfg.batch_in == 0 ? problem.d_in
                                        : problem.d_in.rows(sample_batch(batch_rng, problem.d_in.size(), cfg.batch_in));
    theta = exact_inner_linear(lin, *inner_linear, omega, b, cfg.R_in);
    return empirical_inner_loss(lin, inner, omega, theta, b, cfg.R_in).value;
  }
  OptResult r = inner_opt(lin, inner, omega, std::move(theta), problem.d_in, cfg, batch_rng, opt_in);
  theta = std::move(r.params);
  return r.trace.empty() ? 0.0 : r.trace.back();
}

/// Outer loop of FuncID: inner fit, adjoint fit, total gradient, outer step.
inline RunResult funcid_run(const BilevelProblem& problem, const OptimConfig& cfg, std::uint64_t seed,
                            const RunHooks& hooks = {}, const RunOptions& options = {}) {
  problem.validate();
  cfg.validate();
  if (cfg.same_batch) require_dims(problem.d_out.size(), problem.d_in.size(), "same_batch dataset sizes");

  Rng rng(seed);
  Rng init_rng = rng.split();
  Rng batch_rng = rng.split();

  RunResult res;
  RunState& st = res.state;
  st.omega = problem.omega0;
  st.theta = problem.inner_model->init_params(init_rng);
  st.adjoint_model = current_adjoint(problem, st.theta);
  if (cfg.adjoint_mode == AdjointMode::iterative) {
    require(st.adjoint_model != nullptr, ErrorCode::precondition, "iterative adjoint needs an adjoint model");
    st.xi = st.adjoint_model->init_params(init_rng);
  }

  Optimizer opt_out(cfg.opt_out, cfg.eta_out);
  Optimizer opt_in(cfg.opt_in, cfg.eta_in);
  Optimizer opt_adj(cfg.opt_adj, cfg.eta_adj);

  const PointwiseLoss& lin = *problem.inner_loss;
  const PointwiseLoss& lout = *problem.outer_loss;
  const Model& inner = *problem.inner_model;

  if (options.keep_trajectory) res.omegas.push_back(st.omega);

  for (std::size_t n = 0; n < cfg.N; ++n) {
    const auto t0 = std::chrono::steady_clock::now();
    st.iter = n;
    if (hooks.before_iteration) hooks.before_iteration(st);

    if (!cfg.warm_start && n > 0) {
      st.theta = inner.init_params(init_rng);
      opt_in.reset();
      opt_adj.reset();
    }

    RunRecord rec;
    rec.iter = n;

    rec.inner_loss = inner_phase(problem, cfg, st.omega, st.theta, batch_rng, opt_in);
    rec.inner_steps = cfg.inner_mode == InnerMode::exact_linear ? 0 : cfg.M;

    // batches for the adjoint-in-closed-form paths and for the total gradient
    const auto idx_in = sample_batch(batch_rng, problem.d_in.size(), cfg.batch_in);
    const auto idx_out = cfg.same_batch ? idx_in : sample_batch(batch_rng, problem.d_out.size(), cfg.batch_out);
    const Dataset b_in = problem.d_in.rows(idx_in);
    const Dataset b_out = problem.d_out.rows(idx_out);
    const Mat v_in = inner.forward(st.theta, b_in.x);
    const Mat v_out = cfg.same_batch ? v_in : inner.forward(st.theta, b_out.x);

    CostMeter step_meter;
    Mat a_in;
    if (cfg.adjoint_mode == AdjointMode::closed_form_rl) {
      a_in = closed_form_adjoint_rl(lin, lout, st.omega, v_in, b_in);
      const AdjointProblem ap = build_adjoint_problem(lin, lout, st.omega, inner, st.theta, b_in, b_out);
      rec.adjoint_loss = adjoint_objective_values(ap, a_in, a_in, nullptr, nullptr, &step_meter);
      rec.adjoint_steps = 0;
    } else {
      st.adjoint_model = current_adjoint(problem, st.theta);
      require(st.adjoint_model != nullptr, ErrorCode::precondition, "adjoint model missing");
      const Model& adj = *st.adjoint_model;
      if (cfg.adjoint_mode == AdjointMode::exact_linear) {
        const auto* adj_linear = dynamic_cast<const LinearModel*>(&adj);
        require(adj_linear != nullptr, ErrorCode::config, "adjoint_mode exact_linear needs a linear adjoint");
        const AdjointProblem ap = build_adjoint_problem(lin, lout, st.omega, inner, st.theta, b_in, b_out);
        st.xi = exact_adjoint_linear(ap, *adj_linear, lin.curvature(), cfg.R_adj);
        rec.adjoint_loss = empirical_adjoint_loss(ap, adj, st.xi, cfg.R_adj, &step_meter).value;
        rec.adjoint_steps = 0;
      } else {
        if (!cfg.warm_start && n > 0) st.xi = adj.init_params(init_rng);
        if (st.xi.size() != adj.num_params()) st.xi = adj.init_params(init_rng);
        OptResult r = adjoint_opt(lin, lout, st.omega, inner, st.theta, adj, std::move(st.xi), problem.d_in,
                                  problem.d_out, cfg, batch_rng, opt_adj, &step_meter);
        st.xi = std::move(r.params);
        rec.adjoint_loss = r.trace.empty() ? 0.0 : r.trace.back();
        rec.adjoint_steps = cfg.K;
      }
      a_in = adj.forward(st.xi, b_in.x);
    }

    const ParamVector g = total_grad_values(lin, lout, st.omega, b_in, v_in, a_in, b_out, v_out, &step_meter);
    require(all_finite(g), ErrorCode::non_finite, "funcid_run: non-finite total gradient at iteration " + std::to_string(n));
    rec.outer_loss = pairwise_sum(lout.eval_batch(st.omega, v_out, b_out.x, b_out.y).value) /
                     static_cast<double>(b_out.size());
    rec.grad_norm = norm2(g);
    rec.hvp_dim = step_meter.hvp_dim;
    rec.hvp_flops = step_meter.hvp_flops;
    res.meter.hvp_dim = step_meter.hvp_dim;
    res.meter.hvp_flops += step_meter.hvp_flops;
    res.meter.hvp_calls += step_meter.hvp_calls;
    if (hooks.oracle_grad) {
      if (auto og = hooks.oracle_grad(st.omega)) rec.grad_bias = norm2(sub(g, *og));
    }

    st.last_grad = g;
    opt_out.step(st.omega, g);
    if (hooks.after_update) hooks.after_update(st);
    if (hooks.eval_metric) rec.eval_metric = hooks.eval_metric(st);
    if (options.record_wall_ms)
      rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    res.records.push_back(rec);
    if (options.on_record) options.on_record(rec);
    if (options.keep_trajectory) res.omegas.push_back(st.omega);
  }
  return res;
}

}  // namespace funcbo
