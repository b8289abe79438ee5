#pragma once

// Comparison methods: parametric implicit differentiation (AID), the value
// function and gradient penalty formulations, and MLE model fitting for RL.

#include <functional>
#include <string>

#include "funcbo/funcbo.hpp"
#include "funcbo/mdp_model.hpp"

namespace funcbo {

enum class LinearSolverKind { cg, identity_heuristic, gd };
enum class HvpMode { exact_linear, finite_difference };

inline const char* to_string(LinearSolverKind k) {
  switch (k) {
    case LinearSolverKind::cg: return "cg";
    case LinearSolverKind::identity_heuristic: return "identity_heuristic";
    case LinearSolverKind::gd: return "gd";
  }
  return "?";
}

inline LinearSolverKind parse_linear_solver(const std::string& s) {
  if (s == "cg") return LinearSolverKind::cg;
  if (s == "identity_heuristic") return LinearSolverKind::identity_heuristic;
  if (s == "gd") return LinearSolverKind::gd;
  throw Error(ErrorCode::config, "unknown linear solver '" + s + "'");
}

struct AidConfig {
  LinearSolverKind linear_solver = LinearSolverKind::cg;
  double solver_tol = 1e-10;
  std::size_t solver_maxit = 0;  // 0 = 10 * p_in for cg, 100 for gd
  double gd_lr = 1e-2;
  HvpMode hvp_mode = HvpMode::finite_difference;
  double fd_eps = 0.0;  // 0 = 1e-4 (1 + ‖θ‖∞)

  void validate() const {
    require(solver_tol > 0.0, ErrorCode::config, "aid solver_tol must be positive");
    require(fd_eps >= 0.0, ErrorCode::config, "aid fd_eps must be non-negative");
    require(gd_lr > 0.0, ErrorCode::config, "aid gd_lr must be positive");
  }
};

struct AidResult {
  ParamVector grad;
  ParamVector u;
  double residual = 0.0;  // ‖Hu + b‖ / ‖b‖
  bool residual_flag = false;  // the solver did not reach its tolerance
  std::size_t solver_iters = 0;
  std::size_t hvp_dim = 0;
  double hvp_flops = 0.0;
};

/// Central difference along a direction, rescaled so the probe step is eps
/// regardless of ‖u‖.
inline Vec fd_along(const std::function<Vec(const ParamVector&)>& grad_fn, const ParamVector& p,
                    const ParamVector& u, double eps) {
  const double nu = norm2(u);
  if (nu == 0.0) return Vec(grad_fn(p).size(), 0.0);
  return scaled(fd_directional(grad_fn, p, scaled(u, 1.0 / nu), eps), nu);
}

/// Parametric implicit differentiation:
/// u = −(∂²_θ G_in)⁻¹ ∂_θ G_out, ∇ = ∂_ω G_out + ∂_{ω,θ} G_in u.
inline AidResult aid_total_grad(const PointwiseLoss& inner_loss, const PointwiseLoss& outer_loss,
                                const ParamVector& omega, const Model& inner_model, const ParamVector& theta,
                                const Dataset& b_in, const Dataset& b_out, double R_in, const AidConfig& cfg) {
  cfg.validate();
  const std::size_t p = inner_model.num_params();
  const double eps = cfg.fd_eps > 0.0 ? cfg.fd_eps : 1e-4 * (1.0 + norm_inf(theta));
  const double inv_n = 1.0 / static_cast<double>(b_in.size());
  const double inv_m = 1.0 / static_cast<double>(b_out.size());
  AidResult res;
  res.hvp_dim = p;

  // ∂_θ G_out and ∂_ω G_out
  const Mat v_out = inner_model.forward(theta, b_out.x);
  const BundleBatch out_b = outer_loss.eval_batch(omega, v_out, b_out.x, b_out.y);
  Mat cot = out_b.grad_v;
  for (double& c : cot.data) c *= inv_m;
  const ParamVector b = inner_model.vjp_params(theta, b_out.x, cot);
  const Vec w_out(b_out.size(), inv_m);
  ParamVector g = outer_loss.grad_omega_batch(omega, v_out, b_out.x, b_out.y, w_out);

  auto grad_in = [&](const ParamVector& th) {
    return empirical_inner_loss(inner_loss, inner_model, omega, th, b_in, R_in).grad;
  };
  const double per_grad = inner_model.forward_flops(b_in.size()) + inner_model.vjp_flops(b_in.size());
  LinearOperator hvp;
  if (cfg.hvp_mode == HvpMode::exact_linear) {
    require(dynamic_cast<const LinearModel*>(&inner_model) != nullptr, ErrorCode::config,
            "aid exact_linear HVPs need a linear inner model");
    const double c = inner_loss.curvature();
    hvp = [&, c](const Vec& u) {
      Mat ju = inner_model.forward(u, b_in.x);
      for (double& e : ju.data) e *= c * inv_n;
      Vec out = inner_model.vjp_params(theta, b_in.x, ju);
      axpy(R_in, u, out);
      res.hvp_flops += per_grad;
      return out;
    };
  } else {
    hvp = [&, eps](const Vec& u) {
      res.hvp_flops += 2.0 * per_grad;
      return fd_along(grad_in, theta, u, eps);
    };
  }

  const Vec neg_b = scaled(b, -1.0);
  Vec u(p, 0.0);
  switch (cfg.linear_solver) {
    case LinearSolverKind::cg: {
      const CgResult r = conjugate_gradient(hvp, neg_b, cfg.solver_tol, cfg.solver_maxit);
      u = r.x;
      res.solver_iters = r.iters;
      break;
    }
    case LinearSolverKind::identity_heuristic:
      u = neg_b;
      break;
    case LinearSolverKind::gd: {
      const std::size_t maxit = cfg.solver_maxit ? cfg.solver_maxit : 100;
      for (std::size_t k = 0; k < maxit; ++k) {
        Vec r = hvp(u);
        axpy(1.0, b, r);
        if (norm2(r) <= cfg.solver_tol * std::max(1e-300, norm2(b))) break;
        axpy(-cfg.gd_lr, r, u);
        res.solver_iters = k + 1;
      }
      break;
    }
  }
  {
    const double flops_before = res.hvp_flops;
    Vec r = hvp(u);
    res.hvp_flops = flops_before;  // the residual check is not part of the method's cost
    axpy(1.0, b, r);
    const double nb = norm2(b);
    res.residual = nb > 0.0 ? norm2(r) / nb : norm2(r);
    res.residual_flag = cfg.linear_solver != LinearSolverKind::identity_heuristic &&
                        !(res.residual <= std::max(cfg.solver_tol, 1e-8) * 10.0);
  }

  // ∂_{ω,θ} G_in u by central differences of ∂_ω G_in along u
  const Vec w_in(b_in.size(), inv_n);
  auto grad_omega_in = [&](const ParamVector& th) {
    return inner_loss.grad_omega_batch(omega, inner_model.forward(th, b_in.x), b_in.x, b_in.y, w_in);
  };
  axpy(1.0, fd_along(grad_omega_in, theta, u, eps), g);
  require(all_finite(g), ErrorCode::non_finite, "aid_total_grad: non-finite gradient");
  res.grad = std::move(g);
  res.u = std::move(u);
  return res;
}

// ---------------------------------------------------------------------------
// Hessian structure check

struct HessianCheck {
  Mat H_fd;
  Mat H_struct;
  double distortion_norm = 0.0;
};

/// Finite-difference Hessian of G_in(θ) against its J C Jᵀ part; the gap is
/// the second-order term ∂²_θτ[∂_h L_in].
inline HessianCheck parametric_hessian_check(const PointwiseLoss& inner_loss, const ParamVector& omega,
                                             const Model& model, const ParamVector& theta, const Dataset& batch,
                                             double R_in = 0.0, double eps = 1e-5) {
  const std::size_t p = model.num_params();
  require(p <= 200, ErrorCode::precondition, "parametric_hessian_check: model too large");
  auto grad = [&](const ParamVector& th) { return empirical_inner_loss(inner_loss, model, omega, th, batch, R_in).grad; };
  HessianCheck hc{Mat(p, p), Mat(p, p), 0.0};
  ParamVector th = theta;
  for (std::size_t j = 0; j < p; ++j) {
    const double h = eps * (1.0 + std::abs(theta[j]));
    th[j] = theta[j] + h;
    const Vec gp = grad(th);
    th[j] = theta[j] - h;
    const Vec gm = grad(th);
    th[j] = theta[j];
    for (std::size_t i = 0; i < p; ++i) hc.H_fd(i, j) = (gp[i] - gm[i]) / (2.0 * h);
  }
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = i + 1; j < p; ++j) {
      const double s = 0.5 * (hc.H_fd(i, j) + hc.H_fd(j, i));
      hc.H_fd(i, j) = hc.H_fd(j, i) = s;
    }

  const Mat v = model.forward(theta, batch.x);
  const BundleBatch b = inner_loss.eval_batch(omega, v, batch.x, batch.y);
  const std::size_t dv = v.cols;
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Mat xi(1, batch.x.cols, batch.x.row_vec(i));
    Mat jac(dv, p);  // rows: ∂ τ_k / ∂θ
    for (std::size_t k = 0; k < dv; ++k) {
      Mat e(1, dv);
      e(0, k) = 1.0;
      jac.set_row(k, model.vjp_params(theta, xi, e));
    }
    const Mat hi = b.hess(i);
    const Mat hj = matmul(hi, jac);  // dv x p
    const Mat contrib = matmul_tn(jac, hj);
    for (std::size_t k = 0; k < contrib.data.size(); ++k) hc.H_struct.data[k] += inv_n * contrib.data[k];
  }
  for (std::size_t i = 0; i < p; ++i) hc.H_struct(i, i) += R_in;
  hc.distortion_norm = frobenius(Mat(p, p, sub(hc.H_fd.data, hc.H_struct.data)));
  return hc;
}

// ---------------------------------------------------------------------------
// Penalty methods

struct PenaltyState {
  ParamVector omega;
  ParamVector theta;
  ParamVector theta_aux;  // value-function tracker
};

struct PenaltyStep {
  double objective = 0.0;
  double penalty = 0.0;
  ParamVector grad_omega;
  ParamVector grad_theta;
};

struct PenaltyConfig {
  double lambda = 1.0;
  double eta_out = 1e-2;
  double eta_in = 1e-2;
  std::size_t aux_steps = 1;  // descent steps on the value-function tracker
  double R_in = 0.0;
  double fd_eps = 0.0;  // 0 = 1e-4 (1 + ‖θ‖∞)

  void validate() const {
    require(lambda >= 0.0, ErrorCode::config, "penalty lambda must be non-negative");
    require(eta_out > 0.0 && eta_in > 0.0, ErrorCode::config, "penalty step sizes must be positive");
  }
};

/// ∇_θ and ∂_ω of mean_out ℓ_out(ω, τ(θ)(x)).
inline std::pair<ParamVector, ParamVector> outer_grads(const PointwiseLoss& outer_loss, const ParamVector& omega,
                                                       const Model& model, const ParamVector& theta,
                                                       const Dataset& b_out, double* value = nullptr) {
  const double inv_m = 1.0 / static_cast<double>(b_out.size());
  const Mat v = model.forward(theta, b_out.x);
  const BundleBatch b = outer_loss.eval_batch(omega, v, b_out.x, b_out.y);
  if (value) *value = pairwise_sum(b.value) * inv_m;
  Mat cot = b.grad_v;
  for (double& c : cot.data) c *= inv_m;
  const Vec w(b_out.size(), inv_m);
  return {model.vjp_params(theta, b_out.x, cot), outer_loss.grad_omega_batch(omega, v, b_out.x, b_out.y, w)};
}

inline ParamVector inner_grad_omega(const PointwiseLoss& inner_loss, const ParamVector& omega, const Model& model,
                                    const ParamVector& theta, const Dataset& b_in) {
  const Vec w(b_in.size(), 1.0 / static_cast<double>(b_in.size()));
  return inner_loss.grad_omega_batch(omega, model.forward(theta, b_in.x), b_in.x, b_in.y, w);
}

/// Gradients of L̂_out(ω, τ(θ)) + λ (L̂_in(ω, θ) − L̂_in(ω, θ_aux)), where θ_aux
/// tracks the inner value function; the ω-gradient of the tracked value uses
/// Danskin's rule at θ_aux.
inline PenaltyStep value_penalty_grads(const PointwiseLoss& inner_loss, const PointwiseLoss& outer_loss,
                                       const Model& model, const PenaltyState& s, const Dataset& b_in,
                                       const Dataset& b_out, const PenaltyConfig& cfg) {
  PenaltyStep st;
  double out_val = 0.0;
  auto [g_theta, g_omega] = outer_grads(outer_loss, s.omega, model, s.theta, b_out, &out_val);
  const LossGrad in = empirical_inner_loss(inner_loss, model, s.omega, s.theta, b_in, cfg.R_in);
  const LossGrad aux = empirical_inner_loss(inner_loss, model, s.omega, s.theta_aux, b_in, cfg.R_in);
  st.penalty = in.value - aux.value;
  st.objective = out_val + cfg.lambda * st.penalty;
  axpy(cfg.lambda, in.grad, g_theta);
  const ParamVector gw_in = inner_grad_omega(inner_loss, s.omega, model, s.theta, b_in);
  const ParamVector gw_aux = inner_grad_omega(inner_loss, s.omega, model, s.theta_aux, b_in);
  axpy(cfg.lambda, sub(gw_in, gw_aux), g_omega);
  st.grad_theta = std::move(g_theta);
  st.grad_omega = std::move(g_omega);
  return st;
}

/// Advances θ_aux by `aux_steps` inner descent steps, then takes one joint
/// step on (ω, θ).
inline PenaltyStep value_penalty_step(const PointwiseLoss& inner_loss, const PointwiseLoss& outer_loss,
                                      const Model& model, PenaltyState& s, const Dataset& b_in, const Dataset& b_out,
                                      const PenaltyConfig& cfg) {
  cfg.validate();
  for (std::size_t k = 0; k < cfg.aux_steps; ++k) {
    const LossGrad lg = empirical_inner_loss(inner_loss, model, s.omega, s.theta_aux, b_in, cfg.R_in);
    check_finite_step(lg, "value_penalty_step (tracker)", k);
    axpy(-cfg.eta_in, lg.grad, s.theta_aux);
  }
  PenaltyStep st = value_penalty_grads(inner_loss, outer_loss, model, s, b_in, b_out, cfg);
  require(std::isfinite(st.objective) && all_finite(st.grad_omega) && all_finite(st.grad_theta),
          ErrorCode::non_finite, "value_penalty_step: non-finite objective or gradient");
  axpy(-cfg.eta_out, st.grad_omega, s.omega);
  axpy(-cfg.eta_in, st.grad_theta, s.theta);
  return st;
}

/// Gradients of L̂_out(ω, τ(θ)) + λ‖∇_θ L̂_in(ω, θ)‖²; the θ- and ω-derivatives
/// of the penalty are central differences along ∇_θ L̂_in.
inline PenaltyStep gradient_penalty_grads(const PointwiseLoss& inner_loss, const PointwiseLoss& outer_loss,
                                          const Model& model, const PenaltyState& s, const Dataset& b_in,
                                          const Dataset& b_out, const PenaltyConfig& cfg) {
  PenaltyStep st;
  double out_val = 0.0;
  auto [g_theta, g_omega] = outer_grads(outer_loss, s.omega, model, s.theta, b_out, &out_val);
  const LossGrad in = empirical_inner_loss(inner_loss, model, s.omega, s.theta, b_in, cfg.R_in);
  st.penalty = dot(in.grad, in.grad);
  st.objective = out_val + cfg.lambda * st.penalty;
  if (cfg.lambda > 0.0 && st.penalty > 0.0) {
    const double eps = cfg.fd_eps > 0.0 ? cfg.fd_eps : 1e-4 * (1.0 + norm_inf(s.theta));
    auto grad_in = [&](const ParamVector& th) {
      return empirical_inner_loss(inner_loss, model, s.omega, th, b_in, cfg.R_in).grad;
    };
    auto grad_w = [&](const ParamVector& th) { return inner_grad_omega(inner_loss, s.omega, model, th, b_in); };
    axpy(2.0 * cfg.lambda, fd_along(grad_in, s.theta, in.grad, eps), g_theta);
    axpy(2.0 * cfg.lambda, fd_along(grad_w, s.theta, in.grad, eps), g_omega);
  }
  st.grad_theta = std::move(g_theta);
  st.grad_omega = std::move(g_omega);
  return st;
}

inline PenaltyStep gradient_penalty_step(const PointwiseLoss& inner_loss, const PointwiseLoss& outer_loss,
                                         const Model& model, PenaltyState& s, const Dataset& b_in,
                                         const Dataset& b_out, const PenaltyConfig& cfg) {
  cfg.validate();
  PenaltyStep st = gradient_penalty_grads(inner_loss, outer_loss, model, s, b_in, b_out, cfg);
  require(std::isfinite(st.objective) && all_finite(st.grad_omega) && all_finite(st.grad_theta),
          ErrorCode::non_finite, "gradient_penalty_step: non-finite objective or gradient");
  axpy(-cfg.eta_out, st.grad_omega, s.omega);
  axpy(-cfg.eta_in, st.grad_theta, s.theta);
  return st;
}

// ---------------------------------------------------------------------------
// MLE model fitting

/// mean ‖(r_ω(x), s_ω(x)) − (r′, e_{s′})‖² over a buffer batch, with gradient.
inline LossGrad mle_model_loss(const MdpModel& model, const ParamVector& omega, const Dataset& batch) {
  require(batch.size() > 0, ErrorCode::empty_input, "mle_model_loss: empty buffer");
  const std::size_t n = batch.size(), ns = model.n_states();
  const double inv_n = 1.0 / static_cast<double>(n);
  const MdpPrediction p = model.predict(omega, batch.x);
  Vec cot_r(n), sq(n);
  Mat cot_s(n, ns);
  for (std::size_t i = 0; i < n; ++i) {
    const double er = p.reward[i] - batch.y(i, 0);
    double s = er * er;
    cot_r[i] = 2.0 * er * inv_n;
    const std::size_t s2 = static_cast<std::size_t>(batch.y(i, 1));
    require(s2 < ns, ErrorCode::precondition, "mle_model_loss: bad next-state index");
    for (std::size_t k = 0; k < ns; ++k) {
      const double e = p.next_state(i, k) - (k == s2 ? 1.0 : 0.0);
      s += e * e;
      cot_s(i, k) = 2.0 * e * inv_n;
    }
    sq[i] = s;
  }
  return {pairwise_sum(sq) * inv_n, model.vjp(omega, batch.x, cot_r, cot_s)};
}

inline LossGrad mle_model_step(const MdpModel& model, ParamVector& omega, const Dataset& batch, Optimizer& opt) {
  LossGrad lg = mle_model_loss(model, omega, batch);
  check_finite_step(lg, "mle_model_step", 0);
  opt.step(omega, lg.grad);
  return lg;
}


// ---------------------------------------------------------------------------
// Outer loops for the parametric baselines. Records follow the FuncID layout:
// adjoint_loss stays empty, adjoint_steps holds linear-solver iterations and
// hvp_dim the size of the vectors the method multiplies by a Hessian.

inline RunResult aid_run(const BilevelProblem& problem, const OptimConfig& cfg, const AidConfig& aid,
                         std::uint64_t seed, const RunHooks& hooks = {}, const RunOptions& options = {}) {
  problem.validate();
  cfg.validate();
  aid.validate();
  if (cfg.same_batch) require_dims(problem.d_out.size(), problem.d_in.size(), "same_batch dataset sizes");

  Rng rng(seed);
  Rng init_rng = rng.split();
  Rng batch_rng = rng.split();

  RunResult res;
  RunState& st = res.state;
  st.omega = problem.omega0;
  st.theta = problem.inner_model->init_params(init_rng);
  Optimizer opt_out(cfg.opt_out, cfg.eta_out);
  Optimizer opt_in(cfg.opt_in, cfg.eta_in);
  const Model& inner = *problem.inner_model;
  if (options.keep_trajectory) res.omegas.push_back(st.omega);

  for (std::size_t n = 0; n < cfg.N; ++n) {
    const auto t0 = std::chrono::steady_clock::now();
    st.iter = n;
    if (hooks.before_iteration) hooks.before_iteration(st);
    if (!cfg.warm_start && n > 0) {
      st.theta = inner.init_params(init_rng);
      opt_in.reset();
    }
    RunRecord rec;
    rec.iter = n;
    rec.inner_loss = inner_phase(problem, cfg, st.omega, st.theta, batch_rng, opt_in);
    rec.inner_steps = cfg.inner_mode == InnerMode::exact_linear ? 0 : cfg.M;

    const auto idx_in = sample_batch(batch_rng, problem.d_in.size(), cfg.batch_in);
    const auto idx_out = cfg.same_batch ? idx_in : sample_batch(batch_rng, problem.d_out.size(), cfg.batch_out);
    const Dataset b_in = problem.d_in.rows(idx_in);
    const Dataset b_out = problem.d_out.rows(idx_out);
    const AidResult r =
        aid_total_grad(*problem.inner_loss, *problem.outer_loss, st.omega, inner, st.theta, b_in, b_out, cfg.R_in, aid);
    rec.outer_loss = empirical_outer_loss(*problem.outer_loss, st.omega, inner, st.theta, b_out);
    rec.grad_norm = norm2(r.grad);
    rec.hvp_dim = r.hvp_dim;
    rec.hvp_flops = r.hvp_flops;
    rec.adjoint_steps = r.solver_iters;
    res.meter.hvp_dim = r.hvp_dim;
    res.meter.hvp_flops += r.hvp_flops;
    ++res.meter.hvp_calls;
    if (hooks.oracle_grad) {
      if (auto og = hooks.oracle_grad(st.omega)) rec.grad_bias = norm2(sub(r.grad, *og));
    }
    st.last_grad = r.grad;
    opt_out.step(st.omega, r.grad);
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

enum class PenaltyKind { value, gradient };

/// Single-level penalty methods: one joint (ω, θ) step per iteration on fresh
/// batches. θ_aux starts at θ₀.
inline RunResult penalty_run(const BilevelProblem& problem, const OptimConfig& cfg, const PenaltyConfig& pcfg,
                             PenaltyKind kind, std::uint64_t seed, const RunHooks& hooks = {},
                             const RunOptions& options = {}) {
  problem.validate();
  pcfg.validate();
  if (cfg.same_batch) require_dims(problem.d_out.size(), problem.d_in.size(), "same_batch dataset sizes");

  Rng rng(seed);
  Rng init_rng = rng.split();
  Rng batch_rng = rng.split();

  RunResult res;
  RunState& st = res.state;
  const Model& model = *problem.inner_model;
  PenaltyState ps{problem.omega0, model.init_params(init_rng), {}};
  ps.theta_aux = ps.theta;
  if (options.keep_trajectory) res.omegas.push_back(ps.omega);
  const std::size_t p_in = model.num_params();

  for (std::size_t n = 0; n < cfg.N; ++n) {
    const auto t0 = std::chrono::steady_clock::now();
    st.iter = n;
    st.omega = ps.omega;
    st.theta = ps.theta;
    if (hooks.before_iteration) hooks.before_iteration(st);
    const auto idx_in = sample_batch(batch_rng, problem.d_in.size(), cfg.batch_in);
    const auto idx_out = cfg.same_batch ? idx_in : sample_batch(batch_rng, problem.d_out.size(), cfg.batch_out);
    const Dataset b_in = problem.d_in.rows(idx_in);
    const Dataset b_out = problem.d_out.rows(idx_out);

    RunRecord rec;
    rec.iter = n;
    const PenaltyStep step =
        kind == PenaltyKind::value
            ? value_penalty_step(*problem.inner_loss, *problem.outer_loss, model, ps, b_in, b_out, pcfg)
            : gradient_penalty_step(*problem.inner_loss, *problem.outer_loss, model, ps, b_in, b_out, pcfg);
    rec.outer_loss = step.objective - pcfg.lambda * step.penalty;
    rec.inner_loss = empirical_inner_loss(*problem.inner_loss, model, ps.omega, ps.theta, b_in, pcfg.R_in).value;
    rec.grad_norm = norm2(step.grad_omega);
    rec.inner_steps = kind == PenaltyKind::value ? pcfg.aux_steps : 0;
    rec.hvp_dim = kind == PenaltyKind::gradient ? p_in : 0;
    if (hooks.oracle_grad) {
      if (auto og = hooks.oracle_grad(st.omega)) rec.grad_bias = norm2(sub(step.grad_omega, *og));
    }
    st.omega = ps.omega;
    st.theta = ps.theta;
    st.last_grad = step.grad_omega;
    if (hooks.after_update) hooks.after_update(st);
    if (hooks.eval_metric) rec.eval_metric = hooks.eval_metric(st);
    if (options.record_wall_ms)
      rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    res.records.push_back(rec);
    if (options.on_record) options.on_record(rec);
    if (options.keep_trajectory) res.omegas.push_back(ps.omega);
  }
  st.omega = ps.omega;
  st.theta = ps.theta;
  return res;
}

}  // namespace funcbo
