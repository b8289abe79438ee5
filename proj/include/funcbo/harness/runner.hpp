#pragma once

// One run end to end: build the task, dispatch the method, collect metrics
// and oracle checks, and write the run directory.
//
//   <out_dir>/<method>_records.csv   streamed while the run progresses
//   <out_dir>/*.ckpt                 final parameters
//   <out_dir>/summary.json           written last, atomically

#include <chrono>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>

#include "funcbo/baselines.hpp"
#include "funcbo/harness/config.hpp"
#include "funcbo/harness/records.hpp"
#include "funcbo/oracle.hpp"
#include "funcbo/tasks.hpp"

namespace funcbo::harness {

struct RunOutput {
  RunResult result;
  RunSummary summary;
  /// (file name, content) pairs written next to the records.
  std::vector<std::pair<std::string, std::string>> checkpoints;
};

namespace detail {

inline std::string checkpoint_text(const Model& m, const ParamVector& p) {
  std::ostringstream os;
  save_checkpoint(os, m, p);
  return os.str();
}

inline RunHooks every(std::size_t eval_every, std::size_t n_iter, std::function<double(const RunState&)> metric) {
  RunHooks h;
  h.eval_metric = [=](const RunState& s) -> std::optional<double> {
    const bool last = s.iter + 1 == n_iter;
    if (last || (eval_every > 0 && (s.iter + 1) % eval_every == 0)) return metric(s);
    return std::nullopt;
  };
  return h;
}

inline PenaltyConfig penalty_config(const RunConfig& c) {
  PenaltyConfig p = c.penalty;
  p.eta_out = c.optim.eta_out;
  p.eta_in = c.optim.eta_in;
  p.R_in = c.optim.R_in;
  return p;
}

/// The generic bilevel methods on an already built problem.
inline RunResult dispatch_bilevel(const RunConfig& c, const BilevelProblem& p, std::uint64_t run_seed,
                                  const RunHooks& hooks, const RunOptions& opts) {
  switch (c.method) {
    case Method::funcid:
    case Method::funcid_linear:
      return funcid_run(p, c.optim, run_seed, hooks, opts);
    case Method::aid:
      return aid_run(p, c.optim, c.aid, run_seed, hooks, opts);
    case Method::value_penalty:
      return penalty_run(p, c.optim, penalty_config(c), PenaltyKind::value, run_seed, hooks, opts);
    case Method::gradient_penalty:
      return penalty_run(p, c.optim, penalty_config(c), PenaltyKind::gradient, run_seed, hooks, opts);
    default:
      throw Error(ErrorCode::config, std::string("method ") + to_string(c.method) + " is not a bilevel method");
  }
}

// ---------------------------------------------------------------------------
// quad

inline RunOutput run_quad(const RunConfig& c, const RunOptions& opts) {
  const QuadInstance inst = make_quad_instance(c.quad.instance_seed.value_or(c.seed), c.quad.opts);
  BilevelProblem p = make_quad_problem(inst);
  RunHooks hooks = every(0, c.optim.N, [&](const RunState& s) { return oracle::quad_value(inst, s.omega); });
  hooks.oracle_grad = [&](const ParamVector& w) -> std::optional<ParamVector> { return oracle::quad_grad(inst, w); };

  RunOutput out;
  out.result = dispatch_bilevel(c, p, c.seed, hooks, opts);
  const ParamVector& w = out.result.state.omega;

  // library exact path at the final ω against the independent oracles
  const auto& inner = static_cast<const LinearModel&>(*p.inner_model);
  const auto& adj = static_cast<const LinearModel&>(*p.adjoint_model);
  const double ridge = inst.opts.ridge;
  const ParamVector theta = exact_inner_linear(*p.inner_loss, inner, w, inst.d_in, ridge);
  const AdjointProblem ap = build_adjoint_problem(*p.inner_loss, *p.outer_loss, w, inner, theta, inst.d_in, inst.d_out);
  const ParamVector xi = exact_adjoint_linear(ap, adj, p.inner_loss->curvature(), ridge);
  const Vec g_fd = oracle::quad_grad(inst, w);
  const Mat v_star = oracle::exact_inner_solve(inst, w);
  const Mat a_star = oracle::exact_adjoint_solve(inst, w, v_star);
  auto& checks = out.summary.oracle_checks;
  checks.push_back(oracle::compare("quad.inner_solution", theta, v_star.data, 1e-8));
  checks.push_back(oracle::compare("quad.adjoint_solution", xi, a_star.data, 1e-8));
  // The gradient identity is checked at ω₀: near a converged ω the gradient
  // is small and its relative error only measures finite-difference noise.
  {
    const ParamVector& w0 = p.omega0;
    const ParamVector th0 = exact_inner_linear(*p.inner_loss, inner, w0, inst.d_in, ridge);
    const AdjointProblem ap0 =
        build_adjoint_problem(*p.inner_loss, *p.outer_loss, w0, inner, th0, inst.d_in, inst.d_out);
    const ParamVector xi0 = exact_adjoint_linear(ap0, adj, p.inner_loss->curvature(), ridge);
    const ParamVector g0 = total_grad(*p.inner_loss, *p.outer_loss, w0, inner, th0, adj, xi0, inst.d_in, inst.d_out);
    checks.push_back(oracle::compare("quad.total_grad_vs_fd_at_omega0", g0, oracle::quad_grad(inst, w0), 1e-5));
  }

  const double F = oracle::quad_value(inst, w);
  out.summary.final_metric = {"outer_objective", F};
  out.summary.metrics["outer_objective"] = F;
  out.summary.metrics["oracle_grad_norm"] = norm2(g_fd);
  out.checkpoints.emplace_back("inner.ckpt", checkpoint_text(*p.inner_model, out.result.state.theta));
  return out;
}

// ---------------------------------------------------------------------------
// iv

struct IvSetup {
  IvInstance inst;
  Dataset data;
  std::shared_ptr<Mlp> outer;
  ParamVector omega0;
  std::uint64_t run_seed = 0;
};

inline IvSetup iv_setup(const RunConfig& c) {
  IvSetup s;
  Rng root(c.seed);
  Rng data_rng = root.split();
  Rng init_rng = root.split();
  s.run_seed = root.next_u64();
  if (!c.iv.instance_path.empty()) {
    std::ifstream in(c.iv.instance_path);
    require(static_cast<bool>(in), ErrorCode::config, "cannot open iv instance '" + c.iv.instance_path + "'");
    s.inst = read_iv_instance(in);
  } else {
    s.inst = make_iv_instance(c.iv.instance_seed.value_or(c.seed), c.iv.kappa, c.iv.d_t);
  }
  if (!c.iv.data_path.empty()) {
    std::ifstream in(c.iv.data_path);
    require(static_cast<bool>(in), ErrorCode::config, "cannot open iv data '" + c.iv.data_path + "'");
    DatasetFile f = read_dataset(in);
    require(f.task == "iv", ErrorCode::config, "data file holds task '" + f.task + "', expected iv");
    require_dims(f.data.y.cols, s.inst.y_dim(), "iv data targets");
    s.data = std::move(f.data);
  } else {
    s.data = gen_iv_data(s.inst, c.iv.n, data_rng);
  }
  s.outer = std::make_shared<Mlp>(MlpSpec{{s.inst.d_t, c.iv.hidden, 1}, {c.iv.activation}});
  s.omega0 = s.outer->init_params(init_rng);
  return s;
}

inline BilevelProblem iv_problem(const RunConfig& c, const IvSetup& s) {
  BilevelProblem p;
  const std::size_t x_dim = s.inst.x_dim(), y_dim = s.inst.y_dim();
  p.inner_loss = std::make_shared<SquaredInnerLoss>(s.outer, x_dim, y_dim, 0);
  p.outer_loss = std::make_shared<SquaredOuterLoss>(1, x_dim, y_dim, s.inst.d_t, s.outer->num_params());
  p.d_in = s.data;
  p.d_out = s.data;
  const MlpSpec inner_spec{{x_dim, c.iv.hidden, 1}, {c.iv.activation}};
  p.inner_model = std::make_shared<Mlp>(inner_spec);
  if (c.method == Method::funcid_linear)
    p.adjoint_from_inner = hidden_feature_adjoint();
  else
    p.adjoint_model = std::make_shared<Mlp>(inner_spec);
  p.omega0 = s.omega0;
  return p;
}

inline RunOutput run_iv(const RunConfig& c, const RunOptions& opts) {
  const IvSetup s = iv_setup(c);
  const IvTestGrid grid = iv_test_grid(s.inst);
  const RunHooks hooks =
      every(c.iv.eval_every, c.optim.N, [&](const RunState& st) { return structural_mse(*s.outer, st.omega, grid); });
  RunOutput out;
  std::shared_ptr<const Model> inner_model;
  if (c.method == Method::direct) {
    out.result = iv_direct_run(*s.outer, s.omega0, s.data, c.optim, s.run_seed, hooks, opts);
  } else {
    const BilevelProblem p = iv_problem(c, s);
    inner_model = p.inner_model;
    out.result = dispatch_bilevel(c, p, s.run_seed, hooks, opts);
  }
  const double mse = structural_mse(*s.outer, out.result.state.omega, grid);
  out.summary.final_metric = {"structural_mse", mse};
  out.summary.metrics["structural_mse"] = mse;
  out.summary.metrics["zero_predictor_mse"] = [&] {
    double acc = 0.0;
    for (double f : grid.f) acc += f * f;
    return acc / static_cast<double>(grid.f.size());
  }();
  out.checkpoints.emplace_back("outer.ckpt", checkpoint_text(*s.outer, out.result.state.omega));
  if (inner_model) out.checkpoints.emplace_back("inner.ckpt", checkpoint_text(*inner_model, out.result.state.theta));
  return out;
}

// ---------------------------------------------------------------------------
// rl_toy

struct RlSetup {
  ToyMdp mdp;
  Dataset buffer;
  RlProblem rp;
  Mat q_star;
  std::uint64_t run_seed = 0;
};

inline RlSetup rl_setup(const RunConfig& c) {
  RlSetup s;
  Rng root(c.seed);
  Rng data_rng = root.split();
  Rng init_rng = root.split();
  s.run_seed = root.next_u64();
  Rng mdp_rng(c.rl.mdp_seed.value_or(c.seed));
  s.mdp = gen_mdp(mdp_rng, c.rl.n_states, c.rl.n_actions, c.rl.gamma);
  s.buffer = replay_collect(s.mdp, c.rl.buffer, data_rng);
  s.rp = make_rl_problem(s.mdp, s.buffer, c.rl.model, c.rl.rank, init_rng);
  s.q_star = soft_value_iteration(s.mdp, c.rl.gamma);
  return s;
}

inline double policy_agreement(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
  std::size_t same = 0;
  for (std::size_t i = 0; i < a.size(); ++i) same += a[i] == b[i];
  return static_cast<double>(same) / static_cast<double>(a.size());
}

/// Lagged network h̄ ← (1 − τ) h̄ + τ θ after every outer step; both Bellman
/// losses read their targets from h̄.
struct LaggedTracker {
  ParamVector hbar;
  double tau;

  void install(RunHooks& hooks, RlProblem& rp) {
    hooks.before_iteration = [this, &rp](RunState&) {
      rp.inner->set_lagged(*rp.q_net, hbar);
      rp.outer->set_lagged(*rp.q_net, hbar);
    };
    hooks.after_update = [this](RunState& s) {
      for (std::size_t i = 0; i < hbar.size(); ++i) hbar[i] = (1.0 - tau) * hbar[i] + tau * s.theta[i];
    };
  }
};

/// MLE baseline: the MDP model fits observed transitions by least squares,
/// and the Q network regresses on that model's Bellman targets.
inline RunResult mle_run(const RunConfig& c, RlSetup& s, RunHooks hooks, const RunOptions& options) {
  const OptimConfig& cfg = c.optim;
  Rng rng(s.run_seed);
  Rng init_rng = rng.split();
  Rng batch_rng = rng.split();
  const MdpModel& model = s.rp.inner->model();
  RunResult res;
  RunState& st = res.state;
  st.omega = s.rp.problem.omega0;
  st.theta = s.rp.q_net->init_params(init_rng);
  Optimizer opt_out(cfg.opt_out, cfg.eta_out);
  Optimizer opt_in(cfg.opt_in, cfg.eta_in);
  if (options.keep_trajectory) res.omegas.push_back(st.omega);
  for (std::size_t n = 0; n < cfg.N; ++n) {
    const auto t0 = std::chrono::steady_clock::now();
    st.iter = n;
    if (hooks.before_iteration) hooks.before_iteration(st);
    RunRecord rec;
    rec.iter = n;
    const Dataset b = s.buffer.rows(sample_batch(batch_rng, s.buffer.size(), cfg.batch_out));
    const LossGrad lg = mle_model_step(model, st.omega, b, opt_out);
    rec.outer_loss = lg.value;
    rec.grad_norm = norm2(lg.grad);
    rec.inner_loss = inner_phase(s.rp.problem, cfg, st.omega, st.theta, batch_rng, opt_in);
    rec.inner_steps = cfg.inner_mode == InnerMode::exact_linear ? 0 : cfg.M;
    st.last_grad = lg.grad;
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

inline RunOutput run_rl(const RunConfig& c, const RunOptions& opts) {
  RlSetup s = rl_setup(c);
  const std::size_t ns = s.mdp.n_states, na = s.mdp.n_actions;
  const auto pi_star = greedy_policy(s.q_star);
  RunHooks hooks = every(c.rl.eval_every, c.optim.N, [&](const RunState& st) {
    return policy_agreement(greedy_policy(q_table(*s.rp.q_net, st.theta, ns, na)), pi_star);
  });
  LaggedTracker lag{ParamVector(s.rp.q_net->num_params(), 0.0), c.rl.tau};
  lag.install(hooks, s.rp);

  RunOutput out;
  if (c.method == Method::mle)
    out.result = mle_run(c, s, hooks, opts);
  else
    out.result = funcid_run(s.rp.problem, c.optim, s.run_seed, hooks, opts);
  const RunState& st = out.result.state;

  const Mat q = q_table(*s.rp.q_net, st.theta, ns, na);
  const auto pi = greedy_policy(q);
  double sup = 0.0;
  for (std::size_t i = 0; i < q.data.size(); ++i) sup = std::max(sup, std::abs(q.data[i] - s.q_star.data[i]));
  out.summary.final_metric = {"policy_agreement", policy_agreement(pi, pi_star)};
  out.summary.metrics["policy_agreement"] = out.summary.final_metric.value;
  out.summary.metrics["policy_exact_match"] = pi == pi_star ? 1.0 : 0.0;
  out.summary.metrics["q_sup_error"] = sup;

  // closed-form adjoint against per-sample minimization on one buffer batch
  {
    const std::size_t m = std::min<std::size_t>(s.buffer.size(), 256);
    std::vector<std::size_t> idx(m);
    for (std::size_t i = 0; i < m; ++i) idx[i] = i;
    const Dataset b = s.buffer.rows(idx);
    const PointwiseLoss& lin = *s.rp.inner;
    const PointwiseLoss& lout = *s.rp.outer;
    const Mat v = s.rp.q_net->forward(st.theta, b.x);
    const Mat a_cf = closed_form_adjoint_rl(lin, lout, st.omega, v, b);
    const AdjointProblem ap = build_adjoint_problem(lin, lout, st.omega, *s.rp.q_net, st.theta, b, b);
    std::vector<Mat> hs;
    for (std::size_t i = 0; i < m; ++i) hs.push_back(ap.inner.hess(i));
    const Mat a_grp = oracle::grouped_adjoint(b.x, hs, ap.d);
    const ParamVector g_cf = total_grad_values(lin, lout, st.omega, b, v, a_cf, b, v);
    const ParamVector g_grp = total_grad_values(lin, lout, st.omega, b, v, a_grp, b, v);
    out.summary.oracle_checks.push_back(oracle::compare("rl.closed_form_adjoint_total_grad", g_cf, g_grp, 1e-10));
  }
  if (c.rl.model == MdpModelKind::tabular) {
    const Mat q_fp = rl_inner_fixed_point(s.rp.inner->model(), true_model_params(s.mdp), c.rl.gamma);
    out.summary.oracle_checks.push_back(oracle::compare("rl.true_model_fixed_point", q_fp.data, s.q_star.data, 1e-3));
  }
  out.checkpoints.emplace_back("q_net.ckpt", checkpoint_text(*s.rp.q_net, st.theta));
  out.checkpoints.emplace_back("model.ckpt", checkpoint_text(s.rp.inner->model().net(), st.omega));
  return out;
}

}  // namespace detail

/// Runs the configured experiment without touching the file system except
/// through `opts.on_record`.
inline RunOutput execute_run(const RunConfig& c, const RunOptions& opts) {
  validate(c);
  const auto t0 = std::chrono::steady_clock::now();
  RunOutput out;
  switch (c.task) {
    case Task::quad: out = detail::run_quad(c, opts); break;
    case Task::iv: out = detail::run_iv(c, opts); break;
    case Task::rl_toy: out = detail::run_rl(c, opts); break;
  }
  RunSummary& s = out.summary;
  s.config = c.echo;
  s.task = to_string(c.task);
  s.method = to_string(c.method);
  s.seed = c.seed;
  s.n_records = out.result.records.size();
  if (!out.result.records.empty()) {
    const RunRecord& last = out.result.records.back();
    s.metrics["final_outer_loss"] = last.outer_loss;
    s.metrics["final_grad_norm"] = last.grad_norm;
    s.metrics["hvp_dim"] = static_cast<double>(last.hvp_dim);
    if (last.grad_bias) s.metrics["final_grad_bias"] = *last.grad_bias;
  }
  s.metrics["hvp_flops_total"] = out.result.meter.hvp_flops;
  if (c.record_wall_ms)
    s.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

inline std::string records_file_name(const RunConfig& c) { return std::string(to_string(c.method)) + "_records.csv"; }

/// Full run into c.out_dir. Records stream to disk as they are produced, so a
/// failed run leaves its partial records and no summary.
inline RunOutput run_to_dir(const RunConfig& c) {
  validate(c);
  const fs::path dir(c.out_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  require(!ec, ErrorCode::io, "cannot create '" + dir.string() + "': " + ec.message());
  fs::remove(dir / "summary.json", ec);

  std::ofstream csv(dir / records_file_name(c), std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(csv), ErrorCode::io, "cannot write records in '" + dir.string() + "'");
  csv << kRecordsHeader << '\n';
  RunOptions opts;
  opts.record_wall_ms = c.record_wall_ms;
  opts.keep_trajectory = false;
  opts.on_record = [&csv](const RunRecord& r) {
    std::ostringstream row;
    write_records_csv(row, {r});
    const std::string text = row.str();
    csv << text.substr(text.find('\n') + 1);
    csv.flush();
  };
  RunOutput out = execute_run(c, opts);
  csv.close();
  for (const auto& [name, text] : out.checkpoints) atomic_write(dir / name, text);
  atomic_write(dir / "summary.json", out.summary.to_json().dump(2) + "\n");
  return out;
}

}  // namespace funcbo::harness
