#pragma once

// Acceptance criteria, each a self-contained check returning pass/fail and a
// one-line detail. The quick suite is criteria 11, 1, 2, 3.

#include <algorithm>
#include <chrono>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "funcbo/baselines.hpp"
#include "funcbo/harness/runner.hpp"
#include "funcbo/oracle.hpp"
#include "funcbo/tasks.hpp"

namespace funcbo::harness {

struct CriterionResult {
  int id = 0;
  std::string name;
  bool pass = false;
  std::string detail;
  double seconds = 0.0;
};

inline CriterionResult named(int id, std::string name) {
  CriterionResult r;
  r.id = id;
  r.name = std::move(name);
  return r;
}

namespace accept {

inline std::string fmt(double v) {
  std::ostringstream os;
  os.precision(3);
  os << v;
  return os.str();
}

// ---------------------------------------------------------------------------
// 1. gradient identity

inline CriterionResult gradient_identity() {
  CriterionResult r = named(1, "gradient identity (exact solves vs finite differences)");
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const QuadInstance q = make_quad_instance(seed);
    const BilevelProblem p = make_quad_problem(q);
    const auto& inner = static_cast<const LinearModel&>(*p.inner_model);
    const auto& adj = static_cast<const LinearModel&>(*p.adjoint_model);
    Rng rng(seed + 100);
    for (int k = 0; k < 10; ++k) {
      ParamVector w(q.omega_dim());
      for (double& e : w) e = rng.normal();
      const ParamVector th = exact_inner_linear(*p.inner_loss, inner, w, q.d_in, q.opts.ridge);
      const AdjointProblem ap = build_adjoint_problem(*p.inner_loss, *p.outer_loss, w, inner, th, q.d_in, q.d_out);
      const ParamVector xi = exact_adjoint_linear(ap, adj, p.inner_loss->curvature(), q.opts.ridge);
      const ParamVector g = total_grad(*p.inner_loss, *p.outer_loss, w, inner, th, adj, xi, q.d_in, q.d_out);
      const Vec g_fd = oracle::fd_total_grad([&](const ParamVector& x) { return oracle::quad_value(q, x); }, w);
      worst = std::max(worst, rel_error(g, g_fd));
    }
  }
  r.pass = worst <= 1e-5;
  r.detail = "worst rel error " + fmt(worst) + " over 5 seeds x 10 omegas (tol 1e-5)";
  return r;
}

// ---------------------------------------------------------------------------
// 2. adjoint convergence

inline CriterionResult adjoint_convergence() {
  CriterionResult r = named(2, "linear adjoint gradient descent convergence");
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const QuadInstance q = make_quad_instance(seed);
    const BilevelProblem p = make_quad_problem(q);
    const auto& inner = static_cast<const LinearModel&>(*p.inner_model);
    Rng rng(seed + 200);
    ParamVector w(q.omega_dim());
    for (double& e : w) e = rng.normal();
    const ParamVector th = exact_inner_linear(*p.inner_loss, inner, w, q.d_in, q.opts.ridge);
    const Mat a_star = oracle::exact_adjoint_solve(q, w, oracle::exact_inner_solve(q, w));
    const double L = oracle::feature_spectrum(q.d_in.x, p.inner_loss->curvature(), q.opts.ridge).second;
    OptimConfig cfg = quad_exact_config(q);
    cfg.adjoint_mode = AdjointMode::iterative;
    cfg.K = 2000;
    cfg.eta_adj = 1.0 / L;  // the spectral bound is 2/L
    Optimizer opt(OptimizerKind::sgd, cfg.eta_adj);
    Rng brng(seed);
    const OptResult res = adjoint_opt(*p.inner_loss, *p.outer_loss, w, inner, th, *p.adjoint_model,
                                      ParamVector(p.adjoint_model->num_params(), 0.0), q.d_in, q.d_out, cfg, brng, opt);
    worst = std::max(worst, rel_error(res.params, a_star.data));
  }
  r.pass = worst <= 1e-4;
  r.detail = "worst rel adjoint error " + fmt(worst) + " after K=2000 at eta=1/L (tol 1e-4)";
  return r;
}

// ---------------------------------------------------------------------------
// 3. parametric vs functional gradient

/// Relative gap between AID and the functional gradient with the per-sample
/// adjoint a_i = −∂_vℓ_out/c on a shared dataset.
inline double aid_functional_gap(const QuadOptions& o, std::uint64_t seed) {
  const QuadInstance q = make_quad_instance(seed, o);
  const BilevelProblem p = make_quad_problem(q);
  const auto& inner = static_cast<const LinearModel&>(*p.inner_model);
  Rng rng(seed + 300);
  ParamVector w(q.omega_dim());
  for (double& e : w) e = rng.normal();
  const ParamVector th = exact_inner_linear(*p.inner_loss, inner, w, q.d_in, 0.0);
  const AidResult aid = aid_total_grad(*p.inner_loss, *p.outer_loss, w, inner, th, q.d_in, q.d_in, 0.0, AidConfig{});
  const auto& sq = static_cast<const SquaredInnerLoss&>(*p.inner_loss);
  const Mat v = sq.predictions(w, q.d_in.y);  // the functional inner solution on each sample
  const Mat a = closed_form_adjoint_rl(*p.inner_loss, *p.outer_loss, w, v, q.d_in);
  const ParamVector g = total_grad_values(*p.inner_loss, *p.outer_loss, w, q.d_in, v, a, q.d_in, v);
  return rel_error(aid.grad, g);
}

inline CriterionResult projection_identity() {
  CriterionResult r = named(3, "AID equals functional gradient iff features realize it");
  QuadOptions real = quad_realizable_options();
  QuadOptions under = real;
  under.d_x = 2;
  double worst_real = 0.0, min_under = 1e300;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    worst_real = std::max(worst_real, aid_functional_gap(real, seed));
    min_under = std::min(min_under, aid_functional_gap(under, seed));
  }
  r.pass = worst_real <= 1e-6 && min_under > 1e-3;
  r.detail = "realizable rel gap " + fmt(worst_real) + " (tol 1e-6); under-complete rel gap " + fmt(min_under) +
             " (needs > 1e-3)";
  return r;
}

// ---------------------------------------------------------------------------
// 4. Hessian distortion

struct DistortionSetup {
  std::shared_ptr<LinearModel> f;
  std::shared_ptr<SquaredInnerLoss> loss;
  std::shared_ptr<Mlp> net;
  ParamVector omega;
  ParamVector theta_star;
  Dataset data;
};

/// Small tanh network whose regression targets are its own outputs at θ*,
/// so the inner residuals vanish there.
inline DistortionSetup distortion_setup(std::uint64_t seed) {
  DistortionSetup s;
  Rng rng(seed);
  s.f = std::make_shared<LinearModel>(FeatureMap::raw(1), 1);
  s.loss = std::make_shared<SquaredInnerLoss>(s.f, 2, 1, 0);
  s.net = std::make_shared<Mlp>(MlpSpec{{2, 3, 1}, {Activation::tanh}});
  s.omega = {1.0};
  s.theta_star = s.net->init_params(rng);
  for (double& t : s.theta_star) t *= 2.0;
  const std::size_t n = 40;
  s.data = Dataset{Mat(n, 2), Mat(n, 1)};
  for (double& x : s.data.x.data) x = rng.normal();
  const Mat out = s.net->forward(s.theta_star, s.data.x);
  for (std::size_t i = 0; i < n; ++i) s.data.y(i, 0) = out(i, 0);
  return s;
}

inline CriterionResult hessian_distortion() {
  CriterionResult r = named(4, "parametric Hessian distortion");
  double at_opt = 0.0, at_sub = 1e300, linear = 0.0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const DistortionSetup s = distortion_setup(seed);
    at_opt = std::max(at_opt, parametric_hessian_check(*s.loss, s.omega, *s.net, s.theta_star, s.data).distortion_norm);
    ParamVector off = s.theta_star;
    Rng rng(seed + 400);
    for (double& t : off) t += 0.5 * rng.normal();
    at_sub = std::min(at_sub, parametric_hessian_check(*s.loss, s.omega, *s.net, off, s.data).distortion_norm);

    const LinearModel lin(FeatureMap::raw_with_bias(2), 1);
    ParamVector th = lin.init_params(rng);
    for (double& t : th) t += 3.0 * rng.normal();
    linear = std::max(linear, parametric_hessian_check(*s.loss, s.omega, lin, th, s.data).distortion_norm);
  }
  r.pass = at_opt <= 1e-4 && linear <= 1e-6 && at_sub > 1e-3;
  r.detail = "at theta* " + fmt(at_opt) + " (tol 1e-4); linear " + fmt(linear) + " (tol 1e-6); suboptimal " +
             fmt(at_sub) + " (needs > 1e-3)";
  return r;
}

// ---------------------------------------------------------------------------
// 5. bias trend

inline CriterionResult bias_trend() {
  CriterionResult r = named(5, "gradient bias shrinks with inner/adjoint budget");
  std::vector<std::uint64_t> seeds;
  for (std::uint64_t s = 0; s < 10; ++s) seeds.push_back(s);
  const auto rows = oracle::bias_probe(
      {{"(1,1)", false, 1, 1}, {"(5,5)", false, 5, 5}, {"(20,20)", false, 20, 20}, {"exact", true, 0, 0}}, seeds);
  bool mono = true;
  std::string d = "medians";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    d += " " + rows[i].budget.label + "=" + fmt(rows[i].median_bias);
    if (i > 0 && rows[i].median_bias > rows[i - 1].median_bias) mono = false;
  }
  const double last = rows.back().median_bias;
  r.pass = mono && last <= 1e-5;
  r.detail = d + (mono ? "; non-increasing" : "; NOT monotone") + " (final tol 1e-5)";
  return r;
}

// ---------------------------------------------------------------------------
// 6. stationarity

inline CriterionResult stationarity() {
  CriterionResult r = named(6, "outer loop reaches a stationary point");
  const QuadInstance q = make_quad_instance(0);
  const BilevelProblem p = make_quad_problem(q);
  const Vec ev = oracle::symmetric_eigenvalues(oracle::quad_hessian(q));
  OptimConfig cfg = quad_exact_config(q);
  cfg.N = 500;
  cfg.eta_out = 1.0 / ev.back();
  const RunResult res = funcid_run(p, cfg, 0);
  double best = 1e300;
  for (const ParamVector& w : res.omegas) best = std::min(best, norm2(oracle::quad_grad(q, w)));
  r.pass = best <= 1e-6;
  r.detail = "min oracle grad norm over 500 steps " + fmt(best) + " at eta=1/lambda_max, condition " +
             fmt(ev.back() / ev.front()) + " (tol 1e-6)";
  return r;
}

// ---------------------------------------------------------------------------
// 7. IV analog

/// Frozen settings from the IV pilot (mirrored in configs/iv_funcid_linear.cfg
/// and configs/iv_direct.cfg).
inline KeyValues iv_acceptance_config(const std::string& method) {
  KeyValues kv{{"run.task", "iv"},       {"run.method", method},     {"iv.n", "5000"},
               {"iv.kappa", "8"},        {"iv.hidden", "32"},        {"iv.activation", "relu"},
               {"optim.N", "2000"},      {"optim.eta_out", "1e-3"},  {"optim.opt_out", "adam"},
               {"optim.batch_out", "256"}};
  if (method == "funcid_linear") {
    kv["optim.M"] = "5";
    kv["optim.eta_in"] = "1e-2";
    kv["optim.opt_in"] = "adam";
    kv["optim.batch_in"] = "256";
    kv["optim.R_adj"] = "1e-3";
  }
  return kv;
}

inline constexpr double kIvRatio = 0.5;
inline constexpr int kIvMinPass = 9;

inline CriterionResult iv_analog() {
  CriterionResult r = named(7, "IV: functional method beats direct regression");
  int ok = 0;
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    KeyValues f = iv_acceptance_config("funcid_linear"), d = iv_acceptance_config("direct");
    f["run.seed"] = d["run.seed"] = std::to_string(seed);
    RunOptions o;
    o.keep_trajectory = false;
    const double mse_f = execute_run(config_from_key_values(f), o).summary.final_metric.value;
    const double mse_d = execute_run(config_from_key_values(d), o).summary.final_metric.value;
    const double ratio = mse_f / mse_d;
    worst = std::max(worst, ratio);
    ok += ratio <= kIvRatio;
  }
  r.pass = ok >= kIvMinPass;
  r.detail = std::to_string(ok) + "/10 seeds with mse ratio <= 0.5 (need >= 9); worst ratio " + fmt(worst);
  return r;
}

// ---------------------------------------------------------------------------
// 8. RL closed-form adjoint

inline CriterionResult rl_closed_form() {
  CriterionResult r = named(8, "RL closed-form adjoint equals per-sample minimization");
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    const ToyMdp mdp = gen_mdp(rng);
    const Dataset buf = replay_collect(mdp, 512, rng);
    for (MdpModelKind kind : {MdpModelKind::tabular, MdpModelKind::low_rank}) {
      Rng ir = rng.split();
      RlProblem rp = make_rl_problem(mdp, buf, kind, 2, ir);
      ParamVector theta = rp.q_net->init_params(ir);
      ParamVector hbar = rp.q_net->init_params(ir);
      rp.inner->set_lagged(*rp.q_net, hbar);
      rp.outer->set_lagged(*rp.q_net, hbar);
      const Dataset b = buf.rows(sample_batch(ir, buf.size(), 128));
      const ParamVector& w = rp.problem.omega0;
      const Mat v = rp.q_net->forward(theta, b.x);
      const Mat a_cf = closed_form_adjoint_rl(*rp.inner, *rp.outer, w, v, b);
      const AdjointProblem ap = build_adjoint_problem(*rp.inner, *rp.outer, w, *rp.q_net, theta, b, b);
      std::vector<Mat> hs;
      for (std::size_t i = 0; i < b.size(); ++i) hs.push_back(ap.inner.hess(i));
      const Mat a_grp = oracle::grouped_adjoint(b.x, hs, ap.d);
      const ParamVector g_cf = total_grad_values(*rp.inner, *rp.outer, w, b, v, a_cf, b, v);
      const ParamVector g_grp = total_grad_values(*rp.inner, *rp.outer, w, b, v, a_grp, b, v);
      worst = std::max(worst, rel_error(g_cf, g_grp));
    }
  }
  r.pass = worst <= 1e-10;
  r.detail = "worst rel total-gradient gap " + fmt(worst) + " over 5 MDPs x 2 models (tol 1e-10)";
  return r;
}

// ---------------------------------------------------------------------------
// 9. RL fixed point and policy recovery

inline KeyValues rl_acceptance_config() {
  return KeyValues{{"run.task", "rl_toy"},       {"run.method", "funcid"},
                   {"rl.buffer", "20000"},       {"rl.tau", "5e-3"},
                   {"optim.N", "5000"},          {"optim.M", "1"},
                   {"optim.eta_in", "0.5"},      {"optim.eta_out", "1e-3"},
                   {"optim.opt_out", "adam"},    {"optim.batch_in", "256"},
                   {"optim.same_batch", "true"}, {"optim.adjoint_mode", "closed_form_rl"}};
}

inline CriterionResult rl_fixed_point() {
  CriterionResult r = named(9, "RL fixed point and greedy policy recovery");
  double sup = 0.0;
  int ok = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    const ToyMdp mdp = gen_mdp(rng);
    const Mat q_star = soft_value_iteration(mdp, mdp.gamma);
    const Mat q_fp =
        rl_inner_fixed_point(MdpModel::tabular(mdp.n_states, mdp.n_actions), true_model_params(mdp), mdp.gamma);
    for (std::size_t i = 0; i < q_star.data.size(); ++i) sup = std::max(sup, std::abs(q_star.data[i] - q_fp.data[i]));

    KeyValues kv = rl_acceptance_config();
    kv["run.seed"] = std::to_string(seed);
    RunOptions o;
    o.keep_trajectory = false;
    ok += execute_run(config_from_key_values(kv), o).summary.metrics.at("policy_exact_match") == 1.0;
  }
  r.pass = sup <= 1e-3 && ok >= 8;
  r.detail = "fixed point sup error " + fmt(sup) + " (tol 1e-3); policy match on " + std::to_string(ok) +
             "/10 seeds (need >= 8)";
  return r;
}

// ---------------------------------------------------------------------------
// 10. cost accounting

inline CriterionResult cost_accounting() {
  CriterionResult r = named(10, "HVP dimension and cost accounting");
  KeyValues base{{"run.task", "iv"},     {"iv.n", "500"},         {"iv.hidden", "32"},
                 {"optim.N", "5"},        {"optim.M", "5"},        {"optim.K", "5"},
                 {"optim.batch_in", "64"}, {"optim.batch_out", "64"}, {"optim.eta_in", "1e-2"},
                 {"optim.eta_adj", "1e-2"}, {"optim.eta_out", "1e-3"}};
  RunOptions o;
  o.keep_trajectory = false;
  KeyValues f = base, a = base;
  f["run.method"] = "funcid";
  a["run.method"] = "aid";
  const RunConfig cf = config_from_key_values(f);
  const RunOutput rf = execute_run(cf, o);
  const RunOutput ra = execute_run(config_from_key_values(a), o);
  const std::size_t p_in = 3 * 32 + 32 + 32 + 1;
  const std::size_t d_v = 1;
  bool dims = p_in >= 100 * d_v;
  double ff = 0.0, fa = 0.0;
  for (const RunRecord& rec : rf.result.records) {
    dims = dims && rec.hvp_dim == d_v;
    ff += rec.hvp_flops;
  }
  for (const RunRecord& rec : ra.result.records) {
    dims = dims && rec.hvp_dim == p_in;
    fa += rec.hvp_flops;
  }
  ff /= static_cast<double>(rf.result.records.size());
  fa /= static_cast<double>(ra.result.records.size());
  const double ratio = fa / std::max(ff, 1e-300);
  r.pass = dims && ratio >= 10.0 && !rf.result.records.empty() && !ra.result.records.empty();
  r.detail = std::string("hvp_dim ") + (dims ? "d_v=1 (FuncID) and p_in=161 (AID) on every iteration" : "MISMATCH") +
             "; per-step HVP flops AID/FuncID = " + fmt(ratio) + " (needs >= 10)";
  return r;
}

// ---------------------------------------------------------------------------
// 11. derivative micro-suite

struct DerivCheck {
  std::string name;
  double rel_error = 0.0;
};

/// Central-difference gradient of a scalar function.
inline Vec fd_gradient(const std::function<double(const Vec&)>& f, Vec x, double eps = 1e-5) {
  Vec g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double xi = x[i], h = eps * (1.0 + std::abs(xi));
    x[i] = xi + h;
    const double fp = f(x);
    x[i] = xi - h;
    const double fm = f(x);
    x[i] = xi;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

inline double rel_gap(const Vec& a, const Vec& b) {
  const double scale = std::max(norm2(b), 1e-8);
  return norm2(sub(a, b)) / scale;
}

/// FD checks of one loss at one sample.
inline void check_loss(const std::string& name, const PointwiseLoss& loss, const ParamVector& omega, const Vec& v,
                       const Vec& x, const Vec& y, Rng& rng, std::vector<DerivCheck>& out) {
  const LossBundle b = eval_bundle(loss, omega, v, x, y);
  out.push_back({name + ".grad_v",
                 rel_gap(b.grad_v, fd_gradient([&](const Vec& vv) { return eval_bundle(loss, omega, vv, x, y).value; }, v))});
  const std::size_t d = v.size();
  Mat h_fd(d, d);
  for (std::size_t k = 0; k < d; ++k) {
    const Vec col = fd_gradient([&](const Vec& vv) { return eval_bundle(loss, omega, vv, x, y).grad_v[k]; }, v);
    for (std::size_t j = 0; j < d; ++j) h_fd(k, j) = col[j];
  }
  out.push_back({name + ".hess_v", rel_gap(b.hess_v.data, h_fd.data)});
  out.push_back({name + ".grad_omega",
                 rel_gap(grad_omega(loss, omega, v, x, y),
                         fd_gradient([&](const Vec& w) { return eval_bundle(loss, w, v, x, y).value; }, omega))});
  Vec a(d);
  for (double& e : a) e = rng.normal();
  out.push_back({name + ".cross_apply",
                 rel_gap(cross_apply(loss, omega, v, x, y, a), fd_gradient([&](const Vec& w) {
                           return dot(eval_bundle(loss, w, v, x, y).grad_v, a);
                         }, omega))});
}

/// VJP against FD of ⟨cot, forward(θ)⟩.
inline DerivCheck check_model(const std::string& name, const Model& m, const ParamVector& theta, const Mat& xs,
                              Rng& rng) {
  Mat cot(xs.rows, m.output_dim());
  for (double& c : cot.data) c = rng.normal();
  const Vec fd = fd_gradient([&](const Vec& th) { return dot(m.forward(th, xs).data, cot.data); }, theta);
  return {name + ".vjp", rel_gap(m.vjp_params(theta, xs, cot), fd)};
}

inline Vec normal_vec(Rng& rng, std::size_t n, double scale = 1.0) {
  Vec v(n);
  for (double& e : v) e = scale * rng.normal();
  return v;
}

inline std::vector<DerivCheck> derivative_suite(std::uint64_t seed = 0) {
  std::vector<DerivCheck> out;
  Rng rng(seed);

  // squared outer loss: o stored in y[2:4]
  {
    const SquaredOuterLoss loss(2, 3, 4, 2, 5);
    check_loss("squared_outer", loss, normal_vec(rng, 5), normal_vec(rng, 2), normal_vec(rng, 3), normal_vec(rng, 4),
               rng, out);
  }
  // squared inner loss towards an MLP of the treatments
  for (Activation act : {Activation::tanh, Activation::identity}) {
    auto f = std::make_shared<Mlp>(MlpSpec{{3, 4, 2}, {act}});
    const SquaredInnerLoss loss(f, 2, 4, 1);
    Rng ir = rng.split();
    check_loss(std::string("squared_inner_") + to_string(act), loss, f->init_params(ir), normal_vec(rng, 2),
               normal_vec(rng, 2), normal_vec(rng, 4), rng, out);
  }
  // Bellman losses, tabular and low-rank models
  for (MdpModelKind kind : {MdpModelKind::tabular, MdpModelKind::low_rank}) {
    const std::size_t ns = 5, na = 3;
    const MdpModel model = kind == MdpModelKind::tabular ? MdpModel::tabular(ns, na) : MdpModel::low_rank(ns, na, 2);
    BellmanInnerLoss inner(model, 0.9);
    BellmanOuterLoss outer(ns, na, 0.9, model.num_params());
    const LinearModel q_net(FeatureMap::state_action_pairs(ns, na), 1);
    Rng ir = rng.split();
    const ParamVector hbar = normal_vec(ir, q_net.num_params());
    inner.set_lagged(q_net, hbar);
    outer.set_lagged(q_net, hbar);
    const ParamVector omega = normal_vec(ir, model.num_params(), 0.5);
    Vec x(ns + na, 0.0);
    encode_pair(x, ns, 2, 1);
    const Vec y{0.3, 4.0};
    const std::string tag = kind == MdpModelKind::tabular ? "tabular" : "low_rank";
    check_loss("bellman_inner_" + tag, inner, omega, normal_vec(rng, 1), x, y, rng, out);
    check_loss("bellman_outer_" + tag, outer, omega, normal_vec(rng, 1), x, y, rng, out);
  }
  // models
  {
    Mat xs(4, 3);
    for (double& e : xs.data) e = rng.normal();
    for (Activation act : {Activation::tanh, Activation::relu, Activation::identity}) {
      const Mlp m(MlpSpec{{3, 5, 4, 2}, {act, act}});
      Rng ir = rng.split();
      out.push_back(check_model(std::string("mlp_") + to_string(act), m, m.init_params(ir), xs, rng));
    }
    const LinearModel lin(FeatureMap::raw_with_bias(3), 2);
    out.push_back(check_model("linear_raw_with_bias", lin, normal_vec(rng, lin.num_params()), xs, rng));
    const Mlp base(MlpSpec{{3, 6, 1}, {Activation::tanh}});
    Rng ir = rng.split();
    const LinearModel hid(FeatureMap::mlp_hidden(base, base.init_params(ir)), 2);
    out.push_back(check_model("linear_mlp_hidden", hid, normal_vec(rng, hid.num_params()), xs, rng));
  }
  // lse shift invariance
  {
    const Vec v = normal_vec(rng, 6, 3.0);
    double worst = 0.0;
    for (double c : {-1e3, -2.5, 0.0, 7.0, 1e3}) {
      Vec s = v;
      for (double& e : s) e += c;
      worst = std::max(worst, std::abs(lse(s) - c - lse(v)) / std::max(1.0, std::abs(lse(v))));
    }
    out.push_back({"lse.shift_invariance", worst});
  }
  return out;
}

inline CriterionResult derivative_micro_suite() {
  CriterionResult r = named(11, "derivative micro-suite");
  const auto checks = derivative_suite();
  double worst = 0.0;
  std::string worst_name;
  for (const auto& c : checks)
    if (!(c.rel_error <= worst) || worst_name.empty()) {
      worst = c.rel_error;
      worst_name = c.name;
    }
  r.pass = worst <= 1e-5;
  r.detail = std::to_string(checks.size()) + " checks; worst " + worst_name + " rel " + fmt(worst) + " (tol 1e-5)";
  return r;
}

}  // namespace accept

struct Criterion {
  int id;
  std::function<CriterionResult()> run;
};

inline std::vector<Criterion> all_criteria() {
  return {{1, accept::gradient_identity},  {2, accept::adjoint_convergence}, {3, accept::projection_identity},
          {4, accept::hessian_distortion}, {5, accept::bias_trend},          {6, accept::stationarity},
          {7, accept::iv_analog},          {8, accept::rl_closed_form},      {9, accept::rl_fixed_point},
          {10, accept::cost_accounting},   {11, accept::derivative_micro_suite}};
}

inline std::vector<int> suite_ids(const std::string& suite) {
  if (suite == "quick") return {11, 1, 2, 3};
  if (suite == "full") return {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11};
  throw Error(ErrorCode::config, "unknown suite '" + suite + "' (quick or full)");
}

/// Runs the listed criteria in order; a criterion that throws fails with the
/// error message as its detail.
inline std::vector<CriterionResult> run_criteria(const std::vector<int>& ids,
                                                 const std::function<void(const CriterionResult&)>& on_result = {}) {
  const auto all = all_criteria();
  std::vector<CriterionResult> out;
  for (int id : ids) {
    const auto it = std::find_if(all.begin(), all.end(), [id](const Criterion& c) { return c.id == id; });
    require(it != all.end(), ErrorCode::config, "unknown criterion " + std::to_string(id));
    const auto t0 = std::chrono::steady_clock::now();
    CriterionResult r;
    try {
      r = it->run();
    } catch (const std::exception& e) {
      r = named(id, "criterion " + std::to_string(id));
      r.detail = std::string("error: ") + e.what();
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (on_result) on_result(r);
    out.push_back(r);
  }
  return out;
}

inline std::string format_result(const CriterionResult& r) {
  std::ostringstream os;
  os << (r.pass ? "PASS" : "FAIL") << "  [" << r.id << "] " << r.name << ": " << r.detail << " (" << accept::fmt(r.seconds)
     << " s)";
  return os.str();
}

}  // namespace funcbo::harness
