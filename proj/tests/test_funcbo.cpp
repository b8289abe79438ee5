#include <gtest/gtest.h>

#include <cmath>

#include "funcbo/funcbo.hpp"
#include "funcbo/oracle.hpp"
#include "funcbo/tasks.hpp"

using namespace funcbo;

namespace {

QuadInstance small_quad(std::uint64_t seed) {
  QuadOptions o;
  o.n = 60;
  return make_quad_instance(seed, o);
}

}  // namespace

TEST(Optimizer, SgdStep) {
  Optimizer opt(OptimizerKind::sgd, 0.5);
  ParamVector p{1.0, -1.0};
  opt.step(p, ParamVector{2.0, 4.0});
  EXPECT_EQ(p, (ParamVector{0.0, -3.0}));
}

TEST(Optimizer, AdamFirstStepIsSignTimesRate) {
  Optimizer opt(OptimizerKind::adam, 1e-3);
  ParamVector p{0.0, 0.0};
  opt.step(p, ParamVector{5.0, -0.01});
  EXPECT_NEAR(p[0], -1e-3, 1e-9);
  EXPECT_NEAR(p[1], 1e-3, 1e-6);
}

TEST(SampleBatch, FullBatchIsIdentityOrder) {
  Rng rng(0);
  EXPECT_EQ(sample_batch(rng, 3, 0), (std::vector<std::size_t>{0, 1, 2}));
  const auto idx = sample_batch(rng, 5, 100);
  EXPECT_EQ(idx.size(), 100u);
  for (auto i : idx) EXPECT_LT(i, 5u);
}

TEST(InnerLoss, GradientMatchesFiniteDifferencesWithHalfRidge) {
  const QuadInstance q = small_quad(1);
  const BilevelProblem p = make_quad_problem(q);
  Rng rng(2);
  ParamVector omega(q.omega_dim()), theta(p.inner_model->num_params());
  for (double& w : omega) w = rng.normal();
  for (double& t : theta) t = rng.normal();
  const double R = 0.3;
  const LossGrad lg = empirical_inner_loss(*p.inner_loss, *p.inner_model, omega, theta, q.d_in, R);
  const Vec fd = oracle::fd_total_grad(
      [&](const ParamVector& th) { return empirical_inner_loss(*p.inner_loss, *p.inner_model, omega, th, q.d_in, R).value; },
      theta, 1e-5);
  EXPECT_LE(rel_error(lg.grad, fd), 1e-7);

  // R/2 ‖θ‖² convention
  const double base = empirical_inner_loss(*p.inner_loss, *p.inner_model, omega, theta, q.d_in, 0.0).value;
  EXPECT_NEAR(lg.value - base, 0.5 * R * dot(theta, theta), 1e-10);
}

TEST(InnerOpt, ZeroStepsLeaveParametersUnchanged) {
  const QuadInstance q = small_quad(3);
  const BilevelProblem p = make_quad_problem(q);
  OptimConfig cfg;
  cfg.M = 0;
  Rng rng(0);
  Optimizer opt;
  const ParamVector theta(p.inner_model->num_params(), 0.7);
  const OptResult r = inner_opt(*p.inner_loss, *p.inner_model, p.omega0, theta, q.d_in, cfg, rng, opt);
  EXPECT_EQ(r.params, theta);
  EXPECT_TRUE(r.trace.empty());
}

TEST(InnerOpt, FullBatchTraceIsMonotone) {
  const QuadInstance q = small_quad(4);
  const BilevelProblem p = make_quad_problem(q);
  OptimConfig cfg;
  cfg.M = 50;
  cfg.eta_in = 0.05;
  Rng rng(0);
  Optimizer opt(OptimizerKind::sgd, cfg.eta_in);
  const ParamVector omega(q.omega_dim(), 0.5);
  const OptResult r = inner_opt(*p.inner_loss, *p.inner_model, omega, ParamVector(p.inner_model->num_params(), 0.0),
                                q.d_in, cfg, rng, opt);
  ASSERT_EQ(r.trace.size(), 51u);
  for (std::size_t i = 1; i < r.trace.size(); ++i) EXPECT_LE(r.trace[i], r.trace[i - 1] + 1e-12 * std::abs(r.trace[i - 1]));
}

TEST(AdjointObjective, ConstantAdjointValue) {
  // a ≡ c with H = 2: ½·2c² + c·mean(d) = c² + c·mean(d)
  AdjointProblem ap;
  ap.b_in = Dataset{Mat(3, 1), Mat(3, 1)};
  ap.b_out = Dataset{Mat(4, 1), Mat(4, 1)};
  ap.inner.value = Vec(3, 0.0);
  ap.inner.grad_v = Mat(3, 1);
  ap.inner.hess_v = Mat(3, 1, 2.0);
  ap.d = Mat(4, 1, {1.0, 2.0, -3.0, 4.0});
  const double c = 0.7;
  const double v = adjoint_objective_values(ap, Mat(3, 1, c), Mat(4, 1, c));
  EXPECT_NEAR(v, c * c + c * 1.0, 1e-15);
}

TEST(AdjointOpt, ZeroStepsLeaveParametersUnchanged) {
  const QuadInstance q = small_quad(5);
  const BilevelProblem p = make_quad_problem(q);
  OptimConfig cfg;
  cfg.K = 0;
  Rng rng(0);
  Optimizer opt;
  const ParamVector theta(p.inner_model->num_params(), 0.1), xi(p.adjoint_model->num_params(), -0.2);
  const OptResult r = adjoint_opt(*p.inner_loss, *p.outer_loss, p.omega0, *p.inner_model, theta, *p.adjoint_model,
                                  xi, q.d_in, q.d_out, cfg, rng, opt);
  EXPECT_EQ(r.params, xi);
}

TEST(AdjointOpt, FullBatchTraceIsMonotoneAndApproachesExactSolve) {
  const QuadInstance q = small_quad(6);
  const BilevelProblem p = make_quad_problem(q);
  OptimConfig cfg;
  cfg.K = 400;
  cfg.eta_adj = 0.1;
  cfg.R_adj = q.opts.ridge;
  Rng rng(0);
  Optimizer opt(OptimizerKind::sgd, cfg.eta_adj);
  const ParamVector omega(q.omega_dim(), 0.3);
  const Mat v = oracle::exact_inner_solve(q, omega);
  const OptResult r = adjoint_opt(*p.inner_loss, *p.outer_loss, omega, *p.inner_model, v.data, *p.adjoint_model,
                                  ParamVector(p.adjoint_model->num_params(), 0.0), q.d_in, q.d_out, cfg, rng, opt);
  for (std::size_t i = 1; i < r.trace.size(); ++i) EXPECT_LE(r.trace[i], r.trace[i - 1] + 1e-12 * std::abs(r.trace[i - 1]));
  const Mat a = oracle::exact_adjoint_solve(q, omega, v);
  EXPECT_LE(rel_error(r.params, a.data), 1e-3);
}

TEST(LinearAdjointSolve, OrthonormalFeatures) {
  // Φ = Ψ = I₂ (two samples), c = 2, R = 0: Wᵀ = −D/2
  const Mat eye = Mat::identity(2);
  const Mat d(2, 1, {3.0, -1.0});
  const Mat w = linear_adjoint_solve(eye, eye, d, 2.0, 0.0);
  ASSERT_EQ(w.rows, 1u);
  EXPECT_NEAR(w(0, 0), -1.5, 1e-15);
  EXPECT_NEAR(w(0, 1), 0.5, 1e-15);
}

TEST(LinearAdjointSolve, MatchesNormalEquations) {
  Rng rng(7);
  Mat phi(30, 4), psi(20, 4), d(20, 2);
  for (Mat* m : {&phi, &psi, &d})
    for (double& e : m->data) e = rng.normal();
  const double c = 2.0, R = 0.1;
  const Mat w = linear_adjoint_solve(phi, psi, d, c, R);
  // residual of (c ΦᵀΦ/n + R I) Wᵀ + ΨᵀD/m
  Mat lhs = matmul_tn(phi, phi);
  for (double& e : lhs.data) e *= c / 30.0;
  for (std::size_t i = 0; i < 4; ++i) lhs(i, i) += R;
  const Mat res = matmul(lhs, transpose(w));
  const Mat rhs = matmul_tn(psi, d);
  for (std::size_t i = 0; i < res.data.size(); ++i) EXPECT_NEAR(res.data[i] + rhs.data[i] / 20.0, 0.0, 1e-12);
}

TEST(LinearAdjointSolve, SingularSystemNeedsRidge) {
  const Mat phi(3, 2, {1, 1, 1, 1, 1, 1});
  try {
    linear_adjoint_solve(phi, phi, Mat(3, 1, 1.0), 2.0, 0.0);
    FAIL() << "expected singular_system";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::singular_system);
  }
  EXPECT_NO_THROW(linear_adjoint_solve(phi, phi, Mat(3, 1, 1.0), 2.0, 1e-3));
}

TEST(ClosedFormAdjoint, IsNegativeOuterGradientOverCurvature) {
  const std::size_t ns = 3, na = 2;
  auto inner = std::make_shared<BellmanInnerLoss>(MdpModel::tabular(ns, na), 0.9);
  auto outer = std::make_shared<BellmanOuterLoss>(ns, na, 0.9, inner->omega_dim());
  Dataset b{Mat(2, ns + na), Mat(2, 2, {1.0, 0.0, -1.0, 2.0})};
  b.x(0, 0) = b.x(0, ns) = 1.0;
  b.x(1, 2) = b.x(1, ns + 1) = 1.0;
  const Mat v(2, 1, {0.5, 0.25});
  const Mat a = closed_form_adjoint_rl(*inner, *outer, ParamVector(inner->omega_dim(), 0.0), v, b);
  const Mat g = outer->eval_batch(ParamVector(inner->omega_dim(), 0.0), v, b.x, b.y).grad_v;
  for (std::size_t i = 0; i < 2; ++i) EXPECT_DOUBLE_EQ(a(i, 0), -g(i, 0));
}

TEST(FuncidRun, ZeroIterationsReturnsInitialState) {
  const QuadInstance q = small_quad(8);
  const BilevelProblem p = make_quad_problem(q);
  OptimConfig cfg = quad_exact_config(q);
  cfg.N = 0;
  const RunResult r = funcid_run(p, cfg, 1);
  EXPECT_TRUE(r.records.empty());
  ASSERT_EQ(r.omegas.size(), 1u);
  EXPECT_EQ(r.omegas[0], p.omega0);
}

TEST(FuncidRun, ExactModesGiveTheTrueGradient) {
  const QuadInstance q = small_quad(9);
  BilevelProblem p = make_quad_problem(q);
  Rng rng(1);
  for (double& w : p.omega0) w = rng.normal();
  OptimConfig cfg = quad_exact_config(q);
  cfg.N = 1;
  const RunResult r = funcid_run(p, cfg, 0);
  EXPECT_LE(rel_error(r.state.last_grad, oracle::quad_grad(q, p.omega0)), 1e-6);
  EXPECT_EQ(r.records[0].inner_steps, 0u);
  EXPECT_EQ(r.records[0].hvp_dim, q.opts.d_v);
}

TEST(FuncidRun, SameSeedSameRecords) {
  const QuadInstance q = small_quad(10);
  const BilevelProblem p = make_quad_problem(q);
  OptimConfig cfg;
  cfg.N = 5;
  cfg.M = 5;
  cfg.K = 5;
  cfg.batch_in = 16;
  cfg.batch_out = 16;
  const RunResult a = funcid_run(p, cfg, 42), b = funcid_run(p, cfg, 42), c = funcid_run(p, cfg, 43);
  ASSERT_EQ(a.records.size(), 5u);
  EXPECT_EQ(a.omegas, b.omegas);
  for (std::size_t i = 0; i < a.records.size(); ++i) EXPECT_EQ(a.records[i].outer_loss, b.records[i].outer_loss);
  EXPECT_NE(a.omegas.back(), c.omegas.back());
}

TEST(FuncidRun, WarmStartIsNeutralForExactSolves) {
  const QuadInstance q = small_quad(11);
  const BilevelProblem p = make_quad_problem(q);
  OptimConfig cfg = quad_exact_config(q);
  cfg.N = 4;
  cfg.eta_out = 0.1;
  const RunResult warm = funcid_run(p, cfg, 3);
  cfg.warm_start = false;
  const RunResult cold = funcid_run(p, cfg, 3);
  for (std::size_t i = 0; i < warm.omegas.size(); ++i) EXPECT_LE(rel_error(warm.omegas[i], cold.omegas[i]), 1e-12);
}

TEST(FuncidRun, StreamsEveryRecord) {
  const QuadInstance q = small_quad(12);
  const BilevelProblem p = make_quad_problem(q);
  OptimConfig cfg = quad_exact_config(q);
  cfg.N = 3;
  std::size_t seen = 0;
  RunOptions opts;
  opts.on_record = [&](const RunRecord& r) { EXPECT_EQ(r.iter, seen++); };
  funcid_run(p, cfg, 0, {}, opts);
  EXPECT_EQ(seen, 3u);
}

TEST(FuncidRun, InvalidConfigsRejected) {
  const QuadInstance q = small_quad(13);
  const BilevelProblem p = make_quad_problem(q);
  OptimConfig cfg;
  cfg.M = 0;
  EXPECT_THROW(funcid_run(p, cfg, 0), Error);
  cfg = OptimConfig{};
  cfg.adjoint_mode = AdjointMode::closed_form_rl;
  EXPECT_THROW(funcid_run(p, cfg, 0), Error);
}

TEST(HiddenFeatureAdjoint, NeedsAnMlpWithHiddenLayer) {
  const auto make = hidden_feature_adjoint();
  const LinearModel lin(FeatureMap::raw(2), 1);
  EXPECT_THROW(make(lin, ParamVector(2, 0.0)), Error);
  const Mlp net(MlpSpec{{2, 3, 1}, {Activation::relu}});
  Rng rng(0);
  const auto adj = make(net, net.init_params(rng));
  EXPECT_EQ(adj->num_params(), 3u);
}
