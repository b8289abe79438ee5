#include <gtest/gtest.h>

#include <cmath>

#include "funcbo/baselines.hpp"
#include "funcbo/oracle.hpp"
#include "funcbo/tasks.hpp"

using namespace funcbo;

namespace {

QuadInstance small_quad(std::uint64_t seed, std::size_t n = 60) {
  QuadOptions o;
  o.n = n;
  return make_quad_instance(seed, o);
}

ParamVector random_vec(std::size_t n, Rng& rng, double scale = 1.0) {
  ParamVector v(n);
  for (double& e : v) e = scale * rng.normal();
  return v;
}

}  // namespace

TEST(Aid, ExactInnerSolutionGivesTrueGradient) {
  const QuadInstance q = small_quad(1);
  const BilevelProblem p = make_quad_problem(q);
  Rng rng(2);
  const ParamVector omega = random_vec(q.omega_dim(), rng);
  const ParamVector theta = oracle::exact_inner_solve(q, omega).data;
  const Vec truth = oracle::quad_grad(q, omega);
  for (HvpMode mode : {HvpMode::exact_linear, HvpMode::finite_difference}) {
    AidConfig cfg;
    cfg.hvp_mode = mode;
    const AidResult r = aid_total_grad(*p.inner_loss, *p.outer_loss, omega, *p.inner_model, theta, q.d_in, q.d_out,
                                       q.opts.ridge, cfg);
    EXPECT_LE(rel_error(r.grad, truth), 1e-5);
    EXPECT_FALSE(r.residual_flag);
    EXPECT_EQ(r.hvp_dim, p.inner_model->num_params());
    EXPECT_GT(r.hvp_flops, 0.0);
  }
}

TEST(Aid, ZeroOuterGradientGivesZeroAdjoint) {
  QuadInstance q = small_quad(3);
  const BilevelProblem p0 = make_quad_problem(q);
  Rng rng(4);
  const ParamVector theta = random_vec(p0.inner_model->num_params(), rng);
  // make the outer targets equal the inner predictions so ∂_θ G_out = 0
  const Mat v = p0.inner_model->forward(theta, q.d_out.x);
  for (std::size_t i = 0; i < q.d_out.size(); ++i)
    for (std::size_t k = 0; k < q.opts.d_v; ++k) q.d_out.y(i, q.opts.d_t + k) = v(i, k);
  const BilevelProblem p = make_quad_problem(q);
  const AidResult r = aid_total_grad(*p.inner_loss, *p.outer_loss, p.omega0, *p.inner_model, theta, q.d_in, q.d_out,
                                     q.opts.ridge, AidConfig{});
  EXPECT_EQ(norm2(r.u), 0.0);
  EXPECT_EQ(norm2(r.grad), 0.0);
}

TEST(Aid, RankDeficientInnerHessianRaisesResidualFlag) {
  QuadInstance q = small_quad(5);
  q.opts.ridge = 0.0;
  // duplicate an input column in D_in only: the Hessian loses rank while
  // ∂_θ G_out keeps a component outside its range
  for (std::size_t i = 0; i < q.d_in.size(); ++i) q.d_in.x(i, 1) = q.d_in.x(i, 0);
  const BilevelProblem p = make_quad_problem(q);
  Rng rng(6);
  AidConfig cfg;
  cfg.hvp_mode = HvpMode::exact_linear;
  const AidResult r = aid_total_grad(*p.inner_loss, *p.outer_loss, random_vec(q.omega_dim(), rng), *p.inner_model,
                                     random_vec(p.inner_model->num_params(), rng), q.d_in, q.d_out, 0.0, cfg);
  EXPECT_TRUE(r.residual_flag);
  EXPECT_TRUE(all_finite(r.grad));
}

TEST(Aid, IdentityHeuristicUsesNegatedOuterGradient) {
  const QuadInstance q = small_quad(7);
  const BilevelProblem p = make_quad_problem(q);
  Rng rng(8);
  const ParamVector theta = random_vec(p.inner_model->num_params(), rng);
  AidConfig cfg;
  cfg.linear_solver = LinearSolverKind::identity_heuristic;
  const AidResult r =
      aid_total_grad(*p.inner_loss, *p.outer_loss, p.omega0, *p.inner_model, theta, q.d_in, q.d_out, 0.0, cfg);
  const auto [g_theta, g_omega] = outer_grads(*p.outer_loss, p.omega0, *p.inner_model, theta, q.d_out);
  EXPECT_LE(rel_error(r.u, scaled(g_theta, -1.0)), 1e-14);
  EXPECT_EQ(r.solver_iters, 0u);
  EXPECT_FALSE(r.residual_flag);
}

TEST(Aid, RunRecordsParameterSpaceHvpDim) {
  const QuadInstance q = small_quad(9);
  const BilevelProblem p = make_quad_problem(q);
  OptimConfig cfg = quad_exact_config(q);
  cfg.N = 3;
  const RunResult r = aid_run(p, cfg, AidConfig{}, 0);
  ASSERT_EQ(r.records.size(), 3u);
  for (const auto& rec : r.records) {
    EXPECT_EQ(rec.hvp_dim, p.inner_model->num_params());
    EXPECT_FALSE(rec.adjoint_loss.has_value());
    EXPECT_GT(rec.adjoint_steps, 0u);
  }
}

TEST(HessianCheck, LinearModelHasNoDistortion) {
  const QuadInstance q = small_quad(10);
  const BilevelProblem p = make_quad_problem(q);
  Rng rng(11);
  const HessianCheck hc = parametric_hessian_check(*p.inner_loss, random_vec(q.omega_dim(), rng), *p.inner_model,
                                                   random_vec(p.inner_model->num_params(), rng), q.d_in, 0.1);
  EXPECT_LE(hc.distortion_norm, 1e-6 * frobenius(hc.H_struct));
}

TEST(HessianCheck, NonlinearModelAwayFromOptimumIsDistorted) {
  const QuadInstance q = small_quad(12);
  const auto& o = q.opts;
  auto f = std::make_shared<LinearModel>(FeatureMap::raw(o.d_t), o.d_v);
  const SquaredInnerLoss loss(f, o.d_x, q.y_dim(), 0);
  const Mlp net(MlpSpec{{o.d_x, 3, o.d_v}, {Activation::tanh}});
  Rng rng(13);
  const HessianCheck hc = parametric_hessian_check(loss, random_vec(q.omega_dim(), rng), net,
                                                   random_vec(net.num_params(), rng), q.d_in);
  EXPECT_GT(hc.distortion_norm, 1e-3);
}

TEST(Penalty, ZeroLambdaIsPureOuterDescent) {
  const QuadInstance q = small_quad(14);
  const BilevelProblem p = make_quad_problem(q);
  Rng rng(15);
  PenaltyState s{random_vec(q.omega_dim(), rng), random_vec(p.inner_model->num_params(), rng), {}};
  s.theta_aux = random_vec(s.theta.size(), rng);
  PenaltyConfig cfg;
  cfg.lambda = 0.0;
  const auto [g_theta, g_omega] = outer_grads(*p.outer_loss, s.omega, *p.inner_model, s.theta, q.d_out);
  for (PenaltyKind kind : {PenaltyKind::value, PenaltyKind::gradient}) {
    const PenaltyStep st = kind == PenaltyKind::value
                               ? value_penalty_grads(*p.inner_loss, *p.outer_loss, *p.inner_model, s, q.d_in, q.d_out, cfg)
                               : gradient_penalty_grads(*p.inner_loss, *p.outer_loss, *p.inner_model, s, q.d_in,
                                                        q.d_out, cfg);
    EXPECT_EQ(st.grad_theta, g_theta);
    EXPECT_EQ(st.grad_omega, g_omega);
  }
}

TEST(Penalty, GradientPenaltyValueIsSquaredInnerGradientNorm) {
  const QuadInstance q = small_quad(16);
  const BilevelProblem p = make_quad_problem(q);
  Rng rng(17);
  PenaltyState s{random_vec(q.omega_dim(), rng), random_vec(p.inner_model->num_params(), rng), {}};
  s.theta_aux = s.theta;
  PenaltyConfig cfg;
  const PenaltyStep st = gradient_penalty_grads(*p.inner_loss, *p.outer_loss, *p.inner_model, s, q.d_in, q.d_out, cfg);
  const Vec g = oracle::fd_total_grad(
      [&](const ParamVector& th) {
        return empirical_inner_loss(*p.inner_loss, *p.inner_model, s.omega, th, q.d_in, 0.0).value;
      },
      s.theta);
  EXPECT_NEAR(st.penalty, dot(g, g), 1e-6 * dot(g, g));
}

TEST(Penalty, GradientsMatchFiniteDifferencesOfObjective) {
  const QuadInstance q = small_quad(18, 30);
  const BilevelProblem p = make_quad_problem(q);
  Rng rng(19);
  PenaltyState s{random_vec(q.omega_dim(), rng), random_vec(p.inner_model->num_params(), rng), {}};
  s.theta_aux = random_vec(s.theta.size(), rng);
  PenaltyConfig cfg;
  cfg.lambda = 0.7;
  cfg.R_in = 0.05;
  for (PenaltyKind kind : {PenaltyKind::value, PenaltyKind::gradient}) {
    auto grads = [&](const PenaltyState& x) {
      return kind == PenaltyKind::value
                 ? value_penalty_grads(*p.inner_loss, *p.outer_loss, *p.inner_model, x, q.d_in, q.d_out, cfg)
                 : gradient_penalty_grads(*p.inner_loss, *p.outer_loss, *p.inner_model, x, q.d_in, q.d_out, cfg);
    };
    const PenaltyStep st = grads(s);
    const Vec fd_omega = oracle::fd_total_grad(
        [&](const ParamVector& w) {
          PenaltyState x = s;
          x.omega = w;
          return grads(x).objective;
        },
        s.omega);
    const Vec fd_theta = oracle::fd_total_grad(
        [&](const ParamVector& th) {
          PenaltyState x = s;
          x.theta = th;
          return grads(x).objective;
        },
        s.theta);
    EXPECT_LE(rel_error(st.grad_omega, fd_omega), 1e-5) << (kind == PenaltyKind::value ? "value" : "gradient");
    EXPECT_LE(rel_error(st.grad_theta, fd_theta), 1e-5) << (kind == PenaltyKind::value ? "value" : "gradient");
  }
}

TEST(Penalty, RunRecordsHvpDimByKind) {
  const QuadInstance q = small_quad(20);
  const BilevelProblem p = make_quad_problem(q);
  OptimConfig cfg;
  cfg.N = 2;
  PenaltyConfig pc;
  const RunResult v = penalty_run(p, cfg, pc, PenaltyKind::value, 0);
  const RunResult g = penalty_run(p, cfg, pc, PenaltyKind::gradient, 0);
  EXPECT_EQ(v.records[0].hvp_dim, 0u);
  EXPECT_EQ(g.records[0].hvp_dim, p.inner_model->num_params());
  EXPECT_THROW(penalty_run(p, cfg, PenaltyConfig{-1.0}, PenaltyKind::value, 0), Error);
}

TEST(Mle, ModelMatchingBufferFrequenciesHasZeroGradient) {
  // one (s, a) pair, next states 0, 1, 1, 0 and reward 2 every time
  const MdpModel model = MdpModel::tabular(2, 1);
  Dataset buf{Mat(4, 3), Mat(4, 2, {2, 0, 2, 1, 2, 1, 2, 0})};
  for (std::size_t i = 0; i < 4; ++i) {
    buf.x(i, 0) = 1.0;
    buf.x(i, 2) = 1.0;
  }
  const Mat r(2, 1, {2.0, 0.0});
  const std::vector<Mat> P{Mat(1, 2, {0.5, 0.5}), Mat(1, 2, {0.5, 0.5})};
  const LossGrad lg = mle_model_loss(model, model.tabular_params(r, P), buf);
  EXPECT_LE(norm_inf(lg.grad), 1e-15);
  EXPECT_NEAR(lg.value, 0.5, 1e-15);  // Brier score of a fair coin
}

TEST(Mle, GradientMatchesFiniteDifferences) {
  const MdpModel model = MdpModel::low_rank(3, 2, 2);
  Rng rng(21);
  Dataset buf{Mat(6, 5), Mat(6, 2)};
  for (std::size_t i = 0; i < 6; ++i) {
    buf.x(i, rng.index(3)) = 1.0;
    buf.x(i, 3 + rng.index(2)) = 1.0;
    buf.y(i, 0) = rng.normal();
    buf.y(i, 1) = static_cast<double>(rng.index(3));
  }
  const ParamVector w = model.init_params(rng);
  const LossGrad lg = mle_model_loss(model, w, buf);
  const Vec fd = oracle::fd_total_grad([&](const ParamVector& x) { return mle_model_loss(model, x, buf).value; }, w);
  EXPECT_LE(rel_error(lg.grad, fd), 1e-6);
}
