#include <gtest/gtest.h>

#include <cmath>

#include "funcbo/oracle.hpp"

using namespace funcbo;
using namespace funcbo::oracle;

namespace {

QuadInstance small_quad(std::uint64_t seed, std::size_t n = 80) {
  QuadOptions o;
  o.n = n;
  return make_quad_instance(seed, o);
}

ParamVector random_vec(std::size_t n, Rng& rng) {
  ParamVector v(n);
  for (double& e : v) e = rng.normal();
  return v;
}

}  // namespace

TEST(Compare, RelativeErrorFloorsTheDenominator) {
  const OracleReport r = compare("x", Vec{1e-13}, Vec{0.0}, 1.0);
  EXPECT_DOUBLE_EQ(r.rel_error, 1e-13 / 1e-12);
  EXPECT_TRUE(r.pass);
  const OracleReport s = compare_scalar("y", 1.1, 1.0, 0.05);
  EXPECT_FALSE(s.pass);
  EXPECT_NEAR(s.rel_error, 0.1, 1e-12);
}

TEST(FdTotalGrad, ConstantAndQuadratic) {
  const ParamVector w{0.5, -2.0, 3.0};
  EXPECT_EQ(fd_total_grad([](const ParamVector&) { return 4.0; }, w), Vec(3, 0.0));
  const Vec g = fd_total_grad([](const ParamVector& x) { return 0.5 * dot(x, x); }, w);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(g[i], w[i], 1e-9);
}

TEST(FdTotalGrad, RichardsonAgreement) {
  // F = Σ sin(ω_i): truncation error of the central difference is h²|F‴|/6
  auto F = [](const ParamVector& x) {
    double s = 0.0;
    for (double v : x) s += std::sin(v);
    return s;
  };
  const ParamVector w{0.3, 1.1, -0.7};
  const double eps = 1e-3;
  const Vec g1 = fd_total_grad(F, w, eps), g2 = fd_total_grad(F, w, eps / 2);
  for (std::size_t i = 0; i < 3; ++i) {
    const double h = eps / 2 * (1.0 + std::abs(w[i]));
    const double trunc = h * h / 6.0;
    EXPECT_LE(std::abs(g1[i] - g2[i]), 4.0 * trunc);
  }
  EXPECT_THROW(fd_total_grad(F, w, 0.0), Error);
}

TEST(ExactInnerSolve, FirstOrderOptimality) {
  const QuadInstance q = small_quad(1);
  const BilevelProblem p = make_quad_problem(q);
  Rng rng(2);
  const ParamVector omega = random_vec(q.omega_dim(), rng);
  const Mat v = exact_inner_solve(q, omega);
  const LossGrad lg = empirical_inner_loss(*p.inner_loss, *p.inner_model, omega, v.data, q.d_in, q.opts.ridge);
  EXPECT_LE(norm2(lg.grad), 1e-10);
}

TEST(ExactInnerSolve, HandCheckableLeastSquares) {
  // n = 3, d_x = d_t = d_v = 1, t = 2x exactly: V* = 2ω
  QuadOptions o;
  o.n = 3;
  o.d_z = 1;
  o.d_x = 1;
  o.d_t = 1;
  o.d_v = 1;
  o.ridge = 0.0;
  QuadInstance q;
  q.opts = o;
  q.d_in = Dataset{Mat(3, 1, {1.0, 2.0, -1.0}), Mat(3, 2, {2.0, 0.0, 4.0, 0.0, -2.0, 0.0})};
  q.d_out = q.d_in;
  EXPECT_NEAR(exact_inner_solve(q, ParamVector{1.5})(0, 0), 3.0, 1e-14);
}

TEST(ExactInnerSolve, RealizableInstanceInterpolates) {
  QuadOptions o = quad_realizable_options();
  o.n = 50;
  o.ridge = 1e-12;
  const QuadInstance q = make_quad_instance(3, o);
  const BilevelProblem p = make_quad_problem(q);
  Rng rng(4);
  const ParamVector omega = random_vec(q.omega_dim(), rng);
  const Mat v = exact_inner_solve(q, omega);
  EXPECT_LE(empirical_inner_loss(*p.inner_loss, *p.inner_model, omega, v.data, q.d_in, 0.0).value, 1e-16);
}

TEST(ExactAdjointSolve, AgreesWithLinearAdjointSolve) {
  const QuadInstance q = small_quad(5);
  const BilevelProblem p = make_quad_problem(q);
  Rng rng(6);
  const ParamVector omega = random_vec(q.omega_dim(), rng);
  const Mat v = exact_inner_solve(q, omega);
  const Mat a = exact_adjoint_solve(q, omega, v);
  const AdjointProblem ap =
      build_adjoint_problem(*p.inner_loss, *p.outer_loss, omega, *p.inner_model, v.data, q.d_in, q.d_out);
  const Mat w = linear_adjoint_solve(q.d_in.x, q.d_out.x, ap.d, 2.0, q.opts.ridge);
  EXPECT_LE(rel_error(w.data, a.data), 1e-8);
}

TEST(ExactAdjointSolve, ZeroOuterResidualGivesZeroAdjoint) {
  QuadInstance q = small_quad(7);
  Rng rng(8);
  const ParamVector omega = random_vec(q.omega_dim(), rng);
  const Mat v = exact_inner_solve(q, omega);
  for (std::size_t j = 0; j < q.d_out.size(); ++j)
    for (std::size_t k = 0; k < q.opts.d_v; ++k) q.d_out.y(j, q.opts.d_t + k) = dot(v.row(k), q.d_out.x.row(j));
  EXPECT_LE(norm2(exact_adjoint_solve(q, omega, v).data), 1e-14);
}

TEST(ExactAdjointSolve, OrthonormalFeaturesGiveHalfNegativeTarget) {
  // D_in = D_out with XᵀX/n = I: a* = −(mean x dᵀ)/2 in feature coordinates
  QuadOptions o;
  o.n = 2;
  o.d_z = 2;
  o.d_x = 2;
  o.d_t = 1;
  o.d_v = 1;
  o.ridge = 0.0;
  QuadInstance q;
  q.opts = o;
  const double r2 = std::sqrt(2.0);
  q.d_in = Dataset{Mat(2, 2, {r2, 0.0, 0.0, r2}), Mat(2, 2, {0.0, 1.0, 0.0, -3.0})};
  q.d_out = q.d_in;
  const Mat v(1, 2, {0.0, 0.0});  // h ≡ 0, so d_j = −2 o_j
  const Mat a = exact_adjoint_solve(q, ParamVector{0.0}, v);
  // mean_j x_j d_j = ((r2·−2)/2, (r2·6)/2)
  EXPECT_NEAR(a(0, 0), r2 / 2.0, 1e-14);
  EXPECT_NEAR(a(0, 1), -3.0 * r2 / 2.0, 1e-14);
}

TEST(QuadHessian, MatchesGradientDifferences) {
  const QuadInstance q = small_quad(9);
  const Mat h = quad_hessian(q);
  Rng rng(10);
  const ParamVector w = random_vec(q.omega_dim(), rng);
  const Vec g0 = quad_grad(q, ParamVector(q.omega_dim(), 0.0));
  const Vec g1 = quad_grad(q, w);
  EXPECT_LE(rel_error(sub(g1, g0), matvec(h, w)), 1e-6);
}

TEST(SymmetricEigenvalues, DiagonalAndRotated) {
  EXPECT_EQ(symmetric_eigenvalues(Mat(3, 3, {3, 0, 0, 0, 1, 0, 0, 0, 2})), (Vec{1, 2, 3}));
  const Vec ev = symmetric_eigenvalues(Mat(2, 2, {2, 1, 1, 2}));
  EXPECT_NEAR(ev[0], 1.0, 1e-14);
  EXPECT_NEAR(ev[1], 3.0, 1e-14);
}

TEST(GroupedAdjoint, SolvesPerDistinctInput) {
  const Mat x(3, 1, {0.0, 0.0, 1.0});
  const std::vector<Mat> h{Mat(1, 1, {1.0}), Mat(1, 1, {1.0}), Mat(1, 1, {2.0})};
  const Mat d(3, 1, {1.0, 3.0, 4.0});
  const Mat a = grouped_adjoint(x, h, d);
  EXPECT_DOUBLE_EQ(a(0, 0), -2.0);
  EXPECT_DOUBLE_EQ(a(1, 0), -2.0);
  EXPECT_DOUBLE_EQ(a(2, 0), -2.0);
}

TEST(Quantile, LinearInterpolation) {
  EXPECT_EQ(median(Vec{1.0, 3.0}), 2.0);
  EXPECT_EQ(quantile(Vec{4.0}, 0.25), 4.0);
  EXPECT_EQ(quantile(Vec{0, 1, 2, 3, 4}, 0.25), 1.0);
  EXPECT_THROW(median(Vec{}), Error);
}

TEST(BiasProbe, ExactBudgetIsUnbiasedAndZeroBudgetIsTheGradientNorm) {
  QuadOptions o;
  o.n = 60;
  const auto rows = bias_probe({{"exact", true, 0, 0}, {"zero", false, 0, 0}}, {1, 2}, o);
  ASSERT_EQ(rows.size(), 2u);
  for (double b : rows[0].biases) EXPECT_LE(b, 1e-5);
  for (std::size_t k = 0; k < 2; ++k) {
    const std::uint64_t seed = k + 1;
    const QuadInstance q = make_quad_instance(seed, o);
    Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
    const ParamVector omega = random_vec(q.omega_dim(), rng);
    EXPECT_NEAR(rows[1].biases[k], norm2(quad_grad(q, omega)), 1e-12);
  }
}

TEST(BiasProbe, MoreStepsDoNotIncreaseMedianBias) {
  QuadOptions o;
  o.n = 60;
  const auto rows = bias_probe({{"1", false, 1, 1}, {"5", false, 5, 5}, {"20", false, 20, 20}}, {1, 2, 3, 4, 5}, o);
  EXPECT_GE(rows[0].median_bias, rows[1].median_bias);
  EXPECT_GE(rows[1].median_bias, rows[2].median_bias);
}
