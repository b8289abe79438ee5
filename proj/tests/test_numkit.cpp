#include <gtest/gtest.h>

#include <cmath>

#include "funcbo/numkit.hpp"

using namespace funcbo;

namespace {

Mat random_spd(std::size_t n, Rng& rng) {
  Mat m(n, n);
  for (double& v : m.data) v = rng.normal();
  Mat a = matmul_tn(m, m);
  for (std::size_t i = 0; i < n; ++i) a(i, i) += 1.0;
  return a;
}

}  // namespace

TEST(Matvec, HandExamples) {
  EXPECT_EQ(matvec(Mat::identity(2), Vec{3, 4}), (Vec{3, 4}));
  EXPECT_EQ(matvec(Mat(2, 3), Vec{1, 2, 3}), (Vec{0, 0}));
  EXPECT_EQ(matvec(Mat(2, 2, {1, 2, 3, 4}), Vec{1, 1}), (Vec{3, 7}));
}

TEST(Matvec, DimensionMismatchThrows) {
  try {
    matvec(Mat(2, 2), Vec{1, 2, 3});
    FAIL() << "expected a dimension error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::dimension_mismatch);
  }
}

TEST(Matmul, TransposedVariantsAgree) {
  Rng rng(3);
  Mat a(4, 3), b(4, 5);
  for (double& v : a.data) v = rng.normal();
  for (double& v : b.data) v = rng.normal();
  const Mat ref = matmul(transpose(a), b);
  const Mat tn = matmul_tn(a, b);
  for (std::size_t i = 0; i < ref.data.size(); ++i) EXPECT_NEAR(tn.data[i], ref.data[i], 1e-12);
  const Mat nt = matmul_nt(transpose(a), transpose(b));
  for (std::size_t i = 0; i < ref.data.size(); ++i) EXPECT_NEAR(nt.data[i], ref.data[i], 1e-12);
}

TEST(SpdSolve, IdentityAndScalar) {
  EXPECT_EQ(spd_solve(Mat::identity(3), Vec{1, -2, 5}), (Vec{1, -2, 5}));
  EXPECT_DOUBLE_EQ(spd_solve(Mat(1, 1, {2.0}), Vec{4})[0], 2.0);
}

TEST(SpdSolve, RandomSystemResidual) {
  Rng rng(11);
  const Mat a = random_spd(5, rng);
  Vec b(5);
  for (double& v : b) v = rng.normal();
  const Vec x = spd_solve(a, b);
  EXPECT_LE(norm2(sub(matvec(a, x), b)), 1e-8);
}

TEST(SpdSolve, IndefiniteReportsPivot) {
  const Mat a(2, 2, {1, 2, 2, 1});
  try {
    spd_solve(a, Vec{1, 1});
    FAIL() << "expected not_positive_definite";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::not_positive_definite);
  }
}

TEST(ConjugateGradient, IdentityOneIteration) {
  const Vec b{1, 2, 3};
  const CgResult r = conjugate_gradient([](const Vec& v) { return v; }, b);
  EXPECT_EQ(r.iters, 1u);
  EXPECT_TRUE(r.converged);
  for (std::size_t i = 0; i < b.size(); ++i) EXPECT_NEAR(r.x[i], b[i], 1e-15);
}

TEST(ConjugateGradient, DiagonalInverse) {
  auto diag = [](const Vec& v) {
    Vec out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<double>(i + 1) * v[i];
    return out;
  };
  const CgResult r = conjugate_gradient(diag, Vec(5, 1.0));
  ASSERT_TRUE(r.converged);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(r.x[i], 1.0 / static_cast<double>(i + 1), 1e-10);
}

TEST(ConjugateGradient, MatchesSpdSolveOnRandomSystems) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    const Mat a = random_spd(10, rng);
    Vec b(10);
    for (double& v : b) v = rng.normal();
    const CgResult r = conjugate_gradient([&](const Vec& v) { return matvec(a, v); }, b, 1e-12);
    EXPECT_LE(rel_error(r.x, spd_solve(a, b)), 1e-6);
  }
}

TEST(ConjugateGradient, SingularOperatorReportsInsteadOfThrowing) {
  // rank-one operator, right-hand side outside its range
  auto op = [](const Vec& v) { return Vec{v[0], 0.0}; };
  const CgResult r = conjugate_gradient(op, Vec{1.0, 1.0}, 1e-10);
  EXPECT_FALSE(r.converged);
  EXPECT_TRUE(all_finite(r.x));
  EXPECT_GT(r.residual, 0.5);
}

TEST(FdDirectional, ExactOnQuadratics) {
  Rng rng(5);
  const Mat h = random_spd(4, rng);
  Vec p(4), v(4);
  for (double& e : p) e = rng.normal();
  for (double& e : v) e = rng.normal();
  const Vec fd = fd_directional([&](const Vec& q) { return matvec(h, q); }, p, v, 1e-3);
  EXPECT_LE(rel_error(fd, matvec(h, v)), 1e-9);
  const Vec zero = fd_directional([&](const Vec& q) { return matvec(h, q); }, p, Vec(4, 0.0), 1e-3);
  EXPECT_LE(norm2(zero), 1e-12);
}

TEST(FdDirectional, QuarticAgainstSymbolicHessian) {
  // f(p) = ‖p‖⁴, ∇f = 4‖p‖²p, ∇²f = 8ppᵀ + 4‖p‖²I
  auto grad = [](const Vec& q) { return scaled(q, 4.0 * dot(q, q)); };
  const Vec p{1.0, 0.0, 0.0};
  const Vec v{1.0, 0.0, 0.0};
  const Vec fd = fd_directional(grad, p, v, 1e-5);
  EXPECT_NEAR(fd[0], 12.0, 1e-8);
  EXPECT_NEAR(fd[1], 0.0, 1e-12);
  // off-axis direction
  const Vec w{0.0, 1.0, 0.0};
  EXPECT_NEAR(fd_directional(grad, p, w, 1e-5)[1], 4.0, 1e-8);
}

TEST(PairwiseSum, MatchesNaiveAndIsAccurate) {
  Vec v(10001, 0.1);
  EXPECT_NEAR(pairwise_sum(v), 1000.1, 1e-9);
  EXPECT_EQ(pairwise_sum(Vec{}), 0.0);
}

TEST(Rng, ReproducibleStreams) {
  Rng a(42), b(42);
  for (int i = 0; i < 10000; ++i) ASSERT_EQ(a.next_u64(), b.next_u64());
  Rng c(43);
  Rng d(42);
  EXPECT_NE(c.next_u64(), d.next_u64());
}

TEST(Rng, SplitIsDeterministicAndDistinct) {
  Rng a(7), b(7);
  Rng ca = a.split(), cb = b.split();
  EXPECT_EQ(ca.next_u64(), cb.next_u64());
  EXPECT_NE(a.next_u64(), ca.next_u64());
}

TEST(Rng, UniformAndNormalMoments) {
  Rng rng(1);
  const int n = 100000;
  double su = 0, sn = 0, sn2 = 0;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    su += u;
    const double z = rng.normal();
    sn += z;
    sn2 += z * z;
  }
  // 4-sigma bands
  EXPECT_NEAR(su / n, 0.5, 4.0 * std::sqrt(1.0 / 12.0 / n));
  EXPECT_NEAR(sn / n, 0.0, 4.0 / std::sqrt(n));
  EXPECT_NEAR(sn2 / n, 1.0, 4.0 * std::sqrt(2.0 / n));
}

TEST(Rng, IndexIsInRangeAndCoversAllValues) {
  Rng rng(9);
  std::vector<int> seen(7, 0);
  for (int i = 0; i < 7000; ++i) {
    const std::size_t k = rng.index(7);
    ASSERT_LT(k, 7u);
    ++seen[k];
  }
  for (int c : seen) EXPECT_GT(c, 800);
}
