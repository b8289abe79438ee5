#pragma once

// Dense linear algebra, seeded random numbers and finite differences.
// Everything here is 64-bit and single-threaded; all loops run in a fixed
// order so results are bit-reproducible for a given input.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "funcbo/error.hpp"

namespace funcbo {

using Vec = std::vector<double>;

/// Row-major dense matrix.
struct Mat {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Mat() = default;
  Mat(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
  Mat(std::size_t r, std::size_t c, std::vector<double> values)
      : rows(r), cols(c), data(std::move(values)) {
    require_dims(data.size(), r * c, "Mat data length");
  }

  static Mat identity(std::size_t n) {
    Mat m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

  std::span<double> row(std::size_t i) { return {data.data() + i * cols, cols}; }
  std::span<const double> row(std::size_t i) const { return {data.data() + i * cols, cols}; }

  Vec row_vec(std::size_t i) const { return Vec(row(i).begin(), row(i).end()); }
  void set_row(std::size_t i, std::span<const double> v) {
    require_dims(v.size(), cols, "Mat::set_row");
    std::copy(v.begin(), v.end(), data.begin() + static_cast<std::ptrdiff_t>(i * cols));
  }

  bool operator==(const Mat&) const = default;
};

// ---------------------------------------------------------------------------
// Vector helpers

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  require_dims(b.size(), a.size(), "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline double norm_inf(std::span<const double> a) {
  double m = 0.0;
  for (double x : a) m = std::max(m, std::abs(x));
  return m;
}

/// y += alpha * x
inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  require_dims(y.size(), x.size(), "axpy");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

inline Vec add(std::span<const double> a, std::span<const double> b) {
  require_dims(b.size(), a.size(), "add");
  Vec r(a.begin(), a.end());
  for (std::size_t i = 0; i < r.size(); ++i) r[i] += b[i];
  return r;
}

inline Vec sub(std::span<const double> a, std::span<const double> b) {
  require_dims(b.size(), a.size(), "sub");
  Vec r(a.begin(), a.end());
  for (std::size_t i = 0; i < r.size(); ++i) r[i] -= b[i];
  return r;
}

inline Vec scaled(std::span<const double> a, double s) {
  Vec r(a.begin(), a.end());
  for (double& x : r) x *= s;
  return r;
}

/// Relative error |a - o| / max(1e-12, |o|) in the Euclidean norm.
inline double rel_error(std::span<const double> a, std::span<const double> o) {
  return norm2(sub(a, o)) / std::max(1e-12, norm2(o));
}

/// Pairwise (tree) summation with a fixed fan-in of two.
inline double pairwise_sum(std::span<const double> v) {
  if (v.size() <= 8) {
    double s = 0.0;
    for (double x : v) s += x;
    return s;
  }
  const std::size_t half = v.size() / 2;
  return pairwise_sum(v.first(half)) + pairwise_sum(v.subspan(half));
}

// ---------------------------------------------------------------------------
// Matrix helpers

inline Vec matvec(const Mat& a, std::span<const double> x) {
  require_dims(x.size(), a.cols, "matvec");
  Vec y(a.rows, 0.0);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double* r = a.data.data() + i * a.cols;
    double s = 0.0;
    for (std::size_t j = 0; j < a.cols; ++j) s += r[j] * x[j];
    y[i] = s;
  }
  return y;
}

/// Aᵀx
inline Vec matvec_t(const Mat& a, std::span<const double> x) {
  require_dims(x.size(), a.rows, "matvec_t");
  Vec y(a.cols, 0.0);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double* r = a.data.data() + i * a.cols;
    const double xi = x[i];
    for (std::size_t j = 0; j < a.cols; ++j) y[j] += r[j] * xi;
  }
  return y;
}

inline Mat transpose(const Mat& a) {
  Mat t(a.cols, a.rows);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < a.cols; ++j) t(j, i) = a(i, j);
  return t;
}

inline Mat matmul(const Mat& a, const Mat& b) {
  require_dims(b.rows, a.cols, "matmul");
  Mat c(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    double* ci = c.data.data() + i * c.cols;
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const double* bk = b.data.data() + k * b.cols;
      for (std::size_t j = 0; j < b.cols; ++j) ci[j] += aik * bk[j];
    }
  }
  return c;
}

/// AᵀB without materializing the transpose.
inline Mat matmul_tn(const Mat& a, const Mat& b) {
  require_dims(b.rows, a.rows, "matmul_tn");
  Mat c(a.cols, b.cols);
  for (std::size_t k = 0; k < a.rows; ++k) {
    const double* ak = a.data.data() + k * a.cols;
    const double* bk = b.data.data() + k * b.cols;
    for (std::size_t i = 0; i < a.cols; ++i) {
      const double aki = ak[i];
      if (aki == 0.0) continue;
      double* ci = c.data.data() + i * c.cols;
      for (std::size_t j = 0; j < b.cols; ++j) ci[j] += aki * bk[j];
    }
  }
  return c;
}

/// ABᵀ
inline Mat matmul_nt(const Mat& a, const Mat& b) {
  require_dims(b.cols, a.cols, "matmul_nt");
  Mat c(a.rows, b.rows);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double* ai = a.data.data() + i * a.cols;
    for (std::size_t j = 0; j < b.rows; ++j) {
      const double* bj = b.data.data() + j * b.cols;
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols; ++k) s += ai[k] * bj[k];
      c(i, j) = s;
    }
  }
  return c;
}

inline double frobenius(const Mat& a) { return norm2(a.data); }

inline bool is_symmetric(const Mat& a, double tol) {
  if (a.rows != a.cols) return false;
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = i + 1; j < a.cols; ++j)
      if (std::abs(a(i, j) - a(j, i)) > tol) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Cholesky-based SPD solves

/// Lower-triangular factor L with A = LLᵀ. Throws NotPositiveDefinite.
inline Mat cholesky(const Mat& a) {
  require(a.rows == a.cols, ErrorCode::dimension_mismatch, "cholesky: matrix not square");
  require(is_symmetric(a, 1e-10 * std::max(1.0, norm_inf(a.data))),
          ErrorCode::precondition, "cholesky: matrix not symmetric");
  const std::size_t n = a.rows;
  Mat l(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double d = a(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
    if (!(d > 0.0) || !std::isfinite(d)) throw NotPositiveDefinite(j, d);
    const double ljj = std::sqrt(d);
    l(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / ljj;
    }
  }
  return l;
}

inline Vec cholesky_solve(const Mat& l, std::span<const double> b) {
  const std::size_t n = l.rows;
  require_dims(b.size(), n, "cholesky_solve rhs");
  Vec y(b.begin(), b.end());
  for (std::size_t i = 0; i < n; ++i) {
    double s = y[i];
    for (std::size_t k = 0; k < i; ++k) s -= l(i, k) * y[k];
    y[i] = s / l(i, i);
  }
  for (std::size_t ii = n; ii-- > 0;) {
    double s = y[ii];
    for (std::size_t k = ii + 1; k < n; ++k) s -= l(k, ii) * y[k];
    y[ii] = s / l(ii, ii);
  }
  return y;
}

/// Solves Ax = b for symmetric positive definite A.
inline Vec spd_solve(const Mat& a, std::span<const double> b) {
  require_dims(b.size(), a.rows, "spd_solve rhs");
  return cholesky_solve(cholesky(a), b);
}

/// Solves AX = B column by column with a single factorization.
inline Mat spd_solve(const Mat& a, const Mat& b) {
  require_dims(b.rows, a.rows, "spd_solve rhs rows");
  const Mat l = cholesky(a);
  Mat x(b.rows, b.cols);
  Vec col(b.rows);
  for (std::size_t j = 0; j < b.cols; ++j) {
    for (std::size_t i = 0; i < b.rows; ++i) col[i] = b(i, j);
    const Vec s = cholesky_solve(l, col);
    for (std::size_t i = 0; i < b.rows; ++i) x(i, j) = s[i];
  }
  return x;
}

// ---------------------------------------------------------------------------
// Conjugate gradient

struct CgResult {
  Vec x;
  std::size_t iters = 0;
  double residual = 0.0;  // ||b - A x||_2 / ||b||_2
  bool converged = false;
};

using LinearOperator = std::function<Vec(const Vec&)>;

/// CG on a symmetric PSD operator. Non-convergence is reported, not raised.
/// maxit == 0 selects 10 * dimension.
inline CgResult conjugate_gradient(const LinearOperator& apply, std::span<const double> b,
                                   double tol = 1e-8, std::size_t maxit = 0) {
  require(tol > 0.0, ErrorCode::precondition, "conjugate_gradient: tol must be positive");
  const std::size_t n = b.size();
  if (maxit == 0) maxit = 10 * std::max<std::size_t>(n, 1);
  CgResult out;
  out.x.assign(n, 0.0);
  const double bnorm = norm2(b);
  if (bnorm == 0.0) {
    out.converged = true;
    return out;
  }
  Vec r(b.begin(), b.end());
  Vec p = r;
  double rr = dot(r, r);
  for (std::size_t it = 0; it < maxit; ++it) {
    const Vec ap = apply(p);
    require_dims(ap.size(), n, "conjugate_gradient operator output");
    const double pap = dot(p, ap);
    if (!(pap > 0.0) || !std::isfinite(pap)) break;  // operator degenerate along p
    const double alpha = rr / pap;
    axpy(alpha, p, out.x);
    axpy(-alpha, ap, r);
    out.iters = it + 1;
    const double rr_new = dot(r, r);
    if (std::sqrt(rr_new) <= tol * bnorm) {
      rr = rr_new;
      break;
    }
    const double beta = rr_new / rr;
    rr = rr_new;
    for (std::size_t i = 0; i < n; ++i) p[i] = r[i] + beta * p[i];
  }
  // Report the true residual rather than the recursively updated one.
  const Vec ax = apply(out.x);
  out.residual = norm2(sub(b, ax)) / bnorm;
  out.converged = out.residual <= tol && all_finite(out.x);
  return out;
}

// ---------------------------------------------------------------------------
// Finite differences

/// Central difference of a vector-valued map along direction v:
/// (g(p + eps v) - g(p - eps v)) / (2 eps).
template <class GradFn>
Vec fd_directional(GradFn&& grad_fn, std::span<const double> p, std::span<const double> v,
                   double eps) {
  require(eps > 0.0, ErrorCode::precondition, "fd_directional: eps must be positive");
  require_dims(v.size(), p.size(), "fd_directional direction");
  require(all_finite(v), ErrorCode::non_finite, "fd_directional: direction not finite");
  Vec plus(p.begin(), p.end());
  Vec minus(p.begin(), p.end());
  axpy(eps, v, plus);
  axpy(-eps, v, minus);
  const Vec gp = grad_fn(plus);
  const Vec gm = grad_fn(minus);
  require_dims(gm.size(), gp.size(), "fd_directional outputs");
  Vec out(gp.size());
  for (std::size_t i = 0; i < gp.size(); ++i) out[i] = (gp[i] - gm[i]) / (2.0 * eps);
  require(all_finite(out), ErrorCode::non_finite, "fd_directional: non-finite difference");
  return out;
}

// ---------------------------------------------------------------------------
// Random numbers: splitmix64 seeding a PCG32 (XSH-RR) stream.

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) {
    std::uint64_t sm = seed;
    state_ = splitmix64(sm);
    inc_ = (splitmix64(sm) << 1u) | 1u;
    next_u32();
  }

  std::uint32_t next_u32() {
    const std::uint64_t old = state_;
    state_ = old * 6364136223846793005ULL + inc_;
    const auto xorshifted = static_cast<std::uint32_t>(((old >> 18u) ^ old) >> 27u);
    const auto rot = static_cast<std::uint32_t>(old >> 59u);
    return (xorshifted >> rot) | (xorshifted << ((32u - rot) & 31u));
  }

  std::uint64_t next_u64() {
    const std::uint64_t hi = next_u32();
    return (hi << 32u) | next_u32();
  }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() {
    const std::uint64_t a = next_u32() >> 5u;
    const std::uint64_t b = next_u32() >> 6u;
    return (static_cast<double>(a) * 67108864.0 + static_cast<double>(b)) *
           (1.0 / 9007199254740992.0);
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Unbiased integer in [0, n).
  std::size_t index(std::size_t n) {
    require(n > 0 && n <= 0xffffffffULL, ErrorCode::precondition, "Rng::index range");
    const auto bound = static_cast<std::uint32_t>(n);
    const std::uint32_t threshold = (0u - bound) % bound;
    for (;;) {
      const std::uint32_t r = next_u32();
      if (r >= threshold) return r % bound;
    }
  }

  /// Standard normal via Box-Muller; the second variate is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double sd) { return mean + sd * normal(); }

  double exponential() { return -std::log(1.0 - uniform()); }

  /// Independent child stream, derived deterministically from this one.
  Rng split() { return Rng(next_u64()); }

 private:
  std::uint64_t state_ = 0;
  std::uint64_t inc_ = 1;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace funcbo
