// Total gradient on the quadratic testbed: exact FuncID solves against the
// finite-difference oracle, then the bias left by short iterative solves.

#include <cstdio>

#include "funcbo/oracle.hpp"

using namespace funcbo;

int main() {
  const QuadInstance q = make_quad_instance(0);
  const BilevelProblem p = make_quad_problem(q);
  const auto& inner = static_cast<const LinearModel&>(*p.inner_model);
  const auto& adjoint = static_cast<const LinearModel&>(*p.adjoint_model);

  Rng rng(1);
  ParamVector omega(q.omega_dim());
  for (double& w : omega) w = rng.normal();

  const double R = q.opts.ridge;
  const ParamVector theta = exact_inner_linear(*p.inner_loss, inner, omega, q.d_in, R);
  const AdjointProblem ap = build_adjoint_problem(*p.inner_loss, *p.outer_loss, omega, inner, theta, q.d_in, q.d_out);
  const ParamVector xi = exact_adjoint_linear(ap, adjoint, p.inner_loss->curvature(), R);
  const ParamVector g = total_grad(*p.inner_loss, *p.outer_loss, omega, inner, theta, adjoint, xi, q.d_in, q.d_out);
  const Vec g_fd = oracle::quad_grad(q, omega);
  std::printf("exact solves: |g| = %.6g, rel. error vs finite differences = %.3g\n", norm2(g), rel_error(g, g_fd));

  std::printf("\n%8s %14s\n", "M = K", "median bias");
  const auto rows = oracle::bias_probe({{"1", false, 1, 1}, {"5", false, 5, 5}, {"20", false, 20, 20}, {"exact", true, 0, 0}},
                                       {0, 1, 2, 3, 4});
  for (const auto& r : rows) std::printf("%8s %14.4g\n", r.budget.label.c_str(), r.median_bias);
  return 0;
}
