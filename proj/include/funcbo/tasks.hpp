#pragma once

// Desk-scale task generators: the linear-Gaussian quadratic testbed, a
// low-dimensional instrumental-variable problem with a confounded outcome,
// and a toy tabular MDP with replay collection and soft value iteration.

#include <algorithm>
#include <cmath>
#include <istream>
#include <memory>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "funcbo/funcbo.hpp"
#include "funcbo/losses.hpp"
#include "funcbo/mdp_model.hpp"
#include "funcbo/models.hpp"

namespace funcbo {

// ---------------------------------------------------------------------------
// Quadratic testbed
//
// Latents z ~ N(0, I_dz); the inner model sees x = z[0:d_x]; treatment
// t = G z + σ_t ξ with G having orthonormal rows; outcome o = W_true t + σ_o ε.
// y = [t | o]. Outer model f_ω(t) = W t with ω = vec(W) row-major.

struct QuadOptions {
  std::size_t n = 200;
  std::size_t d_z = 5;
  std::size_t d_x = 5;
  std::size_t d_t = 3;
  std::size_t d_v = 2;
  double sigma_t = 0.5;
  double sigma_o = 0.1;
  double ridge = 1e-3;  // R_in = R_adj
};

struct QuadInstance {
  QuadOptions opts;
  Mat G;       // d_t x d_z
  Mat W_true;  // d_v x d_t
  Dataset d_in;
  Dataset d_out;

  std::size_t omega_dim() const { return opts.d_v * opts.d_t; }
  std::size_t y_dim() const { return opts.d_t + opts.d_v; }
};

/// Rows orthonormalized by modified Gram-Schmidt.
inline Mat orthonormal_rows(std::size_t r, std::size_t c, Rng& rng) {
  require(r <= c, ErrorCode::precondition, "orthonormal_rows needs rows <= cols");
  Mat q(r, c);
  for (std::size_t i = 0; i < r; ++i) {
    Vec v(c);
    for (double& e : v) e = rng.normal();
    for (std::size_t k = 0; k < i; ++k) {
      const double p = dot(v, q.row(k));
      for (std::size_t j = 0; j < c; ++j) v[j] -= p * q(k, j);
    }
    const double nv = norm2(v);
    for (std::size_t j = 0; j < c; ++j) q(i, j) = v[j] / nv;
  }
  return q;
}

inline Dataset quad_sample(const QuadInstance& inst, std::size_t n, Rng& rng) {
  const auto& o = inst.opts;
  Dataset d{Mat(n, o.d_x), Mat(n, o.d_t + o.d_v)};
  Vec z(o.d_z);
  for (std::size_t i = 0; i < n; ++i) {
    for (double& e : z) e = rng.normal();
    for (std::size_t j = 0; j < o.d_x; ++j) d.x(i, j) = z[j];
    Vec t = matvec(inst.G, z);
    for (double& e : t) e += o.sigma_t * rng.normal();
    const Vec out = matvec(inst.W_true, t);
    for (std::size_t k = 0; k < o.d_t; ++k) d.y(i, k) = t[k];
    for (std::size_t k = 0; k < o.d_v; ++k) d.y(i, o.d_t + k) = out[k] + o.sigma_o * rng.normal();
  }
  return d;
}

inline QuadInstance make_quad_instance(std::uint64_t seed, const QuadOptions& opts = {}) {
  require(opts.d_x <= opts.d_z && opts.d_t <= opts.d_z, ErrorCode::precondition,
          "quad instance needs d_x, d_t <= d_z");
  require(opts.n >= 1, ErrorCode::precondition, "quad instance needs n >= 1");
  Rng rng(seed);
  QuadInstance inst;
  inst.opts = opts;
  inst.G = orthonormal_rows(opts.d_t, opts.d_z, rng);
  inst.W_true = Mat(opts.d_v, opts.d_t);
  for (double& w : inst.W_true.data) w = rng.normal();
  inst.d_in = quad_sample(inst, opts.n, rng);
  inst.d_out = quad_sample(inst, opts.n, rng);
  return inst;
}

/// Noise-free instance whose inner and adjoint solutions lie in the span of
/// the raw features.
inline QuadOptions quad_realizable_options() {
  QuadOptions o;
  o.sigma_t = 0.0;
  o.sigma_o = 0.0;
  o.ridge = 0.0;
  return o;
}

inline BilevelProblem make_quad_problem(const QuadInstance& inst) {
  const auto& o = inst.opts;
  auto f = std::make_shared<LinearModel>(FeatureMap::raw(o.d_t), o.d_v);
  BilevelProblem p;
  p.inner_loss = std::make_shared<SquaredInnerLoss>(f, o.d_x, inst.y_dim(), 0);
  p.outer_loss = std::make_shared<SquaredOuterLoss>(o.d_v, o.d_x, inst.y_dim(), o.d_t, inst.omega_dim());
  p.d_in = inst.d_in;
  p.d_out = inst.d_out;
  p.inner_model = std::make_shared<LinearModel>(FeatureMap::raw(o.d_x), o.d_v);
  p.adjoint_model = std::make_shared<LinearModel>(FeatureMap::raw(o.d_x), o.d_v);
  p.omega0 = ParamVector(inst.omega_dim(), 0.0);
  return p;
}

/// Exact-solve configuration for the quadratic testbed.
inline OptimConfig quad_exact_config(const QuadInstance& inst) {
  OptimConfig c;
  c.inner_mode = InnerMode::exact_linear;
  c.adjoint_mode = AdjointMode::exact_linear;
  c.M = 0;
  c.K = 0;
  c.R_in = inst.opts.ridge;
  c.R_adj = inst.opts.ridge;
  return c;
}

// ---------------------------------------------------------------------------
// Instrumental-variable task
//
// Latents z ~ U(0,1)^4: three instruments x = z[0:3] and a hidden confounder
// c = z[3]. t = Emb z + σ_t ξ, o = f_struct(t) + κ(c − ½) + σ_o ε with
// f_struct(t) = (‖At‖² − c₀)/c₁. y = [t | o].

struct IvInstance {
  std::size_t d_z = 4;
  std::size_t d_t = 16;
  Mat A;    // 4 x d_t, entries U(0,1)
  Mat Emb;  // d_t x 4
  double sigma_t = 0.1;
  double sigma_o = 0.5;
  double kappa = 1.0;
  double c0 = 0.0;
  double c1 = 1.0;

  std::size_t x_dim() const { return d_z - 1; }
  std::size_t y_dim() const { return d_t + 1; }

  double f_struct(std::span<const double> t) const {
    const Vec at = matvec(A, t);
    return (dot(at, at) - c0) / c1;
  }

  Vec treatment_mean(std::span<const double> z) const { return matvec(Emb, z); }
};

/// Draws A and Emb, then sets (c₀, c₁) to the mean and standard deviation of
/// ‖At‖² over `pilot_n` generator samples so f_struct is standardized.
inline IvInstance make_iv_instance(std::uint64_t seed, double kappa, std::size_t d_t = 16,
                                   std::size_t pilot_n = 100000) {
  Rng rng(seed);
  IvInstance inst;
  inst.d_t = d_t;
  inst.kappa = kappa;
  inst.A = Mat(inst.d_z, d_t);
  for (double& a : inst.A.data) a = rng.uniform();
  inst.Emb = Mat(d_t, inst.d_z);
  for (double& e : inst.Emb.data) e = rng.normal();
  Vec sq(pilot_n);
  Vec z(inst.d_z);
  for (std::size_t i = 0; i < pilot_n; ++i) {
    for (double& e : z) e = rng.uniform();
    Vec t = inst.treatment_mean(z);
    for (double& e : t) e += inst.sigma_t * rng.normal();
    const Vec at = matvec(inst.A, t);
    sq[i] = dot(at, at);
  }
  const double mean = pairwise_sum(sq) / static_cast<double>(pilot_n);
  Vec dev(pilot_n);
  for (std::size_t i = 0; i < pilot_n; ++i) dev[i] = (sq[i] - mean) * (sq[i] - mean);
  inst.c0 = mean;
  inst.c1 = std::sqrt(pairwise_sum(dev) / static_cast<double>(pilot_n - 1));
  return inst;
}

inline Dataset gen_iv_data(const IvInstance& inst, std::size_t n, Rng& rng) {
  require(n >= 1, ErrorCode::precondition, "gen_iv_data needs n >= 1");
  Dataset d{Mat(n, inst.x_dim()), Mat(n, inst.y_dim())};
  Vec z(inst.d_z);
  for (std::size_t i = 0; i < n; ++i) {
    for (double& e : z) e = rng.uniform();
    Vec t = inst.treatment_mean(z);
    for (double& e : t) e += inst.sigma_t * rng.normal();
    const double o = inst.f_struct(t) + inst.kappa * (z[3] - 0.5) + inst.sigma_o * rng.normal();
    for (std::size_t j = 0; j < inst.x_dim(); ++j) d.x(i, j) = z[j];
    for (std::size_t k = 0; k < inst.d_t; ++k) d.y(i, k) = t[k];
    d.y(i, inst.d_t) = o;
  }
  return d;
}

/// Noise-free treatments on an even latent grid (levels per latent, the last
/// entry being the confounder) with their structural outcomes.
struct IvTestGrid {
  Mat t;
  Vec f;
};

inline IvTestGrid iv_test_grid(const IvInstance& inst, std::vector<std::size_t> levels = {7, 3, 4, 7}) {
  require_dims(levels.size(), inst.d_z, "iv_test_grid levels");
  std::size_t total = 1;
  for (std::size_t l : levels) {
    require(l >= 1, ErrorCode::precondition, "iv_test_grid: levels must be >= 1");
    total *= l;
  }
  IvTestGrid g{Mat(total, inst.d_t), Vec(total)};
  Vec z(inst.d_z);
  for (std::size_t i = 0; i < total; ++i) {
    std::size_t r = i;
    for (std::size_t k = 0; k < inst.d_z; ++k) {
      const std::size_t j = r % levels[k];
      r /= levels[k];
      z[k] = (static_cast<double>(j) + 0.5) / static_cast<double>(levels[k]);
    }
    const Vec t = inst.treatment_mean(z);
    g.t.set_row(i, t);
    g.f[i] = inst.f_struct(t);
  }
  return g;
}

/// Mean squared gap between a learned structural model and f_struct on the grid.
inline double structural_mse(const Model& f, const ParamVector& omega, const IvTestGrid& grid) {
  const Mat pred = f.forward(omega, grid.t);
  Vec sq(grid.f.size());
  for (std::size_t i = 0; i < sq.size(); ++i) {
    const double e = pred(i, 0) - grid.f[i];
    sq[i] = e * e;
  }
  return pairwise_sum(sq) / static_cast<double>(sq.size());
}

/// Confounded baseline: regresses o on t with the outer model directly, one
/// optimizer step per iteration on a batch of size batch_out.
inline RunResult iv_direct_run(const Model& f, const ParamVector& omega0, const Dataset& data, const OptimConfig& cfg,
                               std::uint64_t seed, const RunHooks& hooks = {}, const RunOptions& options = {}) {
  require_dims(data.y.cols, f.input_dim() + 1, "iv_direct_run targets");
  require_dims(omega0.size(), f.num_params(), "iv_direct_run omega0");
  Rng rng(seed);
  rng.split();  // init stream, unused: ω₀ is given
  Rng batch_rng = rng.split();
  const std::size_t d_t = f.input_dim();
  RunResult res;
  RunState& st = res.state;
  st.omega = omega0;
  Optimizer opt(cfg.opt_out, cfg.eta_out);
  if (options.keep_trajectory) res.omegas.push_back(st.omega);
  for (std::size_t n = 0; n < cfg.N; ++n) {
    const auto t0 = std::chrono::steady_clock::now();
    st.iter = n;
    if (hooks.before_iteration) hooks.before_iteration(st);
    const Dataset b = data.rows(sample_batch(batch_rng, data.size(), cfg.batch_out));
    const std::size_t m = b.size();
    Mat t(m, d_t), cot(m, 1);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t k = 0; k < d_t; ++k) t(i, k) = b.y(i, k);
    const Mat pred = f.forward(st.omega, t);
    Vec sq(m);
    for (std::size_t i = 0; i < m; ++i) {
      const double e = pred(i, 0) - b.y(i, d_t);
      sq[i] = e * e;
      cot(i, 0) = 2.0 * e / static_cast<double>(m);
    }
    const ParamVector g = f.vjp_params(st.omega, t, cot);
    require(all_finite(g), ErrorCode::non_finite, "iv_direct_run: non-finite gradient at iteration " + std::to_string(n));
    RunRecord rec;
    rec.iter = n;
    rec.outer_loss = pairwise_sum(sq) / static_cast<double>(m);
    rec.grad_norm = norm2(g);
    st.last_grad = g;
    opt.step(st.omega, g);
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

// ---------------------------------------------------------------------------
// Toy tabular MDP

struct ToyMdp {
  std::size_t n_states = 8;
  std::size_t n_actions = 2;
  std::vector<Mat> P;  // P[s](a, s′)
  Mat R;               // n_states x n_actions
  double gamma = 0.99;
};

inline ToyMdp gen_mdp(Rng& rng, std::size_t n_states = 8, std::size_t n_actions = 2, double gamma = 0.99) {
  require(n_states >= 2 && n_actions >= 2, ErrorCode::precondition, "gen_mdp needs >= 2 states and actions");
  ToyMdp m;
  m.n_states = n_states;
  m.n_actions = n_actions;
  m.gamma = gamma;
  m.P.assign(n_states, Mat(n_actions, n_states));
  m.R = Mat(n_states, n_actions);
  for (std::size_t s = 0; s < n_states; ++s) {
    for (std::size_t a = 0; a < n_actions; ++a) {
      // Dirichlet(1,...,1) via normalized exponentials
      double z = 0.0;
      for (std::size_t s2 = 0; s2 < n_states; ++s2) {
        const double e = rng.exponential();
        m.P[s](a, s2) = e;
        z += e;
      }
      for (std::size_t s2 = 0; s2 < n_states; ++s2) m.P[s](a, s2) /= z;
      m.R(s, a) = rng.uniform();
    }
  }
  return m;
}

inline std::size_t sample_categorical(Rng& rng, std::span<const double> p) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    acc += p[k];
    if (u < acc) return k;
  }
  return p.size() - 1;
}

/// One-hot [state | action] encoding.
inline void encode_pair(std::span<double> row, std::size_t n_states, std::size_t s, std::size_t a) {
  std::fill(row.begin(), row.end(), 0.0);
  row[s] = 1.0;
  row[n_states + a] = 1.0;
}

/// Every (s, a) pair once, ordered s-major.
inline Mat all_pairs(std::size_t n_states, std::size_t n_actions) {
  Mat x(n_states * n_actions, n_states + n_actions);
  for (std::size_t s = 0; s < n_states; ++s)
    for (std::size_t a = 0; a < n_actions; ++a) encode_pair(x.row(s * n_actions + a), n_states, s, a);
  return x;
}

/// Transitions from a single trajectory under the uniform behavior policy.
/// x = [one-hot s | one-hot a], y = [r′, s′].
inline Dataset replay_collect(const ToyMdp& mdp, std::size_t steps, Rng& rng) {
  require(steps >= 1, ErrorCode::precondition, "replay_collect needs steps >= 1");
  Dataset d{Mat(steps, mdp.n_states + mdp.n_actions), Mat(steps, 2)};
  std::size_t s = rng.index(mdp.n_states);
  for (std::size_t i = 0; i < steps; ++i) {
    const std::size_t a = rng.index(mdp.n_actions);
    const std::size_t s2 = sample_categorical(rng, mdp.P[s].row(a));
    encode_pair(d.x.row(i), mdp.n_states, s, a);
    d.y(i, 0) = mdp.R(s, a);
    d.y(i, 1) = static_cast<double>(s2);
    s = s2;
  }
  return d;
}

/// Q(s,a) ← R(s,a) + γ Σ_{s′} P(s,a,s′) lse(Q(s′,·)) to sup-norm tolerance.
inline Mat soft_value_iteration(const ToyMdp& mdp, double gamma, double tol = 1e-10,
                                std::size_t max_iter = 1000000) {
  require(gamma >= 0.0 && gamma < 1.0, ErrorCode::precondition, "soft_value_iteration needs gamma < 1");
  Mat q(mdp.n_states, mdp.n_actions);
  Vec v(mdp.n_states);
  for (std::size_t it = 0; it < max_iter; ++it) {
    for (std::size_t s = 0; s < mdp.n_states; ++s) v[s] = lse(q.row(s));
    double delta = 0.0;
    Mat next(mdp.n_states, mdp.n_actions);
    for (std::size_t s = 0; s < mdp.n_states; ++s)
      for (std::size_t a = 0; a < mdp.n_actions; ++a) {
        next(s, a) = mdp.R(s, a) + gamma * dot(mdp.P[s].row(a), v);
        delta = std::max(delta, std::abs(next(s, a) - q(s, a)));
      }
    q = std::move(next);
    if (delta <= tol) return q;
  }
  throw Error(ErrorCode::precondition, "soft_value_iteration did not converge");
}

/// argmax per state, ties to the lowest action index.
inline std::vector<std::size_t> greedy_policy(const Mat& q) {
  std::vector<std::size_t> pi(q.rows, 0);
  for (std::size_t s = 0; s < q.rows; ++s)
    for (std::size_t a = 1; a < q.cols; ++a)
      if (q(s, a) > q(s, pi[s])) pi[s] = a;
  return pi;
}

/// Tabular Q values of a network over the pair encoding, as a states x actions table.
inline Mat q_table(const Model& q_net, const ParamVector& params, std::size_t n_states, std::size_t n_actions) {
  const Mat out = q_net.forward(params, all_pairs(n_states, n_actions));
  Mat q(n_states, n_actions);
  for (std::size_t i = 0; i < out.rows; ++i) q.data[i] = out(i, 0);
  return q;
}

/// Parameters of the tabular MdpModel that reproduce (R, P) exactly.
inline ParamVector true_model_params(const ToyMdp& mdp) {
  return MdpModel::tabular(mdp.n_states, mdp.n_actions).tabular_params(mdp.R, mdp.P);
}

/// Repeated exact inner solves of the Bellman regression against a fixed MDP
/// model ω, with the lagged network set to the previous solution. Returns the
/// fixed-point Q table.
inline Mat rl_inner_fixed_point(const MdpModel& model, const ParamVector& omega, double gamma,
                                double tol = 1e-10, std::size_t max_iter = 1000000) {
  const std::size_t ns = model.n_states(), na = model.n_actions();
  BellmanInnerLoss loss(model, gamma);
  const LinearModel q_net(FeatureMap::state_action_pairs(ns, na), 1);
  const Dataset grid{all_pairs(ns, na), Mat(ns * na, 2)};
  ParamVector theta(q_net.num_params(), 0.0);
  for (std::size_t it = 0; it < max_iter; ++it) {
    loss.set_lagged(q_net, theta);
    ParamVector next = exact_inner_linear(loss, q_net, omega, grid, 0.0);
    const double delta = norm_inf(sub(next, theta));
    theta = std::move(next);
    if (delta <= tol) return q_table(q_net, theta, ns, na);
  }
  throw Error(ErrorCode::precondition, "rl_inner_fixed_point did not converge");
}

enum class MdpModelKind { tabular, low_rank };

struct RlProblem {
  BilevelProblem problem;
  std::shared_ptr<BellmanInnerLoss> inner;
  std::shared_ptr<BellmanOuterLoss> outer;
  std::shared_ptr<const LinearModel> q_net;
};

/// Bilevel RL problem on a replay buffer: the inner Q fit regresses on
/// model-predicted Bellman targets, the outer loss on observed ones.
inline RlProblem make_rl_problem(const ToyMdp& mdp, const Dataset& buffer, MdpModelKind kind,
                                 std::size_t rank, Rng& init_rng) {
  const MdpModel model = kind == MdpModelKind::tabular ? MdpModel::tabular(mdp.n_states, mdp.n_actions)
                                                       : MdpModel::low_rank(mdp.n_states, mdp.n_actions, rank);
  RlProblem r;
  r.inner = std::make_shared<BellmanInnerLoss>(model, mdp.gamma);
  r.outer = std::make_shared<BellmanOuterLoss>(mdp.n_states, mdp.n_actions, mdp.gamma, model.num_params());
  r.q_net = std::make_shared<LinearModel>(FeatureMap::state_action_pairs(mdp.n_states, mdp.n_actions), 1);
  r.problem.inner_loss = r.inner;
  r.problem.outer_loss = r.outer;
  r.problem.d_in = buffer;
  r.problem.d_out = buffer;
  r.problem.inner_model = r.q_net;
  r.problem.adjoint_model = r.q_net;
  r.problem.omega0 = model.init_params(init_rng);
  return r;
}

// ---------------------------------------------------------------------------
// Dataset and instance files
//   FUNCBO-DATA v1 <task> <n> <dx>,<dy>
//   one whitespace-separated record (x then y) per line

inline void write_dataset(std::ostream& os, const std::string& task, const Dataset& d) {
  os << "FUNCBO-DATA v1 " << task << ' ' << d.size() << ' ' << d.x.cols << ',' << d.y.cols << '\n';
  char buf[32];
  for (std::size_t i = 0; i < d.size(); ++i) {
    for (std::size_t j = 0; j < d.x.cols; ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", d.x(i, j));
      os << (j ? " " : "") << buf;
    }
    for (std::size_t j = 0; j < d.y.cols; ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", d.y(i, j));
      os << ' ' << buf;
    }
    os << '\n';
  }
}

struct DatasetFile {
  std::string task;
  Dataset data;
};

inline DatasetFile read_dataset(std::istream& is) {
  std::string line;
  require(static_cast<bool>(std::getline(is, line)), ErrorCode::io, "dataset: missing header");
  std::istringstream hs(line);
  std::string magic, version, task, dims;
  std::size_t n = 0;
  hs >> magic >> version >> task >> n >> dims;
  require(magic == "FUNCBO-DATA" && version == "v1", ErrorCode::io, "dataset: bad header '" + line + "'");
  const auto comma = dims.find(',');
  require(comma != std::string::npos, ErrorCode::io, "dataset: bad dims '" + dims + "'");
  const std::size_t dx = std::stoul(dims.substr(0, comma));
  const std::size_t dy = std::stoul(dims.substr(comma + 1));
  DatasetFile f{task, Dataset{Mat(n, dx), Mat(n, dy)}};
  for (std::size_t i = 0; i < n; ++i) {
    require(static_cast<bool>(std::getline(is, line)), ErrorCode::io,
            "dataset: expected " + std::to_string(n) + " records, got " + std::to_string(i));
    std::istringstream rs(line);
    for (std::size_t j = 0; j < dx; ++j)
      require(static_cast<bool>(rs >> f.data.x(i, j)), ErrorCode::io, "dataset: short record " + std::to_string(i));
    for (std::size_t j = 0; j < dy; ++j)
      require(static_cast<bool>(rs >> f.data.y(i, j)), ErrorCode::io, "dataset: short record " + std::to_string(i));
  }
  return f;
}

/// Instance file: key lines for the scalars, then A and Emb row by row.
inline void write_iv_instance(std::ostream& os, const IvInstance& inst) {
  char buf[32];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  os << "FUNCBO-IV v1\n";
  os << "d_t " << inst.d_t << "\nsigma_t " << num(inst.sigma_t) << "\nsigma_o " << num(inst.sigma_o)
     << "\nkappa " << num(inst.kappa) << "\nc0 " << num(inst.c0) << "\nc1 " << num(inst.c1) << '\n';
  for (const auto* m : {&inst.A, &inst.Emb}) {
    os << (m == &inst.A ? "A" : "Emb") << ' ' << m->rows << ' ' << m->cols << '\n';
    for (std::size_t i = 0; i < m->rows; ++i) {
      for (std::size_t j = 0; j < m->cols; ++j) os << (j ? " " : "") << num((*m)(i, j));
      os << '\n';
    }
  }
}

inline IvInstance read_iv_instance(std::istream& is) {
  std::string magic, version, key;
  is >> magic >> version;
  require(magic == "FUNCBO-IV" && version == "v1", ErrorCode::io, "iv instance: bad header");
  IvInstance inst;
  is >> key >> inst.d_t >> key >> inst.sigma_t >> key >> inst.sigma_o >> key >> inst.kappa >> key >> inst.c0 >>
      key >> inst.c1;
  for (Mat* m : {&inst.A, &inst.Emb}) {
    std::size_t r = 0, c = 0;
    is >> key >> r >> c;
    *m = Mat(r, c);
    for (double& v : m->data) is >> v;
  }
  require(static_cast<bool>(is), ErrorCode::io, "iv instance: truncated file");
  require_dims(inst.A.cols, inst.d_t, "iv instance A");
  require_dims(inst.Emb.rows, inst.d_t, "iv instance Emb");
  return inst;
}

}  // namespace funcbo
