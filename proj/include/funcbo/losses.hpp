#pragma once

// Point-wise losses ℓ(ω, v, x, y) exposing exactly the derivative quantities
// the functional adjoint needs: value, ∂_v ℓ, ∂_v² ℓ, ∂_ω ℓ and the
// cross-derivative action (∂_{ω,v} ℓ)·a.
//
// Every operation is batched: row i of v, x, y is one sample, and the ω
// quantities are returned as weighted sums Σ_i w_i (...)_i so callers control
// the normalization of each mean.

#include <cmath>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "funcbo/mdp_model.hpp"
#include "funcbo/models.hpp"

namespace funcbo {

enum class LossKind { squared_outer, squared_inner_to_model, bellman_inner, bellman_outer };

inline const char* to_string(LossKind k) {
  switch (k) {
    case LossKind::squared_outer: return "squared_outer";
    case LossKind::squared_inner_to_model: return "squared_inner_to_model";
    case LossKind::bellman_inner: return "bellman_inner";
    case LossKind::bellman_outer: return "bellman_outer";
  }
  return "?";
}

struct LossBundle {
  double value = 0.0;
  Vec grad_v;
  Mat hess_v;
};

/// Per-sample bundles for a batch; hessians are stored flattened, one
/// d_v x d_v block per row.
struct BundleBatch {
  Vec value;
  Mat grad_v;
  Mat hess_v;

  std::size_t size() const { return value.size(); }
  std::size_t value_dim() const { return grad_v.cols; }

  Mat hess(std::size_t i) const {
    const std::size_t d = value_dim();
    return Mat(d, d, hess_v.row_vec(i));
  }

  /// H_i a
  Vec hess_apply(std::size_t i, std::span<const double> a) const {
    const std::size_t d = value_dim();
    require_dims(a.size(), d, "hess_apply");
    Vec out(d, 0.0);
    const auto h = hess_v.row(i);
    for (std::size_t r = 0; r < d; ++r)
      for (std::size_t c = 0; c < d; ++c) out[r] += h[r * d + c] * a[c];
    return out;
  }
};

/// Numerically stable log-sum-exp.
inline double lse(std::span<const double> values) {
  require(!values.empty(), ErrorCode::empty_input, "lse of an empty vector");
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : values) mx = std::max(mx, v);
  require(std::isfinite(mx), ErrorCode::non_finite, "lse: non-finite input");
  double s = 0.0;
  for (double v : values) s += std::exp(v - mx);
  return mx + std::log(s);
}

class PointwiseLoss {
 public:
  virtual ~PointwiseLoss() = default;

  virtual LossKind kind() const = 0;
  virtual std::size_t value_dim() const = 0;
  virtual std::size_t omega_dim() const = 0;
  virtual std::size_t x_dim() const = 0;
  virtual std::size_t y_dim() const = 0;

  /// Strong-convexity modulus in v.
  virtual double mu() const = 0;

  /// Every loss here is quadratic in v with ∂_v² ℓ = c·I for a constant c.
  virtual double curvature() const = 0;

  virtual BundleBatch eval_batch(const ParamVector& omega, const Mat& v, const Mat& x,
                                 const Mat& y) const = 0;

  /// Σ_i w_i ∂_ω ℓ(ω, v_i, x_i, y_i)
  virtual ParamVector grad_omega_batch(const ParamVector& omega, const Mat& v, const Mat& x,
                                       const Mat& y, std::span<const double> w) const = 0;

  /// Σ_i w_i ∂_ω ⟨a_i, ∂_v ℓ(ω, v_i, x_i, y_i)⟩ with a held fixed.
  virtual ParamVector cross_apply_batch(const ParamVector& omega, const Mat& v, const Mat& x,
                                        const Mat& y, const Mat& a,
                                        std::span<const double> w) const = 0;

  /// Bundles evaluated at v = 0; for losses quadratic in v these give the
  /// affine gradient map ∂_v ℓ(v) = g0 + c·v.
  BundleBatch eval_at_zero(const ParamVector& omega, const Mat& x, const Mat& y) const {
    return eval_batch(omega, Mat(x.rows, value_dim()), x, y);
  }

 protected:
  void check_batch(const ParamVector& omega, const Mat& v, const Mat& x, const Mat& y) const {
    require_dims(omega.size(), omega_dim(), "loss omega dimension");
    require_dims(v.cols, value_dim(), "loss value dimension");
    require_dims(x.cols, x_dim(), "loss input dimension");
    require_dims(y.cols, y_dim(), "loss target dimension");
    require_dims(x.rows, v.rows, "loss batch rows (x)");
    require_dims(y.rows, v.rows, "loss batch rows (y)");
  }

  static void check_weights(std::span<const double> w, std::size_t n) {
    require_dims(w.size(), n, "loss weights");
  }

  static BundleBatch isotropic_bundles(std::size_t n, std::size_t d, double c) {
    BundleBatch b{Vec(n, 0.0), Mat(n, d), Mat(n, d * d)};
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < d; ++k) b.hess_v(i, k * d + k) = c;
    return b;
  }
};

// ---------------------------------------------------------------------------
// Per-sample conveniences.

inline Mat single_row(std::span<const double> v) { return Mat(1, v.size(), Vec(v.begin(), v.end())); }

inline LossBundle eval_bundle(const PointwiseLoss& loss, const ParamVector& omega,
                              std::span<const double> v, std::span<const double> x,
                              std::span<const double> y) {
  const BundleBatch b = loss.eval_batch(omega, single_row(v), single_row(x), single_row(y));
  return {b.value[0], b.grad_v.row_vec(0), b.hess(0)};
}

inline ParamVector grad_omega(const PointwiseLoss& loss, const ParamVector& omega,
                              std::span<const double> v, std::span<const double> x,
                              std::span<const double> y) {
  const double w = 1.0;
  return loss.grad_omega_batch(omega, single_row(v), single_row(x), single_row(y), {&w, 1});
}

inline ParamVector cross_apply(const PointwiseLoss& loss, const ParamVector& omega,
                               std::span<const double> v, std::span<const double> x,
                               std::span<const double> y, std::span<const double> a) {
  const double w = 1.0;
  return loss.cross_apply_batch(omega, single_row(v), single_row(x), single_row(y),
                                single_row(a), {&w, 1});
}

// ---------------------------------------------------------------------------

/// ℓ_out(ω, v, x, y) = ‖o − v‖², with o = y[o_offset : o_offset + d_v].
class SquaredOuterLoss final : public PointwiseLoss {
 public:
  SquaredOuterLoss(std::size_t value_dim, std::size_t x_dim, std::size_t y_dim,
                   std::size_t o_offset, std::size_t omega_dim)
      : d_(value_dim), x_dim_(x_dim), y_dim_(y_dim), o_offset_(o_offset), omega_dim_(omega_dim) {
    require(o_offset + value_dim <= y_dim, ErrorCode::precondition, "SquaredOuterLoss: o out of range");
  }

  LossKind kind() const override { return LossKind::squared_outer; }
  std::size_t value_dim() const override { return d_; }
  std::size_t omega_dim() const override { return omega_dim_; }
  std::size_t x_dim() const override { return x_dim_; }
  std::size_t y_dim() const override { return y_dim_; }
  double mu() const override { return 2.0; }
  double curvature() const override { return 2.0; }

  BundleBatch eval_batch(const ParamVector& omega, const Mat& v, const Mat& x,
                         const Mat& y) const override {
    check_batch(omega, v, x, y);
    BundleBatch b = isotropic_bundles(v.rows, d_, 2.0);
    for (std::size_t i = 0; i < v.rows; ++i) {
      double s = 0.0;
      for (std::size_t k = 0; k < d_; ++k) {
        const double r = v(i, k) - y(i, o_offset_ + k);
        s += r * r;
        b.grad_v(i, k) = 2.0 * r;
      }
      b.value[i] = s;
    }
    return b;
  }

  ParamVector grad_omega_batch(const ParamVector& omega, const Mat& v, const Mat& x, const Mat& y,
                               std::span<const double> w) const override {
    check_batch(omega, v, x, y);
    check_weights(w, v.rows);
    return ParamVector(omega_dim_, 0.0);
  }

  ParamVector cross_apply_batch(const ParamVector& omega, const Mat& v, const Mat& x, const Mat& y,
                                const Mat&, std::span<const double> w) const override {
    check_batch(omega, v, x, y);
    check_weights(w, v.rows);
    return ParamVector(omega_dim_, 0.0);
  }

 private:
  std::size_t d_, x_dim_, y_dim_, o_offset_, omega_dim_;
};

/// ℓ_in(ω, v, x, y) = ‖f_ω(t) − v‖², with t = y[t_offset : t_offset + d_t]
/// and f_ω the outer model whose parameters are ω.
class SquaredInnerLoss final : public PointwiseLoss {
 public:
  SquaredInnerLoss(std::shared_ptr<const Model> outer_model, std::size_t x_dim, std::size_t y_dim,
                   std::size_t t_offset)
      : f_(std::move(outer_model)), x_dim_(x_dim), y_dim_(y_dim), t_offset_(t_offset) {
    require(f_ != nullptr, ErrorCode::precondition, "SquaredInnerLoss needs an outer model");
    require(t_offset + f_->input_dim() <= y_dim, ErrorCode::precondition,
            "SquaredInnerLoss: t out of range");
  }

  const Model& outer_model() const { return *f_; }

  LossKind kind() const override { return LossKind::squared_inner_to_model; }
  std::size_t value_dim() const override { return f_->output_dim(); }
  std::size_t omega_dim() const override { return f_->num_params(); }
  std::size_t x_dim() const override { return x_dim_; }
  std::size_t y_dim() const override { return y_dim_; }
  double mu() const override { return 2.0; }
  double curvature() const override { return 2.0; }

  Mat treatments(const Mat& y) const {
    const std::size_t dt = f_->input_dim();
    Mat t(y.rows, dt);
    for (std::size_t i = 0; i < y.rows; ++i)
      for (std::size_t k = 0; k < dt; ++k) t(i, k) = y(i, t_offset_ + k);
    return t;
  }

  /// f_ω(t_i) for every row of y.
  Mat predictions(const ParamVector& omega, const Mat& y) const {
    return f_->forward(omega, treatments(y));
  }

  BundleBatch eval_batch(const ParamVector& omega, const Mat& v, const Mat& x,
                         const Mat& y) const override {
    check_batch(omega, v, x, y);
    const std::size_t d = value_dim();
    const Mat f = predictions(omega, y);
    BundleBatch b = isotropic_bundles(v.rows, d, 2.0);
    for (std::size_t i = 0; i < v.rows; ++i) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double r = v(i, k) - f(i, k);
        s += r * r;
        b.grad_v(i, k) = 2.0 * r;
      }
      b.value[i] = s;
    }
    require(all_finite(b.value), ErrorCode::non_finite, "squared inner loss: non-finite target");
    return b;
  }

  ParamVector grad_omega_batch(const ParamVector& omega, const Mat& v, const Mat& x, const Mat& y,
                               std::span<const double> w) const override {
    check_batch(omega, v, x, y);
    check_weights(w, v.rows);
    const Mat t = treatments(y);
    const Mat f = f_->forward(omega, t);
    Mat cot(v.rows, value_dim());
    for (std::size_t i = 0; i < v.rows; ++i)
      for (std::size_t k = 0; k < cot.cols; ++k) cot(i, k) = 2.0 * w[i] * (f(i, k) - v(i, k));
    return f_->vjp_params(omega, t, cot);
  }

  ParamVector cross_apply_batch(const ParamVector& omega, const Mat& v, const Mat& x, const Mat& y,
                                const Mat& a, std::span<const double> w) const override {
    check_batch(omega, v, x, y);
    check_weights(w, v.rows);
    require_dims(a.rows, v.rows, "cross_apply adjoint rows");
    require_dims(a.cols, value_dim(), "cross_apply adjoint width");
    Mat cot(v.rows, value_dim());
    for (std::size_t i = 0; i < v.rows; ++i)
      for (std::size_t k = 0; k < cot.cols; ++k) cot(i, k) = -2.0 * w[i] * a(i, k);
    return f_->vjp_params(omega, treatments(y), cot);
  }

 private:
  std::shared_ptr<const Model> f_;
  std::size_t x_dim_, y_dim_, t_offset_;
};

// ---------------------------------------------------------------------------
// Bellman losses. Inputs x = [one-hot s | one-hot a]; targets y = (r′, s′ index).
// The lagged network h̄ enters only through the soft state values
// V̄(s′) = logΣ_{a′} exp h̄(s′, a′), which are constants for all derivatives.

/// Soft state values of a Q-network over the one-hot (s, a) encoding.
inline Vec soft_state_values(const Model& q_net, const ParamVector& params, std::size_t n_states,
                             std::size_t n_actions) {
  Mat xs(n_states * n_actions, n_states + n_actions);
  for (std::size_t s = 0; s < n_states; ++s)
    for (std::size_t a = 0; a < n_actions; ++a) {
      xs(s * n_actions + a, s) = 1.0;
      xs(s * n_actions + a, n_states + a) = 1.0;
    }
  const Mat q = q_net.forward(params, xs);
  Vec values(n_states);
  Vec row(n_actions);
  for (std::size_t s = 0; s < n_states; ++s) {
    for (std::size_t a = 0; a < n_actions; ++a) row[a] = q(s * n_actions + a, 0);
    values[s] = lse(row);
  }
  return values;
}

class BellmanLossBase : public PointwiseLoss {
 public:
  BellmanLossBase(std::size_t n_states, std::size_t n_actions, double gamma)
      : n_states_(n_states), n_actions_(n_actions), gamma_(gamma),
        lagged_values_(n_states, std::log(static_cast<double>(n_actions))) {
    require(gamma >= 0.0 && gamma < 1.0, ErrorCode::precondition, "Bellman loss: gamma in [0,1)");
  }

  std::size_t value_dim() const override { return 1; }
  std::size_t x_dim() const override { return n_states_ + n_actions_; }
  std::size_t y_dim() const override { return 2; }
  double mu() const override { return 1.0; }
  double curvature() const override { return 1.0; }

  double gamma() const { return gamma_; }
  std::size_t n_states() const { return n_states_; }
  std::size_t n_actions() const { return n_actions_; }

  /// Recomputes V̄ from the lagged network h̄.
  void set_lagged(const Model& q_net, const ParamVector& params) {
    set_lagged_values(soft_state_values(q_net, params, n_states_, n_actions_));
  }
  void set_lagged_values(Vec v) {
    require_dims(v.size(), n_states_, "lagged state values");
    require(all_finite(v), ErrorCode::non_finite, "lagged state values not finite");
    lagged_values_ = std::move(v);
  }
  const Vec& lagged_values() const { return lagged_values_; }

  /// Bellman targets for each row; implemented by the concrete kinds.
  virtual Vec targets(const ParamVector& omega, const Mat& x, const Mat& y) const = 0;

  BundleBatch eval_batch(const ParamVector& omega, const Mat& v, const Mat& x,
                         const Mat& y) const override {
    check_batch(omega, v, x, y);
    const Vec t = targets(omega, x, y);
    require(all_finite(t), ErrorCode::non_finite, "Bellman loss: non-finite target");
    BundleBatch b = isotropic_bundles(v.rows, 1, 1.0);
    for (std::size_t i = 0; i < v.rows; ++i) {
      const double r = v(i, 0) - t[i];
      b.value[i] = 0.5 * r * r;
      b.grad_v(i, 0) = r;
    }
    return b;
  }

 protected:
  std::size_t state_of(const Mat& x, std::size_t i) const { return argmax_block(x, i, 0, n_states_); }
  std::size_t action_of(const Mat& x, std::size_t i) const {
    return argmax_block(x, i, n_states_, n_actions_);
  }

  std::size_t next_state_of(const Mat& y, std::size_t i) const {
    const double s = y(i, 1);
    require(s >= 0.0 && s < static_cast<double>(n_states_) && s == std::floor(s),
            ErrorCode::precondition, "Bellman loss: bad next-state index");
    return static_cast<std::size_t>(s);
  }

  std::size_t n_states_;
  std::size_t n_actions_;
  double gamma_;
  Vec lagged_values_;

 private:
  static std::size_t argmax_block(const Mat& x, std::size_t i, std::size_t off, std::size_t len) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < len; ++k)
      if (x(i, off + k) > x(i, off + best)) best = k;
    return best;
  }
};

/// f(v, r′, s′) = ½ (v − r′ − γ V̄(s′))², independent of ω.
class BellmanOuterLoss final : public BellmanLossBase {
 public:
  BellmanOuterLoss(std::size_t n_states, std::size_t n_actions, double gamma, std::size_t omega_dim)
      : BellmanLossBase(n_states, n_actions, gamma), omega_dim_(omega_dim) {}

  LossKind kind() const override { return LossKind::bellman_outer; }
  std::size_t omega_dim() const override { return omega_dim_; }

  Vec targets(const ParamVector&, const Mat&, const Mat& y) const override {
    Vec t(y.rows);
    for (std::size_t i = 0; i < y.rows; ++i) t[i] = y(i, 0) + gamma_ * lagged_values_[next_state_of(y, i)];
    return t;
  }

  ParamVector grad_omega_batch(const ParamVector& omega, const Mat& v, const Mat& x, const Mat& y,
                               std::span<const double> w) const override {
    check_batch(omega, v, x, y);
    check_weights(w, v.rows);
    return ParamVector(omega_dim_, 0.0);
  }

  ParamVector cross_apply_batch(const ParamVector& omega, const Mat& v, const Mat& x, const Mat& y,
                                const Mat&, std::span<const double> w) const override {
    check_batch(omega, v, x, y);
    check_weights(w, v.rows);
    return ParamVector(omega_dim_, 0.0);
  }

 private:
  std::size_t omega_dim_;
};

/// f(v, r_ω(x), s_ω(x)) with model target T(ω, x) = r_ω(x) + γ s_ω(x)ᵀ V̄.
class BellmanInnerLoss final : public BellmanLossBase {
 public:
  BellmanInnerLoss(MdpModel model, double gamma)
      : BellmanLossBase(model.n_states(), model.n_actions(), gamma), model_(std::move(model)) {}

  const MdpModel& model() const { return model_; }

  LossKind kind() const override { return LossKind::bellman_inner; }
  std::size_t omega_dim() const override { return model_.num_params(); }

  Vec targets(const ParamVector& omega, const Mat& x, const Mat&) const override {
    const MdpPrediction p = model_.predict(omega, x);
    Vec t(x.rows);
    for (std::size_t i = 0; i < x.rows; ++i) {
      double ev = 0.0;
      for (std::size_t s = 0; s < n_states_; ++s) ev += p.next_state(i, s) * lagged_values_[s];
      t[i] = p.reward[i] + gamma_ * ev;
    }
    return t;
  }

  /// Σ_i c_i ∂_ω T(ω, x_i)
  ParamVector target_vjp(const ParamVector& omega, const Mat& x, std::span<const double> c) const {
    Mat cot_s(x.rows, n_states_);
    for (std::size_t i = 0; i < x.rows; ++i)
      for (std::size_t s = 0; s < n_states_; ++s) cot_s(i, s) = c[i] * gamma_ * lagged_values_[s];
    return model_.vjp(omega, x, c, cot_s);
  }

  ParamVector grad_omega_batch(const ParamVector& omega, const Mat& v, const Mat& x, const Mat& y,
                               std::span<const double> w) const override {
    check_batch(omega, v, x, y);
    check_weights(w, v.rows);
    const Vec t = targets(omega, x, y);
    Vec c(v.rows);
    for (std::size_t i = 0; i < v.rows; ++i) c[i] = w[i] * (t[i] - v(i, 0));
    return target_vjp(omega, x, c);
  }

  ParamVector cross_apply_batch(const ParamVector& omega, const Mat& v, const Mat& x, const Mat& y,
                                const Mat& a, std::span<const double> w) const override {
    check_batch(omega, v, x, y);
    check_weights(w, v.rows);
    require_dims(a.rows, v.rows, "cross_apply adjoint rows");
    require_dims(a.cols, 1, "cross_apply adjoint width");
    Vec c(v.rows);
    for (std::size_t i = 0; i < v.rows; ++i) c[i] = -w[i] * a(i, 0);
    return target_vjp(omega, x, c);
  }

 private:
  MdpModel model_;
};

}  // namespace funcbo
