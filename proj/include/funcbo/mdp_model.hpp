#pragma once

// Deterministic MDP model q_ω for the tabular RL task. Given x = (s, a) encoded
// as [one-hot state | one-hot action], the wrapped network sees the one-hot of
// the pair and emits [reward, next-state logits]; the predicted next state
// s_ω(x) is the softmax of the logits (a distribution over states).

#include <memory>

#include "funcbo/models.hpp"

namespace funcbo {

struct MdpPrediction {
  Vec reward;      // n
  Mat next_state;  // n x n_states, rows on the simplex
};

class MdpModel {
 public:
  MdpModel(std::size_t n_states, std::size_t n_actions, std::shared_ptr<const Model> net)
      : n_states_(n_states), n_actions_(n_actions), net_(std::move(net)),
        pairs_(FeatureMap::state_action_pairs(n_states, n_actions)) {
    require(net_ != nullptr, ErrorCode::precondition, "MdpModel needs a network");
    require_dims(net_->input_dim(), n_states * n_actions, "MdpModel network input");
    require_dims(net_->output_dim(), 1 + n_states, "MdpModel network output");
  }

  /// Tabular model: a linear map on the pair one-hot.
  static MdpModel tabular(std::size_t n_states, std::size_t n_actions) {
    auto net = std::make_shared<LinearModel>(FeatureMap::raw(n_states * n_actions), 1 + n_states);
    return MdpModel(n_states, n_actions, std::move(net));
  }

  /// Rank-limited model: the pair one-hot passes through a `rank`-wide linear
  /// bottleneck before the reward/logit head.
  static MdpModel low_rank(std::size_t n_states, std::size_t n_actions, std::size_t rank) {
    MlpSpec spec{{n_states * n_actions, rank, 1 + n_states}, {Activation::identity}};
    return MdpModel(n_states, n_actions, std::make_shared<Mlp>(spec));
  }

  std::size_t n_states() const { return n_states_; }
  std::size_t n_actions() const { return n_actions_; }
  std::size_t input_dim() const { return n_states_ + n_actions_; }
  std::size_t num_params() const { return net_->num_params(); }
  const Model& net() const { return *net_; }

  ParamVector init_params(Rng& rng) const { return net_->init_params(rng); }

  MdpPrediction predict(const ParamVector& omega, const Mat& xs) const {
    const Mat raw = net_->forward(omega, pairs_.apply(xs));
    MdpPrediction p{Vec(xs.rows), Mat(xs.rows, n_states_)};
    for (std::size_t i = 0; i < xs.rows; ++i) {
      p.reward[i] = raw(i, 0);
      double mx = raw(i, 1);
      for (std::size_t s = 1; s < n_states_; ++s) mx = std::max(mx, raw(i, 1 + s));
      double z = 0.0;
      for (std::size_t s = 0; s < n_states_; ++s) {
        const double e = std::exp(raw(i, 1 + s) - mx);
        p.next_state(i, s) = e;
        z += e;
      }
      for (std::size_t s = 0; s < n_states_; ++s) p.next_state(i, s) /= z;
    }
    return p;
  }

  /// Gradient of Σ_i [cot_r_i r_ω(x_i) + ⟨cot_s_i, s_ω(x_i)⟩] with respect to ω.
  ParamVector vjp(const ParamVector& omega, const Mat& xs, std::span<const double> cot_reward,
                  const Mat& cot_state) const {
    require_dims(cot_reward.size(), xs.rows, "MdpModel reward cotangent");
    require_dims(cot_state.rows, xs.rows, "MdpModel state cotangent rows");
    require_dims(cot_state.cols, n_states_, "MdpModel state cotangent width");
    const MdpPrediction p = predict(omega, xs);
    Mat cot(xs.rows, 1 + n_states_);
    for (std::size_t i = 0; i < xs.rows; ++i) {
      cot(i, 0) = cot_reward[i];
      double inner = 0.0;
      for (std::size_t s = 0; s < n_states_; ++s) inner += p.next_state(i, s) * cot_state(i, s);
      // softmax Jacobian: diag(p) - p pᵀ
      for (std::size_t s = 0; s < n_states_; ++s)
        cot(i, 1 + s) = p.next_state(i, s) * (cot_state(i, s) - inner);
    }
    return net_->vjp_params(omega, pairs_.apply(xs), cot);
  }

  /// Parameters of a tabular model reproducing reward table R and transition
  /// probabilities P exactly (logits = log P).
  ParamVector tabular_params(const Mat& reward, const std::vector<Mat>& transitions) const {
    require(net_->kind() == "linear", ErrorCode::precondition,
            "tabular_params needs the tabular model");
    const std::size_t pairs = n_states_ * n_actions_;
    ParamVector w((1 + n_states_) * pairs, 0.0);
    for (std::size_t s = 0; s < n_states_; ++s) {
      for (std::size_t a = 0; a < n_actions_; ++a) {
        const std::size_t col = s * n_actions_ + a;
        w[col] = reward(s, a);
        for (std::size_t s2 = 0; s2 < n_states_; ++s2) {
          const double p = transitions[s](a, s2);
          require(p > 0.0, ErrorCode::precondition, "tabular_params: zero transition probability");
          w[(1 + s2) * pairs + col] = std::log(p);
        }
      }
    }
    return w;
  }

 private:
  std::size_t n_states_;
  std::size_t n_actions_;
  std::shared_ptr<const Model> net_;
  FeatureMap pairs_;
};

}  // namespace funcbo
