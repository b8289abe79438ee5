#pragma once

// Parametric function approximators: a dense MLP and a linear model on fixed
// features. Both expose batched forward evaluation and reverse-mode
// parameter VJPs; nothing here differentiates twice.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <istream>
#include <memory>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "funcbo/numkit.hpp"

namespace funcbo {

using ParamVector = Vec;

enum class Activation { relu, tanh, identity };

inline const char* to_string(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
    case Activation::identity: return "identity";
  }
  return "?";
}

inline Activation parse_activation(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  if (s == "identity") return Activation::identity;
  throw Error(ErrorCode::config, "unknown activation '" + s + "'");
}

/// Interface shared by every approximator τ(θ) / ν(ξ) / f_ω.
class Model {
 public:
  virtual ~Model() = default;

  virtual std::size_t input_dim() const = 0;
  virtual std::size_t output_dim() const = 0;
  virtual std::size_t num_params() const = 0;

  /// Row i of the result is the model output at row i of `xs`.
  virtual Mat forward(const ParamVector& params, const Mat& xs) const = 0;

  /// Gradient of Σ_i ⟨cot_i, model(x_i)⟩ with respect to the parameters.
  virtual ParamVector vjp_params(const ParamVector& params, const Mat& xs,
                                 const Mat& cotangents) const = 0;

  virtual ParamVector init_params(Rng& rng) const = 0;
  virtual std::unique_ptr<Model> clone() const = 0;

  /// Checkpoint header fields.
  virtual std::string kind() const = 0;
  virtual std::string widths_string() const = 0;
  virtual std::string activations_string() const = 0;

  /// Approximate floating-point operation counts, used by the cost meters.
  virtual double forward_flops(std::size_t n) const = 0;
  virtual double vjp_flops(std::size_t n) const = 0;

 protected:
  void check_input(const ParamVector& params, const Mat& xs) const {
    require_dims(params.size(), num_params(), "model parameter count");
    require_dims(xs.cols, input_dim(), "model input width");
  }
};

// ---------------------------------------------------------------------------

struct MlpSpec {
  std::vector<std::size_t> widths;       // input, hidden..., output
  std::vector<Activation> activations;   // one per hidden layer

  std::size_t layers() const { return widths.empty() ? 0 : widths.size() - 1; }

  void validate() const {
    require(widths.size() >= 2, ErrorCode::precondition, "MlpSpec needs at least one layer");
    for (auto w : widths) require(w >= 1, ErrorCode::precondition, "MlpSpec width must be >= 1");
    require_dims(activations.size(), widths.size() - 2, "MlpSpec activation count");
  }

  std::size_t num_params() const {
    std::size_t p = 0;
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) p += widths[l] * widths[l + 1] + widths[l + 1];
    return p;
  }
};

inline double activate(Activation a, double z) {
  switch (a) {
    case Activation::relu: return z > 0.0 ? z : 0.0;
    case Activation::tanh: return std::tanh(z);
    case Activation::identity: return z;
  }
  return z;
}

/// Derivative written in terms of the pre-activation z and output y.
/// The relu kink takes derivative 0.
inline double activate_grad(Activation a, double z, double y) {
  switch (a) {
    case Activation::relu: return z > 0.0 ? 1.0 : 0.0;
    case Activation::tanh: return 1.0 - y * y;
    case Activation::identity: return 1.0;
  }
  return 1.0;
}

class Mlp final : public Model {
 public:
  explicit Mlp(MlpSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    offsets_.push_back(0);
    for (std::size_t l = 0; l < spec_.layers(); ++l) {
      offsets_.push_back(offsets_.back() + spec_.widths[l] * spec_.widths[l + 1] +
                         spec_.widths[l + 1]);
    }
  }

  const MlpSpec& spec() const { return spec_; }

  std::size_t input_dim() const override { return spec_.widths.front(); }
  std::size_t output_dim() const override { return spec_.widths.back(); }
  std::size_t num_params() const override { return offsets_.back(); }

  // Layout: for each layer in order, W (out x in, row-major) then b (out).
  std::size_t weight_offset(std::size_t layer) const { return offsets_[layer]; }
  std::size_t bias_offset(std::size_t layer) const {
    return offsets_[layer] + spec_.widths[layer] * spec_.widths[layer + 1];
  }

  Mat forward(const ParamVector& params, const Mat& xs) const override {
    check_input(params, xs);
    Mat a = xs;
    for (std::size_t l = 0; l < spec_.layers(); ++l) a = layer_forward(params, l, a, nullptr);
    return a;
  }

  /// Activations of the last hidden layer (the input itself for a 1-layer net).
  Mat hidden(const ParamVector& params, const Mat& xs) const {
    check_input(params, xs);
    Mat a = xs;
    for (std::size_t l = 0; l + 1 < spec_.layers(); ++l) a = layer_forward(params, l, a, nullptr);
    return a;
  }

  ParamVector vjp_params(const ParamVector& params, const Mat& xs,
                         const Mat& cotangents) const override {
    check_input(params, xs);
    require_dims(cotangents.rows, xs.rows, "mlp cotangent rows");
    require_dims(cotangents.cols, output_dim(), "mlp cotangent width");
    const std::size_t layers = spec_.layers();
    // acts[l] is the input to layer l; pre[l] its pre-activation output.
    std::vector<Mat> acts{xs};
    std::vector<Mat> pre(layers);
    for (std::size_t l = 0; l < layers; ++l) acts.push_back(layer_forward(params, l, acts[l], &pre[l]));

    ParamVector grad(num_params(), 0.0);
    Mat g = cotangents;
    const std::size_t n = xs.rows;
    for (std::size_t l = layers; l-- > 0;) {
      const std::size_t in = spec_.widths[l];
      const std::size_t out = spec_.widths[l + 1];
      if (l + 1 < layers) {
        const Activation act = spec_.activations[l];
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < out; ++j)
            g(i, j) *= activate_grad(act, pre[l](i, j), acts[l + 1](i, j));
      }
      double* gw = grad.data() + weight_offset(l);
      double* gb = grad.data() + bias_offset(l);
      const Mat& a = acts[l];
      for (std::size_t i = 0; i < n; ++i) {
        const double* ai = a.data.data() + i * in;
        for (std::size_t j = 0; j < out; ++j) {
          const double gij = g(i, j);
          gb[j] += gij;
          if (gij == 0.0) continue;
          double* row = gw + j * in;
          for (std::size_t k = 0; k < in; ++k) row[k] += gij * ai[k];
        }
      }
      if (l == 0) break;
      const double* w = params.data() + weight_offset(l);
      Mat gprev(n, in);
      for (std::size_t i = 0; i < n; ++i) {
        double* gp = gprev.data.data() + i * in;
        for (std::size_t j = 0; j < out; ++j) {
          const double gij = g(i, j);
          if (gij == 0.0) continue;
          const double* row = w + j * in;
          for (std::size_t k = 0; k < in; ++k) gp[k] += gij * row[k];
        }
      }
      g = std::move(gprev);
    }
    return grad;
  }

  /// Glorot-uniform weights, zero biases.
  ParamVector init_params(Rng& rng) const override {
    ParamVector p(num_params(), 0.0);
    for (std::size_t l = 0; l < spec_.layers(); ++l) {
      const double fan_in = static_cast<double>(spec_.widths[l]);
      const double fan_out = static_cast<double>(spec_.widths[l + 1]);
      const double bound = std::sqrt(6.0 / (fan_in + fan_out));
      for (std::size_t k = weight_offset(l); k < bias_offset(l); ++k) p[k] = rng.uniform(-bound, bound);
    }
    return p;
  }

  std::unique_ptr<Model> clone() const override { return std::make_unique<Mlp>(*this); }

  std::string kind() const override { return "mlp"; }
  std::string widths_string() const override { return join_widths(spec_.widths); }
  std::string activations_string() const override {
    if (spec_.activations.empty()) return "-";
    std::string s;
    for (std::size_t i = 0; i < spec_.activations.size(); ++i) {
      if (i) s += ',';
      s += to_string(spec_.activations[i]);
    }
    return s;
  }

  double forward_flops(std::size_t n) const override {
    double f = 0.0;
    for (std::size_t l = 0; l < spec_.layers(); ++l)
      f += static_cast<double>(n) * (2.0 * spec_.widths[l] * spec_.widths[l + 1] + 2.0 * spec_.widths[l + 1]);
    return f;
  }
  double vjp_flops(std::size_t n) const override { return 3.0 * forward_flops(n); }

  static std::string join_widths(const std::vector<std::size_t>& w) {
    std::string s;
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (i) s += ',';
      s += std::to_string(w[i]);
    }
    return s;
  }

 private:
  Mat layer_forward(const ParamVector& params, std::size_t l, const Mat& a, Mat* pre_out) const {
    const std::size_t in = spec_.widths[l];
    const std::size_t out = spec_.widths[l + 1];
    const double* w = params.data() + weight_offset(l);
    const double* b = params.data() + bias_offset(l);
    const bool last = l + 1 == spec_.layers();
    const Activation act = last ? Activation::identity : spec_.activations[l];
    Mat z(a.rows, out);
    for (std::size_t i = 0; i < a.rows; ++i) {
      const double* ai = a.data.data() + i * in;
      double* zi = z.data.data() + i * out;
      for (std::size_t j = 0; j < out; ++j) {
        const double* row = w + j * in;
        double s = b[j];
        for (std::size_t k = 0; k < in; ++k) s += row[k] * ai[k];
        zi[j] = s;
      }
    }
    if (pre_out) *pre_out = z;
    if (act != Activation::identity)
      for (double& v : z.data) v = activate(act, v);
    return z;
  }

  MlpSpec spec_;
  std::vector<std::size_t> offsets_;
};

// ---------------------------------------------------------------------------
// Fixed feature maps for the linear model.

enum class FeatureKind { raw, raw_with_bias, state_action_pairs, mlp_hidden };

class FeatureMap {
 public:
  static FeatureMap raw(std::size_t dim) { return FeatureMap(FeatureKind::raw, dim); }
  static FeatureMap raw_with_bias(std::size_t dim) { return FeatureMap(FeatureKind::raw_with_bias, dim); }

  /// Input is [one-hot state | one-hot action]; output is the one-hot of the pair.
  static FeatureMap state_action_pairs(std::size_t n_states, std::size_t n_actions) {
    FeatureMap f(FeatureKind::state_action_pairs, n_states + n_actions);
    f.n_states_ = n_states;
    f.n_actions_ = n_actions;
    return f;
  }

  /// Last hidden layer of a frozen network.
  static FeatureMap mlp_hidden(const Mlp& net, ParamVector params) {
    FeatureMap f(FeatureKind::mlp_hidden, net.input_dim());
    f.net_ = std::make_shared<const Mlp>(net);
    f.net_params_ = std::make_shared<const ParamVector>(std::move(params));
    return f;
  }

  FeatureKind kind() const { return kind_; }
  std::size_t input_dim() const { return input_dim_; }

  std::size_t dim() const {
    switch (kind_) {
      case FeatureKind::raw: return input_dim_;
      case FeatureKind::raw_with_bias: return input_dim_ + 1;
      case FeatureKind::state_action_pairs: return n_states_ * n_actions_;
      case FeatureKind::mlp_hidden: {
        const auto& w = net_->spec().widths;
        return w[w.size() - 2];
      }
    }
    return 0;
  }

  Mat apply(const Mat& xs) const {
    require_dims(xs.cols, input_dim_, "feature map input width");
    switch (kind_) {
      case FeatureKind::raw: return xs;
      case FeatureKind::raw_with_bias: {
        Mat f(xs.rows, input_dim_ + 1);
        for (std::size_t i = 0; i < xs.rows; ++i) {
          for (std::size_t j = 0; j < input_dim_; ++j) f(i, j) = xs(i, j);
          f(i, input_dim_) = 1.0;
        }
        return f;
      }
      case FeatureKind::state_action_pairs: {
        Mat f(xs.rows, n_states_ * n_actions_);
        for (std::size_t i = 0; i < xs.rows; ++i) {
          for (std::size_t s = 0; s < n_states_; ++s) {
            const double ps = xs(i, s);
            if (ps == 0.0) continue;
            for (std::size_t a = 0; a < n_actions_; ++a)
              f(i, s * n_actions_ + a) = ps * xs(i, n_states_ + a);
          }
        }
        return f;
      }
      case FeatureKind::mlp_hidden: return net_->hidden(*net_params_, xs);
    }
    return xs;
  }

  double flops(std::size_t n) const {
    if (kind_ == FeatureKind::mlp_hidden) return net_->forward_flops(n);
    return 0.0;
  }

  std::string name() const {
    switch (kind_) {
      case FeatureKind::raw: return "raw";
      case FeatureKind::raw_with_bias: return "raw_bias";
      case FeatureKind::state_action_pairs:
        return "pairs:" + std::to_string(n_states_) + ":" + std::to_string(n_actions_);
      case FeatureKind::mlp_hidden: return "mlp_hidden";
    }
    return "?";
  }

 private:
  FeatureMap(FeatureKind k, std::size_t in) : kind_(k), input_dim_(in) {}

  FeatureKind kind_;
  std::size_t input_dim_;
  std::size_t n_states_ = 0;
  std::size_t n_actions_ = 0;
  std::shared_ptr<const Mlp> net_;
  std::shared_ptr<const ParamVector> net_params_;
};

/// h(x) = W φ(x) with W of shape d_v x d₁, parameters stored row-major.
class LinearModel final : public Model {
 public:
  LinearModel(FeatureMap features, std::size_t out_dim)
      : features_(std::move(features)), out_dim_(out_dim) {
    require(out_dim_ >= 1, ErrorCode::precondition, "LinearModel output dim must be >= 1");
  }

  const FeatureMap& features() const { return features_; }
  std::size_t feature_dim() const { return features_.dim(); }

  std::size_t input_dim() const override { return features_.input_dim(); }
  std::size_t output_dim() const override { return out_dim_; }
  std::size_t num_params() const override { return out_dim_ * features_.dim(); }

  Mat weights(const ParamVector& params) const {
    require_dims(params.size(), num_params(), "linear model parameter count");
    return Mat(out_dim_, features_.dim(), params);
  }

  Mat forward(const ParamVector& params, const Mat& xs) const override {
    check_input(params, xs);
    return forward_features(params, features_.apply(xs));
  }

  Mat forward_features(const ParamVector& params, const Mat& phi) const {
    require_dims(phi.cols, features_.dim(), "linear model feature width");
    const std::size_t d1 = phi.cols;
    Mat out(phi.rows, out_dim_);
    for (std::size_t i = 0; i < phi.rows; ++i) {
      const double* fi = phi.data.data() + i * d1;
      for (std::size_t k = 0; k < out_dim_; ++k) {
        const double* wk = params.data() + k * d1;
        double s = 0.0;
        for (std::size_t j = 0; j < d1; ++j) s += wk[j] * fi[j];
        out(i, k) = s;
      }
    }
    return out;
  }

  /// Σ_i cot_i φ(x_i)ᵀ
  ParamVector vjp_params(const ParamVector& params, const Mat& xs,
                         const Mat& cotangents) const override {
    check_input(params, xs);
    require_dims(cotangents.rows, xs.rows, "linear cotangent rows");
    require_dims(cotangents.cols, out_dim_, "linear cotangent width");
    return matmul_tn(cotangents, features_.apply(xs)).data;
  }

  ParamVector init_params(Rng& rng) const override {
    const double bound = std::sqrt(6.0 / static_cast<double>(features_.dim() + out_dim_));
    ParamVector p(num_params());
    for (double& v : p) v = rng.uniform(-bound, bound);
    return p;
  }

  std::unique_ptr<Model> clone() const override { return std::make_unique<LinearModel>(*this); }

  std::string kind() const override { return "linear"; }
  std::string widths_string() const override {
    return std::to_string(features_.dim()) + "," + std::to_string(out_dim_);
  }
  std::string activations_string() const override { return features_.name(); }

  double forward_flops(std::size_t n) const override {
    return features_.flops(n) + 2.0 * static_cast<double>(n * out_dim_ * features_.dim());
  }
  double vjp_flops(std::size_t n) const override { return forward_flops(n); }

 private:
  FeatureMap features_;
  std::size_t out_dim_;
};

// ---------------------------------------------------------------------------
// Checkpoints:
//   FUNCBO-CKPT v1 <kind> <widths> <activations>
//   one decimal float per line, in parameter layout order.

inline void save_checkpoint(std::ostream& os, const Model& model, const ParamVector& params) {
  require_dims(params.size(), model.num_params(), "checkpoint parameter count");
  os << "FUNCBO-CKPT v1 " << model.kind() << ' ' << model.widths_string() << ' '
     << model.activations_string() << '\n';
  char buf[40];
  for (double v : params) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    os << buf << '\n';
  }
}

struct Checkpoint {
  std::string kind;
  std::string widths;
  std::string activations;
  ParamVector params;
};

inline Checkpoint read_checkpoint(std::istream& is) {
  std::string line;
  require(static_cast<bool>(std::getline(is, line)), ErrorCode::io, "checkpoint: missing header");
  std::istringstream hs(line);
  std::string magic, version;
  Checkpoint ck;
  hs >> magic >> version >> ck.kind >> ck.widths >> ck.activations;
  require(magic == "FUNCBO-CKPT" && version == "v1", ErrorCode::io,
          "checkpoint: bad header '" + line + "'");
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(line, &used);
    } catch (const std::exception&) {
      throw Error(ErrorCode::io, "checkpoint: bad value '" + line + "'");
    }
    require(used == line.size() && std::isfinite(v), ErrorCode::io,
            "checkpoint: bad value '" + line + "'");
    ck.params.push_back(v);
  }
  return ck;
}

/// Reads a checkpoint and checks it against `model`'s header fields.
inline ParamVector load_checkpoint(std::istream& is, const Model& model) {
  Checkpoint ck = read_checkpoint(is);
  require(ck.kind == model.kind() && ck.widths == model.widths_string() &&
              ck.activations == model.activations_string(),
          ErrorCode::io, "checkpoint does not match model " + model.kind() + " " +
                             model.widths_string() + " " + model.activations_string());
  require_dims(ck.params.size(), model.num_params(), "checkpoint parameter count");
  return std::move(ck.params);
}

}  // namespace funcbo
