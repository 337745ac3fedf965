#pragma once

// Trainable building blocks on top of the tape. Modules own their parameter
// tensors (shared handles, so optimizers and checkpoints alias them) and
// expose them through append_params with checkpoint-path names.

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "tss/tensor.hpp"

namespace tss {

template <typename Scalar>
struct NamedParam {
  std::string name;
  Tensor<Scalar> tensor;
};

template <typename Scalar>
using ParamList = std::vector<NamedParam<Scalar>>;

template <typename Scalar>
void zero_grads(ParamList<Scalar>& params) {
  for (auto& p : params) p.tensor.zero_grad();
}

template <typename Scalar>
class Linear {
 public:
  Linear() = default;
  Linear(Index in_dim, Index out_dim, Rng& rng, bool bias = true)
      : in_(in_dim), out_(out_dim), has_bias_(bias) {
    Scalar bound = Scalar(1) / std::sqrt(static_cast<Scalar>(in_dim));
    weight_ = Tensor<Scalar>::random_uniform({out_dim, in_dim}, -bound, bound,
                                             rng, true);
    if (bias)
      bias_ = Tensor<Scalar>::random_uniform({out_dim}, -bound, bound, rng, true);
  }

  static Linear zero_initialized(Index in_dim, Index out_dim, bool bias = true) {
    Linear l;
    l.in_ = in_dim;
    l.out_ = out_dim;
    l.has_bias_ = bias;
    l.weight_ = Tensor<Scalar>::zeros({out_dim, in_dim}, true);
    if (bias) l.bias_ = Tensor<Scalar>::zeros({out_dim}, true);
    return l;
  }

  static Linear identity(Index dim) {
    Linear l;
    l.in_ = dim;
    l.out_ = dim;
    l.has_bias_ = true;
    typename Tensor<Scalar>::Mat eye =
        Tensor<Scalar>::Mat::Identity(dim, dim);
    l.weight_ = Tensor<Scalar>::from_matrix(eye, true);
    l.bias_ = Tensor<Scalar>::zeros({dim}, true);
    return l;
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& x) const {
    Tensor<Scalar> y = matmul(x, transpose(weight_));
    return has_bias_ ? add(y, bias_) : y;
  }

  Index in_dim() const { return in_; }
  Index out_dim() const { return out_; }
  Tensor<Scalar>& weight() { return weight_; }
  Tensor<Scalar>& bias() { return bias_; }

  void append_params(const std::string& prefix, ParamList<Scalar>& out) {
    out.push_back({prefix + ".weight", weight_});
    if (has_bias_) out.push_back({prefix + ".bias", bias_});
  }

 private:
  Index in_ = 0, out_ = 0;
  bool has_bias_ = true;
  Tensor<Scalar> weight_, bias_;
};

template <typename Scalar>
class Prelu {
 public:
  Prelu() : alpha_(Tensor<Scalar>::full({1}, Scalar(0.25), true)) {}
  explicit Prelu(Scalar slope)
      : alpha_(Tensor<Scalar>::full({1}, slope, true)) {}

  Tensor<Scalar> forward(const Tensor<Scalar>& x) const {
    return prelu(x, alpha_);
  }

  Tensor<Scalar>& alpha() { return alpha_; }

  void append_params(const std::string& prefix, ParamList<Scalar>& out) {
    out.push_back({prefix + ".alpha", alpha_});
  }

 private:
  Tensor<Scalar> alpha_;
};

template <typename Scalar>
class LayerNorm {
 public:
  LayerNorm() = default;
  explicit LayerNorm(Index dim)
      : gain_(Tensor<Scalar>::full({dim}, Scalar(1), true)),
        bias_(Tensor<Scalar>::zeros({dim}, true)) {}

  Tensor<Scalar> forward(const Tensor<Scalar>& x) const {
    return layer_norm(x, gain_, bias_);
  }

  void append_params(const std::string& prefix, ParamList<Scalar>& out) {
    out.push_back({prefix + ".gain", gain_});
    out.push_back({prefix + ".bias", bias_});
  }

 private:
  Tensor<Scalar> gain_, bias_;
};

// 1-D batch normalization over the batch axis of [B x D] inputs. Training
// batches update exponential running statistics; evaluation requires them.
template <typename Scalar>
class BatchNorm1d {
 public:
  BatchNorm1d() = default;
  explicit BatchNorm1d(Index dim, Scalar momentum = Scalar(0.1))
      : dim_(dim),
        momentum_(momentum),
        gamma_(Tensor<Scalar>::full({dim}, Scalar(1), true)),
        beta_(Tensor<Scalar>::zeros({dim}, true)),
        running_mean_(Tensor<Scalar>::zeros({1, dim})),
        running_var_(Tensor<Scalar>::full({1, dim}, Scalar(1))) {}

  Tensor<Scalar> forward(const Tensor<Scalar>& x, bool training) {
    if (x.rank() != 2 || x.cols() != dim_)
      throw ShapeError("batch_norm_1d: expected [batch x " +
                       std::to_string(dim_) + "], got " +
                       shape_string(x.shape()));
    if (training) {
      Tensor<Scalar> mu = mean_axis(x, 0, true);
      Tensor<Scalar> xc = sub(x, mu);
      Tensor<Scalar> var = mean_axis(mul(xc, xc), 0, true);
      {
        GradPause<Scalar> pause;
        running_mean_.values() = (Scalar(1) - momentum_) * running_mean_.values() +
                                 momentum_ * mu.values();
        running_var_.values() = (Scalar(1) - momentum_) * running_var_.values() +
                                momentum_ * var.values();
        seen_batches_++;
      }
      return add(mul(div(xc, sqrt(add_scalar(var, eps_))), gamma_), beta_);
    }
    if (seen_batches_ == 0)
      throw StateError(
          "batch_norm_1d: eval-mode use before any training batch "
          "accumulated running statistics");
    Tensor<Scalar> xc = sub(x, running_mean_);
    return add(mul(div(xc, sqrt(add_scalar(running_var_, eps_))), gamma_),
               beta_);
  }

  void append_params(const std::string& prefix, ParamList<Scalar>& out) {
    out.push_back({prefix + ".gamma", gamma_});
    out.push_back({prefix + ".beta", beta_});
  }

  // Running statistics travel with checkpoints but never receive gradient.
  void append_state(const std::string& prefix, ParamList<Scalar>& out) {
    out.push_back({prefix + ".running_mean", running_mean_});
    out.push_back({prefix + ".running_var", running_var_});
  }

  long seen_batches() const { return seen_batches_; }
  void mark_initialized() { seen_batches_ = std::max(seen_batches_, 1L); }

 private:
  Index dim_ = 0;
  Scalar momentum_ = Scalar(0.1);
  Scalar eps_ = Scalar(1e-5);
  long seen_batches_ = 0;
  Tensor<Scalar> gamma_, beta_, running_mean_, running_var_;
};

// Stacked unidirectional LSTM. Weights follow the i,f,g,o gate layout of
// lstm_cell; layer l maps (input_dim if l==0 else hidden) -> hidden.
template <typename Scalar>
class LstmStack {
 public:
  LstmStack() = default;
  LstmStack(Index input_dim, Index hidden, Index layers, Rng& rng)
      : input_dim_(input_dim), hidden_(hidden) {
    for (Index l = 0; l < layers; ++l) {
      Index in = l == 0 ? input_dim : hidden;
      Scalar bound = Scalar(1) / std::sqrt(static_cast<Scalar>(hidden));
      layers_.push_back(LayerWeights{
          Tensor<Scalar>::random_uniform({4 * hidden, in}, -bound, bound, rng, true),
          Tensor<Scalar>::random_uniform({4 * hidden, hidden}, -bound, bound, rng, true),
          Tensor<Scalar>::random_uniform({4 * hidden}, -bound, bound, rng, true),
          Tensor<Scalar>::random_uniform({4 * hidden}, -bound, bound, rng, true)});
    }
  }

  Index hidden() const { return hidden_; }
  Index input_dim() const { return input_dim_; }
  Index num_layers() const { return static_cast<Index>(layers_.size()); }

  std::vector<LstmState<Scalar>> initial_state(Index batch) const {
    std::vector<LstmState<Scalar>> st;
    for (size_t l = 0; l < layers_.size(); ++l)
      st.push_back({Tensor<Scalar>::zeros({batch, hidden_}),
                    Tensor<Scalar>::zeros({batch, hidden_})});
    return st;
  }

  // Advances every layer one step; returns the top layer's hidden output.
  Tensor<Scalar> step(const Tensor<Scalar>& x,
                      std::vector<LstmState<Scalar>>& state) const {
    Tensor<Scalar> inp = x;
    for (size_t l = 0; l < layers_.size(); ++l) {
      const auto& w = layers_[l];
      state[l] = lstm_cell(inp, state[l], w.w_ih, w.w_hh, w.b_ih, w.b_hh);
      inp = state[l].h;
    }
    return inp;
  }

  // Runs a [T x D] sequence (batch of one) and returns all top hidden states
  // as [T x H].
  Tensor<Scalar> forward_sequence(const Tensor<Scalar>& x) const {
    if (x.rank() != 2 || x.cols() != input_dim_)
      throw ShapeError("lstm_stack: expected [T x " +
                       std::to_string(input_dim_) + "], got " +
                       shape_string(x.shape()));
    auto state = initial_state(1);
    std::vector<Tensor<Scalar>> outs;
    outs.reserve(x.rows());
    for (Index t = 0; t < x.rows(); ++t)
      outs.push_back(step(rows(x, t, 1), state));
    return concat(outs, 0);
  }

  void append_params(const std::string& prefix, ParamList<Scalar>& out) {
    for (size_t l = 0; l < layers_.size(); ++l) {
      std::string p = prefix + "." + std::to_string(l);
      out.push_back({p + ".w_ih", layers_[l].w_ih});
      out.push_back({p + ".w_hh", layers_[l].w_hh});
      out.push_back({p + ".b_ih", layers_[l].b_ih});
      out.push_back({p + ".b_hh", layers_[l].b_hh});
    }
  }

 private:
  struct LayerWeights {
    Tensor<Scalar> w_ih, w_hh, b_ih, b_hh;
  };
  Index input_dim_ = 0, hidden_ = 0;
  std::vector<LayerWeights> layers_;
};

// ---------------------------------------------------------------------------
// Optimization

template <typename Scalar>
struct AdamConfig {
  Scalar beta1 = Scalar(0.9);
  Scalar beta2 = Scalar(0.999);
  Scalar eps = Scalar(1e-8);
};

template <typename Scalar>
class Adam {
 public:
  Adam() = default;
  explicit Adam(ParamList<Scalar> params, AdamConfig<Scalar> cfg = {})
      : params_(std::move(params)), cfg_(cfg) {
    for (auto& p : params_) {
      m_.push_back(TensorStorage<Scalar>::Flat::Zero(p.tensor.numel()));
      v_.push_back(TensorStorage<Scalar>::Flat::Zero(p.tensor.numel()));
    }
  }

  const ParamList<Scalar>& params() const { return params_; }

  // Scales all gradients so the global L2 norm does not exceed max_norm.
  Scalar clip_global_norm(Scalar max_norm) {
    Scalar sq = 0;
    for (auto& p : params_)
      if (p.tensor.has_grad()) sq += p.tensor.grad().matrix().squaredNorm();
    Scalar norm = std::sqrt(sq);
    if (norm > max_norm && norm > Scalar(0)) {
      Scalar scale = max_norm / norm;
      for (auto& p : params_)
        if (p.tensor.has_grad()) p.tensor.grad() *= scale;
    }
    return norm;
  }

  void step(Scalar lr) {
    ++t_;
    Scalar bc1 = Scalar(1) - std::pow(cfg_.beta1, static_cast<Scalar>(t_));
    Scalar bc2 = Scalar(1) - std::pow(cfg_.beta2, static_cast<Scalar>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i].tensor;
      const auto& g = p.grad();
      m_[i] = cfg_.beta1 * m_[i] + (Scalar(1) - cfg_.beta1) * g;
      v_[i] = cfg_.beta2 * v_[i] + (Scalar(1) - cfg_.beta2) * g * g;
      p.values() -=
          lr * (m_[i] / bc1) / ((v_[i] / bc2).sqrt() + cfg_.eps);
    }
  }

  void zero_grad() { zero_grads(params_); }

 private:
  ParamList<Scalar> params_;
  AdamConfig<Scalar> cfg_;
  std::vector<typename TensorStorage<Scalar>::Flat> m_, v_;
  long t_ = 0;
};

// Cosine decay from peak at iteration 0 to zero at `total`.
inline double cosine_lr(double peak, long iteration, long total) {
  if (total <= 0) return peak;
  double frac = std::min(1.0, std::max(0.0, static_cast<double>(iteration) /
                                                static_cast<double>(total)));
  return peak * 0.5 * (1.0 + std::cos(3.14159265358979323846 * frac));
}

}  // namespace tss
