#pragma once

// Enrollment fusion mechanisms: time-tiled concatenation for utterance
// embeddings, FiLM modulation, and the multi-head cross-attention block that
// aligns mixture frames (queries) with enrollment frames (keys/values).

#include <cmath>
#include <string>
#include <vector>

#include "tss/embedders.hpp"
#include "tss/nn.hpp"
#include "tss/tensor.hpp"

namespace tss::cond {

using tss::Index;

// Tiles an utterance embedding across all mixture frames and joins it
// featurewise: [Tm x N] ++ [D] -> [Tm x (N+D)].
template <typename Scalar>
Tensor<Scalar> concat_condition(const Tensor<Scalar>& encoder_out,
                                const Tensor<Scalar>& utt_embedding) {
  if (utt_embedding.rank() != 1)
    throw ContractError(
        "concat_condition: frame-level embeddings cannot be tiled; use the "
        "cross-attention conditioning instead");
  if (encoder_out.rank() != 2)
    throw ShapeError("concat_condition: encoder output must be [Tm x N], got " +
                     shape_string(encoder_out.shape()));
  Index Tm = encoder_out.rows(), D = utt_embedding.numel();
  Tensor<Scalar> tiled = add(Tensor<Scalar>::zeros({Tm, D}), utt_embedding);
  return concat(std::vector<Tensor<Scalar>>{encoder_out, tiled}, 1);
}

// y[t] = gamma (*) x[t] + beta. gamma/beta are either [B] (shared across
// frames) or [Tm x B] (per frame, as produced by the MCA film path).
template <typename Scalar>
Tensor<Scalar> film(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma,
                    const Tensor<Scalar>& beta) {
  if (x.rank() != 2)
    throw ShapeError("film: expected [Tm x B] input, got " +
                     shape_string(x.shape()));
  Index B = x.cols();
  auto check = [&](const Tensor<Scalar>& p, const char* what) {
    bool ok = (p.rank() == 1 && p.numel() == B) ||
              (p.rank() == 2 && p.rows() == x.rows() && p.cols() == B);
    if (!ok)
      throw ShapeError(std::string("film: ") + what + " shape " +
                       shape_string(p.shape()) + " does not match input " +
                       shape_string(x.shape()));
  };
  check(gamma, "gamma");
  check(beta, "beta");
  return add(mul(x, gamma), beta);
}

// Projects an embedding to per-site FiLM parameters. Zero-initialized so the
// modulation starts as the identity (gamma = 1 + raw, beta = raw).
template <typename Scalar>
class FilmGenerator {
 public:
  FilmGenerator() = default;
  explicit FilmGenerator(Index embed_dim, Index channels)
      : channels_(channels),
        proj_(Linear<Scalar>::zero_initialized(embed_dim, 2 * channels)) {}

  struct Params {
    Tensor<Scalar> gamma, beta;
  };

  Params generate(const Tensor<Scalar>& utt_embedding) const {
    Tensor<Scalar> raw = proj_.forward(
        reshape(utt_embedding, {1, utt_embedding.numel()}));
    Tensor<Scalar> g = reshape(cols(raw, 0, channels_), {channels_});
    Tensor<Scalar> b = reshape(cols(raw, channels_, channels_), {channels_});
    return {add_scalar(g, Scalar(1)), b};
  }

  void append_params(const std::string& prefix, ParamList<Scalar>& out) {
    proj_.append_params(prefix + ".proj", out);
  }

 private:
  Index channels_ = 0;
  Linear<Scalar> proj_;
};

// pe[t][2i] = sin(t / 10000^(2i/d)), pe[t][2i+1] = cos(t / 10000^(2i/d)).
template <typename Scalar>
Tensor<Scalar> sinusoidal_pe(Index T, Index d) {
  if (d % 2 != 0)
    throw ConfigError("sinusoidal_pe: dimension must be even, got " +
                      std::to_string(d));
  Tensor<Scalar> pe(Shape{T, d});
  for (Index t = 0; t < T; ++t)
    for (Index i = 0; i < d / 2; ++i) {
      double rate = std::pow(10000.0, 2.0 * static_cast<double>(i) /
                                          static_cast<double>(d));
      double arg = static_cast<double>(t) / rate;
      pe.values()[t * d + 2 * i] = static_cast<Scalar>(std::sin(arg));
      pe.values()[t * d + 2 * i + 1] = static_cast<Scalar>(std::cos(arg));
    }
  return pe;
}

enum class McaOutputMode { additive, film };

template <typename Scalar>
struct McaConfig {
  Index heads = 4;
  Index d_model = 256;
  Index query_dim = 256;  // mixture stream width (the bottleneck dim)
  Index kv_dim = 256;     // enrollment stream width (the adapter output)
  bool positional_encoding = true;

  Index head_dim() const { return d_model / heads; }
};

template <typename Scalar>
struct McaResult {
  Tensor<Scalar> additive;               // additive mode
  Tensor<Scalar> gamma, beta;            // film mode (gamma = 1 + raw)
  std::vector<Tensor<Scalar>> attention; // per head, [Tm x Te] row-stochastic
};

// Multi-head cross-attention per the frame-level conditioning design:
// sinusoidal positions are added to each stream, layer normalization runs
// before the Q/K/V transforms, attention is scaled dot-product over the
// enrollment frames, and the merged heads leave through one output map
// (additive) or two parallel maps (film scale/bias). Output maps start at
// zero so conditioning begins as a no-op.
template <typename Scalar>
class McaBlock {
 public:
  McaBlock() = default;
  McaBlock(const McaConfig<Scalar>& cfg, Rng& rng) : cfg_(cfg) {
    if (cfg.d_model % cfg.heads != 0)
      throw ConfigError("mca: d_model " + std::to_string(cfg.d_model) +
                        " not divisible by " + std::to_string(cfg.heads) +
                        " heads");
    q_norm_ = LayerNorm<Scalar>(cfg.query_dim);
    kv_norm_ = LayerNorm<Scalar>(cfg.kv_dim);
    wq_ = Linear<Scalar>(cfg.query_dim, cfg.d_model, rng);
    // a key bias shifts every logit in a softmax row equally and cancels
    wk_ = Linear<Scalar>(cfg.kv_dim, cfg.d_model, rng, /*bias=*/false);
    wv_ = Linear<Scalar>(cfg.kv_dim, cfg.d_model, rng);
    out_additive_ = Linear<Scalar>::zero_initialized(cfg.d_model, cfg.query_dim);
    out_gamma_ = Linear<Scalar>::zero_initialized(cfg.d_model, cfg.query_dim);
    out_beta_ = Linear<Scalar>::zero_initialized(cfg.d_model, cfg.query_dim);
  }

  const McaConfig<Scalar>& config() const { return cfg_; }

  McaResult<Scalar> forward(const Tensor<Scalar>& mixture_frames,
                            const Tensor<Scalar>& enroll_frames,
                            McaOutputMode mode) const {
    if (mixture_frames.rank() != 2 || mixture_frames.cols() != cfg_.query_dim)
      throw ShapeError("mca: mixture frames must be [Tm x " +
                       std::to_string(cfg_.query_dim) + "], got " +
                       shape_string(mixture_frames.shape()));
    if (enroll_frames.rank() != 2 || enroll_frames.cols() != cfg_.kv_dim)
      throw ShapeError("mca: enrollment frames must be [Te x " +
                       std::to_string(cfg_.kv_dim) + "], got " +
                       shape_string(enroll_frames.shape()));
    if (enroll_frames.rows() < 1)
      throw DataError("mca: empty enrollment (Te = 0)");

    Index Tm = mixture_frames.rows(), Te = enroll_frames.rows();
    Tensor<Scalar> q_in = mixture_frames;
    Tensor<Scalar> kv_in = enroll_frames;
    if (cfg_.positional_encoding) {
      q_in = add(q_in, sinusoidal_pe<Scalar>(Tm, cfg_.query_dim));
      kv_in = add(kv_in, sinusoidal_pe<Scalar>(Te, cfg_.kv_dim));
    }
    Tensor<Scalar> q = wq_.forward(q_norm_.forward(q_in));
    Tensor<Scalar> kv_normed = kv_norm_.forward(kv_in);
    Tensor<Scalar> k = wk_.forward(kv_normed);
    Tensor<Scalar> v = wv_.forward(kv_normed);

    Index hd = cfg_.head_dim();
    Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(hd));
    McaResult<Scalar> result;
    std::vector<Tensor<Scalar>> contexts;
    for (Index h = 0; h < cfg_.heads; ++h) {
      Tensor<Scalar> qh = cols(q, h * hd, hd);
      Tensor<Scalar> kh = cols(k, h * hd, hd);
      Tensor<Scalar> vh = cols(v, h * hd, hd);
      Tensor<Scalar> attn =
          softmax(mul_scalar(matmul(qh, transpose(kh)), scale));
      result.attention.push_back(attn);
      contexts.push_back(matmul(attn, vh));
    }
    Tensor<Scalar> merged = concat(contexts, 1);  // [Tm x d_model]
    if (mode == McaOutputMode::additive) {
      result.additive = out_additive_.forward(merged);
    } else {
      result.gamma = add_scalar(out_gamma_.forward(merged), Scalar(1));
      result.beta = out_beta_.forward(merged);
    }
    return result;
  }

  void append_params(const std::string& prefix, ParamList<Scalar>& out,
                     McaOutputMode mode) {
    q_norm_.append_params(prefix + ".q_norm", out);
    kv_norm_.append_params(prefix + ".kv_norm", out);
    wq_.append_params(prefix + ".wq", out);
    wk_.append_params(prefix + ".wk", out);
    wv_.append_params(prefix + ".wv", out);
    if (mode == McaOutputMode::additive) {
      out_additive_.append_params(prefix + ".out", out);
    } else {
      out_gamma_.append_params(prefix + ".out_gamma", out);
      out_beta_.append_params(prefix + ".out_beta", out);
    }
  }

 private:
  McaConfig<Scalar> cfg_;
  LayerNorm<Scalar> q_norm_, kv_norm_;
  Linear<Scalar> wq_, wk_, wv_;
  Linear<Scalar> out_additive_, out_gamma_, out_beta_;
};

}  // namespace tss::cond
