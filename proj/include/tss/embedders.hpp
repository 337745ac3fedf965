#pragma once

// Enrollment embedding sources: raw FBANK statistics, a trainable LSTM
// d-vector (speaker classification objective, cross-entropy or AAM-softmax),
// and a learnable weighted sum over externally supplied multi-layer frame
// embeddings. The BN+MLP adapter that maps any of these into the downstream
// conditioning space lives here too.

#include <Eigen/Dense>

#include <cmath>
#include <string>
#include <vector>

#include "tss/dsp.hpp"
#include "tss/nn.hpp"
#include "tss/tensor.hpp"

namespace tss::embed {

using tss::Index;

enum class Level { utterance, frame };
enum class Source { fbank, dvector, layered };

inline const char* level_name(Level l) {
  return l == Level::utterance ? "utterance" : "frame";
}
inline const char* source_name(Source s) {
  switch (s) {
    case Source::fbank: return "fbank";
    case Source::dvector: return "dvector";
    default: return "layered";
  }
}

// A conditioning signal: rank-1 [D] for utterance level, rank-2 [Te x D] for
// frame level.
template <typename Scalar>
struct EnrollmentEmbedding {
  Level level = Level::utterance;
  Source source = Source::fbank;
  bool normalized = false;
  Tensor<Scalar> values;

  Index dim() const {
    return level == Level::utterance ? values.numel() : values.cols();
  }
  Index frames() const {
    return level == Level::utterance ? 1 : values.rows();
  }
};

// ---------------------------------------------------------------------------
// FBANK embedder

// Utterance level: concatenated per-band temporal mean and standard deviation
// of the log-mel features (160 dims at the default 80 bands). Frame level:
// the raw [Te x 80] log-mel rows.
template <typename Scalar>
EnrollmentEmbedding<Scalar> fbank_embed(
    const Eigen::ArrayXd& signal, Level level,
    const dsp::FbankConfig& cfg = {}, bool feature_norm = false) {
  dsp::Matrix<double> feats = dsp::logmel<double>(signal, cfg);
  if (feature_norm) feats = dsp::feature_normalize<double>(feats);
  EnrollmentEmbedding<Scalar> out;
  out.level = level;
  out.source = Source::fbank;
  if (level == Level::utterance) {
    if (feats.rows() < 2)
      throw DataError("fbank_embed: utterance pooling needs at least 2 frames");
    out.values = Tensor<Scalar>::from_vector(dsp::pool_mean_std<double>(feats));
  } else {
    out.values = Tensor<Scalar>::from_matrix(feats);
  }
  return out;
}

// ---------------------------------------------------------------------------
// d-vector

enum class Objective { cross_entropy, aam_softmax };

template <typename Scalar>
struct DVectorConfig {
  Index feature_dim = 80;
  Index hidden = 64;    // paper scale: 768
  Index layers = 3;
  Index embed_dim = 256;
  Index n_speakers = 0;  // classifier head, training only
  bool fn_enabled = false;
  Objective objective = Objective::cross_entropy;
  Scalar aam_margin = Scalar(0.2);
  Scalar aam_scale = Scalar(30);
};

template <typename Scalar>
class DVector {
 public:
  DVector() = default;
  DVector(const DVectorConfig<Scalar>& cfg, Rng& rng)
      : cfg_(cfg),
        lstm_(cfg.feature_dim, cfg.hidden, cfg.layers, rng),
        projection_(cfg.hidden, cfg.embed_dim, rng),
        classifier_(cfg.embed_dim, std::max<Index>(cfg.n_speakers, 1), rng) {}

  const DVectorConfig<Scalar>& config() const { return cfg_; }

  // Embedding path; the classifier never participates here.
  // Utterance level: L2-normalized projection of the final hidden state.
  // Frame level: projected hidden states of every step, each L2-normalized
  // (row Te-1 therefore equals the utterance output).
  EnrollmentEmbedding<Scalar> forward(const Tensor<Scalar>& features,
                                      Level level) const {
    Tensor<Scalar> x = prepared(features);
    EnrollmentEmbedding<Scalar> out;
    out.level = level;
    out.source = Source::dvector;
    out.normalized = true;
    Tensor<Scalar> states = lstm_.forward_sequence(x);  // [T x H]
    if (level == Level::utterance) {
      Tensor<Scalar> last = rows(states, states.rows() - 1, 1);
      Tensor<Scalar> emb = l2_normalize_rows(projection_.forward(last));
      out.values = reshape(emb, {cfg_.embed_dim});
    } else {
      out.values = l2_normalize_rows(projection_.forward(states));
    }
    return out;
  }

  // Training logits for a batch of final-state embeddings [B x embed_dim].
  // Plain objective: affine classifier logits. AAM: cosine logits with the
  // target logit cos(theta) replaced by cos(theta + m), everything scaled by s.
  Tensor<Scalar> training_logits(const Tensor<Scalar>& embeddings,
                                 const std::vector<Index>& targets) const {
    if (cfg_.objective == Objective::cross_entropy)
      return classifier_.forward(embeddings);
    Tensor<Scalar> e = l2_normalize_rows(embeddings);
    Tensor<Scalar> w = l2_normalize_rows(classifier_weight());
    Tensor<Scalar> cos = clamp(matmul(e, transpose(w)), Scalar(-1 + 1e-7),
                               Scalar(1 - 1e-7));
    Scalar cm = std::cos(cfg_.aam_margin), sm = std::sin(cfg_.aam_margin);
    Tensor<Scalar> sin =
        sqrt(add_scalar(neg(mul(cos, cos)), Scalar(1) + Scalar(1e-12)));
    Tensor<Scalar> shifted = sub(mul_scalar(cos, cm), mul_scalar(sin, sm));
    Tensor<Scalar> onehot = Tensor<Scalar>::zeros({cos.rows(), cos.cols()});
    for (Index i = 0; i < cos.rows(); ++i)
      onehot.values()[i * cos.cols() + targets[static_cast<size_t>(i)]] = 1;
    Tensor<Scalar> logits = add(cos, mul(onehot, sub(shifted, cos)));
    return mul_scalar(logits, cfg_.aam_scale);
  }

  // Batched last-state embeddings for training. All utterances in the batch
  // must share the same frame count; per-step inputs are stacked to [B x 80].
  Tensor<Scalar> batch_embeddings(
      const std::vector<dsp::Matrix<double>>& features_batch) const {
    Index B = static_cast<Index>(features_batch.size());
    if (B < 1) throw ContractError("d-vector: empty batch");
    Index T = features_batch[0].rows();
    for (const auto& f : features_batch)
      if (f.rows() != T || f.cols() != cfg_.feature_dim)
        throw ShapeError("d-vector batch: expected uniform [T x " +
                         std::to_string(cfg_.feature_dim) + "] features");
    std::vector<dsp::Matrix<double>> prep;
    prep.reserve(static_cast<size_t>(B));
    for (const auto& f : features_batch)
      prep.push_back(cfg_.fn_enabled ? dsp::feature_normalize<double>(f) : f);
    auto state = lstm_.initial_state(B);
    Tensor<Scalar> top;
    for (Index t = 0; t < T; ++t) {
      Tensor<Scalar> xt(Shape{B, cfg_.feature_dim});
      for (Index b = 0; b < B; ++b)
        for (Index d = 0; d < cfg_.feature_dim; ++d)
          xt.values()[b * cfg_.feature_dim + d] =
              static_cast<Scalar>(prep[static_cast<size_t>(b)](t, d));
      top = lstm_.step(xt, state);
    }
    return l2_normalize_rows(projection_.forward(top));
  }

  void append_params(const std::string& prefix, ParamList<Scalar>& out) {
    lstm_.append_params(prefix + ".lstm", out);
    projection_.append_params(prefix + ".projection", out);
    classifier_.append_params(prefix + ".classifier", out);
  }

  // Embedding-path parameters only (what downstream fine-tuning optimizes).
  void append_embedding_params(const std::string& prefix,
                               ParamList<Scalar>& out) {
    lstm_.append_params(prefix + ".lstm", out);
    projection_.append_params(prefix + ".projection", out);
  }

 private:
  Tensor<Scalar> prepared(const Tensor<Scalar>& features) const {
    if (features.rank() != 2 || features.cols() != cfg_.feature_dim)
      throw ConfigError("d-vector: expected [T x " +
                        std::to_string(cfg_.feature_dim) + "] features, got " +
                        shape_string(features.shape()));
    if (!cfg_.fn_enabled) return features;
    return sub(features, mean_axis(features, 0, true));
  }

  const Tensor<Scalar>& classifier_weight() const {
    return const_cast<Linear<Scalar>&>(classifier_).weight();
  }

  DVectorConfig<Scalar> cfg_;
  LstmStack<Scalar> lstm_;
  Linear<Scalar> projection_;
  Linear<Scalar> classifier_;
};

// One optimizer update on a batch of (features, speaker) pairs; returns the
// loss value. Utterance-level pre-training: the last time step feeds the
// classification loss.
template <typename Scalar>
Scalar dvector_train_step(DVector<Scalar>& model,
                          const std::vector<dsp::Matrix<double>>& features,
                          const std::vector<Index>& speaker_ids,
                          Adam<Scalar>& opt, Scalar lr, Scalar grad_clip = 5) {
  if (features.empty() || features.size() != speaker_ids.size())
    throw ContractError("dvector_train_step: batch of (features, speaker)");
  for (Index id : speaker_ids)
    if (id < 0 || id >= model.config().n_speakers)
      throw ContractError("dvector_train_step: speaker id out of range");
  opt.zero_grad();
  Scalar loss_value;
  {
    Tape<Scalar> tape;
    Tensor<Scalar> emb = model.batch_embeddings(features);
    Tensor<Scalar> logits = model.training_logits(emb, speaker_ids);
    Tensor<Scalar> loss = cross_entropy(logits, speaker_ids);
    loss_value = loss.item();
    if (!std::isfinite(static_cast<double>(loss_value)))
      throw TrainingError("dvector_train_step: non-finite loss (batch of " +
                          std::to_string(features.size()) + ", first speaker " +
                          std::to_string(speaker_ids[0]) + ")");
    tape.backward(loss);
  }
  opt.clip_global_norm(grad_clip);
  opt.step(lr);
  return loss_value;
}

// ---------------------------------------------------------------------------
// Layered frame-embedding source (externally computed multi-layer features
// merged by a learnable weighted sum)

template <typename Scalar>
struct LayeredFrameSource {
  // layers[l] is [Te x D]; all layers share one shape.
  std::vector<dsp::Matrix<double>> layers;
  Tensor<Scalar> layer_logits;  // trainable [L]

  static LayeredFrameSource with_uniform_logits(
      std::vector<dsp::Matrix<double>> layer_data) {
    LayeredFrameSource src;
    src.layer_logits = Tensor<Scalar>::zeros(
        {static_cast<Index>(layer_data.size())}, true);
    src.layers = std::move(layer_data);
    return src;
  }
};

template <typename Scalar>
void validate_layers(const std::vector<dsp::Matrix<double>>& layers) {
  if (layers.empty()) throw DataError("layered source: no layers");
  for (const auto& l : layers)
    if (l.rows() != layers[0].rows() || l.cols() != layers[0].cols())
      throw DataError("layered source: ragged layer shapes");
}

// Softmax(layer_logits)-weighted sum. Utterance level first averages each
// layer over time; frame level mixes layers per frame. The logits stay in the
// graph so downstream training can learn them.
template <typename Scalar>
EnrollmentEmbedding<Scalar> layered_aggregate(const LayeredFrameSource<Scalar>& src,
                                              Level level) {
  validate_layers<Scalar>(src.layers);
  Index L = static_cast<Index>(src.layers.size());
  if (src.layer_logits.numel() != L)
    throw ShapeError("layered_aggregate: " + std::to_string(L) +
                     " layers but logits " +
                     shape_string(src.layer_logits.shape()));
  Index D = src.layers[0].cols();
  Tensor<Scalar> w = softmax(src.layer_logits);  // [L]
  EnrollmentEmbedding<Scalar> out;
  out.level = level;
  out.source = Source::layered;
  if (level == Level::utterance) {
    dsp::Matrix<double> means(L, D);
    for (Index l = 0; l < L; ++l)
      means.row(l) = src.layers[static_cast<size_t>(l)].colwise().mean();
    Tensor<Scalar> m = Tensor<Scalar>::from_matrix(means);
    out.values = reshape(matmul(reshape(w, {1, L}), m), {D});
  } else {
    Tensor<Scalar> w2 = reshape(w, {L, 1});
    Tensor<Scalar> acc;
    for (Index l = 0; l < L; ++l) {
      Tensor<Scalar> wl = reshape(rows(w2, l, 1), {1});
      Tensor<Scalar> layer =
          Tensor<Scalar>::from_matrix(src.layers[static_cast<size_t>(l)]);
      Tensor<Scalar> term = mul(layer, wl);
      acc = l == 0 ? term : add(acc, term);
    }
    out.values = acc;
  }
  return out;
}

// ---------------------------------------------------------------------------
// BN + MLP adapter into the downstream conditioning space

template <typename Scalar>
class Adapter {
 public:
  Adapter() = default;
  Adapter(Index in_dim, Index out_dim, bool bn_enabled, Rng& rng)
      : in_(in_dim), out_(out_dim), bn_enabled_(bn_enabled) {
    if (bn_enabled) bn_ = BatchNorm1d<Scalar>(in_dim);
    fc1_ = Linear<Scalar>(in_dim, out_dim, rng);
    fc2_ = Linear<Scalar>(out_dim, out_dim, rng);
  }

  // Square pass-through configuration used by tests: identity FC maps,
  // PReLU slope 1, BN off.
  static Adapter identity(Index dim) {
    Adapter a;
    a.in_ = a.out_ = dim;
    a.bn_enabled_ = false;
    a.fc1_ = Linear<Scalar>::identity(dim);
    a.fc2_ = Linear<Scalar>::identity(dim);
    a.act1_ = Prelu<Scalar>(Scalar(1));
    a.act2_ = Prelu<Scalar>(Scalar(1));
    return a;
  }

  Index in_dim() const { return in_; }
  Index out_dim() const { return out_; }

  // x is [rows x in_dim]: one row per utterance embedding or per enrollment
  // frame. BN uses batch statistics in training mode and running statistics
  // otherwise.
  Tensor<Scalar> forward(const Tensor<Scalar>& x, bool training) {
    if (x.rank() != 2 || x.cols() != in_)
      throw ShapeError("adapter: expected [rows x " + std::to_string(in_) +
                       "], got " + shape_string(x.shape()));
    Tensor<Scalar> h = bn_enabled_ ? bn_.forward(x, training) : x;
    h = act1_.forward(fc1_.forward(h));
    return act2_.forward(fc2_.forward(h));
  }

  // Embedding-shaped convenience: [D] -> [out], [Te x D] -> [Te x out].
  Tensor<Scalar> apply(const EnrollmentEmbedding<Scalar>& emb, bool training) {
    if (emb.level == Level::utterance) {
      Tensor<Scalar> row = reshape(emb.values, {1, emb.values.numel()});
      return reshape(forward(row, training), {out_});
    }
    return forward(emb.values, training);
  }

  void append_params(const std::string& prefix, ParamList<Scalar>& out) {
    if (bn_enabled_) bn_.append_params(prefix + ".bn", out);
    fc1_.append_params(prefix + ".fc1", out);
    act1_.append_params(prefix + ".prelu1", out);
    fc2_.append_params(prefix + ".fc2", out);
    act2_.append_params(prefix + ".prelu2", out);
  }

  void append_state(const std::string& prefix, ParamList<Scalar>& out) {
    if (bn_enabled_) bn_.append_state(prefix + ".bn", out);
  }

  BatchNorm1d<Scalar>& bn() { return bn_; }
  bool bn_enabled() const { return bn_enabled_; }

 private:
  Index in_ = 0, out_ = 0;
  bool bn_enabled_ = false;
  BatchNorm1d<Scalar> bn_;
  Linear<Scalar> fc1_, fc2_;
  Prelu<Scalar> act1_{Scalar(0.25)}, act2_{Scalar(0.25)};
};

// ---------------------------------------------------------------------------

inline double cosine_score(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  if (a.size() != b.size())
    throw MetricError("cosine_score: dimension mismatch " +
                      std::to_string(a.size()) + " vs " +
                      std::to_string(b.size()));
  double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0)
    throw MetricError("cosine_score: zero vector has no direction");
  return a.dot(b) / (na * nb);
}

}  // namespace tss::embed
