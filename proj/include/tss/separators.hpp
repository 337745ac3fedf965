#pragma once

// Waveform encoder-separator-decoder models in two families: an LSTM
// separator with direct latent regression (E3Net-style) and a dilated
// temporal-convolution separator with a sigmoid latent mask
// (Conv-TasNet-style). Conditioning is injected per the configured mode:
// utterance embeddings by encoder-output concatenation or FiLM, frame
// embeddings by cross-attention after the bottleneck. The SI-SNR objective
// and the training loop live here as well.

#include <Eigen/Dense>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "tss/checkpoint.hpp"
#include "tss/conditioning.hpp"
#include "tss/embedders.hpp"
#include "tss/nn.hpp"
#include "tss/tensor.hpp"

namespace tss::sep {

using tss::Index;

enum class Family { e3net, convtasnet };
enum class Conditioning { concat, film_utt, mca_additive, mca_film };

inline const char* family_name(Family f) {
  return f == Family::e3net ? "e3net" : "convtasnet";
}
inline const char* conditioning_name(Conditioning c) {
  switch (c) {
    case Conditioning::concat: return "concat";
    case Conditioning::film_utt: return "film_utt";
    case Conditioning::mca_additive: return "mca_additive";
    default: return "mca_film";
  }
}

struct SeparatorConfig {
  Family family = Family::e3net;
  Index frame_ms = 20;       // L
  Index hop_ms = 10;         // S
  Index encoder_dim = 2048;  // N
  Index bottleneck_dim = 256;  // B
  Index repeats = 4;           // R: LSTM layers or TCN repeats
  Index blocks_per_repeat = 8; // X (convtasnet only)
  Index tcn_hidden = 0;        // 0 -> 2*B
  Index tcn_kernel = 3;
  Conditioning conditioning = Conditioning::concat;
  embed::Source embedding_source = embed::Source::fbank;
  bool fine_tune_upstream = false;
  Index cond_dim = 256;       // adapter output width
  Index mca_heads = 4;
  Index mca_d_model = 256;
  bool adapter_bn = false;
  double lstm_width = 1.0;    // E3Net width multiplier (no-attention control)

  Index encoder_kernel() const { return frame_ms * 16; }  // 16 kHz
  Index encoder_stride() const { return hop_ms * 16; }
  Index lstm_hidden() const {
    return static_cast<Index>(std::lround(lstm_width * bottleneck_dim));
  }
  Index tcn_hidden_dim() const {
    return tcn_hidden > 0 ? tcn_hidden : 2 * bottleneck_dim;
  }

  bool wants_frame_level() const {
    return conditioning == Conditioning::mca_additive ||
           conditioning == Conditioning::mca_film;
  }
  embed::Level required_level() const {
    return wants_frame_level() ? embed::Level::frame : embed::Level::utterance;
  }

  static SeparatorConfig e3net_paper() {
    SeparatorConfig c;
    c.family = Family::e3net;
    c.frame_ms = 20;
    c.hop_ms = 10;
    c.encoder_dim = 2048;
    c.bottleneck_dim = 256;
    c.repeats = 4;
    return c;
  }
  static SeparatorConfig convtasnet_paper() {
    SeparatorConfig c;
    c.family = Family::convtasnet;
    c.frame_ms = 10;
    c.hop_ms = 5;
    c.encoder_dim = 1024;
    c.bottleneck_dim = 256;
    c.repeats = 2;
    c.blocks_per_repeat = 8;
    c.conditioning = Conditioning::film_utt;
    return c;
  }
  static SeparatorConfig e3net_desk() {
    SeparatorConfig c = e3net_paper();
    c.encoder_dim = 64;
    c.bottleneck_dim = 32;
    c.repeats = 2;
    return c;
  }
  static SeparatorConfig convtasnet_desk() {
    SeparatorConfig c = convtasnet_paper();
    c.encoder_dim = 64;
    c.bottleneck_dim = 32;
    c.repeats = 2;
    c.blocks_per_repeat = 4;
    return c;
  }
};

// ---------------------------------------------------------------------------
// SI-SNR

// Scale-invariant SNR in dB. Both signals are zero-meaned; the reference is
// scaled to the estimate's projection (alpha = <est,ref>/|ref|^2) and the
// ratio |alpha*ref|^2 / |est - alpha*ref|^2 is reported, clamped to +/-60 dB.
// The result is rounded to nano-dB resolution: sub-nano-dB differences are
// below the metric's numerical floor, which also makes its scale-invariance
// identities hold as computed-value equalities.
inline double si_snr(const Eigen::ArrayXd& est, const Eigen::ArrayXd& ref) {
  if (est.size() != ref.size())
    throw MetricError("si_snr: length mismatch " + std::to_string(est.size()) +
                      " vs " + std::to_string(ref.size()));
  if (est.size() == 0) throw MetricError("si_snr: empty signals");
  Eigen::ArrayXd e = est - est.mean();
  Eigen::ArrayXd r = ref - ref.mean();
  double rr = (r * r).sum();
  if (rr == 0.0) throw MetricError("si_snr: reference is identically zero");
  double p = (e * r).sum();
  double ee = (e * e).sum();
  double target_power = p * p / rr;       // |alpha * ref|^2
  double error_power = ee - target_power;  // |est - alpha*ref|^2
  double db;
  if (target_power <= 0.0) {
    db = -60.0;
  } else if (error_power <= 0.0) {
    db = 60.0;
  } else {
    db = 10.0 * std::log10(target_power / error_power);
    db = std::min(60.0, std::max(-60.0, db));
  }
  return std::round(db * 1e9) / 1e9;
}

// Differentiable negative SI-SNR training objective (unquantized; a small
// epsilon guards the logs near perfect reconstruction).
template <typename Scalar>
Tensor<Scalar> si_snr_loss(const Tensor<Scalar>& est, const Eigen::ArrayXd& ref,
                           Scalar eps = Scalar(1e-12)) {
  if (est.rank() != 1 || est.numel() != ref.size())
    throw MetricError("si_snr_loss: estimate " + shape_string(est.shape()) +
                      " vs reference length " + std::to_string(ref.size()));
  Eigen::ArrayXd r = ref - ref.mean();
  double rr = (r * r).sum();
  if (rr == 0.0) throw MetricError("si_snr_loss: reference is identically zero");
  Tensor<Scalar> rt = Tensor<Scalar>::from_vector(r.matrix());
  Tensor<Scalar> e = sub(est, mean(est));
  Tensor<Scalar> proj = mul_scalar(sum(mul(e, rt)), Scalar(1.0 / rr));  // alpha
  Tensor<Scalar> target_power = mul_scalar(mul(proj, proj), static_cast<Scalar>(rr));
  Tensor<Scalar> err = sub(e, mul(rt, proj));
  Tensor<Scalar> error_power = sum(mul(err, err));
  Scalar k = Scalar(10.0 / std::log(10.0));
  return mul_scalar(sub(log(add_scalar(error_power, eps)),
                        log(add_scalar(target_power, eps))),
                    k);
}

// ---------------------------------------------------------------------------
// Separator model

template <typename Scalar>
class TargetSeparator {
 public:
  TargetSeparator() = default;
  TargetSeparator(const SeparatorConfig& cfg, Index embedding_dim, Rng& rng)
      : cfg_(cfg) {
    Index K = cfg.encoder_kernel(), N = cfg.encoder_dim, B = cfg.bottleneck_dim;
    Scalar bound = Scalar(1) / std::sqrt(static_cast<Scalar>(K));
    encoder_ = Tensor<Scalar>::random_uniform({N, K}, -bound, bound, rng, true);
    decoder_ = Tensor<Scalar>::random_uniform({N, K}, -bound, bound, rng, true);
    enc_norm_ = LayerNorm<Scalar>(N);
    adapter_ = embed::Adapter<Scalar>(embedding_dim, cfg.cond_dim,
                                      cfg.adapter_bn, rng);
    Index bottleneck_in =
        cfg.conditioning == Conditioning::concat ? N + cfg.cond_dim : N;
    bottleneck_ = Linear<Scalar>(bottleneck_in, B, rng);

    if (cfg.conditioning == Conditioning::film_utt) {
      Index sites = cfg.family == Family::convtasnet
                        ? cfg.repeats * cfg.blocks_per_repeat
                        : 1;
      for (Index i = 0; i < sites; ++i)
        film_gens_.emplace_back(cfg.cond_dim, B);
    }
    if (cfg.wants_frame_level()) {
      cond::McaConfig<Scalar> mc;
      mc.heads = cfg.mca_heads;
      mc.d_model = cfg.mca_d_model;
      mc.query_dim = B;
      mc.kv_dim = cfg.cond_dim;
      mca_ = cond::McaBlock<Scalar>(mc, rng);
    }

    if (cfg.family == Family::e3net) {
      lstm_ = LstmStack<Scalar>(B, cfg.lstm_hidden(), cfg.repeats, rng);
      head_ = Linear<Scalar>(cfg.lstm_hidden(), N, rng);
    } else {
      Index H = cfg.tcn_hidden_dim();
      for (Index r = 0; r < cfg.repeats; ++r)
        for (Index x = 0; x < cfg.blocks_per_repeat; ++x) {
          TcnBlock blk;
          blk.in1x1 = Linear<Scalar>(B, H, rng);
          blk.act1 = Prelu<Scalar>();
          blk.norm1 = LayerNorm<Scalar>(H);
          Scalar kb = Scalar(1) / std::sqrt(static_cast<Scalar>(cfg.tcn_kernel));
          blk.depthwise = Tensor<Scalar>::random_uniform(
              {H, cfg.tcn_kernel}, -kb, kb, rng, true);
          blk.dilation = Index(1) << x;
          blk.act2 = Prelu<Scalar>();
          blk.norm2 = LayerNorm<Scalar>(H);
          blk.out1x1 = Linear<Scalar>(H, B, rng);
          blocks_.push_back(std::move(blk));
        }
      head_act_ = Prelu<Scalar>();
      head_ = Linear<Scalar>(B, N, rng);
    }
  }

  const SeparatorConfig& config() const { return cfg_; }
  embed::Adapter<Scalar>& adapter() { return adapter_; }

  // Adapter mapping of a raw enrollment embedding into conditioning space.
  Tensor<Scalar> adapt(const embed::EnrollmentEmbedding<Scalar>& emb,
                       bool training) {
    check_kind(emb.level);
    return adapter_.apply(emb, training);
  }

  // Full forward from a raw embedding.
  Tensor<Scalar> forward(const Tensor<Scalar>& mixture,
                         const embed::EnrollmentEmbedding<Scalar>& emb,
                         bool training) {
    return forward_conditioned(mixture, adapt(emb, training));
  }

  // Forward with an adapter-mapped conditioning tensor: rank-1 [cond_dim] for
  // utterance modes, rank-2 [Te x cond_dim] for cross-attention modes.
  Tensor<Scalar> forward_conditioned(const Tensor<Scalar>& mixture,
                                     const Tensor<Scalar>& cond) {
    Tensor<Scalar> enc = encode(mixture);
    Tensor<Scalar> encn = enc_norm_.forward(enc);
    Tensor<Scalar> x;
    switch (cfg_.conditioning) {
      case Conditioning::concat:
        x = bottleneck_.forward(cond::concat_condition(encn, cond));
        break;
      case Conditioning::film_utt: {
        x = bottleneck_.forward(encn);
        if (cfg_.family == Family::e3net) {
          auto p = film_gens_[0].generate(cond);
          x = cond::film(x, p.gamma, p.beta);
        }
        break;
      }
      case Conditioning::mca_additive: {
        x = bottleneck_.forward(encn);
        auto r = mca_.forward(x, cond, cond::McaOutputMode::additive);
        x = add(x, r.additive);
        break;
      }
      case Conditioning::mca_film: {
        x = bottleneck_.forward(encn);
        auto r = mca_.forward(x, cond, cond::McaOutputMode::film);
        x = cond::film(x, r.gamma, r.beta);
        break;
      }
    }
    return synthesize(mixture, enc, run_stack(x, &cond));
  }

  // The same pipeline with the conditioning injection skipped entirely
  // (concatenation cannot be ablated: it changes the bottleneck width).
  Tensor<Scalar> forward_ablated(const Tensor<Scalar>& mixture) {
    if (cfg_.conditioning == Conditioning::concat)
      throw ContractError(
          "forward_ablated: concat conditioning changes the bottleneck "
          "width and has no ablated twin");
    Tensor<Scalar> enc = encode(mixture);
    Tensor<Scalar> x = bottleneck_.forward(enc_norm_.forward(enc));
    return synthesize(mixture, enc, run_stack(x, nullptr));
  }

  Tensor<Scalar> encode(const Tensor<Scalar>& mixture) const {
    if (mixture.rank() != 1)
      throw ShapeError("separator: mixture must be a rank-1 waveform, got " +
                       shape_string(mixture.shape()));
    if (mixture.numel() < cfg_.encoder_kernel())
      throw DataError("separator: input of " + std::to_string(mixture.numel()) +
                      " samples is shorter than one " +
                      std::to_string(cfg_.frame_ms) + " ms frame");
    return conv1d(mixture, encoder_, cfg_.encoder_stride());
  }

  Tensor<Scalar> decode(const Tensor<Scalar>& latent) const {
    return conv_transpose1d(latent, decoder_, cfg_.encoder_stride());
  }

  void check_kind(embed::Level level) const {
    if (level != cfg_.required_level())
      throw ContractError(
          std::string("separator: ") + conditioning_name(cfg_.conditioning) +
          " conditioning requires " + embed::level_name(cfg_.required_level()) +
          "-level embeddings, got " + embed::level_name(level));
  }

  void append_params(const std::string& prefix, ParamList<Scalar>& out) {
    out.push_back({prefix + ".encoder.kernel", encoder_});
    enc_norm_.append_params(prefix + ".encoder.norm", out);
    adapter_.append_params(prefix + ".adapter", out);
    adapter_.append_state(prefix + ".adapter", out);
    bottleneck_.append_params(prefix + ".bottleneck", out);
    for (size_t i = 0; i < film_gens_.size(); ++i)
      film_gens_[i].append_params(prefix + ".film." + std::to_string(i), out);
    if (cfg_.wants_frame_level())
      mca_.append_params(prefix + ".mca", out,
                         cfg_.conditioning == Conditioning::mca_additive
                             ? cond::McaOutputMode::additive
                             : cond::McaOutputMode::film);
    if (cfg_.family == Family::e3net) {
      lstm_.append_params(prefix + ".lstm", out);
    } else {
      for (size_t i = 0; i < blocks_.size(); ++i) {
        std::string p = prefix + ".block." + std::to_string(i);
        blocks_[i].in1x1.append_params(p + ".in1x1", out);
        blocks_[i].act1.append_params(p + ".prelu1", out);
        blocks_[i].norm1.append_params(p + ".norm1", out);
        out.push_back({p + ".depthwise", blocks_[i].depthwise});
        blocks_[i].act2.append_params(p + ".prelu2", out);
        blocks_[i].norm2.append_params(p + ".norm2", out);
        blocks_[i].out1x1.append_params(p + ".out1x1", out);
      }
      head_act_.append_params(prefix + ".head.prelu", out);
    }
    head_.append_params(prefix + ".head.linear", out);
    out.push_back({prefix + ".decoder.kernel", decoder_});
  }

 private:
  struct TcnBlock {
    Linear<Scalar> in1x1;
    Prelu<Scalar> act1;
    LayerNorm<Scalar> norm1;
    Tensor<Scalar> depthwise;
    Index dilation = 1;
    Prelu<Scalar> act2;
    LayerNorm<Scalar> norm2;
    Linear<Scalar> out1x1;
  };

  // Separator stack over bottleneck frames. `cond` is consulted only by the
  // per-block FiLM sites of the convtasnet family; nullptr disables them.
  Tensor<Scalar> run_stack(const Tensor<Scalar>& x0,
                           const Tensor<Scalar>* cond) {
    if (cfg_.family == Family::e3net)
      return head_.forward(lstm_.forward_sequence(x0));
    Tensor<Scalar> x = x0;
    for (size_t i = 0; i < blocks_.size(); ++i) {
      auto& b = blocks_[i];
      Tensor<Scalar> y = x;
      if (cond != nullptr && cfg_.conditioning == Conditioning::film_utt) {
        auto p = film_gens_[i].generate(*cond);
        y = cond::film(y, p.gamma, p.beta);
      }
      y = b.norm1.forward(b.act1.forward(b.in1x1.forward(y)));
      y = depthwise_conv1d(y, b.depthwise, b.dilation);
      y = b.norm2.forward(b.act2.forward(y));
      x = add(x, b.out1x1.forward(y));
    }
    return head_.forward(head_act_.forward(x));
  }

  // Decode and restore the input length. E3Net regresses the latent
  // directly; Conv-TasNet applies a sigmoid mask to the encoder output.
  Tensor<Scalar> synthesize(const Tensor<Scalar>& mixture,
                            const Tensor<Scalar>& enc,
                            const Tensor<Scalar>& head_out) {
    Tensor<Scalar> latent = cfg_.family == Family::e3net
                                ? head_out
                                : mul(sigmoid(head_out), enc);
    Tensor<Scalar> wave = decode(latent);
    Index n = mixture.numel();
    if (wave.numel() == n) return wave;
    // overlap-add covers (Tm-1)*stride + K <= n samples; pad the tail
    Tensor<Scalar> pad = Tensor<Scalar>::zeros({n - wave.numel()});
    return concat(std::vector<Tensor<Scalar>>{wave, pad}, 0);
  }

  SeparatorConfig cfg_;
  Tensor<Scalar> encoder_, decoder_;
  LayerNorm<Scalar> enc_norm_;
  embed::Adapter<Scalar> adapter_;
  Linear<Scalar> bottleneck_;
  std::vector<cond::FilmGenerator<Scalar>> film_gens_;
  cond::McaBlock<Scalar> mca_;
  LstmStack<Scalar> lstm_;
  std::vector<TcnBlock> blocks_;
  Prelu<Scalar> head_act_;
  Linear<Scalar> head_;
};

// Inference entry point: separates one mixture given a raw enrollment
// embedding, without recording gradients.
template <typename Scalar>
Eigen::ArrayXd separate(TargetSeparator<Scalar>& model,
                        const Eigen::ArrayXd& mixture,
                        const embed::EnrollmentEmbedding<Scalar>& emb) {
  GradPause<Scalar> pause;
  Tensor<Scalar> mix = Tensor<Scalar>::from_vector(mixture.matrix());
  Tensor<Scalar> est = model.forward(mix, emb, /*training=*/false);
  Eigen::ArrayXd out(est.numel());
  for (Index i = 0; i < est.numel(); ++i)
    out[i] = static_cast<double>(est.values()[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Upstream embedding provider for downstream training

template <typename Scalar>
struct MixtureExample {
  Eigen::ArrayXd mixture, target;
  std::string enroll_id;  // cache key for frozen upstream paths ("" = no cache)
  Eigen::ArrayXd enroll_wave;                       // fbank / dvector sources
  std::vector<dsp::Matrix<double>> enroll_layers;   // layered source
};

template <typename Scalar>
class UpstreamEmbedder {
 public:
  embed::Source source = embed::Source::fbank;
  embed::Level level = embed::Level::utterance;
  dsp::FbankConfig fbank_cfg;
  bool feature_norm = false;
  bool fine_tune = false;
  std::shared_ptr<embed::DVector<Scalar>> dvector;
  Tensor<Scalar> layer_logits;  // lazily sized on first layered example

  embed::EnrollmentEmbedding<Scalar> embed_example(
      const MixtureExample<Scalar>& ex) {
    switch (source) {
      case embed::Source::fbank: {
        auto hit = cache_.find(ex.enroll_id);
        if (!ex.enroll_id.empty() && hit != cache_.end()) return hit->second;
        auto emb = embed::fbank_embed<Scalar>(ex.enroll_wave, level, fbank_cfg,
                                              feature_norm);
        if (!ex.enroll_id.empty()) cache_.emplace(ex.enroll_id, emb);
        return emb;
      }
      case embed::Source::dvector: {
        if (!dvector) throw ConfigError("upstream: d-vector model not attached");
        if (!fine_tune) {
          auto hit = cache_.find(ex.enroll_id);
          if (!ex.enroll_id.empty() && hit != cache_.end()) return hit->second;
          GradPause<Scalar> pause;
          auto emb = dvector_embed(ex);
          emb.values = emb.values.detach();
          if (!ex.enroll_id.empty()) cache_.emplace(ex.enroll_id, emb);
          return emb;
        }
        return dvector_embed(ex);
      }
      default: {
        embed::validate_layers<Scalar>(ex.enroll_layers);
        if (!layer_logits.defined())
          layer_logits = Tensor<Scalar>::zeros(
              {static_cast<Index>(ex.enroll_layers.size())}, true);
        embed::LayeredFrameSource<Scalar> src;
        src.layers = ex.enroll_layers;
        src.layer_logits = layer_logits;
        return embed::layered_aggregate(src, level);
      }
    }
  }

  // Parameters optimized by downstream training: the weighted-sum logits
  // always; the d-vector embedding path only when fine-tuning.
  ParamList<Scalar> trainable_params() {
    ParamList<Scalar> out;
    if (source == embed::Source::layered && layer_logits.defined())
      out.push_back({"upstream.layer_logits", layer_logits});
    if (source == embed::Source::dvector && fine_tune && dvector)
      dvector->append_embedding_params("upstream.dvector", out);
    return out;
  }

  // Every upstream parameter, trainable or not (freeze-contract checks).
  ParamList<Scalar> all_params() {
    ParamList<Scalar> out;
    if (source == embed::Source::layered && layer_logits.defined())
      out.push_back({"upstream.layer_logits", layer_logits});
    if (source == embed::Source::dvector && dvector)
      dvector->append_params("upstream.dvector", out);
    return out;
  }

  void clear_cache() { cache_.clear(); }

 private:
  embed::EnrollmentEmbedding<Scalar> dvector_embed(
      const MixtureExample<Scalar>& ex) {
    dsp::Matrix<double> feats = dsp::logmel<double>(ex.enroll_wave, fbank_cfg);
    return dvector->forward(Tensor<Scalar>::from_matrix(feats), level);
  }

  std::map<std::string, embed::EnrollmentEmbedding<Scalar>> cache_;
};

// ---------------------------------------------------------------------------
// Training loop

struct TrainConfig {
  long iterations = 5000;  // paper scale: 500k
  Index batch_size = 4;
  double peak_lr = 1e-4;  // paper: 1e-4 E3Net, 5e-4 Conv-TasNet
  double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;
  double grad_clip = 5.0;
  long log_every = 50;
  long checkpoint_every = 0;  // 0: final checkpoint only
  std::uint64_t seed = 0;
};

struct TraceRow {
  long iteration;
  double lr;
  double loss;
};

struct TrainResult {
  std::vector<TraceRow> trace;
  long completed = 0;
  bool nan_abort = false;
  double final_loss = 0.0;
  std::string checkpoint_path;
};

inline void write_trace_csv(const std::string& path,
                            const std::vector<TraceRow>& trace) {
  std::ofstream out(path);
  if (!out) throw DataError(path + ": cannot open for writing");
  out << "iteration,lr,loss\n";
  char line[96];
  for (const auto& row : trace) {
    std::snprintf(line, sizeof(line), "%ld,%.10g,%.10g\n", row.iteration, row.lr,
                  row.loss);
    out << line;
  }
}

// Minimizes -SI-SNR with Adam under a cosine schedule. The sampler must be a
// pure function of (iteration, item): training is then deterministic given
// the config. Non-finite loss aborts the run, leaving parameters at the last
// finished iteration and writing a final checkpoint of that state.
template <typename Scalar>
TrainResult train_separator(
    TargetSeparator<Scalar>& model, UpstreamEmbedder<Scalar>& upstream,
    const TrainConfig& tc,
    const std::function<MixtureExample<Scalar>(long, Index)>& sampler,
    const std::string& out_dir = "", const std::string& meta_json = "{}") {
  ParamList<Scalar> params;
  model.append_params("separator", params);
  for (auto& p : upstream.trainable_params()) params.push_back(p);
  AdamConfig<Scalar> ac{static_cast<Scalar>(tc.adam_beta1),
                        static_cast<Scalar>(tc.adam_beta2),
                        static_cast<Scalar>(tc.adam_eps)};
  Adam<Scalar> opt(params, ac);

  auto checkpoint = [&](const std::string& name) -> std::string {
    if (out_dir.empty()) return "";
    std::filesystem::create_directories(out_dir);
    std::string path = out_dir + "/" + name;
    save_checkpoint<Scalar>(path, meta_json, params);
    return path;
  };

  TrainResult result;
  for (long it = 0; it < tc.iterations; ++it) {
    double lr = cosine_lr(tc.peak_lr, it, tc.iterations);
    opt.zero_grad();
    double loss_value = 0.0;
    bool finite = true;
    {
      Tape<Scalar> tape;
      Tensor<Scalar> loss;
      for (Index b = 0; b < tc.batch_size; ++b) {
        MixtureExample<Scalar> ex = sampler(it, b);
        auto emb = upstream.embed_example(ex);
        Tensor<Scalar> mix = Tensor<Scalar>::from_vector(ex.mixture.matrix());
        Tensor<Scalar> est = model.forward(mix, emb, /*training=*/true);
        Tensor<Scalar> item = si_snr_loss<Scalar>(est, ex.target);
        loss = b == 0 ? item : add(loss, item);
      }
      loss = mul_scalar(loss, Scalar(1) / static_cast<Scalar>(tc.batch_size));
      loss_value = static_cast<double>(loss.item());
      finite = std::isfinite(loss_value);
      if (finite) tape.backward(loss);
    }
    if (!finite) {
      result.nan_abort = true;
      result.checkpoint_path = checkpoint("checkpoint_last_good.tssck");
      return result;
    }
    opt.clip_global_norm(static_cast<Scalar>(tc.grad_clip));
    opt.step(static_cast<Scalar>(lr));
    result.completed = it + 1;
    result.final_loss = loss_value;
    if (it % std::max<long>(1, tc.log_every) == 0 || it + 1 == tc.iterations)
      result.trace.push_back({it, lr, loss_value});
    if (tc.checkpoint_every > 0 && (it + 1) % tc.checkpoint_every == 0 &&
        it + 1 < tc.iterations)
      checkpoint("checkpoint_" + std::to_string(it + 1) + ".tssck");
  }
  result.checkpoint_path = checkpoint("checkpoint_final.tssck");
  if (!out_dir.empty()) write_trace_csv(out_dir + "/loss_trace.csv", result.trace);
  return result;
}

}  // namespace tss::sep
