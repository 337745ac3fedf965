#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "tss/checkpoint.hpp"
#include "tss/gradcheck.hpp"
#include "tss/separators.hpp"

using tss::Index;
using tss::Tensor;
namespace sep = tss::sep;
namespace embed = tss::embed;

using T64 = Tensor<double>;

namespace {

sep::SeparatorConfig tiny_config(sep::Family family, sep::Conditioning cond) {
  sep::SeparatorConfig c;
  c.family = family;
  c.frame_ms = 2;  // kernel 32, stride 16: keeps graphs small
  c.hop_ms = 1;
  c.encoder_dim = 8;
  c.bottleneck_dim = 4;
  c.repeats = 1;
  c.blocks_per_repeat = 2;
  c.tcn_hidden = 6;
  c.conditioning = cond;
  c.cond_dim = 6;
  c.mca_heads = 2;
  c.mca_d_model = 8;
  return c;
}

embed::EnrollmentEmbedding<double> utt_embedding(Index dim, std::uint64_t seed) {
  tss::Rng rng(seed);
  embed::EnrollmentEmbedding<double> e;
  e.level = embed::Level::utterance;
  e.values = T64::random_normal({dim}, 0.0, 1.0, rng);
  return e;
}

embed::EnrollmentEmbedding<double> frame_embedding(Index frames, Index dim,
                                                   std::uint64_t seed) {
  tss::Rng rng(seed);
  embed::EnrollmentEmbedding<double> e;
  e.level = embed::Level::frame;
  e.values = T64::random_normal({frames, dim}, 0.0, 1.0, rng);
  return e;
}

Eigen::ArrayXd two_tone(Index n, double f1, double f2, std::uint64_t seed) {
  tss::Rng rng(seed);
  double p1 = rng.uniform(0, 6.28), p2 = rng.uniform(0, 6.28);
  Eigen::ArrayXd x(n);
  for (Index i = 0; i < n; ++i)
    x[i] = 0.3 * std::sin(2 * 3.14159265358979 * f1 * i / 16000.0 + p1) +
           0.2 * std::sin(2 * 3.14159265358979 * f2 * i / 16000.0 + p2);
  return x;
}

}  // namespace

TEST_CASE("paper-scale presets hold the published constants") {
  auto e3 = sep::SeparatorConfig::e3net_paper();
  CHECK(e3.frame_ms == 20);
  CHECK(e3.hop_ms == 10);
  CHECK(e3.encoder_dim == 2048);
  CHECK(e3.bottleneck_dim == 256);
  CHECK(e3.repeats == 4);

  auto ct = sep::SeparatorConfig::convtasnet_paper();
  CHECK(ct.frame_ms == 10);
  CHECK(ct.hop_ms == 5);
  CHECK(ct.encoder_dim == 1024);
  CHECK(ct.bottleneck_dim == 256);
  CHECK(ct.repeats == 2);
  CHECK(ct.blocks_per_repeat == 8);

  auto desk = sep::SeparatorConfig::e3net_desk();
  CHECK(desk.encoder_dim == 64);
  CHECK(desk.bottleneck_dim == 32);
  CHECK(desk.repeats == 2);
}

TEST_CASE("encoder frame count and zero/linearity behavior") {
  tss::Rng rng(3);
  auto cfg = sep::SeparatorConfig::e3net_desk();
  sep::TargetSeparator<double> model(cfg, 80, rng);

  T64 second = T64::zeros({16000});
  auto latent = model.encode(second);
  CHECK(latent.rows() == 99);  // 1 + (16000 - 320) / 160
  CHECK(latent.cols() == 64);
  CHECK(latent.values().abs().maxCoeff() == 0.0);  // bias-free encoder

  tss::Rng sr(5);
  T64 x = T64::random_normal({2000}, 0.0, 0.3, sr);
  T64 x2 = tss::mul_scalar(x, 2.0);
  auto once = model.decode(model.encode(x));
  auto twice = model.decode(model.encode(x2));
  for (Index i = 0; i < once.numel(); ++i)
    CHECK(twice.values()[i] == 2.0 * once.values()[i]);  // exact: dyadic gain

  CHECK_THROWS_AS(model.encode(T64::zeros({100})), tss::DataError);
}

TEST_CASE("output length matches input length for all families and modes") {
  using F = sep::Family;
  using C = sep::Conditioning;
  int seed = 11;
  for (auto family : {F::e3net, F::convtasnet}) {
    for (auto mode : {C::concat, C::film_utt, C::mca_additive, C::mca_film}) {
      tss::Rng rng(seed++);
      auto cfg = tiny_config(family, mode);
      sep::TargetSeparator<double> model(cfg, 10, rng);
      for (Index n : {900, 1601, 2048}) {
        T64 mix = T64::random_normal({n}, 0.0, 0.3, rng);
        auto emb = cfg.wants_frame_level() ? frame_embedding(5, 10, 77)
                                           : utt_embedding(10, 77);
        T64 est = model.forward(mix, emb, /*training=*/false);
        CHECK(est.numel() == n);
      }
    }
  }
}

TEST_CASE("embedding kind must match the conditioning mode") {
  tss::Rng rng(21);
  auto cfg = tiny_config(sep::Family::e3net, sep::Conditioning::concat);
  sep::TargetSeparator<double> model(cfg, 10, rng);
  T64 mix = T64::random_normal({800}, 0.0, 0.3, rng);
  CHECK_THROWS_AS(model.forward(mix, frame_embedding(4, 10, 1), false),
                  tss::ContractError);

  auto cfg2 = tiny_config(sep::Family::e3net, sep::Conditioning::mca_additive);
  sep::TargetSeparator<double> model2(cfg2, 10, rng);
  CHECK_THROWS_AS(model2.forward(mix, utt_embedding(10, 1), false),
                  tss::ContractError);
}

TEST_CASE("zero-initialized conditioning leaves output bit-identical to ablation") {
  int seed = 31;
  for (auto mode : {sep::Conditioning::film_utt, sep::Conditioning::mca_additive,
                    sep::Conditioning::mca_film}) {
    for (auto family : {sep::Family::e3net, sep::Family::convtasnet}) {
      tss::Rng rng(seed++);
      auto cfg = tiny_config(family, mode);
      sep::TargetSeparator<double> model(cfg, 10, rng);
      tss::Rng sr(99);
      T64 mix = T64::random_normal({1200}, 0.0, 0.3, sr);
      auto emb = cfg.wants_frame_level() ? frame_embedding(6, 10, 5)
                                         : utt_embedding(10, 5);
      T64 conditioned = model.forward(mix, emb, false);
      T64 ablated = model.forward_ablated(mix);
      REQUIRE(conditioned.numel() == ablated.numel());
      for (Index i = 0; i < conditioned.numel(); ++i)
        CHECK(conditioned.values()[i] == ablated.values()[i]);
    }
  }

  tss::Rng rng(1);
  auto cfg = tiny_config(sep::Family::e3net, sep::Conditioning::concat);
  sep::TargetSeparator<double> model(cfg, 10, rng);
  CHECK_THROWS_AS(model.forward_ablated(T64::zeros({800})), tss::ContractError);
}

TEST_CASE("full-model gradient check at tiny dims") {
  for (auto family : {sep::Family::e3net, sep::Family::convtasnet}) {
    auto mode = family == sep::Family::e3net ? sep::Conditioning::mca_additive
                                             : sep::Conditioning::mca_film;
    tss::Rng rng(41);
    auto cfg = tiny_config(family, mode);
    sep::TargetSeparator<double> model(cfg, 10, rng);
    tss::ParamList<double> params;
    model.append_params("m", params);
    // zero-initialized conditioning outputs would hide gradient flow
    for (auto& p : params)
      if (p.name.find(".out") != std::string::npos &&
          p.name.find("out1x1") == std::string::npos)
        for (Index i = 0; i < p.tensor.numel(); ++i)
          p.tensor.values()[i] = 0.2 * rng.normal();

    tss::Rng sr(42);
    Eigen::ArrayXd mix_wave(300), ref_wave(300);
    for (Index i = 0; i < 300; ++i) {
      mix_wave[i] = sr.normal(0.0, 0.3);
      ref_wave[i] = 0.5 * mix_wave[i] + sr.normal(0.0, 0.1);
    }
    T64 mix = T64::from_vector(mix_wave.matrix());
    auto emb = frame_embedding(4, 10, 7);
    auto f = [&]() {
      T64 est = model.forward(mix, emb, /*training=*/false);
      return sep::si_snr_loss<double>(est, ref_wave);
    };
    double err = tss::finite_difference_check<double>(f, params, 1e-5);
    CHECK(err < 1e-3);
  }
}

TEST_CASE("si_snr examples and clamps") {
  tss::Rng rng(51);
  Eigen::ArrayXd ref(64);
  for (Index i = 0; i < 64; ++i) ref[i] = rng.normal();

  CHECK(sep::si_snr(ref, ref) == 60.0);
  CHECK(sep::si_snr((2.0 * ref).eval(), ref) == 60.0);
  CHECK_THROWS_AS(sep::si_snr(ref, Eigen::ArrayXd::Zero(64)), tss::MetricError);

  // orthogonal construction: si-snr exactly 20 dB
  Index n = 64;
  Eigen::ArrayXd r(n), e(n);
  for (Index i = 0; i < n; ++i) {
    r[i] = (i % 2 == 0) ? 1.0 : -1.0;           // zero-mean, |r|^2 = 64
    e[i] = (i % 4 < 2) ? 1.0 : -1.0;            // zero-mean, orthogonal to r
  }
  double err_power = 64.0 / 100.0;  // 20 dB below the target power
  Eigen::ArrayXd est = r + std::sqrt(err_power / 64.0) * e;
  CHECK(sep::si_snr(est, r) == doctest::Approx(20.0).epsilon(1e-12));
  CHECK(std::abs(sep::si_snr(est, r) - 20.0) < 1e-9);
}

TEST_CASE("si_snr scale invariance holds as computed-value equality") {
  tss::Rng rng(61);
  Eigen::ArrayXd ref(1600), est(1600);
  for (Index i = 0; i < 1600; ++i) {
    ref[i] = rng.normal();
    est[i] = ref[i] + 0.4 * rng.normal();
  }
  double base = sep::si_snr(est, ref);
  for (double gain : {0.1, 1.0, 3.7}) {
    CHECK(sep::si_snr((gain * est).eval(), ref) == base);
    CHECK(sep::si_snr(est, (gain * ref).eval()) == base);
  }
}

TEST_CASE("si_snr_loss agrees with the metric away from the clamp") {
  tss::Rng rng(71);
  Eigen::ArrayXd ref(400), est(400);
  for (Index i = 0; i < 400; ++i) {
    ref[i] = rng.normal();
    est[i] = ref[i] + 0.5 * rng.normal();
  }
  T64 est_t = T64::from_vector(est.matrix());
  double loss = sep::si_snr_loss<double>(est_t, ref).item();
  CHECK(-loss == doctest::Approx(sep::si_snr(est, ref)).epsilon(1e-8));
}

TEST_CASE("training is deterministic, freezes upstream, and aborts on NaN") {
  auto make_sampler = [](bool poison) {
    return [poison](long it, Index item) {
      sep::MixtureExample<double> ex;
      std::uint64_t key = static_cast<std::uint64_t>(it * 13 + item);
      ex.target = two_tone(800, 500.0, 900.0, key);
      ex.mixture = ex.target + two_tone(800, 1700.0, 2300.0, key + 1);
      ex.enroll_id = "utt" + std::to_string(key % 4);
      ex.enroll_wave = two_tone(800, 500.0, 900.0, key % 4);
      if (poison && it == 3) ex.mixture[5] = std::nan("");
      return ex;
    };
  };

  auto run = [&](std::uint64_t seed) {
    tss::Rng rng(seed);
    auto cfg = tiny_config(sep::Family::e3net, sep::Conditioning::concat);
    cfg.frame_ms = 4;
    cfg.hop_ms = 2;
    sep::TargetSeparator<double> model(cfg, 80, rng);
    sep::UpstreamEmbedder<double> upstream;
    upstream.source = embed::Source::fbank;
    upstream.level = embed::Level::utterance;
    upstream.fbank_cfg.frame_ms = 16;  // short synthetic clips
    upstream.fbank_cfg.hop_ms = 8;
    upstream.fbank_cfg.n_fft = 256;
    upstream.fbank_cfg.n_mels = 40;
    sep::TrainConfig tc;
    tc.iterations = 6;
    tc.batch_size = 2;
    tc.peak_lr = 1e-3;
    tc.log_every = 1;
    return sep::train_separator<double>(model, upstream, tc, make_sampler(false));
  };

  auto r1 = run(7), r2 = run(7);
  REQUIRE(r1.trace.size() == r2.trace.size());
  for (size_t i = 0; i < r1.trace.size(); ++i) {
    CHECK(r1.trace[i].loss == r2.trace[i].loss);
    CHECK(r1.trace[i].lr == r2.trace[i].lr);
  }
  CHECK(r1.completed == 6);

  // frozen upstream d-vector stays bit-identical through training
  {
    tss::Rng rng(9);
    auto cfg = tiny_config(sep::Family::e3net, sep::Conditioning::concat);
    cfg.frame_ms = 4;
    cfg.hop_ms = 2;
    cfg.embedding_source = embed::Source::dvector;
    embed::DVectorConfig<double> dc;
    dc.feature_dim = 40;
    dc.hidden = 6;
    dc.layers = 1;
    dc.embed_dim = 8;
    dc.n_speakers = 3;
    sep::TargetSeparator<double> model(cfg, 8, rng);
    sep::UpstreamEmbedder<double> upstream;
    upstream.source = embed::Source::dvector;
    upstream.level = embed::Level::utterance;
    upstream.fbank_cfg.frame_ms = 16;
    upstream.fbank_cfg.hop_ms = 8;
    upstream.fbank_cfg.n_fft = 256;
    upstream.fbank_cfg.n_mels = 40;
    upstream.dvector = std::make_shared<embed::DVector<double>>(dc, rng);
    upstream.fine_tune = false;

    tss::ParamList<double> snapshot_params = upstream.all_params();
    std::vector<Eigen::ArrayXd> before;
    for (auto& p : snapshot_params) before.push_back(p.tensor.values());

    sep::TrainConfig tc;
    tc.iterations = 4;
    tc.batch_size = 2;
    tc.peak_lr = 1e-3;
    auto res = sep::train_separator<double>(model, upstream, tc, make_sampler(false));
    CHECK(res.completed == 4);
    for (size_t i = 0; i < snapshot_params.size(); ++i) {
      const auto& now = snapshot_params[i].tensor.values();
      bool identical = true;
      for (Index j = 0; j < now.size(); ++j)
        identical = identical && now[j] == before[i][j];
      CHECK(identical);
    }

    // fine-tuning changes at least one upstream parameter
    upstream.fine_tune = true;
    upstream.clear_cache();
    auto res2 = sep::train_separator<double>(model, upstream, tc, make_sampler(false));
    CHECK(res2.completed == 4);
    bool any_changed = false;
    for (size_t i = 0; i < snapshot_params.size(); ++i) {
      const auto& now = snapshot_params[i].tensor.values();
      for (Index j = 0; j < now.size(); ++j)
        any_changed = any_changed || now[j] != before[i][j];
    }
    CHECK(any_changed);
  }

  // NaN in the batch aborts with the last finished iteration preserved
  {
    tss::Rng rng(13);
    auto cfg = tiny_config(sep::Family::e3net, sep::Conditioning::concat);
    cfg.frame_ms = 4;
    cfg.hop_ms = 2;
    sep::TargetSeparator<double> model(cfg, 80, rng);
    sep::UpstreamEmbedder<double> upstream;
    upstream.source = embed::Source::fbank;
    upstream.level = embed::Level::utterance;
    upstream.fbank_cfg.frame_ms = 16;
    upstream.fbank_cfg.hop_ms = 8;
    upstream.fbank_cfg.n_fft = 256;
    upstream.fbank_cfg.n_mels = 40;
    sep::TrainConfig tc;
    tc.iterations = 10;
    tc.batch_size = 2;
    tc.peak_lr = 1e-3;
    auto res = sep::train_separator<double>(model, upstream, tc, make_sampler(true));
    CHECK(res.nan_abort);
    CHECK(res.completed == 3);
  }
}

TEST_CASE("checkpoint round trip preserves parameters and metadata") {
  tss::Rng rng(81);
  auto cfg = tiny_config(sep::Family::convtasnet, sep::Conditioning::film_utt);
  sep::TargetSeparator<double> model(cfg, 10, rng);
  tss::ParamList<double> params;
  model.append_params("separator", params);

  std::string path = "test_ckpt.tssck";
  tss::save_checkpoint<double>(path, "{\"model\":\"convtasnet\",\"iteration\":5}",
                               params);

  tss::Rng rng2(91);
  sep::TargetSeparator<double> other(cfg, 10, rng2);
  tss::ParamList<double> other_params;
  other.append_params("separator", other_params);
  std::string meta = tss::load_checkpoint<double>(path, other_params);
  CHECK(meta.find("convtasnet") != std::string::npos);
  for (size_t i = 0; i < params.size(); ++i) {
    REQUIRE(params[i].name == other_params[i].name);
    for (Index j = 0; j < params[i].tensor.numel(); ++j)
      CHECK(params[i].tensor.values()[j] == other_params[i].tensor.values()[j]);
  }

  // missing-parameter detection
  tss::ParamList<double> extra = other_params;
  extra.push_back({"separator.bogus", T64::zeros({2})});
  CHECK_THROWS_AS(tss::load_checkpoint<double>(path, extra), tss::DataError);
  std::remove(path.c_str());
}

TEST_CASE("loss trace CSV is written with header") {
  std::vector<sep::TraceRow> trace{{0, 1e-3, -1.5}, {50, 9e-4, -3.25}};
  sep::write_trace_csv("test_trace.csv", trace);
  std::ifstream in("test_trace.csv");
  std::string line;
  std::getline(in, line);
  CHECK(line == "iteration,lr,loss");
  std::getline(in, line);
  CHECK(line.find("0,0.001,") == 0);
  std::remove("test_trace.csv");
}
