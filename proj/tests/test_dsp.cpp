#include <doctest.h>

#include <cmath>
#include <complex>
#include <cstdio>

#include "tss/container.hpp"
#include "tss/dsp.hpp"
#include "tss/rng.hpp"
#include "tss/wav.hpp"

using Eigen::ArrayXd;
using Eigen::Index;
namespace dsp = tss::dsp;

namespace {

constexpr double kPi = 3.14159265358979323846;

// Direct per-frame, per-bin DFT summation. Deliberately O(T * n_fft^2) and
// independent of the matrix-product implementation under test.
Eigen::MatrixXcd naive_stft(const ArrayXd& x, Index frame, Index hop,
                            Index n_fft, bool hann) {
  Index T = 1 + (x.size() - frame) / hop;
  Index bins = n_fft / 2 + 1;
  Eigen::MatrixXcd out(T, bins);
  for (Index t = 0; t < T; ++t) {
    for (Index k = 0; k < bins; ++k) {
      std::complex<double> acc(0.0, 0.0);
      for (Index n = 0; n < frame; ++n) {
        double w = hann ? 0.5 - 0.5 * std::cos(2.0 * kPi * n / frame) : 1.0;
        double phase = -2.0 * kPi * k * n / static_cast<double>(n_fft);
        acc += w * x[t * hop + n] *
               std::complex<double>(std::cos(phase), std::sin(phase));
      }
      out(t, k) = acc;
    }
  }
  return out;
}

ArrayXd random_signal(Index n, std::uint64_t seed) {
  tss::Rng rng(seed);
  ArrayXd x(n);
  for (Index i = 0; i < n; ++i) x[i] = rng.uniform(-0.5, 0.5);
  return x;
}

}  // namespace

TEST_CASE("stft of zero signal is zero") {
  ArrayXd x = ArrayXd::Zero(1600);
  auto spec = dsp::stft<double>(x, 400, 160, 512);
  CHECK(spec.rows() == 8);
  CHECK(spec.cols() == 257);
  CHECK(spec.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("unit impulse has flat magnitude spectrum under rectangular window") {
  ArrayXd x = ArrayXd::Zero(512);
  x[0] = 1.0;
  auto spec = dsp::stft<double>(x, 512, 512, 512, dsp::Window::rectangular);
  for (Index k = 0; k < spec.cols(); ++k)
    CHECK(std::abs(spec(0, k)) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("1 kHz sine peaks at bin 32 with n_fft 512 at 16 kHz") {
  ArrayXd x(512);
  for (Index n = 0; n < 512; ++n) x[n] = std::sin(2.0 * kPi * 1000.0 * n / 16000.0);
  auto spec = dsp::stft<double>(x, 512, 512, 512, dsp::Window::rectangular);
  Index peak = 0;
  double best = -1;
  for (Index k = 0; k < spec.cols(); ++k)
    if (std::abs(spec(0, k)) > best) {
      best = std::abs(spec(0, k));
      peak = k;
    }
  CHECK(peak == 32);

  // and matches the direct DFT on that frame
  auto oracle = naive_stft(x, 512, 512, 512, false);
  for (Index k = 0; k < spec.cols(); ++k)
    CHECK(std::abs(spec(0, k) - oracle(0, k)) < 1e-8);
}

TEST_CASE("stft matches naive DFT oracle on random 1 s inputs") {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    ArrayXd x = random_signal(16000, seed);
    auto fast = dsp::stft<double>(x, 400, 160, 512);
    auto slow = naive_stft(x, 400, 160, 512, true);
    double scale = slow.cwiseAbs().maxCoeff();
    double worst = (fast - slow).cwiseAbs().maxCoeff() / scale;
    CHECK(worst < 1e-6);
  }
}

TEST_CASE("mel scale formula and filter geometry") {
  CHECK(dsp::hz_to_mel(700.0) ==
        doctest::Approx(2595.0 * std::log10(2.0)).epsilon(1e-12));

  auto W = dsp::mel_matrix<double>(80, 512, 16000, 0.0, 8000.0);
  CHECK(W.rows() == 80);
  CHECK(W.cols() == 257);
  CHECK(W.minCoeff() >= 0.0);

  // centers strictly increasing in Hz
  double mel_lo = dsp::hz_to_mel(0.0), mel_hi = dsp::hz_to_mel(8000.0);
  double prev = -1;
  for (Index m = 0; m < 82; ++m) {
    double c = dsp::mel_to_hz(mel_lo + (mel_hi - mel_lo) * m / 81.0);
    CHECK(c > prev);
    prev = c;
  }

  // support widths nondecreasing with band index (allowing +/-1 bin
  // quantization), and contiguous rise-then-fall shape
  Index prev_width = 0;
  for (Index m = 0; m < 80; ++m) {
    Index first = -1, last = -1;
    for (Index k = 0; k < 257; ++k)
      if (W(m, k) > 0) {
        if (first < 0) first = k;
        last = k;
      }
    REQUIRE(first >= 0);
    Index width = last - first + 1;
    CHECK(width + 1 >= prev_width);
    prev_width = std::max(prev_width, width);
    // rises then falls: no second ascent after the peak
    Index peak = first;
    for (Index k = first; k <= last; ++k)
      if (W(m, k) > W(m, peak)) peak = k;
    for (Index k = first; k < peak; ++k) CHECK(W(m, k) <= W(m, k + 1) + 1e-12);
    for (Index k = peak; k < last; ++k) CHECK(W(m, k + 1) <= W(m, k) + 1e-12);
  }

  // every bin between the first and last filter centers is covered
  double first_center = dsp::mel_to_hz(mel_lo + (mel_hi - mel_lo) * 1 / 81.0);
  double last_center = dsp::mel_to_hz(mel_lo + (mel_hi - mel_lo) * 80 / 81.0);
  for (Index k = 0; k < 257; ++k) {
    double f = k * 16000.0 / 512.0;
    if (f > first_center && f < last_center)
      CHECK(W.col(k).maxCoeff() > 0.0);
  }

  CHECK_THROWS_AS(dsp::mel_matrix<double>(80, 64, 16000, 0.0, 8000.0),
                  tss::ConfigError);
  CHECK_THROWS_AS(dsp::mel_matrix<double>(80, 512, 16000, 4000.0, 100.0),
                  tss::ConfigError);
}

TEST_CASE("logmel floor, frame count, and gain equivariance") {
  dsp::FbankConfig cfg;

  ArrayXd zero = ArrayXd::Zero(16000);
  auto F0 = dsp::logmel<double>(zero, cfg);
  CHECK(F0.rows() == 98);  // 1 + (16000 - 400) / 160
  CHECK(F0.cols() == 80);
  for (Index t = 0; t < F0.rows(); ++t)
    for (Index b = 0; b < 80; ++b)
      CHECK(F0(t, b) == doctest::Approx(std::log(1e-10)).epsilon(1e-12));

  ArrayXd x = random_signal(16000, 99);
  auto F1 = dsp::logmel<double>(x, cfg);
  CHECK(F1.rows() == 98);
  auto F10 = dsp::logmel<double>((10.0 * x).eval(), cfg);
  double floor_val = std::log(1e-10) + 1e-9;
  for (Index t = 0; t < F1.rows(); ++t)
    for (Index b = 0; b < 80; ++b)
      if (F1(t, b) > floor_val + 5 && F10(t, b) > floor_val + 5)
        CHECK(F10(t, b) - F1(t, b) ==
              doctest::Approx(2.0 * std::log(10.0)).epsilon(1e-9));

  CHECK_THROWS_AS(dsp::logmel<double>(ArrayXd::Zero(300), cfg), tss::DataError);
}

TEST_CASE("feature_normalize zeroes per-band means and is idempotent") {
  dsp::Matrix<double> constant = dsp::Matrix<double>::Constant(7, 80, 3.25);
  CHECK(dsp::feature_normalize<double>(constant).cwiseAbs().maxCoeff() == 0.0);

  dsp::Matrix<double> single(1, 80);
  single.setRandom();
  CHECK(dsp::feature_normalize<double>(single).cwiseAbs().maxCoeff() == 0.0);

  tss::Rng rng(5);
  dsp::Matrix<double> x(5, 80);
  for (Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
  auto fn = dsp::feature_normalize<double>(x);
  for (Index b = 0; b < 80; ++b)
    CHECK(std::abs(fn.col(b).mean()) < 1e-10);

  auto fn2 = dsp::feature_normalize<double>(fn);
  CHECK((fn2 - fn).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("pool_mean_std basics and two-pass oracle") {
  dsp::Matrix<double> constant = dsp::Matrix<double>::Constant(9, 80, 2.5);
  auto pooled = dsp::pool_mean_std<double>(constant);
  CHECK(pooled.size() == 160);
  for (Index b = 0; b < 80; ++b) {
    CHECK(pooled[b] == doctest::Approx(2.5));
    CHECK(pooled[80 + b] == 0.0);
  }

  dsp::Matrix<double> two(2, 80);
  two.row(0).setZero();
  two.row(1).setConstant(2.0);
  auto p2 = dsp::pool_mean_std<double>(two);
  for (Index b = 0; b < 80; ++b) {
    CHECK(p2[b] == doctest::Approx(1.0));
    CHECK(p2[80 + b] == doctest::Approx(1.0));
  }

  tss::Rng rng(17);
  dsp::Matrix<double> x(100, 80);
  for (Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal(0.0, 2.0);
  auto p = dsp::pool_mean_std<double>(x);
  for (Index b = 0; b < 80; ++b) {
    double mu = 0;
    for (Index t = 0; t < 100; ++t) mu += x(t, b);
    mu /= 100.0;
    double var = 0;
    for (Index t = 0; t < 100; ++t) var += (x(t, b) - mu) * (x(t, b) - mu);
    var /= 100.0;
    CHECK(std::abs(p[b] - mu) < 1e-9);
    CHECK(std::abs(p[80 + b] - std::sqrt(var)) < 1e-9);
  }
}

TEST_CASE("FN keeps the std half and kills the mean half") {
  tss::Rng rng(23);
  for (int rep = 0; rep < 5; ++rep) {
    dsp::Matrix<double> x(40, 80);
    for (Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal(1.0, 3.0);
    auto plain = dsp::pool_mean_std<double>(x);
    auto normalized = dsp::pool_mean_std<double>(dsp::feature_normalize<double>(x));
    for (Index b = 0; b < 80; ++b) {
      CHECK(std::abs(normalized[b]) < 1e-10);
      CHECK(std::abs(normalized[80 + b] - plain[80 + b]) < 1e-9);
    }
  }
}

TEST_CASE("wav io round trip and format rejection") {
  tss::Rng rng(31);
  ArrayXd x(1234);
  for (Index i = 0; i < x.size(); ++i)
    x[i] = std::floor(rng.uniform(-32768.0, 32767.0)) / 32768.0;
  std::string path = "test_roundtrip.wav";
  tss::write_wav(path, x);
  tss::Wav back = tss::read_wav(path);
  CHECK(back.sample_rate == 16000);
  REQUIRE(back.samples.size() == x.size());
  CHECK((back.samples - x).abs().maxCoeff() == 0.0);

  tss::write_wav("test_badrate.wav", x, 8000);
  CHECK_THROWS_AS(tss::read_wav("test_badrate.wav"), tss::DataError);
  CHECK_THROWS_AS(tss::read_wav("does_not_exist.wav"), tss::DataError);
  CHECK(tss::wav_num_samples(path) == x.size());
  std::remove(path.c_str());
  std::remove("test_badrate.wav");
}

TEST_CASE("array container round trips") {
  tss::Rng rng(41);
  dsp::Matrix<double> m(13, 7);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  tss::write_matrix_file("test_mat.bin", m, /*as_f32=*/false);
  auto back = tss::read_matrix_file("test_mat.bin");
  CHECK((back - m).cwiseAbs().maxCoeff() == 0.0);

  std::vector<dsp::Matrix<double>> layers;
  for (int l = 0; l < 3; ++l) {
    dsp::Matrix<double> layer(5, 4);
    for (Index i = 0; i < layer.size(); ++i)
      layer.data()[i] = static_cast<float>(rng.normal());
    layers.push_back(layer);
  }
  tss::write_layered_file("test_layers.bin", layers);
  auto lback = tss::read_layered_file("test_layers.bin");
  REQUIRE(lback.size() == 3);
  for (int l = 0; l < 3; ++l)
    CHECK((lback[l] - layers[l]).cwiseAbs().maxCoeff() == 0.0);
  std::remove("test_mat.bin");
  std::remove("test_layers.bin");
}
