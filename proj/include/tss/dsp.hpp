#pragma once

// Deterministic signal-processing front-end: framing, windowing, one-sided
// DFT spectra, mel filterbank, log-mel (FBANK) features, per-band feature
// normalization, and mean/std utterance pooling.
//
// Spectra are computed by explicit DFT basis multiplication. At the frame
// sizes used here this is plenty fast, keeps Eigen the only math dependency,
// and is exact against a direct-summation oracle.

#include <Eigen/Dense>

#include <cmath>
#include <complex>
#include <iostream>

#include "tss/error.hpp"

namespace tss::dsp {

using Index = Eigen::Index;

enum class Window { hann, rectangular };

struct FbankConfig {
  Index frame_ms = 25;
  Index hop_ms = 10;
  int sample_rate = 16000;
  Index n_mels = 80;
  Index n_fft = 512;
  double f_min = 0.0;
  double f_max = 8000.0;
  double energy_floor = 1e-10;  // natural-log floor on mel energies
  Window window = Window::hann;

  Index frame_samples() const { return frame_ms * sample_rate / 1000; }
  Index hop_samples() const { return hop_ms * sample_rate / 1000; }
};

inline Index frame_count(Index num_samples, Index frame_samples,
                         Index hop_samples) {
  if (num_samples < frame_samples) return 0;
  return 1 + (num_samples - frame_samples) / hop_samples;
}

inline double hz_to_mel(double hz) {
  return 2595.0 * std::log10(1.0 + hz / 700.0);
}

inline double mel_to_hz(double mel) {
  return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0);
}

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using ComplexMatrix =
    Eigen::Matrix<std::complex<Scalar>, Eigen::Dynamic, Eigen::Dynamic,
                  Eigen::RowMajor>;

template <typename Scalar>
Vector<Scalar> make_window(Window kind, Index length) {
  Vector<Scalar> w(length);
  switch (kind) {
    case Window::rectangular:
      w.setOnes();
      break;
    case Window::hann:
      // periodic Hann
      for (Index n = 0; n < length; ++n)
        w[n] = Scalar(0.5) -
               Scalar(0.5) * std::cos(Scalar(2.0 * 3.14159265358979323846) *
                                      static_cast<Scalar>(n) /
                                      static_cast<Scalar>(length));
      break;
  }
  return w;
}

// One-sided spectrogram: row t is the DFT of window * signal[t*hop .. +frame),
// zero-padded to n_fft. Output is [T x (n_fft/2 + 1)].
template <typename Scalar>
ComplexMatrix<Scalar> stft(const Eigen::Array<Scalar, Eigen::Dynamic, 1>& signal,
                           Index frame_samples, Index hop_samples, Index n_fft,
                           Window window = Window::hann) {
  if (signal.size() < frame_samples)
    throw DataError("stft: signal length " + std::to_string(signal.size()) +
                    " is shorter than one frame (" +
                    std::to_string(frame_samples) +
                    " samples); pad the signal or reject it");
  if (n_fft < frame_samples)
    throw ConfigError("stft: n_fft " + std::to_string(n_fft) +
                      " < frame length " + std::to_string(frame_samples));
  Index T = frame_count(signal.size(), frame_samples, hop_samples);
  Index bins = n_fft / 2 + 1;
  Vector<Scalar> w = make_window<Scalar>(window, frame_samples);

  Matrix<Scalar> frames = Matrix<Scalar>::Zero(T, n_fft);
  for (Index t = 0; t < T; ++t)
    frames.row(t).head(frame_samples) =
        (signal.segment(t * hop_samples, frame_samples) * w.array()).matrix();

  Matrix<Scalar> cos_basis(n_fft, bins), sin_basis(n_fft, bins);
  const Scalar two_pi = Scalar(2.0 * 3.14159265358979323846);
  for (Index n = 0; n < n_fft; ++n)
    for (Index k = 0; k < bins; ++k) {
      Scalar angle = two_pi * static_cast<Scalar>(k) * static_cast<Scalar>(n) /
                     static_cast<Scalar>(n_fft);
      cos_basis(n, k) = std::cos(angle);
      sin_basis(n, k) = std::sin(angle);
    }
  Matrix<Scalar> re = frames * cos_basis;
  Matrix<Scalar> im = -(frames * sin_basis);
  ComplexMatrix<Scalar> out(T, bins);
  for (Index t = 0; t < T; ++t)
    for (Index k = 0; k < bins; ++k) out(t, k) = {re(t, k), im(t, k)};
  return out;
}

// Triangular mel filterbank, peak height 1, centers uniform on the mel scale.
// Rows are filters, columns FFT bins. Throws if any filter collapses to an
// empty bin support.
template <typename Scalar>
Matrix<Scalar> mel_matrix(Index n_mels, Index n_fft, int sample_rate,
                          double f_min, double f_max) {
  if (!(0.0 <= f_min && f_min < f_max && f_max <= sample_rate / 2.0))
    throw ConfigError("mel_matrix: need 0 <= f_min < f_max <= sr/2, got [" +
                      std::to_string(f_min) + ", " + std::to_string(f_max) +
                      "] at sr " + std::to_string(sample_rate));
  Index bins = n_fft / 2 + 1;
  double mel_lo = hz_to_mel(f_min), mel_hi = hz_to_mel(f_max);
  std::vector<double> centers_hz(n_mels + 2);
  for (Index m = 0; m < n_mels + 2; ++m)
    centers_hz[m] = mel_to_hz(mel_lo + (mel_hi - mel_lo) *
                                           static_cast<double>(m) /
                                           static_cast<double>(n_mels + 1));
  Matrix<Scalar> weights = Matrix<Scalar>::Zero(n_mels, bins);
  for (Index m = 1; m <= n_mels; ++m) {
    double lo = centers_hz[m - 1], mid = centers_hz[m], hi = centers_hz[m + 1];
    bool nonzero = false;
    for (Index k = 0; k < bins; ++k) {
      double f = static_cast<double>(k) * sample_rate / static_cast<double>(n_fft);
      double v = 0.0;
      if (f > lo && f < mid)
        v = (f - lo) / (mid - lo);
      else if (f >= mid && f < hi)
        v = (hi - f) / (hi - mid);
      if (v > 0.0) {
        weights(m - 1, k) = static_cast<Scalar>(v);
        nonzero = true;
      }
    }
    if (!nonzero)
      throw ConfigError("mel_matrix: filter " + std::to_string(m - 1) +
                        " collapsed (no FFT bin support); lower n_mels or "
                        "raise n_fft");
  }
  return weights;
}

// [T x n_mels] natural-log mel energies: log(max(mel * |stft|^2, floor)).
template <typename Scalar>
Matrix<Scalar> logmel(const Eigen::Array<Scalar, Eigen::Dynamic, 1>& signal,
                      const FbankConfig& cfg = {}) {
  ComplexMatrix<Scalar> spec = stft<Scalar>(signal, cfg.frame_samples(),
                                            cfg.hop_samples(), cfg.n_fft,
                                            cfg.window);
  Matrix<Scalar> power = spec.array().abs2().matrix();
  Matrix<Scalar> mel = mel_matrix<Scalar>(cfg.n_mels, cfg.n_fft, cfg.sample_rate,
                                          cfg.f_min, cfg.f_max);
  Matrix<Scalar> energies = power * mel.transpose();
  Scalar floor = static_cast<Scalar>(cfg.energy_floor);
  return energies.array().max(floor).log().matrix();
}

// Subtracts the per-band temporal mean (the FN pre-processing).
template <typename Scalar>
Matrix<Scalar> feature_normalize(const Matrix<Scalar>& features) {
  if (features.rows() < 1)
    throw DataError("feature_normalize: empty feature matrix");
  return features.rowwise() - features.colwise().mean();
}

// [mean_0..mean_{B-1}, std_0..std_{B-1}]; population standard deviation.
// A single frame yields a zero std half (warned, not rejected).
template <typename Scalar>
Vector<Scalar> pool_mean_std(const Matrix<Scalar>& features) {
  Index T = features.rows(), B = features.cols();
  if (T < 1) throw DataError("pool_mean_std: empty feature matrix");
  if (T == 1)
    std::cerr << "pool_mean_std: single frame, std half is zero\n";
  Vector<Scalar> out(2 * B);
  for (Index b = 0; b < B; ++b) {
    Scalar mu = features.col(b).mean();
    Scalar var = (features.col(b).array() - mu).square().sum() /
                 static_cast<Scalar>(T);
    out[b] = mu;
    out[B + b] = std::sqrt(var);
  }
  return out;
}

}  // namespace tss::dsp
