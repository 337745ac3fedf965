#pragma once

#include <Eigen/Dense>

#include <string>

#include "tss/error.hpp"

namespace tss {

// Audio is carried as double samples in [-1, 1). File I/O accepts exactly
// one format: 16 kHz, mono, 16-bit PCM WAV. Integer samples map to
// sample / 32768.0, which round-trips bit-exactly.
struct Wav {
  Eigen::ArrayXd samples;
  int sample_rate = 16000;
};

Wav read_wav(const std::string& path);

void write_wav(const std::string& path, const Eigen::ArrayXd& samples,
               int sample_rate = 16000);

// Reads only the header; used to index corpora without loading audio.
Eigen::Index wav_num_samples(const std::string& path);

}  // namespace tss
