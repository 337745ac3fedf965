#pragma once

#include <cmath>
#include <cstdint>

namespace tss {

// Deterministic counter-seeded generator (splitmix64 core). The standard
// <random> distributions are implementation-defined, so everything that has
// to reproduce bit-exactly across platforms (sampling, init, synthesis) goes
// through this class instead.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(mix(seed ^ kGolden)) {}

  // Keyed stream: hash(seed, stream) so that independent counters (e.g. the
  // online-mixing iteration index) yield independent, random-access streams.
  Rng(std::uint64_t seed, std::uint64_t stream)
      : state_(mix(mix(seed ^ kGolden) ^ (stream + kGolden))) {}

  std::uint64_t next_u64() {
    state_ += kGolden;
    return mix(state_);
  }

  // Uniform in [0, n). Rejection-free multiply-shift; bias is < 2^-53 for the
  // n used here and, crucially, the result is platform-independent.
  std::uint64_t uniform_int(std::uint64_t n) {
    return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)) % n;
  }

  // Uniform double in [0, 1), 53 random bits.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller, one value per call (the cosine branch is discarded so the
  // stream stays a pure function of call count).
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::sin(6.283185307179586477 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

 private:
  static constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ull;

  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  std::uint64_t state_;
};

}  // namespace tss
