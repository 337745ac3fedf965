#pragma once

// Deterministic construction of two-speaker training and evaluation examples:
// non-scaled mixtures with segment-or-repeat interferer alignment, RMS-gated
// silence trimming, enrollment concatenation, noisy-enrollment corruption,
// and a counter-based online sampler. Everything is a pure function of the
// spec and seed, so manifests re-render bit-identically.

#include <Eigen/Dense>

#include <map>
#include <string>
#include <vector>

#include "tss/error.hpp"
#include "tss/rng.hpp"

namespace tss::mix {

using Eigen::ArrayXd;
using Index = Eigen::Index;

struct Corruption {
  bool enabled = false;
  std::string noise_path;
  double snr_db = 0.0;
  std::string reverb_path;  // empty: no reverberation stage
};

// One fully determined training/eval example.
struct MixtureSpec {
  std::string id;
  std::string target_path;
  std::string interferer_path;
  std::vector<std::string> enrollment_paths;
  Index interferer_offset = 0;
  Corruption corruption;
  std::uint64_t seed = 0;
};

struct Manifest {
  std::string corpus_root;
  std::uint64_t seed = 0;
  std::vector<MixtureSpec> specs;
};

// ---------------------------------------------------------------------------
// Mixing primitives

// Cyclic segment of the interferer starting at `offset`, length
// `target_len`: a crop when the interferer is long enough past the offset,
// a cyclic repetition otherwise.
ArrayXd adjust_interferer(const ArrayXd& interferer, Index offset,
                          Index target_len);

// Non-scaled sum; returns (mixture, adjusted interferer). The target itself
// is the reference for losses and metrics.
std::pair<ArrayXd, ArrayXd> make_mixture(const ArrayXd& target,
                                         const ArrayXd& interferer,
                                         Index offset);

// Removes maximal runs of 25 ms windows whose RMS falls below threshold_db
// relative to the loudest window, but only runs lasting at least min_gap_ms;
// shorter dips are kept as natural pauses. Fully silent input is an error.
ArrayXd trim_silence(const ArrayXd& signal, double threshold_db = -40.0,
                     double min_gap_ms = 200.0);

// Concatenates utterances in order until target_seconds is covered, then
// truncates to exactly that length. If less audio is available, returns all
// of it (and warns on stderr).
ArrayXd build_enrollment(const std::vector<ArrayXd>& utterances,
                         double target_seconds = 20.0, int sample_rate = 16000);

// Optional reverberation (full convolution, truncated to the signal length)
// followed by noise tiled/cropped to length and scaled so that
// 10*log10(P_signal / P_noise) equals snr_db.
ArrayXd corrupt_enrollment(const ArrayXd& signal, const ArrayXd& noise,
                           double snr_db, const ArrayXd* reverb_impulse = nullptr);

// ---------------------------------------------------------------------------
// Corpus index and online sampling

struct UtteranceInfo {
  std::string id;       // "<speaker>/<stem>"
  std::string path;     // absolute or root-relative
  std::string channel;  // parsed "micN" suffix when present, else ""
  Index num_samples = 0;
};

// Corpus layout: <root>/<speaker>/<utterance>.wav. A trailing "_micN" in the
// stem is parsed as a channel id (the two-microphone evaluation constraint).
struct CorpusIndex {
  std::vector<std::string> speakers;
  std::map<std::string, std::vector<UtteranceInfo>> by_speaker;

  static CorpusIndex scan(const std::string& root);
  Index total_utterances() const;
};

// Counter-based draw: the same (seed, iteration) yields the same spec
// forever, independent of call order. Speakers need >= 2 utterances to be
// eligible as targets (enrollment must differ from the target utterance);
// ineligible draws re-draw from the same keyed stream.
MixtureSpec sample_online(const CorpusIndex& corpus, std::uint64_t seed,
                          std::uint64_t iteration);

// ---------------------------------------------------------------------------
// Manifest files
//
// One record per line, tab-separated:
//   target  interferer  offset  enroll1;enroll2;...  noise|-  snr_db|-  reverb|-  seed
// Lines starting with '#' carry "key=value" headers (corpus_root, seed).

void write_manifest(const std::string& path, const Manifest& manifest);
Manifest read_manifest(const std::string& path);

// VoiceFilter-style triplet list: three whitespace-separated WAV paths per
// line (target, interferer, enrollment).
Manifest read_triplet_list(const std::string& path,
                           const std::string& corpus_root);

// ---------------------------------------------------------------------------
// Rendering

struct RenderOptions {
  bool trim = false;  // VCTK-style pre-trim of all source utterances
  double trim_threshold_db = -40.0;
  double trim_min_gap_ms = 200.0;
  double enroll_seconds = 20.0;
};

struct RenderedExample {
  ArrayXd mixture, target, enrollment;
};

RenderedExample render_spec(const MixtureSpec& spec, const std::string& root,
                            const RenderOptions& opts = {});

}  // namespace tss::mix
