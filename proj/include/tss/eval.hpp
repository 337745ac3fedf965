#pragma once

// Metrics and protocols: SI-SNR improvement, the simplified SDR improvement,
// EER over cosine-scored trial pairs, balanced trial-pair generation, and
// CSV evaluation reports.

#include <Eigen/Dense>

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "tss/error.hpp"
#include "tss/separators.hpp"

namespace tss::eval {

using Eigen::ArrayXd;
using Index = Eigen::Index;

// si_snr(est, ref) - si_snr(mixture, ref).
inline double si_snri(const ArrayXd& est, const ArrayXd& mixture,
                      const ArrayXd& ref) {
  return sep::si_snr(est, ref) - sep::si_snr(mixture, ref);
}

// Simplified SDR surrogate: direct SNR of est against ref without scale
// fitting, same +/-60 dB clamp and nano-dB resolution as si_snr.
double simple_sdr(const ArrayXd& est, const ArrayXd& ref);

inline double sdri(const ArrayXd& est, const ArrayXd& mixture,
                   const ArrayXd& ref) {
  return simple_sdr(est, ref) - simple_sdr(mixture, ref);
}

// ---------------------------------------------------------------------------
// Verification protocol

struct TrialPair {
  std::string utt_a, utt_b;
  bool same = false;
};

struct TrialUtterance {
  std::string id;
  std::string channel;  // optional; used by the distinct-channel constraint
};

using SpeakerMap = std::map<std::string, std::vector<TrialUtterance>>;

// Balanced same/different pairs (50/50, +/-1 for odd n), deterministic under
// the seed. With channel_constraint, both sides of every pair must carry
// differing channel ids; infeasible constraints raise a generation error
// naming the binding constraint.
std::vector<TrialPair> generate_trials(const SpeakerMap& speakers, Index n_pairs,
                                       std::uint64_t seed,
                                       bool channel_constraint = false);

void write_trials(const std::string& path, const std::vector<TrialPair>& trials);
std::vector<TrialPair> read_trials(const std::string& path);

// Equal error rate in percent. Thresholds sweep the score values;
// FAR(t) = fraction of different-pairs with score >= t, FRR(t) = fraction of
// same-pairs with score < t; the FAR = FRR crossing is linearly interpolated
// between the two bracketing operating points.
double eer(const std::vector<double>& scores, const std::vector<bool>& same);

// ---------------------------------------------------------------------------
// Reports

struct ReportRow {
  std::string id;
  bool ok = true;
  double mix_si_snr = 0.0;
  double out_si_snr = 0.0;
  double si_snri = 0.0;
  double sdri = 0.0;
  std::string error;
};

struct EvalReport {
  std::map<std::string, std::string> tags;  // dataset, embedding, ...
  std::vector<ReportRow> rows;

  Index ok_rows() const;
  Index failed_rows() const;
  double mean_si_snri() const;
  double mean_sdri() const;
};

void write_report_csv(const std::string& path, const EvalReport& report);
EvalReport read_report_csv(const std::string& path);

// Runs per-example separation metrics over a manifest-shaped example list.
// `run_example` returns the estimate for one example or throws; failures are
// recorded per row and the run continues (callers map failed_rows() > 0 to a
// partial-failure exit status).
EvalReport evaluate_separation(
    const std::vector<std::string>& ids,
    const std::function<void(const std::string& id, ArrayXd& mixture,
                             ArrayXd& target, ArrayXd& est)>& run_example,
    std::map<std::string, std::string> tags = {});

}  // namespace tss::eval
