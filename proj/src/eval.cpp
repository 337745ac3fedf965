#include "tss/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "tss/rng.hpp"

namespace tss::eval {

double simple_sdr(const ArrayXd& est, const ArrayXd& ref) {
  if (est.size() != ref.size())
    throw MetricError("simple_sdr: length mismatch");
  double rr = ref.square().sum();
  if (rr == 0.0) throw MetricError("simple_sdr: reference is identically zero");
  double err = (est - ref).square().sum();
  double db;
  if (err <= 0.0) {
    db = 60.0;
  } else {
    db = 10.0 * std::log10(rr / err);
    db = std::min(60.0, std::max(-60.0, db));
  }
  return std::round(db * 1e9) / 1e9;
}

// ---------------------------------------------------------------------------

std::vector<TrialPair> generate_trials(const SpeakerMap& speakers, Index n_pairs,
                                       std::uint64_t seed,
                                       bool channel_constraint) {
  std::vector<std::string> names;
  for (const auto& [name, utts] : speakers)
    if (!utts.empty()) names.push_back(name);
  if (names.size() < 2)
    throw DataError("generate_trials: need at least 2 speakers with utterances");

  // same-pair feasibility: speaker needs two utterances (distinct channels
  // under the constraint)
  auto same_feasible = [&](const std::string& s) {
    const auto& utts = speakers.at(s);
    if (utts.size() < 2) return false;
    if (!channel_constraint) return true;
    std::set<std::string> channels;
    for (const auto& u : utts) channels.insert(u.channel);
    return channels.size() >= 2;
  };
  std::vector<std::string> same_ok;
  for (const auto& s : names)
    if (same_feasible(s)) same_ok.push_back(s);
  if (same_ok.empty())
    throw DataError(
        channel_constraint
            ? "generate_trials: no speaker has utterances on two distinct "
              "channels (binding constraint: distinct-channel same pairs)"
            : "generate_trials: no speaker has 2 utterances (binding "
              "constraint: same pairs)");

  Rng rng(seed);
  std::vector<TrialPair> out;
  Index n_same = n_pairs / 2 + (n_pairs % 2);
  auto pick = [&](const std::vector<TrialUtterance>& utts) {
    return utts[static_cast<size_t>(rng.uniform_int(utts.size()))];
  };
  for (Index i = 0; i < n_pairs; ++i) {
    bool want_same = i < n_same;
    TrialPair pair;
    pair.same = want_same;
    for (int attempt = 0;; ++attempt) {
      if (attempt > 4096)
        throw DataError(
            "generate_trials: could not satisfy constraints after 4096 draws "
            "(binding constraint: " +
            std::string(channel_constraint ? "distinct channels" : "distinct utterances") +
            ")");
      if (want_same) {
        const auto& s = same_ok[static_cast<size_t>(rng.uniform_int(same_ok.size()))];
        const auto& utts = speakers.at(s);
        TrialUtterance a = pick(utts), b = pick(utts);
        if (a.id == b.id) continue;
        if (channel_constraint && a.channel == b.channel) continue;
        pair.utt_a = a.id;
        pair.utt_b = b.id;
      } else {
        const auto& sa = names[static_cast<size_t>(rng.uniform_int(names.size()))];
        const auto& sb = names[static_cast<size_t>(rng.uniform_int(names.size()))];
        if (sa == sb) continue;
        TrialUtterance a = pick(speakers.at(sa)), b = pick(speakers.at(sb));
        if (channel_constraint && a.channel == b.channel) continue;
        pair.utt_a = a.id;
        pair.utt_b = b.id;
      }
      break;
    }
    out.push_back(std::move(pair));
  }
  return out;
}

void write_trials(const std::string& path, const std::vector<TrialPair>& trials) {
  std::ofstream out(path);
  if (!out) throw DataError(path + ": cannot open for writing");
  for (const auto& t : trials)
    out << t.utt_a << "\t" << t.utt_b << "\t" << (t.same ? "same" : "different")
        << "\n";
}

std::vector<TrialPair> read_trials(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError(path + ": cannot open");
  std::vector<TrialPair> out;
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream row(line);
    TrialPair t;
    std::string label;
    if (!(row >> t.utt_a >> t.utt_b >> label) ||
        (label != "same" && label != "different"))
      throw DataError(path + ":" + std::to_string(line_no) +
                      ": expected 'utt_a utt_b same|different'");
    t.same = label == "same";
    out.push_back(std::move(t));
  }
  return out;
}

// ---------------------------------------------------------------------------

double eer(const std::vector<double>& scores, const std::vector<bool>& same) {
  if (scores.size() != same.size() || scores.empty())
    throw MetricError("eer: scores and labels must be nonempty and aligned");
  Index n_same = 0, n_diff = 0;
  for (size_t i = 0; i < scores.size(); ++i) {
    if (!std::isfinite(scores[i])) throw MetricError("eer: non-finite score");
    (same[i] ? n_same : n_diff)++;
  }
  if (n_same == 0 || n_diff == 0)
    throw MetricError("eer: need at least one pair of each label");

  std::vector<double> same_scores, diff_scores;
  for (size_t i = 0; i < scores.size(); ++i)
    (same[i] ? same_scores : diff_scores).push_back(scores[i]);
  std::sort(same_scores.begin(), same_scores.end());
  std::sort(diff_scores.begin(), diff_scores.end());

  std::vector<double> thresholds(scores);
  std::sort(thresholds.begin(), thresholds.end());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()),
                   thresholds.end());

  // operating points at every score value, plus a virtual all-reject end
  auto far_at = [&](double t) {
    auto it = std::lower_bound(diff_scores.begin(), diff_scores.end(), t);
    return static_cast<double>(diff_scores.end() - it) /
           static_cast<double>(n_diff);
  };
  auto frr_at = [&](double t) {
    auto it = std::lower_bound(same_scores.begin(), same_scores.end(), t);
    return static_cast<double>(it - same_scores.begin()) /
           static_cast<double>(n_same);
  };

  double prev_far = far_at(thresholds[0]);
  double prev_frr = frr_at(thresholds[0]);
  double prev_d = prev_far - prev_frr;
  if (prev_d <= 0.0) return 100.0 * prev_far;  // crossing at/before the start
  for (size_t k = 1; k <= thresholds.size(); ++k) {
    double far, frr;
    if (k < thresholds.size()) {
      far = far_at(thresholds[k]);
      frr = frr_at(thresholds[k]);
    } else {
      far = 0.0;
      frr = 1.0;
    }
    double d = far - frr;
    if (d <= 0.0) {
      if (d == 0.0) return 100.0 * far;
      double alpha = prev_d / (prev_d - d);
      return 100.0 * (prev_far + alpha * (far - prev_far));
    }
    prev_far = far;
    prev_frr = frr;
    prev_d = d;
  }
  return 100.0 * prev_far;  // unreachable: the virtual end point crosses
}

// ---------------------------------------------------------------------------

Index EvalReport::ok_rows() const {
  Index n = 0;
  for (const auto& r : rows) n += r.ok ? 1 : 0;
  return n;
}

Index EvalReport::failed_rows() const {
  return static_cast<Index>(rows.size()) - ok_rows();
}

double EvalReport::mean_si_snri() const {
  double acc = 0;
  Index n = 0;
  for (const auto& r : rows)
    if (r.ok) {
      acc += r.si_snri;
      ++n;
    }
  return n ? acc / static_cast<double>(n) : 0.0;
}

double EvalReport::mean_sdri() const {
  double acc = 0;
  Index n = 0;
  for (const auto& r : rows)
    if (r.ok) {
      acc += r.sdri;
      ++n;
    }
  return n ? acc / static_cast<double>(n) : 0.0;
}

void write_report_csv(const std::string& path, const EvalReport& report) {
  std::ofstream out(path);
  if (!out) throw DataError(path + ": cannot open for writing");
  for (const auto& [k, v] : report.tags) out << "# " << k << "=" << v << "\n";
  out << "id,status,mix_si_snr,out_si_snr,si_snri,sdri,error\n";
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.9f", v);
    return std::string(buf);
  };
  for (const auto& r : report.rows) {
    if (r.ok) {
      out << r.id << ",ok," << num(r.mix_si_snr) << "," << num(r.out_si_snr)
          << "," << num(r.si_snri) << "," << num(r.sdri) << ",\n";
    } else {
      std::string msg = r.error;
      for (auto& c : msg)
        if (c == ',' || c == '\n') c = ';';
      out << r.id << ",error,,,,," << msg << "\n";
    }
  }
  out << "# mean_si_snri=" << num(report.mean_si_snri())
      << " mean_sdri=" << num(report.mean_sdri()) << " rows=" << report.rows.size()
      << " failed=" << report.failed_rows() << "\n";
}

EvalReport read_report_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError(path + ": cannot open");
  EvalReport report;
  std::string line;
  bool header_seen = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      if (line.find("mean_si_snri=") != std::string::npos) continue;  // footer
      auto eq = line.find('=');
      if (eq != std::string::npos)
        report.tags[line.substr(2, eq - 2)] = line.substr(eq + 1);
      continue;
    }
    if (!header_seen) {
      header_seen = true;  // column header
      continue;
    }
    std::vector<std::string> fields;
    std::string cur;
    for (char c : line) {
      if (c == ',') {
        fields.push_back(cur);
        cur.clear();
      } else {
        cur += c;
      }
    }
    fields.push_back(cur);
    if (fields.size() != 7)
      throw DataError(path + ": malformed report row '" + line + "'");
    ReportRow r;
    r.id = fields[0];
    r.ok = fields[1] == "ok";
    if (r.ok) {
      r.mix_si_snr = std::stod(fields[2]);
      r.out_si_snr = std::stod(fields[3]);
      r.si_snri = std::stod(fields[4]);
      r.sdri = std::stod(fields[5]);
    } else {
      r.error = fields[6];
    }
    report.rows.push_back(std::move(r));
  }
  return report;
}

EvalReport evaluate_separation(
    const std::vector<std::string>& ids,
    const std::function<void(const std::string& id, ArrayXd& mixture,
                             ArrayXd& target, ArrayXd& est)>& run_example,
    std::map<std::string, std::string> tags) {
  EvalReport report;
  report.tags = std::move(tags);
  for (const auto& id : ids) {
    ReportRow row;
    row.id = id;
    try {
      ArrayXd mixture, target, est;
      run_example(id, mixture, target, est);
      row.mix_si_snr = sep::si_snr(mixture, target);
      row.out_si_snr = sep::si_snr(est, target);
      row.si_snri = row.out_si_snr - row.mix_si_snr;
      row.sdri = sdri(est, mixture, target);
    } catch (const Error& e) {
      row.ok = false;
      row.error = e.what();
    }
    report.rows.push_back(std::move(row));
  }
  return report;
}

}  // namespace tss::eval
