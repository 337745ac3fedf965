#include "tss/datamix.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "tss/wav.hpp"

namespace tss::mix {

namespace fs = std::filesystem;

ArrayXd adjust_interferer(const ArrayXd& interferer, Index offset,
                          Index target_len) {
  if (interferer.size() == 0)
    throw DataError("adjust_interferer: empty interferer");
  ArrayXd out(target_len);
  Index n = interferer.size();
  for (Index i = 0; i < target_len; ++i) out[i] = interferer[(offset + i) % n];
  return out;
}

std::pair<ArrayXd, ArrayXd> make_mixture(const ArrayXd& target,
                                         const ArrayXd& interferer,
                                         Index offset) {
  if (target.size() == 0) throw DataError("make_mixture: empty target");
  ArrayXd adjusted = adjust_interferer(interferer, offset, target.size());
  return {target + adjusted, adjusted};
}

ArrayXd trim_silence(const ArrayXd& signal, double threshold_db,
                     double min_gap_ms) {
  const Index win = 400;  // 25 ms at 16 kHz
  if (signal.size() == 0) throw DataError("trim_silence: empty signal");
  Index windows = (signal.size() + win - 1) / win;
  std::vector<double> rms(static_cast<size_t>(windows));
  double peak = 0.0;
  for (Index w = 0; w < windows; ++w) {
    Index lo = w * win, hi = std::min<Index>(signal.size(), lo + win);
    double acc = 0.0;
    for (Index i = lo; i < hi; ++i) acc += signal[i] * signal[i];
    rms[static_cast<size_t>(w)] = std::sqrt(acc / static_cast<double>(hi - lo));
    peak = std::max(peak, rms[static_cast<size_t>(w)]);
  }
  if (peak == 0.0) throw DataError("trim_silence: fully silent input");
  double gate = peak * std::pow(10.0, threshold_db / 20.0);
  Index min_gap_windows =
      std::max<Index>(1, static_cast<Index>(std::lround(min_gap_ms / 25.0)));

  std::vector<bool> keep(static_cast<size_t>(windows), true);
  Index w = 0;
  while (w < windows) {
    if (rms[static_cast<size_t>(w)] >= gate) {
      ++w;
      continue;
    }
    Index run_start = w;
    while (w < windows && rms[static_cast<size_t>(w)] < gate) ++w;
    if (w - run_start >= min_gap_windows)
      for (Index k = run_start; k < w; ++k) keep[static_cast<size_t>(k)] = false;
  }

  std::vector<double> kept;
  kept.reserve(static_cast<size_t>(signal.size()));
  for (Index ww = 0; ww < windows; ++ww) {
    if (!keep[static_cast<size_t>(ww)]) continue;
    Index lo = ww * win, hi = std::min<Index>(signal.size(), lo + win);
    for (Index i = lo; i < hi; ++i) kept.push_back(signal[i]);
  }
  if (kept.empty()) throw DataError("trim_silence: nothing above the gate");
  ArrayXd out(static_cast<Index>(kept.size()));
  for (size_t i = 0; i < kept.size(); ++i) out[static_cast<Index>(i)] = kept[i];
  return out;
}

ArrayXd build_enrollment(const std::vector<ArrayXd>& utterances,
                         double target_seconds, int sample_rate) {
  if (utterances.empty())
    throw DataError("build_enrollment: empty utterance list");
  Index want = static_cast<Index>(std::llround(target_seconds * sample_rate));
  std::vector<double> acc;
  acc.reserve(static_cast<size_t>(want));
  for (const auto& u : utterances) {
    for (Index i = 0; i < u.size() && static_cast<Index>(acc.size()) < want; ++i)
      acc.push_back(u[i]);
    if (static_cast<Index>(acc.size()) >= want) break;
  }
  if (static_cast<Index>(acc.size()) < want)
    std::cerr << "build_enrollment: only "
              << static_cast<double>(acc.size()) / sample_rate
              << " s available of the requested " << target_seconds << " s\n";
  ArrayXd out(static_cast<Index>(acc.size()));
  for (size_t i = 0; i < acc.size(); ++i) out[static_cast<Index>(i)] = acc[i];
  return out;
}

ArrayXd corrupt_enrollment(const ArrayXd& signal, const ArrayXd& noise,
                           double snr_db, const ArrayXd* reverb_impulse) {
  if (noise.size() == 0) throw DataError("corrupt_enrollment: empty noise");
  if (!std::isfinite(snr_db))
    throw DataError("corrupt_enrollment: non-finite SNR requested");
  ArrayXd wet = signal;
  if (reverb_impulse != nullptr && reverb_impulse->size() > 0) {
    const ArrayXd& h = *reverb_impulse;
    wet = ArrayXd::Zero(signal.size());
    for (Index i = 0; i < signal.size(); ++i) {
      double acc = 0.0;
      Index kmax = std::min<Index>(h.size() - 1, i);
      for (Index k = 0; k <= kmax; ++k) acc += h[k] * signal[i - k];
      wet[i] = acc;
    }
  }
  double p_signal = wet.square().mean();
  ArrayXd tiled = adjust_interferer(noise, 0, wet.size());
  double p_noise = tiled.square().mean();
  if (p_signal == 0.0 || p_noise == 0.0)
    throw DataError("corrupt_enrollment: zero-power signal or noise");
  double gain = std::sqrt(p_signal / (p_noise * std::pow(10.0, snr_db / 10.0)));
  return wet + gain * tiled;
}

// ---------------------------------------------------------------------------

CorpusIndex CorpusIndex::scan(const std::string& root) {
  if (!fs::is_directory(root))
    throw DataError("corpus scan: " + root + " is not a directory");
  CorpusIndex index;
  std::vector<fs::path> speaker_dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) speaker_dirs.push_back(e.path());
  std::sort(speaker_dirs.begin(), speaker_dirs.end());
  for (const auto& dir : speaker_dirs) {
    std::string speaker = dir.filename().string();
    std::vector<UtteranceInfo> utts;
    std::vector<fs::path> files;
    for (const auto& f : fs::directory_iterator(dir))
      if (f.is_regular_file() && f.path().extension() == ".wav")
        files.push_back(f.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      UtteranceInfo info;
      std::string stem = f.stem().string();
      info.id = speaker + "/" + stem;
      info.path = f.string();
      auto us = stem.rfind('_');
      if (us != std::string::npos && stem.compare(us + 1, 3, "mic") == 0)
        info.channel = stem.substr(us + 1);
      info.num_samples = wav_num_samples(f.string());
      utts.push_back(std::move(info));
    }
    if (!utts.empty()) {
      index.speakers.push_back(speaker);
      index.by_speaker.emplace(speaker, std::move(utts));
    }
  }
  if (index.speakers.empty())
    throw DataError("corpus scan: no <speaker>/<utterance>.wav files under " +
                    root);
  return index;
}

Index CorpusIndex::total_utterances() const {
  Index n = 0;
  for (const auto& [_, utts] : by_speaker) n += static_cast<Index>(utts.size());
  return n;
}

MixtureSpec sample_online(const CorpusIndex& corpus, std::uint64_t seed,
                          std::uint64_t iteration) {
  Index n_speakers = static_cast<Index>(corpus.speakers.size());
  if (n_speakers < 2)
    throw DataError("sample_online: need at least 2 speakers");
  Rng rng(seed, iteration);

  // target speaker: re-draw single-utterance speakers (enrollment must be a
  // different utterance of the same speaker)
  Index target_speaker = -1;
  for (int attempt = 0; attempt < 1024; ++attempt) {
    Index s = static_cast<Index>(rng.uniform_int(static_cast<std::uint64_t>(n_speakers)));
    if (corpus.by_speaker.at(corpus.speakers[static_cast<size_t>(s)]).size() >= 2) {
      target_speaker = s;
      break;
    }
  }
  if (target_speaker < 0)
    throw DataError("sample_online: no speaker has 2 utterances");
  const auto& target_utts =
      corpus.by_speaker.at(corpus.speakers[static_cast<size_t>(target_speaker)]);

  Index t_utt = static_cast<Index>(rng.uniform_int(target_utts.size()));
  Index e_utt = t_utt;
  while (e_utt == t_utt)
    e_utt = static_cast<Index>(rng.uniform_int(target_utts.size()));

  Index interferer_speaker = target_speaker;
  while (interferer_speaker == target_speaker)
    interferer_speaker =
        static_cast<Index>(rng.uniform_int(static_cast<std::uint64_t>(n_speakers)));
  const auto& interferer_utts = corpus.by_speaker.at(
      corpus.speakers[static_cast<size_t>(interferer_speaker)]);
  Index i_utt = static_cast<Index>(rng.uniform_int(interferer_utts.size()));

  const auto& target = target_utts[static_cast<size_t>(t_utt)];
  const auto& interferer = interferer_utts[static_cast<size_t>(i_utt)];
  Index offset_range = interferer.num_samples > target.num_samples
                           ? interferer.num_samples - target.num_samples + 1
                           : interferer.num_samples;
  MixtureSpec spec;
  spec.id = "it" + std::to_string(iteration);
  spec.target_path = target.path;
  spec.interferer_path = interferer.path;
  spec.enrollment_paths = {target_utts[static_cast<size_t>(e_utt)].path};
  spec.interferer_offset = static_cast<Index>(
      rng.uniform_int(static_cast<std::uint64_t>(std::max<Index>(1, offset_range))));
  spec.seed = rng.next_u64();
  return spec;
}

// ---------------------------------------------------------------------------

namespace {

std::string join_paths(const std::vector<std::string>& parts) {
  std::string out;
  for (size_t i = 0; i < parts.size(); ++i) {
    if (i) out += ";";
    out += parts[i];
  }
  return out;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

void write_manifest(const std::string& path, const Manifest& manifest) {
  std::ofstream out(path);
  if (!out) throw DataError(path + ": cannot open for writing");
  out << "# corpus_root=" << manifest.corpus_root << "\n";
  out << "# seed=" << manifest.seed << "\n";
  for (const auto& s : manifest.specs) {
    out << s.target_path << "\t" << s.interferer_path << "\t"
        << s.interferer_offset << "\t" << join_paths(s.enrollment_paths) << "\t";
    if (s.corruption.enabled) {
      out << s.corruption.noise_path << "\t" << s.corruption.snr_db << "\t"
          << (s.corruption.reverb_path.empty() ? "-" : s.corruption.reverb_path);
    } else {
      out << "-\t-\t-";
    }
    out << "\t" << s.seed << "\n";
  }
  if (!out) throw DataError(path + ": write failed");
}

Manifest read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError(path + ": cannot open");
  Manifest m;
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line[0] == '#') {
      auto eq = line.find('=');
      if (eq != std::string::npos) {
        std::string key = line.substr(2, eq - 2);
        std::string value = line.substr(eq + 1);
        if (key == "corpus_root") m.corpus_root = value;
        if (key == "seed") m.seed = std::stoull(value);
      }
      continue;
    }
    auto fields = split(line, '\t');
    if (fields.size() != 8)
      throw DataError(path + ":" + std::to_string(line_no) + ": expected 8 " +
                      "tab-separated fields, got " +
                      std::to_string(fields.size()));
    MixtureSpec s;
    s.id = "line" + std::to_string(line_no);
    s.target_path = fields[0];
    s.interferer_path = fields[1];
    s.interferer_offset = std::stoll(fields[2]);
    for (auto& e : split(fields[3], ';'))
      if (!e.empty()) s.enrollment_paths.push_back(e);
    if (fields[4] != "-") {
      s.corruption.enabled = true;
      s.corruption.noise_path = fields[4];
      s.corruption.snr_db = std::stod(fields[5]);
      if (fields[6] != "-") s.corruption.reverb_path = fields[6];
    }
    s.seed = std::stoull(fields[7]);
    m.specs.push_back(std::move(s));
  }
  return m;
}

Manifest read_triplet_list(const std::string& path,
                           const std::string& corpus_root) {
  std::ifstream in(path);
  if (!in) throw DataError(path + ": cannot open");
  Manifest m;
  m.corpus_root = corpus_root;
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream row(line);
    MixtureSpec s;
    std::string target, interferer, enrollment;
    if (!(row >> target >> interferer >> enrollment))
      throw DataError(path + ":" + std::to_string(line_no) +
                      ": expected 'target interferer enrollment'");
    s.id = "line" + std::to_string(line_no);
    s.target_path = target;
    s.interferer_path = interferer;
    s.enrollment_paths = {enrollment};
    m.specs.push_back(std::move(s));
  }
  return m;
}

// ---------------------------------------------------------------------------

namespace {

ArrayXd load_audio(const std::string& root, const std::string& path) {
  fs::path p(path);
  if (p.is_relative() && !root.empty()) p = fs::path(root) / p;
  return read_wav(p.string()).samples;
}

}  // namespace

RenderedExample render_spec(const MixtureSpec& spec, const std::string& root,
                            const RenderOptions& opts) {
  auto prepare = [&](const std::string& path) {
    ArrayXd x = load_audio(root, path);
    if (opts.trim)
      x = trim_silence(x, opts.trim_threshold_db, opts.trim_min_gap_ms);
    return x;
  };
  ArrayXd target = prepare(spec.target_path);
  ArrayXd interferer = prepare(spec.interferer_path);
  RenderedExample ex;
  auto [mixture, adjusted] =
      make_mixture(target, interferer, spec.interferer_offset);
  (void)adjusted;
  ex.mixture = std::move(mixture);
  ex.target = std::move(target);

  std::vector<ArrayXd> enroll_utts;
  for (const auto& p : spec.enrollment_paths) enroll_utts.push_back(prepare(p));
  ex.enrollment = build_enrollment(enroll_utts, opts.enroll_seconds);
  if (spec.corruption.enabled) {
    ArrayXd noise = load_audio(root, spec.corruption.noise_path);
    if (!spec.corruption.reverb_path.empty()) {
      ArrayXd reverb = load_audio(root, spec.corruption.reverb_path);
      ex.enrollment = corrupt_enrollment(ex.enrollment, noise,
                                         spec.corruption.snr_db, &reverb);
    } else {
      ex.enrollment =
          corrupt_enrollment(ex.enrollment, noise, spec.corruption.snr_db);
    }
  }
  return ex;
}

}  // namespace tss::mix
