#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "psv/errors.hpp"
#include "psv/rng.hpp"

namespace psv {

inline constexpr int kSampleRate = 16000;

// Synthetic speaker identity: a 16-tap FIR timbre filter plus a fundamental
// range. Everything derives deterministically from (corpus_seed, speaker_id,
// domain). Identity lives in the FIR's fine spectral structure; per-utterance
// nuisances (random smooth channel, +-35% pitch, noise) force a model to
// learn channel-invariant timbre rather than averaging spectra. Domain A is
// pulse-train excited (energy across the band); domain B is sawtooth excited
// with a dark coloration, a genuine covariate shift for an A-trained encoder.
struct SpeakerProfile {
  std::int64_t speaker_id = 0;
  char domain = 'A';
  std::array<float, 16> fir{};
  double f0 = 0.0;  // base fundamental in [80, 300] Hz
};

inline SpeakerProfile make_speaker_profile(std::uint64_t corpus_seed,
                                           std::int64_t speaker_id,
                                           char domain) {
  if (domain != 'A' && domain != 'B')
    throw InputError(detail::msg("unknown domain '", domain, "'"));
  Rng rng = Rng(corpus_seed)
                .fork("speaker")
                .fork(static_cast<std::uint64_t>(speaker_id))
                .fork(domain == 'A' ? "domain-A" : "domain-B");
  SpeakerProfile p;
  p.speaker_id = speaker_id;
  p.domain = domain;
  p.f0 = rng.uniform(90.0, 260.0);
  double l2 = 0.0;
  for (int i = 0; i < 16; ++i) {
    // Slow decay keeps fine spectral structure as the identity cue.
    double tap = rng.normal() * std::exp(-i / 8.0);
    if (i == 0) tap += 1.0;
    p.fir[static_cast<std::size_t>(i)] = static_cast<float>(tap);
    l2 += tap * tap;
  }
  float inv = static_cast<float>(1.0 / std::sqrt(l2));
  for (auto& t : p.fir) t *= inv;
  return p;
}

// Excitation -> per-utterance channel -> speaker FIR -> noise floor ->
// utterance gain -> peak normalization to 0.9. Bit-identical for identical
// (profile, utt_seed, duration).
inline std::vector<float> synth_utterance(const SpeakerProfile& prof,
                                          std::uint64_t utt_seed,
                                          double duration_s,
                                          int sample_rate = kSampleRate) {
  if (duration_s < 0.5)
    throw InputError(detail::msg("synth_utterance: duration ", duration_s,
                                 "s below the 0.5s minimum"));
  const std::int64_t n =
      static_cast<std::int64_t>(duration_s * sample_rate + 0.5);
  Rng rng(utt_seed);

  // Pitch is unreliable as an identity cue: +-35% per utterance.
  const double f0 = prof.f0 * std::pow(2.0, rng.uniform(-0.35, 0.35));
  std::vector<float> exc(static_cast<std::size_t>(n), 0.0f);
  if (prof.domain == 'A') {
    double period = sample_rate / f0;
    double pos = rng.uniform(0.0, period);
    while (pos < static_cast<double>(n)) {
      auto idx = static_cast<std::int64_t>(pos);
      float amp = static_cast<float>(1.0 + 0.2 * rng.normal());
      if (idx >= 0 && idx < n) exc[static_cast<std::size_t>(idx)] += amp;
      pos += period * (1.0 + 0.02 * rng.normal());
    }
  } else {
    // Sawtooth with a fixed dark coloration: most energy sits low, unlike
    // the flat pulse comb of domain A.
    double phase = rng.uniform();
    double inc = f0 / sample_rate;
    float lp = 0.0f;
    for (std::int64_t i = 0; i < n; ++i) {
      phase += inc * (1.0 + 0.01 * rng.normal());
      if (phase >= 1.0) phase -= 1.0;
      float saw = static_cast<float>(2.0 * phase - 1.0);
      lp = 0.7f * lp + 0.3f * saw;
      exc[static_cast<std::size_t>(i)] = lp;
    }
  }

  // Per-utterance smooth channel: short random FIR plus a spectral tilt.
  std::array<float, 4> chan{1.0f, 0.0f, 0.0f, 0.0f};
  for (int i = 1; i < 4; ++i)
    chan[static_cast<std::size_t>(i)] = static_cast<float>(0.45 * rng.normal());
  const float tilt = static_cast<float>(rng.uniform(-0.5, 0.5));
  std::vector<float> shaped(static_cast<std::size_t>(n), 0.0f);
  for (std::int64_t i = 0; i < n; ++i) {
    float acc = 0.0f;
    for (int k = 0; k < 4 && k <= i; ++k)
      acc += chan[static_cast<std::size_t>(k)] *
             exc[static_cast<std::size_t>(i - k)];
    shaped[static_cast<std::size_t>(i)] = acc;
  }
  for (std::int64_t i = n - 1; i > 0; --i)
    shaped[static_cast<std::size_t>(i)] -=
        tilt * shaped[static_cast<std::size_t>(i - 1)];

  // Speaker timbre.
  std::vector<float> out(static_cast<std::size_t>(n), 0.0f);
  for (std::int64_t i = 0; i < n; ++i) {
    float acc = 0.0f;
    for (int k = 0; k < 16 && k <= i; ++k)
      acc += prof.fir[static_cast<std::size_t>(k)] *
             shaped[static_cast<std::size_t>(i - k)];
    out[static_cast<std::size_t>(i)] = acc;
  }

  // Noise floor at 15-25 dB SNR.
  {
    double p_sig = 0.0;
    for (float v : out) p_sig += static_cast<double>(v) * v;
    p_sig /= static_cast<double>(n);
    double snr_db = rng.uniform(15.0, 25.0);
    float nscale = static_cast<float>(
        std::sqrt(p_sig / std::pow(10.0, snr_db / 10.0)));
    for (auto& v : out) v += nscale * static_cast<float>(rng.normal());
  }

  float gain = static_cast<float>(std::pow(10.0, rng.uniform(-6.0, 0.0) / 20.0));
  float peak = 0.0f;
  for (auto& v : out) {
    v *= gain;
    peak = std::max(peak, std::abs(v));
  }
  if (peak > 0.0f) {
    float s = 0.9f / peak;
    for (auto& v : out) v *= s;
  }
  return out;
}

// Additive white/pink noise at an SNR drawn from [5, 20] dB followed by a
// random exponential-decay reverberation FIR (<= 64 taps, decay in
// [0.3, 0.9]). The whole augmentation fires with the given probability;
// output peak is renormalized to at most 1.0.
inline std::vector<float> augment(const std::vector<float>& w, Rng& rng,
                                  double probability = 0.6) {
  if (rng.uniform() >= probability) return w;
  const std::size_t n = w.size();
  std::vector<float> noise(n);
  bool pink = rng.uniform() < 0.5;
  if (!pink) {
    for (auto& v : noise) v = static_cast<float>(rng.normal());
  } else {
    // Paul Kellet's 3-pole pink approximation.
    double b0 = 0, b1 = 0, b2 = 0;
    for (auto& v : noise) {
      double white = rng.normal();
      b0 = 0.99765 * b0 + white * 0.0990460;
      b1 = 0.96300 * b1 + white * 0.2965164;
      b2 = 0.57000 * b2 + white * 1.0526913;
      v = static_cast<float>(b0 + b1 + b2 + white * 0.1848);
    }
  }
  double snr_db = rng.uniform(5.0, 20.0);
  double p_sig = 0.0, p_noise = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    p_sig += static_cast<double>(w[i]) * w[i];
    p_noise += static_cast<double>(noise[i]) * noise[i];
  }
  p_sig /= static_cast<double>(n);
  p_noise /= static_cast<double>(n);
  double target_noise = p_sig / std::pow(10.0, snr_db / 10.0);
  float nscale = p_noise > 0.0
                     ? static_cast<float>(std::sqrt(target_noise / p_noise))
                     : 0.0f;
  std::vector<float> noisy(n);
  for (std::size_t i = 0; i < n; ++i) noisy[i] = w[i] + nscale * noise[i];

  int ntaps = 16 + static_cast<int>(rng.uniform_int(49));  // [16, 64]
  double decay = rng.uniform(0.3, 0.9);
  std::vector<float> taps(static_cast<std::size_t>(ntaps));
  taps[0] = 1.0f;
  double d = 1.0;
  for (int k = 1; k < ntaps; ++k) {
    d *= decay;
    taps[static_cast<std::size_t>(k)] = static_cast<float>(0.5 * rng.normal() * d);
  }
  std::vector<float> out(n, 0.0f);
  for (std::size_t i = 0; i < n; ++i) {
    float acc = 0.0f;
    for (int k = 0; k < ntaps && static_cast<std::size_t>(k) <= i; ++k)
      acc += taps[static_cast<std::size_t>(k)] * noisy[i - static_cast<std::size_t>(k)];
    out[i] = acc;
  }
  float peak = 0.0f;
  for (float v : out) peak = std::max(peak, std::abs(v));
  if (peak > 1.0f) {
    float s = 1.0f / peak;
    for (auto& v : out) v *= s;
  }
  return out;
}

// ---------------------------------------------------------------------------
// WAV I/O (16-bit PCM mono)
// ---------------------------------------------------------------------------

inline void write_wav(const std::filesystem::path& path,
                      const std::vector<float>& samples,
                      int sample_rate = kSampleRate) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError(detail::msg("cannot write wav: ", path.string()));
  auto u32 = [&f](std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    f.write(b, 4);
  };
  auto u16 = [&f](std::uint16_t v) {
    char b[2] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff)};
    f.write(b, 2);
  };
  std::uint32_t data_bytes = static_cast<std::uint32_t>(samples.size() * 2);
  f.write("RIFF", 4);
  u32(36 + data_bytes);
  f.write("WAVE", 4);
  f.write("fmt ", 4);
  u32(16);
  u16(1);  // PCM
  u16(1);  // mono
  u32(static_cast<std::uint32_t>(sample_rate));
  u32(static_cast<std::uint32_t>(sample_rate * 2));
  u16(2);
  u16(16);
  f.write("data", 4);
  u32(data_bytes);
  for (float v : samples) {
    float c = std::min(1.0f, std::max(-1.0f, v));
    auto s = static_cast<std::int16_t>(std::lround(c * 32767.0f));
    u16(static_cast<std::uint16_t>(s));
  }
  if (!f) throw IoError(detail::msg("wav write failed: ", path.string()));
}

inline std::vector<float> read_wav(const std::filesystem::path& path,
                                   int* sample_rate_out = nullptr) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError(detail::msg("cannot read wav: ", path.string()));
  std::string bytes((std::istreambuf_iterator<char>(f)),
                    std::istreambuf_iterator<char>());
  auto u32_at = [&bytes](std::size_t o) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes[o + static_cast<std::size_t>(i)])) << (8 * i);
    return v;
  };
  auto u16_at = [&bytes](std::size_t o) {
    return static_cast<std::uint16_t>(
        static_cast<std::uint8_t>(bytes[o]) |
        (static_cast<std::uint16_t>(static_cast<std::uint8_t>(bytes[o + 1])) << 8));
  };
  if (bytes.size() < 44 || bytes.compare(0, 4, "RIFF") != 0 ||
      bytes.compare(8, 4, "WAVE") != 0)
    throw IoError(detail::msg("not a RIFF/WAVE file: ", path.string()));
  // Walk chunks to find fmt and data.
  std::size_t pos = 12;
  int sr = 0;
  std::size_t data_off = 0, data_len = 0;
  while (pos + 8 <= bytes.size()) {
    std::string id = bytes.substr(pos, 4);
    std::uint32_t len = u32_at(pos + 4);
    if (id == "fmt ") {
      if (u16_at(pos + 8) != 1 || u16_at(pos + 10) != 1 ||
          u16_at(pos + 22) != 16)
        throw IoError(detail::msg("unsupported wav encoding in ",
                                  path.string(), " (need 16-bit PCM mono)"));
      sr = static_cast<int>(u32_at(pos + 12));
    } else if (id == "data") {
      data_off = pos + 8;
      data_len = len;
    }
    pos += 8 + len + (len & 1);
  }
  if (sr == 0 || data_off == 0)
    throw IoError(detail::msg("missing fmt/data chunk in ", path.string()));
  if (sample_rate_out) *sample_rate_out = sr;
  std::vector<float> out(data_len / 2);
  for (std::size_t i = 0; i < out.size(); ++i) {
    auto s = static_cast<std::int16_t>(u16_at(data_off + 2 * i));
    out[i] = static_cast<float>(s) / 32767.0f;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Manifests and trials
// ---------------------------------------------------------------------------

// One manifest row. Rows always carry the synthesis seeds, so a corpus can
// live entirely in-process ("inline-seed" mode); when a wav file was written,
// `path` holds it (relative to the manifest directory) and takes precedence.
struct UttRecord {
  std::string utt_id;
  std::int64_t speaker_id = 0;
  char domain = 'A';
  double duration_s = 0.0;
  std::uint64_t corpus_seed = 0;
  std::uint64_t utt_seed = 0;
  std::string path;
};

struct Manifest {
  std::vector<UttRecord> utts;

  const UttRecord& by_id(const std::string& utt_id) const {
    for (const auto& u : utts)
      if (u.utt_id == utt_id) return u;
    throw InputError(detail::msg("unknown utterance id: ", utt_id));
  }

  bool has(const std::string& utt_id) const {
    for (const auto& u : utts)
      if (u.utt_id == utt_id) return true;
    return false;
  }

  // Distinct (domain, speaker) pairs in first-appearance order.
  std::vector<std::pair<char, std::int64_t>> speakers() const {
    std::vector<std::pair<char, std::int64_t>> out;
    std::set<std::pair<char, std::int64_t>> seen;
    for (const auto& u : utts)
      if (seen.insert({u.domain, u.speaker_id}).second)
        out.push_back({u.domain, u.speaker_id});
    return out;
  }
};

inline void save_manifest(const Manifest& m, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError(detail::msg("cannot write manifest: ", path.string()));
  for (const auto& u : m.utts) {
    nlohmann::json j{{"utt_id", u.utt_id},
                     {"speaker_id", u.speaker_id},
                     {"domain", std::string(1, u.domain)},
                     {"duration_s", u.duration_s},
                     {"corpus_seed", u.corpus_seed},
                     {"utt_seed", u.utt_seed}};
    if (!u.path.empty()) j["path"] = u.path;
    f << j.dump() << "\n";
  }
  if (!f) throw IoError(detail::msg("manifest write failed: ", path.string()));
}

inline Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError(detail::msg("cannot read manifest: ", path.string()));
  Manifest m;
  std::string line;
  std::set<std::string> ids;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    UttRecord u;
    u.utt_id = j.at("utt_id").get<std::string>();
    u.speaker_id = j.at("speaker_id").get<std::int64_t>();
    u.domain = j.at("domain").get<std::string>().at(0);
    u.duration_s = j.at("duration_s").get<double>();
    u.corpus_seed = j.at("corpus_seed").get<std::uint64_t>();
    u.utt_seed = j.at("utt_seed").get<std::uint64_t>();
    u.path = j.value("path", "");
    if (!ids.insert(u.utt_id).second)
      throw InputError(detail::msg("duplicate utt_id in manifest: ", u.utt_id));
    m.utts.push_back(std::move(u));
  }
  return m;
}

// Waveform for a manifest row: read the wav when present, else resynthesize
// from the recorded seeds.
inline std::vector<float> load_waveform(const UttRecord& u,
                                        const std::filesystem::path& base_dir = {}) {
  if (!u.path.empty()) {
    std::filesystem::path p = u.path;
    if (p.is_relative()) p = base_dir / p;
    if (std::filesystem::exists(p)) return read_wav(p);
  }
  SpeakerProfile prof = make_speaker_profile(u.corpus_seed, u.speaker_id, u.domain);
  return synth_utterance(prof, u.utt_seed, u.duration_s);
}

// Verification trial: label 1 = target (same speaker), 0 = nontarget,
// matching common VoxCeleb-style tooling.
struct Trial {
  int label = 0;
  std::string enroll;
  std::string test;
};

using TrialList = std::vector<Trial>;

inline void save_trials(const TrialList& trials, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError(detail::msg("cannot write trials: ", path.string()));
  for (const auto& t : trials)
    f << t.label << " " << t.enroll << " " << t.test << "\n";
}

inline TrialList load_trials(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError(detail::msg("cannot read trials: ", path.string()));
  TrialList out;
  int label;
  std::string enroll, test;
  while (f >> label >> enroll >> test) out.push_back({label, enroll, test});
  return out;
}

// All same-speaker pairs plus an equal count of randomly drawn
// different-speaker pairs.
inline TrialList make_trials(const Manifest& m, Rng rng) {
  TrialList out;
  const auto n = m.utts.size();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (m.utts[i].speaker_id == m.utts[j].speaker_id &&
          m.utts[i].domain == m.utts[j].domain)
        out.push_back({1, m.utts[i].utt_id, m.utts[j].utt_id});
  const std::size_t n_target = out.size();
  std::set<std::pair<std::size_t, std::size_t>> used;
  std::size_t guard = 0;
  while (used.size() < n_target && guard < 1000 * n_target + 1000) {
    ++guard;
    std::size_t i = rng.uniform_int(n);
    std::size_t j = rng.uniform_int(n);
    if (i == j) continue;
    if (i > j) std::swap(i, j);
    if (m.utts[i].speaker_id == m.utts[j].speaker_id &&
        m.utts[i].domain == m.utts[j].domain)
      continue;
    if (!used.insert({i, j}).second) continue;
    out.push_back({0, m.utts[i].utt_id, m.utts[j].utt_id});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Corpus generation
// ---------------------------------------------------------------------------

struct CorpusSpec {
  std::uint64_t corpus_seed = 0;
  int n_speakers = 0;
  int utts_per_speaker = 0;
  char domain = 'A';
  double duration_s = 3.0;
  std::int64_t speaker_id_offset = 0;
  std::string id_prefix;  // defaults to the domain letter
};

// Deterministic inline-seed corpus: no files touched.
inline Manifest make_corpus(const CorpusSpec& spec) {
  if (spec.n_speakers < 2)
    throw InputError("make_corpus: need at least 2 speakers");
  if (spec.utts_per_speaker < 2)
    throw InputError("make_corpus: need at least 2 utterances per speaker");
  Manifest m;
  std::string prefix =
      spec.id_prefix.empty() ? std::string(1, spec.domain) : spec.id_prefix;
  for (int s = 0; s < spec.n_speakers; ++s) {
    std::int64_t sid = spec.speaker_id_offset + s;
    for (int k = 0; k < spec.utts_per_speaker; ++k) {
      UttRecord u;
      char buf[64];
      std::snprintf(buf, sizeof(buf), "%s%04lld_u%02d", prefix.c_str(),
                    static_cast<long long>(sid), k);
      u.utt_id = buf;
      u.speaker_id = sid;
      u.domain = spec.domain;
      u.duration_s = spec.duration_s;
      u.corpus_seed = spec.corpus_seed;
      u.utt_seed = Rng(spec.corpus_seed)
                       .fork("utt")
                       .fork(static_cast<std::uint64_t>(sid))
                       .fork(static_cast<std::uint64_t>(k))
                       .fork(spec.domain == 'A' ? "A" : "B")
                       .seed();
      m.utts.push_back(std::move(u));
    }
  }
  return m;
}

// Same corpus with wav files written under dir/wavs plus manifest.jsonl.
// Regeneration with the same spec is byte-identical.
inline Manifest make_corpus_files(const CorpusSpec& spec,
                                  const std::filesystem::path& dir) {
  Manifest m = make_corpus(spec);
  std::error_code ec;
  std::filesystem::create_directories(dir / "wavs", ec);
  if (ec)
    throw IoError(detail::msg("cannot create ", (dir / "wavs").string(), ": ",
                              ec.message()));
  for (auto& u : m.utts) {
    SpeakerProfile prof =
        make_speaker_profile(u.corpus_seed, u.speaker_id, u.domain);
    auto wave = synth_utterance(prof, u.utt_seed, u.duration_s);
    u.path = "wavs/" + u.utt_id + ".wav";
    write_wav(dir / u.path, wave);
  }
  save_manifest(m, dir / "manifest.jsonl");
  return m;
}

// The default desk-scale corpora: a domain-A intermediate set, a small
// domain-B target set, and held-out eval sets (with trials) for both domains.
struct DeskCorpora {
  Manifest train_a;  // 64 speakers x 20 utts, domain A
  Manifest train_b;  // 16 speakers x 10 utts, domain B
  Manifest eval_a;   // 16 held-out speakers x 10 utts, domain A
  Manifest eval_b;   // 16 held-out speakers x 10 utts, domain B
  TrialList trials_a;
  TrialList trials_b;
};

inline constexpr std::uint64_t kDefaultCorpusSeed = 1337;

inline DeskCorpora make_desk_corpora(std::uint64_t corpus_seed = kDefaultCorpusSeed) {
  DeskCorpora c;
  c.train_a = make_corpus({corpus_seed, 64, 20, 'A', 2.0, 0});
  c.train_b = make_corpus({corpus_seed, 16, 10, 'B', 2.0, 0});
  c.eval_a = make_corpus({corpus_seed, 16, 10, 'A', 2.0, 1000});
  c.eval_b = make_corpus({corpus_seed, 16, 10, 'B', 2.0, 1000});
  c.trials_a = make_trials(c.eval_a, Rng(corpus_seed).fork("trials-A"));
  c.trials_b = make_trials(c.eval_b, Rng(corpus_seed).fork("trials-B"));
  return c;
}

}  // namespace psv
