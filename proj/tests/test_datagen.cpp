#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <set>

#include "psv/datagen.hpp"

using namespace psv;
namespace fs = std::filesystem;

namespace {

// Average log power spectrum via a naive DFT: 256-sample frames, hop 128,
// 64 bins. Deliberately simple and independent of the model stack.
std::vector<double> log_spectrum(const std::vector<float>& w) {
  const int F = 256, HOP = 128, BINS = 64;
  std::vector<double> acc(BINS, 0.0);
  int frames = 0;
  for (std::size_t s = 0; s + F <= w.size(); s += HOP) {
    for (int b = 1; b <= BINS; ++b) {
      double re = 0, im = 0;
      for (int i = 0; i < F; ++i) {
        double ang = -2.0 * M_PI * b * i / F;
        re += w[s + static_cast<std::size_t>(i)] * std::cos(ang);
        im += w[s + static_cast<std::size_t>(i)] * std::sin(ang);
      }
      acc[static_cast<std::size_t>(b - 1)] += re * re + im * im;
    }
    ++frames;
  }
  for (auto& v : acc) v = std::log(v / frames + 1e-10);
  return acc;
}

double measured_snr_db(const std::vector<float>& clean,
                       const std::vector<float>& noisy) {
  double p_sig = 0, p_noise = 0;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    p_sig += static_cast<double>(clean[i]) * clean[i];
    double d = static_cast<double>(noisy[i]) - clean[i];
    p_noise += d * d;
  }
  return 10.0 * std::log10(p_sig / p_noise);
}

}  // namespace

TEST_CASE("synth: identical seeds give bit-identical waveforms") {
  auto prof = make_speaker_profile(7, 3, 'A');
  auto a = synth_utterance(prof, 99, 1.0);
  auto b = synth_utterance(prof, 99, 1.0);
  REQUIRE(a == b);
  REQUIRE(a.size() == 16000);
  float peak = 0;
  for (float v : a) peak = std::max(peak, std::abs(v));
  REQUIRE(peak == Catch::Approx(0.9f).margin(1e-5));
}

TEST_CASE("synth: different speakers differ even with the same utt seed") {
  auto pa = make_speaker_profile(7, 0, 'A');
  auto pb = make_speaker_profile(7, 1, 'A');
  auto a = synth_utterance(pa, 5, 1.0);
  auto b = synth_utterance(pb, 5, 1.0);
  float max_diff = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    max_diff = std::max(max_diff, std::abs(a[i] - b[i]));
  REQUIRE(max_diff > 0.01f);
}

TEST_CASE("synth: sub-minimum duration is rejected") {
  auto prof = make_speaker_profile(7, 0, 'A');
  REQUIRE_THROWS_AS(synth_utterance(prof, 1, 0.25), InputError);
}

TEST_CASE("learnability gate: linear probe separates 10 domain-A speakers") {
  // This is the oracle that keeps the whole pipeline honest: if a linear
  // model on average log-spectra cannot find speaker identity, nothing
  // downstream can.
  const int NSPK = 10, NUTT = 20, NTRAIN = 15;
  std::vector<std::vector<double>> feats;
  std::vector<int> labels;
  for (int s = 0; s < NSPK; ++s) {
    auto prof = make_speaker_profile(1337, s, 'A');
    for (int u = 0; u < NUTT; ++u) {
      auto seed = Rng(1337).fork("utt").fork(static_cast<std::uint64_t>(s))
                      .fork(static_cast<std::uint64_t>(u)).seed();
      feats.push_back(log_spectrum(synth_utterance(prof, seed, 2.0)));
      labels.push_back(s);
    }
  }
  const int D = static_cast<int>(feats[0].size());
  std::vector<double> mu(D, 0), sd(D, 0);
  for (auto& f : feats)
    for (int d = 0; d < D; ++d) mu[static_cast<std::size_t>(d)] += f[static_cast<std::size_t>(d)];
  for (auto& m : mu) m /= static_cast<double>(feats.size());
  for (auto& f : feats)
    for (int d = 0; d < D; ++d) {
      double c = f[static_cast<std::size_t>(d)] - mu[static_cast<std::size_t>(d)];
      sd[static_cast<std::size_t>(d)] += c * c;
    }
  for (auto& s : sd) s = std::sqrt(s / static_cast<double>(feats.size())) + 1e-8;
  for (auto& f : feats)
    for (int d = 0; d < D; ++d)
      f[static_cast<std::size_t>(d)] =
          (f[static_cast<std::size_t>(d)] - mu[static_cast<std::size_t>(d)]) /
          sd[static_cast<std::size_t>(d)];

  std::vector<double> W(static_cast<std::size_t>(NSPK * (D + 1)), 0.0);
  auto logits_of = [&](const std::vector<double>& f, std::vector<double>& lg) {
    for (int c = 0; c < NSPK; ++c) {
      double z = W[static_cast<std::size_t>(c * (D + 1) + D)];
      for (int d = 0; d < D; ++d)
        z += W[static_cast<std::size_t>(c * (D + 1) + d)] * f[static_cast<std::size_t>(d)];
      lg[static_cast<std::size_t>(c)] = z;
    }
  };
  for (int it = 0; it < 300; ++it) {
    std::vector<double> grad(W.size(), 0.0);
    for (int s = 0; s < NSPK; ++s)
      for (int u = 0; u < NTRAIN; ++u) {
        int i = s * NUTT + u;
        std::vector<double> lg(NSPK);
        logits_of(feats[static_cast<std::size_t>(i)], lg);
        double mx = *std::max_element(lg.begin(), lg.end()), z = 0;
        for (auto& v : lg) {
          v = std::exp(v - mx);
          z += v;
        }
        for (int c = 0; c < NSPK; ++c) {
          double p = lg[static_cast<std::size_t>(c)] / z -
                     (c == labels[static_cast<std::size_t>(i)] ? 1.0 : 0.0);
          for (int d = 0; d < D; ++d)
            grad[static_cast<std::size_t>(c * (D + 1) + d)] +=
                p * feats[static_cast<std::size_t>(i)][static_cast<std::size_t>(d)];
          grad[static_cast<std::size_t>(c * (D + 1) + D)] += p;
        }
      }
    for (std::size_t k = 0; k < W.size(); ++k)
      W[k] -= 0.05 * grad[k] / (NSPK * NTRAIN);
  }
  int correct = 0, total = 0;
  for (int s = 0; s < NSPK; ++s)
    for (int u = NTRAIN; u < NUTT; ++u) {
      int i = s * NUTT + u;
      std::vector<double> lg(NSPK);
      logits_of(feats[static_cast<std::size_t>(i)], lg);
      int pred = static_cast<int>(
          std::max_element(lg.begin(), lg.end()) - lg.begin());
      correct += (pred == labels[static_cast<std::size_t>(i)]);
      ++total;
    }
  double acc = static_cast<double>(correct) / total;
  INFO("probe accuracy " << 100 * acc << "%");
  REQUIRE(acc > 0.80);
}

TEST_CASE("augment: probability 0 is the identity") {
  auto prof = make_speaker_profile(11, 0, 'B');
  auto w = synth_utterance(prof, 3, 1.0);
  Rng rng(5);
  auto out = augment(w, rng, 0.0);
  REQUIRE(out == w);
}

TEST_CASE("augment: requested SNR is realized within 1 dB") {
  auto prof = make_speaker_profile(11, 1, 'A');
  auto clean = synth_utterance(prof, 4, 1.0);
  // Find an application of the augmentation and check the additive stage by
  // reproducing its RNG stream: draw gate, noise type, then noise + snr.
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng probe(seed);
    if (probe.uniform() >= 0.6) continue;  // this seed would skip
    bool pink = probe.uniform() < 0.5;
    std::vector<float> noise(clean.size());
    if (!pink) {
      for (auto& v : noise) v = static_cast<float>(probe.normal());
    } else {
      double b0 = 0, b1 = 0, b2 = 0;
      for (auto& v : noise) {
        double white = probe.normal();
        b0 = 0.99765 * b0 + white * 0.0990460;
        b1 = 0.96300 * b1 + white * 0.2965164;
        b2 = 0.57000 * b2 + white * 1.0526913;
        v = static_cast<float>(b0 + b1 + b2 + white * 0.1848);
      }
    }
    double requested = probe.uniform(5.0, 20.0);
    double p_sig = 0, p_noise = 0;
    for (std::size_t i = 0; i < clean.size(); ++i) {
      p_sig += static_cast<double>(clean[i]) * clean[i];
      p_noise += static_cast<double>(noise[i]) * noise[i];
    }
    double nscale = std::sqrt((p_sig / clean.size()) /
                              std::pow(10.0, requested / 10.0) /
                              (p_noise / clean.size()));
    std::vector<float> noisy(clean.size());
    for (std::size_t i = 0; i < clean.size(); ++i)
      noisy[i] = clean[i] + static_cast<float>(nscale) * noise[i];
    REQUIRE(measured_snr_db(clean, noisy) ==
            Catch::Approx(requested).margin(1.0));
    return;  // one realized case is enough
  }
  FAIL("no seed below 20 applied the augmentation");
}

TEST_CASE("augment: output peak stays at or below 1.0") {
  auto prof = make_speaker_profile(12, 2, 'B');
  auto w = synth_utterance(prof, 9, 1.0);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    auto out = augment(w, rng, 1.0);
    float peak = 0;
    for (float v : out) peak = std::max(peak, std::abs(v));
    REQUIRE(peak <= 1.0f + 1e-6f);
  }
}

TEST_CASE("make_corpus: counts, uniqueness, minimum sizes") {
  Manifest m = make_corpus({5, 2, 2, 'A', 1.0, 0});
  REQUIRE(m.utts.size() == 4);
  std::set<std::string> ids;
  for (const auto& u : m.utts) ids.insert(u.utt_id);
  REQUIRE(ids.size() == 4);
  REQUIRE_THROWS_AS(make_corpus({5, 1, 2, 'A', 1.0, 0}), InputError);
  REQUIRE_THROWS_AS(make_corpus({5, 2, 1, 'A', 1.0, 0}), InputError);
}

TEST_CASE("make_corpus_files: regeneration is byte-identical") {
  auto dir1 = fs::temp_directory_path() / "psv_corpus_a";
  auto dir2 = fs::temp_directory_path() / "psv_corpus_b";
  fs::remove_all(dir1);
  fs::remove_all(dir2);
  CorpusSpec spec{77, 2, 2, 'B', 1.0, 0};
  Manifest m1 = make_corpus_files(spec, dir1);
  Manifest m2 = make_corpus_files(spec, dir2);
  for (const auto& u : m1.utts) {
    std::ifstream f1(dir1 / u.path, std::ios::binary);
    std::ifstream f2(dir2 / u.path, std::ios::binary);
    std::string b1((std::istreambuf_iterator<char>(f1)),
                   std::istreambuf_iterator<char>());
    std::string b2((std::istreambuf_iterator<char>(f2)),
                   std::istreambuf_iterator<char>());
    REQUIRE(b1 == b2);
    REQUIRE(!b1.empty());
  }
  // wav round trip is close to the float signal (16-bit quantization)
  auto wave = load_waveform(m1.utts[0], dir1);
  auto direct = synth_utterance(
      make_speaker_profile(m1.utts[0].corpus_seed, m1.utts[0].speaker_id, 'B'),
      m1.utts[0].utt_seed, m1.utts[0].duration_s);
  REQUIRE(wave.size() == direct.size());
  for (std::size_t i = 0; i < wave.size(); ++i)
    REQUIRE(wave[i] == Catch::Approx(direct[i]).margin(1.0 / 32000.0));
  fs::remove_all(dir1);
  fs::remove_all(dir2);
}

TEST_CASE("manifest json-lines round trip") {
  Manifest m = make_corpus({9, 3, 2, 'A', 1.0, 100});
  auto path = fs::temp_directory_path() / "psv_manifest_test.jsonl";
  save_manifest(m, path);
  Manifest back = load_manifest(path);
  REQUIRE(back.utts.size() == m.utts.size());
  for (std::size_t i = 0; i < m.utts.size(); ++i) {
    REQUIRE(back.utts[i].utt_id == m.utts[i].utt_id);
    REQUIRE(back.utts[i].speaker_id == m.utts[i].speaker_id);
    REQUIRE(back.utts[i].utt_seed == m.utts[i].utt_seed);
  }
  REQUIRE(back.speakers().size() == 3);
  fs::remove(path);
}

TEST_CASE("trials: all same-speaker pairs plus balanced nontargets") {
  Manifest m = make_corpus({13, 4, 5, 'A', 1.0, 0});
  TrialList trials = make_trials(m, Rng(1));
  std::int64_t n_tar = 0, n_non = 0;
  for (const auto& t : trials) {
    REQUIRE(m.has(t.enroll));
    REQUIRE(m.has(t.test));
    bool same = m.by_id(t.enroll).speaker_id == m.by_id(t.test).speaker_id;
    REQUIRE(t.label == (same ? 1 : 0));
    (t.label ? n_tar : n_non) += 1;
  }
  REQUIRE(n_tar == 4 * 10);  // 4 speakers x C(5,2)
  REQUIRE(std::abs(n_tar - n_non) <= 1);

  auto path = fs::temp_directory_path() / "psv_trials_test.txt";
  save_trials(trials, path);
  TrialList back = load_trials(path);
  REQUIRE(back.size() == trials.size());
  REQUIRE(back[0].label == trials[0].label);
  REQUIRE(back[0].enroll == trials[0].enroll);
  fs::remove(path);
}
