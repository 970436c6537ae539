#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "psv/datagen.hpp"
#include "psv/model.hpp"
#include "psv/threading.hpp"

namespace psv {

struct DcfParams {
  double p_tar = 0.01;
  double c_miss = 1.0;
  double c_fa = 1.0;

  void validate() const {
    if (!(p_tar > 0.0 && p_tar < 1.0))
      throw ConfigError("dcf: p_tar must be in (0, 1)");
    if (c_miss <= 0.0 || c_fa <= 0.0)
      throw ConfigError("dcf: costs must be positive");
  }
};

struct ScoreSet {
  std::vector<double> scores;
  std::vector<char> is_target;  // parallel to scores

  void validate() const {
    if (scores.empty() || scores.size() != is_target.size())
      throw InputError("score set empty or misaligned");
    std::int64_t n_tar = 0, n_non = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (!std::isfinite(scores[i]))
        throw InputError("score set contains non-finite scores");
      (is_target[i] ? n_tar : n_non) += 1;
    }
    if (n_tar == 0 || n_non == 0)
      throw InputError(
          "score set needs at least one target and one nontarget trial");
  }
};

struct ScoredTrial {
  std::string enroll;
  std::string test;
  double score = 0.0;
  int label = 0;  // 1 = target
};

inline ScoreSet to_score_set(const std::vector<ScoredTrial>& trials) {
  ScoreSet s;
  for (const auto& t : trials) {
    s.scores.push_back(t.score);
    s.is_target.push_back(t.label == 1 ? 1 : 0);
  }
  return s;
}

// Embeds every distinct utterance once over its full length (no crop, no
// augmentation), then scores each trial by embedding cosine.
inline std::vector<ScoredTrial> score_trials(
    const SpeakerModel& model, const Manifest& manifest, const TrialList& trials,
    int threads = 1, const std::filesystem::path& wav_base_dir = {}) {
  std::vector<std::string> unique;
  std::map<std::string, std::size_t> index;
  for (const auto& t : trials) {
    for (const std::string* id : {&t.enroll, &t.test}) {
      if (index.count(*id)) continue;
      if (!manifest.has(*id))
        throw InputError(detail::msg("trial references unknown utterance ",
                                     *id));
      index.emplace(*id, unique.size());
      unique.push_back(*id);
    }
  }
  ModelForwardRefs refs = collect_model_refs(model);
  std::vector<Tensor> embeddings(unique.size());
  parallel_ordered_reduce<Tensor>(
      static_cast<std::int64_t>(unique.size()), threads,
      [&](std::int64_t i) {
        const auto& rec = manifest.by_id(unique[static_cast<std::size_t>(i)]);
        return embed_utterance(model, refs, load_waveform(rec, wav_base_dir));
      },
      [&](std::int64_t i, Tensor&& emb) {
        embeddings[static_cast<std::size_t>(i)] = std::move(emb);
      });
  std::vector<ScoredTrial> out;
  out.reserve(trials.size());
  for (const auto& t : trials)
    out.push_back({t.enroll, t.test,
                   cosine_score(embeddings[index.at(t.enroll)],
                                embeddings[index.at(t.test)]),
                   t.label});
  return out;
}

inline void write_score_file(const std::vector<ScoredTrial>& trials,
                             const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError(detail::msg("cannot write scores: ", path.string()));
  f << std::setprecision(9) << std::fixed;
  for (const auto& t : trials)
    f << t.enroll << " " << t.test << " " << t.score << "\n";
}

namespace detail {

// Operating points swept at every distinct score (accept iff score >= t):
// FRR(t) = P(target < t), FAR(t) = P(nontarget >= t), plus the t = +inf
// endpoint (1, 0).
struct RocPoint {
  double frr;
  double far;
};

inline std::vector<RocPoint> roc_points(const ScoreSet& s) {
  std::vector<std::pair<double, char>> rows;
  rows.reserve(s.scores.size());
  std::int64_t n_tar = 0, n_non = 0;
  for (std::size_t i = 0; i < s.scores.size(); ++i) {
    rows.push_back({s.scores[i], s.is_target[i]});
    (s.is_target[i] ? n_tar : n_non) += 1;
  }
  std::sort(rows.begin(), rows.end());
  std::vector<RocPoint> pts;
  std::int64_t tar_below = 0, non_below = 0;
  std::size_t i = 0;
  while (i < rows.size()) {
    // threshold t = rows[i].first
    pts.push_back({static_cast<double>(tar_below) / static_cast<double>(n_tar),
                   static_cast<double>(n_non - non_below) /
                       static_cast<double>(n_non)});
    double t = rows[i].first;
    while (i < rows.size() && rows[i].first == t) {
      (rows[i].second ? tar_below : non_below) += 1;
      ++i;
    }
  }
  pts.push_back({1.0, 0.0});
  return pts;
}

}  // namespace detail

// Equal error rate: the crossing of FRR and FAR over the threshold sweep,
// linearly interpolating between the two adjacent operating points when no
// exact crossing exists.
inline double compute_eer(const ScoreSet& s) {
  s.validate();
  auto pts = detail::roc_points(s);
  detail::RocPoint prev = pts.front();
  if (prev.frr >= prev.far) return prev.frr;  // degenerate: crossing at start
  for (std::size_t i = 1; i < pts.size(); ++i) {
    const auto& cur = pts[i];
    if (cur.frr == cur.far) return cur.frr;
    if (cur.frr > cur.far) {
      double d_prev = prev.far - prev.frr;  // > 0
      double d_cur = cur.frr - cur.far;     // > 0
      double u = d_prev / (d_prev + d_cur);
      return prev.frr + u * (cur.frr - prev.frr);
    }
    prev = cur;
  }
  return prev.frr;
}

// Normalized minimum detection cost:
//   minDCF = min_t [c_miss p_tar P_miss(t) + c_fa (1 - p_tar) P_fa(t)]
//            / min(c_miss p_tar, c_fa (1 - p_tar)).
inline double compute_min_dcf(const ScoreSet& s, const DcfParams& p = {}) {
  s.validate();
  p.validate();
  auto pts = detail::roc_points(s);
  double best = std::numeric_limits<double>::infinity();
  for (const auto& pt : pts) {
    double dcf = p.c_miss * p.p_tar * pt.frr + p.c_fa * (1.0 - p.p_tar) * pt.far;
    best = std::min(best, dcf);
  }
  return best / std::min(p.c_miss * p.p_tar, p.c_fa * (1.0 - p.p_tar));
}

inline nlohmann::json metrics_report(const ScoreSet& s) {
  std::int64_t n_tar = 0, n_non = 0;
  for (char t : s.is_target) (t ? n_tar : n_non) += 1;
  return nlohmann::json{{"eer", compute_eer(s)},
                        {"min_dcf_p01", compute_min_dcf(s, {0.01, 1.0, 1.0})},
                        {"min_dcf_p05", compute_min_dcf(s, {0.05, 1.0, 1.0})},
                        {"n_target", n_tar},
                        {"n_nontarget", n_non}};
}

}  // namespace psv
