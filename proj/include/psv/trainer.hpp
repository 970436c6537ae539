#pragma once

#include <algorithm>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "psv/datagen.hpp"
#include "psv/model.hpp"
#include "psv/threading.hpp"

namespace psv {

struct StepLog {
  int epoch = 0;
  int step = 0;
  double lr = 0.0;
  double loss = 0.0;
};

struct EpochLog {
  int epoch = 0;
  double lr = 0.0;
  double mean_loss = 0.0;
};

struct TrainOptions {
  int threads = 1;
  // Deterministic mode additionally byte-checks frozen groups every epoch.
  // Results are bit-reproducible for a fixed platform either way: per-sample
  // RNG streams are position-keyed and gradient reduction is in sample order
  // regardless of the thread count.
  bool deterministic = false;
  std::filesystem::path wav_base_dir;
};

struct TrainResult {
  SpeakerModel model;
  std::vector<StepLog> steps;
  std::vector<EpochLog> epochs;
  std::vector<std::string> metrics_jsonl;  // config echo + one line per entry
  double final_lr = 0.0;
  int n_speakers = 0;
};

namespace detail {

// Stable label space: (domain, speaker_id) sorted ascending.
inline std::map<std::pair<char, std::int64_t>, int> label_map(
    const Manifest& manifest) {
  std::map<std::pair<char, std::int64_t>, int> labels;
  for (const auto& u : manifest.utts)
    labels.emplace(std::make_pair(u.domain, u.speaker_id), 0);
  int next = 0;
  for (auto& [key, idx] : labels) idx = next++;
  return labels;
}

inline std::vector<float> crop_waveform(const std::vector<float>& wave,
                                        std::int64_t crop_len, Rng& rng) {
  std::vector<float> out(static_cast<std::size_t>(crop_len), 0.0f);
  if (static_cast<std::int64_t>(wave.size()) <= crop_len) {
    std::copy(wave.begin(), wave.end(), out.begin());  // zero-padded tail
    return out;
  }
  std::uint64_t span = wave.size() - static_cast<std::size_t>(crop_len) + 1;
  std::size_t start = rng.uniform_int(span);
  std::copy(wave.begin() + static_cast<std::ptrdiff_t>(start),
            wave.begin() + static_cast<std::ptrdiff_t>(start) + crop_len,
            out.begin());
  return out;
}

struct SampleGrad {
  double loss = 0.0;
  std::vector<Tensor> grads;  // aligned with the trainable group list
};

// SGD with momentum, or Adam when configured; both touch only the groups
// they are constructed with (the trainable set).
struct Optimizer {
  bool adam;
  double beta1;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t t = 0;
  std::vector<std::vector<float>> m1;
  std::vector<std::vector<float>> m2;  // unused for sgd

  Optimizer(const std::string& kind, double momentum,
            const std::vector<ParamGroup*>& groups)
      : adam(kind == "adam"), beta1(momentum) {
    for (auto* g : groups) {
      m1.emplace_back(g->tensor.data.size(), 0.0f);
      if (adam) m2.emplace_back(g->tensor.data.size(), 0.0f);
    }
  }

  void step(std::vector<ParamGroup*>& groups,
            const std::vector<Tensor>& grads, double lr) {
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < groups.size(); ++i) {
      auto& p = groups[i]->tensor.data;
      const auto& g = grads[i].data;
      auto& v = m1[i];
      if (!adam) {
        const float mu = static_cast<float>(beta1);
        const float flr = static_cast<float>(lr);
        for (std::size_t k = 0; k < p.size(); ++k) {
          v[k] = mu * v[k] + g[k];
          p[k] -= flr * v[k];
        }
      } else {
        auto& w = m2[i];
        for (std::size_t k = 0; k < p.size(); ++k) {
          v[k] = static_cast<float>(beta1 * v[k] + (1.0 - beta1) * g[k]);
          w[k] = static_cast<float>(beta2 * w[k] +
                                    (1.0 - beta2) * double(g[k]) * g[k]);
          double mhat = v[k] / bc1;
          double vhat = w[k] / bc2;
          p[k] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + eps));
        }
      }
    }
  }
};

inline std::string frozen_digest(const SpeakerModel& m) {
  std::string bytes;
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    const auto& g = m.params[i];
    if (g.trainable) continue;
    const char* p = reinterpret_cast<const char*>(g.tensor.data.data());
    bytes.append(p, g.tensor.data.size() * sizeof(float));
  }
  return bytes;
}

}  // namespace detail

// SGD-with-momentum training loop over random crops of the manifest's
// utterances, AAM-softmax objective, lr_e = base_lr * decay^e. Only trainable
// groups are ever written; the returned model carries the full group set.
inline TrainResult train_model(const BackboneConfig& bb, const MhfaConfig& mhfa,
                               const TrainConfig& cfg, const Manifest& manifest,
                               const TrainOptions& opts = {}) {
  cfg.validate();
  auto labels = detail::label_map(manifest);
  const int n_speakers = static_cast<int>(labels.size());
  if (n_speakers < 2)
    throw InputError("train: manifest must contain at least 2 speakers");

  TrainResult result;
  result.n_speakers = n_speakers;
  {
    SpeakerModel model =
        build_speaker_model(bb, mhfa, n_speakers, Rng(cfg.seed).fork("init"));
    apply_petl(model, cfg.petl, Rng(cfg.seed).fork("petl-init"));
    if (!cfg.init_from.empty()) {
      Checkpoint ckpt = load_checkpoint(cfg.init_from);
      if (ckpt.meta.contains("backbone")) {
        nlohmann::json ours = bb;
        if (ckpt.meta.at("backbone") != ours)
          throw CheckpointMismatchError(detail::msg(
              "init_from checkpoint was trained with a different backbone: ",
              cfg.init_from));
      }
      load_matching_params(model, ckpt);
    }
    result.model = std::move(model);
  }
  SpeakerModel& model = result.model;
  ModelForwardRefs refs = collect_model_refs(model);
  std::vector<ParamGroup*> trainable = model.params.trainable_groups();
  detail::Optimizer opt(cfg.optimizer, cfg.momentum, trainable);

  {
    nlohmann::json echo{{"event", "config"},
                        {"train", cfg},
                        {"backbone", bb},
                        {"mhfa", mhfa},
                        {"n_speakers", n_speakers},
                        {"threads", opts.threads}};
    result.metrics_jsonl.push_back(echo.dump());
  }

  const std::int64_t crop_len =
      static_cast<std::int64_t>(cfg.crop_s * kSampleRate + 0.5);
  const std::int64_t n_utts = static_cast<std::int64_t>(manifest.utts.size());
  std::string frozen_before =
      opts.deterministic ? detail::frozen_digest(model) : std::string();

  // Utterances are synthesized (or read) once up front; epochs crop from the
  // cached waveforms.
  std::vector<std::vector<float>> wave_cache(manifest.utts.size());
  parallel_ordered_reduce<std::vector<float>>(
      n_utts, opts.threads,
      [&](std::int64_t i) {
        return load_waveform(manifest.utts[static_cast<std::size_t>(i)],
                             opts.wav_base_dir);
      },
      [&](std::int64_t i, std::vector<float>&& w) {
        wave_cache[static_cast<std::size_t>(i)] = std::move(w);
      });

  auto run_sample = [&](std::int64_t epoch, std::int64_t pos,
                        std::int64_t utt_idx) {
    Rng srng = Rng(cfg.seed)
                   .fork("sample")
                   .fork(static_cast<std::uint64_t>(epoch))
                   .fork(static_cast<std::uint64_t>(pos));
    const auto& u = manifest.utts[static_cast<std::size_t>(utt_idx)];
    const std::vector<float>& wave = wave_cache[static_cast<std::size_t>(utt_idx)];
    std::vector<float> crop = detail::crop_waveform(wave, crop_len, srng);
    if (cfg.augment) crop = augment(crop, srng);
    int label = labels.at({u.domain, u.speaker_id});

    Tape<float> tape;
    ForwardCtx<float> ctx(tape, /*train=*/true);
    const auto n_samples = static_cast<std::int64_t>(crop.size());
    Tensor wav_t({n_samples, 1}, std::move(crop));
    auto layers =
        encode_layers(ctx, refs.enc, model.backbone_cfg, tape.leaf(std::move(wav_t)));
    auto emb = mhfa_pool(ctx, refs.mhfa, layers);
    auto emb_row = reshape(emb, {1, tape.val(emb).numel()});
    auto loss = aam_loss(ctx, refs.head, emb_row, {label},
                         static_cast<float>(cfg.margin),
                         static_cast<float>(cfg.scale));
    tape.backward(loss);
    detail::SampleGrad out;
    out.loss = tape.val(loss).data[0];
    out.grads.reserve(trainable.size());
    for (auto* g : trainable) {
      if (const Tensor* gr = ctx.grad_of(*g))
        out.grads.push_back(*gr);
      else
        out.grads.push_back(Tensor::zeros(g->tensor.shape));
    }
    return out;
  };

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cfg.lr_at_epoch(epoch);
    std::vector<std::int64_t> order(static_cast<std::size_t>(n_utts));
    for (std::int64_t i = 0; i < n_utts; ++i)
      order[static_cast<std::size_t>(i)] = i;
    Rng orng = Rng(cfg.seed).fork("order").fork(static_cast<std::uint64_t>(epoch));
    for (std::int64_t i = n_utts - 1; i > 0; --i)
      std::swap(order[static_cast<std::size_t>(i)],
                order[static_cast<std::size_t>(
                    orng.uniform_int(static_cast<std::uint64_t>(i + 1)))]);

    double epoch_loss = 0.0;
    int steps_in_epoch = 0;
    for (std::int64_t base = 0; base < n_utts; base += cfg.batch_size) {
      const std::int64_t bsz = std::min<std::int64_t>(cfg.batch_size, n_utts - base);
      double loss_sum = 0.0;
      std::vector<Tensor> acc;
      acc.reserve(trainable.size());
      for (auto* g : trainable) acc.push_back(Tensor::zeros(g->tensor.shape));
      parallel_ordered_reduce<detail::SampleGrad>(
          bsz, opts.threads,
          [&](std::int64_t k) {
            return run_sample(epoch, base + k,
                              order[static_cast<std::size_t>(base + k)]);
          },
          [&](std::int64_t, detail::SampleGrad&& sg) {
            loss_sum += sg.loss;
            for (std::size_t i = 0; i < acc.size(); ++i)
              detail::add_into(acc[i], sg.grads[i]);
          });
      const double mean_loss = loss_sum / static_cast<double>(bsz);
      if (!std::isfinite(mean_loss))
        throw NumericError(detail::msg("training diverged (loss ", mean_loss,
                                       ") at epoch ", epoch, " step ",
                                       steps_in_epoch));
      const float inv_b = 1.0f / static_cast<float>(bsz);
      for (auto& t : acc)
        for (auto& v : t.data) v *= inv_b;
      opt.step(trainable, acc, lr);

      StepLog sl{epoch, steps_in_epoch, lr, mean_loss};
      result.steps.push_back(sl);
      result.metrics_jsonl.push_back(
          nlohmann::json{{"epoch", sl.epoch},
                         {"step", sl.step},
                         {"lr", sl.lr},
                         {"loss", sl.loss}}
              .dump());
      epoch_loss += mean_loss;
      ++steps_in_epoch;
    }
    EpochLog el{epoch, lr, epoch_loss / std::max(1, steps_in_epoch)};
    result.epochs.push_back(el);
    result.metrics_jsonl.push_back(
        nlohmann::json{{"event", "epoch"},
                       {"epoch", el.epoch},
                       {"lr", el.lr},
                       {"mean_loss", el.mean_loss}}
            .dump());
    if (opts.deterministic &&
        detail::frozen_digest(model) != frozen_before)
      throw ContractError(
          "optimizer wrote to a frozen parameter group (freeze invariant)");
  }
  result.final_lr = cfg.lr_at_epoch(cfg.epochs - 1);
  return result;
}

// Large-margin fine-tuning: continues a trained checkpoint for a couple of
// epochs with longer crops and a larger margin, starting from the prior
// stage's final learning rate.
inline TrainResult lm_finetune(const std::filesystem::path& ckpt_path,
                               const LmftConfig& lmft, const Manifest& manifest,
                               std::uint64_t seed, const TrainOptions& opts = {}) {
  Checkpoint ckpt = load_checkpoint(ckpt_path);
  if (!ckpt.meta.contains("backbone") || !ckpt.meta.contains("train"))
    throw CheckpointMismatchError(
        "lm-ft requires a checkpoint produced by train (meta missing)");
  BackboneConfig bb = ckpt.meta.at("backbone").get<BackboneConfig>();
  MhfaConfig mhfa = ckpt.meta.at("mhfa").get<MhfaConfig>();
  TrainConfig cfg = ckpt.meta.at("train").get<TrainConfig>();
  const int ckpt_speakers = ckpt.meta.value("n_speakers", 0);
  auto labels = detail::label_map(manifest);
  if (static_cast<int>(labels.size()) != ckpt_speakers)
    throw InputError(detail::msg("lm-ft manifest has ", labels.size(),
                                 " speakers but the checkpoint was trained with ",
                                 ckpt_speakers));
  cfg.base_lr = ckpt.meta.value("final_lr", cfg.base_lr);
  cfg.epochs = lmft.extra_epochs;
  cfg.crop_s = lmft.crop_s;
  cfg.margin = lmft.margin;
  cfg.seed = seed;
  cfg.init_from = ckpt_path.string();
  return train_model(bb, mhfa, cfg, manifest, opts);
}

struct TwoStageResult {
  TrainResult stage1;
  TrainResult stage2;
  std::filesystem::path stage1_ckpt;
  std::filesystem::path stage2_ckpt;
  std::vector<std::pair<char, std::int64_t>> speaker_overlap;
};

inline nlohmann::json train_meta(const TrainConfig& cfg, const TrainResult& r) {
  return nlohmann::json{{"train", cfg},
                        {"final_lr", r.final_lr},
                        {"epochs_completed", static_cast<int>(r.epochs.size())}};
}

// Two-stage tuning: full fine-tuning on the intermediate corpus, then
// re-instrumentation per stage2's PETL config and training on the target
// corpus with a fresh head (the speaker inventories differ). Both stage
// checkpoints are persisted. Composing the stages manually through
// `init_from` with the same configs produces bit-identical results.
inline TwoStageResult two_stage(const BackboneConfig& bb, const MhfaConfig& mhfa,
                                TrainConfig stage1_cfg, TrainConfig stage2_cfg,
                                const Manifest& intermediate,
                                const Manifest& target,
                                const std::filesystem::path& out_dir,
                                const TrainOptions& opts = {}) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec)
    throw IoError(detail::msg("cannot create ", out_dir.string(), ": ",
                              ec.message()));
  stage1_cfg.petl.mode = PetlMode::kFull;  // stage 1 is full fine-tuning
  stage1_cfg.init_from.clear();

  TwoStageResult out;
  out.stage1 = train_model(bb, mhfa, stage1_cfg, intermediate, opts);
  out.stage1_ckpt = out_dir / "stage1.ckpt";
  save_model(out.stage1.model, out.stage1_ckpt,
             train_meta(stage1_cfg, out.stage1));

  // Overlap between the stage speaker sets is permitted but worth surfacing.
  {
    std::set<std::pair<char, std::int64_t>> s1;
    for (const auto& [key, idx] : detail::label_map(intermediate)) s1.insert(key);
    for (const auto& [key, idx] : detail::label_map(target))
      if (s1.count(key)) out.speaker_overlap.push_back(key);
  }

  stage2_cfg.init_from = out.stage1_ckpt.string();
  out.stage2 = train_model(bb, mhfa, stage2_cfg, target, opts);
  out.stage2_ckpt = out_dir / "stage2.ckpt";
  save_model(out.stage2.model, out.stage2_ckpt,
             train_meta(stage2_cfg, out.stage2));
  return out;
}

}  // namespace psv
