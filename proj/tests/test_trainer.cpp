#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <filesystem>

#include "psv/evalkit.hpp"
#include "psv/trainer.hpp"

using namespace psv;
namespace fs = std::filesystem;

namespace {

Manifest tiny_corpus(char domain = 'A') {
  return make_corpus({321, 4, 4, domain, 1.0, 0});
}

TrainConfig tiny_config(PetlMode mode) {
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  cfg.crop_s = 0.5;
  cfg.base_lr = 1e-3;
  cfg.seed = 5;
  cfg.petl.mode = mode;
  cfg.petl.d_bottleneck = 4;
  cfg.petl.prefix_len = 2;
  return cfg;
}

std::string group_bytes(const SpeakerModel& m, const char* prefix) {
  std::string out;
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    const auto& g = m.params[i];
    if (g.name.rfind(prefix, 0) != 0) continue;
    out.append(reinterpret_cast<const char*>(g.tensor.data.data()),
               g.tensor.data.size() * sizeof(float));
  }
  return out;
}

}  // namespace

TEST_CASE("train: zero learning rate leaves parameters untouched") {
  auto bb = BackboneConfig::preset("desk");
  auto mh = MhfaConfig::for_backbone_preset("desk");
  TrainConfig cfg = tiny_config(PetlMode::kFull);
  cfg.epochs = 1;
  cfg.base_lr = 0.0;
  TrainResult r = train_model(bb, mh, cfg, tiny_corpus());
  SpeakerModel fresh = build_speaker_model(bb, mh, 4, Rng(cfg.seed).fork("init"));
  PetlConfig petl = cfg.petl;
  apply_petl(fresh, petl, Rng(cfg.seed).fork("petl-init"));
  REQUIRE(group_bytes(r.model, "") == group_bytes(fresh, ""));
  REQUIRE(!r.steps.empty());
  for (const auto& s : r.steps) REQUIRE(std::isfinite(s.loss));
}

TEST_CASE("train: learning-rate schedule is exactly base * decay^e") {
  TrainConfig cfg = tiny_config(PetlMode::kFixed);
  cfg.epochs = 7;
  cfg.base_lr = 1e-3;
  cfg.lr_decay_per_epoch = 0.95;
  for (int e = 0; e < cfg.epochs; ++e)
    REQUIRE(cfg.lr_at_epoch(e) == 1e-3 * std::pow(0.95, e));
}

TEST_CASE("train: freeze contract for every PETL mode over 3 epochs") {
  auto bb = BackboneConfig::preset("desk");
  auto mh = MhfaConfig::for_backbone_preset("desk");
  Manifest corpus = tiny_corpus();
  for (PetlMode mode : {PetlMode::kFixed, PetlMode::kBottleneck,
                        PetlMode::kPrefix, PetlMode::kMam}) {
    TrainConfig cfg = tiny_config(mode);
    cfg.epochs = 3;
    cfg.base_lr = 5e-3;
    TrainOptions opts;
    opts.deterministic = true;  // enables the per-epoch byte assertion
    TrainResult r = train_model(bb, mh, cfg, corpus, opts);
    SpeakerModel fresh =
        build_speaker_model(bb, mh, 4, Rng(cfg.seed).fork("init"));
    INFO("mode " << to_string(cfg.petl.mode));
    REQUIRE(group_bytes(r.model, "backbone.") == group_bytes(fresh, "backbone."));
    REQUIRE(group_bytes(r.model, "frontend.") == group_bytes(fresh, "frontend."));
    // and the trainable side did move
    REQUIRE(group_bytes(r.model, "backend.") != group_bytes(fresh, "backend."));
  }
  // full mode: backbone must move
  TrainConfig cfg = tiny_config(PetlMode::kFull);
  cfg.base_lr = 5e-3;
  TrainResult r = train_model(bb, mh, cfg, corpus);
  SpeakerModel fresh = build_speaker_model(bb, mh, 4, Rng(cfg.seed).fork("init"));
  REQUIRE(group_bytes(r.model, "backbone.") != group_bytes(fresh, "backbone."));
}

TEST_CASE("train: loss decreases over 5 epochs on a desk domain-A corpus") {
  auto bb = BackboneConfig::preset("desk");
  auto mh = MhfaConfig::for_backbone_preset("desk");
  Manifest corpus = make_corpus({321, 8, 6, 'A', 1.0, 0});
  TrainConfig cfg = tiny_config(PetlMode::kFull);
  cfg.epochs = 5;
  cfg.batch_size = 16;
  cfg.optimizer = "adam";
  cfg.base_lr = 2e-3;
  cfg.margin = 0.0;
  TrainOptions opts;
  opts.threads = 2;
  TrainResult r = train_model(bb, mh, cfg, corpus, opts);
  REQUIRE(r.epochs.size() == 5);
  REQUIRE(r.epochs.back().mean_loss < r.epochs.front().mean_loss);
}

TEST_CASE("train: divergence aborts with epoch and step context") {
  auto bb = BackboneConfig::preset("desk");
  auto mh = MhfaConfig::for_backbone_preset("desk");
  TrainConfig cfg = tiny_config(PetlMode::kFull);
  cfg.epochs = 3;
  cfg.base_lr = 1e14;  // guaranteed blow-up
  REQUIRE_THROWS_AS(train_model(bb, mh, cfg, tiny_corpus()), NumericError);
}

TEST_CASE("train: deterministic reruns produce identical metrics logs") {
  auto bb = BackboneConfig::preset("desk");
  auto mh = MhfaConfig::for_backbone_preset("desk");
  TrainConfig cfg = tiny_config(PetlMode::kMam);
  auto run = [&](int threads) {
    TrainOptions opts;
    opts.threads = threads;
    return train_model(bb, mh, cfg, tiny_corpus(), opts).metrics_jsonl;
  };
  auto a = run(1);
  auto b = run(1);
  REQUIRE(a == b);
  // gradient reduction is in sample order, so the thread count cannot matter
  auto c = run(2);
  REQUIRE(a == c);
}

TEST_CASE("lm-ft: margin and crop overrides, trainable-only delta") {
  auto bb = BackboneConfig::preset("desk");
  auto mh = MhfaConfig::for_backbone_preset("desk");
  Manifest corpus = tiny_corpus();
  TrainConfig cfg = tiny_config(PetlMode::kMam);
  cfg.epochs = 2;
  TrainResult base = train_model(bb, mh, cfg, corpus);
  auto dir = fs::temp_directory_path() / "psv_lmft_test";
  fs::create_directories(dir);
  auto ckpt = dir / "base.ckpt";
  save_model(base.model, ckpt, train_meta(cfg, base));

  LmftConfig lmft;  // 2 extra epochs, 5 s crops, margin 0.5
  TrainResult cont = lm_finetune(ckpt, lmft, corpus, /*seed=*/9);
  // config echo line carries the overrides
  auto echo = nlohmann::json::parse(cont.metrics_jsonl.at(0));
  REQUIRE(echo.at("train").at("margin").get<double>() == 0.5);
  REQUIRE(echo.at("train").at("crop_s").get<double>() == 5.0);
  REQUIRE(echo.at("train").at("epochs").get<int>() == 2);
  // continuation starts from the prior stage's final lr
  REQUIRE(echo.at("train").at("base_lr").get<double>() ==
          Catch::Approx(base.final_lr));
  // frozen groups identical, trainable groups changed
  REQUIRE(group_bytes(cont.model, "backbone.") ==
          group_bytes(base.model, "backbone."));
  REQUIRE(group_bytes(cont.model, "petl.") != group_bytes(base.model, "petl."));

  // architecture mismatch: checkpoint trained on a different backbone
  BackboneConfig other = bb;
  other.d_ffn = 128;
  REQUIRE_THROWS_AS(
      [&] {
        TrainConfig c2 = tiny_config(PetlMode::kFull);
        c2.init_from = ckpt.string();
        return train_model(other, mh, c2, corpus);
      }(),
      CheckpointMismatchError);

  // speaker inventory mismatch is an input error for lm-ft
  Manifest bigger = make_corpus({321, 6, 4, 'A', 1.0, 0});
  REQUIRE_THROWS_AS(lm_finetune(ckpt, lmft, bigger, 9), InputError);
  fs::remove_all(dir);
}

TEST_CASE("two-stage equals manually composed stages bitwise") {
  auto bb = BackboneConfig::preset("desk");
  auto mh = MhfaConfig::for_backbone_preset("desk");
  Manifest inter = make_corpus({321, 4, 4, 'A', 1.0, 0});
  Manifest target = make_corpus({321, 3, 4, 'B', 1.0, 0});

  TrainConfig s1 = tiny_config(PetlMode::kFull);
  TrainConfig s2 = tiny_config(PetlMode::kMam);
  s2.seed = 11;

  auto dir = fs::temp_directory_path() / "psv_twostage_test";
  fs::remove_all(dir);
  TwoStageResult ts = two_stage(bb, mh, s1, s2, inter, target, dir / "auto");

  // manual composition through init_from with the same configs
  TrainResult m1 = train_model(bb, mh, s1, inter);
  fs::create_directories(dir / "manual");
  auto ckpt1 = dir / "manual" / "stage1.ckpt";
  save_model(m1.model, ckpt1, train_meta(s1, m1));
  TrainConfig s2b = s2;
  s2b.init_from = ckpt1.string();
  TrainResult m2 = train_model(bb, mh, s2b, target);
  auto ckpt2 = dir / "manual" / "stage2.ckpt";
  save_model(m2.model, ckpt2, train_meta(s2b, m2));

  auto slurp = [](const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)),
                       std::istreambuf_iterator<char>());
  };
  REQUIRE(slurp(ts.stage1_ckpt) == slurp(ckpt1));
  // stage-2 checkpoints differ only in the recorded init_from path; compare
  // the models instead of raw bytes
  REQUIRE(group_bytes(ts.stage2.model, "") == group_bytes(m2.model, ""));

  // fixed stage 2: only back-end and head differ from the stage-1 model
  TrainConfig s2f = tiny_config(PetlMode::kFixed);
  s2f.seed = 11;
  s2f.init_from = ckpt1.string();
  TrainResult fixed = train_model(bb, mh, s2f, target);
  REQUIRE(group_bytes(fixed.model, "backbone.") ==
          group_bytes(ts.stage1.model, "backbone."));
  REQUIRE(group_bytes(fixed.model, "frontend.") ==
          group_bytes(ts.stage1.model, "frontend."));
  REQUIRE(group_bytes(fixed.model, "backend.") !=
          group_bytes(ts.stage1.model, "backend."));
  fs::remove_all(dir);
}

TEST_CASE("two-stage reports speaker overlap") {
  auto bb = BackboneConfig::preset("desk");
  auto mh = MhfaConfig::for_backbone_preset("desk");
  Manifest inter = make_corpus({321, 4, 4, 'A', 1.0, 0});
  Manifest target = make_corpus({321, 3, 4, 'A', 1.0, 2});  // ids 2..4 overlap 2,3
  TrainConfig s1 = tiny_config(PetlMode::kFull);
  s1.epochs = 1;
  TrainConfig s2 = tiny_config(PetlMode::kFixed);
  s2.epochs = 1;
  auto dir = fs::temp_directory_path() / "psv_overlap_test";
  fs::remove_all(dir);
  TwoStageResult ts = two_stage(bb, mh, s1, s2, inter, target, dir);
  REQUIRE(ts.speaker_overlap.size() == 2);
  fs::remove_all(dir);
}

TEST_CASE("score_trials: self-trial scores 1, order-stable, errors on unknown") {
  auto bb = BackboneConfig::preset("desk");
  auto mh = MhfaConfig::for_backbone_preset("desk");
  Manifest corpus = tiny_corpus();
  SpeakerModel model = build_speaker_model(bb, mh, 0, Rng(3));
  TrialList trials = {{1, corpus.utts[0].utt_id, corpus.utts[0].utt_id},
                      {0, corpus.utts[0].utt_id, corpus.utts[2].utt_id},
                      {1, corpus.utts[1].utt_id, corpus.utts[0].utt_id}};
  auto scored = score_trials(model, corpus, trials, 2);
  REQUIRE(scored.size() == trials.size());
  REQUIRE(scored[0].score == Catch::Approx(1.0).margin(1e-9));

  TrialList permuted = {trials[2], trials[0], trials[1]};
  auto scored_p = score_trials(model, corpus, permuted, 1);
  REQUIRE(scored_p[1].score == scored[0].score);
  REQUIRE(scored_p[0].score == scored[2].score);

  TrialList bad = {{1, "nope", corpus.utts[0].utt_id}};
  REQUIRE_THROWS_MATCHES(score_trials(model, corpus, bad), InputError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("nope")));
}
