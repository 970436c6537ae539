#pragma once

#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "psv/backbone.hpp"
#include "psv/checkpoint.hpp"
#include "psv/config.hpp"
#include "psv/rng.hpp"
#include "psv/spkback.hpp"

namespace psv {

enum class ParamKind { kFrontend, kBackbone, kPetl, kBackend, kHead };

enum class InitKind { kXavier, kTransformer, kZeros, kOnes, kAdapterDown, kPrefix };

struct ParamSpec {
  std::string name;
  std::vector<std::int64_t> shape;
  bool trainable = true;
  ParamKind kind = ParamKind::kBackbone;
  InitKind init = InitKind::kXavier;

  std::int64_t count() const {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }
};

// Full parameter census for a configuration, in the exact order the model
// registers groups: frontend, blocks, back-end, head (if n_speakers > 0),
// then the PETL insertions. Purely arithmetic; no tensors are allocated.
inline std::vector<ParamSpec> enumerate_params(const BackboneConfig& bb,
                                               const PetlConfig& petl,
                                               const MhfaConfig& mhfa,
                                               int n_speakers = 0) {
  petl.validate(bb);
  mhfa.validate();
  std::vector<ParamSpec> specs;
  const bool freeze = petl.freezes_backbone() &&
                      petl.mode != PetlMode::kFull;
  auto push = [&specs](std::string name, std::vector<std::int64_t> shape,
                       bool trainable, ParamKind kind, InitKind init) {
    specs.push_back({std::move(name), std::move(shape), trainable, kind, init});
  };

  // Frontend: strided convs + projection to d_hidden.
  std::int64_t in_ch = 1;
  for (std::size_t i = 0; i < bb.frontend.size(); ++i) {
    const auto& c = bb.frontend[i];
    push(names::conv_w(static_cast<int>(i)),
         {static_cast<std::int64_t>(c.kernel) * in_ch, c.channels}, !freeze,
         ParamKind::kFrontend, InitKind::kXavier);
    push(names::conv_b(static_cast<int>(i)), {c.channels}, !freeze,
         ParamKind::kFrontend, InitKind::kZeros);
    in_ch = c.channels;
  }
  push(names::kProjW, {in_ch, bb.d_hidden}, !freeze, ParamKind::kFrontend,
       InitKind::kXavier);
  push(names::kProjB, {bb.d_hidden}, !freeze, ParamKind::kFrontend,
       InitKind::kZeros);
  push(names::kFrontLnG, {bb.d_hidden}, !freeze, ParamKind::kFrontend,
       InitKind::kOnes);
  push(names::kFrontLnB, {bb.d_hidden}, !freeze, ParamKind::kFrontend,
       InitKind::kZeros);

  // Transformer blocks.
  const std::int64_t D = bb.d_hidden, F = bb.d_ffn;
  for (int i = 0; i < bb.n_layers; ++i) {
    const std::string p = names::block(i);
    for (const char* w : {".attn.W_Q", ".attn.W_K", ".attn.W_V", ".attn.W_O"})
      push(p + w, {D, D}, !freeze, ParamKind::kBackbone, InitKind::kTransformer);
    for (const char* b : {".attn.b_Q", ".attn.b_K", ".attn.b_V", ".attn.b_O"})
      push(p + b, {D}, !freeze, ParamKind::kBackbone, InitKind::kZeros);
    push(p + ".ffn.W_1", {D, F}, !freeze, ParamKind::kBackbone,
         InitKind::kTransformer);
    push(p + ".ffn.b_1", {F}, !freeze, ParamKind::kBackbone, InitKind::kZeros);
    push(p + ".ffn.W_2", {F, D}, !freeze, ParamKind::kBackbone,
         InitKind::kTransformer);
    push(p + ".ffn.b_2", {D}, !freeze, ParamKind::kBackbone, InitKind::kZeros);
    for (const char* g : {".ln1.gamma", ".ln2.gamma"})
      push(p + g, {D}, !freeze, ParamKind::kBackbone, InitKind::kOnes);
    for (const char* b : {".ln1.beta", ".ln2.beta"})
      push(p + b, {D}, !freeze, ParamKind::kBackbone, InitKind::kZeros);
  }

  // Back-end (always trainable).
  const std::int64_t L1 = bb.n_layers + 1;
  push(names::kMhfaAk, {L1}, true, ParamKind::kBackend, InitKind::kZeros);
  push(names::kMhfaAv, {L1}, true, ParamKind::kBackend, InitKind::kZeros);
  push(names::kMhfaWk, {D, mhfa.d_cmp}, true, ParamKind::kBackend, InitKind::kXavier);
  push(names::kMhfaWv, {D, mhfa.d_cmp}, true, ParamKind::kBackend, InitKind::kXavier);
  push(names::kMhfaU, {mhfa.n_heads, mhfa.d_cmp}, true, ParamKind::kBackend,
       InitKind::kXavier);
  push(names::kMhfaWo,
       {static_cast<std::int64_t>(mhfa.n_heads) * mhfa.d_cmp, mhfa.d_emb},
       true, ParamKind::kBackend, InitKind::kXavier);
  push(names::kMhfaBo, {mhfa.d_emb}, true, ParamKind::kBackend, InitKind::kZeros);

  if (n_speakers > 0)
    push(names::kHeadW, {mhfa.d_emb, n_speakers}, true, ParamKind::kHead,
         InitKind::kXavier);

  // PETL insertions, in apply_petl order.
  const std::int64_t dp = bb.d_proj();
  for (int i = 0; i < bb.n_layers; ++i) {
    const std::string p = names::petl_block(i);
    if (petl.mode == PetlMode::kBottleneck) {
      for (const char* a : {".adapter_attn", ".adapter_ffn"}) {
        push(p + a + std::string(".W_down"), {D, petl.d_bottleneck}, true,
             ParamKind::kPetl, InitKind::kAdapterDown);
        push(p + a + std::string(".W_up"), {petl.d_bottleneck, D}, true,
             ParamKind::kPetl, InitKind::kZeros);
      }
    }
    if (petl.mode == PetlMode::kMam) {
      push(p + ".adapter_par.W_down", {D, petl.d_bottleneck}, true,
           ParamKind::kPetl, InitKind::kAdapterDown);
      push(p + ".adapter_par.W_up", {petl.d_bottleneck, D}, true,
           ParamKind::kPetl, InitKind::kZeros);
    }
    if (petl.uses_prefix() && petl.prefix_len > 0) {
      for (int h = 0; h < bb.n_heads; ++h) {
        const std::string hp = p + ".prefix.h" + std::to_string(h);
        push(hp + ".P_K", {petl.prefix_len, dp}, true, ParamKind::kPetl,
             InitKind::kPrefix);
        push(hp + ".P_V", {petl.prefix_len, dp}, true, ParamKind::kPetl,
             InitKind::kPrefix);
        if (petl.mode == PetlMode::kMam)
          push(hp + ".gate", {1}, true, ParamKind::kPetl, InitKind::kZeros);
      }
    }
  }
  return specs;
}

// ---------------------------------------------------------------------------
// Parameter accounting
// ---------------------------------------------------------------------------

struct ParamReport {
  struct GroupRow {
    std::string name;
    std::int64_t count;
    bool trainable;
    ParamKind kind;
  };
  std::vector<GroupRow> groups;
  std::int64_t frontend_total = 0;
  std::int64_t backbone_total = 0;
  std::int64_t trainable_petl = 0;
  std::int64_t trainable_backend = 0;
  std::int64_t frozen_backbone = 0;  // frontend + blocks when frozen
  std::int64_t trainable_total = 0;
  std::int64_t total = 0;
  double trainable_ratio = 0.0;
};

// Totals are displayed truncated to 0.1M. Truncation rather than
// round-to-nearest matches the published table for seven of its eight rows
// (no single convention matches all eight); the exact integers are always
// reported alongside.
inline std::string format_millions(std::int64_t count) {
  std::int64_t tenths = count / 100000;
  std::ostringstream os;
  os << tenths / 10 << "." << tenths % 10 << "M";
  return os.str();
}

inline ParamReport report_from_specs(const std::vector<ParamSpec>& specs) {
  ParamReport r;
  for (const auto& s : specs) {
    std::int64_t n = s.count();
    r.groups.push_back({s.name, n, s.trainable, s.kind});
    r.total += n;
    if (s.trainable) r.trainable_total += n;
    switch (s.kind) {
      case ParamKind::kFrontend:
        r.frontend_total += n;
        if (!s.trainable) r.frozen_backbone += n;
        break;
      case ParamKind::kBackbone:
        r.backbone_total += n;
        if (!s.trainable) r.frozen_backbone += n;
        break;
      case ParamKind::kPetl:
        r.trainable_petl += n;
        break;
      case ParamKind::kBackend:
        r.trainable_backend += n;
        break;
      case ParamKind::kHead:
        break;
    }
  }
  r.trainable_ratio =
      r.total ? static_cast<double>(r.trainable_total) / static_cast<double>(r.total)
              : 0.0;
  return r;
}

// Exact per-group parameter counts for a configuration. The classification
// head is excluded: it scales with the speaker inventory and is dropped at
// scoring time, matching how the published budgets are quoted.
inline ParamReport count_params(const BackboneConfig& bb,
                                const PetlConfig& petl,
                                const MhfaConfig& mhfa) {
  return report_from_specs(enumerate_params(bb, petl, mhfa, 0));
}

inline std::string format_param_table(const ParamReport& r,
                                      const PetlConfig& petl) {
  std::ostringstream os;
  auto line = [&os](const std::string& label, std::int64_t count,
                    const std::string& note) {
    os << std::left << std::setw(26) << label << std::right << std::setw(14)
       << count << "  " << std::setw(7) << format_millions(count) << "  "
       << note << "\n";
  };
  os << std::left << std::setw(26) << "section" << std::right << std::setw(14)
     << "params" << "  " << std::setw(7) << "approx" << "  " << "status\n";
  line("frontend", r.frontend_total,
       r.frozen_backbone ? "frozen" : "trainable");
  line("backbone", r.backbone_total,
       r.frozen_backbone ? "frozen" : "trainable");
  if (petl.mode != PetlMode::kFull && petl.mode != PetlMode::kFixed)
    line("petl (" + to_string(petl.mode) + ")", r.trainable_petl, "trainable");
  line("backend (mhfa)", r.trainable_backend, "trainable");
  line("total", r.total, "");
  os << std::left << std::setw(26) << "trainable" << std::right
     << std::setw(14) << r.trainable_total << "  " << std::setw(7)
     << format_millions(r.trainable_total) << "  " << std::fixed
     << std::setprecision(2) << 100.0 * r.trainable_ratio << "%\n";
  os << "PETL " << format_millions(r.trainable_petl) << ", backend "
     << format_millions(r.trainable_backend) << "\n";
  return os.str();
}

inline nlohmann::json param_report_json(const ParamReport& r) {
  nlohmann::json groups = nlohmann::json::array();
  for (const auto& g : r.groups)
    groups.push_back({{"name", g.name},
                      {"count", g.count},
                      {"trainable", g.trainable}});
  return nlohmann::json{
      {"groups", std::move(groups)},
      {"frontend_total", r.frontend_total},
      {"backbone_total", r.backbone_total},
      {"trainable_petl", r.trainable_petl},
      {"trainable_backend", r.trainable_backend},
      {"frozen_backbone", r.frozen_backbone},
      {"trainable_total", r.trainable_total},
      {"total", r.total},
      {"trainable_ratio", r.trainable_ratio},
      {"trainable_petl_display", format_millions(r.trainable_petl)},
      {"trainable_backend_display", format_millions(r.trainable_backend)}};
}

// ---------------------------------------------------------------------------
// Model assembly
// ---------------------------------------------------------------------------

struct SpeakerModel {
  BackboneConfig backbone_cfg;
  MhfaConfig mhfa_cfg;
  PetlConfig petl_cfg;  // meaningful once instrumented
  int n_speakers = 0;
  bool instrumented = false;
  ParamStore params;
};

namespace detail {

inline double init_stddev(const ParamSpec& s) {
  switch (s.init) {
    case InitKind::kAdapterDown:
    case InitKind::kPrefix:
      return 0.02;
    case InitKind::kTransformer:
      // Small-std residual-branch init: blocks start near the identity.
      return 0.05;
    case InitKind::kXavier: {
      double fan_in = s.shape.size() == 2 ? static_cast<double>(s.shape[0])
                                          : static_cast<double>(s.count());
      double fan_out = s.shape.size() == 2 ? static_cast<double>(s.shape[1])
                                           : static_cast<double>(s.count());
      return std::sqrt(2.0 / (fan_in + fan_out));
    }
    default:
      return 0.0;
  }
}

inline Tensor materialize(const ParamSpec& s, const Rng& base) {
  switch (s.init) {
    case InitKind::kZeros:
      return Tensor::zeros(s.shape);
    case InitKind::kOnes:
      return Tensor::full(s.shape, 1.0f);
    default: {
      Rng rng = base.fork(s.name);
      return Tensor::randn(s.shape, rng, init_stddev(s));
    }
  }
}

}  // namespace detail

// Fresh uninstrumented model: frontend + blocks + back-end (+ head). Weights
// are keyed by group name off the given generator, so two builds from the
// same seed are identical regardless of construction order.
inline SpeakerModel build_speaker_model(const BackboneConfig& bb,
                                        const MhfaConfig& mhfa,
                                        int n_speakers, const Rng& init_rng) {
  bb.validate();
  mhfa.validate();
  SpeakerModel m;
  m.backbone_cfg = bb;
  m.mhfa_cfg = mhfa;
  m.n_speakers = n_speakers;
  PetlConfig plain;  // enumeration of the uninstrumented set
  plain.mode = PetlMode::kFull;
  for (const auto& spec : enumerate_params(bb, plain, mhfa, n_speakers))
    m.params.add(spec.name, detail::materialize(spec, init_rng),
                 spec.trainable);
  return m;
}

// Inserts PETL modules and sets freeze flags:
//   full        everything trainable, no insertions
//   fixed       frontend + backbone frozen, no insertions
//   bottleneck  two serial adapters per block, backbone frozen
//   prefix      P_K/P_V per head per block, backbone frozen
//   mam         parallel adapter + gated prefix per block, backbone frozen
// The back-end (and head) stay trainable in every mode.
inline void apply_petl(SpeakerModel& m, const PetlConfig& petl,
                       const Rng& init_rng) {
  if (m.instrumented)
    throw ContractError("apply_petl: model is already instrumented");
  petl.validate(m.backbone_cfg);
  const bool freeze = petl.mode != PetlMode::kFull;
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    auto& g = m.params[i];
    if (g.name.rfind("frontend.", 0) == 0 || g.name.rfind("backbone.", 0) == 0)
      g.trainable = !freeze;
  }
  const auto full_specs =
      enumerate_params(m.backbone_cfg, petl, m.mhfa_cfg, m.n_speakers);
  for (const auto& spec : full_specs) {
    if (spec.kind != ParamKind::kPetl) continue;
    m.params.add(spec.name, detail::materialize(spec, init_rng),
                 spec.trainable);
  }
  m.petl_cfg = petl;
  m.instrumented = true;
}

// Reference bundles for running the instrumented model.
struct ModelForwardRefs {
  ModelRefsT<float> enc;
  MhfaRefs<float> mhfa;
  AamHeadRefs<float> head;
};

inline ModelForwardRefs collect_model_refs(const SpeakerModel& m) {
  ModelForwardRefs r;
  r.enc.frontend = frontend_refs(m.params, m.backbone_cfg);
  for (int i = 0; i < m.backbone_cfg.n_layers; ++i)
    r.enc.blocks.push_back(block_refs(m.params, i));
  r.mhfa = mhfa_refs(m.params);
  if (m.n_speakers > 0) r.head.w = &m.params.at(names::kHeadW);

  if (m.instrumented) {
    const auto& petl = m.petl_cfg;
    for (int i = 0; i < m.backbone_cfg.n_layers; ++i) {
      BlockHooks<float> h;
      h.placement = petl.placement;
      const std::string p = names::petl_block(i);
      if (petl.mode == PetlMode::kBottleneck) {
        h.serial_after_attn = AdapterRefs<float>{
            &m.params.at(p + ".adapter_attn.W_down"),
            &m.params.at(p + ".adapter_attn.W_up")};
        h.serial_after_ffn = AdapterRefs<float>{
            &m.params.at(p + ".adapter_ffn.W_down"),
            &m.params.at(p + ".adapter_ffn.W_up")};
      }
      if (petl.mode == PetlMode::kMam) {
        h.parallel_ffn = AdapterRefs<float>{
            &m.params.at(p + ".adapter_par.W_down"),
            &m.params.at(p + ".adapter_par.W_up")};
      }
      if (petl.uses_prefix() && petl.prefix_len > 0) {
        PrefixRefs<float> pr;
        pr.prefix_len = petl.prefix_len;
        for (int hh = 0; hh < m.backbone_cfg.n_heads; ++hh) {
          const std::string hp = p + ".prefix.h" + std::to_string(hh);
          pr.p_k.push_back(&m.params.at(hp + ".P_K"));
          pr.p_v.push_back(&m.params.at(hp + ".P_V"));
          if (petl.mode == PetlMode::kMam)
            pr.gate.push_back(&m.params.at(hp + ".gate"));
        }
        h.prefix = std::move(pr);
      }
      r.enc.hooks.push_back(std::move(h));
    }
  }
  return r;
}

// Embedding for one utterance over its full length, no gradients.
inline Tensor embed_utterance(const SpeakerModel& m,
                              const ModelForwardRefs& refs,
                              const std::vector<float>& waveform) {
  Tape<float> tape;
  ForwardCtx<float> ctx(tape, /*train=*/false);
  Tensor wav({static_cast<std::int64_t>(waveform.size()), 1},
             std::vector<float>(waveform.begin(), waveform.end()));
  auto layers = encode_layers(ctx, refs.enc, m.backbone_cfg,
                              tape.leaf(std::move(wav)));
  auto emb = mhfa_pool(ctx, refs.mhfa, layers);
  return tape.val(emb);
}

// ---------------------------------------------------------------------------
// Checkpoint integration
// ---------------------------------------------------------------------------

inline nlohmann::json model_meta(const SpeakerModel& m) {
  nlohmann::json j;
  j["backbone"] = m.backbone_cfg;
  j["mhfa"] = m.mhfa_cfg;
  j["n_speakers"] = m.n_speakers;
  j["instrumented"] = m.instrumented;
  if (m.instrumented) j["petl"] = m.petl_cfg;
  return j;
}

inline void save_model(const SpeakerModel& m, const std::filesystem::path& path,
                       nlohmann::json extra_meta = nlohmann::json::object()) {
  nlohmann::json meta = model_meta(m);
  for (auto& [k, v] : extra_meta.items()) meta[k] = v;
  std::vector<ParamGroup> groups;
  groups.reserve(m.params.size());
  for (std::size_t i = 0; i < m.params.size(); ++i) groups.push_back(m.params[i]);
  save_checkpoint(groups, path, meta);
}

struct LoadReport {
  std::vector<std::string> loaded;
  std::vector<std::string> fresh;    // model groups absent from checkpoint
  std::vector<std::string> skipped;  // checkpoint groups absent from model
};

// Copies matching groups by name. PETL and head groups may legitimately be
// missing (fresh stage-2 instrumentation, new speaker inventory); anything
// else that fails to line up is an architecture mismatch.
inline LoadReport load_matching_params(SpeakerModel& m, const Checkpoint& ckpt) {
  LoadReport report;
  std::unordered_map<std::string, const ParamGroup*> by_name;
  for (const auto& g : ckpt.groups) by_name.emplace(g.name, &g);
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    auto& g = m.params[i];
    auto it = by_name.find(g.name);
    if (it == by_name.end()) {
      if (g.name.rfind("petl.", 0) == 0 || g.name.rfind("head.", 0) == 0) {
        report.fresh.push_back(g.name);
        continue;
      }
      throw CheckpointMismatchError(
          detail::msg("checkpoint lacks required group ", g.name));
    }
    if (it->second->tensor.shape != g.tensor.shape) {
      // A head with a different speaker inventory starts fresh; anything
      // else with the wrong shape is a different architecture.
      if (g.name.rfind("head.", 0) == 0) {
        report.fresh.push_back(g.name);
        report.skipped.push_back(g.name);
        by_name.erase(it);
        continue;
      }
      throw CheckpointMismatchError(detail::msg(
          "architecture mismatch for ", g.name, ": checkpoint ",
          it->second->tensor.shape_str(), ", model ", g.tensor.shape_str()));
    }
    g.tensor.data = it->second->tensor.data;
    report.loaded.push_back(g.name);
    by_name.erase(it);
  }
  for (const auto& [name, grp] : by_name) {
    (void)grp;
    if (name.rfind("head.", 0) == 0) {
      report.skipped.push_back(name);
      continue;
    }
    throw CheckpointMismatchError(
        detail::msg("checkpoint group ", name, " has no place in this model"));
  }
  return report;
}

// Rebuilds the model a checkpoint was saved from (configs from its meta) and
// restores every group.
inline SpeakerModel load_model(const std::filesystem::path& path) {
  Checkpoint ckpt = load_checkpoint(path);
  if (!ckpt.meta.contains("backbone"))
    throw CheckpointMismatchError("checkpoint carries no model meta");
  BackboneConfig bb = ckpt.meta.at("backbone").get<BackboneConfig>();
  MhfaConfig mhfa = ckpt.meta.at("mhfa").get<MhfaConfig>();
  int n_speakers = ckpt.meta.value("n_speakers", 0);
  SpeakerModel m = build_speaker_model(bb, mhfa, n_speakers, Rng(0));
  if (ckpt.meta.value("instrumented", false))
    apply_petl(m, ckpt.meta.at("petl").get<PetlConfig>(), Rng(0));
  load_matching_params(m, ckpt);
  return m;
}

}  // namespace psv
