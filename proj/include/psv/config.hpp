#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "psv/errors.hpp"

namespace psv {

struct ConvLayerSpec {
  int channels = 0;
  int kernel = 0;
  int stride = 0;
};

inline void to_json(nlohmann::json& j, const ConvLayerSpec& c) {
  j = nlohmann::json{{"channels", c.channels},
                     {"kernel", c.kernel},
                     {"stride", c.stride}};
}
inline void from_json(const nlohmann::json& j, ConvLayerSpec& c) {
  j.at("channels").get_to(c.channels);
  j.at("kernel").get_to(c.kernel);
  j.at("stride").get_to(c.stride);
}

// Encoder shape: strided conv frontend plus a stack of pre-norm transformer
// blocks. Presets: "base" (12 x 768), "large" (24 x 1024) and "desk", a
// 4 x 64 configuration small enough to train end to end on a laptop CPU.
struct BackboneConfig {
  int n_layers = 0;
  int d_hidden = 0;
  int n_heads = 0;
  int d_ffn = 0;
  std::vector<ConvLayerSpec> frontend;
  std::string activation = "gelu";  // or "relu"

  int d_proj() const { return d_hidden / n_heads; }

  std::int64_t frontend_stride_product() const {
    std::int64_t p = 1;
    for (const auto& c : frontend) p *= c.stride;
    return p;
  }

  void validate() const {
    if (n_layers < 1 || d_hidden < 1 || n_heads < 1 || d_ffn < 1)
      throw ConfigError("backbone: all dimensions must be positive");
    if (d_hidden % n_heads != 0)
      throw ConfigError(detail::msg("backbone: d_hidden ", d_hidden,
                                    " not divisible by n_heads ", n_heads));
    if (frontend.empty()) throw ConfigError("backbone: frontend is empty");
    for (const auto& c : frontend)
      if (c.channels < 1 || c.kernel < 1 || c.stride < 1)
        throw ConfigError("backbone: conv layer fields must be positive");
    if (activation != "gelu" && activation != "relu")
      throw ConfigError(detail::msg("backbone: unknown activation ",
                                    activation));
  }

  static BackboneConfig preset(const std::string& name) {
    BackboneConfig c;
    if (name == "base") {
      c.n_layers = 12;
      c.d_hidden = 768;
      c.n_heads = 12;
      c.d_ffn = 3072;
      c.frontend = {{512, 10, 5}, {512, 3, 2}, {512, 3, 2}, {512, 3, 2},
                    {768, 3, 2},  {768, 3, 2}, {768, 2, 2}};
    } else if (name == "large") {
      c.n_layers = 24;
      c.d_hidden = 1024;
      c.n_heads = 16;
      c.d_ffn = 4096;
      c.frontend = {{512, 10, 5}, {512, 3, 2}, {512, 3, 2}, {512, 3, 2},
                    {768, 3, 2},  {768, 3, 2}, {768, 2, 2}};
    } else if (name == "desk") {
      c.n_layers = 4;
      c.d_hidden = 64;
      c.n_heads = 4;
      c.d_ffn = 256;
      // Wide kernels so the first layers can form narrowband filters; the
      // stride product stays 32 (16000 samples -> 500 frames).
      c.frontend = {{64, 32, 4}, {128, 16, 4}, {128, 8, 2}};
    } else {
      throw ConfigError(detail::msg("unknown backbone preset: ", name));
    }
    return c;
  }

  static const std::vector<std::string>& preset_names() {
    static const std::vector<std::string> names = {"base", "large", "desk"};
    return names;
  }
};

inline void to_json(nlohmann::json& j, const BackboneConfig& c) {
  j = nlohmann::json{{"n_layers", c.n_layers},   {"d_hidden", c.d_hidden},
                     {"n_heads", c.n_heads},     {"d_ffn", c.d_ffn},
                     {"frontend", c.frontend},   {"activation", c.activation}};
}
inline void from_json(const nlohmann::json& j, BackboneConfig& c) {
  if (j.is_string()) {
    c = BackboneConfig::preset(j.get<std::string>());
    return;
  }
  if (j.contains("preset")) {
    c = BackboneConfig::preset(j.at("preset").get<std::string>());
    return;
  }
  j.at("n_layers").get_to(c.n_layers);
  j.at("d_hidden").get_to(c.d_hidden);
  j.at("n_heads").get_to(c.n_heads);
  j.at("d_ffn").get_to(c.d_ffn);
  j.at("frontend").get_to(c.frontend);
  c.activation = j.value("activation", "gelu");
}

enum class PetlMode { kFull, kFixed, kBottleneck, kPrefix, kMam };

inline std::string to_string(PetlMode m) {
  switch (m) {
    case PetlMode::kFull: return "full";
    case PetlMode::kFixed: return "fixed";
    case PetlMode::kBottleneck: return "bottleneck";
    case PetlMode::kPrefix: return "prefix";
    case PetlMode::kMam: return "mam";
  }
  return "?";
}

inline PetlMode petl_mode_from_string(const std::string& s) {
  if (s == "full") return PetlMode::kFull;
  if (s == "fixed") return PetlMode::kFixed;
  if (s == "bottleneck") return PetlMode::kBottleneck;
  if (s == "prefix") return PetlMode::kPrefix;
  if (s == "mam") return PetlMode::kMam;
  throw ConfigError(detail::msg("unknown petl mode: ", s));
}

// Where serial adapters sit relative to the sublayer residual. The default
// applies them after the residual addition (Houlsby placement).
enum class AdapterPlacement { kPostResidual, kPreResidual };

struct PetlConfig {
  PetlMode mode = PetlMode::kFull;
  int d_bottleneck = 64;  // bottleneck / mam
  int prefix_len = 0;     // prefix / mam
  AdapterPlacement placement = AdapterPlacement::kPostResidual;

  bool uses_adapters() const {
    return mode == PetlMode::kBottleneck || mode == PetlMode::kMam;
  }
  bool uses_prefix() const {
    return mode == PetlMode::kPrefix || mode == PetlMode::kMam;
  }
  bool freezes_backbone() const {
    return mode != PetlMode::kFull;
  }

  void validate(const BackboneConfig& bb) const {
    bb.validate();
    if (uses_adapters() && d_bottleneck < 1)
      throw ConfigError("petl: d_bottleneck must be >= 1");
    if (uses_prefix() && prefix_len < 0)
      throw ConfigError("petl: prefix_len must be >= 0");
  }
};

inline void to_json(nlohmann::json& j, const PetlConfig& c) {
  j = nlohmann::json{
      {"mode", to_string(c.mode)},
      {"d_bottleneck", c.d_bottleneck},
      {"prefix_len", c.prefix_len},
      {"placement", c.placement == AdapterPlacement::kPostResidual
                        ? "post_residual"
                        : "pre_residual"}};
}
inline void from_json(const nlohmann::json& j, PetlConfig& c) {
  c.mode = petl_mode_from_string(j.at("mode").get<std::string>());
  c.d_bottleneck = j.value("d_bottleneck", 64);
  c.prefix_len = j.value("prefix_len", 0);
  std::string p = j.value("placement", "post_residual");
  if (p == "post_residual") c.placement = AdapterPlacement::kPostResidual;
  else if (p == "pre_residual") c.placement = AdapterPlacement::kPreResidual;
  else throw ConfigError(detail::msg("unknown adapter placement: ", p));
}

// MHFA pooling shape. The base-scale defaults follow the cited back-end and
// land near its published 2.2M budget; the desk preset scales down.
struct MhfaConfig {
  int d_cmp = 128;
  int n_heads = 64;
  int d_emb = 256;

  void validate() const {
    if (d_cmp < 1 || n_heads < 1 || d_emb < 1)
      throw ConfigError("mhfa: all dimensions must be positive");
  }

  static MhfaConfig for_backbone_preset(const std::string& name) {
    MhfaConfig c;
    if (name == "desk") c = {32, 8, 64};
    return c;  // base/large keep the published-scale defaults
  }
};

inline void to_json(nlohmann::json& j, const MhfaConfig& c) {
  j = nlohmann::json{{"d_cmp", c.d_cmp},
                     {"n_heads", c.n_heads},
                     {"d_emb", c.d_emb}};
}
inline void from_json(const nlohmann::json& j, MhfaConfig& c) {
  c.d_cmp = j.value("d_cmp", 128);
  c.n_heads = j.value("n_heads", 64);
  c.d_emb = j.value("d_emb", 256);
}

// Training schedule. Desk defaults are sized for CPU runs; the published
// protocol used batch 120 at 3-second crops, which these fields can express.
struct TrainConfig {
  int epochs = 10;
  double base_lr = 1e-3;
  double lr_decay_per_epoch = 0.95;
  int batch_size = 32;
  double crop_s = 3.0;
  double margin = 0.2;
  double scale = 30.0;
  std::string optimizer = "sgd";  // "sgd" (momentum) or "adam"
  double momentum = 0.9;          // beta1 under adam
  bool augment = true;
  std::uint64_t seed = 0;
  PetlConfig petl;
  std::string init_from;  // optional checkpoint path

  double lr_at_epoch(int e) const {
    double lr = base_lr;
    for (int i = 0; i < e; ++i) lr *= lr_decay_per_epoch;
    return lr;
  }

  void validate() const {
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (!(lr_decay_per_epoch > 0.0 && lr_decay_per_epoch <= 1.0))
      throw ConfigError("train: lr_decay_per_epoch must be in (0, 1]");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (crop_s <= 0) throw ConfigError("train: crop_s must be positive");
    if (!(margin >= 0.0 && margin < 1.5707963267948966))
      throw ConfigError("train: margin must be in [0, pi/2)");
    if (scale <= 0) throw ConfigError("train: scale must be positive");
    if (optimizer != "sgd" && optimizer != "adam")
      throw ConfigError(detail::msg("train: unknown optimizer ", optimizer));
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs},
                     {"base_lr", c.base_lr},
                     {"lr_decay_per_epoch", c.lr_decay_per_epoch},
                     {"batch_size", c.batch_size},
                     {"crop_s", c.crop_s},
                     {"margin", c.margin},
                     {"scale", c.scale},
                     {"optimizer", c.optimizer},
                     {"momentum", c.momentum},
                     {"augment", c.augment},
                     {"seed", c.seed},
                     {"petl", c.petl}};
  if (!c.init_from.empty()) j["init_from"] = c.init_from;
}
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.epochs = j.value("epochs", 10);
  c.base_lr = j.value("base_lr", 1e-3);
  c.lr_decay_per_epoch = j.value("lr_decay_per_epoch", 0.95);
  c.batch_size = j.value("batch_size", 32);
  c.crop_s = j.value("crop_s", 3.0);
  c.margin = j.value("margin", 0.2);
  c.scale = j.value("scale", 30.0);
  c.optimizer = j.value("optimizer", "sgd");
  c.momentum = j.value("momentum", 0.9);
  c.augment = j.value("augment", true);
  c.seed = j.value("seed", std::uint64_t{0});
  if (j.contains("petl")) j.at("petl").get_to(c.petl);
  c.init_from = j.value("init_from", "");
}

// Large-margin fine-tuning: a short continuation with longer crops and a
// bigger margin, applied on top of a trained checkpoint.
struct LmftConfig {
  int extra_epochs = 2;
  double crop_s = 5.0;
  double margin = 0.5;
};

inline void to_json(nlohmann::json& j, const LmftConfig& c) {
  j = nlohmann::json{{"extra_epochs", c.extra_epochs},
                     {"crop_s", c.crop_s},
                     {"margin", c.margin}};
}
inline void from_json(const nlohmann::json& j, LmftConfig& c) {
  c.extra_epochs = j.value("extra_epochs", 2);
  c.crop_s = j.value("crop_s", 5.0);
  c.margin = j.value("margin", 0.5);
}

}  // namespace psv
