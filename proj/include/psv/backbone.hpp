#pragma once

#include <optional>
#include <string>
#include <vector>

#include "psv/config.hpp"
#include "psv/param.hpp"
#include "psv/petl.hpp"
#include "psv/tape.hpp"

namespace psv {

namespace names {

inline std::string conv_w(int i) { return "frontend.conv" + std::to_string(i) + ".W"; }
inline std::string conv_b(int i) { return "frontend.conv" + std::to_string(i) + ".b"; }
inline constexpr const char* kProjW = "frontend.proj.W";
inline constexpr const char* kProjB = "frontend.proj.b";
inline constexpr const char* kFrontLnG = "frontend.ln.gamma";
inline constexpr const char* kFrontLnB = "frontend.ln.beta";

inline std::string block(int i) { return "backbone.block" + std::to_string(i); }
inline std::string petl_block(int i) { return "petl.block" + std::to_string(i); }

}  // namespace names

template <typename T>
struct FrontendRefs {
  std::vector<const ParamGroupT<T>*> conv_w;
  std::vector<const ParamGroupT<T>*> conv_b;
  const ParamGroupT<T>* proj_w = nullptr;
  const ParamGroupT<T>* proj_b = nullptr;
  const ParamGroupT<T>* ln_g = nullptr;
  const ParamGroupT<T>* ln_b = nullptr;
};

template <typename T>
struct BlockRefs {
  const ParamGroupT<T>*w_q{}, *b_q{}, *w_k{}, *b_k{}, *w_v{}, *b_v{};
  const ParamGroupT<T>*w_o{}, *b_o{};
  const ParamGroupT<T>*w_1{}, *b_1{}, *w_2{}, *b_2{};
  const ParamGroupT<T>*ln1_g{}, *ln1_b{}, *ln2_g{}, *ln2_b{};
};

// PETL instrumentation attached to one block. Absent members leave the block
// untouched.
template <typename T>
struct BlockHooks {
  std::optional<AdapterRefs<T>> serial_after_attn;
  std::optional<AdapterRefs<T>> serial_after_ffn;
  std::optional<AdapterRefs<T>> parallel_ffn;
  std::optional<PrefixRefs<T>> prefix;
  AdapterPlacement placement = AdapterPlacement::kPostResidual;
};

template <typename T>
FrontendRefs<T> frontend_refs(const ParamStoreT<T>& store,
                              const BackboneConfig& cfg) {
  FrontendRefs<T> r;
  for (std::size_t i = 0; i < cfg.frontend.size(); ++i) {
    r.conv_w.push_back(&store.at(names::conv_w(static_cast<int>(i))));
    r.conv_b.push_back(&store.at(names::conv_b(static_cast<int>(i))));
  }
  r.proj_w = &store.at(names::kProjW);
  r.proj_b = &store.at(names::kProjB);
  r.ln_g = &store.at(names::kFrontLnG);
  r.ln_b = &store.at(names::kFrontLnB);
  return r;
}

template <typename T>
BlockRefs<T> block_refs(const ParamStoreT<T>& store, int block) {
  const std::string p = names::block(block);
  BlockRefs<T> r;
  r.w_q = &store.at(p + ".attn.W_Q");
  r.b_q = &store.at(p + ".attn.b_Q");
  r.w_k = &store.at(p + ".attn.W_K");
  r.b_k = &store.at(p + ".attn.b_K");
  r.w_v = &store.at(p + ".attn.W_V");
  r.b_v = &store.at(p + ".attn.b_V");
  r.w_o = &store.at(p + ".attn.W_O");
  r.b_o = &store.at(p + ".attn.b_O");
  r.w_1 = &store.at(p + ".ffn.W_1");
  r.b_1 = &store.at(p + ".ffn.b_1");
  r.w_2 = &store.at(p + ".ffn.W_2");
  r.b_2 = &store.at(p + ".ffn.b_2");
  r.ln1_g = &store.at(p + ".ln1.gamma");
  r.ln1_b = &store.at(p + ".ln1.beta");
  r.ln2_g = &store.at(p + ".ln2.gamma");
  r.ln2_b = &store.at(p + ".ln2.beta");
  return r;
}

// Frame count after the strided frontend: each conv layer maps T to
// floor(T / stride) (windows start at t*stride, zero-padded past the input),
// so the whole stack yields floor(samples / product_of_strides).
inline std::int64_t frontend_frame_count(const BackboneConfig& cfg,
                                         std::int64_t samples) {
  return samples / cfg.frontend_stride_product();
}

inline std::int64_t frontend_min_samples(const BackboneConfig& cfg) {
  return cfg.frontend_stride_product();
}

// CNN frontend over a raw waveform [N x 1]: strided conv + activation per
// layer, then a linear projection to d_hidden and a layer norm that pins the
// feature scale. Output is [T x d_hidden].
template <typename T>
Var<T> frontend_encode(ForwardCtx<T>& ctx, const FrontendRefs<T>& refs,
                       const BackboneConfig& cfg, Var<T> waveform) {
  const auto& W = ctx.tape().val(waveform);
  if (W.rank() != 2 || W.cols() != 1)
    throw ShapeError(detail::msg("frontend_encode: waveform must be [N x 1], got ",
                                 W.shape_str()));
  if (W.rows() < frontend_min_samples(cfg))
    throw InputError(detail::msg("frontend_encode: waveform of ", W.rows(),
                                 " samples is shorter than the minimum of ",
                                 frontend_min_samples(cfg)));
  Var<T> x = waveform;
  for (std::size_t i = 0; i < cfg.frontend.size(); ++i) {
    const auto& c = cfg.frontend[i];
    x = conv1d(x, ctx.use(*refs.conv_w[i]), ctx.use(*refs.conv_b[i]), c.kernel,
               c.stride);
    x = activation_op(x, cfg.activation);
  }
  x = linear(x, ctx.use(*refs.proj_w), ctx.use(*refs.proj_b));
  return layer_norm(x, ctx.use(*refs.ln_g), ctx.use(*refs.ln_b));
}

template <typename T>
Var<T> mha_forward(ForwardCtx<T>& ctx, const BlockRefs<T>& b, Var<T> x_ln,
                   const BackboneConfig& cfg, const PrefixRefs<T>* prefix) {
  auto q_all = linear(x_ln, ctx.use(*b.w_q), ctx.use(*b.b_q));
  auto k_all = linear(x_ln, ctx.use(*b.w_k), ctx.use(*b.b_k));
  auto v_all = linear(x_ln, ctx.use(*b.w_v), ctx.use(*b.b_v));
  const int H = cfg.n_heads;
  const std::int64_t dp = cfg.d_proj();
  if (prefix && prefix->prefix_len > 0 &&
      static_cast<int>(prefix->p_k.size()) != H)
    throw ContractError(detail::msg("wiring: prefix carries ",
                                    prefix->p_k.size(), " heads, block has ",
                                    H));
  std::vector<Var<T>> heads;
  heads.reserve(static_cast<std::size_t>(H));
  for (int h = 0; h < H; ++h) {
    auto qh = slice_cols(q_all, h * dp, (h + 1) * dp);
    auto kh = slice_cols(k_all, h * dp, (h + 1) * dp);
    auto vh = slice_cols(v_all, h * dp, (h + 1) * dp);
    if (prefix == nullptr || prefix->prefix_len == 0) {
      heads.push_back(prefix_attention(qh, kh, vh));
    } else {
      auto pk = ctx.use(*prefix->p_k[static_cast<std::size_t>(h)]);
      auto pv = ctx.use(*prefix->p_v[static_cast<std::size_t>(h)]);
      if (prefix->gated()) {
        auto g = ctx.use(*prefix->gate[static_cast<std::size_t>(h)]);
        heads.push_back(gated_prefix_attention(qh, kh, vh, pk, pv, g));
      } else {
        heads.push_back(prefix_attention(qh, kh, vh, pk, pv));
      }
    }
  }
  return linear(concat_cols(heads), ctx.use(*b.w_o), ctx.use(*b.b_o));
}

// Pre-norm residual block:
//   H' = H_in + MHA(LN(H_in))          [keys/values prefix-extended if hooked]
//   out = H' + FFN(LN(H'))             [+ parallel adapter branch in MAM mode]
// Serial adapters (bottleneck mode) wrap each sublayer per the configured
// placement. Shape is preserved for every T >= 1.
template <typename T>
Var<T> block_forward(ForwardCtx<T>& ctx, const BlockRefs<T>& b, Var<T> h_in,
                     const BackboneConfig& cfg,
                     const BlockHooks<T>* hooks = nullptr) {
  const PrefixRefs<T>* prefix =
      (hooks && hooks->prefix) ? &*hooks->prefix : nullptr;
  const bool post =
      !hooks || hooks->placement == AdapterPlacement::kPostResidual;

  auto x1 = layer_norm(h_in, ctx.use(*b.ln1_g), ctx.use(*b.ln1_b));
  auto attn = mha_forward(ctx, b, x1, cfg, prefix);
  if (hooks && hooks->serial_after_attn && !post)
    attn = bottleneck_forward(ctx, *hooks->serial_after_attn, attn,
                              cfg.activation);
  auto h1 = add(h_in, attn);
  if (hooks && hooks->serial_after_attn && post)
    h1 = bottleneck_forward(ctx, *hooks->serial_after_attn, h1,
                            cfg.activation);

  auto x2 = layer_norm(h1, ctx.use(*b.ln2_g), ctx.use(*b.ln2_b));
  auto ffn = linear(activation_op(linear(x2, ctx.use(*b.w_1), ctx.use(*b.b_1)),
                                  cfg.activation),
                    ctx.use(*b.w_2), ctx.use(*b.b_2));
  if (hooks && hooks->serial_after_ffn && !post)
    ffn = bottleneck_forward(ctx, *hooks->serial_after_ffn, ffn,
                             cfg.activation);
  auto h2 = add(h1, ffn);
  if (hooks && hooks->parallel_ffn)
    h2 = add(h2, adapter_branch(ctx, *hooks->parallel_ffn, x2, cfg.activation));
  if (hooks && hooks->serial_after_ffn && post)
    h2 = bottleneck_forward(ctx, *hooks->serial_after_ffn, h2, cfg.activation);
  return h2;
}

// All reference bundles needed to run a full model forward.
template <typename T>
struct ModelRefsT {
  FrontendRefs<T> frontend;
  std::vector<BlockRefs<T>> blocks;
  std::vector<BlockHooks<T>> hooks;  // empty when uninstrumented
};

// Frontend output plus every block output, each [T x d_hidden]; feeds the
// layer-weighted back-end.
template <typename T>
std::vector<Var<T>> encode_layers(ForwardCtx<T>& ctx, const ModelRefsT<T>& m,
                                  const BackboneConfig& cfg, Var<T> waveform) {
  std::vector<Var<T>> outs;
  outs.reserve(static_cast<std::size_t>(cfg.n_layers) + 1);
  Var<T> h = frontend_encode(ctx, m.frontend, cfg, waveform);
  outs.push_back(h);
  for (int i = 0; i < cfg.n_layers; ++i) {
    const BlockHooks<T>* hk =
        m.hooks.empty() ? nullptr : &m.hooks[static_cast<std::size_t>(i)];
    h = block_forward(ctx, m.blocks[static_cast<std::size_t>(i)], h, cfg, hk);
    outs.push_back(h);
  }
  return outs;
}

}  // namespace psv
