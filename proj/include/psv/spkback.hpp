#pragma once

#include <string>
#include <vector>

#include "psv/config.hpp"
#include "psv/param.hpp"
#include "psv/tape.hpp"

namespace psv {

namespace names {

inline constexpr const char* kMhfaAk = "backend.mhfa.a_k";
inline constexpr const char* kMhfaAv = "backend.mhfa.a_v";
inline constexpr const char* kMhfaWk = "backend.mhfa.W_k";
inline constexpr const char* kMhfaWv = "backend.mhfa.W_v";
inline constexpr const char* kMhfaU = "backend.mhfa.U";
inline constexpr const char* kMhfaWo = "backend.mhfa.W_o";
inline constexpr const char* kMhfaBo = "backend.mhfa.b_o";
inline constexpr const char* kHeadW = "head.W";

}  // namespace names

template <typename T>
struct MhfaRefs {
  const ParamGroupT<T>*a_k{}, *a_v{};   // layer-weight logits, [L+1]
  const ParamGroupT<T>*w_k{}, *w_v{};   // compression, [D_hidden x D_cmp]
  const ParamGroupT<T>* u{};            // per-head attention vectors, [H_p x D_cmp]
  const ParamGroupT<T>*w_o{}, *b_o{};   // output map, [(H_p*D_cmp) x D_emb]
};

template <typename T>
MhfaRefs<T> mhfa_refs(const ParamStoreT<T>& store) {
  MhfaRefs<T> r;
  r.a_k = &store.at(names::kMhfaAk);
  r.a_v = &store.at(names::kMhfaAv);
  r.w_k = &store.at(names::kMhfaWk);
  r.w_v = &store.at(names::kMhfaWv);
  r.u = &store.at(names::kMhfaU);
  r.w_o = &store.at(names::kMhfaWo);
  r.b_o = &store.at(names::kMhfaBo);
  return r;
}

// Multi-head factorized attentive pooling over the layer stack:
//   K = sum_i softmax(a_k)_i layers_i, V likewise with a_v
//   k = K W_k, v = V W_v                      (compressed to D_cmp)
//   per head h: alpha = softmax_t(U_h . k_t), pooled_h = sum_t alpha_t v_t
//   embedding = concat(pooled_1..H_p) W_o + b_o
// Attention weights depend only on per-frame keys and the pooled sum is
// order-free, so permuting frames leaves the embedding unchanged up to
// summation roundoff.
template <typename T>
Var<T> mhfa_pool(ForwardCtx<T>& ctx, const MhfaRefs<T>& m,
                 const std::vector<Var<T>>& layers) {
  if (layers.empty()) throw InputError("mhfa_pool: no layer outputs");
  Tape<T>& tp = ctx.tape();
  if (tp.val(layers[0]).rows() < 1)
    throw InputError("mhfa_pool: empty sequence (T = 0)");
  auto K = layer_weighted_sum(layers, ctx.use(*m.a_k));
  auto V = layer_weighted_sum(layers, ctx.use(*m.a_v));
  auto k = matmul(K, ctx.use(*m.w_k));  // [T x D_cmp]
  auto v = matmul(V, ctx.use(*m.w_v));
  auto logits = matmul(k, transpose(ctx.use(*m.u)));    // [T x H_p]
  auto probs_t = softmax_rows(transpose(logits));       // [H_p x T], over time
  auto pooled = matmul(probs_t, v);                     // [H_p x D_cmp]
  const auto& P = tp.val(pooled);
  auto flat = reshape(pooled, {1, P.rows() * P.cols()});
  auto emb = linear(flat, ctx.use(*m.w_o), ctx.use(*m.b_o));
  return reshape(emb, {tp.val(emb).cols()});
}

template <typename T>
struct AamHeadRefs {
  const ParamGroupT<T>* w = nullptr;  // class columns, [D_emb x n_speakers]
};

// AAM-softmax loss over a batch of embeddings. Embeddings and class columns
// are L2-normalized, the target logit takes the additive angular margin (with
// the hard guard), everything is scaled by s and fed to mean cross-entropy.
template <typename T>
Var<T> aam_loss(ForwardCtx<T>& ctx, const AamHeadRefs<T>& head, Var<T> emb,
                const std::vector<int>& labels, T margin, T scale_s) {
  if (!head.w) throw ContractError("aam_loss: model has no classification head");
  auto n_emb = l2_normalize_rows(emb);
  auto cols = transpose(l2_normalize_rows(transpose(ctx.use(*head.w))));
  auto cosines = matmul(n_emb, cols);
  auto logits = aam_margin_logits(cosines, labels, margin, scale_s);
  return cross_entropy_mean(logits, labels);
}

// Cosine similarity of two embeddings, accumulated in double and clamped to
// [-1, 1]. Scaling either vector by any c > 0 leaves the score unchanged.
inline double cosine_score(const Tensor& e1, const Tensor& e2) {
  if (e1.numel() != e2.numel())
    throw ShapeError(detail::msg("cosine_score: ", e1.shape_str(), " vs ",
                                 e2.shape_str()));
  double uu = 0, vv = 0, uv = 0;
  for (std::int64_t i = 0; i < e1.numel(); ++i) {
    uu += static_cast<double>(e1[i]) * e1[i];
    vv += static_cast<double>(e2[i]) * e2[i];
    uv += static_cast<double>(e1[i]) * e2[i];
  }
  if (!(uu > 0.0) || !(vv > 0.0))
    throw InputError("cosine_score: zero vector");
  double c = uv / (std::sqrt(uu) * std::sqrt(vv));
  return std::min(1.0, std::max(-1.0, c));
}

}  // namespace psv
