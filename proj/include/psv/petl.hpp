#pragma once

#include <optional>
#include <string>
#include <vector>

#include "psv/config.hpp"
#include "psv/param.hpp"
#include "psv/tape.hpp"

namespace psv {

// References into a parameter store for one bottleneck adapter:
// W_down [D_hidden x D_bottleneck], W_up [D_bottleneck x D_hidden].
// W_up starts at zero so a fresh adapter is the identity.
template <typename T>
struct AdapterRefs {
  const ParamGroupT<T>* w_down = nullptr;
  const ParamGroupT<T>* w_up = nullptr;
};

// Per-block prefix parameters: one P_K/P_V pair per attention head, each
// [l x D_proj]. Gates are present only when the prefix is inserted as part of
// a mix-and-match adapter (see gated_prefix_attention).
template <typename T>
struct PrefixRefs {
  std::vector<const ParamGroupT<T>*> p_k;
  std::vector<const ParamGroupT<T>*> p_v;
  std::vector<const ParamGroupT<T>*> gate;  // empty when ungated
  int prefix_len = 0;

  bool gated() const { return !gate.empty(); }
};

template <typename T>
Var<T> activation_op(Var<T> x, const std::string& kind) {
  if (kind == "relu") return relu(x);
  return gelu(x);
}

// The adapter branch without its residual: W_up f(h W_down).
template <typename T>
Var<T> adapter_branch(ForwardCtx<T>& ctx, const AdapterRefs<T>& a, Var<T> h,
                      const std::string& activation) {
  if (!a.w_down || !a.w_up) throw ContractError("adapter: missing parameters");
  auto down = matmul(h, ctx.use(*a.w_down));
  return matmul(activation_op(down, activation), ctx.use(*a.w_up));
}

// Bottleneck adapter: H_out = H_in + W_up f(H_in W_down). Frame-by-frame and
// shape preserving.
template <typename T>
Var<T> bottleneck_forward(ForwardCtx<T>& ctx, const AdapterRefs<T>& a,
                          Var<T> h, const std::string& activation) {
  return add(h, adapter_branch(ctx, a, h, activation));
}

// Scaled dot-product attention for one head with optional learnable prefix
// rows prepended to keys and values:
//   out = softmax(Q concat(P_K, K)^T / sqrt(D_proj)) concat(P_V, V).
// Queries are never prefixed; output length equals the query length. A
// zero-row prefix writes the same logits in the same order as no prefix, so
// l = 0 is bit-identical to vanilla attention. Implemented as one fused node:
// only the probability matrix is materialized.
template <typename T>
Var<T> prefix_attention(Var<T> q, Var<T> k, Var<T> v,
                        std::optional<std::type_identity_t<Var<T>>> p_k = std::nullopt,
                        std::optional<std::type_identity_t<Var<T>>> p_v = std::nullopt) {
  Tape<T>& t = *q.tape;
  const auto& Q = t.val(q);
  const auto& K = t.val(k);
  const auto& V = t.val(v);
  const std::int64_t d_proj = Q.cols();
  if (K.cols() != d_proj || V.cols() != d_proj || K.rows() != V.rows())
    throw ShapeError("prefix_attention: Q/K/V shapes disagree");
  if (p_k.has_value() != p_v.has_value())
    throw ContractError("prefix_attention: P_K and P_V must come together");
  std::int64_t l = 0;
  if (p_k) {
    const auto& Pk = t.val(*p_k);
    const auto& Pv = t.val(*p_v);
    if (Pk.cols() != d_proj || Pv.cols() != d_proj || Pk.rows() != Pv.rows())
      throw ShapeError("prefix_attention: P_K/P_V shapes disagree");
    l = Pk.rows();
  }
  const std::int64_t tq = Q.rows(), tk = K.rows();
  const T s = T(1) / std::sqrt(static_cast<T>(d_proj));

  // probs = softmax(s * Q [P_K; K]^T), stored for the backward pass.
  TensorT<T> probs = TensorT<T>::zeros({tq, l + tk});
  {
    auto P = detail::mat_view_mut(probs);
    if (l > 0)
      P.block(0, 0, tq, l).noalias() =
          detail::mat_view(Q) * detail::mat_view(t.val(*p_k)).transpose() * s;
    P.block(0, l, tq, tk).noalias() =
        detail::mat_view(Q) * detail::mat_view(K).transpose() * s;
    for (std::int64_t r = 0; r < tq; ++r) {
      auto row = P.row(r).array();
      T mx = row.maxCoeff();
      row = (row - mx).exp();
      row /= row.sum();
    }
  }
  TensorT<T> out = TensorT<T>::zeros({tq, d_proj});
  {
    auto O = detail::mat_view_mut(out);
    auto P = detail::mat_view(probs);
    O.noalias() = P.block(0, l, tq, tk) * detail::mat_view(V);
    if (l > 0)
      O.noalias() += P.block(0, 0, tq, l) * detail::mat_view(t.val(*p_v));
  }
  bool needs = t.needs(q.id) || t.needs(k.id) || t.needs(v.id) ||
               (p_k && (t.needs(p_k->id) || t.needs(p_v->id)));
  std::int32_t id = t.add_node(std::move(out), needs, {});
  if (needs) {
    std::int32_t pk_id = p_k ? p_k->id : -1;
    std::int32_t pv_id = p_v ? p_v->id : -1;
    t.set_back(id, [qid = q.id, kid = k.id, vid = v.id, pk_id, pv_id, id, l, s,
                    probs = std::move(probs)](Tape<T>& tp) {
      const auto& dOut = tp.grad_acc(id);
      auto dO = detail::mat_view(dOut);
      auto P = detail::mat_view(probs);
      const std::int64_t tq2 = probs.rows(), tk2 = probs.cols() - l;
      // dP = dOut [P_V; V]^T, then dS = P o (dP - rowsum(dP o P)), scaled.
      TensorT<T> dS = TensorT<T>::zeros(probs.shape);
      {
        auto D = detail::mat_view_mut(dS);
        if (l > 0)
          D.block(0, 0, tq2, l).noalias() =
              dO * detail::mat_view(tp.val(pv_id)).transpose();
        D.block(0, l, tq2, tk2).noalias() =
            dO * detail::mat_view(tp.val(vid)).transpose();
        for (std::int64_t r = 0; r < tq2; ++r) {
          T dot = (D.row(r).array() * P.row(r).array()).sum();
          D.row(r).array() = P.row(r).array() * (D.row(r).array() - dot) * s;
        }
      }
      auto D = detail::mat_view(dS);
      if (tp.needs(qid)) {
        auto dQ = detail::mat_view_mut(tp.grad_acc(qid));
        dQ.noalias() += D.block(0, l, tq2, tk2) * detail::mat_view(tp.val(kid));
        if (l > 0)
          dQ.noalias() += D.block(0, 0, tq2, l) * detail::mat_view(tp.val(pk_id));
      }
      if (tp.needs(kid))
        detail::mat_view_mut(tp.grad_acc(kid)).noalias() +=
            D.block(0, l, tq2, tk2).transpose() * detail::mat_view(tp.val(qid));
      if (pk_id >= 0 && tp.needs(pk_id))
        detail::mat_view_mut(tp.grad_acc(pk_id)).noalias() +=
            D.block(0, 0, tq2, l).transpose() * detail::mat_view(tp.val(qid));
      if (tp.needs(vid))
        detail::mat_view_mut(tp.grad_acc(vid)).noalias() +=
            P.block(0, l, tq2, tk2).transpose() * dO;
      if (pv_id >= 0 && tp.needs(pv_id))
        detail::mat_view_mut(tp.grad_acc(pv_id)).noalias() +=
            P.block(0, 0, tq2, l).transpose() * dO;
    });
  }
  return {&t, id};
}

// Prefix branch used inside the mix-and-match adapter. A raw prefix is not
// the identity at initialization: the prefix keys grab softmax mass away from
// the content keys even when P_V is small. The branch is therefore blended
// through a per-head scalar gate that starts at zero,
//   out = attn(Q,K,V) + gate * (prefix_attn(Q,K,V,P_K,P_V) - attn(Q,K,V)),
// which is exactly the plain block at init and recovers the pure prefix
// formula at gate = 1.
template <typename T>
Var<T> gated_prefix_attention(Var<T> q, Var<T> k, Var<T> v, Var<T> p_k,
                              Var<T> p_v, Var<T> gate) {
  auto plain = prefix_attention(q, k, v);
  auto prefixed = prefix_attention(q, k, v, p_k, p_v);
  return add(plain, mul_scalar_var(sub(prefixed, plain), gate));
}

}  // namespace psv
