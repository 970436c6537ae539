#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <type_traits>
#include <optional>
#include <utility>
#include <vector>

#include "psv/errors.hpp"
#include "psv/tensor.hpp"

namespace psv {

template <typename T>
class Tape;

// Handle to a tape node. Cheap to copy; valid for the lifetime of the tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::int32_t id = -1;
};

// Reverse-mode tape over the fixed op set the architecture needs. Ops record
// a backward closure only when some input requires a gradient, so frozen
// subgraphs and inference passes pay no autodiff cost. Gradients for a matmul
// input that is frozen are simply not computed; gradients still flow through
// it to earlier trainable nodes.
template <typename T>
class Tape {
 public:
  using BackFn = std::function<void(Tape&)>;

  Var<T> leaf(TensorT<T> value, bool needs_grad = false) {
    return {this, add_node(std::move(value), needs_grad, {})};
  }

  // Leaf whose storage lives outside the tape (model parameters). The pointee
  // must outlive the tape and stay unmodified while the tape is alive.
  Var<T> leaf_view(const TensorT<T>* value, bool needs_grad) {
    nodes_.push_back(Node{});
    Node& n = nodes_.back();
    n.view = value;
    n.needs_grad = needs_grad;
    return {this, static_cast<std::int32_t>(nodes_.size() - 1)};
  }

  const TensorT<T>& val(std::int32_t id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    return n.view ? *n.view : n.owned;
  }
  const TensorT<T>& val(Var<T> v) const { return val(v.id); }

  bool needs(std::int32_t id) const {
    return nodes_[static_cast<std::size_t>(id)].needs_grad;
  }

  bool has_grad(std::int32_t id) const {
    return !nodes_[static_cast<std::size_t>(id)].grad.data.empty();
  }

  const TensorT<T>& grad(Var<T> v) const {
    const Node& n = nodes_[static_cast<std::size_t>(v.id)];
    if (n.grad.data.empty())
      throw ContractError("grad(): no gradient recorded for this node");
    return n.grad;
  }

  // Accumulation buffer, allocated as zeros on first touch.
  TensorT<T>& grad_acc(std::int32_t id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.data.empty()) n.grad = TensorT<T>::zeros(val(id).shape);
    return n.grad;
  }

  void accum(std::int32_t id, const TensorT<T>& contribution) {
    detail::add_into(grad_acc(id), contribution);
  }

  std::int32_t add_node(TensorT<T> value, bool needs_grad, BackFn back) {
    nodes_.push_back(Node{});
    Node& n = nodes_.back();
    n.owned = std::move(value);
    n.needs_grad = needs_grad;
    n.back = std::move(back);
    return static_cast<std::int32_t>(nodes_.size() - 1);
  }

  void set_back(std::int32_t id, BackFn back) {
    nodes_[static_cast<std::size_t>(id)].back = std::move(back);
  }

  // Reverse sweep from a scalar loss. Nodes whose gradient buffer was never
  // touched contribute nothing and are skipped.
  void backward(Var<T> loss) {
    if (loss.tape != this) throw ContractError("backward(): foreign tape var");
    if (val(loss.id).numel() != 1)
      throw ContractError(detail::msg("backward(): loss must be scalar, got ",
                                      val(loss.id).shape_str()));
    grad_acc(loss.id).data[0] = T(1);
    for (std::int32_t i = loss.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.back && !n.grad.data.empty()) n.back(*this);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    TensorT<T> owned;
    const TensorT<T>* view = nullptr;
    TensorT<T> grad;
    bool needs_grad = false;
    BackFn back;
  };

  std::vector<Node> nodes_;
};

namespace detail {

template <typename T>
Tape<T>& same_tape(Var<T> a, Var<T> b) {
  if (a.tape != b.tape || a.tape == nullptr)
    throw ContractError("op on vars from different tapes");
  return *a.tape;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Core linear algebra
// ---------------------------------------------------------------------------

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  Tape<T>& t = detail::same_tape(a, b);
  const auto& A = t.val(a);
  const auto& B = t.val(b);
  if (A.rank() != 2 || B.rank() != 2 || A.cols() != B.rows())
    throw ShapeError(detail::msg("matmul: inner dimensions disagree, ",
                                 A.shape_str(), " x ", B.shape_str()));
  bool needs = t.needs(a.id) || t.needs(b.id);
  std::int32_t id = t.add_node(detail::mm(A, B), needs, {});
  if (needs) {
    t.set_back(id, [aid = a.id, bid = b.id, id](Tape<T>& tp) {
      const auto& dY = tp.grad_acc(id);
      if (tp.needs(aid)) tp.accum(aid, detail::mm_nt(dY, tp.val(bid)));
      if (tp.needs(bid)) tp.accum(bid, detail::mm_tn(tp.val(aid), dY));
    });
  }
  return {&t, id};
}

// y = x W (+ b broadcast over rows).
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, std::optional<std::type_identity_t<Var<T>>> b = std::nullopt) {
  Tape<T>& t = detail::same_tape(x, w);
  const auto& X = t.val(x);
  const auto& W = t.val(w);
  if (X.rank() != 2 || W.rank() != 2 || X.cols() != W.rows())
    throw ShapeError(detail::msg("linear: inner dimensions disagree, ",
                                 X.shape_str(), " x ", W.shape_str()));
  TensorT<T> Y = detail::mm(X, W);
  bool needs = t.needs(x.id) || t.needs(w.id);
  if (b) {
    const auto& bv = t.val(*b);
    if (bv.rank() != 1 || bv.shape[0] != W.cols())
      throw ShapeError(detail::msg("linear: bias shape ", bv.shape_str(),
                                   " does not match output width ", W.cols()));
    for (std::int64_t r = 0; r < Y.rows(); ++r)
      for (std::int64_t c = 0; c < Y.cols(); ++c) Y.at(r, c) += bv[c];
    needs = needs || t.needs(b->id);
  }
  std::int32_t id = t.add_node(std::move(Y), needs, {});
  if (needs) {
    std::int32_t bid = b ? b->id : -1;
    t.set_back(id, [xid = x.id, wid = w.id, bid, id](Tape<T>& tp) {
      const auto& dY = tp.grad_acc(id);
      if (tp.needs(xid)) tp.accum(xid, detail::mm_nt(dY, tp.val(wid)));
      if (tp.needs(wid)) tp.accum(wid, detail::mm_tn(tp.val(xid), dY));
      if (bid >= 0 && tp.needs(bid)) {
        auto& db = tp.grad_acc(bid);
        for (std::int64_t r = 0; r < dY.rows(); ++r)
          for (std::int64_t c = 0; c < dY.cols(); ++c) db[c] += dY.at(r, c);
      }
    });
  }
  return {&t, id};
}

template <typename T>
Var<T> transpose(Var<T> x) {
  Tape<T>& t = *x.tape;
  const auto& X = t.val(x);
  if (X.rank() != 2) throw ShapeError("transpose: rank-2 tensor required");
  TensorT<T> Y = TensorT<T>::zeros({X.cols(), X.rows()});
  detail::mat_view_mut(Y) = detail::mat_view(X).transpose();
  bool needs = t.needs(x.id);
  std::int32_t id = t.add_node(std::move(Y), needs, {});
  if (needs) {
    t.set_back(id, [xid = x.id, id](Tape<T>& tp) {
      const auto& dY = tp.grad_acc(id);
      detail::mat_view_mut(tp.grad_acc(xid)) +=
          detail::mat_view(dY).transpose();
    });
  }
  return {&t, id};
}

// ---------------------------------------------------------------------------
// Elementwise and broadcast ops
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  Tape<T>& t = detail::same_tape(a, b);
  const auto& A = t.val(a);
  const auto& B = t.val(b);
  detail::require_same_shape(A, B, "add");
  TensorT<T> Y = A;
  detail::add_into(Y, B);
  bool needs = t.needs(a.id) || t.needs(b.id);
  std::int32_t id = t.add_node(std::move(Y), needs, {});
  if (needs) {
    t.set_back(id, [aid = a.id, bid = b.id, id](Tape<T>& tp) {
      const auto& dY = tp.grad_acc(id);
      if (tp.needs(aid)) tp.accum(aid, dY);
      if (tp.needs(bid)) tp.accum(bid, dY);
    });
  }
  return {&t, id};
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  Tape<T>& t = detail::same_tape(a, b);
  const auto& A = t.val(a);
  const auto& B = t.val(b);
  detail::require_same_shape(A, B, "sub");
  TensorT<T> Y = A;
  for (std::size_t i = 0; i < Y.data.size(); ++i) Y.data[i] -= B.data[i];
  bool needs = t.needs(a.id) || t.needs(b.id);
  std::int32_t id = t.add_node(std::move(Y), needs, {});
  if (needs) {
    t.set_back(id, [aid = a.id, bid = b.id, id](Tape<T>& tp) {
      const auto& dY = tp.grad_acc(id);
      if (tp.needs(aid)) tp.accum(aid, dY);
      if (tp.needs(bid)) {
        auto& dB = tp.grad_acc(bid);
        for (std::size_t i = 0; i < dB.data.size(); ++i)
          dB.data[i] -= dY.data[i];
      }
    });
  }
  return {&t, id};
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  Tape<T>& t = detail::same_tape(a, b);
  const auto& A = t.val(a);
  const auto& B = t.val(b);
  detail::require_same_shape(A, B, "mul");
  TensorT<T> Y = A;
  for (std::size_t i = 0; i < Y.data.size(); ++i) Y.data[i] *= B.data[i];
  bool needs = t.needs(a.id) || t.needs(b.id);
  std::int32_t id = t.add_node(std::move(Y), needs, {});
  if (needs) {
    t.set_back(id, [aid = a.id, bid = b.id, id](Tape<T>& tp) {
      const auto& dY = tp.grad_acc(id);
      if (tp.needs(aid)) {
        auto& dA = tp.grad_acc(aid);
        const auto& B2 = tp.val(bid);
        for (std::size_t i = 0; i < dA.data.size(); ++i)
          dA.data[i] += dY.data[i] * B2.data[i];
      }
      if (tp.needs(bid)) {
        auto& dB = tp.grad_acc(bid);
        const auto& A2 = tp.val(aid);
        for (std::size_t i = 0; i < dB.data.size(); ++i)
          dB.data[i] += dY.data[i] * A2.data[i];
      }
    });
  }
  return {&t, id};
}

template <typename T>
Var<T> square(Var<T> x) {
  return mul(x, x);
}

// x [M x N] + v [N] broadcast over rows.
template <typename T>
Var<T> add_rowvec(Var<T> x, Var<T> v) {
  Tape<T>& t = detail::same_tape(x, v);
  const auto& X = t.val(x);
  const auto& V = t.val(v);
  if (X.rank() != 2 || V.rank() != 1 || V.shape[0] != X.cols())
    throw ShapeError(detail::msg("add_rowvec: ", X.shape_str(), " + ",
                                 V.shape_str()));
  TensorT<T> Y = X;
  for (std::int64_t r = 0; r < Y.rows(); ++r)
    for (std::int64_t c = 0; c < Y.cols(); ++c) Y.at(r, c) += V[c];
  bool needs = t.needs(x.id) || t.needs(v.id);
  std::int32_t id = t.add_node(std::move(Y), needs, {});
  if (needs) {
    t.set_back(id, [xid = x.id, vid = v.id, id](Tape<T>& tp) {
      const auto& dY = tp.grad_acc(id);
      if (tp.needs(xid)) tp.accum(xid, dY);
      if (tp.needs(vid)) {
        auto& dV = tp.grad_acc(vid);
        for (std::int64_t r = 0; r < dY.rows(); ++r)
          for (std::int64_t c = 0; c < dY.cols(); ++c) dV[c] += dY.at(r, c);
      }
    });
  }
  return {&t, id};
}

template <typename T>
Var<T> scale(Var<T> x, T c) {
  Tape<T>& t = *x.tape;
  TensorT<T> Y = t.val(x);
  for (auto& v : Y.data) v *= c;
  bool needs = t.needs(x.id);
  std::int32_t id = t.add_node(std::move(Y), needs, {});
  if (needs) {
    t.set_back(id, [xid = x.id, c, id](Tape<T>& tp) {
      const auto& dY = tp.grad_acc(id);
      auto& dX = tp.grad_acc(xid);
      for (std::size_t i = 0; i < dX.data.size(); ++i)
        dX.data[i] += c * dY.data[i];
    });
  }
  return {&t, id};
}

// x scaled by a one-element tensor variable.
template <typename T>
Var<T> mul_scalar_var(Var<T> x, Var<T> s) {
  Tape<T>& t = detail::same_tape(x, s);
  const auto& X = t.val(x);
  const auto& S = t.val(s);
  if (S.numel() != 1)
    throw ShapeError(detail::msg("mul_scalar_var: scalar expected, got ",
                                 S.shape_str()));
  TensorT<T> Y = X;
  for (auto& v : Y.data) v *= S.data[0];
  bool needs = t.needs(x.id) || t.needs(s.id);
  std::int32_t id = t.add_node(std::move(Y), needs, {});
  if (needs) {
    t.set_back(id, [xid = x.id, sid = s.id, id](Tape<T>& tp) {
      const auto& dY = tp.grad_acc(id);
      T sv = tp.val(sid).data[0];
      if (tp.needs(xid)) {
        auto& dX = tp.grad_acc(xid);
        for (std::size_t i = 0; i < dX.data.size(); ++i)
          dX.data[i] += sv * dY.data[i];
      }
      if (tp.needs(sid)) {
        const auto& X2 = tp.val(xid);
        T acc = T(0);
        for (std::size_t i = 0; i < X2.data.size(); ++i)
          acc += X2.data[i] * dY.data[i];
        tp.grad_acc(sid).data[0] += acc;
      }
    });
  }
  return {&t, id};
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalization
// ---------------------------------------------------------------------------

// Row softmax with per-row max subtraction. NaN input is rejected.
template <typename T>
Var<T> softmax_rows(Var<T> x) {
  Tape<T>& t = *x.tape;
  const auto& X = t.val(x);
  if (X.rank() != 2) throw ShapeError("softmax_rows: rank-2 tensor required");
  if (!X.all_finite()) throw NumericError("softmax_rows: non-finite input");
  TensorT<T> Y = X;
  {
    auto M = detail::mat_view_mut(Y);
    for (std::int64_t r = 0; r < Y.rows(); ++r) {
      auto row = M.row(r).array();
      T mx = row.maxCoeff();
      row = (row - mx).exp();
      row /= row.sum();
    }
  }
  bool needs = t.needs(x.id);
  std::int32_t id = t.add_node(std::move(Y), needs, {});
  if (needs) {
    t.set_back(id, [xid = x.id, id](Tape<T>& tp) {
      const auto& dY = tp.grad_acc(id);
      const auto& Yv = tp.val(id);
      auto& dX = tp.grad_acc(xid);
      auto dYm = detail::mat_view(dY);
      auto Ym = detail::mat_view(Yv);
      auto dXm = detail::mat_view_mut(dX);
      for (std::int64_t r = 0; r < dY.rows(); ++r) {
        T dot = (dYm.row(r).array() * Ym.row(r).array()).sum();
        dXm.row(r).array() +=
            Ym.row(r).array() * (dYm.row(r).array() - dot);
      }
    });
  }
  return {&t, id};
}

// Per-row zero mean / unit variance (population variance, eps inside sqrt),
// then affine gamma, beta.
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5)) {
  Tape<T>& t = *x.tape;
  const auto& X = t.val(x);
  const auto& G = t.val(gamma);
  const auto& B = t.val(beta);
  if (X.rank() != 2 || G.rank() != 1 || B.rank() != 1 ||
      G.shape[0] != X.cols() || B.shape[0] != X.cols())
    throw ShapeError(detail::msg("layer_norm: x ", X.shape_str(), ", gamma ",
                                 G.shape_str(), ", beta ", B.shape_str()));
  const std::int64_t R = X.rows(), C = X.cols();
  TensorT<T> xhat = TensorT<T>::zeros(X.shape);
  std::vector<T> inv_std(static_cast<std::size_t>(R));
  TensorT<T> Y = TensorT<T>::zeros(X.shape);
  {
    auto Xm = detail::mat_view(X);
    auto Hm = detail::mat_view_mut(xhat);
    auto Ym = detail::mat_view_mut(Y);
    Eigen::Map<const detail::FlatArr<T>> g(G.data.data(), C);
    Eigen::Map<const detail::FlatArr<T>> b(B.data.data(), C);
    for (std::int64_t r = 0; r < R; ++r) {
      auto xr = Xm.row(r).array();
      T mean = xr.mean();
      T var = (xr - mean).square().sum() / static_cast<T>(C);
      T is = T(1) / std::sqrt(var + eps);
      inv_std[static_cast<std::size_t>(r)] = is;
      Hm.row(r).array() = (xr - mean) * is;
      Ym.row(r).array() =
          g.transpose() * Hm.row(r).array() + b.transpose();
    }
  }
  bool needs = t.needs(x.id) || t.needs(gamma.id) || t.needs(beta.id);
  std::int32_t id = t.add_node(std::move(Y), needs, {});
  if (needs) {
    t.set_back(id, [xid = x.id, gid = gamma.id, bid = beta.id, id,
                    xhat = std::move(xhat), inv_std = std::move(inv_std)](
                       Tape<T>& tp) {
      const auto& dY = tp.grad_acc(id);
      const auto& G2 = tp.val(gid);
      const std::int64_t R2 = dY.rows(), C2 = dY.cols();
      auto dYm = detail::mat_view(dY);
      auto Hm = detail::mat_view(xhat);
      if (tp.needs(gid)) {
        auto& dG = tp.grad_acc(gid);
        Eigen::Map<detail::FlatArr<T>> dg(dG.data.data(), C2);
        for (std::int64_t r = 0; r < R2; ++r)
          dg += (dYm.row(r).array() * Hm.row(r).array()).transpose();
      }
      if (tp.needs(bid)) {
        auto& dB = tp.grad_acc(bid);
        Eigen::Map<detail::FlatArr<T>> db(dB.data.data(), C2);
        for (std::int64_t r = 0; r < R2; ++r)
          db += dYm.row(r).array().transpose();
      }
      if (tp.needs(xid)) {
        auto& dX = tp.grad_acc(xid);
        auto dXm = detail::mat_view_mut(dX);
        Eigen::Map<const detail::FlatArr<T>> g(G2.data.data(), C2);
        for (std::int64_t r = 0; r < R2; ++r) {
          auto grow = dYm.row(r).array() * g.transpose();
          T mean_g = grow.mean();
          T mean_gx = (grow * Hm.row(r).array()).mean();
          T is = inv_std[static_cast<std::size_t>(r)];
          dXm.row(r).array() +=
              is * (grow - mean_g - Hm.row(r).array() * mean_gx);
        }
      }
    });
  }
  return {&t, id};
}

namespace detail {

template <typename T>
T gelu_scalar(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * T(0.7071067811865476)));
}

template <typename T>
T gelu_grad_scalar(T x) {
  // d/dx [x * Phi(x)] = Phi(x) + x * phi(x)
  T phi = std::exp(T(-0.5) * x * x) * T(0.3989422804014327);
  return T(0.5) * (T(1) + std::erf(x * T(0.7071067811865476))) + x * phi;
}

}  // namespace detail

// Exact-erf GELU.
template <typename T>
Var<T> gelu(Var<T> x) {
  Tape<T>& t = *x.tape;
  TensorT<T> Y = t.val(x);
  {
    auto a = detail::arr_view_mut(Y);
    a = T(0.5) * a * (T(1) + (a * T(0.7071067811865476)).erf());
  }
  bool needs = t.needs(x.id);
  std::int32_t id = t.add_node(std::move(Y), needs, {});
  if (needs) {
    t.set_back(id, [xid = x.id, id](Tape<T>& tp) {
      const auto& dY = tp.grad_acc(id);
      const auto& X2 = tp.val(xid);
      auto& dX = tp.grad_acc(xid);
      auto xa = detail::arr_view(X2);
      detail::arr_view_mut(dX) +=
          detail::arr_view(dY) *
          (T(0.5) * (T(1) + (xa * T(0.7071067811865476)).erf()) +
           xa * (T(-0.5) * xa * xa).exp() * T(0.3989422804014327));
    });
  }
  return {&t, id};
}

template <typename T>
Var<T> relu(Var<T> x) {
  Tape<T>& t = *x.tape;
  TensorT<T> Y = t.val(x);
  for (auto& v : Y.data) v = std::max(v, T(0));
  bool needs = t.needs(x.id);
  std::int32_t id = t.add_node(std::move(Y), needs, {});
  if (needs) {
    t.set_back(id, [xid = x.id, id](Tape<T>& tp) {
      const auto& dY = tp.grad_acc(id);
      const auto& X2 = tp.val(xid);
      auto& dX = tp.grad_acc(xid);
      for (std::size_t i = 0; i < dX.data.size(); ++i)
        if (X2.data[i] > T(0)) dX.data[i] += dY.data[i];
    });
  }
  return {&t, id};
}

// ---------------------------------------------------------------------------
// Shape surgery
// ---------------------------------------------------------------------------

// Stack a on top of b along the row axis. a may have zero rows.
template <typename T>
Var<T> concat_rows(Var<T> a, Var<T> b) {
  Tape<T>& t = detail::same_tape(a, b);
  const auto& A = t.val(a);
  const auto& B = t.val(b);
  if (A.rank() != 2 || B.rank() != 2 || A.cols() != B.cols())
    throw ShapeError(detail::msg("concat_rows: ", A.shape_str(), " vs ",
                                 B.shape_str()));
  TensorT<T> Y = TensorT<T>::zeros({A.rows() + B.rows(), A.cols()});
  std::copy(A.data.begin(), A.data.end(), Y.data.begin());
  std::copy(B.data.begin(), B.data.end(), Y.data.begin() + A.data.size());
  bool needs = t.needs(a.id) || t.needs(b.id);
  std::int32_t id = t.add_node(std::move(Y), needs, {});
  if (needs) {
    t.set_back(id, [aid = a.id, bid = b.id, id](Tape<T>& tp) {
      const auto& dY = tp.grad_acc(id);
      const std::int64_t ra = tp.val(aid).rows();
      const std::int64_t cols = dY.cols();
      if (tp.needs(aid)) {
        auto& dA = tp.grad_acc(aid);
        for (std::size_t i = 0; i < dA.data.size(); ++i)
          dA.data[i] += dY.data[i];
      }
      if (tp.needs(bid)) {
        auto& dB = tp.grad_acc(bid);
        std::size_t off = static_cast<std::size_t>(ra * cols);
        for (std::size_t i = 0; i < dB.data.size(); ++i)
          dB.data[i] += dY.data[off + i];
      }
    });
  }
  return {&t, id};
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no parts");
  Tape<T>& t = *parts[0].tape;
  std::int64_t rows = t.val(parts[0]).rows();
  std::int64_t total = 0;
  for (const auto& p : parts) {
    const auto& P = t.val(p);
    if (P.rank() != 2 || P.rows() != rows)
      throw ShapeError("concat_cols: row counts disagree");
    total += P.cols();
  }
  TensorT<T> Y = TensorT<T>::zeros({rows, total});
  bool needs = false;
  std::int64_t off = 0;
  for (const auto& p : parts) {
    const auto& P = t.val(p);
    detail::mat_view_mut(Y).block(0, off, rows, P.cols()) = detail::mat_view(P);
    off += P.cols();
    needs = needs || t.needs(p.id);
  }
  std::vector<std::int32_t> ids;
  for (const auto& p : parts) ids.push_back(p.id);
  std::int32_t id = t.add_node(std::move(Y), needs, {});
  if (needs) {
    t.set_back(id, [ids = std::move(ids), id](Tape<T>& tp) {
      const auto& dY = tp.grad_acc(id);
      std::int64_t off2 = 0;
      for (std::int32_t pid : ids) {
        const auto& P = tp.val(pid);
        if (tp.needs(pid))
          detail::mat_view_mut(tp.grad_acc(pid)) +=
              detail::mat_view(dY).block(0, off2, dY.rows(), P.cols());
        off2 += P.cols();
      }
    });
  }
  return {&t, id};
}

// Columns [lo, hi) of x.
template <typename T>
Var<T> slice_cols(Var<T> x, std::int64_t lo, std::int64_t hi) {
  Tape<T>& t = *x.tape;
  const auto& X = t.val(x);
  if (X.rank() != 2 || lo < 0 || hi > X.cols() || lo >= hi)
    throw ShapeError(detail::msg("slice_cols: [", lo, ",", hi, ") of ",
                                 X.shape_str()));
  TensorT<T> Y = TensorT<T>::zeros({X.rows(), hi - lo});
  detail::mat_view_mut(Y) = detail::mat_view(X).block(0, lo, X.rows(), hi - lo);
  bool needs = t.needs(x.id);
  std::int32_t id = t.add_node(std::move(Y), needs, {});
  if (needs) {
    t.set_back(id, [xid = x.id, lo, id](Tape<T>& tp) {
      const auto& dY = tp.grad_acc(id);
      auto& dX = tp.grad_acc(xid);
      detail::mat_view_mut(dX).block(0, lo, dY.rows(), dY.cols()) +=
          detail::mat_view(dY);
    });
  }
  return {&t, id};
}

template <typename T>
Var<T> reshape(Var<T> x, std::vector<std::int64_t> shape) {
  Tape<T>& t = *x.tape;
  const auto& X = t.val(x);
  TensorT<T> Y;
  Y.shape = std::move(shape);
  Y.data = X.data;
  if (Y.numel() != X.numel())
    throw ShapeError(detail::msg("reshape: ", X.shape_str(), " -> ",
                                 Y.shape_str()));
  bool needs = t.needs(x.id);
  std::int32_t id = t.add_node(std::move(Y), needs, {});
  if (needs) {
    t.set_back(id, [xid = x.id, id](Tape<T>& tp) {
      const auto& dY = tp.grad_acc(id);
      auto& dX = tp.grad_acc(xid);
      for (std::size_t i = 0; i < dX.data.size(); ++i)
        dX.data[i] += dY.data[i];
    });
  }
  return {&t, id};
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Var<T> sum_all(Var<T> x) {
  Tape<T>& t = *x.tape;
  const auto& X = t.val(x);
  T s = T(0);
  for (T v : X.data) s += v;
  bool needs = t.needs(x.id);
  std::int32_t id = t.add_node(TensorT<T>::scalar(s), needs, {});
  if (needs) {
    t.set_back(id, [xid = x.id, id](Tape<T>& tp) {
      T g = tp.grad_acc(id).data[0];
      auto& dX = tp.grad_acc(xid);
      for (auto& v : dX.data) v += g;
    });
  }
  return {&t, id};
}

template <typename T>
Var<T> mean_all(Var<T> x) {
  Tape<T>& t = *x.tape;
  const auto& X = t.val(x);
  T s = T(0);
  for (T v : X.data) s += v;
  T n = static_cast<T>(X.numel());
  bool needs = t.needs(x.id);
  std::int32_t id = t.add_node(TensorT<T>::scalar(s / n), needs, {});
  if (needs) {
    t.set_back(id, [xid = x.id, id, n](Tape<T>& tp) {
      T g = tp.grad_acc(id).data[0] / n;
      auto& dX = tp.grad_acc(xid);
      for (auto& v : dX.data) v += g;
    });
  }
  return {&t, id};
}

// ---------------------------------------------------------------------------
// Norm-based ops
// ---------------------------------------------------------------------------

template <typename T>
Var<T> l2_normalize_rows(Var<T> x) {
  Tape<T>& t = *x.tape;
  const auto& X = t.val(x);
  if (X.rank() != 2) throw ShapeError("l2_normalize_rows: rank-2 required");
  const std::int64_t R = X.rows(), C = X.cols();
  TensorT<T> Y = TensorT<T>::zeros(X.shape);
  std::vector<T> inv_norm(static_cast<std::size_t>(R));
  for (std::int64_t r = 0; r < R; ++r) {
    T s = T(0);
    for (std::int64_t c = 0; c < C; ++c) s += X.at(r, c) * X.at(r, c);
    T n = std::sqrt(s);
    if (!(n > T(0)))
      throw InputError("l2_normalize_rows: zero row cannot be normalized");
    T in = T(1) / n;
    inv_norm[static_cast<std::size_t>(r)] = in;
    for (std::int64_t c = 0; c < C; ++c) Y.at(r, c) = X.at(r, c) * in;
  }
  bool needs = t.needs(x.id);
  std::int32_t id = t.add_node(std::move(Y), needs, {});
  if (needs) {
    t.set_back(id, [xid = x.id, id, inv_norm = std::move(inv_norm)](
                       Tape<T>& tp) {
      const auto& dY = tp.grad_acc(id);
      const auto& Yv = tp.val(id);
      auto& dX = tp.grad_acc(xid);
      for (std::int64_t r = 0; r < dY.rows(); ++r) {
        T dot = T(0);
        for (std::int64_t c = 0; c < dY.cols(); ++c)
          dot += dY.at(r, c) * Yv.at(r, c);
        T in = inv_norm[static_cast<std::size_t>(r)];
        for (std::int64_t c = 0; c < dY.cols(); ++c)
          dX.at(r, c) += in * (dY.at(r, c) - Yv.at(r, c) * dot);
      }
    });
  }
  return {&t, id};
}

// Cosine similarity of two vectors (rank-1 or 1 x N), scalar output.
template <typename T>
Var<T> cosine_sim(Var<T> u, Var<T> v) {
  Tape<T>& t = detail::same_tape(u, v);
  const auto& U = t.val(u);
  const auto& V = t.val(v);
  if (U.numel() != V.numel())
    throw ShapeError(detail::msg("cosine_sim: ", U.shape_str(), " vs ",
                                 V.shape_str()));
  T uu = T(0), vv = T(0), uv = T(0);
  for (std::int64_t i = 0; i < U.numel(); ++i) {
    uu += U[i] * U[i];
    vv += V[i] * V[i];
    uv += U[i] * V[i];
  }
  if (!(uu > T(0)) || !(vv > T(0)))
    throw InputError("cosine_sim: zero vector");
  T nu = std::sqrt(uu), nv = std::sqrt(vv);
  T c = uv / (nu * nv);
  bool needs = t.needs(u.id) || t.needs(v.id);
  std::int32_t id = t.add_node(TensorT<T>::scalar(c), needs, {});
  if (needs) {
    t.set_back(id, [uid = u.id, vid = v.id, id, nu, nv, c](Tape<T>& tp) {
      T g = tp.grad_acc(id).data[0];
      const auto& U2 = tp.val(uid);
      const auto& V2 = tp.val(vid);
      if (tp.needs(uid)) {
        auto& dU = tp.grad_acc(uid);
        for (std::int64_t i = 0; i < U2.numel(); ++i)
          dU[i] += g * (V2[i] / (nu * nv) - c * U2[i] / (nu * nu));
      }
      if (tp.needs(vid)) {
        auto& dV = tp.grad_acc(vid);
        for (std::int64_t i = 0; i < V2.numel(); ++i)
          dV[i] += g * (U2[i] / (nu * nv) - c * V2[i] / (nv * nv));
      }
    });
  }
  return {&t, id};
}

// ---------------------------------------------------------------------------
// Fused model-level ops
// ---------------------------------------------------------------------------

// Y = sum_i softmax(logits)_i * layers[i]; all layers share one shape.
template <typename T>
Var<T> layer_weighted_sum(const std::vector<Var<T>>& layers, Var<T> logits) {
  if (layers.empty()) throw ContractError("layer_weighted_sum: no layers");
  Tape<T>& t = *logits.tape;
  const auto& A = t.val(logits);
  if (A.rank() != 1 || A.shape[0] != static_cast<std::int64_t>(layers.size()))
    throw ShapeError(detail::msg("layer_weighted_sum: ", layers.size(),
                                 " layers but logits ", A.shape_str()));
  const std::size_t L = layers.size();
  std::vector<T> w(L);
  T mx = A[0];
  for (std::size_t i = 1; i < L; ++i) mx = std::max(mx, A[static_cast<std::int64_t>(i)]);
  T sum = T(0);
  for (std::size_t i = 0; i < L; ++i) {
    w[i] = std::exp(A[static_cast<std::int64_t>(i)] - mx);
    sum += w[i];
  }
  for (auto& x : w) x /= sum;

  TensorT<T> Y = TensorT<T>::zeros(t.val(layers[0]).shape);
  bool needs = t.needs(logits.id);
  for (std::size_t i = 0; i < L; ++i) {
    const auto& Li = t.val(layers[i]);
    detail::require_same_shape(Y, Li, "layer_weighted_sum");
    for (std::size_t k = 0; k < Y.data.size(); ++k)
      Y.data[k] += w[i] * Li.data[k];
    needs = needs || t.needs(layers[i].id);
  }
  std::vector<std::int32_t> ids;
  for (const auto& l : layers) ids.push_back(l.id);
  std::int32_t id = t.add_node(std::move(Y), needs, {});
  if (needs) {
    t.set_back(id, [ids = std::move(ids), lid = logits.id, id,
                    w = std::move(w)](Tape<T>& tp) {
      const auto& dY = tp.grad_acc(id);
      const std::size_t L2 = ids.size();
      std::vector<T> s(L2, T(0));
      for (std::size_t i = 0; i < L2; ++i) {
        const auto& Li = tp.val(ids[i]);
        T acc = T(0);
        for (std::size_t k = 0; k < dY.data.size(); ++k)
          acc += Li.data[k] * dY.data[k];
        s[i] = acc;
        if (tp.needs(ids[i])) {
          auto& dL = tp.grad_acc(ids[i]);
          for (std::size_t k = 0; k < dL.data.size(); ++k)
            dL.data[k] += w[i] * dY.data[k];
        }
      }
      if (tp.needs(lid)) {
        T wbar = T(0);
        for (std::size_t i = 0; i < L2; ++i) wbar += w[i] * s[i];
        auto& dA = tp.grad_acc(lid);
        for (std::size_t i = 0; i < L2; ++i)
          dA[static_cast<std::int64_t>(i)] += w[i] * (s[i] - wbar);
      }
    });
  }
  return {&t, id};
}

// Additive-angular-margin logits. Off-target logits are s*cos(theta); the
// target logit is s*cos(theta + m) with the hard-margin guard: when
// cos(theta) <= cos(pi - m) the monotone surrogate s*(cos(theta) - m*sin(m))
// is used instead. m == 0 short-circuits to plain scaled cosine logits so the
// margin-off path is bit-identical to cosine softmax.
template <typename T>
Var<T> aam_margin_logits(Var<T> cosines, const std::vector<int>& labels, T m,
                         T s) {
  Tape<T>& t = *cosines.tape;
  const auto& C = t.val(cosines);
  if (C.rank() != 2 || C.rows() != static_cast<std::int64_t>(labels.size()))
    throw ShapeError(detail::msg("aam_margin_logits: cosines ", C.shape_str(),
                                 " vs ", labels.size(), " labels"));
  for (int y : labels)
    if (y < 0 || y >= C.cols())
      throw InputError(detail::msg("aam_margin_logits: label ", y,
                                   " outside [0, ", C.cols(), ")"));
  const T cos_m = std::cos(m), sin_m = std::sin(m);
  const T guard = -cos_m;  // cos(pi - m)
  const T clamp = T(1) - T(1e-7);
  TensorT<T> Y = C;
  for (auto& v : Y.data) v *= s;
  std::vector<char> guarded(labels.size(), 0);
  if (m != T(0)) {
    for (std::size_t i = 0; i < labels.size(); ++i) {
      std::int64_t r = static_cast<std::int64_t>(i);
      T cy = std::min(std::max(C.at(r, labels[i]), -clamp), clamp);
      if (cy <= guard) {
        guarded[i] = 1;
        Y.at(r, labels[i]) = s * (cy - m * sin_m);
      } else {
        T sy = std::sqrt(T(1) - cy * cy);
        Y.at(r, labels[i]) = s * (cy * cos_m - sy * sin_m);
      }
    }
  }
  bool needs = t.needs(cosines.id);
  std::int32_t id = t.add_node(std::move(Y), needs, {});
  if (needs) {
    t.set_back(id, [cid = cosines.id, id, labels, m, s, cos_m, sin_m, clamp,
                    guarded = std::move(guarded)](Tape<T>& tp) {
      const auto& dY = tp.grad_acc(id);
      const auto& C2 = tp.val(cid);
      auto& dC = tp.grad_acc(cid);
      for (std::int64_t r = 0; r < dY.rows(); ++r)
        for (std::int64_t c = 0; c < dY.cols(); ++c)
          dC.at(r, c) += s * dY.at(r, c);
      if (m != T(0)) {
        for (std::size_t i = 0; i < labels.size(); ++i) {
          std::int64_t r = static_cast<std::int64_t>(i);
          int y = labels[i];
          // Remove the plain contribution and substitute the margin branch.
          dC.at(r, y) -= s * dY.at(r, y);
          if (guarded[i]) {
            dC.at(r, y) += s * dY.at(r, y);
          } else {
            T cy = std::min(std::max(C2.at(r, y), -clamp), clamp);
            T sy = std::sqrt(T(1) - cy * cy);
            dC.at(r, y) += s * dY.at(r, y) * (cos_m + cy * sin_m / sy);
          }
        }
      }
    });
  }
  return {&t, id};
}

// Mean cross-entropy over rows of logits against integer labels.
template <typename T>
Var<T> cross_entropy_mean(Var<T> logits, const std::vector<int>& labels) {
  Tape<T>& t = *logits.tape;
  const auto& X = t.val(logits);
  if (X.rank() != 2 || X.rows() != static_cast<std::int64_t>(labels.size()))
    throw ShapeError(detail::msg("cross_entropy_mean: logits ", X.shape_str(),
                                 " vs ", labels.size(), " labels"));
  for (int y : labels)
    if (y < 0 || y >= X.cols())
      throw InputError(detail::msg("cross_entropy_mean: label ", y,
                                   " outside [0, ", X.cols(), ")"));
  const std::int64_t B = X.rows(), K = X.cols();
  TensorT<T> soft = TensorT<T>::zeros(X.shape);
  T loss = T(0);
  for (std::int64_t r = 0; r < B; ++r) {
    T mx = X.at(r, 0);
    for (std::int64_t c = 1; c < K; ++c) mx = std::max(mx, X.at(r, c));
    T sum = T(0);
    for (std::int64_t c = 0; c < K; ++c) {
      T e = std::exp(X.at(r, c) - mx);
      soft.at(r, c) = e;
      sum += e;
    }
    for (std::int64_t c = 0; c < K; ++c) soft.at(r, c) /= sum;
    loss += std::log(sum) + mx - X.at(r, labels[static_cast<std::size_t>(r)]);
  }
  loss /= static_cast<T>(B);
  bool needs = t.needs(logits.id);
  std::int32_t id = t.add_node(TensorT<T>::scalar(loss), needs, {});
  if (needs) {
    t.set_back(id, [lid = logits.id, id, labels, soft = std::move(soft)](
                       Tape<T>& tp) {
      T g = tp.grad_acc(id).data[0];
      auto& dX = tp.grad_acc(lid);
      const std::int64_t B2 = dX.rows(), K2 = dX.cols();
      T inv_b = T(1) / static_cast<T>(B2);
      for (std::int64_t r = 0; r < B2; ++r) {
        for (std::int64_t c = 0; c < K2; ++c)
          dX.at(r, c) += g * inv_b * soft.at(r, c);
        dX.at(r, labels[static_cast<std::size_t>(r)]) -= g * inv_b;
      }
    });
  }
  return {&t, id};
}

// ---------------------------------------------------------------------------
// 1-D convolution (frontend)
// ---------------------------------------------------------------------------

// x is [T_in x C_in]; w is [(kernel*C_in) x C_out] with the kernel axis
// outermost; output frame t covers samples [t*stride, t*stride + kernel),
// zero-padded past the end, so T_out = floor(T_in / stride).
template <typename T>
Var<T> conv1d(Var<T> x, Var<T> w, std::optional<std::type_identity_t<Var<T>>> b, std::int64_t kernel,
              std::int64_t stride) {
  Tape<T>& t = detail::same_tape(x, w);
  const auto& X = t.val(x);
  const auto& W = t.val(w);
  if (X.rank() != 2 || W.rank() != 2 || W.rows() != kernel * X.cols())
    throw ShapeError(detail::msg("conv1d: x ", X.shape_str(), ", w ",
                                 W.shape_str(), ", kernel ", kernel));
  const std::int64_t t_in = X.rows(), c_in = X.cols();
  const std::int64_t t_out = t_in / stride;
  if (t_out < 1)
    throw InputError(detail::msg("conv1d: input of ", t_in,
                                 " frames shorter than stride ", stride));
  TensorT<T> col = TensorT<T>::zeros({t_out, kernel * c_in});
  for (std::int64_t to = 0; to < t_out; ++to) {
    std::int64_t start = to * stride;
    std::int64_t take = std::min(kernel, t_in - start);
    std::copy_n(X.data.begin() + start * c_in, take * c_in,
                col.data.begin() + to * kernel * c_in);
  }
  TensorT<T> Y = detail::mm(col, W);
  bool needs = t.needs(x.id) || t.needs(w.id);
  if (b) {
    const auto& bv = t.val(*b);
    if (bv.rank() != 1 || bv.shape[0] != W.cols())
      throw ShapeError("conv1d: bias width mismatch");
    for (std::int64_t r = 0; r < Y.rows(); ++r)
      for (std::int64_t c = 0; c < Y.cols(); ++c) Y.at(r, c) += bv[c];
    needs = needs || t.needs(b->id);
  }
  std::int32_t bid = b ? b->id : -1;
  std::int32_t id = t.add_node(std::move(Y), needs, {});
  if (needs) {
    t.set_back(id, [xid = x.id, wid = w.id, bid, id, kernel, stride,
                    col = std::move(col)](Tape<T>& tp) {
      const auto& dY = tp.grad_acc(id);
      if (tp.needs(wid)) tp.accum(wid, detail::mm_tn(col, dY));
      if (bid >= 0 && tp.needs(bid)) {
        auto& db = tp.grad_acc(bid);
        for (std::int64_t r = 0; r < dY.rows(); ++r)
          for (std::int64_t c = 0; c < dY.cols(); ++c) db[c] += dY.at(r, c);
      }
      if (tp.needs(xid)) {
        TensorT<T> dcol = detail::mm_nt(dY, tp.val(wid));
        auto& dX = tp.grad_acc(xid);
        const std::int64_t t_in2 = dX.rows(), c_in2 = dX.cols();
        for (std::int64_t to = 0; to < dY.rows(); ++to) {
          std::int64_t start = to * stride;
          std::int64_t take = std::min(kernel, t_in2 - start) * c_in2;
          Eigen::Map<detail::FlatArr<T>>(dX.data.data() + start * c_in2, take) +=
              Eigen::Map<const detail::FlatArr<T>>(
                  dcol.data.data() + to * kernel * c_in2, take);
        }
      }
    });
  }
  return {&t, id};
}

}  // namespace psv
