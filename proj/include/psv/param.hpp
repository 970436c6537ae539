#pragma once

#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "psv/errors.hpp"
#include "psv/tape.hpp"
#include "psv/tensor.hpp"

namespace psv {

// Named parameter tensor. The trainable flag is the single source of truth
// for the optimizer; frozen groups never receive gradients or updates.
template <typename T>
struct ParamGroupT {
  std::string name;  // hierarchical path, e.g. "backbone.block3.attn.W_Q"
  TensorT<T> tensor;
  bool trainable = true;
};

using ParamGroup = ParamGroupT<float>;

template <typename T>
class ParamStoreT {
 public:
  ParamGroupT<T>& add(std::string name, TensorT<T> tensor,
                      bool trainable = true) {
    if (index_.count(name))
      throw ContractError(detail::msg("duplicate parameter group: ", name));
    groups_.push_back(std::make_unique<ParamGroupT<T>>(
        ParamGroupT<T>{std::move(name), std::move(tensor), trainable}));
    index_.emplace(groups_.back()->name, groups_.size() - 1);
    return *groups_.back();
  }

  bool has(std::string_view name) const {
    return index_.count(std::string(name)) > 0;
  }

  ParamGroupT<T>* find(std::string_view name) {
    auto it = index_.find(std::string(name));
    return it == index_.end() ? nullptr : groups_[it->second].get();
  }
  const ParamGroupT<T>* find(std::string_view name) const {
    auto it = index_.find(std::string(name));
    return it == index_.end() ? nullptr : groups_[it->second].get();
  }

  ParamGroupT<T>& at(std::string_view name) {
    if (auto* g = find(name)) return *g;
    throw ContractError(detail::msg("unknown parameter group: ", name));
  }
  const ParamGroupT<T>& at(std::string_view name) const {
    if (auto* g = find(name)) return *g;
    throw ContractError(detail::msg("unknown parameter group: ", name));
  }

  std::size_t size() const { return groups_.size(); }
  ParamGroupT<T>& operator[](std::size_t i) { return *groups_[i]; }
  const ParamGroupT<T>& operator[](std::size_t i) const { return *groups_[i]; }

  std::vector<ParamGroupT<T>*> trainable_groups() {
    std::vector<ParamGroupT<T>*> out;
    for (auto& g : groups_)
      if (g->trainable) out.push_back(g.get());
    return out;
  }

  std::int64_t total_params() const {
    std::int64_t n = 0;
    for (const auto& g : groups_) n += g->tensor.numel();
    return n;
  }

 private:
  // Groups are held by unique_ptr so leaf_view pointers into tensors stay
  // stable across add() calls.
  std::vector<std::unique_ptr<ParamGroupT<T>>> groups_;
  std::unordered_map<std::string, std::size_t> index_;
};

using ParamStore = ParamStoreT<float>;

// Per-forward bridge between a parameter store and a tape. use() creates at
// most one leaf per group, so a parameter used twice in a graph accumulates
// its gradient in one place.
template <typename T>
class ForwardCtx {
 public:
  ForwardCtx(Tape<T>& tape, bool train = true) : tape_(tape), train_(train) {}

  Tape<T>& tape() { return tape_; }
  bool training() const { return train_; }

  Var<T> use(const ParamGroupT<T>& g) {
    auto it = vars_.find(&g);
    if (it != vars_.end()) return it->second;
    Var<T> v = tape_.leaf_view(&g.tensor, train_ && g.trainable);
    vars_.emplace(&g, v);
    used_.push_back(&g);
    return v;
  }

  // Gradients for every trainable group in the store, keyed by name. Groups
  // the forward pass did not touch report zeros; frozen groups get no entry.
  std::map<std::string, TensorT<T>> grads_by_name(
      const ParamStoreT<T>& store) const {
    std::map<std::string, TensorT<T>> out;
    for (std::size_t i = 0; i < store.size(); ++i) {
      const auto& g = store[i];
      if (!g.trainable) continue;
      auto it = vars_.find(&g);
      if (it != vars_.end() && tape_.has_grad(it->second.id))
        out.emplace(g.name, tape_.grad(it->second));
      else
        out.emplace(g.name, TensorT<T>::zeros(g.tensor.shape));
    }
    return out;
  }

  const std::vector<const ParamGroupT<T>*>& used() const { return used_; }

  const TensorT<T>* grad_of(const ParamGroupT<T>& g) const {
    auto it = vars_.find(&g);
    if (it == vars_.end() || !tape_.has_grad(it->second.id)) return nullptr;
    return &tape_.grad(it->second);
  }

 private:
  Tape<T>& tape_;
  bool train_;
  std::unordered_map<const ParamGroupT<T>*, Var<T>> vars_;
  std::vector<const ParamGroupT<T>*> used_;
};

// Scalar-loss backward over a recorded forward pass: gradients for every
// trainable group, frozen groups absent.
template <typename T>
std::map<std::string, TensorT<T>> backward(Var<T> loss, ForwardCtx<T>& ctx,
                                           const ParamStoreT<T>& store) {
  ctx.tape().backward(loss);
  return ctx.grads_by_name(store);
}

}  // namespace psv
