#pragma once

#include <Eigen/Core>
#include <unsupported/Eigen/SpecialFunctions>

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "psv/errors.hpp"
#include "psv/rng.hpp"

namespace psv {

// All tensor storage is 64-byte aligned. SIMD reductions (Eigen's row sums,
// max-coefficients, dot products) pick their loop split from the runtime
// pointer alignment; pinning the alignment makes every reduction order a pure
// function of shape, which is what keeps results bit-identical across runs
// and across heap states.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::size_t kAlign = 64;

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T),
                                          std::align_val_t(kAlign)));
  }
  void deallocate(T* p, std::size_t n) {
    ::operator delete(p, n * sizeof(T), std::align_val_t(kAlign));
  }
  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
  template <typename U>
  bool operator!=(const AlignedAllocator<U>&) const { return false; }
};

template <typename T>
using AlignedVec = std::vector<T, AlignedAllocator<T>>;

// Dense row-major tensor. Training runs in float; a double instantiation is
// used as the shadow mode for gradient checking. Rank is 1 or 2 everywhere in
// this codebase; zero-length axes are allowed so an empty prefix (l = 0)
// flows through concatenation unchanged.
template <typename T>
struct TensorT {
  std::vector<std::int64_t> shape;
  AlignedVec<T> data;

  TensorT() = default;
  TensorT(std::vector<std::int64_t> s, AlignedVec<T> d)
      : shape(std::move(s)), data(std::move(d)) {
    if (numel() != static_cast<std::int64_t>(data.size()))
      throw ShapeError(detail::msg("tensor data length ", data.size(),
                                   " does not match shape ", shape_str()));
  }
  TensorT(std::vector<std::int64_t> s, const std::vector<T>& d)
      : shape(std::move(s)), data(d.begin(), d.end()) {
    if (numel() != static_cast<std::int64_t>(data.size()))
      throw ShapeError(detail::msg("tensor data length ", data.size(),
                                   " does not match shape ", shape_str()));
  }

  static TensorT zeros(std::vector<std::int64_t> s) {
    TensorT t;
    t.shape = std::move(s);
    t.data.assign(static_cast<std::size_t>(t.numel()), T(0));
    return t;
  }

  static TensorT full(std::vector<std::int64_t> s, T v) {
    TensorT t = zeros(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }

  static TensorT scalar(T v) {
    TensorT t;
    t.shape = {1};
    t.data.push_back(v);
    return t;
  }

  static TensorT vec(std::initializer_list<T> v) {
    TensorT t;
    t.shape = {static_cast<std::int64_t>(v.size())};
    t.data.assign(v.begin(), v.end());
    return t;
  }

  static TensorT from_rows(std::initializer_list<std::initializer_list<T>> rows) {
    TensorT t;
    auto r = static_cast<std::int64_t>(rows.size());
    auto c = static_cast<std::int64_t>(rows.begin()->size());
    t.shape = {r, c};
    t.data.reserve(static_cast<std::size_t>(r * c));
    for (const auto& row : rows) {
      if (static_cast<std::int64_t>(row.size()) != c)
        throw ShapeError("ragged rows in tensor literal");
      t.data.insert(t.data.end(), row.begin(), row.end());
    }
    return t;
  }

  static TensorT randn(std::vector<std::int64_t> s, Rng& rng, double stddev = 1.0) {
    TensorT t = zeros(std::move(s));
    for (auto& v : t.data) v = static_cast<T>(rng.normal(0.0, stddev));
    return t;
  }

  std::int64_t numel() const {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }

  int rank() const { return static_cast<int>(shape.size()); }

  std::int64_t rows() const { return rank() == 2 ? shape[0] : 1; }
  std::int64_t cols() const { return rank() == 2 ? shape[1] : shape[0]; }

  T& at(std::int64_t r, std::int64_t c) {
    return data[static_cast<std::size_t>(r * cols() + c)];
  }
  T at(std::int64_t r, std::int64_t c) const {
    return data[static_cast<std::size_t>(r * cols() + c)];
  }
  T& operator[](std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
  T operator[](std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }

  bool same_shape(const TensorT& o) const { return shape == o.shape; }

  std::string shape_str() const {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
      if (i) s += "x";
      s += std::to_string(shape[i]);
    }
    return s + "]";
  }

  bool all_finite() const {
    return Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>(
               data.data(), static_cast<Eigen::Index>(data.size()))
        .allFinite();
  }

  template <typename U>
  TensorT<U> cast() const {
    TensorT<U> out;
    out.shape = shape;
    out.data.reserve(data.size());
    for (T v : data) out.data.push_back(static_cast<U>(v));
    return out;
  }
};

using Tensor = TensorT<float>;

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
Eigen::Map<const RowMat<T>> mat_view(const TensorT<T>& t) {
  return {t.data.data(), t.rows(), t.cols()};
}

template <typename T>
Eigen::Map<RowMat<T>> mat_view_mut(TensorT<T>& t) {
  return {t.data.data(), t.rows(), t.cols()};
}

template <typename T>
using FlatArr = Eigen::Array<T, Eigen::Dynamic, 1>;

template <typename T>
Eigen::Map<const FlatArr<T>> arr_view(const TensorT<T>& t) {
  return {t.data.data(), static_cast<Eigen::Index>(t.data.size())};
}

template <typename T>
Eigen::Map<FlatArr<T>> arr_view_mut(TensorT<T>& t) {
  return {t.data.data(), static_cast<Eigen::Index>(t.data.size())};
}

// y = a * b. Eigen keeps blocking and reduction order fixed for a given
// platform and build, so results are stable run to run.
template <typename T>
TensorT<T> mm(const TensorT<T>& a, const TensorT<T>& b) {
  TensorT<T> y = TensorT<T>::zeros({a.rows(), b.cols()});
  mat_view_mut(y).noalias() = mat_view(a) * mat_view(b);
  return y;
}

template <typename T>
TensorT<T> mm_nt(const TensorT<T>& a, const TensorT<T>& b) {  // a * b^T
  TensorT<T> y = TensorT<T>::zeros({a.rows(), b.rows()});
  mat_view_mut(y).noalias() = mat_view(a) * mat_view(b).transpose();
  return y;
}

template <typename T>
TensorT<T> mm_tn(const TensorT<T>& a, const TensorT<T>& b) {  // a^T * b
  TensorT<T> y = TensorT<T>::zeros({a.cols(), b.cols()});
  mat_view_mut(y).noalias() = mat_view(a).transpose() * mat_view(b);
  return y;
}

template <typename T>
void add_into(TensorT<T>& dst, const TensorT<T>& src) {
  for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += src.data[i];
}

template <typename T>
void require_same_shape(const TensorT<T>& a, const TensorT<T>& b,
                        const char* op) {
  if (!a.same_shape(b))
    throw ShapeError(msg(op, ": shape mismatch ", a.shape_str(), " vs ",
                         b.shape_str()));
}

}  // namespace detail

}  // namespace psv
