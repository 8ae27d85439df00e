/* Copyright 2026 The OPMT Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#ifndef OPMT_TENSOR_HPP_
#define OPMT_TENSOR_HPP_

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "opmt/errors.hpp"

namespace opmt {

template <typename T>
concept Scalar = std::same_as<T, float> || std::same_as<T, double>;

enum class DType : std::uint8_t { kFloat32 = 0, kFloat64 = 1 };

template <Scalar T>
constexpr DType dtype_of() {
  return std::same_as<T, float> ? DType::kFloat32 : DType::kFloat64;
}

inline const char* dtype_name(DType d) {
  return d == DType::kFloat32 ? "float32" : "float64";
}

inline std::size_t dtype_size(DType d) { return d == DType::kFloat32 ? 4 : 8; }

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

// Dense row-major array. Always rank >= 1 with positive extents; a
// default-constructed tensor is the single zero scalar of shape [1].
template <Scalar T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : shape_{1}, data_(1, T{0}) {}

  // Zero-filled tensor.
  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_.assign(shape_numel(shape_), T{0});
  }

  // Takes ownership of external data; rejects a length mismatch and any
  // NaN/Inf entry.
  Tensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape(shape_);
    if (data_.size() != shape_numel(shape_)) {
      throw DimensionError("tensor data length " +
                           std::to_string(data_.size()) +
                           " does not match shape " + shape_string(shape_));
    }
    for (std::size_t i = 0; i < data_.size(); ++i) {
      if (!std::isfinite(data_[i])) {
        throw ArgumentError("non-finite value at flat index " +
                            std::to_string(i));
      }
    }
  }

  static Tensor full(Shape shape, T value) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
  }

  static Tensor ones(Shape shape) { return full(std::move(shape), T{1}); }

  static Tensor eye(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.data_[i * n + i] = T{1};
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  static constexpr DType dtype() { return dtype_of<T>(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T* raw() { return data_.data(); }
  const T* raw() const { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  const T& at(std::size_t i, std::size_t j) const {
    return data_[i * shape_[1] + j];
  }

  // Same buffer, new extents; the element count must match.
  Tensor reshaped(Shape shape) const& {
    Tensor out = *this;
    out.reshape_in_place(std::move(shape));
    return out;
  }
  Tensor reshaped(Shape shape) && {
    reshape_in_place(std::move(shape));
    return std::move(*this);
  }

  bool bitwise_equal(const Tensor& other) const {
    return shape_ == other.shape_ &&
           std::memcmp(data_.data(), other.data_.data(),
                       data_.size() * sizeof(T)) == 0;
  }

 private:
  static void check_shape(const Shape& shape) {
    if (shape.empty()) throw ArgumentError("tensor rank must be >= 1");
    for (std::size_t e : shape) {
      if (e == 0) {
        throw ArgumentError("tensor extents must be >= 1, got " +
                            shape_string(shape));
      }
    }
  }

  void reshape_in_place(Shape shape) {
    check_shape(shape);
    if (shape_numel(shape) != data_.size()) {
      throw ShapeError("cannot reshape " + shape_string(shape_) + " to " +
                       shape_string(shape));
    }
    shape_ = std::move(shape);
  }

  Shape shape_;
  std::vector<T> data_;
};

namespace detail {

// Register-blocked kernel shared by the gemm variants:
//   C[r][j] (+)= sum_q A(r, q) * B[q][j],  A(r, q) = a[r * a_rs + q * a_qs].
// Every output accumulates its products in ascending q starting from 0 (or
// the existing C), so results equal the textbook triple loop bit for bit.
template <Scalar T, std::size_t R, std::size_t J>
inline void gemm_tile(std::size_t depth, const T* a, std::size_t a_rs,
                      std::size_t a_qs, const T* panel, std::size_t n, T* c,
                      bool accumulate) {
#if defined(__GNUC__)
  // Explicit vectors keep the whole tile in registers; each lane still does
  // one rounded multiply then one rounded add, like the scalar loop.
  constexpr std::size_t kLanes = 64 / sizeof(T);
  constexpr std::size_t kV = J / kLanes;
  static_assert(J % kLanes == 0);
  typedef T Vec __attribute__((vector_size(64)));
  typedef T Unaligned
      __attribute__((vector_size(64), aligned(alignof(T)), may_alias));
  Vec sum[R][kV];
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t v = 0; v < kV; ++v)
      sum[r][v] = accumulate
                      ? Vec(*reinterpret_cast<const Unaligned*>(c + r * n + v * kLanes))
                      : Vec{};
  for (std::size_t q = 0; q < depth; ++q) {
    Vec bv[kV];
    for (std::size_t v = 0; v < kV; ++v)
      bv[v] = *reinterpret_cast<const Unaligned*>(panel + q * J + v * kLanes);
    for (std::size_t r = 0; r < R; ++r) {
      const T s = a[r * a_rs + q * a_qs];
      for (std::size_t v = 0; v < kV; ++v) sum[r][v] += s * bv[v];
    }
  }
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t v = 0; v < kV; ++v)
      *reinterpret_cast<Unaligned*>(c + r * n + v * kLanes) = sum[r][v];
#else
  T sum[R][J];
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t j = 0; j < J; ++j) sum[r][j] = accumulate ? c[r * n + j] : T{0};
  for (std::size_t q = 0; q < depth; ++q) {
    const T* brow = panel + q * J;
    for (std::size_t r = 0; r < R; ++r) {
      const T s = a[r * a_rs + q * a_qs];
      for (std::size_t j = 0; j < J; ++j) sum[r][j] += s * brow[j];
    }
  }
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t j = 0; j < J; ++j) c[r * n + j] = sum[r][j];
#endif
}

template <Scalar T>
void gemm_strided(std::size_t rows, std::size_t n, std::size_t depth, const T* a,
                  std::size_t a_rs, std::size_t a_qs, const T* b, T* c,
                  bool accumulate) {
  constexpr std::size_t kR = 4;
  constexpr std::size_t kJ = 64 / sizeof(T) * 2;
  const std::size_t n_full = n - n % kJ;
  // a contiguous copy of the current column panel of B, reused by every
  // row block
  thread_local std::vector<T> panel;
  panel.resize(depth * kJ);
  for (std::size_t j = 0; j < n_full; j += kJ) {
    for (std::size_t q = 0; q < depth; ++q)
      std::copy(b + q * n + j, b + q * n + j + kJ, panel.data() + q * kJ);
    std::size_t i = 0;
    for (; i + kR <= rows; i += kR)
      gemm_tile<T, kR, kJ>(depth, a + i * a_rs, a_rs, a_qs, panel.data(), n,
                           c + i * n + j, accumulate);
    for (; i < rows; ++i)
      gemm_tile<T, 1, kJ>(depth, a + i * a_rs, a_rs, a_qs, panel.data(), n,
                          c + i * n + j, accumulate);
  }
  if (n_full == n) return;
  for (std::size_t r = 0; r < rows; ++r) {
    T* crow = c + r * n;
    if (!accumulate) std::fill(crow + n_full, crow + n, T{0});
    for (std::size_t q = 0; q < depth; ++q) {
      const T s = a[r * a_rs + q * a_qs];
      const T* brow = b + q * n;
      for (std::size_t j = n_full; j < n; ++j) crow[j] += s * brow[j];
    }
  }
}

// C[m x n] (+)= A[m x k] * B[k x n].
template <Scalar T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a,
             const T* b, T* c, bool accumulate) {
  gemm_strided(m, n, k, a, k, 1, b, c, accumulate);
}

// C[k x n] (+)= A[m x k]^T * B[m x n], accumulating over m in order.
template <Scalar T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a,
             const T* b, T* c, bool accumulate) {
  gemm_strided(k, n, m, a, 1, k, b, c, accumulate);
}

template <Scalar T>
void transpose_into(std::size_t rows, std::size_t cols, const T* src, T* dst) {
  constexpr std::size_t kBlock = 32;
  for (std::size_t i0 = 0; i0 < rows; i0 += kBlock) {
    const std::size_t i1 = std::min(rows, i0 + kBlock);
    for (std::size_t j0 = 0; j0 < cols; j0 += kBlock) {
      const std::size_t j1 = std::min(cols, j0 + kBlock);
      for (std::size_t i = i0; i < i1; ++i)
        for (std::size_t j = j0; j < j1; ++j) dst[j * rows + i] = src[i * cols + j];
    }
  }
}

template <Scalar T>
void require_rank(const Tensor<T>& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(what) + " expects rank " +
                         std::to_string(rank) + ", got shape " +
                         shape_string(t.shape()));
  }
}

}  // namespace detail

template <Scalar T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul shape mismatch: " + shape_string(a.shape()) +
                         " x " + shape_string(b.shape()));
  }
  Tensor<T> c({a.dim(0), b.dim(1)});
  detail::gemm_nn(a.dim(0), b.dim(1), a.dim(1), a.raw(), b.raw(), c.raw(),
                  true);
  return c;
}

template <Scalar T>
Tensor<T> transpose(const Tensor<T>& a) {
  detail::require_rank(a, 2, "transpose");
  Tensor<T> out({a.dim(1), a.dim(0)});
  detail::transpose_into(a.dim(0), a.dim(1), a.raw(), out.raw());
  return out;
}

template <Scalar T>
Tensor<T> hadamard(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("hadamard shape mismatch: " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  return out;
}

// Materialized axis permutation: out.shape[i] = x.shape[order[i]].
template <Scalar T>
Tensor<T> permute_axes(const Tensor<T>& x, std::span<const std::size_t> order) {
  const std::size_t rank = x.rank();
  if (order.size() != rank) {
    throw ArgumentError("permutation length " + std::to_string(order.size()) +
                        " does not match rank " + std::to_string(rank));
  }
  std::vector<bool> seen(rank, false);
  for (std::size_t axis : order) {
    if (axis >= rank || seen[axis]) {
      throw ArgumentError("invalid axis permutation for rank " +
                          std::to_string(rank));
    }
    seen[axis] = true;
  }
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = x.dim(order[i]);

  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank - 1; i > 0; --i)
    in_strides[i - 1] = in_strides[i] * x.dim(i);
  // stride of each output axis inside the input buffer
  std::vector<std::size_t> step(rank);
  for (std::size_t i = 0; i < rank; ++i) step[i] = in_strides[order[i]];

  Tensor<T> out(out_shape);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t src = 0;
  for (std::size_t flat = 0; flat < out.size(); ++flat) {
    out[flat] = x[src];
    for (std::size_t ax = rank; ax-- > 0;) {
      if (++idx[ax] < out_shape[ax]) {
        src += step[ax];
        break;
      }
      src -= step[ax] * (out_shape[ax] - 1);
      idx[ax] = 0;
    }
  }
  return out;
}

template <Scalar T>
Tensor<T> permute_axes(const Tensor<T>& x,
                       std::initializer_list<std::size_t> order) {
  return permute_axes(x, std::span<const std::size_t>(order.begin(), order.size()));
}

inline std::vector<std::size_t> inverse_permutation(
    std::span<const std::size_t> order) {
  std::vector<std::size_t> inv(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) inv.at(order[i]) = i;
  return inv;
}

// In-place a += scale * b.
template <Scalar T>
void axpy(Tensor<T>& a, T scale, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("axpy shape mismatch: " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += scale * b[i];
}

template <Scalar T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
  return a.bitwise_equal(b);
}

template <Scalar T>
double squared_norm(const Tensor<T>& a) {
  double s = 0.0;
  for (T v : a.data()) s += static_cast<double>(v) * static_cast<double>(v);
  return s;
}

template <Scalar T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("comparison shape mismatch: " +
                         shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

// ||a - b||_F / max(||b||_F, tiny)
template <Scalar T>
double relative_frobenius_error(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("comparison shape mismatch: " +
                         shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
  double num = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    num += d * d;
  }
  const double den = std::max(squared_norm(b), 1e-300);
  return std::sqrt(num / den);
}

template <Scalar To, Scalar From>
Tensor<To> cast(const Tensor<From>& x) {
  if constexpr (std::same_as<To, From>) {
    return x;
  } else {
    Tensor<To> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<To>(x[i]);
    return out;
  }
}

}  // namespace opmt

#endif  // OPMT_TENSOR_HPP_
