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

#ifndef OPMT_LOSS_HPP_
#define OPMT_LOSS_HPP_

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

#include "opmt/tensor.hpp"

namespace opmt {

// Numeric codes are part of the archive format.
enum class LossKind : std::uint8_t {
  kSoftmaxCrossEntropy = 0,  // logits [b, C, ...] vs class map [b, ...]
  kL1 = 1,                   // mean |pred - target|
  kCosine = 2,               // mean (1 - cos) over the channel axis
  kMse = 3,                  // mean (pred - target)^2
};

inline const char* loss_kind_name(LossKind k) {
  switch (k) {
    case LossKind::kSoftmaxCrossEntropy: return "softmax-cross-entropy";
    case LossKind::kL1: return "l1";
    case LossKind::kCosine: return "cosine";
    case LossKind::kMse: return "mse";
  }
  return "?";
}

inline LossKind loss_kind_from_code(std::uint64_t code) {
  if (code > 3) throw ArgumentError("unknown loss kind code " + std::to_string(code));
  return static_cast<LossKind>(code);
}

template <Scalar T>
struct LossValue {
  double value = 0.0;
  Tensor<T> grad;  // d value / d pred
};

namespace detail {

// [b, C, rest...] -> (b, C, positions per sample)
template <Scalar T>
void channel_layout(const Tensor<T>& pred, std::size_t& batch,
                    std::size_t& channels, std::size_t& positions) {
  if (pred.rank() < 2) {
    throw DimensionError("loss expects [b, C, ...] predictions, got " +
                         shape_string(pred.shape()));
  }
  batch = pred.dim(0);
  channels = pred.dim(1);
  positions = pred.size() / (batch * channels);
}

}  // namespace detail

template <Scalar T>
LossValue<T> softmax_cross_entropy(const Tensor<T>& logits,
                                   const Tensor<T>& labels) {
  std::size_t b, c, pos;
  detail::channel_layout(logits, b, c, pos);
  if (labels.size() != b * pos || labels.dim(0) != b) {
    throw DimensionError("label map " + shape_string(labels.shape()) +
                         " does not match logits " + shape_string(logits.shape()));
  }
  LossValue<T> out{0.0, Tensor<T>(logits.shape())};
  const double inv = 1.0 / static_cast<double>(b * pos);
  std::vector<double> prob(c);
  for (std::size_t s = 0; s < b; ++s) {
    const T* z = logits.raw() + s * c * pos;
    T* g = out.grad.raw() + s * c * pos;
    for (std::size_t p = 0; p < pos; ++p) {
      const double label = labels[s * pos + p];
      if (label < 0 || label >= static_cast<double>(c) || label != std::floor(label)) {
        throw ArgumentError("class label " + std::to_string(label) +
                            " out of range for " + std::to_string(c) + " classes");
      }
      const std::size_t y = static_cast<std::size_t>(label);
      double mx = z[p];
      for (std::size_t k = 1; k < c; ++k) mx = std::max(mx, static_cast<double>(z[k * pos + p]));
      double sum = 0.0;
      for (std::size_t k = 0; k < c; ++k) {
        prob[k] = std::exp(static_cast<double>(z[k * pos + p]) - mx);
        sum += prob[k];
      }
      out.value += (std::log(sum) + mx - static_cast<double>(z[y * pos + p])) * inv;
      for (std::size_t k = 0; k < c; ++k) {
        const double pk = prob[k] / sum - (k == y ? 1.0 : 0.0);
        g[k * pos + p] = static_cast<T>(pk * inv);
      }
    }
  }
  return out;
}

template <Scalar T>
LossValue<T> l1_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.shape() != target.shape()) {
    throw DimensionError("l1 loss shape mismatch: " + shape_string(pred.shape()) +
                         " vs " + shape_string(target.shape()));
  }
  LossValue<T> out{0.0, Tensor<T>(pred.shape())};
  const double inv = 1.0 / static_cast<double>(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(pred[i]) - target[i];
    out.value += std::abs(d) * inv;
    out.grad[i] = static_cast<T>(d > 0 ? inv : (d < 0 ? -inv : 0.0));
  }
  return out;
}

template <Scalar T>
LossValue<T> mse_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.shape() != target.shape()) {
    throw DimensionError("mse loss shape mismatch: " + shape_string(pred.shape()) +
                         " vs " + shape_string(target.shape()));
  }
  LossValue<T> out{0.0, Tensor<T>(pred.shape())};
  const double inv = 1.0 / static_cast<double>(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(pred[i]) - target[i];
    out.value += d * d * inv;
    out.grad[i] = static_cast<T>(2.0 * d * inv);
  }
  return out;
}

// 1 - <p, g> / (|p| |g|) per position, norms softened by eps so a zero
// prediction still has a gradient.
template <Scalar T>
LossValue<T> cosine_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.shape() != target.shape()) {
    throw DimensionError("cosine loss shape mismatch: " +
                         shape_string(pred.shape()) + " vs " +
                         shape_string(target.shape()));
  }
  constexpr double kEps = 1e-12;
  std::size_t b, c, pos;
  detail::channel_layout(pred, b, c, pos);
  LossValue<T> out{0.0, Tensor<T>(pred.shape())};
  const double inv = 1.0 / static_cast<double>(b * pos);
  for (std::size_t s = 0; s < b; ++s) {
    const T* p = pred.raw() + s * c * pos;
    const T* g = target.raw() + s * c * pos;
    T* d = out.grad.raw() + s * c * pos;
    for (std::size_t q = 0; q < pos; ++q) {
      double pp = 0, gg = 0, pg = 0;
      for (std::size_t k = 0; k < c; ++k) {
        const double pk = p[k * pos + q], gk = g[k * pos + q];
        pp += pk * pk;
        gg += gk * gk;
        pg += pk * gk;
      }
      const double np = std::sqrt(pp + kEps), ng = std::sqrt(gg + kEps);
      out.value += (1.0 - pg / (np * ng)) * inv;
      for (std::size_t k = 0; k < c; ++k) {
        const double pk = p[k * pos + q], gk = g[k * pos + q];
        const double dcos = gk / (np * ng) - pg * pk / (np * np * np * ng);
        d[k * pos + q] = static_cast<T>(-dcos * inv);
      }
    }
  }
  return out;
}

template <Scalar T>
LossValue<T> compute_loss(LossKind kind, const Tensor<T>& pred,
                          const Tensor<T>& target) {
  switch (kind) {
    case LossKind::kSoftmaxCrossEntropy: return softmax_cross_entropy(pred, target);
    case LossKind::kL1: return l1_loss(pred, target);
    case LossKind::kCosine: return cosine_loss(pred, target);
    case LossKind::kMse: return mse_loss(pred, target);
  }
  throw ArgumentError("unknown loss kind");
}

}  // namespace opmt

#endif  // OPMT_LOSS_HPP_
