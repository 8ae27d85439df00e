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

#ifndef OPMT_LAYERS_HPP_
#define OPMT_LAYERS_HPP_

#include <optional>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "opmt/conv.hpp"
#include "opmt/factorized.hpp"
#include "opmt/tensor.hpp"

namespace opmt {

// y = x W + b, W is (in x out).
template <Scalar T>
struct Linear {
  Tensor<T> weight;
  std::optional<Tensor<T>> bias;
};

template <Scalar T>
struct Conv2d {
  Tensor<T> weight;  // c_o x c_i x k x k
  std::optional<Tensor<T>> bias;
  std::size_t stride = 1;
  std::size_t padding = 0;
};

struct Relu {};

// Non-overlapping max pooling; spatial extents must divide evenly.
struct MaxPool2d {
  std::size_t size = 2;
};

// Nearest-neighbour upsampling by an integer factor.
struct Upsample2d {
  std::size_t factor = 2;
};

template <Scalar T>
using Layer = std::variant<Linear<T>, Conv2d<T>, FactorizedLinear<T>,
                           FactorizedConv2d<T>, Relu, MaxPool2d, Upsample2d>;

enum class ParamKind { kWeight, kBias, kFactorU, kFactorV, kTaskDiag };

template <typename L>
inline constexpr bool kIsFactorized = false;
template <Scalar T>
inline constexpr bool kIsFactorized<FactorizedLinear<T>> = true;
template <Scalar T>
inline constexpr bool kIsFactorized<FactorizedConv2d<T>> = true;

template <Scalar T>
bool is_factorized(const Layer<T>& layer) {
  return std::holds_alternative<FactorizedLinear<T>>(layer) ||
         std::holds_alternative<FactorizedConv2d<T>>(layer);
}

template <Scalar T>
const char* layer_kind(const Layer<T>& layer) {
  return std::visit(
      [](const auto& l) -> const char* {
        using L = std::remove_cvref_t<decltype(l)>;
        if constexpr (std::is_same_v<L, Linear<T>>) return "linear";
        else if constexpr (std::is_same_v<L, Conv2d<T>>) return "conv";
        else if constexpr (std::is_same_v<L, FactorizedLinear<T>>) return "fac_linear";
        else if constexpr (std::is_same_v<L, FactorizedConv2d<T>>) return "fac_conv";
        else if constexpr (std::is_same_v<L, Relu>) return "relu";
        else if constexpr (std::is_same_v<L, MaxPool2d>) return "maxpool";
        else return "upsample";
      },
      layer);
}

// Calls f(field_name, tensor, kind, diag_task) for every trainable tensor of
// the layer in a fixed order: weight/u, v, diag.0..diag.{t-1}, bias.
// Works on const and mutable variants alike.
template <typename LayerVariant, typename F>
void visit_layer_params(LayerVariant& layer, F&& f) {
  std::visit(
      [&](auto& l) {
        using L = std::remove_cvref_t<decltype(l)>;
        if constexpr (requires { l.weight; }) {
          f(std::string("weight"), l.weight, ParamKind::kWeight, std::size_t{0});
          if (l.bias) f(std::string("bias"), *l.bias, ParamKind::kBias, std::size_t{0});
        } else if constexpr (kIsFactorized<L>) {
          f(std::string("u"), l.u, ParamKind::kFactorU, std::size_t{0});
          f(std::string("v"), l.v, ParamKind::kFactorV, std::size_t{0});
          for (std::size_t j = 0; j < l.task_diags.size(); ++j)
            f("diag." + std::to_string(j), l.task_diags[j], ParamKind::kTaskDiag, j);
          if (l.bias) f(std::string("bias"), *l.bias, ParamKind::kBias, std::size_t{0});
        }
      },
      layer);
}

template <Scalar T>
std::size_t layer_param_count(const Layer<T>& layer) {
  std::size_t n = 0;
  visit_layer_params(layer, [&](const std::string&, const Tensor<T>&, ParamKind,
                                std::size_t) { ++n; });
  return n;
}

namespace detail {

template <Scalar T>
void require_image(const Tensor<T>& x, const char* what) {
  if (x.rank() != 4) {
    throw DimensionError(std::string(what) + " expects [b, c, h, w], got " +
                         shape_string(x.shape()));
  }
}

}  // namespace detail

template <Scalar T>
Tensor<T> maxpool_forward(const Tensor<T>& x, std::size_t size) {
  detail::require_image(x, "maxpool");
  const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (size == 0 || h % size != 0 || w % size != 0) {
    throw ShapeError("maxpool size " + std::to_string(size) +
                     " does not divide " + shape_string(x.shape()));
  }
  const std::size_t oh = h / size, ow = w / size;
  Tensor<T> y({b, c, oh, ow});
  for (std::size_t p = 0; p < b * c; ++p) {
    const T* src = x.raw() + p * h * w;
    T* dst = y.raw() + p * oh * ow;
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        T best = src[(oy * size) * w + ox * size];
        for (std::size_t dy = 0; dy < size; ++dy)
          for (std::size_t dx = 0; dx < size; ++dx)
            best = std::max(best, src[(oy * size + dy) * w + ox * size + dx]);
        dst[oy * ow + ox] = best;
      }
  }
  return y;
}

// Routes each pooled gradient to the first maximal input in scan order.
template <Scalar T>
Tensor<T> maxpool_backward(const Tensor<T>& x, const Tensor<T>& dy,
                           std::size_t size) {
  const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = h / size, ow = w / size;
  if (dy.shape() != Shape{b, c, oh, ow}) {
    throw DimensionError("maxpool upstream gradient " + shape_string(dy.shape()) +
                         " does not match pooled output");
  }
  Tensor<T> dx(x.shape());
  for (std::size_t p = 0; p < b * c; ++p) {
    const T* src = x.raw() + p * h * w;
    T* dst = dx.raw() + p * h * w;
    const T* g = dy.raw() + p * oh * ow;
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t arg = (oy * size) * w + ox * size;
        for (std::size_t dyy = 0; dyy < size; ++dyy)
          for (std::size_t dxx = 0; dxx < size; ++dxx) {
            const std::size_t idx = (oy * size + dyy) * w + ox * size + dxx;
            if (src[idx] > src[arg]) arg = idx;
          }
        dst[arg] += g[oy * ow + ox];
      }
  }
  return dx;
}

template <Scalar T>
Tensor<T> upsample_forward(const Tensor<T>& x, std::size_t factor) {
  detail::require_image(x, "upsample");
  const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = h * factor, ow = w * factor;
  Tensor<T> y({b, c, oh, ow});
  for (std::size_t p = 0; p < b * c; ++p) {
    const T* src = x.raw() + p * h * w;
    T* dst = y.raw() + p * oh * ow;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      const T* row = src + (oy / factor) * w;
      for (std::size_t ox = 0; ox < ow; ++ox) dst[oy * ow + ox] = row[ox / factor];
    }
  }
  return y;
}

template <Scalar T>
Tensor<T> upsample_backward(const Tensor<T>& x, const Tensor<T>& dy,
                            std::size_t factor) {
  const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = h * factor, ow = w * factor;
  if (dy.shape() != Shape{b, c, oh, ow}) {
    throw DimensionError("upsample upstream gradient " + shape_string(dy.shape()) +
                         " does not match output");
  }
  Tensor<T> dx(x.shape());
  for (std::size_t p = 0; p < b * c; ++p) {
    const T* g = dy.raw() + p * oh * ow;
    T* dst = dx.raw() + p * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox)
        dst[(oy / factor) * w + ox / factor] += g[oy * ow + ox];
  }
  return dx;
}

template <Scalar T>
Tensor<T> layer_forward(const Layer<T>& layer, const Tensor<T>& x,
                        ForwardMode mode) {
  return std::visit(
      [&](const auto& l) -> Tensor<T> {
        using L = std::remove_cvref_t<decltype(l)>;
        if constexpr (std::is_same_v<L, Linear<T>>) {
          return linear_forward(x, l.weight, l.bias);
        } else if constexpr (std::is_same_v<L, Conv2d<T>>) {
          return conv2d(x, l.weight, ConvGeometry::square(l.stride, l.padding),
                        l.bias);
        } else if constexpr (kIsFactorized<L>) {
          return forward(l, x, mode);
        } else if constexpr (std::is_same_v<L, Relu>) {
          Tensor<T> y = x;
          for (T& v : y.data()) v = v < T{0} ? T{0} : v;  // NaN passes through
          return y;
        } else if constexpr (std::is_same_v<L, MaxPool2d>) {
          return maxpool_forward(x, l.size);
        } else {
          return upsample_forward(x, l.factor);
        }
      },
      layer);
}

template <Scalar T>
struct LayerBackward {
  std::optional<Tensor<T>> dx;
  std::vector<Tensor<T>> param_grads;  // visit_layer_params order
};

template <Scalar T>
LayerBackward<T> layer_backward(const Layer<T>& layer, const Tensor<T>& x,
                                const Tensor<T>& dy, bool need_dx) {
  return std::visit(
      [&](const auto& l) -> LayerBackward<T> {
        using L = std::remove_cvref_t<decltype(l)>;
        LayerBackward<T> out;
        if constexpr (std::is_same_v<L, Linear<T>>) {
          LinearGrads<T> g = linear_backward(x, l.weight, dy, need_dx);
          out.dx = std::move(g.dx);
          out.param_grads.push_back(std::move(g.dw));
          if (l.bias) out.param_grads.push_back(std::move(g.dbias));
        } else if constexpr (std::is_same_v<L, Conv2d<T>>) {
          ConvGrads<T> g = conv2d_backward(
              x, l.weight, dy, ConvGeometry::square(l.stride, l.padding), need_dx);
          out.dx = std::move(g.dx);
          out.param_grads.push_back(std::move(g.dw));
          if (l.bias) out.param_grads.push_back(std::move(g.dbias));
        } else if constexpr (kIsFactorized<L>) {
          FactorizedGrads<T> g = backward(l, x, dy, need_dx);
          out.dx = std::move(g.dx);
          out.param_grads.push_back(std::move(g.du));
          out.param_grads.push_back(std::move(g.dv));
          for (auto& d : g.d_task_diags) out.param_grads.push_back(std::move(d));
          if (l.bias) out.param_grads.push_back(std::move(*g.dbias));
        } else if constexpr (std::is_same_v<L, Relu>) {
          if (need_dx) {
            Tensor<T> dx = dy;
            for (std::size_t i = 0; i < dx.size(); ++i)
              if (!(x[i] > T{0})) dx[i] = T{0};
            out.dx = std::move(dx);
          }
        } else if constexpr (std::is_same_v<L, MaxPool2d>) {
          if (need_dx) out.dx = maxpool_backward(x, dy, l.size);
        } else {
          if (need_dx) out.dx = upsample_backward(x, dy, l.factor);
        }
        return out;
      },
      layer);
}

// Per-sample output shape (no batch axis) for a per-sample input shape.
template <Scalar T>
Shape layer_output_shape(const Layer<T>& layer, const Shape& in) {
  return std::visit(
      [&](const auto& l) -> Shape {
        using L = std::remove_cvref_t<decltype(l)>;
        auto need_rank = [&](std::size_t r) {
          if (in.size() != r) {
            throw DimensionError(std::string(layer_kind<T>(layer)) +
                                 " cannot take input shape " + shape_string(in));
          }
        };
        if constexpr (std::is_same_v<L, Linear<T>>) {
          need_rank(1);
          if (in[0] != l.weight.dim(0))
            throw DimensionError("linear expects " + std::to_string(l.weight.dim(0)) +
                                 " features, got " + shape_string(in));
          return {l.weight.dim(1)};
        } else if constexpr (std::is_same_v<L, FactorizedLinear<T>>) {
          need_rank(1);
          if (in[0] != l.in_features())
            throw DimensionError("linear expects " + std::to_string(l.in_features()) +
                                 " features, got " + shape_string(in));
          return {l.out_features()};
        } else if constexpr (std::is_same_v<L, Conv2d<T>> ||
                             std::is_same_v<L, FactorizedConv2d<T>>) {
          need_rank(3);
          std::size_t co, ci, k;
          if constexpr (std::is_same_v<L, Conv2d<T>>) {
            co = l.weight.dim(0); ci = l.weight.dim(1); k = l.weight.dim(2);
          } else {
            co = l.out_channels(); ci = l.in_channels(); k = l.kernel();
          }
          if (in[0] != ci)
            throw DimensionError("conv expects " + std::to_string(ci) +
                                 " channels, got " + shape_string(in));
          return {co, detail::conv_out_extent(in[1], k, l.stride, l.padding, "height"),
                  detail::conv_out_extent(in[2], k, l.stride, l.padding, "width")};
        } else if constexpr (std::is_same_v<L, Relu>) {
          return in;
        } else if constexpr (std::is_same_v<L, MaxPool2d>) {
          need_rank(3);
          if (l.size == 0 || in[1] % l.size || in[2] % l.size)
            throw ShapeError("maxpool size does not divide " + shape_string(in));
          return {in[0], in[1] / l.size, in[2] / l.size};
        } else {
          need_rank(3);
          return {in[0], in[1] * l.factor, in[2] * l.factor};
        }
      },
      layer);
}

}  // namespace opmt

#endif  // OPMT_LAYERS_HPP_
