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

#ifndef OPMT_CONV_HPP_
#define OPMT_CONV_HPP_

#include <cstddef>
#include <optional>
#include <utility>
#include <vector>

#include "opmt/tensor.hpp"

namespace opmt {

// Stride and zero padding per spatial axis. Kernels may be rectangular.
struct ConvGeometry {
  std::size_t stride_h = 1;
  std::size_t stride_w = 1;
  std::size_t pad_h = 0;
  std::size_t pad_w = 0;

  static ConvGeometry square(std::size_t stride, std::size_t padding) {
    return {stride, stride, padding, padding};
  }
};

namespace detail {

inline std::size_t conv_out_extent(std::size_t in, std::size_t kernel,
                                   std::size_t stride, std::size_t pad,
                                   const char* axis) {
  if (stride == 0) throw ArgumentError("conv2d stride must be >= 1");
  const std::size_t padded = in + 2 * pad;
  if (padded < kernel || (padded - kernel) % stride != 0) {
    throw ShapeError(std::string("conv2d output ") + axis +
                     " extent is not integral: (" + std::to_string(in) +
                     " + 2*" + std::to_string(pad) + " - " +
                     std::to_string(kernel) + ") / " + std::to_string(stride) +
                     " + 1");
  }
  return (padded - kernel) / stride + 1;
}

struct ConvDims {
  std::size_t batch, c_in, h, w, c_out, kh, kw, oh, ow;
  std::size_t patch() const { return c_in * kh * kw; }
  std::size_t pixels() const { return oh * ow; }
};

template <Scalar T>
ConvDims conv_dims(const Tensor<T>& x, const Tensor<T>& w,
                   const ConvGeometry& g) {
  if (x.rank() != 4 || w.rank() != 4) {
    throw DimensionError("conv2d expects x[b,c,h,w] and w[o,c,kh,kw], got " +
                         shape_string(x.shape()) + " and " +
                         shape_string(w.shape()));
  }
  if (x.dim(1) != w.dim(1)) {
    throw DimensionError("conv2d channel mismatch: input " +
                         shape_string(x.shape()) + " vs kernel " +
                         shape_string(w.shape()));
  }
  ConvDims d{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0),
             w.dim(2), w.dim(3), 0,        0};
  d.oh = conv_out_extent(d.h, d.kh, g.stride_h, g.pad_h, "height");
  d.ow = conv_out_extent(d.w, d.kw, g.stride_w, g.pad_w, "width");
  return d;
}

// cols[(c, ki, kj), (oy, ox)] for one sample.
// For unit horizontal stride: the output columns [lo, hi) whose input
// column ox + kj - pad lies inside the image.
inline std::pair<std::size_t, std::size_t> unit_stride_span(const ConvDims& d,
                                                            const ConvGeometry& g,
                                                            std::size_t kj) {
  const std::size_t lo = g.pad_w > kj ? std::min(d.ow, g.pad_w - kj) : 0;
  const std::size_t limit = d.w + g.pad_w - kj;  // ox < limit stays inside
  const std::size_t hi = std::max(lo, std::min(d.ow, limit));
  return {lo, hi};
}

template <Scalar T>
void im2col(const T* x, const ConvDims& d, const ConvGeometry& g, T* cols) {
  const std::size_t pixels = d.pixels();
  for (std::size_t c = 0; c < d.c_in; ++c) {
    const T* plane = x + c * d.h * d.w;
    for (std::size_t ki = 0; ki < d.kh; ++ki) {
      for (std::size_t kj = 0; kj < d.kw; ++kj) {
        T* row = cols + ((c * d.kh + ki) * d.kw + kj) * pixels;
        for (std::size_t oy = 0; oy < d.oh; ++oy) {
          const std::ptrdiff_t iy =
              static_cast<std::ptrdiff_t>(oy * g.stride_h + ki) -
              static_cast<std::ptrdiff_t>(g.pad_h);
          T* out = row + oy * d.ow;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.h)) {
            std::fill(out, out + d.ow, T{0});
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(iy) * d.w;
          if (g.stride_w == 1) {
            // valid outputs form one contiguous run
            const auto [lo, hi] = unit_stride_span(d, g, kj);
            std::fill(out, out + lo, T{0});
            std::copy(src + (lo + kj - g.pad_w), src + (hi + kj - g.pad_w), out + lo);
            std::fill(out + hi, out + d.ow, T{0});
            continue;
          }
          for (std::size_t ox = 0; ox < d.ow; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * g.stride_w + kj) -
                static_cast<std::ptrdiff_t>(g.pad_w);
            out[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(d.w))
                          ? T{0}
                          : src[ix];
          }
        }
      }
    }
  }
}

// Scatter-add of im2col columns back into an input-shaped gradient.
template <Scalar T>
void col2im(const T* cols, const ConvDims& d, const ConvGeometry& g, T* dx) {
  const std::size_t pixels = d.pixels();
  for (std::size_t c = 0; c < d.c_in; ++c) {
    T* plane = dx + c * d.h * d.w;
    for (std::size_t ki = 0; ki < d.kh; ++ki) {
      for (std::size_t kj = 0; kj < d.kw; ++kj) {
        const T* row = cols + ((c * d.kh + ki) * d.kw + kj) * pixels;
        for (std::size_t oy = 0; oy < d.oh; ++oy) {
          const std::ptrdiff_t iy =
              static_cast<std::ptrdiff_t>(oy * g.stride_h + ki) -
              static_cast<std::ptrdiff_t>(g.pad_h);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.h)) continue;
          T* dst = plane + static_cast<std::size_t>(iy) * d.w;
          const T* src = row + oy * d.ow;
          if (g.stride_w == 1) {
            const auto [lo, hi] = unit_stride_span(d, g, kj);
            T* out = dst + (lo + kj - g.pad_w);
            for (std::size_t i = 0; i < hi - lo; ++i) out[i] += src[lo + i];
            continue;
          }
          for (std::size_t ox = 0; ox < d.ow; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * g.stride_w + kj) -
                static_cast<std::ptrdiff_t>(g.pad_w);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(d.w))
              dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

// Cross-correlation (no kernel flip) with zero padding. Optional bias has
// one entry per output channel.
template <Scalar T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w,
                 const ConvGeometry& g,
                 const std::optional<Tensor<T>>& bias = std::nullopt) {
  const detail::ConvDims d = detail::conv_dims(x, w, g);
  if (bias && (bias->rank() != 1 || bias->dim(0) != d.c_out)) {
    throw DimensionError("conv2d bias " + shape_string(bias->shape()) +
                         " does not match " + std::to_string(d.c_out) +
                         " output channels");
  }
  Tensor<T> y({d.batch, d.c_out, d.oh, d.ow});
  std::vector<T> cols(d.patch() * d.pixels());
  const std::size_t out_stride = d.c_out * d.pixels();
  const bool pointwise = d.kh == 1 && d.kw == 1 && g.stride_h == 1 &&
                         g.stride_w == 1 && g.pad_h == 0 && g.pad_w == 0;
  for (std::size_t b = 0; b < d.batch; ++b) {
    const T* xb = x.raw() + b * d.c_in * d.h * d.w;
    const T* cb = xb;
    if (!pointwise) {
      detail::im2col(xb, d, g, cols.data());
      cb = cols.data();
    }
    T* yb = y.raw() + b * out_stride;
    detail::gemm_nn(d.c_out, d.pixels(), d.patch(), w.raw(), cb, yb, false);
    if (bias) {
      for (std::size_t o = 0; o < d.c_out; ++o) {
        const T bo = (*bias)[o];
        T* plane = yb + o * d.pixels();
        for (std::size_t p = 0; p < d.pixels(); ++p) plane[p] += bo;
      }
    }
  }
  return y;
}

template <Scalar T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, std::size_t stride,
                 std::size_t padding) {
  return conv2d(x, w, ConvGeometry::square(stride, padding));
}

template <Scalar T>
struct ConvGrads {
  std::optional<Tensor<T>> dx;
  Tensor<T> dw;
  Tensor<T> dbias;  // per output channel, always computed
};

// Gradients of conv2d with respect to input, kernel and bias. Sample
// contributions to dw are added in batch order.
template <Scalar T>
ConvGrads<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& w,
                             const Tensor<T>& dy, const ConvGeometry& g,
                             bool need_dx) {
  const detail::ConvDims d = detail::conv_dims(x, w, g);
  const Shape expected{d.batch, d.c_out, d.oh, d.ow};
  if (dy.shape() != expected) {
    throw DimensionError("conv2d upstream gradient " + shape_string(dy.shape()) +
                         " does not match output " + shape_string(expected));
  }
  ConvGrads<T> grads{std::nullopt, Tensor<T>(w.shape()), Tensor<T>({d.c_out})};
  if (need_dx) grads.dx = Tensor<T>(x.shape());
  const std::size_t patch = d.patch();
  const std::size_t pixels = d.pixels();
  std::vector<T> cols(patch * pixels);
  std::vector<T> cols_t(patch * pixels);
  std::vector<T> dcols(need_dx ? patch * pixels : 0);
  for (std::size_t b = 0; b < d.batch; ++b) {
    const T* xb = x.raw() + b * d.c_in * d.h * d.w;
    const T* dyb = dy.raw() + b * d.c_out * pixels;
    detail::im2col(xb, d, g, cols.data());
    detail::transpose_into(patch, pixels, cols.data(), cols_t.data());
    detail::gemm_nn(d.c_out, patch, pixels, dyb, cols_t.data(),
                    grads.dw.raw(), true);
    for (std::size_t o = 0; o < d.c_out; ++o) {
      T s{0};
      const T* plane = dyb + o * pixels;
      for (std::size_t p = 0; p < pixels; ++p) s += plane[p];
      grads.dbias[o] += s;
    }
    if (need_dx) {
      detail::gemm_tn(d.c_out, pixels, patch, w.raw(), dyb, dcols.data(),
                      false);
      detail::col2im(dcols.data(), d, g,
                     grads.dx->raw() + b * d.c_in * d.h * d.w);
    }
  }
  return grads;
}

}  // namespace opmt

#endif  // OPMT_CONV_HPP_
