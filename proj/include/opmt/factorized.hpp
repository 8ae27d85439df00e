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

#ifndef OPMT_FACTORIZED_HPP_
#define OPMT_FACTORIZED_HPP_

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "opmt/conv.hpp"
#include "opmt/linalg.hpp"
#include "opmt/tensor.hpp"

namespace opmt {

enum class ForwardMode {
  kContracted,  // contract U*M*V into one weight, run the plain op
  kFactorized,  // apply V, the composed diagonal, then U in sequence
};

enum class FactorInit {
  kSpectral,      // singular triplets of a dense init
  kIdentityDiag,  // U, V drawn fresh; every task diagonal is all-ones
};

// Fully-connected layer y = x W + b with W (in x out) held as U diag(M) V.
// task_diags[j] is the diagonal of M^(j); M is their elementwise product.
template <Scalar T>
struct FactorizedLinear {
  Tensor<T> u;  // m x r
  std::vector<Tensor<T>> task_diags;  // t vectors of length r
  Tensor<T> v;  // r x n
  std::optional<Tensor<T>> bias;  // n

  std::size_t in_features() const { return u.dim(0); }
  std::size_t out_features() const { return v.dim(1); }
  std::size_t rank() const { return u.dim(1); }
  std::size_t tasks() const { return task_diags.size(); }

  void validate() const {
    if (u.rank() != 2 || v.rank() != 2 || u.dim(1) != v.dim(0)) {
      throw DimensionError("factorized linear needs u[m,r] and v[r,n], got " +
                           shape_string(u.shape()) + " and " +
                           shape_string(v.shape()));
    }
    const std::size_t bound = std::min(in_features(), out_features());
    if (rank() < bound) {
      throw RankError("factorized linear rank " + std::to_string(rank()) +
                      " below min(m, n) = " + std::to_string(bound));
    }
    if (task_diags.empty()) throw ArgumentError("factorized layer needs t >= 1");
    for (const auto& d : task_diags) {
      if (d.shape() != Shape{rank()}) {
        throw DimensionError("task diagonal " + shape_string(d.shape()) +
                             " does not match rank " + std::to_string(rank()));
      }
    }
    if (bias && bias->shape() != Shape{out_features()}) {
      throw DimensionError("bias " + shape_string(bias->shape()) +
                           " does not match " + std::to_string(out_features()) +
                           " outputs");
    }
  }
};

// Spatial-SVD factorized convolution. The kernel, reordered to
// (c_o, k, k, c_i) and viewed as a (c_o*k) x (k*c_i) matrix, equals
// U diag(M) V with U (c_o, k, r) and V (r, k, c_i).
template <Scalar T>
struct FactorizedConv2d {
  Tensor<T> u;  // c_o x k x r
  std::vector<Tensor<T>> task_diags;
  Tensor<T> v;  // r x k x c_i
  std::optional<Tensor<T>> bias;  // c_o
  std::size_t stride = 1;
  std::size_t padding = 0;

  std::size_t out_channels() const { return u.dim(0); }
  std::size_t in_channels() const { return v.dim(2); }
  std::size_t kernel() const { return u.dim(1); }
  std::size_t rank() const { return u.dim(2); }
  std::size_t tasks() const { return task_diags.size(); }

  void validate() const {
    if (u.rank() != 3 || v.rank() != 3 || u.dim(2) != v.dim(0) ||
        u.dim(1) != v.dim(1)) {
      throw DimensionError(
          "factorized conv needs u[c_o,k,r] and v[r,k,c_i], got " +
          shape_string(u.shape()) + " and " + shape_string(v.shape()));
    }
    const std::size_t bound =
        std::min(out_channels() * kernel(), in_channels() * kernel());
    if (rank() < bound) {
      throw RankError("factorized conv rank " + std::to_string(rank()) +
                      " below min(c_o*k, c_i*k) = " + std::to_string(bound));
    }
    if (task_diags.empty()) throw ArgumentError("factorized layer needs t >= 1");
    for (const auto& d : task_diags) {
      if (d.shape() != Shape{rank()}) {
        throw DimensionError("task diagonal " + shape_string(d.shape()) +
                             " does not match rank " + std::to_string(rank()));
      }
    }
    if (bias && bias->shape() != Shape{out_channels()}) {
      throw DimensionError("bias " + shape_string(bias->shape()) +
                           " does not match " + std::to_string(out_channels()) +
                           " output channels");
    }
  }

  Shape kernel_shape() const {
    return {out_channels(), in_channels(), kernel(), kernel()};
  }
};

// M = M^(1) o ... o M^(t), multiplied left to right.
template <Scalar T>
Tensor<T> compose_diag(std::span<const Tensor<T>> task_diags) {
  if (task_diags.empty()) throw ArgumentError("compose_diag needs t >= 1");
  Tensor<T> out = task_diags.front();
  if (out.rank() != 1) {
    throw DimensionError("task diagonal must be a vector, got " +
                         shape_string(out.shape()));
  }
  for (std::size_t j = 1; j < task_diags.size(); ++j) {
    if (task_diags[j].shape() != out.shape()) {
      throw DimensionError("task diagonal length mismatch: " +
                           shape_string(task_diags[j].shape()) + " vs " +
                           shape_string(out.shape()));
    }
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= task_diags[j][i];
  }
  return out;
}

// Product of every task diagonal except `skip`; ones when t == 1.
template <Scalar T>
Tensor<T> diag_product_excluding(std::span<const Tensor<T>> task_diags,
                                 std::size_t skip) {
  Tensor<T> out = Tensor<T>::ones(task_diags.front().shape());
  for (std::size_t j = 0; j < task_diags.size(); ++j) {
    if (j == skip) continue;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= task_diags[j][i];
  }
  return out;
}

// Contiguous split of r entries into t blocks; the first r mod t blocks get
// one extra entry. Returns [begin, end) per task.
inline std::vector<std::pair<std::size_t, std::size_t>> task_blocks(
    std::size_t r, std::size_t t) {
  if (t == 0) throw ArgumentError("task_blocks needs t >= 1");
  std::vector<std::pair<std::size_t, std::size_t>> blocks;
  const std::size_t base = r / t;
  const std::size_t extra = r % t;
  std::size_t begin = 0;
  for (std::size_t j = 0; j < t; ++j) {
    const std::size_t len = base + (j < extra ? 1 : 0);
    blocks.emplace_back(begin, begin + len);
    begin += len;
  }
  return blocks;
}

namespace detail {

// u2 (m x r) * diag(d) * v2 (r x n)
template <Scalar T>
Tensor<T> contract_matrix(const Tensor<T>& u2, const Tensor<T>& d,
                          const Tensor<T>& v2) {
  Tensor<T> scaled = v2;
  const std::size_t n = v2.dim(1);
  for (std::size_t k = 0; k < v2.dim(0); ++k) {
    const T dk = d[k];
    for (std::size_t j = 0; j < n; ++j) scaled[k * n + j] *= dk;
  }
  return matmul(u2, scaled);
}

template <Scalar T>
struct MatrixFactorGrads {
  Tensor<T> du;                       // m x r
  Tensor<T> dv;                       // r x n
  std::vector<Tensor<T>> d_task_diags;  // t x r
};

// Chain rule from dL/dW to the factors of W = U diag(M1 o ... o Mt) V.
template <Scalar T>
MatrixFactorGrads<T> factor_grads(const Tensor<T>& u2,
                                  std::span<const Tensor<T>> task_diags,
                                  const Tensor<T>& v2, const Tensor<T>& dw) {
  const Tensor<T> d = compose_diag(task_diags);
  const std::size_t m = u2.dim(0);
  const std::size_t r = u2.dim(1);
  const std::size_t n = v2.dim(1);
  Tensor<T> dw_vt = matmul(dw, transpose(v2));  // m x r
  Tensor<T> ut_dw = matmul(transpose(u2), dw);  // r x n

  MatrixFactorGrads<T> g{dw_vt, ut_dw, {}};
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t k = 0; k < r; ++k) g.du[i * r + k] *= d[k];
  for (std::size_t k = 0; k < r; ++k)
    for (std::size_t j = 0; j < n; ++j) g.dv[k * n + j] *= d[k];

  // dL/dM_k = (U^T dW V^T)_kk
  Tensor<T> dd({r});
  for (std::size_t k = 0; k < r; ++k) {
    T s{0};
    for (std::size_t i = 0; i < m; ++i) s += u2[i * r + k] * dw_vt[i * r + k];
    dd[k] = s;
  }
  for (std::size_t j = 0; j < task_diags.size(); ++j)
    g.d_task_diags.push_back(hadamard(dd, diag_product_excluding(task_diags, j)));
  return g;
}

constexpr std::size_t kToSpatialSvd[] = {0, 2, 3, 1};   // (o,i,kh,kw)->(o,kh,kw,i)
constexpr std::size_t kFromSpatialSvd[] = {0, 3, 1, 2};  // inverse

}  // namespace detail

// (c_o, c_i, k, k) kernel -> (c_o*k) x (k*c_i) spatial-SVD matrix.
template <Scalar T>
Tensor<T> conv_kernel_to_matrix(const Tensor<T>& w) {
  detail::require_rank(w, 4, "conv_kernel_to_matrix");
  const std::size_t co = w.dim(0), ci = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  return permute_axes(w, detail::kToSpatialSvd).reshaped({co * kh, kw * ci});
}

template <Scalar T>
Tensor<T> conv_matrix_to_kernel(const Tensor<T>& mat, std::size_t co,
                                std::size_t ci, std::size_t k) {
  return permute_axes(mat.reshaped({co, k, k, ci}), detail::kFromSpatialSvd);
}

template <Scalar T>
Tensor<T> contract_linear(const FactorizedLinear<T>& layer) {
  layer.validate();
  return detail::contract_matrix(
      layer.u, compose_diag(std::span<const Tensor<T>>(layer.task_diags)),
      layer.v);
}

template <Scalar T>
Tensor<T> contract_conv(const FactorizedConv2d<T>& layer) {
  layer.validate();
  const std::size_t co = layer.out_channels(), ci = layer.in_channels(),
                    k = layer.kernel(), r = layer.rank();
  const Tensor<T> mat = detail::contract_matrix(
      layer.u.reshaped({co * k, r}),
      compose_diag(std::span<const Tensor<T>>(layer.task_diags)),
      layer.v.reshaped({r, k * ci}));
  return conv_matrix_to_kernel(mat, co, ci, k);
}

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

namespace detail {

// Splits a spectral diagonal across t tasks so that the composed diagonal
// reproduces it: leading entries get the t-th root in every task; the zero
// entries of extra directions are zero in task 0 and one elsewhere, which
// keeps the product zero while task 0 can still grow them.
template <Scalar T>
std::vector<Tensor<T>> split_spectral_diag(const Tensor<T>& mdiag,
                                           std::size_t q, std::size_t t) {
  std::vector<Tensor<T>> diags(t, Tensor<T>(mdiag.shape()));
  const double inv_t = 1.0 / static_cast<double>(t);
  for (std::size_t k = 0; k < mdiag.size(); ++k) {
    for (std::size_t j = 0; j < t; ++j) {
      if (k < q) {
        diags[j][k] = t == 1 ? mdiag[k]
                             : static_cast<T>(std::pow(
                                   static_cast<double>(mdiag[k]), inv_t));
      } else {
        diags[j][k] = j == 0 ? T{0} : T{1};
      }
    }
  }
  return diags;
}

}  // namespace detail

struct FactorizeOptions {
  std::size_t tasks = 1;
  std::size_t rank_extra = 0;  // r = min bound + rank_extra
  FactorInit init = FactorInit::kSpectral;
  InitScheme scheme = InitScheme::kKaimingUniform;
  std::uint64_t seed = 0;
};

// Builds a factorized layer from the dense weight the plain layer would have
// started with. Spectral init reproduces `dense` exactly up to rounding.
template <Scalar T>
FactorizedLinear<T> factorize_linear(const Tensor<T>& dense,
                                     std::optional<Tensor<std::type_identity_t<T>>> bias,
                                     const FactorizeOptions& opts) {
  detail::require_rank(dense, 2, "factorize_linear");
  const std::size_t m = dense.dim(0), n = dense.dim(1);
  const std::size_t q = std::min(m, n);
  const std::size_t r = q + opts.rank_extra;
  FactorizedLinear<T> layer;
  layer.bias = std::move(bias);
  if (opts.init == FactorInit::kSpectral) {
    SpectralFactors<T> f = spectral_factorize(dense, r, opts.scheme, opts.seed);
    layer.u = std::move(f.u);
    layer.v = std::move(f.v);
    layer.task_diags = detail::split_spectral_diag(f.mdiag, q, opts.tasks);
  } else {
    layer.u = init_dense<T>({m, r}, opts.scheme, derive_seed(opts.seed, 1));
    layer.v = init_dense<T>({r, n}, opts.scheme, derive_seed(opts.seed, 2));
    layer.task_diags.assign(opts.tasks, Tensor<T>::ones({r}));
  }
  layer.validate();
  return layer;
}

template <Scalar T>
FactorizedConv2d<T> factorize_conv(const Tensor<T>& dense_kernel,
                                   std::optional<Tensor<std::type_identity_t<T>>> bias,
                                   std::size_t stride, std::size_t padding,
                                   const FactorizeOptions& opts) {
  detail::require_rank(dense_kernel, 4, "factorize_conv");
  const std::size_t co = dense_kernel.dim(0), ci = dense_kernel.dim(1),
                    k = dense_kernel.dim(2);
  if (dense_kernel.dim(3) != k) {
    throw DimensionError("factorize_conv needs a square kernel, got " +
                         shape_string(dense_kernel.shape()));
  }
  const std::size_t q = std::min(co * k, ci * k);
  const std::size_t r = q + opts.rank_extra;
  FactorizedConv2d<T> layer;
  layer.bias = std::move(bias);
  layer.stride = stride;
  layer.padding = padding;
  if (opts.init == FactorInit::kSpectral) {
    SpectralFactors<T> f = spectral_factorize(
        conv_kernel_to_matrix(dense_kernel), r, opts.scheme, opts.seed);
    layer.u = std::move(f.u).reshaped({co, k, r});
    layer.v = std::move(f.v).reshaped({r, k, ci});
    layer.task_diags = detail::split_spectral_diag(f.mdiag, q, opts.tasks);
  } else {
    layer.u = init_dense<T>({co * k, r}, opts.scheme, derive_seed(opts.seed, 1))
                  .reshaped({co, k, r});
    layer.v = init_dense<T>({r, k * ci}, opts.scheme, derive_seed(opts.seed, 2))
                  .reshaped({r, k, ci});
    layer.task_diags.assign(opts.tasks, Tensor<T>::ones({r}));
  }
  layer.validate();
  return layer;
}

// ---------------------------------------------------------------------------
// Plain linear kernels shared with the layer module
// ---------------------------------------------------------------------------

template <Scalar T>
Tensor<T> linear_forward(const Tensor<T>& x, const Tensor<T>& w,
                         const std::optional<Tensor<T>>& bias) {
  if (x.rank() != 2 || x.dim(1) != w.dim(0)) {
    throw DimensionError("linear input " + shape_string(x.shape()) +
                         " incompatible with weight " + shape_string(w.shape()));
  }
  Tensor<T> y = matmul(x, w);
  if (bias) {
    const std::size_t n = w.dim(1);
    for (std::size_t b = 0; b < x.dim(0); ++b)
      for (std::size_t j = 0; j < n; ++j) y[b * n + j] += (*bias)[j];
  }
  return y;
}

template <Scalar T>
struct LinearGrads {
  std::optional<Tensor<T>> dx;
  Tensor<T> dw;
  Tensor<T> dbias;
};

template <Scalar T>
LinearGrads<T> linear_backward(const Tensor<T>& x, const Tensor<T>& w,
                               const Tensor<T>& dy, bool need_dx) {
  if (dy.rank() != 2 || dy.dim(0) != x.dim(0) || dy.dim(1) != w.dim(1)) {
    throw DimensionError("linear upstream gradient " + shape_string(dy.shape()) +
                         " does not match output [" + std::to_string(x.dim(0)) +
                         ", " + std::to_string(w.dim(1)) + "]");
  }
  LinearGrads<T> g{std::nullopt, Tensor<T>(w.shape()), Tensor<T>({w.dim(1)})};
  detail::gemm_tn(x.dim(0), w.dim(1), w.dim(0), x.raw(), dy.raw(), g.dw.raw(),
                  false);
  const std::size_t n = w.dim(1);
  for (std::size_t b = 0; b < dy.dim(0); ++b)
    for (std::size_t j = 0; j < n; ++j) g.dbias[j] += dy[b * n + j];
  if (need_dx) g.dx = matmul(dy, transpose(w));
  return g;
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

template <Scalar T>
Tensor<T> forward(const FactorizedLinear<T>& layer, const Tensor<T>& x,
                  ForwardMode mode) {
  if (mode == ForwardMode::kContracted)
    return linear_forward(x, contract_linear(layer), layer.bias);
  layer.validate();
  if (x.rank() != 2 || x.dim(1) != layer.in_features()) {
    throw DimensionError("linear input " + shape_string(x.shape()) +
                         " incompatible with factor u " +
                         shape_string(layer.u.shape()));
  }
  Tensor<T> h = matmul(x, layer.u);
  const Tensor<T> d = compose_diag(std::span<const Tensor<T>>(layer.task_diags));
  const std::size_t r = layer.rank();
  for (std::size_t b = 0; b < h.dim(0); ++b)
    for (std::size_t k = 0; k < r; ++k) h[b * r + k] *= d[k];
  return linear_forward(h, layer.v, layer.bias);
}

// Factorized route: a 1 x k horizontal conv with V, per-channel scaling by
// the composed diagonal, then a k x 1 vertical conv with U.
template <Scalar T>
Tensor<T> forward(const FactorizedConv2d<T>& layer, const Tensor<T>& x,
                  ForwardMode mode) {
  if (mode == ForwardMode::kContracted) {
    return conv2d(x, contract_conv(layer),
                  ConvGeometry::square(layer.stride, layer.padding), layer.bias);
  }
  layer.validate();
  const std::size_t co = layer.out_channels(), ci = layer.in_channels(),
                    k = layer.kernel(), r = layer.rank();
  const Tensor<T> horizontal =
      permute_axes(layer.v, {0, 2, 1}).reshaped({r, ci, 1, k});
  const Tensor<T> vertical =
      permute_axes(layer.u, {0, 2, 1}).reshaped({co, r, k, 1});
  Tensor<T> z = conv2d(x, horizontal,
                       ConvGeometry{1, layer.stride, 0, layer.padding});
  const Tensor<T> d = compose_diag(std::span<const Tensor<T>>(layer.task_diags));
  const std::size_t plane = z.dim(2) * z.dim(3);
  for (std::size_t b = 0; b < z.dim(0); ++b)
    for (std::size_t j = 0; j < r; ++j) {
      T* p = z.raw() + (b * r + j) * plane;
      for (std::size_t i = 0; i < plane; ++i) p[i] *= d[j];
    }
  return conv2d(z, vertical, ConvGeometry{layer.stride, 1, layer.padding, 0},
                layer.bias);
}

template <Scalar T>
struct FactorizedGrads {
  Tensor<T> du;  // shaped like layer.u
  Tensor<T> dv;  // shaped like layer.v
  std::vector<Tensor<T>> d_task_diags;
  std::optional<Tensor<T>> dx;
  std::optional<Tensor<T>> dbias;
};

// Maps a gradient with respect to the contracted weight onto the factors.
template <Scalar T>
FactorizedGrads<T> weight_grad_to_factors(const FactorizedLinear<T>& layer,
                                          const Tensor<T>& dw) {
  auto g = detail::factor_grads(layer.u,
                                std::span<const Tensor<T>>(layer.task_diags),
                                layer.v, dw);
  return {std::move(g.du), std::move(g.dv), std::move(g.d_task_diags),
          std::nullopt, std::nullopt};
}

template <Scalar T>
FactorizedGrads<T> weight_grad_to_factors(const FactorizedConv2d<T>& layer,
                                          const Tensor<T>& dw) {
  const std::size_t co = layer.out_channels(), ci = layer.in_channels(),
                    k = layer.kernel(), r = layer.rank();
  auto g = detail::factor_grads(layer.u.reshaped({co * k, r}),
                                std::span<const Tensor<T>>(layer.task_diags),
                                layer.v.reshaped({r, k * ci}),
                                conv_kernel_to_matrix(dw));
  return {std::move(g.du).reshaped(layer.u.shape()),
          std::move(g.dv).reshaped(layer.v.shape()),
          std::move(g.d_task_diags), std::nullopt, std::nullopt};
}

// Exact gradients of the layer function; dbias is set only when the layer
// has a bias.
template <Scalar T>
FactorizedGrads<T> backward(const FactorizedLinear<T>& layer, const Tensor<T>& x,
                            const Tensor<T>& upstream, bool need_dx = true) {
  const Tensor<T> w = contract_linear(layer);
  if (x.rank() != 2 || x.dim(1) != w.dim(0)) {
    throw DimensionError("linear input " + shape_string(x.shape()) +
                         " incompatible with weight " + shape_string(w.shape()));
  }
  LinearGrads<T> lg = linear_backward(x, w, upstream, need_dx);
  FactorizedGrads<T> g = weight_grad_to_factors(layer, lg.dw);
  g.dx = std::move(lg.dx);
  if (layer.bias) g.dbias = std::move(lg.dbias);
  return g;
}

template <Scalar T>
FactorizedGrads<T> backward(const FactorizedConv2d<T>& layer, const Tensor<T>& x,
                            const Tensor<T>& upstream, bool need_dx = true) {
  const Tensor<T> w = contract_conv(layer);
  ConvGrads<T> cg = conv2d_backward(
      x, w, upstream, ConvGeometry::square(layer.stride, layer.padding), need_dx);
  FactorizedGrads<T> g = weight_grad_to_factors(layer, cg.dw);
  g.dx = std::move(cg.dx);
  if (layer.bias) g.dbias = std::move(cg.dbias);
  return g;
}

}  // namespace opmt

#endif  // OPMT_FACTORIZED_HPP_
