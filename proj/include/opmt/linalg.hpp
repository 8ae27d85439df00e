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

#ifndef OPMT_LINALG_HPP_
#define OPMT_LINALG_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "opmt/tensor.hpp"

namespace opmt {

using Rng = std::mt19937_64;

// splitmix64 finalizer; used to derive independent streams from one seed.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

template <typename... Tags>
std::uint64_t derive_seed(std::uint64_t base, Tags... tags) {
  std::uint64_t s = mix_seed(base);
  ((s = mix_seed(s ^ static_cast<std::uint64_t>(tags))), ...);
  return s;
}

template <Scalar T>
Tensor<T> random_normal(Shape shape, Rng& rng, double stddev = 1.0) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (T& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

template <Scalar T>
Tensor<T> random_uniform(Shape shape, Rng& rng, double lo, double hi) {
  Tensor<T> t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (T& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

// ---------------------------------------------------------------------------
// Singular value decomposition
// ---------------------------------------------------------------------------

// a = u * diag(s) * v^T with q = min(m, n) singular triplets.
template <Scalar T>
struct SvdResult {
  Tensor<T> u;  // m x q, orthonormal columns
  Tensor<T> s;  // q, nonincreasing
  Tensor<T> v;  // n x q, orthonormal columns
};

struct SvdOptions {
  int max_sweeps = 80;
  double tolerance = 1e-15;
};

namespace detail {

// Columns stored contiguously: col(j)[i] = data[j * rows + i].
struct ColMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;
  double* col(std::size_t j) { return data.data() + j * rows; }
  const double* col(std::size_t j) const { return data.data() + j * rows; }
};

inline double dot(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

inline void rotate(double* p, double* q, std::size_t n, double c, double s) {
  for (std::size_t i = 0; i < n; ++i) {
    const double xp = p[i];
    const double xq = q[i];
    p[i] = c * xp - s * xq;
    q[i] = s * xp + c * xq;
  }
}

// Fills column j of `basis` with a unit vector orthogonal to columns [0, j).
inline void complete_column(ColMatrix& basis, std::size_t j,
                            const std::vector<bool>& valid) {
  for (std::size_t e = 0; e < basis.rows; ++e) {
    std::vector<double> cand(basis.rows, 0.0);
    cand[e] = 1.0;
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t k = 0; k < basis.cols; ++k) {
        if (k == j || !valid[k]) continue;
        const double proj = dot(cand.data(), basis.col(k), basis.rows);
        for (std::size_t i = 0; i < basis.rows; ++i)
          cand[i] -= proj * basis.col(k)[i];
      }
    }
    const double norm = std::sqrt(dot(cand.data(), cand.data(), basis.rows));
    if (norm > 0.5) {
      for (std::size_t i = 0; i < basis.rows; ++i)
        basis.col(j)[i] = cand[i] / norm;
      return;
    }
  }
}

}  // namespace detail

// One-sided (Hestenes) Jacobi SVD. Pairs are swept in fixed cyclic order,
// so the result is deterministic. Each u column is signed so its
// largest-magnitude entry is positive.
template <Scalar T>
SvdResult<T> svd(const Tensor<T>& a, const SvdOptions& opts = {}) {
  detail::require_rank(a, 2, "svd");
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!std::isfinite(a[i])) throw ArgumentError("svd input is not finite");
  }
  const bool transposed = a.dim(0) < a.dim(1);
  const std::size_t m = transposed ? a.dim(1) : a.dim(0);
  const std::size_t n = transposed ? a.dim(0) : a.dim(1);

  detail::ColMatrix g{m, n, std::vector<double>(m * n)};
  for (std::size_t i = 0; i < a.dim(0); ++i) {
    for (std::size_t j = 0; j < a.dim(1); ++j) {
      const double val = a[i * a.dim(1) + j];
      if (transposed) {
        g.col(i)[j] = val;
      } else {
        g.col(j)[i] = val;
      }
    }
  }
  detail::ColMatrix vm{n, n, std::vector<double>(n * n, 0.0)};
  for (std::size_t j = 0; j < n; ++j) vm.col(j)[j] = 1.0;

  double residual = 0.0;
  bool converged = false;
  for (int sweep = 0; sweep < opts.max_sweeps && !converged; ++sweep) {
    residual = 0.0;
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double alpha = detail::dot(g.col(p), g.col(p), m);
        const double beta = detail::dot(g.col(q), g.col(q), m);
        const double gamma = detail::dot(g.col(p), g.col(q), m);
        if (alpha == 0.0 || beta == 0.0) continue;
        const double off = std::abs(gamma) / std::sqrt(alpha * beta);
        residual = std::max(residual, off);
        if (off <= opts.tolerance) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        detail::rotate(g.col(p), g.col(q), m, c, s);
        detail::rotate(vm.col(p), vm.col(q), n, c, s);
      }
    }
    converged = !rotated;
  }
  if (!converged) {
    throw NumericalError("svd did not converge in " +
                             std::to_string(opts.max_sweeps) +
                             " sweeps; off-diagonal residual " +
                             std::to_string(residual),
                         residual);
  }

  std::vector<double> sigma(n);
  for (std::size_t j = 0; j < n; ++j)
    sigma[j] = std::sqrt(detail::dot(g.col(j), g.col(j), m));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

  // Left vectors of the working matrix, sorted; zero columns completed.
  detail::ColMatrix left{m, n, std::vector<double>(m * n, 0.0)};
  detail::ColMatrix right{n, n, std::vector<double>(n * n, 0.0)};
  std::vector<bool> valid(n, false);
  std::vector<double> sorted_sigma(n);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t j = order[k];
    sorted_sigma[k] = sigma[j];
    std::copy(vm.col(j), vm.col(j) + n, right.col(k));
    if (sigma[j] > 1e-300) {
      for (std::size_t i = 0; i < m; ++i) left.col(k)[i] = g.col(j)[i] / sigma[j];
      valid[k] = true;
    }
  }
  for (std::size_t k = 0; k < n; ++k) {
    if (!valid[k]) {
      detail::complete_column(left, k, valid);
      valid[k] = true;
    }
  }

  // Map back: u holds a's left vectors (m_a x q), v its right vectors.
  detail::ColMatrix& u_cols = transposed ? right : left;
  detail::ColMatrix& v_cols = transposed ? left : right;
  const std::size_t q = n;
  for (std::size_t k = 0; k < q; ++k) {
    const double* col = u_cols.col(k);
    std::size_t best = 0;
    for (std::size_t i = 1; i < u_cols.rows; ++i)
      if (std::abs(col[i]) > std::abs(col[best])) best = i;
    if (col[best] < 0.0) {
      for (std::size_t i = 0; i < u_cols.rows; ++i) u_cols.col(k)[i] = -u_cols.col(k)[i];
      for (std::size_t i = 0; i < v_cols.rows; ++i) v_cols.col(k)[i] = -v_cols.col(k)[i];
    }
  }

  SvdResult<T> out{Tensor<T>({u_cols.rows, q}), Tensor<T>({q}),
                   Tensor<T>({v_cols.rows, q})};
  for (std::size_t k = 0; k < q; ++k) {
    out.s[k] = static_cast<T>(sorted_sigma[k]);
    for (std::size_t i = 0; i < u_cols.rows; ++i)
      out.u[i * q + k] = static_cast<T>(u_cols.col(k)[i]);
    for (std::size_t i = 0; i < v_cols.rows; ++i)
      out.v[i * q + k] = static_cast<T>(v_cols.col(k)[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Initializers
// ---------------------------------------------------------------------------

enum class InitScheme { kKaimingUniform, kGlorotUniform };

struct Fans {
  std::size_t fan_in;
  std::size_t fan_out;
};

// 2-D weights are (in, out); 4-D conv kernels are (c_o, c_i, k, k).
inline Fans fans_of(const Shape& shape) {
  if (shape.size() == 2) return {shape[0], shape[1]};
  if (shape.size() == 4) {
    const std::size_t receptive = shape[2] * shape[3];
    return {shape[1] * receptive, shape[0] * receptive};
  }
  throw ArgumentError("cannot derive fan-in/fan-out for shape " +
                      shape_string(shape));
}

inline double init_limit(InitScheme scheme, Fans fans) {
  switch (scheme) {
    case InitScheme::kKaimingUniform:
      return std::sqrt(6.0 / static_cast<double>(fans.fan_in));
    case InitScheme::kGlorotUniform:
      return std::sqrt(6.0 / static_cast<double>(fans.fan_in + fans.fan_out));
  }
  return 0.0;
}

template <Scalar T>
Tensor<T> init_dense(const Shape& shape, InitScheme scheme, std::uint64_t seed) {
  const double limit = init_limit(scheme, fans_of(shape));
  Rng rng(seed);
  return random_uniform<T>(shape, rng, -limit, limit);
}

// ---------------------------------------------------------------------------
// Spectral factorization
// ---------------------------------------------------------------------------

template <Scalar T>
struct SpectralFactors {
  Tensor<T> u;      // m x r
  Tensor<T> mdiag;  // r
  Tensor<T> v;      // r x n
};

// w = u * diag(mdiag) * v with rank r >= min(m, n). The leading min(m, n)
// directions are the singular triplets of w; any further directions get
// fresh scheme-initialized vectors scaled by 1/sqrt(r) and a zero diagonal
// entry, so the product is still w.
template <Scalar T>
SpectralFactors<T> spectral_factorize(const Tensor<T>& w, std::size_t r,
                                      InitScheme scheme = InitScheme::kKaimingUniform,
                                      std::uint64_t seed = 0) {
  detail::require_rank(w, 2, "spectral_factorize");
  const std::size_t m = w.dim(0);
  const std::size_t n = w.dim(1);
  const std::size_t q = std::min(m, n);
  if (r < q) {
    throw RankError("rank " + std::to_string(r) +
                    " is below the full-rank bound min(" + std::to_string(m) +
                    ", " + std::to_string(n) + ") = " + std::to_string(q));
  }
  const SvdResult<double> dec = svd(cast<double>(w));
  SpectralFactors<T> out{Tensor<T>({m, r}), Tensor<T>({r}), Tensor<T>({r, n})};
  for (std::size_t k = 0; k < q; ++k) {
    out.mdiag[k] = static_cast<T>(dec.s[k]);
    for (std::size_t i = 0; i < m; ++i)
      out.u[i * r + k] = static_cast<T>(dec.u[i * q + k]);
    for (std::size_t j = 0; j < n; ++j)
      out.v[k * n + j] = static_cast<T>(dec.v[j * q + k]);
  }
  if (r > q) {
    Rng rng(derive_seed(seed, 0x5eed));
    const double scale = 1.0 / std::sqrt(static_cast<double>(r));
    const double lu = init_limit(scheme, fans_of({m, r}));
    const double lv = init_limit(scheme, fans_of({r, n}));
    std::uniform_real_distribution<double> du(-lu, lu);
    std::uniform_real_distribution<double> dv(-lv, lv);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t k = q; k < r; ++k)
        out.u[i * r + k] = static_cast<T>(du(rng) * scale);
    for (std::size_t k = q; k < r; ++k)
      for (std::size_t j = 0; j < n; ++j)
        out.v[k * n + j] = static_cast<T>(dv(rng) * scale);
  }
  return out;
}

}  // namespace opmt

#endif  // OPMT_LINALG_HPP_
