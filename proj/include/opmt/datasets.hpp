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

#ifndef OPMT_DATASETS_HPP_
#define OPMT_DATASETS_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

#include "opmt/data.hpp"
#include "opmt/errors.hpp"
#include "opmt/linalg.hpp"
#include "opmt/tensor.hpp"

namespace opmt {

template <Scalar T>
struct DatasetSplit {
  MultitaskDataset<T> train;
  MultitaskDataset<T> val;
};

// ---------------------------------------------------------------------------
// Shapes: procedural scenes with segmentation / depth / normal targets
// ---------------------------------------------------------------------------

enum class ShapeType { kDisc, kSquare, kTriangle, kDiamond, kRing, kCross };
inline constexpr std::size_t kShapeTypes = 6;
inline constexpr std::size_t kMaxShapeClasses = kShapeTypes + 1;  // + background

namespace detail {

inline bool shape_covers(ShapeType type, double dx, double dy, double radius) {
  const double ax = std::abs(dx), ay = std::abs(dy);
  switch (type) {
    case ShapeType::kDisc: return dx * dx + dy * dy <= radius * radius;
    case ShapeType::kSquare: return ax <= 0.8 * radius && ay <= 0.8 * radius;
    case ShapeType::kTriangle:
      // apex up, base at dy = +0.8r
      return dy <= 0.8 * radius && dy >= -radius && ax <= 0.5 * (dy + radius) * 0.9;
    case ShapeType::kDiamond: return ax + ay <= radius;
    case ShapeType::kRing: {
      const double d2 = dx * dx + dy * dy;
      return d2 <= radius * radius && d2 >= 0.36 * radius * radius;
    }
    case ShapeType::kCross:
      return (ax <= 0.3 * radius && ay <= radius) || (ay <= 0.3 * radius && ax <= radius);
  }
  return false;
}

template <Scalar T>
MultitaskSample<T> render_shapes_sample(std::size_t size, std::size_t num_classes,
                                        std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double s = static_cast<double>(size);
  const std::size_t plane = size * size;

  std::vector<double> label(plane, 0.0), depth(plane), shade(plane);
  std::vector<double> rgb(3 * plane);

  // far background plane with a gentle tilt
  const double bg_gx = (unit(rng) - 0.5) * 0.5, bg_gy = (unit(rng) - 0.5) * 0.5;
  double bg_col[3];
  for (double& c : bg_col) c = 0.1 + 0.2 * unit(rng);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const std::size_t i = y * size + x;
      depth[i] = 3.0 + bg_gx * (x / s - 0.5) + bg_gy * (y / s - 0.5);
      for (int c = 0; c < 3; ++c) rgb[c * plane + i] = bg_col[c];
    }

  const std::size_t count = 1 + rng() % 3;
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t cls = 1 + rng() % (num_classes - 1);
    const auto type = static_cast<ShapeType>((cls - 1) % kShapeTypes);
    const double radius = s * (0.12 + 0.13 * unit(rng));
    const double cx = s * (0.15 + 0.7 * unit(rng)), cy = s * (0.15 + 0.7 * unit(rng));
    const double d0 = 1.0 + 1.2 * unit(rng);
    const double gx = (unit(rng) - 0.5) * 1.5, gy = (unit(rng) - 0.5) * 1.5;
    double col[3];
    for (double& c : col) c = 0.3 + 0.7 * unit(rng);
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
        if (!shape_covers(type, dx, dy, radius)) continue;
        const std::size_t i = y * size + x;
        label[i] = static_cast<double>(cls);
        depth[i] = d0 + gx * dx / s + gy * dy / s;
        for (int c = 0; c < 3; ++c) rgb[c * plane + i] = col[c];
      }
  }

  // nearer surfaces render brighter; a little pixel noise on top
  std::normal_distribution<double> noise(0.0, 0.02);
  MultitaskSample<T> sample{Tensor<T>({3, size, size}), {}};
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < plane; ++i) {
      const double lit = rgb[c * plane + i] * (1.3 - 0.25 * depth[i]) + noise(rng);
      sample.input[c * plane + i] = static_cast<T>(lit);
    }

  Tensor<T> seg({size, size}), dep({1, size, size}), nrm({3, size, size});
  for (std::size_t i = 0; i < plane; ++i) {
    seg[i] = static_cast<T>(label[i]);
    dep[i] = static_cast<T>(depth[i]);
  }
  // normals from central differences of depth in image-normalized units
  auto at = [&](std::size_t y, std::size_t x) { return depth[y * size + x]; };
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const std::size_t x0 = x == 0 ? 0 : x - 1, x1 = std::min(size - 1, x + 1);
      const std::size_t y0 = y == 0 ? 0 : y - 1, y1 = std::min(size - 1, y + 1);
      const double dzdx = (at(y, x1) - at(y, x0)) * s / static_cast<double>(x1 - x0);
      const double dzdy = (at(y1, x) - at(y0, x)) * s / static_cast<double>(y1 - y0);
      double n[3] = {-dzdx, -dzdy, 1.0};
      const double len = std::sqrt(n[0] * n[0] + n[1] * n[1] + n[2] * n[2]);
      for (int c = 0; c < 3; ++c) nrm[c * plane + y * size + x] = static_cast<T>(n[c] / len);
    }
  sample.targets.push_back(std::move(seg));
  sample.targets.push_back(std::move(dep));
  sample.targets.push_back(std::move(nrm));
  return sample;
}

}  // namespace detail

// Three tasks per sample: class map (cross-entropy), depth (L1) and surface
// normals (cosine). The class of a shape is its geometry; colours are random.
template <Scalar T>
DatasetSplit<T> gen_shapes_dataset(std::size_t n_train, std::size_t n_val,
                                   std::size_t image_size, std::size_t num_classes,
                                   std::uint64_t seed) {
  if (image_size < 16) {
    throw ArgumentError("image size must be at least 16, got " + std::to_string(image_size));
  }
  if (num_classes < 2 || num_classes > kMaxShapeClasses) {
    throw ArgumentError("num_classes must lie in [2, " + std::to_string(kMaxShapeClasses) +
                        "], got " + std::to_string(num_classes));
  }
  DatasetSplit<T> out;
  for (auto* d : {&out.train, &out.val}) {
    d->task_kinds = {LossKind::kSoftmaxCrossEntropy, LossKind::kL1, LossKind::kCosine};
    d->num_classes = num_classes;
  }
  for (std::size_t i = 0; i < n_train; ++i)
    out.train.samples.push_back(
        detail::render_shapes_sample<T>(image_size, num_classes, derive_seed(seed, 0, i)));
  for (std::size_t i = 0; i < n_val; ++i)
    out.val.samples.push_back(
        detail::render_shapes_sample<T>(image_size, num_classes, derive_seed(seed, 1, i)));
  return out;
}

// ---------------------------------------------------------------------------
// Linear teacher: y_j = x A_j + noise with A_j = C B_j sharing C
// ---------------------------------------------------------------------------

struct LinearTeacherSpec {
  std::size_t n = 256;
  std::size_t input_dim = 8;
  std::size_t output_dim = 4;
  std::size_t tasks = 2;
  std::size_t rank = 4;       // width of the shared factor C
  double noise = 0.0;
  std::uint64_t seed = 0;
  bool identical_tasks = false;
};

template <Scalar T>
struct LinearTeacher {
  MultitaskDataset<T> data;
  std::vector<Tensor<T>> teachers;  // A_j, input_dim x output_dim
};

template <Scalar T>
LinearTeacher<T> gen_linear_teacher(const LinearTeacherSpec& spec) {
  if (spec.rank == 0 || spec.rank > spec.input_dim) {
    throw ArgumentError("teacher rank must lie in [1, input_dim], got " +
                        std::to_string(spec.rank));
  }
  if (spec.tasks == 0 || spec.output_dim == 0) throw ArgumentError("empty teacher");
  if (!(spec.noise >= 0.0)) throw ArgumentError("noise must be non-negative");
  Rng rng(derive_seed(spec.seed, 0x7eac));
  const double scale_c = 1.0 / std::sqrt(static_cast<double>(spec.input_dim));
  const double scale_b = 1.0 / std::sqrt(static_cast<double>(spec.rank));
  const Tensor<T> c = random_normal<T>({spec.input_dim, spec.rank}, rng, scale_c);
  LinearTeacher<T> out;
  for (std::size_t j = 0; j < spec.tasks; ++j) {
    if (spec.identical_tasks && j > 0) {
      out.teachers.push_back(out.teachers.front());
      continue;
    }
    out.teachers.push_back(
        matmul(c, random_normal<T>({spec.rank, spec.output_dim}, rng, scale_b)));
  }
  out.data.task_kinds.assign(spec.tasks, LossKind::kMse);
  std::normal_distribution<double> eps(0.0, 1.0);
  for (std::size_t i = 0; i < spec.n; ++i) {
    MultitaskSample<T> s{random_normal<T>({1, spec.input_dim}, rng), {}};
    for (std::size_t j = 0; j < spec.tasks; ++j) {
      Tensor<T> y = matmul(s.input, out.teachers[j]);
      if (spec.noise > 0.0)
        for (auto& v : y.data()) v = static_cast<T>(v + spec.noise * eps(rng));
      s.targets.push_back(std::move(y).reshaped({spec.output_dim}));
    }
    s.input = std::move(s.input).reshaped({spec.input_dim});
    out.data.samples.push_back(std::move(s));
  }
  return out;
}

}  // namespace opmt

#endif  // OPMT_DATASETS_HPP_
