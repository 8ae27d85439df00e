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

#ifndef OPMT_DATA_HPP_
#define OPMT_DATA_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "opmt/linalg.hpp"
#include "opmt/loss.hpp"
#include "opmt/tensor.hpp"

namespace opmt {

// One input with an aligned target per task.
template <Scalar T>
struct MultitaskSample {
  Tensor<T> input;                 // [d] or [c, h, w]
  std::vector<Tensor<T>> targets;  // per task, no batch axis
};

template <Scalar T>
struct MultitaskDataset {
  std::vector<LossKind> task_kinds;
  std::size_t num_classes = 0;  // for segmentation-style tasks
  std::vector<MultitaskSample<T>> samples;

  std::size_t size() const { return samples.size(); }
  std::size_t tasks() const { return task_kinds.size(); }
};

template <Scalar T>
struct Batch {
  Tensor<T> input;                 // [b, ...]
  std::vector<Tensor<T>> targets;  // per task, [b, ...]
};

namespace detail {

template <Scalar T>
Tensor<T> stack(std::span<const Tensor<T>* const> parts) {
  Shape shape{parts.size()};
  const Shape& inner = parts.front()->shape();
  shape.insert(shape.end(), inner.begin(), inner.end());
  Tensor<T> out(shape);
  const std::size_t stride = parts.front()->size();
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (parts[i]->shape() != inner) {
      throw DimensionError("cannot batch samples of shapes " + shape_string(inner) +
                           " and " + shape_string(parts[i]->shape()));
    }
    std::copy(parts[i]->data().begin(), parts[i]->data().end(),
              out.data().begin() + static_cast<std::ptrdiff_t>(i * stride));
  }
  return out;
}

}  // namespace detail

template <Scalar T>
Batch<T> make_batch(const MultitaskDataset<T>& data,
                    std::span<const std::size_t> indices) {
  if (indices.empty()) throw ArgumentError("empty batch");
  std::vector<const Tensor<T>*> parts;
  for (std::size_t i : indices) parts.push_back(&data.samples.at(i).input);
  Batch<T> batch{detail::stack<T>(parts), {}};
  for (std::size_t j = 0; j < data.tasks(); ++j) {
    parts.clear();
    for (std::size_t i : indices) parts.push_back(&data.samples[i].targets.at(j));
    batch.targets.push_back(detail::stack<T>(parts));
  }
  return batch;
}

// Random permutation of 0..n-1 for a given (seed, epoch).
inline std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed,
                                                 std::size_t epoch) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(derive_seed(seed, epoch, 0x5a0f));
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

// ceil(fraction * n) indices drawn without replacement; resampled per epoch.
inline std::vector<std::size_t> subset_sample(std::size_t n, double fraction,
                                              std::uint64_t seed, std::size_t epoch) {
  if (n == 0) throw ArgumentError("cannot sample from an empty dataset");
  if (!(fraction > 0.0) || fraction > 1.0) {
    throw ArgumentError("subset fraction must lie in (0, 1], got " +
                        std::to_string(fraction));
  }
  // the small slack keeps 0.03 * 100 at 3 despite binary rounding
  const auto count = static_cast<std::size_t>(
      std::ceil(fraction * static_cast<double>(n) - 1e-9));
  Rng rng(derive_seed(seed, epoch, 0x5b5e7));
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::max<std::size_t>(count, 1));
  return idx;
}

}  // namespace opmt

#endif  // OPMT_DATA_HPP_
