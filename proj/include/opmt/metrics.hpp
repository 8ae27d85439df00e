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

#ifndef OPMT_METRICS_HPP_
#define OPMT_METRICS_HPP_

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "opmt/data.hpp"
#include "opmt/errors.hpp"
#include "opmt/model.hpp"

namespace opmt {

struct SegmentationMetrics {
  double miou = 0.0;
  double pixel_accuracy = 0.0;
};

struct DepthMetrics {
  double abs_err = 0.0;
  double rel_err = 0.0;
};

struct NormalMetrics {
  double mean_angle = 0.0;    // degrees
  double median_angle = 0.0;  // degrees
  double within_11_25 = 0.0;
  double within_22_5 = 0.0;
  double within_30 = 0.0;
};

struct RegressionMetrics {
  double mse = 0.0;
  double abs_err = 0.0;
};

using TaskMetrics =
    std::variant<SegmentationMetrics, DepthMetrics, NormalMetrics, RegressionMetrics>;

struct MetricReport {
  std::vector<TaskMetrics> tasks;
};

// Global confusion counts; IoU is averaged over classes present in either
// prediction or ground truth.
class SegmentationAccumulator {
 public:
  explicit SegmentationAccumulator(std::size_t num_classes)
      : inter_(num_classes, 0), pred_(num_classes, 0), gt_(num_classes, 0) {}

  void add(std::size_t pred, std::size_t gt) {
    if (pred >= pred_.size() || gt >= gt_.size()) {
      throw ArgumentError("class index out of range for " + std::to_string(pred_.size()) +
                          " classes");
    }
    ++pred_[pred];
    ++gt_[gt];
    if (pred == gt) {
      ++inter_[pred];
      ++correct_;
    }
    ++total_;
  }

  SegmentationMetrics result() const {
    SegmentationMetrics m;
    if (total_ == 0) return m;
    double sum = 0.0;
    std::size_t present = 0;
    for (std::size_t c = 0; c < inter_.size(); ++c) {
      const std::uint64_t uni = pred_[c] + gt_[c] - inter_[c];
      if (uni == 0) continue;
      sum += static_cast<double>(inter_[c]) / static_cast<double>(uni);
      ++present;
    }
    m.miou = sum / static_cast<double>(present);
    m.pixel_accuracy = static_cast<double>(correct_) / static_cast<double>(total_);
    return m;
  }

 private:
  std::vector<std::uint64_t> inter_, pred_, gt_;
  std::uint64_t correct_ = 0, total_ = 0;
};

class DepthAccumulator {
 public:
  void add(double pred, double gt) {
    const double e = std::abs(pred - gt);
    abs_ += e;
    rel_ += e / std::max(gt, 1e-3);
    ++n_;
  }
  DepthMetrics result() const {
    if (n_ == 0) return {};
    return {abs_ / static_cast<double>(n_), rel_ / static_cast<double>(n_)};
  }

 private:
  double abs_ = 0.0, rel_ = 0.0;
  std::uint64_t n_ = 0;
};

class NormalAccumulator {
 public:
  // Both vectors are normalized here; a zero prediction counts as 90 degrees.
  void add(std::span<const double> pred, std::span<const double> gt) {
    double pp = 0, gg = 0, pg = 0;
    for (std::size_t k = 0; k < pred.size(); ++k) {
      pp += pred[k] * pred[k];
      gg += gt[k] * gt[k];
      pg += pred[k] * gt[k];
    }
    const double den = std::sqrt(pp) * std::sqrt(gg);
    const double cosv = den > 0 ? std::clamp(pg / den, -1.0, 1.0) : 0.0;
    angles_.push_back(std::acos(cosv) * 180.0 / std::numbers::pi);
  }

  NormalMetrics result() const {
    NormalMetrics m;
    if (angles_.empty()) return m;
    std::vector<double> a = angles_;
    std::sort(a.begin(), a.end());
    const std::size_t n = a.size();
    double sum = 0.0;
    std::size_t w1 = 0, w2 = 0, w3 = 0;
    for (double v : a) {
      sum += v;
      w1 += v < 11.25;
      w2 += v < 22.5;
      w3 += v < 30.0;
    }
    m.mean_angle = sum / static_cast<double>(n);
    m.median_angle = n % 2 ? a[n / 2] : 0.5 * (a[n / 2 - 1] + a[n / 2]);
    m.within_11_25 = static_cast<double>(w1) / static_cast<double>(n);
    m.within_22_5 = static_cast<double>(w2) / static_cast<double>(n);
    m.within_30 = static_cast<double>(w3) / static_cast<double>(n);
    return m;
  }

 private:
  std::vector<double> angles_;
};

namespace detail {

template <Scalar T>
void accumulate_task(LossKind kind, const Tensor<T>& pred, const Tensor<T>& target,
                     std::variant<SegmentationAccumulator, DepthAccumulator,
                                  NormalAccumulator, RegressionMetrics>& acc,
                     std::size_t& count) {
  if (kind == LossKind::kSoftmaxCrossEntropy) {
    std::size_t b, c, pos;
    channel_layout(pred, b, c, pos);
    if (target.size() != b * pos) {
      throw StructuralError("segmentation head " + shape_string(pred.shape()) +
                            " does not match target " + shape_string(target.shape()));
    }
    auto& seg = std::get<SegmentationAccumulator>(acc);
    for (std::size_t s = 0; s < b; ++s)
      for (std::size_t p = 0; p < pos; ++p) {
        const T* z = pred.raw() + s * c * pos + p;
        std::size_t best = 0;
        for (std::size_t k = 1; k < c; ++k)
          if (z[k * pos] > z[best * pos]) best = k;
        seg.add(best, static_cast<std::size_t>(target[s * pos + p]));
      }
    return;
  }
  if (pred.shape() != target.shape()) {
    throw StructuralError("head output " + shape_string(pred.shape()) +
                          " does not match target " + shape_string(target.shape()));
  }
  if (kind == LossKind::kL1) {
    auto& d = std::get<DepthAccumulator>(acc);
    for (std::size_t i = 0; i < pred.size(); ++i) d.add(pred[i], target[i]);
  } else if (kind == LossKind::kCosine) {
    std::size_t b, c, pos;
    channel_layout(pred, b, c, pos);
    auto& nacc = std::get<NormalAccumulator>(acc);
    std::vector<double> pv(c), gv(c);
    for (std::size_t s = 0; s < b; ++s)
      for (std::size_t p = 0; p < pos; ++p) {
        for (std::size_t k = 0; k < c; ++k) {
          pv[k] = pred[(s * c + k) * pos + p];
          gv[k] = target[(s * c + k) * pos + p];
        }
        nacc.add(pv, gv);
      }
  } else {
    auto& r = std::get<RegressionMetrics>(acc);
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const double e = static_cast<double>(pred[i]) - target[i];
      r.mse += e * e;
      r.abs_err += std::abs(e);
    }
    count += pred.size();
  }
}

}  // namespace detail

// Task metrics over a dataset, chosen by each task's loss kind.
template <Scalar T>
MetricReport evaluate(const MtlModel<T>& model, const MultitaskDataset<T>& data,
                      std::size_t batch_size = 16) {
  if (data.task_kinds != model.task_kinds) {
    throw StructuralError("model task heads do not match dataset target kinds");
  }
  using Acc = std::variant<SegmentationAccumulator, DepthAccumulator, NormalAccumulator,
                           RegressionMetrics>;
  std::vector<Acc> accs;
  std::vector<std::size_t> counts(model.tasks(), 0);
  for (LossKind k : model.task_kinds) {
    switch (k) {
      case LossKind::kSoftmaxCrossEntropy: {
        std::size_t classes = data.num_classes;
        if (classes == 0) throw StructuralError("segmentation dataset without class count");
        accs.emplace_back(SegmentationAccumulator(classes));
        break;
      }
      case LossKind::kL1: accs.emplace_back(DepthAccumulator{}); break;
      case LossKind::kCosine: accs.emplace_back(NormalAccumulator{}); break;
      case LossKind::kMse: accs.emplace_back(RegressionMetrics{}); break;
    }
  }
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    idx.clear();
    for (std::size_t i = start; i < std::min(data.size(), start + batch_size); ++i)
      idx.push_back(i);
    Batch<T> b = make_batch(data, std::span<const std::size_t>(idx));
    auto outs = forward(model, b.input);
    for (std::size_t j = 0; j < model.tasks(); ++j)
      detail::accumulate_task(model.task_kinds[j], outs[j], b.targets[j], accs[j], counts[j]);
  }
  MetricReport report;
  for (std::size_t j = 0; j < model.tasks(); ++j) {
    std::visit(
        [&](const auto& a) {
          using A = std::remove_cvref_t<decltype(a)>;
          if constexpr (std::is_same_v<A, RegressionMetrics>) {
            const double n = counts[j] ? static_cast<double>(counts[j]) : 1.0;
            report.tasks.emplace_back(RegressionMetrics{a.mse / n, a.abs_err / n});
          } else {
            report.tasks.emplace_back(a.result());
          }
        },
        accs[j]);
  }
  return report;
}

inline nlohmann::json to_json(const TaskMetrics& m) {
  return std::visit(
      [](const auto& v) -> nlohmann::json {
        using V = std::remove_cvref_t<decltype(v)>;
        if constexpr (std::is_same_v<V, SegmentationMetrics>)
          return {{"miou", v.miou}, {"pixel_accuracy", v.pixel_accuracy}};
        else if constexpr (std::is_same_v<V, DepthMetrics>)
          return {{"abs_err", v.abs_err}, {"rel_err", v.rel_err}};
        else if constexpr (std::is_same_v<V, NormalMetrics>)
          return {{"mean_angle", v.mean_angle},
                  {"median_angle", v.median_angle},
                  {"within_11.25", v.within_11_25},
                  {"within_22.5", v.within_22_5},
                  {"within_30", v.within_30}};
        else
          return {{"mse", v.mse}, {"abs_err", v.abs_err}};
      },
      m);
}

inline nlohmann::json to_json(const MetricReport& r) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& t : r.tasks) j.push_back(to_json(t));
  return j;
}

}  // namespace opmt

#endif  // OPMT_METRICS_HPP_
