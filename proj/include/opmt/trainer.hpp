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

#ifndef OPMT_TRAINER_HPP_
#define OPMT_TRAINER_HPP_

#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "opmt/data.hpp"
#include "opmt/errors.hpp"
#include "opmt/factorized.hpp"
#include "opmt/model.hpp"
#include "opmt/optim.hpp"

namespace opmt {

enum class TrainMode { kFac, kFacNoIter, kUvShare, kMShare, kBaseline };
enum class Alternation { kPerEpoch, kPerBatch };
enum class FrobeniusForm { kProduct, kPerFactor };

inline const char* train_mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::kFac: return "fac";
    case TrainMode::kFacNoIter: return "fac-no-iter";
    case TrainMode::kUvShare: return "uvshare";
    case TrainMode::kMShare: return "mshare";
    case TrainMode::kBaseline: return "baseline";
  }
  return "?";
}

inline TrainMode train_mode_from_name(const std::string& s) {
  for (TrainMode m : {TrainMode::kFac, TrainMode::kFacNoIter, TrainMode::kUvShare,
                      TrainMode::kMShare, TrainMode::kBaseline})
    if (s == train_mode_name(m)) return m;
  throw ArgumentError("unknown training mode '" + s +
                      "' (expected baseline, fac, fac-no-iter, uvshare or mshare)");
}

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 8;
  double lr = 1e-3;                // shared parameters, and all of them in joint modes
  std::optional<double> lr_diag;   // phase A; falls back to lr
  OptimizerKind optimizer = OptimizerKind::kAdam;
  double momentum = 0.9;
  double weight_decay = 0.0;       // never applied to task diagonals
  double frobenius_decay = 1e-4;
  FrobeniusForm frobenius_form = FrobeniusForm::kProduct;
  double subset_fraction = 0.03;
  std::vector<double> loss_weights;  // empty = equal 1/t
  TrainMode mode = TrainMode::kFac;
  FactorInit init = FactorInit::kSpectral;
  std::uint64_t seed = 0;
  std::optional<std::size_t> lr_halving_epoch;
  Alternation alternation = Alternation::kPerEpoch;
  std::size_t patience = 0;  // 0 disables early stopping

  std::vector<double> resolved_loss_weights(std::size_t tasks) const {
    if (loss_weights.empty()) return std::vector<double>(tasks, 1.0 / static_cast<double>(tasks));
    return loss_weights;
  }

  void validate(std::size_t tasks, std::size_t train_size) const {
    if (batch_size == 0) throw ArgumentError("batch_size must be positive");
    if (!(lr >= 0.0) || (lr_diag && !(*lr_diag >= 0.0)))
      throw ArgumentError("learning rates must be non-negative");
    if (!(weight_decay >= 0.0)) throw ArgumentError("weight_decay must be non-negative");
    if (!(frobenius_decay >= 0.0))
      throw ArgumentError("frobenius_decay must be non-negative");
    if (!(subset_fraction > 0.0) || subset_fraction > 1.0)
      throw ArgumentError("subset_fraction must lie in (0, 1]");
    if (!loss_weights.empty()) {
      if (loss_weights.size() != tasks) {
        throw ArgumentError("loss_weights has " + std::to_string(loss_weights.size()) +
                            " entries for " + std::to_string(tasks) + " tasks");
      }
      // zero weights are allowed so a task can be switched off
      double sum = 0.0;
      for (double a : loss_weights) {
        if (!(a >= 0.0)) throw ArgumentError("loss weights must be non-negative");
        sum += a;
      }
      if (!(sum > 0.0)) throw ArgumentError("at least one loss weight must be positive");
    }
    if (mode == TrainMode::kFac && train_size > 0 &&
        subset_fraction * static_cast<double>(train_size) < 1.0 - 1e-9) {
      throw ArgumentError("subset_fraction * train size is below one sample");
    }
  }
};

// ---------------------------------------------------------------------------
// Frobenius decay
// ---------------------------------------------------------------------------

template <Scalar T>
struct FrobeniusPenalty {
  double value = 0.0;
  Tensor<T> du;
  Tensor<T> dv;
  std::vector<Tensor<T>> d_task_diags;
};

template <typename L>
auto frobenius_penalty(const L& layer, double lambda,
                       FrobeniusForm form = FrobeniusForm::kProduct)
  requires kIsFactorized<L>
{
  using T = std::remove_cvref_t<decltype(layer.u[0])>;
  if (!(lambda >= 0.0)) throw ArgumentError("frobenius decay must be non-negative");
  FrobeniusPenalty<T> out;
  if (form == FrobeniusForm::kProduct) {
    Tensor<T> w;
    if constexpr (requires { layer.stride; }) w = contract_conv(layer);
    else w = contract_linear(layer);
    out.value = 0.5 * lambda * squared_norm(w);
    for (auto& x : w.data()) x = static_cast<T>(lambda * static_cast<double>(x));
    FactorizedGrads<T> g = weight_grad_to_factors(layer, w);
    out.du = std::move(g.du);
    out.dv = std::move(g.dv);
    out.d_task_diags = std::move(g.d_task_diags);
    return out;
  }
  auto scaled = [&](const Tensor<T>& p) {
    Tensor<T> g = p;
    for (auto& x : g.data()) x = static_cast<T>(lambda * static_cast<double>(x));
    return g;
  };
  double sq = squared_norm(layer.u) + squared_norm(layer.v);
  for (const auto& d : layer.task_diags) sq += squared_norm(d);
  out.value = 0.5 * lambda * sq;
  out.du = scaled(layer.u);
  out.dv = scaled(layer.v);
  for (const auto& d : layer.task_diags) out.d_task_diags.push_back(scaled(d));
  return out;
}

// Penalty summed over every factorized trunk layer; gradients are aligned
// with visit_model_params order and zero for other parameters.
template <Scalar T>
std::pair<double, std::vector<Tensor<T>>> model_frobenius_penalty(
    const MtlModel<T>& model, double lambda, FrobeniusForm form) {
  std::vector<Tensor<T>> grads = zero_grads(model);
  double total = 0.0;
  std::size_t offset = 0;
  for (const auto& layer : model.trunk) {
    const std::size_t count = layer_param_count(layer);
    std::visit(
        [&](const auto& l) {
          using L = std::remove_cvref_t<decltype(l)>;
          if constexpr (kIsFactorized<L>) {
            if (lambda == 0.0) return;
            auto p = frobenius_penalty(l, lambda, form);
            total += p.value;
            grads[offset] = std::move(p.du);
            grads[offset + 1] = std::move(p.dv);
            for (std::size_t j = 0; j < p.d_task_diags.size(); ++j)
              grads[offset + 2 + j] = std::move(p.d_task_diags[j]);
          }
        },
        layer);
    offset += count;
  }
  return {total, std::move(grads)};
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct EpochReport {
  std::size_t epoch = 0;
  std::vector<double> task_losses;     // combined-loss phase, per task
  std::vector<double> phase_a_losses;  // fac mode only
  std::vector<double> val_losses;      // when validation data is given
  double penalty = 0.0;
  double lr = 0.0;
  double wall_ms = 0.0;

  // Equality of everything except timing.
  bool same_values(const EpochReport& o) const {
    return epoch == o.epoch && task_losses == o.task_losses &&
           phase_a_losses == o.phase_a_losses && val_losses == o.val_losses &&
           penalty == o.penalty && lr == o.lr;
  }
};

inline nlohmann::json to_json(const EpochReport& r) {
  nlohmann::json j{{"epoch", r.epoch},   {"task_losses", r.task_losses},
                   {"penalty", r.penalty}, {"lr", r.lr},
                   {"wall_ms", r.wall_ms}};
  if (!r.phase_a_losses.empty()) j["phase_a_losses"] = r.phase_a_losses;
  if (!r.val_losses.empty()) j["val_losses"] = r.val_losses;
  return j;
}

inline std::string metrics_line(const EpochReport& r) { return to_json(r).dump(); }

// Mean per-sample loss of each task over a dataset.
template <Scalar T>
std::vector<double> evaluate_losses(const MtlModel<T>& model,
                                    const MultitaskDataset<T>& data,
                                    std::size_t batch_size = 16) {
  std::vector<double> sums(model.tasks(), 0.0);
  if (data.size() == 0) return sums;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    idx.clear();
    for (std::size_t i = start; i < std::min(data.size(), start + batch_size); ++i)
      idx.push_back(i);
    Batch<T> b = make_batch(data, std::span<const std::size_t>(idx));
    auto outs = forward(model, b.input);
    for (std::size_t j = 0; j < model.tasks(); ++j) {
      sums[j] += compute_loss(model.task_kinds[j], outs[j], b.targets[j]).value *
                 static_cast<double>(idx.size());
    }
  }
  for (double& s : sums) s /= static_cast<double>(data.size());
  return sums;
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

template <Scalar T>
struct StepLosses {
  std::vector<double> task_losses;
  double penalty = 0.0;
};

template <Scalar T>
class Trainer {
 public:
  Trainer(MtlModel<T>& model, TrainConfig cfg)
      : model_(&model),
        cfg_(std::move(cfg)),
        opt_(OptimizerConfig{cfg_.optimizer, cfg_.momentum}) {
    model.validate();
    cfg_.validate(model.tasks(), 0);
    if (cfg_.mode == TrainMode::kBaseline && model.factorized_count() > 0) {
      throw StructuralError("baseline mode expects a model without factorized layers");
    }
    alpha_ = cfg_.resolved_loss_weights(model.tasks());
    infos_ = parameter_infos(model);
    build_routes();
  }

  const TrainConfig& config() const { return cfg_; }
  std::size_t epoch() const { return epoch_; }

  double current_lr() const { return cfg_.lr * lr_scale(); }
  double current_lr_diag() const { return cfg_.lr_diag.value_or(cfg_.lr) * lr_scale(); }

  // Trains task j's diagonals on its own loss; nothing else moves.
  double phase_a_step(const Batch<T>& batch, std::size_t task) {
    if (task >= model_->tasks()) {
      throw ArgumentError("task id " + std::to_string(task) + " out of range for " +
                          std::to_string(model_->tasks()) + " tasks");
    }
    const std::size_t t = model_->tasks();
    std::unique_ptr<bool[]> active(new bool[t]());
    active[task] = true;
    ForwardTrace<T> trace =
        forward_trace(*model_, batch.input, ForwardMode::kContracted,
                      std::span<const bool>(active.get(), t));
    LossValue<T> loss = compute_loss(model_->task_kinds[task], *trace.outputs[task],
                                     batch.targets.at(task));
    check_finite(loss.value);
    if (model_->factorized_count() == 0) return loss.value;
    std::vector<std::optional<Tensor<T>>> og(model_->tasks());
    og[task] = std::move(loss.grad);
    std::vector<Tensor<T>> grads = backward(*model_, trace, std::span<const std::optional<Tensor<T>>>(og));
    auto params = parameters(*model_);
    for (std::size_t p = 0; p < params.size(); ++p) {
      const ParamInfo& info = infos_[p];
      if (info.kind != ParamKind::kTaskDiag || info.diag_task != task) continue;
      opt_.update(p, *params[p].value, grads[p], current_lr_diag(), 0.0);
    }
    return loss.value;
  }

  // Combined weighted loss plus Frobenius decay; diagonals stay frozen.
  StepLosses<T> phase_b_step(const Batch<T>& batch) {
    return combined_step(batch, /*update_diags=*/false);
  }

  // Single-phase step over all parameters (fac-no-iter, uvshare, mshare,
  // baseline).
  StepLosses<T> joint_step(const Batch<T>& batch) {
    return combined_step(batch, /*update_diags=*/true);
  }

  EpochReport train_epoch(const MultitaskDataset<T>& data) {
    if (data.size() == 0) throw ArgumentError("cannot train on an empty dataset");
    if (data.tasks() != model_->tasks()) {
      throw StructuralError("dataset has " + std::to_string(data.tasks()) +
                            " tasks, model has " + std::to_string(model_->tasks()));
    }
    cfg_.validate(model_->tasks(), data.size());
    const auto start = std::chrono::steady_clock::now();
    EpochReport report;
    report.epoch = epoch_;
    report.lr = current_lr();
    const std::size_t t = model_->tasks();
    std::vector<double> sums(t, 0.0), a_sums(t, 0.0);
    double penalty_sum = 0.0;
    std::size_t seen = 0, a_seen = 0;
    batch_ = 0;

    auto run_phase_a = [&](std::span<const std::size_t> idx) {
      Batch<T> b = make_batch(data, idx);
      for (std::size_t j = 0; j < t; ++j)
        a_sums[j] += phase_a_step(b, j) * static_cast<double>(idx.size());
      a_seen += idx.size();
    };
    auto run_combined = [&](std::span<const std::size_t> idx, bool diags) {
      Batch<T> b = make_batch(data, idx);
      StepLosses<T> s = combined_step(b, diags);
      for (std::size_t j = 0; j < t; ++j)
        sums[j] += s.task_losses[j] * static_cast<double>(idx.size());
      penalty_sum += s.penalty * static_cast<double>(idx.size());
      seen += idx.size();
    };

    const std::vector<std::size_t> order = shuffled_indices(data.size(), cfg_.seed, epoch_);
    const bool fac = cfg_.mode == TrainMode::kFac;
    if (fac && cfg_.alternation == Alternation::kPerEpoch) {
      const std::vector<std::size_t> subset =
          subset_sample(data.size(), cfg_.subset_fraction, cfg_.seed, epoch_);
      for_each_batch(subset, run_phase_a);
      for_each_batch(order, [&](std::span<const std::size_t> idx) { run_combined(idx, false); });
    } else if (fac) {
      for_each_batch(order, [&](std::span<const std::size_t> idx) {
        run_phase_a(idx);
        run_combined(idx, false);
      });
    } else {
      for_each_batch(order, [&](std::span<const std::size_t> idx) { run_combined(idx, true); });
    }

    for (std::size_t j = 0; j < t; ++j) {
      report.task_losses.push_back(sums[j] / static_cast<double>(seen));
      if (fac) report.phase_a_losses.push_back(a_sums[j] / static_cast<double>(a_seen));
    }
    report.penalty = penalty_sum / static_cast<double>(seen);
    report.wall_ms = std::chrono::duration<double, std::milli>(
                         std::chrono::steady_clock::now() - start)
                         .count();
    ++epoch_;
    return report;
  }

 private:
  double lr_scale() const {
    return cfg_.lr_halving_epoch && epoch_ >= *cfg_.lr_halving_epoch ? 0.5 : 1.0;
  }

  void check_finite(double loss) const {
    if (!std::isfinite(loss)) {
      throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch_) +
                                ", batch " + std::to_string(batch_),
                            epoch_, batch_);
    }
  }

  template <typename F>
  void for_each_batch(const std::vector<std::size_t>& order, F&& f) {
    for (std::size_t s = 0; s < order.size(); s += cfg_.batch_size) {
      const std::size_t n = std::min(cfg_.batch_size, order.size() - s);
      f(std::span<const std::size_t>(order.data() + s, n));
      ++batch_;
    }
  }

  // Per-task gradient masks for the block-routing ablations. An empty mask
  // means the task reaches the whole tensor.
  void build_routes() {
    routes_.assign(infos_.size(), {});
    if (cfg_.mode != TrainMode::kUvShare && cfg_.mode != TrainMode::kMShare) return;
    const std::size_t t = model_->tasks();
    auto params = parameters(*model_);
    for (std::size_t p = 0; p < infos_.size(); ++p) {
      const ParamInfo& info = infos_[p];
      if (info.in_head) continue;
      const Tensor<T>& value = *params[p].value;
      const bool uv = info.kind == ParamKind::kFactorU || info.kind == ParamKind::kFactorV;
      if (cfg_.mode == TrainMode::kUvShare && uv) {
        const std::size_t r = info.kind == ParamKind::kFactorU ? value.shape().back()
                                                               : value.dim(0);
        const auto blocks = task_blocks(r, t);
        std::vector<std::vector<T>> masks(t, std::vector<T>(value.size(), T{0}));
        const std::size_t row = value.size() / r;
        for (std::size_t i = 0; i < value.size(); ++i) {
          // U: rank is the trailing axis; V: rank is the leading axis
          const std::size_t k = info.kind == ParamKind::kFactorU ? i % r : i / row;
          for (std::size_t j = 0; j < t; ++j)
            if (k >= blocks[j].first && k < blocks[j].second) masks[j][i] = T{1};
        }
        routes_[p] = std::move(masks);
      } else if (cfg_.mode == TrainMode::kMShare && info.kind == ParamKind::kTaskDiag) {
        const auto blocks = task_blocks(value.size(), t);
        const std::size_t k = info.diag_task;
        std::vector<std::vector<T>> masks(t, std::vector<T>(value.size(), T{0}));
        for (std::size_t i = blocks[k].first; i < blocks[k].second; ++i) masks[k][i] = T{1};
        routes_[p] = std::move(masks);
      }
    }
  }

  StepLosses<T> combined_step(const Batch<T>& batch, bool update_diags) {
    const std::size_t t = model_->tasks();
    if (batch.targets.size() != t) {
      throw DimensionError("batch carries " + std::to_string(batch.targets.size()) +
                           " targets for " + std::to_string(t) + " tasks");
    }
    ForwardTrace<T> trace = forward_trace(*model_, batch.input, ForwardMode::kContracted);
    StepLosses<T> out;
    std::vector<std::optional<Tensor<T>>> og(t);
    for (std::size_t j = 0; j < t; ++j) {
      LossValue<T> loss = compute_loss(model_->task_kinds[j], *trace.outputs[j],
                                       batch.targets[j]);
      check_finite(loss.value);
      out.task_losses.push_back(loss.value);
      for (auto& g : loss.grad.data())
        g = static_cast<T>(alpha_[j] * static_cast<double>(g));
      og[j] = std::move(loss.grad);
    }

    const bool routed = cfg_.mode == TrainMode::kUvShare || cfg_.mode == TrainMode::kMShare;
    std::vector<Tensor<T>> grads;
    if (!routed) {
      grads = backward(*model_, trace, std::span<const std::optional<Tensor<T>>>(og));
    } else {
      grads = zero_grads(*model_);
      for (std::size_t j = 0; j < t; ++j) {
        std::vector<std::optional<Tensor<T>>> single(t);
        single[j] = og[j];
        std::vector<Tensor<T>> gj =
            backward(*model_, trace, std::span<const std::optional<Tensor<T>>>(single));
        for (std::size_t p = 0; p < grads.size(); ++p) {
          if (routes_[p].empty()) {
            axpy(grads[p], T{1}, gj[p]);
            continue;
          }
          const auto& mask = routes_[p][j];
          for (std::size_t i = 0; i < mask.size(); ++i) grads[p][i] += mask[i] * gj[p][i];
        }
      }
    }

    auto [penalty, pgrads] =
        model_frobenius_penalty(*model_, cfg_.frobenius_decay, cfg_.frobenius_form);
    out.penalty = penalty;
    for (std::size_t p = 0; p < grads.size(); ++p) {
      if (routes_[p].empty()) {
        axpy(grads[p], T{1}, pgrads[p]);
        continue;
      }
      for (std::size_t i = 0; i < grads[p].size(); ++i) {
        bool reached = false;
        for (const auto& mask : routes_[p]) reached = reached || mask[i] != T{0};
        if (reached) grads[p][i] += pgrads[p][i];
      }
    }

    auto params = parameters(*model_);
    for (std::size_t p = 0; p < params.size(); ++p) {
      const bool diag = infos_[p].kind == ParamKind::kTaskDiag;
      if (diag && !update_diags) continue;
      opt_.update(p, *params[p].value, grads[p], current_lr(),
                  diag ? 0.0 : cfg_.weight_decay);
    }
    return out;
  }

  MtlModel<T>* model_;
  TrainConfig cfg_;
  Optimizer<T> opt_;
  std::vector<double> alpha_;
  std::vector<ParamInfo> infos_;
  std::vector<std::vector<std::vector<T>>> routes_;
  std::size_t epoch_ = 0;
  std::size_t batch_ = 0;
};

// Trains for cfg.epochs epochs. With validation data each report carries
// validation losses, and a positive patience stops once the weighted
// validation loss has not improved for that many epochs.
template <Scalar T>
std::vector<EpochReport> fit(MtlModel<T>& model, const MultitaskDataset<T>& train,
                             const TrainConfig& cfg,
                             const MultitaskDataset<T>* val = nullptr,
                             const std::function<void(const EpochReport&)>& on_epoch = {}) {
  Trainer<T> trainer(model, cfg);
  const std::vector<double> alpha = cfg.resolved_loss_weights(model.tasks());
  std::vector<EpochReport> reports;
  double best = std::numeric_limits<double>::infinity();
  std::size_t stale = 0;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    EpochReport r = trainer.train_epoch(train);
    if (val != nullptr && val->size() > 0) {
      r.val_losses = evaluate_losses(model, *val);
    }
    if (on_epoch) on_epoch(r);
    reports.push_back(r);
    if (cfg.patience > 0 && !r.val_losses.empty()) {
      double score = 0.0;
      for (std::size_t j = 0; j < alpha.size(); ++j) score += alpha[j] * r.val_losses[j];
      if (score < best) {
        best = score;
        stale = 0;
      } else if (++stale >= cfg.patience) {
        break;
      }
    }
  }
  return reports;
}

}  // namespace opmt

#endif  // OPMT_TRAINER_HPP_
