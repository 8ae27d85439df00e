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

#ifndef OPMT_MODEL_HPP_
#define OPMT_MODEL_HPP_

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "opmt/factorized.hpp"
#include "opmt/layers.hpp"
#include "opmt/linalg.hpp"
#include "opmt/loss.hpp"
#include "opmt/tensor.hpp"

namespace opmt {

// Hard parameter sharing: a shared trunk feeding one head per task. Only the
// trunk may contain factorized layers.
template <Scalar T>
struct MtlModel {
  Shape input_shape;  // per sample, no batch axis
  std::vector<Layer<T>> trunk;
  std::vector<std::vector<Layer<T>>> heads;
  std::vector<LossKind> task_kinds;

  std::size_t tasks() const { return heads.size(); }

  std::size_t factorized_count() const {
    std::size_t n = 0;
    for (const auto& l : trunk) n += is_factorized(l) ? 1 : 0;
    return n;
  }

  void validate() const {
    if (heads.empty()) throw StructuralError("model needs at least one task head");
    if (task_kinds.size() != heads.size()) {
      throw StructuralError("model has " + std::to_string(heads.size()) +
                            " heads but " + std::to_string(task_kinds.size()) +
                            " task kinds");
    }
    for (const auto& layer : trunk) {
      std::visit(
          [&](const auto& l) {
            using L = std::remove_cvref_t<decltype(l)>;
            if constexpr (kIsFactorized<L>) {
              l.validate();
              if (l.tasks() != tasks()) {
                throw StructuralError("factorized layer has " +
                                      std::to_string(l.tasks()) +
                                      " task diagonals, model has " +
                                      std::to_string(tasks()) + " tasks");
              }
            }
          },
          layer);
    }
    for (const auto& head : heads)
      for (const auto& layer : head)
        if (is_factorized(layer))
          throw StructuralError("task heads must not contain factorized layers");
  }
};

struct ParamInfo {
  std::string name;  // e.g. "trunk.0.fac_conv.diag.1"
  ParamKind kind;
  bool in_head = false;
  std::size_t head = 0;       // owning head when in_head
  std::size_t diag_task = 0;  // task of a kTaskDiag tensor
  std::size_t layer = 0;      // position in trunk or head
};

inline std::string layer_prefix(bool in_head, std::size_t head, std::size_t index) {
  return in_head ? "head." + std::to_string(head) + "." + std::to_string(index)
                 : "trunk." + std::to_string(index);
}

// f(const ParamInfo&, Tensor&) over the trunk, then heads in order.
template <typename Model, typename F>
void visit_model_params(Model& model, F&& f) {
  auto walk = [&](auto& layers, bool in_head, std::size_t head) {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const std::string prefix = layer_prefix(in_head, head, i) + "." +
                                 layer_kind(layers[i]) + ".";
      visit_layer_params(layers[i], [&](const std::string& field, auto& tensor,
                                        ParamKind kind, std::size_t diag_task) {
        f(ParamInfo{prefix + field, kind, in_head, head, diag_task, i}, tensor);
      });
    }
  };
  walk(model.trunk, false, 0);
  for (std::size_t j = 0; j < model.heads.size(); ++j) walk(model.heads[j], true, j);
}

template <Scalar T>
struct ParamRef {
  ParamInfo info;
  Tensor<T>* value;
};

template <Scalar T>
std::vector<ParamRef<T>> parameters(MtlModel<T>& model) {
  std::vector<ParamRef<T>> out;
  visit_model_params(model, [&](const ParamInfo& info, Tensor<T>& t) {
    out.push_back({info, &t});
  });
  return out;
}

template <Scalar T>
std::vector<ParamInfo> parameter_infos(const MtlModel<T>& model) {
  std::vector<ParamInfo> out;
  visit_model_params(model, [&](const ParamInfo& info, const Tensor<T>&) {
    out.push_back(info);
  });
  return out;
}

template <Scalar T>
std::vector<Tensor<T>> zero_grads(const MtlModel<T>& model) {
  std::vector<Tensor<T>> out;
  visit_model_params(model, [&](const ParamInfo&, const Tensor<T>& t) {
    out.emplace_back(t.shape());
  });
  return out;
}

template <Scalar T>
std::size_t total_scalars(const MtlModel<T>& model) {
  std::size_t n = 0;
  visit_model_params(model, [&](const ParamInfo&, const Tensor<T>& t) { n += t.size(); });
  return n;
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

template <Scalar T>
struct ForwardTrace {
  std::vector<Tensor<T>> trunk_inputs;
  Tensor<T> features;
  std::vector<std::vector<Tensor<T>>> head_inputs;  // empty for skipped heads
  std::vector<std::optional<Tensor<T>>> outputs;    // nullopt for skipped heads
};

// Runs the trunk once and every head whose entry in `active` is true (all
// heads when `active` is empty), keeping the inputs each layer saw.
template <Scalar T>
ForwardTrace<T> forward_trace(const MtlModel<T>& model, const Tensor<T>& x,
                              ForwardMode mode, std::span<const bool> active = {}) {
  ForwardTrace<T> trace;
  trace.trunk_inputs.reserve(model.trunk.size());
  Tensor<T> h = x;
  for (const auto& layer : model.trunk) {
    Tensor<T> next = layer_forward(layer, h, mode);
    trace.trunk_inputs.push_back(std::move(h));
    h = std::move(next);
  }
  trace.features = h;
  trace.head_inputs.resize(model.heads.size());
  trace.outputs.resize(model.heads.size());
  for (std::size_t j = 0; j < model.heads.size(); ++j) {
    if (!active.empty() && !active[j]) continue;
    Tensor<T> y = trace.features;
    for (const auto& layer : model.heads[j]) {
      Tensor<T> next = layer_forward(layer, y, mode);
      trace.head_inputs[j].push_back(std::move(y));
      y = std::move(next);
    }
    trace.outputs[j] = std::move(y);
  }
  return trace;
}

template <Scalar T>
std::vector<Tensor<T>> forward(const MtlModel<T>& model, const Tensor<T>& x,
                               ForwardMode mode = ForwardMode::kContracted) {
  ForwardTrace<T> trace = forward_trace(model, x, mode);
  std::vector<Tensor<T>> out;
  for (auto& o : trace.outputs) out.push_back(std::move(*o));
  return out;
}

// Reverse pass. output_grads[j] is dL/d(output j) or nullopt for a task that
// does not contribute. Returns one gradient per parameter in
// visit_model_params order; unreached parameters get zeros.
template <Scalar T>
std::vector<Tensor<T>> backward(
    const MtlModel<T>& model, const ForwardTrace<T>& trace,
    std::span<const std::optional<Tensor<T>>> output_grads) {
  if (output_grads.size() != model.tasks()) {
    throw DimensionError("backward needs one output gradient slot per task");
  }
  std::vector<Tensor<T>> grads = zero_grads(model);

  std::vector<std::size_t> trunk_offsets(model.trunk.size());
  std::size_t offset = 0;
  for (std::size_t i = 0; i < model.trunk.size(); ++i) {
    trunk_offsets[i] = offset;
    offset += layer_param_count(model.trunk[i]);
  }
  std::vector<std::vector<std::size_t>> head_offsets(model.tasks());
  for (std::size_t j = 0; j < model.tasks(); ++j) {
    for (const auto& layer : model.heads[j]) {
      head_offsets[j].push_back(offset);
      offset += layer_param_count(layer);
    }
  }

  std::optional<Tensor<T>> dfeatures;
  for (std::size_t j = 0; j < model.tasks(); ++j) {
    if (!output_grads[j]) continue;
    if (!trace.outputs[j]) {
      throw ArgumentError("head " + std::to_string(j) +
                          " was not run in the forward trace");
    }
    Tensor<T> dy = *output_grads[j];
    for (std::size_t i = model.heads[j].size(); i-- > 0;) {
      LayerBackward<T> lb =
          layer_backward(model.heads[j][i], trace.head_inputs[j][i], dy, true);
      for (std::size_t p = 0; p < lb.param_grads.size(); ++p)
        grads[head_offsets[j][i] + p] = std::move(lb.param_grads[p]);
      dy = std::move(*lb.dx);
    }
    if (dfeatures) {
      axpy(*dfeatures, T{1}, dy);
    } else {
      dfeatures = std::move(dy);
    }
  }
  if (!dfeatures) return grads;

  Tensor<T> dy = std::move(*dfeatures);
  for (std::size_t i = model.trunk.size(); i-- > 0;) {
    LayerBackward<T> lb =
        layer_backward(model.trunk[i], trace.trunk_inputs[i], dy, i > 0);
    for (std::size_t p = 0; p < lb.param_grads.size(); ++p)
      grads[trunk_offsets[i] + p] = std::move(lb.param_grads[p]);
    if (i > 0) dy = std::move(*lb.dx);
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Builders
// ---------------------------------------------------------------------------

// Miniature SegNet-style encoder with dense per-task prediction heads:
// conv blocks with 2x max pooling after the first two, per-task 1x1 conv
// heads followed by two 2x nearest upsamplings back to input resolution.
// When `factorize` is set every trunk conv except the last is factorized.
struct ConvNetSpec {
  std::size_t in_channels = 3;
  std::size_t image_size = 64;
  std::vector<std::size_t> widths{16, 32, 32, 32};
  std::size_t kernel = 3;
  std::vector<LossKind> task_kinds;
  std::vector<std::size_t> head_channels;
  bool factorize = false;
  FactorizeOptions factor_options;
  InitScheme scheme = InitScheme::kKaimingUniform;
  std::uint64_t seed = 0;
};

template <Scalar T>
MtlModel<T> build_conv_mtl(const ConvNetSpec& spec) {
  if (spec.task_kinds.empty() || spec.task_kinds.size() != spec.head_channels.size()) {
    throw ArgumentError("conv net needs one head channel count per task");
  }
  if (spec.widths.empty()) throw ArgumentError("conv net needs at least one block");
  if (spec.image_size % 4 != 0) {
    throw ArgumentError("image size must be divisible by 4, got " +
                        std::to_string(spec.image_size));
  }
  MtlModel<T> model;
  model.input_shape = {spec.in_channels, spec.image_size, spec.image_size};
  model.task_kinds = spec.task_kinds;
  const std::size_t t = spec.task_kinds.size();
  std::size_t c = spec.in_channels;
  const std::size_t pad = spec.kernel / 2;
  for (std::size_t b = 0; b < spec.widths.size(); ++b) {
    const std::size_t w = spec.widths[b];
    Tensor<T> kernel = init_dense<T>({w, c, spec.kernel, spec.kernel}, spec.scheme,
                                     derive_seed(spec.seed, b));
    Tensor<T> bias({w});
    const bool last = b + 1 == spec.widths.size();
    if (spec.factorize && !last) {
      FactorizeOptions fo = spec.factor_options;
      fo.tasks = t;
      fo.scheme = spec.scheme;
      fo.seed = derive_seed(spec.seed, b, 0xfac);
      model.trunk.emplace_back(factorize_conv(kernel, std::optional<Tensor<T>>(bias),
                                              1, pad, fo));
    } else {
      model.trunk.emplace_back(Conv2d<T>{std::move(kernel), std::move(bias), 1, pad});
    }
    model.trunk.emplace_back(Relu{});
    if (b < 2) model.trunk.emplace_back(MaxPool2d{2});
    c = w;
  }
  for (std::size_t j = 0; j < t; ++j) {
    std::vector<Layer<T>> head;
    head.emplace_back(Conv2d<T>{
        init_dense<T>({spec.head_channels[j], c, 1, 1}, spec.scheme,
                      derive_seed(spec.seed, 1000 + j)),
        Tensor<T>({spec.head_channels[j]}), 1, 0});
    const std::size_t pools = std::min<std::size_t>(2, spec.widths.size());
    for (std::size_t u = 0; u < pools; ++u) head.emplace_back(Upsample2d{2});
    model.heads.push_back(std::move(head));
  }
  model.validate();
  return model;
}

// Fully-connected trunk (optionally with ReLU between layers) and one linear
// head per task. When `factorize` is set every trunk layer is factorized.
struct MlpSpec {
  std::size_t input_dim = 8;
  std::vector<std::size_t> hidden{8};
  std::vector<std::size_t> outputs;  // per task
  std::vector<LossKind> task_kinds;
  bool relu = false;
  bool bias = true;
  bool factorize = false;
  FactorizeOptions factor_options;
  InitScheme scheme = InitScheme::kGlorotUniform;
  std::uint64_t seed = 0;
};

template <Scalar T>
MtlModel<T> build_mlp_mtl(const MlpSpec& spec) {
  if (spec.task_kinds.empty() || spec.task_kinds.size() != spec.outputs.size()) {
    throw ArgumentError("mlp needs one output size per task");
  }
  MtlModel<T> model;
  model.input_shape = {spec.input_dim};
  model.task_kinds = spec.task_kinds;
  const std::size_t t = spec.task_kinds.size();
  std::size_t d = spec.input_dim;
  for (std::size_t i = 0; i < spec.hidden.size(); ++i) {
    const std::size_t h = spec.hidden[i];
    Tensor<T> w = init_dense<T>({d, h}, spec.scheme, derive_seed(spec.seed, i));
    std::optional<Tensor<T>> bias;
    if (spec.bias) bias = Tensor<T>({h});
    if (spec.factorize) {
      FactorizeOptions fo = spec.factor_options;
      fo.tasks = t;
      fo.scheme = spec.scheme;
      fo.seed = derive_seed(spec.seed, i, 0xfac);
      model.trunk.emplace_back(factorize_linear(w, std::move(bias), fo));
    } else {
      model.trunk.emplace_back(Linear<T>{std::move(w), std::move(bias)});
    }
    if (spec.relu && i + 1 < spec.hidden.size()) model.trunk.emplace_back(Relu{});
    d = h;
  }
  for (std::size_t j = 0; j < t; ++j) {
    std::optional<Tensor<T>> bias;
    if (spec.bias) bias = Tensor<T>({spec.outputs[j]});
    std::vector<Layer<T>> head;
    head.emplace_back(Linear<T>{init_dense<T>({d, spec.outputs[j]}, spec.scheme,
                                              derive_seed(spec.seed, 1000 + j)),
                                std::move(bias)});
    model.heads.push_back(std::move(head));
  }
  model.validate();
  return model;
}

}  // namespace opmt

#endif  // OPMT_MODEL_HPP_
