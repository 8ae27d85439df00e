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

#ifndef OPMT_MODEL_IO_HPP_
#define OPMT_MODEL_IO_HPP_

#include <chrono>
#include <cmath>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "opmt/archive.hpp"
#include "opmt/model.hpp"

namespace opmt {

// ---------------------------------------------------------------------------
// Model <-> archive
// ---------------------------------------------------------------------------
//
// Parameters use their visit names ("trunk.0.fac_conv.u", "head.1.0.conv.bias").
// Layers also get a float64 "<prefix>.config" entry: [stride, padding] for
// convolutions, [size] for pooling, [factor] for upsampling, [0] for ReLU.
// "model.tasks" holds loss-kind codes and "model.input_shape" the per-sample
// input shape.

namespace detail {

template <Scalar T>
std::optional<Tensor<double>> layer_config(const Layer<T>& layer) {
  return std::visit(
      [](const auto& l) -> std::optional<Tensor<double>> {
        using L = std::remove_cvref_t<decltype(l)>;
        if constexpr (std::is_same_v<L, Conv2d<T>> || std::is_same_v<L, FactorizedConv2d<T>>)
          return Tensor<double>({2}, {static_cast<double>(l.stride),
                                      static_cast<double>(l.padding)});
        else if constexpr (std::is_same_v<L, MaxPool2d>)
          return Tensor<double>({1}, {static_cast<double>(l.size)});
        else if constexpr (std::is_same_v<L, Upsample2d>)
          return Tensor<double>({1}, {static_cast<double>(l.factor)});
        else if constexpr (std::is_same_v<L, Relu>)
          return Tensor<double>({1}, {0.0});
        else
          return std::nullopt;
      },
      layer);
}

inline Tensor<double> index_vector(const std::vector<std::size_t>& v) {
  Tensor<double> t({v.size()});
  for (std::size_t i = 0; i < v.size(); ++i) t[i] = static_cast<double>(v[i]);
  return t;
}

inline std::vector<std::size_t> to_indices(const Tensor<double>& t, const std::string& what) {
  std::vector<std::size_t> out;
  for (double v : t.data()) {
    if (!(v >= 0) || v != std::floor(v) || v > 1e15) {
      throw FormatError(what + " holds a non-integral value");
    }
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

}  // namespace detail

template <Scalar T>
TensorArchive model_to_archive(const MtlModel<T>& model) {
  TensorArchive ar;
  std::vector<std::size_t> codes;
  for (LossKind k : model.task_kinds) codes.push_back(static_cast<std::size_t>(k));
  ar.entries.push_back({"model.tasks", detail::index_vector(codes)});
  ar.entries.push_back({"model.input_shape", detail::index_vector(model.input_shape)});
  auto emit = [&](const std::vector<Layer<T>>& layers, bool in_head, std::size_t head) {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const std::string prefix =
          layer_prefix(in_head, head, i) + "." + layer_kind(layers[i]) + ".";
      visit_layer_params(layers[i], [&](const std::string& field, const Tensor<T>& t,
                                        ParamKind, std::size_t) {
        ar.entries.push_back({prefix + field, t});
      });
      if (auto cfg = detail::layer_config(layers[i])) ar.entries.push_back({prefix + "config", *cfg});
    }
  };
  emit(model.trunk, false, 0);
  for (std::size_t j = 0; j < model.heads.size(); ++j) emit(model.heads[j], true, j);
  return ar;
}

namespace detail {

struct LayerRecord {
  std::string kind;
  std::map<std::string, const AnyTensor*> fields;
};

template <Scalar T>
const Tensor<T>& field_tensor(const LayerRecord& rec, const std::string& field,
                              const std::string& where) {
  auto it = rec.fields.find(field);
  if (it == rec.fields.end()) throw FormatError(where + " is missing '" + field + "'");
  if (!std::holds_alternative<Tensor<T>>(*it->second)) {
    throw FormatError(where + "." + field + " has dtype " +
                      dtype_name(any_dtype(*it->second)) + ", expected " +
                      dtype_name(dtype_of<T>()));
  }
  return std::get<Tensor<T>>(*it->second);
}

template <Scalar T>
Layer<T> build_layer(const LayerRecord& rec, const std::string& where) {
  auto config = [&](std::size_t n) {
    const auto v = to_indices(field_tensor<double>(rec, "config", where), where + ".config");
    if (v.size() != n) throw FormatError(where + ".config has the wrong length");
    return v;
  };
  auto opt_bias = [&]() -> std::optional<Tensor<T>> {
    if (rec.fields.count("bias")) return field_tensor<T>(rec, "bias", where);
    return std::nullopt;
  };
  auto diags = [&] {
    std::vector<Tensor<T>> d;
    while (rec.fields.count("diag." + std::to_string(d.size())))
      d.push_back(field_tensor<T>(rec, "diag." + std::to_string(d.size()), where));
    return d;
  };
  Layer<T> out = Relu{};
  if (rec.kind == "linear") {
    out = Linear<T>{field_tensor<T>(rec, "weight", where), opt_bias()};
  } else if (rec.kind == "conv") {
    const auto c = config(2);
    out = Conv2d<T>{field_tensor<T>(rec, "weight", where), opt_bias(), c[0], c[1]};
  } else if (rec.kind == "fac_linear") {
    out = FactorizedLinear<T>{field_tensor<T>(rec, "u", where), diags(),
                              field_tensor<T>(rec, "v", where), opt_bias()};
  } else if (rec.kind == "fac_conv") {
    const auto c = config(2);
    out = FactorizedConv2d<T>{field_tensor<T>(rec, "u", where), diags(),
                              field_tensor<T>(rec, "v", where), opt_bias(), c[0], c[1]};
  } else if (rec.kind == "relu") {
    out = Relu{};
  } else if (rec.kind == "maxpool") {
    out = MaxPool2d{config(1)[0]};
  } else if (rec.kind == "upsample") {
    out = Upsample2d{config(1)[0]};
  } else {
    throw FormatError("unknown layer kind '" + rec.kind + "' at " + where);
  }
  return out;
}

}  // namespace detail

template <Scalar T>
MtlModel<T> model_from_archive(const TensorArchive& ar) {
  const ArchiveEntry* tasks = ar.find("model.tasks");
  const ArchiveEntry* input = ar.find("model.input_shape");
  if (!tasks || !input) throw FormatError("archive does not describe a model");
  auto as_f64 = [](const ArchiveEntry& e) -> const Tensor<double>& {
    if (!std::holds_alternative<Tensor<double>>(e.tensor))
      throw FormatError(e.name + " must be float64");
    return std::get<Tensor<double>>(e.tensor);
  };
  MtlModel<T> model;
  for (std::size_t code : detail::to_indices(as_f64(*tasks), "model.tasks")) {
    if (code > static_cast<std::size_t>(LossKind::kMse))
      throw FormatError("unknown task kind code " + std::to_string(code));
    model.task_kinds.push_back(static_cast<LossKind>(code));
  }
  model.input_shape = detail::to_indices(as_f64(*input), "model.input_shape");

  // (in_head, head, index) -> record
  std::map<std::tuple<bool, std::size_t, std::size_t>, detail::LayerRecord> layers;
  for (const auto& e : ar.entries) {
    if (e.name.rfind("model.", 0) == 0) continue;
    std::vector<std::string> parts;
    std::size_t start = 0;
    for (std::size_t dot; (dot = e.name.find('.', start)) != std::string::npos; start = dot + 1)
      parts.push_back(e.name.substr(start, dot - start));
    parts.push_back(e.name.substr(start));
    auto number = [&](const std::string& s) {
      if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos)
        throw FormatError("malformed entry name '" + e.name + "'");
      return static_cast<std::size_t>(std::stoull(s));
    };
    bool in_head;
    std::size_t head = 0, index, kind_at;
    if (parts.size() >= 4 && parts[0] == "trunk") {
      in_head = false;
      index = number(parts[1]);
      kind_at = 2;
    } else if (parts.size() >= 5 && parts[0] == "head") {
      in_head = true;
      head = number(parts[1]);
      index = number(parts[2]);
      kind_at = 3;
    } else {
      throw FormatError("malformed entry name '" + e.name + "'");
    }
    auto& rec = layers[{in_head, head, index}];
    if (!rec.kind.empty() && rec.kind != parts[kind_at])
      throw FormatError("conflicting layer kinds at '" + e.name + "'");
    rec.kind = parts[kind_at];
    std::string field = parts[kind_at + 1];
    for (std::size_t p = kind_at + 2; p < parts.size(); ++p) field += "." + parts[p];
    rec.fields[field] = &e.tensor;
  }

  model.heads.resize(model.task_kinds.size());
  for (const auto& [key, rec] : layers) {
    const auto [in_head, head, index] = key;
    const std::string where = layer_prefix(in_head, head, index) + "." + rec.kind;
    if (in_head && head >= model.heads.size())
      throw FormatError("entry for head " + std::to_string(head) + " beyond the task count");
    auto& dst = in_head ? model.heads[head] : model.trunk;
    if (index != dst.size()) throw FormatError("missing layer before " + where);
    dst.push_back(detail::build_layer<T>(rec, where));
  }
  try {
    model.validate();
  } catch (const Error& e) {
    throw FormatError(std::string("archive holds an invalid model: ") + e.what());
  }
  return model;
}

template <Scalar T>
void save_model(const std::filesystem::path& path, const MtlModel<T>& model) {
  save_archive(path, model_to_archive(model));
}

// Scalar type of a model archive (taken from its first parameter).
inline DType model_archive_dtype(const TensorArchive& ar) {
  for (const auto& e : ar.entries)
    if (e.name.rfind("model.", 0) != 0 && e.name.find(".config") == std::string::npos)
      return any_dtype(e.tensor);
  return DType::kFloat32;
}

// ---------------------------------------------------------------------------
// Contraction and cost accounting
// ---------------------------------------------------------------------------

template <Scalar T>
Layer<T> contract_layer(const Layer<T>& layer) {
  return std::visit(
      [](const auto& l) -> Layer<T> {
        using L = std::remove_cvref_t<decltype(l)>;
        if constexpr (std::is_same_v<L, FactorizedLinear<T>>)
          return Linear<T>{contract_linear(l), l.bias};
        else if constexpr (std::is_same_v<L, FactorizedConv2d<T>>)
          return Conv2d<T>{contract_conv(l), l.bias, l.stride, l.padding};
        else
          return l;
      },
      layer);
}

// Every factorized layer replaced by the plain layer holding its contracted
// weight; heads are copied as they are.
template <Scalar T>
MtlModel<T> contract_model(const MtlModel<T>& model) {
  MtlModel<T> out = model;
  for (auto& layer : out.trunk) layer = contract_layer(layer);
  return out;
}

struct LayerCost {
  std::string name;  // "trunk.3.fac_conv"
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
};

struct CostReport {
  std::uint64_t param_count = 0;
  std::uint64_t flops = 0;  // one sample, 2 x multiply-accumulates
  std::vector<LayerCost> layers;
};

namespace detail {

// Factorized layers are charged the FLOPs of their contracted operator, which
// is how both training and inference evaluate them.
template <Scalar T>
std::uint64_t layer_flops(const Layer<T>& layer, const Shape& out) {
  return std::visit(
      [&](const auto& l) -> std::uint64_t {
        using L = std::remove_cvref_t<decltype(l)>;
        if constexpr (std::is_same_v<L, Linear<T>>)
          return 2ull * l.weight.dim(0) * l.weight.dim(1);
        else if constexpr (std::is_same_v<L, FactorizedLinear<T>>)
          return 2ull * l.in_features() * l.out_features();
        else if constexpr (std::is_same_v<L, Conv2d<T>>)
          return 2ull * l.weight.size() * out[1] * out[2];
        else if constexpr (std::is_same_v<L, FactorizedConv2d<T>>)
          return 2ull * l.out_channels() * l.in_channels() * l.kernel() * l.kernel() * out[1] *
                 out[2];
        else
          return 0;
      },
      layer);
}

template <Scalar T>
std::uint64_t layer_params(const Layer<T>& layer) {
  std::uint64_t n = 0;
  visit_layer_params(layer, [&](const std::string&, const Tensor<T>& t, ParamKind,
                                std::size_t) { n += t.size(); });
  return n;
}

template <Scalar T>
CostReport model_costs(const MtlModel<T>& model, const Shape* input) {
  CostReport report;
  auto walk = [&](const std::vector<Layer<T>>& layers, bool in_head, std::size_t head,
                  Shape shape) {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      LayerCost c{layer_prefix(in_head, head, i) + "." + layer_kind(layers[i]),
                  layer_params(layers[i]), 0};
      if (input) {
        shape = layer_output_shape(layers[i], shape);
        c.flops = layer_flops(layers[i], shape);
      }
      report.param_count += c.params;
      report.flops += c.flops;
      report.layers.push_back(std::move(c));
    }
    return shape;
  };
  const Shape features = walk(model.trunk, false, 0, input ? *input : Shape{});
  for (std::size_t j = 0; j < model.heads.size(); ++j) walk(model.heads[j], true, j, features);
  return report;
}

}  // namespace detail

// Stored scalars per layer; a factorized layer counts its training-time
// factors m r + t r + r n (+ bias).
template <Scalar T>
CostReport count_params(const MtlModel<T>& model) {
  return detail::model_costs(model, nullptr);
}

// Parameters plus per-sample FLOPs for a per-sample input shape.
template <Scalar T>
CostReport count_flops(const MtlModel<T>& model, const Shape& input_shape) {
  return detail::model_costs(model, &input_shape);
}

inline nlohmann::json to_json(const CostReport& r) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : r.layers)
    layers.push_back({{"name", l.name}, {"params", l.params}, {"flops", l.flops}});
  return {{"param_count", r.param_count}, {"flops", r.flops}, {"layers", layers}};
}

// ---------------------------------------------------------------------------
// Equivalence verification
// ---------------------------------------------------------------------------

struct EquivalenceReport {
  bool passed = true;
  std::size_t n_samples = 0;
  double tol = 0.0;
  std::vector<double> max_abs;  // per task
  std::vector<double> max_rel;  // per task, max |a - b| / max |b|
  double worst_abs = 0.0;
  std::size_t worst_task = 0;
  std::size_t worst_sample = 0;
  std::size_t worst_index = 0;  // flat index inside that sample's output
  std::string warning;
};

namespace detail {

// Plain and factorized variants of the same operator count as one family.
inline std::string layer_family(const std::string& kind) {
  if (kind == "fac_linear") return "linear";
  if (kind == "fac_conv") return "conv";
  return kind;
}

template <Scalar T>
void require_same_topology(const MtlModel<T>& a, const MtlModel<T>& b) {
  auto fail = [](const std::string& why) { throw StructuralError("topology mismatch: " + why); };
  if (a.input_shape != b.input_shape) fail("input shapes differ");
  if (a.task_kinds != b.task_kinds) fail("task kinds differ");
  auto same_layers = [&](const std::vector<Layer<T>>& x, const std::vector<Layer<T>>& y,
                         const std::string& where) {
    if (x.size() != y.size()) fail(where + " has " + std::to_string(x.size()) + " vs " +
                                   std::to_string(y.size()) + " layers");
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (layer_family(layer_kind(x[i])) != layer_family(layer_kind(y[i])))
        fail(where + "." + std::to_string(i) + " is " + layer_kind(x[i]) + " vs " +
             layer_kind(y[i]));
    }
  };
  same_layers(a.trunk, b.trunk, "trunk");
  for (std::size_t j = 0; j < a.heads.size(); ++j)
    same_layers(a.heads[j], b.heads[j], "head." + std::to_string(j));
}

}  // namespace detail

// Runs the same random inputs through both models (the first in factorized
// form) and compares every task output.
template <Scalar T>
EquivalenceReport verify_equivalence(const MtlModel<T>& fac_model,
                                     const MtlModel<T>& compact_model,
                                     std::size_t n_samples, double tol,
                                     std::uint64_t seed = 0) {
  fac_model.validate();
  compact_model.validate();
  detail::require_same_topology(fac_model, compact_model);
  EquivalenceReport rep;
  rep.n_samples = n_samples;
  rep.tol = tol;
  rep.max_abs.assign(fac_model.tasks(), 0.0);
  rep.max_rel.assign(fac_model.tasks(), 0.0);
  if (n_samples == 0) {
    rep.warning = "no samples compared; the check is vacuous";
    return rep;
  }
  std::vector<double> ref_scale(fac_model.tasks(), 0.0);
  Rng rng(derive_seed(seed, 0xe0));
  constexpr std::size_t kChunk = 8;
  for (std::size_t start = 0; start < n_samples; start += kChunk) {
    const std::size_t b = std::min(kChunk, n_samples - start);
    Shape shape{b};
    shape.insert(shape.end(), fac_model.input_shape.begin(), fac_model.input_shape.end());
    const Tensor<T> x = random_normal<T>(shape, rng);
    auto ya = forward(fac_model, x, ForwardMode::kFactorized);
    auto yb = forward(compact_model, x, ForwardMode::kContracted);
    for (std::size_t j = 0; j < ya.size(); ++j) {
      if (ya[j].shape() != yb[j].shape()) {
        throw StructuralError("task " + std::to_string(j) + " output shapes differ: " +
                              shape_string(ya[j].shape()) + " vs " +
                              shape_string(yb[j].shape()));
      }
      const std::size_t per = ya[j].size() / b;
      for (std::size_t i = 0; i < ya[j].size(); ++i) {
        double d = std::abs(static_cast<double>(ya[j][i]) - yb[j][i]);
        if (std::isnan(d)) d = INFINITY;
        ref_scale[j] = std::max(ref_scale[j], std::abs(static_cast<double>(yb[j][i])));
        rep.max_abs[j] = std::max(rep.max_abs[j], d);
        if (d > rep.worst_abs) {
          rep.worst_abs = d;
          rep.worst_task = j;
          rep.worst_sample = start + i / per;
          rep.worst_index = i % per;
        }
      }
    }
  }
  for (std::size_t j = 0; j < rep.max_abs.size(); ++j) {
    rep.max_rel[j] = rep.max_abs[j] / std::max(ref_scale[j], 1e-30);
  }
  rep.passed = rep.worst_abs <= tol;
  return rep;
}

inline nlohmann::json to_json(const EquivalenceReport& r) {
  nlohmann::json j{{"passed", r.passed},       {"n_samples", r.n_samples},
                   {"tol", r.tol},             {"max_abs", r.max_abs},
                   {"max_rel", r.max_rel},     {"worst_abs", r.worst_abs},
                   {"worst_task", r.worst_task}, {"worst_sample", r.worst_sample},
                   {"worst_index", r.worst_index}};
  if (!r.warning.empty()) j["warning"] = r.warning;
  return j;
}

// Mean wall-clock of a batch forward pass; machine dependent.
template <Scalar T>
double measure_latency_ms(const MtlModel<T>& model, std::size_t batch = 1,
                          std::size_t runs = 100) {
  Shape shape{batch};
  shape.insert(shape.end(), model.input_shape.begin(), model.input_shape.end());
  Rng rng(1);
  const Tensor<T> x = random_normal<T>(shape, rng);
  forward(model, x);
  const auto start = std::chrono::steady_clock::now();
  for (std::size_t r = 0; r < runs; ++r) forward(model, x);
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start)
             .count() /
         static_cast<double>(std::max<std::size_t>(runs, 1));
}

}  // namespace opmt

#endif  // OPMT_MODEL_IO_HPP_
