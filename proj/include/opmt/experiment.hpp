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

#ifndef OPMT_EXPERIMENT_HPP_
#define OPMT_EXPERIMENT_HPP_

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "opmt/datasets.hpp"
#include "opmt/metrics.hpp"
#include "opmt/model_io.hpp"
#include "opmt/trainer.hpp"

namespace opmt {

// `dataset = shapes train=500 val=100 size=64 classes=4 seed=0`
// `dataset = linear-teacher train=256 val=64 input=8 output=4 tasks=2 rank=4 noise=0.01`
struct DatasetConfig {
  std::string kind = "shapes";
  std::size_t n_train = 500;
  std::size_t n_val = 100;
  std::size_t image_size = 64;
  std::size_t num_classes = 4;
  std::uint64_t seed = 0;
  std::size_t input_dim = 8;
  std::size_t output_dim = 4;
  std::size_t tasks = 2;
  std::size_t rank = 4;
  double noise = 0.01;
};

// `model = convnet widths=16,32,32,32 kernel=3 rank_extra=0`
// `model = mlp hidden=16,16 relu=1 rank_extra=0`
struct ModelConfig {
  std::string kind = "convnet";
  std::vector<std::size_t> widths{16, 32, 32, 32};
  std::size_t kernel = 3;
  std::vector<std::size_t> hidden{16};
  bool relu = true;
  std::size_t rank_extra = 0;
};

struct ExperimentConfig {
  TrainConfig train;
  std::vector<TrainMode> modes{TrainMode::kFac};
  DatasetConfig dataset;
  ModelConfig model;
  std::filesystem::path out_dir = "runs/experiment";
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, sep);) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

class ValueParser {
 public:
  ValueParser(std::string key, std::size_t line) : key_(std::move(key)), line_(line) {}

  [[noreturn]] void fail(const std::string& why) const {
    throw ConfigError(
        (line_ ? "line " + std::to_string(line_) + ": " : std::string()) + "'" + key_ + "': " + why,
        key_, line_);
  }

  double real(const std::string& v) const {
    std::size_t used = 0;
    double d = 0;
    try {
      d = std::stod(v, &used);
    } catch (const std::exception&) {
      fail("expected a number, got '" + v + "'");
    }
    if (used != v.size() || !std::isfinite(d)) fail("expected a number, got '" + v + "'");
    return d;
  }

  std::uint64_t count(const std::string& v) const {
    if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos)
      fail("expected a non-negative integer, got '" + v + "'");
    try {
      return std::stoull(v);
    } catch (const std::exception&) {
      fail("integer out of range: '" + v + "'");
    }
  }

  std::vector<std::size_t> counts(const std::string& v) const {
    std::vector<std::size_t> out;
    for (const auto& p : split(v, ',')) out.push_back(count(p));
    if (out.empty()) fail("expected a comma-separated list of integers");
    return out;
  }

  bool flag(const std::string& v) const {
    if (v == "1" || v == "true" || v == "yes") return true;
    if (v == "0" || v == "false" || v == "no") return false;
    fail("expected a boolean, got '" + v + "'");
  }

  template <typename F>
  auto wrap(F&& f) const {
    try {
      return f();
    } catch (const ConfigError&) {
      throw;
    } catch (const Error& e) {
      fail(e.what());
    }
  }

 private:
  std::string key_;
  std::size_t line_;
};

// "kind opt=value opt=value"
template <typename Apply>
std::string parse_spec(const std::string& value, const ValueParser& vp, Apply&& apply) {
  const auto parts = split(value, ' ');
  if (parts.empty()) vp.fail("empty value");
  for (std::size_t i = 1; i < parts.size(); ++i) {
    const auto eq = parts[i].find('=');
    if (eq == std::string::npos) vp.fail("expected option=value, got '" + parts[i] + "'");
    apply(parts[i].substr(0, eq), parts[i].substr(eq + 1));
  }
  return parts[0];
}

}  // namespace detail

// Applies one `key = value` setting. line is 0 for settings that do not come
// from a file (command-line overrides).
inline void apply_setting(ExperimentConfig& cfg, const std::string& key,
                          const std::string& value, std::size_t line = 0) {
  const detail::ValueParser vp(key, line);
  TrainConfig& t = cfg.train;
  if (key == "epochs") t.epochs = vp.count(value);
  else if (key == "batch_size") t.batch_size = vp.count(value);
  else if (key == "lr") t.lr = vp.real(value);
  else if (key == "lr_diag") t.lr_diag = vp.real(value);
  else if (key == "optimizer") t.optimizer = vp.wrap([&] { return optimizer_from_name(value); });
  else if (key == "momentum") t.momentum = vp.real(value);
  else if (key == "weight_decay") t.weight_decay = vp.real(value);
  else if (key == "frobenius_decay") t.frobenius_decay = vp.real(value);
  else if (key == "frobenius_form") {
    if (value == "product") t.frobenius_form = FrobeniusForm::kProduct;
    else if (value == "per-factor") t.frobenius_form = FrobeniusForm::kPerFactor;
    else vp.fail("expected product or per-factor, got '" + value + "'");
  } else if (key == "subset_fraction") t.subset_fraction = vp.real(value);
  else if (key == "loss_weights") {
    t.loss_weights.clear();
    if (value != "equal")
      for (const auto& p : detail::split(value, ',')) t.loss_weights.push_back(vp.real(p));
  } else if (key == "mode") {
    cfg.modes.clear();
    for (const auto& m : detail::split(value, ','))
      cfg.modes.push_back(vp.wrap([&] { return train_mode_from_name(m); }));
    if (cfg.modes.empty()) vp.fail("no mode given");
  } else if (key == "init") {
    if (value == "spectral") t.init = FactorInit::kSpectral;
    else if (value == "identity-diag") t.init = FactorInit::kIdentityDiag;
    else vp.fail("expected spectral or identity-diag, got '" + value + "'");
  } else if (key == "seed") t.seed = vp.count(value);
  else if (key == "lr_halving_epoch" || key == "lr_schedule") {
    if (value == "none") t.lr_halving_epoch.reset();
    else t.lr_halving_epoch = vp.count(value);
  } else if (key == "alternation") {
    if (value == "per-epoch") t.alternation = Alternation::kPerEpoch;
    else if (value == "per-batch") t.alternation = Alternation::kPerBatch;
    else vp.fail("expected per-epoch or per-batch, got '" + value + "'");
  } else if (key == "patience") t.patience = vp.count(value);
  else if (key == "out_dir") cfg.out_dir = value;
  else if (key == "dataset") {
    DatasetConfig d;
    d.kind = detail::parse_spec(value, vp, [&](const std::string& k, const std::string& v) {
      if (k == "train") d.n_train = vp.count(v);
      else if (k == "val") d.n_val = vp.count(v);
      else if (k == "size") d.image_size = vp.count(v);
      else if (k == "classes") d.num_classes = vp.count(v);
      else if (k == "seed") d.seed = vp.count(v);
      else if (k == "input") d.input_dim = vp.count(v);
      else if (k == "output") d.output_dim = vp.count(v);
      else if (k == "tasks") d.tasks = vp.count(v);
      else if (k == "rank") d.rank = vp.count(v);
      else if (k == "noise") d.noise = vp.real(v);
      else vp.fail("unknown dataset option '" + k + "'");
    });
    if (d.kind != "shapes" && d.kind != "linear-teacher")
      vp.fail("unknown dataset '" + d.kind + "' (expected shapes or linear-teacher)");
    cfg.dataset = d;
  } else if (key == "model") {
    ModelConfig m;
    m.kind = detail::parse_spec(value, vp, [&](const std::string& k, const std::string& v) {
      if (k == "widths") m.widths = vp.counts(v);
      else if (k == "kernel") m.kernel = vp.count(v);
      else if (k == "hidden") m.hidden = vp.counts(v);
      else if (k == "relu") m.relu = vp.flag(v);
      else if (k == "rank_extra") m.rank_extra = vp.count(v);
      else vp.fail("unknown model option '" + k + "'");
    });
    if (m.kind != "convnet" && m.kind != "mlp")
      vp.fail("unknown model '" + m.kind + "' (expected convnet or mlp)");
    cfg.model = m;
  } else {
    throw ConfigError(
        (line ? "line " + std::to_string(line) + ": " : std::string()) + "unknown key '" + key + "'",
        key, line);
  }
}

inline ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig cfg;
  std::istringstream in(text);
  std::map<std::string, std::size_t> seen;
  std::size_t line_no = 0;
  for (std::string raw; std::getline(in, raw);) {
    ++line_no;
    const auto hash = raw.find('#');
    const std::string line = detail::trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected key = value", "", line_no);
    }
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (auto it = seen.find(key); it != seen.end()) {
      throw ConfigError("line " + std::to_string(line_no) + ": '" + key +
                            "' already set on line " + std::to_string(it->second),
                        key, line_no);
    }
    seen[key] = line_no;
    apply_setting(cfg, key, value, line_no);
  }
  return cfg;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config '" + path.string() + "'", "", 0);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

// ---------------------------------------------------------------------------
// Runner
// ---------------------------------------------------------------------------

template <Scalar T>
DatasetSplit<T> make_dataset(const DatasetConfig& d) {
  if (d.kind == "shapes") {
    return gen_shapes_dataset<T>(d.n_train, d.n_val, d.image_size, d.num_classes, d.seed);
  }
  LinearTeacherSpec spec;
  spec.n = d.n_train + d.n_val;
  spec.input_dim = d.input_dim;
  spec.output_dim = d.output_dim;
  spec.tasks = d.tasks;
  spec.rank = d.rank;
  spec.noise = d.noise;
  spec.seed = d.seed;
  auto teacher = gen_linear_teacher<T>(spec);
  DatasetSplit<T> out;
  out.train.task_kinds = out.val.task_kinds = teacher.data.task_kinds;
  for (std::size_t i = 0; i < spec.n; ++i)
    (i < d.n_train ? out.train : out.val).samples.push_back(std::move(teacher.data.samples[i]));
  return out;
}

template <Scalar T>
MtlModel<T> make_model(const ModelConfig& m, const MultitaskDataset<T>& data, bool factorize,
                       FactorInit init, std::uint64_t seed) {
  if (data.size() == 0) throw ArgumentError("cannot size a model from an empty dataset");
  FactorizeOptions fo;
  fo.rank_extra = m.rank_extra;
  fo.init = init;
  const auto& first = data.samples.front();
  if (m.kind == "convnet") {
    if (first.input.rank() != 3) throw ArgumentError("convnet needs image inputs");
    ConvNetSpec spec;
    spec.in_channels = first.input.dim(0);
    spec.image_size = first.input.dim(1);
    spec.widths = m.widths;
    spec.kernel = m.kernel;
    spec.task_kinds = data.task_kinds;
    for (std::size_t j = 0; j < data.tasks(); ++j) {
      spec.head_channels.push_back(data.task_kinds[j] == LossKind::kSoftmaxCrossEntropy
                                       ? data.num_classes
                                       : first.targets[j].dim(0));
    }
    spec.factorize = factorize;
    spec.factor_options = fo;
    spec.seed = seed;
    return build_conv_mtl<T>(spec);
  }
  if (first.input.rank() != 1) throw ArgumentError("mlp needs vector inputs");
  MlpSpec spec;
  spec.input_dim = first.input.dim(0);
  spec.hidden = m.hidden;
  spec.relu = m.relu;
  spec.task_kinds = data.task_kinds;
  for (const auto& t : first.targets) spec.outputs.push_back(t.size());
  spec.factorize = factorize;
  spec.factor_options = fo;
  spec.seed = seed;
  return build_mlp_mtl<T>(spec);
}

struct ModeResult {
  TrainMode mode = TrainMode::kFac;
  MetricReport metrics;           // final validation metrics
  std::vector<double> val_losses;
  std::size_t epochs_run = 0;
  CostReport training_cost;
  CostReport inference_cost;      // contracted model
  EquivalenceReport equivalence;
  double wall_ms = 0.0;
};

struct ExperimentResult {
  std::vector<ModeResult> rows;
};

inline nlohmann::json to_json(const ModeResult& r) {
  return {{"mode", train_mode_name(r.mode)},
          {"metrics", to_json(r.metrics)},
          {"val_losses", r.val_losses},
          {"epochs_run", r.epochs_run},
          {"training_params", r.training_cost.param_count},
          {"inference_params", r.inference_cost.param_count},
          {"inference_flops", r.inference_cost.flops},
          {"equivalence_max_abs", r.equivalence.worst_abs},
          {"equivalence_passed", r.equivalence.passed},
          {"wall_ms", r.wall_ms}};
}

inline nlohmann::json to_json(const ExperimentResult& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows) rows.push_back(to_json(row));
  return {{"rows", rows}};
}

// Trains every configured mode on the same data. Per mode, out_dir/<mode>/
// receives metrics.jsonl, model.opmt, contracted.opmt and equivalence.json;
// out_dir/results.json gathers the table.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, std::ostream* log = nullptr) {
  using T = float;
  const DatasetSplit<T> data = make_dataset<T>(cfg.dataset);
  std::filesystem::create_directories(cfg.out_dir);
  ExperimentResult result;
  for (TrainMode mode : cfg.modes) {
    const auto start = std::chrono::steady_clock::now();
    TrainConfig tc = cfg.train;
    tc.mode = mode;
    const bool factorize = mode != TrainMode::kBaseline;
    MtlModel<T> model = make_model<T>(cfg.model, data.train, factorize, tc.init, tc.seed);
    const auto dir = cfg.out_dir / train_mode_name(mode);
    std::filesystem::create_directories(dir);
    std::ofstream metrics(dir / "metrics.jsonl", std::ios::trunc);
    if (!metrics) throw Error("cannot write metrics under '" + dir.string() + "'");

    ModeResult row;
    row.mode = mode;
    row.training_cost = count_flops(model, model.input_shape);
    const auto reports = fit<T>(model, data.train, tc, &data.val, [&](const EpochReport& r) {
      nlohmann::json line = to_json(r);
      line["mode"] = train_mode_name(mode);
      if (data.val.size() > 0) line["val_metrics"] = to_json(evaluate(model, data.val));
      metrics << line.dump() << '\n';
      metrics.flush();
      if (log) *log << train_mode_name(mode) << ' ' << line.dump() << '\n';
    });
    row.epochs_run = reports.size();
    if (!reports.empty()) row.val_losses = reports.back().val_losses;
    if (data.val.size() > 0) row.metrics = evaluate(model, data.val);

    const MtlModel<T> compact = contract_model(model);
    save_model(dir / "model.opmt", model);
    save_model(dir / "contracted.opmt", compact);
    row.inference_cost = count_flops(compact, compact.input_shape);
    row.equivalence = verify_equivalence(model, compact, 16, 1e-5, tc.seed);
    std::ofstream(dir / "equivalence.json") << to_json(row.equivalence).dump(2) << '\n';
    row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                            start)
                      .count();
    result.rows.push_back(std::move(row));
  }
  std::ofstream(cfg.out_dir / "results.json") << to_json(result).dump(2) << '\n';
  return result;
}

}  // namespace opmt

#endif  // OPMT_EXPERIMENT_HPP_
