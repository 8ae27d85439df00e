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

// opmt: train, evaluate, contract, verify and inspect models from the shell.
// Exit codes: 0 success, 1 domain error, 2 usage error.

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include "opmt/opmt.hpp"

namespace {

constexpr int kDomainError = 1;
constexpr int kUsageError = 2;

struct TrainArgs {
  std::string config;
  std::optional<std::uint64_t> seed, epochs;
  std::optional<std::string> mode, out;
};

struct EvalArgs {
  std::string archive, dataset;
  std::string split = "val";
  std::size_t batch = 16;
};

struct ContractArgs {
  std::string in, out;
};

struct VerifyArgs {
  std::string fac, compact;
  std::size_t samples = 64;
  double tol = 1e-5;
  std::uint64_t seed = 0;
};

int run_train(const TrainArgs& a) {
  opmt::ExperimentConfig cfg = opmt::load_config(a.config);
  if (a.seed) opmt::apply_setting(cfg, "seed", std::to_string(*a.seed));
  if (a.epochs) opmt::apply_setting(cfg, "epochs", std::to_string(*a.epochs));
  if (a.mode) opmt::apply_setting(cfg, "mode", *a.mode);
  if (a.out) opmt::apply_setting(cfg, "out_dir", *a.out);
  const auto result = opmt::run_experiment(cfg, &std::cerr);
  std::cout << opmt::to_json(result).dump(2) << '\n';
  return 0;
}

template <opmt::Scalar T>
int eval_as(const opmt::TensorArchive& ar, const EvalArgs& a) {
  const auto model = opmt::model_from_archive<T>(ar);
  opmt::ExperimentConfig cfg;
  opmt::apply_setting(cfg, "dataset", a.dataset);
  const auto data = opmt::make_dataset<T>(cfg.dataset);
  const auto& set = a.split == "train" ? data.train : data.val;
  if (set.size() == 0) throw opmt::ArgumentError("the " + a.split + " split is empty");
  nlohmann::json out;
  out["samples"] = set.size();
  out["metrics"] = opmt::to_json(opmt::evaluate(model, set, a.batch));
  out["losses"] = opmt::evaluate_losses(model, set, a.batch);
  std::cout << out.dump(2) << '\n';
  return 0;
}

int run_eval(const EvalArgs& a) {
  const auto ar = opmt::load_archive(a.archive);
  if (opmt::model_archive_dtype(ar) == opmt::DType::kFloat64) return eval_as<double>(ar, a);
  return eval_as<float>(ar, a);
}

template <opmt::Scalar T>
int contract_as(const opmt::TensorArchive& ar, const ContractArgs& a) {
  const auto model = opmt::model_from_archive<T>(ar);
  const auto compact = opmt::contract_model(model);
  opmt::save_model(a.out, compact);
  nlohmann::json out;
  out["before"] = opmt::to_json(opmt::count_flops(model, model.input_shape));
  out["after"] = opmt::to_json(opmt::count_flops(compact, compact.input_shape));
  std::cout << out.dump(2) << '\n';
  return 0;
}

int run_contract(const ContractArgs& a) {
  const auto ar = opmt::load_archive(a.in);
  if (opmt::model_archive_dtype(ar) == opmt::DType::kFloat64) return contract_as<double>(ar, a);
  return contract_as<float>(ar, a);
}

template <opmt::Scalar T>
int verify_as(const opmt::TensorArchive& fa, const opmt::TensorArchive& ca,
              const VerifyArgs& a) {
  const auto fac = opmt::model_from_archive<T>(fa);
  const auto compact = opmt::model_from_archive<T>(ca);
  const auto report = opmt::verify_equivalence(fac, compact, a.samples, a.tol, a.seed);
  std::cout << opmt::to_json(report).dump(2) << '\n';
  if (!report.passed) {
    std::cerr << "equivalence check failed: max abs delta " << report.worst_abs
              << " exceeds " << a.tol << '\n';
    return kDomainError;
  }
  return 0;
}

int run_verify(const VerifyArgs& a) {
  const auto fa = opmt::load_archive(a.fac);
  const auto ca = opmt::load_archive(a.compact);
  const auto dtype = opmt::model_archive_dtype(fa);
  if (dtype != opmt::model_archive_dtype(ca))
    throw opmt::StructuralError("archives hold different dtypes");
  if (dtype == opmt::DType::kFloat64) return verify_as<double>(fa, ca, a);
  return verify_as<float>(fa, ca, a);
}

int run_inspect(const std::string& path) {
  const auto ar = opmt::load_archive(path);
  for (const auto& e : ar.entries) {
    std::cout << e.name << '\t' << opmt::dtype_name(opmt::any_dtype(e.tensor)) << '\t'
              << opmt::shape_string(opmt::any_shape(e.tensor)) << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Overparameterized multitask models: train, contract, verify"};
  app.require_subcommand(1, 1);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Run an experiment from a config file");
  train->add_option("config", ta.config, "Config file (key = value lines)")->required();
  train->add_option("--seed", ta.seed, "Override the training seed");
  train->add_option("--mode", ta.mode, "Override the mode list (comma separated)");
  train->add_option("--epochs", ta.epochs, "Override the epoch count");
  train->add_option("--out", ta.out, "Override the output directory");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Evaluate a model archive on a generated dataset");
  eval->add_option("archive", ea.archive, "Model archive")->required();
  eval->add_option("dataset", ea.dataset,
                   "Dataset spec, e.g. \"shapes train=0 val=100 size=64 classes=4\"")
      ->required();
  eval->add_option("--split", ea.split, "train or val")->check(CLI::IsMember({"train", "val"}));
  eval->add_option("--batch", ea.batch, "Evaluation batch size")->check(CLI::PositiveNumber);

  ContractArgs ca;
  auto* contract = app.add_subcommand("contract", "Multiply factorized layers into plain ones");
  contract->add_option("in", ca.in, "Factorized model archive")->required();
  contract->add_option("out", ca.out, "Output archive")->required();

  VerifyArgs va;
  auto* verify = app.add_subcommand("verify", "Compare a factorized model with its contraction");
  verify->add_option("fac", va.fac, "Factorized model archive")->required();
  verify->add_option("compact", va.compact, "Contracted model archive")->required();
  verify->add_option("--samples", va.samples, "Random inputs to compare");
  verify->add_option("--tol", va.tol, "Max-abs tolerance")->check(CLI::NonNegativeNumber);
  verify->add_option("--seed", va.seed, "Seed for the random inputs");

  std::string inspect_path;
  auto* inspect = app.add_subcommand("inspect", "List the tensors in an archive");
  inspect->add_option("archive", inspect_path, "Archive file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return kUsageError;
  }

  try {
    if (*train) return run_train(ta);
    if (*eval) return run_eval(ea);
    if (*contract) return run_contract(ca);
    if (*verify) return run_verify(va);
    if (*inspect) return run_inspect(inspect_path);
  } catch (const opmt::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kDomainError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kDomainError;
  }
  return kUsageError;
}
