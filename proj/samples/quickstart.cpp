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

// Train a factorized two-task regressor, contract it, and check that the
// contracted model computes the same function at the cost of a plain one.

#include <iostream>

#include "opmt/opmt.hpp"

int main() {
  using namespace opmt;

  LinearTeacherSpec teacher_spec;
  teacher_spec.n = 512;
  teacher_spec.input_dim = 10;
  teacher_spec.output_dim = 3;
  teacher_spec.tasks = 2;
  teacher_spec.rank = 4;
  teacher_spec.noise = 0.01;
  auto teacher = gen_linear_teacher<float>(teacher_spec);

  MlpSpec spec;
  spec.input_dim = teacher_spec.input_dim;
  spec.hidden = {16, 16};
  spec.relu = true;
  spec.outputs.assign(teacher_spec.tasks, teacher_spec.output_dim);
  spec.task_kinds.assign(teacher_spec.tasks, LossKind::kMse);
  spec.factorize = true;
  MtlModel<float> model = build_mlp_mtl<float>(spec);

  TrainConfig cfg;
  cfg.mode = TrainMode::kFac;
  cfg.epochs = 20;
  cfg.batch_size = 16;
  cfg.lr = 5e-3;
  cfg.subset_fraction = 0.1;
  fit<float>(model, teacher.data, cfg, nullptr, [](const EpochReport& r) {
    if (r.epoch % 5 == 0) std::cout << metrics_line(r) << '\n';
  });

  const MtlModel<float> compact = contract_model(model);
  const auto eq = verify_equivalence(model, compact, 32, 1e-5);
  std::cout << "max |factorized - contracted| = " << eq.worst_abs
            << (eq.passed ? " (ok)" : " (FAILED)") << '\n';

  const auto train_cost = count_flops(model, model.input_shape);
  const auto infer_cost = count_flops(compact, compact.input_shape);
  std::cout << "training params " << train_cost.param_count << ", inference params "
            << infer_cost.param_count << ", inference flops " << infer_cost.flops << '\n';

  save_model("quickstart_model.opmt", compact);
  std::cout << "wrote quickstart_model.opmt\n";
  return eq.passed ? 0 : 1;
}
