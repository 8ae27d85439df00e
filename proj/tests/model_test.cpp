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

#include <gtest/gtest.h>

#include "opmt/model.hpp"
#include "oracles.hpp"

namespace opmt {
namespace {

double total_loss(const MtlModel<double>& model, const Tensor<double>& x,
                  const std::vector<Tensor<double>>& targets) {
  auto outs = forward(model, x);
  double s = 0.0;
  for (std::size_t j = 0; j < model.tasks(); ++j)
    s += compute_loss(model.task_kinds[j], outs[j], targets[j]).value;
  return s;
}

void check_model_grads(MtlModel<double>& model, const Tensor<double>& x,
                       const std::vector<Tensor<double>>& targets) {
  auto trace = forward_trace(model, x, ForwardMode::kContracted);
  std::vector<std::optional<Tensor<double>>> og;
  for (std::size_t j = 0; j < model.tasks(); ++j)
    og.emplace_back(compute_loss(model.task_kinds[j], *trace.outputs[j], targets[j]).grad);
  auto grads = backward(model, trace, std::span<const std::optional<Tensor<double>>>(og));
  auto params = parameters(model);
  ASSERT_EQ(grads.size(), params.size());
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto numeric = oracle::finite_difference(
        *params[p].value, [&] { return total_loss(model, x, targets); });
    EXPECT_LT(oracle::grad_relative_error(grads[p], numeric), 1e-4)
        << params[p].info.name;
  }
}

TEST(Model, MlpGradientsMatchFiniteDifferences) {
  MlpSpec spec;
  spec.input_dim = 5;
  spec.hidden = {6, 4};
  spec.outputs = {3, 2};
  spec.task_kinds = {LossKind::kMse, LossKind::kCosine};
  spec.relu = true;
  spec.factorize = true;
  spec.factor_options.rank_extra = 1;
  spec.factor_options.init = FactorInit::kIdentityDiag;
  auto model = build_mlp_mtl<double>(spec);
  Rng rng(3);
  // identity-diag starts at ones; move the diagonals off the symmetric point
  for (auto& p : parameters(model))
    if (p.info.kind == ParamKind::kTaskDiag) *p.value = random_normal<double>(p.value->shape(), rng);
  auto x = random_normal<double>({4, 5}, rng);
  check_model_grads(model, x, {random_normal<double>({4, 3}, rng),
                               random_normal<double>({4, 2}, rng)});
}

TEST(Model, ConvGradientsMatchFiniteDifferences) {
  ConvNetSpec spec;
  spec.in_channels = 2;
  spec.image_size = 8;
  spec.widths = {3, 4, 3};
  spec.task_kinds = {LossKind::kSoftmaxCrossEntropy, LossKind::kL1, LossKind::kCosine};
  spec.head_channels = {3, 1, 3};
  spec.factorize = true;
  spec.seed = 4;
  auto model = build_conv_mtl<double>(spec);
  Rng rng(5);
  for (auto& p : parameters(model))
    if (p.info.kind == ParamKind::kBias) *p.value = random_normal<double>(p.value->shape(), rng, 0.1);
  auto x = random_normal<double>({2, 2, 8, 8}, rng);
  Tensor<double> labels({2, 8, 8});
  for (auto& v : labels.data()) v = static_cast<double>(rng() % 3);
  check_model_grads(model, x, {labels, random_normal<double>({2, 1, 8, 8}, rng),
                               random_normal<double>({2, 3, 8, 8}, rng)});
}

TEST(Model, ConvBuilderFactorizesAllButLastTrunkConv) {
  ConvNetSpec spec;
  spec.task_kinds = {LossKind::kSoftmaxCrossEntropy, LossKind::kL1};
  spec.head_channels = {4, 1};
  spec.image_size = 16;
  spec.factorize = true;
  auto model = build_conv_mtl<float>(spec);
  EXPECT_EQ(model.factorized_count(), 3u);
  EXPECT_FALSE(is_factorized(model.trunk.back()) ||
               is_factorized(model.trunk[model.trunk.size() - 2]));
  auto outs = forward(model, Tensor<float>({2, 3, 16, 16}));
  EXPECT_EQ(outs[0].shape(), (Shape{2, 4, 16, 16}));
  EXPECT_EQ(outs[1].shape(), (Shape{2, 1, 16, 16}));
}

TEST(Model, ValidationRejectsMismatchedStructure) {
  MlpSpec spec;
  spec.outputs = {2, 2};
  spec.task_kinds = {LossKind::kMse, LossKind::kMse};
  spec.factorize = true;
  auto model = build_mlp_mtl<double>(spec);
  auto broken = model;
  broken.task_kinds.pop_back();
  EXPECT_THROW(broken.validate(), StructuralError);
  broken = model;
  std::get<FactorizedLinear<double>>(broken.trunk[0]).task_diags.pop_back();
  EXPECT_THROW(broken.validate(), StructuralError);
  broken = model;
  broken.heads[0].push_back(broken.trunk[0]);
  EXPECT_THROW(broken.validate(), StructuralError);
}

TEST(Model, ParameterNamesFollowLayout) {
  MlpSpec spec;
  spec.outputs = {2};
  spec.task_kinds = {LossKind::kMse};
  spec.factorize = true;
  auto infos = parameter_infos(build_mlp_mtl<double>(spec));
  std::vector<std::string> names;
  for (const auto& i : infos) names.push_back(i.name);
  EXPECT_EQ(names, (std::vector<std::string>{"trunk.0.fac_linear.u", "trunk.0.fac_linear.v",
                                             "trunk.0.fac_linear.diag.0",
                                             "trunk.0.fac_linear.bias",
                                             "head.0.0.linear.weight", "head.0.0.linear.bias"}));
}

TEST(Model, FactorizedForwardModesAgree) {
  ConvNetSpec spec;
  spec.image_size = 16;
  spec.task_kinds = {LossKind::kL1};
  spec.head_channels = {1};
  spec.factorize = true;
  spec.factor_options.rank_extra = 2;
  auto model = build_conv_mtl<double>(spec);
  Rng rng(1);
  auto x = random_normal<double>({2, 3, 16, 16}, rng);
  auto a = forward(model, x, ForwardMode::kContracted);
  auto b = forward(model, x, ForwardMode::kFactorized);
  EXPECT_LT(max_abs_diff(a[0], b[0]), 1e-10);
}

}  // namespace
}  // namespace opmt
