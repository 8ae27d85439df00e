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

#include "opmt/model_io.hpp"

namespace opmt {
namespace {

MtlModel<float> conv_model(bool factorize, std::uint64_t seed = 0, std::size_t extra = 0) {
  ConvNetSpec spec;
  spec.image_size = 16;
  spec.widths = {4, 6, 6};
  spec.task_kinds = {LossKind::kSoftmaxCrossEntropy, LossKind::kL1, LossKind::kCosine};
  spec.head_channels = {3, 1, 3};
  spec.factorize = factorize;
  spec.factor_options.rank_extra = extra;
  spec.seed = seed;
  return build_conv_mtl<float>(spec);
}

template <Scalar T>
bool same_model(const MtlModel<T>& a, const MtlModel<T>& b) {
  if (a.input_shape != b.input_shape || a.task_kinds != b.task_kinds) return false;
  const auto ia = parameter_infos(a), ib = parameter_infos(b);
  if (ia.size() != ib.size()) return false;
  auto pa = parameters(const_cast<MtlModel<T>&>(a));
  auto pb = parameters(const_cast<MtlModel<T>&>(b));
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (pa[i].info.name != pb[i].info.name || !pa[i].value->bitwise_equal(*pb[i].value))
      return false;
  auto kinds = [](const MtlModel<T>& m) {
    std::vector<std::string> k;
    for (const auto& l : m.trunk) k.push_back(layer_kind(l));
    for (const auto& h : m.heads)
      for (const auto& l : h) k.push_back(layer_kind(l));
    return k;
  };
  return kinds(a) == kinds(b);
}

TEST(ModelArchive, RoundTripIsBitwise) {
  for (bool fac : {false, true}) {
    auto m = conv_model(fac, 3, 2);
    auto back = model_from_archive<float>(decode_archive(encode_archive(model_to_archive(m))));
    EXPECT_TRUE(same_model(m, back));
    const auto& c = std::get<Conv2d<float>>(back.trunk[6]);
    EXPECT_EQ(c.padding, 1u);
  }
}

TEST(ModelArchive, DiagonalsStoredPerTask) {
  auto ar = model_to_archive(conv_model(true));
  EXPECT_NE(ar.find("trunk.0.fac_conv.diag.2"), nullptr);
  EXPECT_NE(ar.find("trunk.0.fac_conv.config"), nullptr);
  auto contracted = model_to_archive(contract_model(conv_model(true)));
  for (const auto& e : contracted.entries) EXPECT_EQ(e.name.find("diag"), std::string::npos);
}

TEST(ModelArchive, RejectsWrongDtypeAndBrokenLayout) {
  auto ar = model_to_archive(conv_model(false));
  EXPECT_THROW(model_from_archive<double>(ar), FormatError);
  auto missing = ar;
  missing.entries.erase(missing.entries.begin() + 2);  // trunk.0.conv.weight
  EXPECT_THROW(model_from_archive<float>(missing), FormatError);
  auto unknown = ar;
  unknown.entries.push_back({"trunk.99.swirl.weight", Tensor<float>({1})});
  EXPECT_THROW(model_from_archive<float>(unknown), FormatError);
  EXPECT_THROW(model_from_archive<float>(TensorArchive{}), FormatError);
}

TEST(Contract, PlainModelIsUnchanged) {
  auto m = conv_model(false);
  EXPECT_TRUE(same_model(m, contract_model(m)));
}

TEST(Contract, RemovesFactorizedLayersAndIsIdempotent) {
  auto c = contract_model(conv_model(true, 1, 3));
  EXPECT_EQ(c.factorized_count(), 0u);
  EXPECT_TRUE(same_model(c, contract_model(c)));
}

TEST(Contract, OutputsAgree) {
  auto fac = conv_model(true, 2, 1);
  auto rep = verify_equivalence(fac, contract_model(fac), 16, 1e-5);
  EXPECT_TRUE(rep.passed) << rep.worst_abs;
  EXPECT_EQ(rep.max_abs.size(), 3u);
}

TEST(Cost, LinearWithBias) {
  MtlModel<float> m;
  m.input_shape = {4};
  m.task_kinds = {LossKind::kMse};
  m.heads.push_back({Linear<float>{Tensor<float>({4, 3}), Tensor<float>({3})}});
  auto r = count_flops(m, {4});
  EXPECT_EQ(r.param_count, 15u);
  EXPECT_EQ(r.flops, 24u);
  EXPECT_THROW(count_flops(m, {5}), DimensionError);
}

TEST(Cost, ConvFlopsFormula) {
  MtlModel<float> m;
  m.input_shape = {4, 16, 16};
  m.task_kinds = {LossKind::kL1};
  m.trunk.emplace_back(Conv2d<float>{Tensor<float>({8, 4, 3, 3}), std::nullopt, 1, 1});
  m.heads.push_back({Relu{}});
  EXPECT_EQ(count_flops(m, m.input_shape).flops, 147456u);
}

TEST(Cost, FactorizedTrainingCount) {
  FactorizedLinear<float> l{Tensor<float>({4, 3}), {Tensor<float>::ones({3}), Tensor<float>::ones({3})},
                            Tensor<float>({3, 3}), std::nullopt};
  MtlModel<float> m;
  m.input_shape = {4};
  m.task_kinds = {LossKind::kMse, LossKind::kMse};
  m.trunk.emplace_back(l);
  m.heads = {{Relu{}}, {Relu{}}};
  std::size_t stored = 0;
  for (auto& p : parameters(m)) stored += p.value->size();
  EXPECT_EQ(count_params(m).param_count, 27u);
  EXPECT_EQ(stored, 27u);
  EXPECT_EQ(count_params(contract_model(m)).param_count, 12u);
}

TEST(Cost, ContractedMatchesBaseline) {
  auto base = conv_model(false, 5);
  auto fac = conv_model(true, 5, 2);
  auto c = contract_model(fac);
  EXPECT_EQ(count_flops(c, c.input_shape).param_count, count_params(base).param_count);
  EXPECT_EQ(count_flops(c, c.input_shape).flops, count_flops(base, base.input_shape).flops);
  EXPECT_GT(count_params(fac).param_count, count_params(c).param_count);
  auto r = count_flops(fac, fac.input_shape);
  std::uint64_t sum = 0;
  for (const auto& l : r.layers) sum += l.params;
  EXPECT_EQ(sum, r.param_count);
}

TEST(Verify, PerturbedWeightFailsWithLocation) {
  auto fac = conv_model(true, 7);
  auto compact = contract_model(fac);
  std::get<Conv2d<float>>(compact.heads[1][0]).weight[0] += 1e-2f;
  auto rep = verify_equivalence(fac, compact, 4, 1e-5);
  EXPECT_FALSE(rep.passed);
  EXPECT_EQ(rep.worst_task, 1u);
  EXPECT_GT(rep.max_abs[1], 1e-5);
  EXPECT_LT(rep.worst_index, 16u * 16u);
}

TEST(Verify, ZeroSamplesIsVacuous) {
  auto fac = conv_model(true);
  auto rep = verify_equivalence(fac, contract_model(fac), 0, 1e-5);
  EXPECT_TRUE(rep.passed);
  EXPECT_FALSE(rep.warning.empty());
}

TEST(Verify, TopologyMismatch) {
  auto fac = conv_model(true);
  auto other = contract_model(fac);
  other.trunk.pop_back();
  EXPECT_THROW(verify_equivalence(fac, other, 2, 1e-5), StructuralError);
  auto kinds = contract_model(fac);
  kinds.task_kinds[1] = LossKind::kMse;
  EXPECT_THROW(verify_equivalence(fac, kinds, 2, 1e-5), StructuralError);
}

}  // namespace
}  // namespace opmt
