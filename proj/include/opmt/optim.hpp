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

#ifndef OPMT_OPTIM_HPP_
#define OPMT_OPTIM_HPP_

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "opmt/errors.hpp"
#include "opmt/tensor.hpp"

namespace opmt {

enum class OptimizerKind { kSgdMomentum, kAdam };

inline const char* optimizer_name(OptimizerKind k) {
  return k == OptimizerKind::kAdam ? "adam" : "sgd-momentum";
}

inline OptimizerKind optimizer_from_name(const std::string& s) {
  if (s == "adam") return OptimizerKind::kAdam;
  if (s == "sgd-momentum" || s == "sgd") return OptimizerKind::kSgdMomentum;
  throw ArgumentError("unknown optimizer '" + s + "'");
}

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kAdam;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Stateful first-order optimizer. State is keyed by a slot index (the
// parameter's position in visit order) and carries its own step count, so
// parameter groups that update at different rates keep correct bias terms.
// Weight decay is coupled: wd * p is added to the gradient.
template <Scalar T>
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig cfg = {}) : cfg_(cfg) {}

  const OptimizerConfig& config() const { return cfg_; }

  void update(std::size_t slot, Tensor<T>& param, const Tensor<T>& grad, double lr,
              double weight_decay) {
    if (param.shape() != grad.shape()) {
      throw DimensionError("gradient " + shape_string(grad.shape()) +
                           " does not match parameter " + shape_string(param.shape()));
    }
    if (slot >= state_.size()) state_.resize(slot + 1);
    State& st = state_[slot];
    if (st.m.empty()) {
      st.m.assign(param.size(), 0.0);
      if (cfg_.kind == OptimizerKind::kAdam) st.v.assign(param.size(), 0.0);
    } else if (st.m.size() != param.size()) {
      throw DimensionError("optimizer slot " + std::to_string(slot) +
                           " reused for a parameter of a different size");
    }
    ++st.steps;
    T* p = param.raw();
    const T* g = grad.raw();
    const std::size_t n = param.size();
    if (cfg_.kind == OptimizerKind::kSgdMomentum) {
      for (std::size_t i = 0; i < n; ++i) {
        const double gi = static_cast<double>(g[i]) + weight_decay * static_cast<double>(p[i]);
        st.m[i] = st.steps == 1 ? gi : cfg_.momentum * st.m[i] + gi;
        p[i] = static_cast<T>(static_cast<double>(p[i]) - lr * st.m[i]);
      }
      return;
    }
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(st.steps));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(st.steps));
    for (std::size_t i = 0; i < n; ++i) {
      const double gi = static_cast<double>(g[i]) + weight_decay * static_cast<double>(p[i]);
      st.m[i] = cfg_.beta1 * st.m[i] + (1.0 - cfg_.beta1) * gi;
      st.v[i] = cfg_.beta2 * st.v[i] + (1.0 - cfg_.beta2) * gi * gi;
      const double step = (st.m[i] / c1) / (std::sqrt(st.v[i] / c2) + cfg_.eps);
      p[i] = static_cast<T>(static_cast<double>(p[i]) - lr * step);
    }
  }

  std::uint64_t steps(std::size_t slot) const {
    return slot < state_.size() ? state_[slot].steps : 0;
  }

 private:
  struct State {
    std::vector<double> m, v;
    std::uint64_t steps = 0;
  };
  OptimizerConfig cfg_;
  std::vector<State> state_;
};

}  // namespace opmt

#endif  // OPMT_OPTIM_HPP_
