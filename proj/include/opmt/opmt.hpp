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

#ifndef OPMT_OPMT_HPP_
#define OPMT_OPMT_HPP_

#include "opmt/archive.hpp"
#include "opmt/conv.hpp"
#include "opmt/data.hpp"
#include "opmt/datasets.hpp"
#include "opmt/errors.hpp"
#include "opmt/experiment.hpp"
#include "opmt/factorized.hpp"
#include "opmt/layers.hpp"
#include "opmt/linalg.hpp"
#include "opmt/loss.hpp"
#include "opmt/metrics.hpp"
#include "opmt/model.hpp"
#include "opmt/model_io.hpp"
#include "opmt/optim.hpp"
#include "opmt/tensor.hpp"
#include "opmt/trainer.hpp"

#endif  // OPMT_OPMT_HPP_
