// Copyright 2026 The modepth Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Causal stand-ins for the non-causal top-k: a BCE term that teaches the
// router itself to put top-k members above sigmoid 0.5, and a detached
// predictor MLP trained on the same targets.

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "mod/config.hpp"
#include "mod/layers.hpp"
#include "mod/tensor.hpp"

namespace mod {

/// 0/1 membership targets of length `rows` for the given selected rows.
inline std::vector<double> topk_targets(std::size_t rows, std::span<const std::size_t> selected) {
  std::vector<double> t(rows, 0.0);
  for (std::size_t i : selected) t.at(i) = 1.0;
  return t;
}

/// Mean BCE of sigmoid(r) against top-k membership. Gradient reaches
/// whatever produced r (router weights and the residual stream).
inline Tensor aux_router_bce(const Tensor& r, std::span<const std::size_t> selected) {
  return bce_with_logits(r, topk_targets(r.size(), selected));
}

/// Per-token membership logits from the predictor MLP. The input is
/// detached, so the predictor never sends gradient into the trunk.
inline Tensor predictor_forward(const MlpWeights& predictor, const Tensor& x) { return mlp(predictor, detach(x)); }

/// Decode-time rule: route to the block iff sigmoid(logit) > 0.5.
inline bool causal_route_decision(double logit) { return logit > 0.0; }

}  // namespace mod
