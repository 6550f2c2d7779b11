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

// Mixture-of-Depths routing: a scalar router per block, expert-choice
// top-k selection under a static per-sequence capacity, and the gated
// residual update
//
//   x_i' = x_i + g(r_i) * f_i(X~)   for the C selected tokens
//   x_i' = x_i                      otherwise
//
// where f is attention-then-MLP over the selected subset only.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include "mod/config.hpp"
#include "mod/layers.hpp"
#include "mod/tensor.hpp"

namespace mod {

/// One routed block's decision for one sequence.
struct RoutingDecision {
  std::size_t block = 0;
  std::vector<double> logits;         // S router logits
  std::vector<std::size_t> selected;  // strictly increasing sequence positions
  std::vector<double> gate;           // multiplier applied to each selected row's delta
  double threshold = 0.0;             // realized cutoff logit
};

/// r = x·w for x[S×d], w[d×1]; recorded on the tape.
inline Tensor router_logits(const Tensor& x, const Tensor& w) {
  if (w.rank() != 2 || w.cols() != 1) throw ShapeError("router weights must be [d×1]");
  return matmul(x, w);
}

/// Indices of the C largest logits, ties going to the lower index, sorted
/// ascending.
inline std::vector<std::size_t> select_top_k(std::span<const double> r, std::size_t capacity) {
  if (capacity < 1 || capacity > r.size()) {
    throw ContractError("select_top_k: capacity " + std::to_string(capacity) + " outside [1, " + std::to_string(r.size()) + "]");
  }
  std::vector<std::size_t> order(r.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(capacity), order.end(),
                    [&](std::size_t a, std::size_t b) { return r[a] > r[b] || (r[a] == r[b] && a < b); });
  order.resize(capacity);
  std::sort(order.begin(), order.end());
  return order;
}

/// The (S-C)-th smallest logit for capacity C. Without ties exactly C
/// logits lie strictly above it. Returns -inf when C == S.
inline double percentile_threshold_at_capacity(std::span<const double> r, std::size_t capacity) {
  if (capacity > r.size()) throw ContractError("percentile_threshold: capacity exceeds sequence length");
  const std::size_t below = r.size() - capacity;
  if (below == 0) return -std::numeric_limits<double>::infinity();
  std::vector<double> sorted(r.begin(), r.end());
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(below - 1), sorted.end());
  return sorted[below - 1];
}

/// beta-th percentile of the router logits with beta = 1 - C/S.
inline double percentile_threshold(std::span<const double> r, double beta) {
  if (!(beta >= 0.0 && beta < 1.0)) throw ContractError("percentile_threshold: beta must lie in [0, 1)");
  const auto s = static_cast<double>(r.size());
  const auto capacity = static_cast<std::size_t>(std::llround((1.0 - beta) * s));
  return percentile_threshold_at_capacity(r, capacity);
}

/// Random routing control: i.i.d. standard normal logits, the same top-k
/// machinery, and unit gates.
template <class Rng>
RoutingDecision stochastic_route(std::size_t seq_len, std::size_t capacity, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  RoutingDecision d;
  d.logits.resize(seq_len);
  for (auto& v : d.logits) v = normal(rng);
  d.selected = select_top_k(d.logits, capacity);
  d.gate.assign(capacity, 1.0);
  d.threshold = percentile_threshold_at_capacity(d.logits, capacity);
  return d;
}

enum class Selection {
  kTopK,             // expert-choice top-C per sequence (training semantics)
  kCausalThreshold,  // token routed iff its decision logit > 0, i.e. sigmoid > 0.5
};

struct RouteOptions {
  Selection selection = Selection::kTopK;
  GateKind gate = GateKind::kSigmoid;
  bool unit_gate = false;  // test hook: multiplier forced to 1
  /// Stochastic control: per-row logits replacing the learned router; gates become 1.
  std::span<const double> stochastic_logits{};
  /// Causal selection logits when they do not come from the router (predictor method).
  std::span<const double> decision_logits{};
};

struct ModBlockOutput {
  Tensor out;
  Tensor router_logits;  // [N×1], undefined for the stochastic control
  std::vector<RoutingDecision> decisions;
  std::vector<std::size_t> selected_rows;  // global row indices that entered f
};

/// Routes x[N×d] (one segment per sequence) around or through block `w`.
/// Non-selected rows of the output are exact copies of the input rows.
inline ModBlockOutput mod_block_forward(const Tensor& x, const RowLayout& layout, const BlockWeights& w, std::size_t capacity,
                                        std::size_t n_heads, std::size_t block_index, const RouteOptions& opts = {}) {
  ModBlockOutput res;
  const bool stochastic = !opts.stochastic_logits.empty();
  std::vector<double> logits;
  if (stochastic) {
    if (opts.stochastic_logits.size() != x.rows()) throw ShapeError("stochastic logits: one per row required");
    logits.assign(opts.stochastic_logits.begin(), opts.stochastic_logits.end());
  } else {
    res.router_logits = router_logits(x, w.router);
    logits.assign(res.router_logits.data().begin(), res.router_logits.data().end());
  }
  std::span<const double> decide = logits;
  if (opts.selection == Selection::kCausalThreshold && !opts.decision_logits.empty()) {
    if (opts.decision_logits.size() != x.rows()) throw ShapeError("decision logits: one per row required");
    decide = opts.decision_logits;
  }

  for (const auto& seg : layout.segments) {
    RoutingDecision d;
    d.block = block_index;
    d.logits.assign(logits.begin() + static_cast<std::ptrdiff_t>(seg.begin),
                    logits.begin() + static_cast<std::ptrdiff_t>(seg.begin + seg.length));
    if (opts.selection == Selection::kTopK) {
      if (capacity > seg.length) throw ContractError("mod_block_forward: capacity exceeds sequence length");
      d.selected = select_top_k(d.logits, capacity);
      d.threshold = percentile_threshold_at_capacity(d.logits, capacity);
    } else {
      for (std::size_t i = 0; i < seg.length; ++i)
        if (decide[seg.begin + i] > 0.0) d.selected.push_back(i);
      d.threshold = 0.0;
    }
    for (std::size_t i : d.selected) res.selected_rows.push_back(seg.begin + i);
    res.decisions.push_back(std::move(d));
  }

  const RowLayout sub = layout.select(res.selected_rows);
  Tensor delta = block_delta(w, gather_rows(x, res.selected_rows), sub, n_heads);
  const bool unit = stochastic || opts.unit_gate;
  Tensor gate;
  if (!unit) {
    const Tensor picked = take(res.router_logits, res.selected_rows);
    gate = opts.gate == GateKind::kSigmoid ? sigmoid(picked) : picked;
    delta = mul_rows(delta, gate);
  }
  std::size_t j = 0;
  for (auto& d : res.decisions) {
    d.gate.resize(d.selected.size());
    for (auto& g : d.gate) g = unit ? 1.0 : gate[j++];
  }
  res.out = scatter_rows_add(x, res.selected_rows, delta);
  return res;
}

}  // namespace mod
