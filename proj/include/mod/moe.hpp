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

// Expert-choice mixture-of-experts and the two MoDE compositions.

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "mod/config.hpp"
#include "mod/layers.hpp"
#include "mod/routing.hpp"
#include "mod/tensor.hpp"

namespace mod {

struct ExpertSelection {
  std::size_t expert = 0;  // == num_experts for the no-op column
  std::vector<RoutingDecision> per_sequence;
};

struct MoeOptions {
  bool unit_gate = false;
  /// Test hook replacing the affinity logits [N×E'].
  const Tensor* affinity_override = nullptr;
};

struct MoeOutput {
  Tensor out;
  Tensor affinity;  // [N×E']
  std::vector<ExpertSelection> selections;
};

/// Each expert column independently takes the top-C_e rows of every
/// sequence; its MLP runs on ln2 of those rows and the sigmoid-gated result
/// is added onto `base`. The no-op column (when present) selects like any
/// expert but contributes nothing. Rows chosen by no real expert are copied
/// unchanged.
inline MoeOutput expert_choice_moe(const Tensor& h, const Tensor& base, const RowLayout& layout, const BlockWeights& w,
                                   const MoeConfig& cfg, const MoeOptions& opts = {}) {
  MoeOutput res;
  const std::size_t columns = cfg.num_experts + (cfg.include_noop ? 1 : 0);
  if (w.experts.size() != cfg.num_experts) throw ShapeError("expert weights do not match moe.experts");
  res.affinity = opts.affinity_override ? *opts.affinity_override : matmul(h, w.expert_router);
  if (res.affinity.rows() != h.rows() || res.affinity.cols() != columns) throw ShapeError("expert affinity must be [N×E']");
  const Tensor normed = layer_norm(h, w.ln2.gain, w.ln2.bias);

  Tensor out = base;
  std::vector<double> column(h.rows());
  for (std::size_t e = 0; e < columns; ++e) {
    for (std::size_t i = 0; i < h.rows(); ++i) column[i] = res.affinity[i * columns + e];
    ExpertSelection sel;
    sel.expert = e;
    std::vector<std::size_t> rows;
    for (const auto& seg : layout.segments) {
      RoutingDecision d;
      d.block = e;
      d.logits.assign(column.begin() + static_cast<std::ptrdiff_t>(seg.begin),
                      column.begin() + static_cast<std::ptrdiff_t>(seg.begin + seg.length));
      if (cfg.capacity > seg.length) throw ContractError("expert capacity exceeds the tokens available to the expert");
      d.selected = select_top_k(d.logits, cfg.capacity);
      d.threshold = percentile_threshold_at_capacity(d.logits, cfg.capacity);
      for (std::size_t i : d.selected) rows.push_back(seg.begin + i);
      sel.per_sequence.push_back(std::move(d));
    }
    const bool noop = e == cfg.num_experts;
    if (!noop) {
      Tensor y = mlp(w.experts[e], gather_rows(normed, rows));
      std::vector<double> gates(rows.size(), 1.0);
      if (!opts.unit_gate) {
        std::vector<std::size_t> flat(rows.size());
        for (std::size_t j = 0; j < rows.size(); ++j) flat[j] = rows[j] * columns + e;
        const Tensor g = sigmoid(take(res.affinity, flat));
        y = mul_rows(y, g);
        gates.assign(g.data().begin(), g.data().end());
      }
      out = scatter_rows_add(out, rows, y);
      std::size_t j = 0;
      for (auto& d : sel.per_sequence)
        for (std::size_t k = 0; k < d.selected.size(); ++k) d.gate.push_back(gates[j++]);
    } else {
      for (auto& d : sel.per_sequence) d.gate.assign(d.selected.size(), 0.0);
    }
    res.selections.push_back(std::move(sel));
  }
  res.out = out;
  return res;
}

struct ModeBlockOutput {
  Tensor out;
  MoeOutput moe;
  ModBlockOutput route;  // staged only: the MoD stage in front of attention
};

/// Full-capacity attention followed by an expert-choice MLP stage in which
/// one extra column is a no-op expert (integrated MoDE), or plain MoE when
/// cfg.include_noop is false.
inline ModeBlockOutput integrated_mode_block(const Tensor& x, const RowLayout& layout, const BlockWeights& w,
                                             const MoeConfig& cfg, std::size_t n_heads, const MoeOptions& opts = {}) {
  ModeBlockOutput res;
  const Tensor h = add(x, attention(w.attn, layer_norm(x, w.ln1.gain, w.ln1.bias), layout, n_heads));
  res.moe = expert_choice_moe(h, h, layout, w, cfg, opts);
  res.out = res.moe.out;
  return res;
}

/// MoD top-C in front of attention; the selected rows then run attention
/// and an expert-choice MoE within the gathered subset. Unselected rows skip
/// both stages.
inline ModeBlockOutput staged_mode_block(const Tensor& x, const RowLayout& layout, const BlockWeights& w, std::size_t capacity,
                                         const MoeConfig& cfg, std::size_t n_heads, std::size_t block_index,
                                         const RouteOptions& route = {}, const MoeOptions& opts = {}) {
  ModeBlockOutput res;
  ModBlockOutput& r = res.route;
  r.router_logits = router_logits(x, w.router);
  std::span<const double> logits = r.router_logits.data();
  std::span<const double> decide =
      route.selection == Selection::kCausalThreshold && !route.decision_logits.empty() ? route.decision_logits : logits;
  for (const auto& seg : layout.segments) {
    RoutingDecision d;
    d.block = block_index;
    d.logits.assign(logits.begin() + static_cast<std::ptrdiff_t>(seg.begin),
                    logits.begin() + static_cast<std::ptrdiff_t>(seg.begin + seg.length));
    if (route.selection == Selection::kTopK) {
      d.selected = select_top_k(d.logits, capacity);
      d.threshold = percentile_threshold_at_capacity(d.logits, capacity);
    } else {
      for (std::size_t i = 0; i < seg.length; ++i)
        if (decide[seg.begin + i] > 0.0) d.selected.push_back(i);
    }
    for (std::size_t i : d.selected) r.selected_rows.push_back(seg.begin + i);
    r.decisions.push_back(std::move(d));
  }
  const RowLayout sub = layout.select(r.selected_rows);
  const Tensor xs = gather_rows(x, r.selected_rows);
  const Tensor a = attention(w.attn, layer_norm(xs, w.ln1.gain, w.ln1.bias), sub, n_heads);
  const Tensor hs = add(xs, a);
  res.moe = expert_choice_moe(hs, Tensor::zeros(hs.shape()), sub, w, cfg, opts);
  Tensor delta = add(a, res.moe.out);
  const bool unit = route.unit_gate;
  Tensor gate;
  if (!unit) {
    const Tensor picked = take(r.router_logits, r.selected_rows);
    gate = route.gate == GateKind::kSigmoid ? sigmoid(picked) : picked;
    delta = mul_rows(delta, gate);
  }
  std::size_t j = 0;
  for (auto& d : r.decisions) {
    d.gate.resize(d.selected.size());
    for (auto& g : d.gate) g = unit ? 1.0 : gate[j++];
  }
  r.out = scatter_rows_add(x, r.selected_rows, delta);
  res.out = r.out;
  return res;
}

}  // namespace mod
