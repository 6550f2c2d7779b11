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

// Analytic FLOP accounting for one forward pass over one sequence.
//
// Convention: one multiply-accumulate is 2 FLOPs. Softmax, layer norm,
// nonlinearities, bias adds and gating are not counted. Attention scores are
// counted densely (C² per head-width) since the kernels compute the full
// masked score matrix.

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mod/config.hpp"

namespace mod {

struct AttentionFlops {
  std::uint64_t qkv_proj = 0;
  std::uint64_t qk_matmul = 0;
  std::uint64_t av_matmul = 0;
  std::uint64_t out_proj = 0;

  std::uint64_t total() const { return qkv_proj + qk_matmul + av_matmul + out_proj; }
};

inline AttentionFlops attention_flops(std::uint64_t tokens, std::uint64_t d_model, std::uint64_t n_heads) {
  if (n_heads == 0 || d_model % n_heads != 0) throw ConfigError("attention_flops: d_model must be divisible by n_heads");
  AttentionFlops f;
  f.qkv_proj = 3 * 2 * tokens * d_model * d_model;
  f.qk_matmul = 2 * tokens * tokens * d_model;
  f.av_matmul = 2 * tokens * tokens * d_model;
  f.out_proj = 2 * tokens * d_model * d_model;
  return f;
}

inline std::uint64_t mlp_flops(std::uint64_t tokens, std::uint64_t d_model, std::uint64_t d_ff) {
  return 2 * (2 * tokens * d_model * d_ff);
}

struct BlockFlops {
  std::size_t block = 0;
  BlockKind kind = BlockKind::kFull;
  std::size_t capacity = 0;  // tokens entering attention
  AttentionFlops attention;
  std::uint64_t mlp = 0;
  std::uint64_t router = 0;
  std::uint64_t predictor = 0;

  std::uint64_t total() const { return attention.total() + mlp + router + predictor; }
};

struct FlopReport {
  std::vector<BlockFlops> blocks;
  std::uint64_t embed = 0;  // table lookup, no arithmetic
  std::uint64_t unembed = 0;
  std::uint64_t block_total = 0;
  std::uint64_t total = 0;
  std::uint64_t baseline_total = 0;
  double ratio_to_baseline = 1.0;
  std::string convention = "MAC = 2 FLOPs; softmax, layer norm, activations, bias and gating excluded";
};

namespace detail {

inline FlopReport count_flops(const ModelConfig& cfg) {
  FlopReport r;
  const std::uint64_t s = cfg.seq_len, d = cfg.d_model, ff = cfg.d_ff;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    BlockFlops b;
    b.block = l;
    b.kind = cfg.block_kind(l);
    const std::uint64_t c = cfg.routing.blocks[l].capacity;
    switch (b.kind) {
      case BlockKind::kFull:
        b.capacity = s;
        b.attention = attention_flops(s, d, cfg.n_heads);
        b.mlp = mlp_flops(s, d, ff);
        break;
      case BlockKind::kRouted:
        b.capacity = c;
        b.attention = attention_flops(c, d, cfg.n_heads);
        b.mlp = mlp_flops(c, d, ff);
        break;
      case BlockKind::kMoe: {
        b.capacity = s;
        b.attention = attention_flops(s, d, cfg.n_heads);
        const std::uint64_t columns = cfg.moe.num_experts + (cfg.moe.include_noop ? 1 : 0);
        b.router = 2 * s * d * columns;
        b.mlp = cfg.moe.num_experts * mlp_flops(cfg.moe.capacity, d, ff);
        break;
      }
      case BlockKind::kStaged:
        b.capacity = c;
        b.attention = attention_flops(c, d, cfg.n_heads);
        b.router = 2 * c * d * cfg.moe.num_experts;
        b.mlp = cfg.moe.num_experts * mlp_flops(cfg.moe.capacity, d, ff);
        break;
    }
    if (cfg.has_token_router(l)) {
      b.router += 2 * s * d;
      if (cfg.sampler.method == RouteMethod::kPredictor) {
        const std::uint64_t h = cfg.sampler.predictor_hidden;
        b.predictor = 2 * s * (d * h + h);
      }
    }
    r.block_total += b.total();
    r.blocks.push_back(b);
  }
  r.unembed = 2 * s * d * cfg.vocab_size;
  r.total = r.block_total + r.embed + r.unembed;
  return r;
}

}  // namespace detail

/// Per-block FLOPs of one forward pass over one sequence, with the ratio to
/// the same shape run as a dense baseline.
inline FlopReport model_forward_flops(const ModelConfig& cfg) {
  cfg.validate();
  FlopReport r = detail::count_flops(cfg);
  ModelConfig base = cfg;
  base.variant = Variant::kBaseline;
  base.routing = CapacitySchedule::full(cfg.n_layers, cfg.seq_len);
  r.baseline_total = detail::count_flops(base).total;
  r.ratio_to_baseline = static_cast<double>(r.total) / static_cast<double>(r.baseline_total);
  return r;
}

/// `family` with n_layers replaced and its capacity schedule rebuilt.
inline ModelConfig with_depth(ModelConfig family, std::size_t n_layers) {
  family.n_layers = n_layers;
  family.routing.blocks.clear();
  family.resolve();
  return family;
}

/// Deepest member of the depth-scaled family whose forward FLOPs do not
/// exceed `target`; nullopt when even one layer is too expensive.
inline std::optional<ModelConfig> isoflop_size_match(std::uint64_t target, const ModelConfig& family, std::size_t max_layers = 512) {
  std::optional<ModelConfig> best;
  for (std::size_t l = 1; l <= max_layers; ++l) {
    ModelConfig c = with_depth(family, l);
    if (model_forward_flops(c).total > target) break;
    best = std::move(c);
  }
  return best;
}

}  // namespace mod
