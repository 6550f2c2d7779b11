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

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mod/config.hpp"
#include "mod/layers.hpp"
#include "mod/moe.hpp"
#include "mod/routing.hpp"
#include "mod/sampling.hpp"
#include "mod/tensor.hpp"

namespace mod {

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  // splitmix64 finalizer over the pair
  std::uint64_t z = a * 0x9E3779B97F4A7C15ULL + b + 0x632BE59BD9B4E019ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

/// Decoder-only language model; the block kinds follow the config's variant
/// and capacity schedule. Embeddings are tied with the output projection.
struct Model {
  ModelConfig cfg;
  Tensor embed;  // [V×d]
  LayerNormWeights ln_f;
  std::vector<BlockWeights> blocks;

  static Model init(const ModelConfig& config) {
    Model m;
    m.cfg = config;
    m.cfg.validate();
    const std::size_t d = m.cfg.d_model, ff = m.cfg.d_ff;
    std::mt19937_64 rng(mix_seed(m.cfg.seed, 0x1417));
    std::normal_distribution<double> normal(0.0, 1.0);
    auto trunc = [&](Shape shape, double stddev) {
      Tensor t = Tensor::zeros(std::move(shape), true);
      for (double& v : t.mutable_data()) {
        double z;
        do z = normal(rng);
        while (std::abs(z) > 2.0);
        v = z * stddev;
      }
      return t;
    };
    auto constant = [](Shape shape, double value) {
      Tensor t = Tensor::zeros(std::move(shape), true);
      for (double& v : t.mutable_data()) v = value;
      return t;
    };
    constexpr double kStd = 0.02;
    const double out_std = kStd / std::sqrt(2.0 * static_cast<double>(m.cfg.n_layers));
    auto make_mlp = [&](std::size_t in, std::size_t hidden, std::size_t out, double in_std, double o_std) {
      return MlpWeights{trunc({in, hidden}, in_std), constant({hidden}, 0.0), trunc({hidden, out}, o_std), constant({out}, 0.0)};
    };

    m.embed = trunc({m.cfg.vocab_size, d}, kStd);
    m.ln_f = {constant({d}, 1.0), constant({d}, 0.0)};
    for (std::size_t i = 0; i < m.cfg.n_layers; ++i) {
      BlockWeights b;
      b.ln1 = {constant({d}, 1.0), constant({d}, 0.0)};
      b.ln2 = {constant({d}, 1.0), constant({d}, 0.0)};
      b.attn = {trunc({d, d}, kStd), trunc({d, d}, kStd), trunc({d, d}, kStd), trunc({d, d}, out_std)};
      const BlockKind kind = m.cfg.block_kind(i);
      if (kind == BlockKind::kFull || kind == BlockKind::kRouted) b.ffn = make_mlp(d, ff, d, kStd, out_std);
      if (m.cfg.has_token_router(i)) {
        b.router = constant({d, 1}, 0.0);
        if (m.cfg.sampler.method == RouteMethod::kPredictor) {
          const std::size_t hidden = m.cfg.sampler.predictor_hidden;
          b.predictor = make_mlp(d, hidden, 1, 1.0 / std::sqrt(static_cast<double>(d)), 0.0);
        }
      }
      if (kind == BlockKind::kMoe || kind == BlockKind::kStaged) {
        const std::size_t cols = m.cfg.moe.num_experts + (kind == BlockKind::kMoe && m.cfg.moe.include_noop ? 1 : 0);
        b.expert_router = trunc({d, cols}, kStd);
        for (std::size_t e = 0; e < m.cfg.moe.num_experts; ++e) b.experts.push_back(make_mlp(d, ff, d, kStd, out_std));
      }
      m.blocks.push_back(std::move(b));
    }
    return m;
  }

  /// Every trainable tensor with a stable dotted name, in a fixed order.
  NamedTensors named_parameters() const {
    NamedTensors out;
    auto push = [&](std::string name, const Tensor& t) {
      if (t.defined()) out.emplace_back(std::move(name), t);
    };
    auto push_mlp = [&](const std::string& p, const MlpWeights& w) {
      push(p + ".w1", w.w1);
      push(p + ".b1", w.b1);
      push(p + ".w2", w.w2);
      push(p + ".b2", w.b2);
    };
    push("embed", embed);
    push("ln_f.gain", ln_f.gain);
    push("ln_f.bias", ln_f.bias);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const auto& b = blocks[i];
      const std::string p = "blocks." + std::to_string(i);
      push(p + ".ln1.gain", b.ln1.gain);
      push(p + ".ln1.bias", b.ln1.bias);
      push(p + ".attn.wq", b.attn.wq);
      push(p + ".attn.wk", b.attn.wk);
      push(p + ".attn.wv", b.attn.wv);
      push(p + ".attn.wo", b.attn.wo);
      push(p + ".ln2.gain", b.ln2.gain);
      push(p + ".ln2.bias", b.ln2.bias);
      push_mlp(p + ".ffn", b.ffn);
      push(p + ".router", b.router);
      push_mlp(p + ".predictor", b.predictor);
      push(p + ".expert_router", b.expert_router);
      for (std::size_t e = 0; e < b.experts.size(); ++e) push_mlp(p + ".experts." + std::to_string(e), b.experts[e]);
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : named_parameters()) n += t.size();
    return n;
  }

  /// Deep copy with independent storage.
  Model clone() const {
    Model m = Model::init(cfg);
    auto src = named_parameters();
    auto dst = m.named_parameters();
    for (std::size_t i = 0; i < src.size(); ++i) {
      auto s = src[i].second.data();
      std::copy(s.begin(), s.end(), dst[i].second.mutable_data().begin());
    }
    return m;
  }

  void zero_grad() {
    for (auto& [name, t] : named_parameters()) t.zero_grad();
  }
};

/// How routed blocks choose tokens during a forward pass.
enum class EvalMode { kTeacherForced, kCausalAux, kCausalPredictor };

inline std::string_view to_string(EvalMode m) {
  switch (m) {
    case EvalMode::kTeacherForced: return "teacher_forced_topk";
    case EvalMode::kCausalAux: return "causal_aux";
    case EvalMode::kCausalPredictor: return "causal_predictor";
  }
  return "?";
}

inline EvalMode parse_eval_mode(std::string_view s) {
  for (EvalMode m : {EvalMode::kTeacherForced, EvalMode::kCausalAux, EvalMode::kCausalPredictor})
    if (to_string(m) == s) return m;
  throw ConfigError("unknown evaluation mode '" + std::string(s) + "'");
}

struct ForwardOptions {
  EvalMode mode = EvalMode::kTeacherForced;
  bool unit_gate = false;
  std::uint64_t stochastic_seed = 0;
};

struct BlockTrace {
  std::size_t block = 0;
  BlockKind kind = BlockKind::kFull;
  std::vector<RoutingDecision> decisions;   // token router (MoD / staged)
  std::vector<ExpertSelection> experts;     // expert columns (MoE / MoDE)
  std::vector<double> decision_logits;      // causal decision logit per row (router or predictor)
  std::size_t rows_processed = 0;           // rows that entered the block's attention
};

struct ForwardResult {
  Tensor logits;  // [N×V]
  std::vector<BlockTrace> blocks;
  Tensor aux_loss;        // router BCE summed over routed blocks (aux method, top-k mode)
  Tensor predictor_loss;  // predictor BCE summed over routed blocks (predictor method)
  std::size_t agree = 0;  // causal decisions matching top-k membership
  std::size_t judged = 0;
};

/// Capacity for sequences of length `seq` when the model was configured for
/// `configured_seq`: the same fraction of tokens, at least one.
inline std::size_t effective_capacity(std::size_t capacity, std::size_t seq, std::size_t configured_seq) {
  if (seq == configured_seq) return capacity;
  const auto scaled = static_cast<std::size_t>(std::llround(static_cast<double>(capacity) * static_cast<double>(seq) /
                                                            static_cast<double>(configured_seq)));
  return std::clamp<std::size_t>(scaled, 1, seq);
}

/// Whether a model of this config can route causally under `mode`.
inline void check_mode_supported(const ModelConfig& cfg, EvalMode mode) {
  if (mode == EvalMode::kTeacherForced || cfg.variant == Variant::kBaseline) return;
  if (cfg.variant != Variant::kMod)
    throw ConfigError("variant " + std::string(to_string(cfg.variant)) + " has no causal routing rule");
  const RouteMethod want = mode == EvalMode::kCausalAux ? RouteMethod::kAuxLoss : RouteMethod::kPredictor;
  if (cfg.sampler.method != want)
    throw ConfigError("mode " + std::string(to_string(mode)) + " requires a model trained with sampler.method=" +
                      std::string(to_string(want)));
}

/// Runs `batch` sequences of cfg.seq_len tokens (row-major in `tokens`).
inline ForwardResult lm_forward(const Model& model, std::span<const std::size_t> tokens, std::size_t batch,
                                const ForwardOptions& opts = {}) {
  const ModelConfig& cfg = model.cfg;
  if (batch == 0 || tokens.size() % batch != 0) throw ShapeError("lm_forward: tokens do not split into the batch");
  const std::size_t seq = tokens.size() / batch;
  check_mode_supported(cfg, opts.mode);
  const RowLayout layout = RowLayout::dense(batch, seq);
  const bool causal = opts.mode != EvalMode::kTeacherForced;

  ForwardResult res;
  Tensor x = embedding(model.embed, tokens);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const BlockWeights& w = model.blocks[l];
    const BlockKind kind = cfg.block_kind(l);
    if (kind == BlockKind::kFull) {
      x = vanilla_block(w, x, layout, cfg.n_heads);
      continue;
    }
    BlockTrace trace;
    trace.block = l;
    trace.kind = kind;
    const std::size_t capacity = effective_capacity(cfg.routing.blocks[l].capacity, seq, cfg.seq_len);
    MoeConfig moe = cfg.moe;
    moe.capacity = effective_capacity(moe.capacity, kind == BlockKind::kStaged ? capacity : seq,
                                      kind == BlockKind::kStaged ? cfg.routing.blocks[l].capacity : cfg.seq_len);
    if (kind == BlockKind::kMoe) {
      MoeOptions mo;
      mo.unit_gate = opts.unit_gate;
      ModeBlockOutput o = integrated_mode_block(x, layout, w, moe, cfg.n_heads, mo);
      trace.experts = std::move(o.moe.selections);
      trace.rows_processed = x.rows();
      x = o.out;
      res.blocks.push_back(std::move(trace));
      continue;
    }

    Tensor predicted;
    if (cfg.has_token_router(l) && cfg.sampler.method == RouteMethod::kPredictor) predicted = predictor_forward(w.predictor, x);
    RouteOptions ro;
    ro.gate = cfg.gate;
    ro.unit_gate = opts.unit_gate;
    ro.selection = causal ? Selection::kCausalThreshold : Selection::kTopK;
    if (predicted.defined() && causal) ro.decision_logits = predicted.data();
    std::vector<double> noise;
    if (cfg.variant == Variant::kModStochastic) {
      std::mt19937_64 rng(mix_seed(opts.stochastic_seed, l));
      std::normal_distribution<double> normal(0.0, 1.0);
      noise.resize(x.rows());
      for (double& v : noise) v = normal(rng);
      ro.stochastic_logits = noise;
    }

    ModBlockOutput route;
    if (kind == BlockKind::kRouted) {
      route = mod_block_forward(x, layout, w, capacity, cfg.n_heads, l, ro);
    } else {
      MoeOptions mo;
      mo.unit_gate = opts.unit_gate;
      ModeBlockOutput o = staged_mode_block(x, layout, w, capacity, moe, cfg.n_heads, l, ro, mo);
      trace.experts = std::move(o.moe.selections);
      route = std::move(o.route);
    }
    trace.rows_processed = route.selected_rows.size();

    if (route.router_logits.defined()) {
      const Tensor& decider = predicted.defined() ? predicted : route.router_logits;
      trace.decision_logits.assign(decider.data().begin(), decider.data().end());
      if (!causal) {
        for (std::size_t b = 0; b < batch; ++b) {
          const auto& sel = route.decisions[b].selected;
          std::size_t k = 0;
          for (std::size_t i = 0; i < seq; ++i) {
            const bool member = k < sel.size() && sel[k] == i;
            if (member) ++k;
            res.agree += causal_route_decision(trace.decision_logits[b * seq + i]) == member;
            ++res.judged;
          }
        }
        if (cfg.variant == Variant::kMod && cfg.sampler.method == RouteMethod::kAuxLoss) {
          const Tensor term = aux_router_bce(route.router_logits, route.selected_rows);
          res.aux_loss = res.aux_loss.defined() ? add(res.aux_loss, term) : term;
        }
        if (predicted.defined()) {
          const Tensor term = bce_with_logits(predicted, topk_targets(x.rows(), route.selected_rows));
          res.predictor_loss = res.predictor_loss.defined() ? add(res.predictor_loss, term) : term;
        }
      }
    }
    trace.decisions = std::move(route.decisions);
    x = route.out;
    res.blocks.push_back(std::move(trace));
  }
  const Tensor xf = layer_norm(x, model.ln_f.gain, model.ln_f.bias);
  res.logits = matmul_bt(xf, model.embed);
  return res;
}

/// LM loss plus the configured auxiliary terms.
inline Tensor training_loss(const ModelConfig& cfg, const ForwardResult& fwd, std::span<const std::size_t> targets) {
  Tensor loss = cross_entropy(fwd.logits, targets);
  if (fwd.aux_loss.defined() && cfg.sampler.aux_loss_weight > 0.0)
    loss = add(loss, scale(fwd.aux_loss, cfg.sampler.aux_loss_weight));
  if (fwd.predictor_loss.defined()) loss = add(loss, fwd.predictor_loss);
  return loss;
}

}  // namespace mod
