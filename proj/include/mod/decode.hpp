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

// Autoregressive decoding with per-block KV caches. A routed block only
// caches the tokens that were routed through it, so later tokens cannot
// attend to tokens that skipped the block there.

#pragma once

#include <cmath>
#include <cstddef>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include "mod/model.hpp"
#include "mod/sampling.hpp"
#include "mod/tensor.hpp"

namespace mod {

class StateError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct BlockCache {
  std::vector<double> keys;    // [n×d], rotary already applied
  std::vector<double> values;  // [n×d]
  std::vector<std::size_t> positions;

  std::size_t size() const { return positions.size(); }
};

struct DecodeState {
  std::vector<BlockCache> blocks;
  std::size_t length = 0;  // tokens consumed so far

  static DecodeState for_model(const Model& m) {
    DecodeState s;
    s.blocks.resize(m.cfg.n_layers);
    return s;
  }

  void validate(const Model& m) const {
    if (blocks.size() != m.cfg.n_layers) throw StateError("decode state has the wrong number of block caches");
    for (std::size_t l = 0; l < blocks.size(); ++l) {
      const BlockCache& c = blocks[l];
      if (c.keys.size() != c.size() * m.cfg.d_model || c.values.size() != c.keys.size())
        throw StateError("cache of block " + std::to_string(l) + " has inconsistent key/value storage");
      if (c.size() > length) throw StateError("cache of block " + std::to_string(l) + " is longer than the decoded prefix");
      if (m.cfg.block_kind(l) == BlockKind::kFull && c.size() != length)
        throw StateError("full block " + std::to_string(l) + " must cache every token");
      for (std::size_t i = 0; i < c.size(); ++i)
        if (c.positions[i] >= length || (i > 0 && c.positions[i] <= c.positions[i - 1]))
          throw StateError("cache positions of block " + std::to_string(l) + " are not strictly increasing");
    }
  }
};

struct DecodeOutput {
  std::vector<double> logits;  // [V] next-token logits
  std::vector<bool> routed;    // per block; full blocks always true
};

namespace detail {

// Single-query attention against a cache that already holds the query's own
// key. Mirrors causal_attention's arithmetic for one row so decoding and a
// full re-forward agree to the last bit.
inline std::vector<double> attend_cached(std::span<const double> q, const BlockCache& cache, std::size_t d, std::size_t n_heads) {
  const std::size_t hd = d / n_heads, c = cache.size();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<double> out(d, 0.0), p(c);
  for (std::size_t h = 0; h < n_heads; ++h) {
    double mx = -INFINITY;
    for (std::size_t j = 0; j < c; ++j) {
      const double* kj = cache.keys.data() + j * d + h * hd;
      double acc = 0.0;
      for (std::size_t t = 0; t < hd; ++t) acc += q[h * hd + t] * kj[t];
      p[j] = acc * inv_sqrt;
      mx = std::max(mx, p[j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (p[j] = std::exp(p[j] - mx));
    for (std::size_t j = 0; j < c; ++j) p[j] /= z;
    for (std::size_t j = 0; j < c; ++j) {
      const double* vj = cache.values.data() + j * d + h * hd;
      for (std::size_t t = 0; t < hd; ++t) out[h * hd + t] += p[j] * vj[t];
    }
  }
  return out;
}

// Runs attention + MLP for one token at `pos`, appending its k/v to `cache`.
// Returns (a, m): the attention output and the MLP output.
inline std::pair<Tensor, Tensor> block_step(const Model& model, const BlockWeights& w, const Tensor& x, std::size_t pos,
                                            BlockCache& cache) {
  const std::size_t d = model.cfg.d_model, heads = model.cfg.n_heads;
  const std::vector<std::size_t> p{pos};
  const Tensor n1 = layer_norm(x, w.ln1.gain, w.ln1.bias);
  const Tensor q = rotary(matmul(n1, w.attn.wq), p, heads);
  const Tensor k = rotary(matmul(n1, w.attn.wk), p, heads);
  const Tensor v = matmul(n1, w.attn.wv);
  cache.keys.insert(cache.keys.end(), k.data().begin(), k.data().end());
  cache.values.insert(cache.values.end(), v.data().begin(), v.data().end());
  cache.positions.push_back(pos);
  const Tensor ctx = Tensor::from({1, d}, attend_cached(q.data(), cache, d, heads));
  const Tensor a = matmul(ctx, w.attn.wo);
  const Tensor h = add(x, a);
  const Tensor m = mlp(w.ffn, layer_norm(h, w.ln2.gain, w.ln2.bias));
  return {a, m};
}

}  // namespace detail

/// Whether the variant supports cache-based causal decoding.
inline bool supports_cached_decode(const ModelConfig& cfg) {
  return cfg.variant == Variant::kBaseline || cfg.variant == Variant::kMod;
}

/// Consumes one token and returns next-token logits plus each block's
/// routing decision for it.
inline DecodeOutput decode_step(const Model& model, std::size_t token, DecodeState& state) {
  const ModelConfig& cfg = model.cfg;
  if (!supports_cached_decode(cfg))
    throw ContractError("variant " + std::string(to_string(cfg.variant)) + " cannot be decoded causally with caches");
  state.validate(model);
  Tape::Pause no_grad;
  const std::size_t pos = state.length;
  const std::vector<std::size_t> ids{token};
  Tensor x = embedding(model.embed, ids);
  DecodeOutput out;
  out.routed.assign(cfg.n_layers, true);
  const std::vector<std::size_t> row0{0};
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const BlockWeights& w = model.blocks[l];
    if (cfg.block_kind(l) == BlockKind::kFull) {
      auto [a, m] = detail::block_step(model, w, x, pos, state.blocks[l]);
      x = add(add(x, a), m);
      continue;
    }
    const Tensor r = router_logits(x, w.router);
    const double decision =
        cfg.sampler.method == RouteMethod::kPredictor ? predictor_forward(w.predictor, x)[0] : r[0];
    if (!causal_route_decision(decision)) {
      out.routed[l] = false;
      continue;
    }
    auto [a, m] = detail::block_step(model, w, x, pos, state.blocks[l]);
    Tensor delta = add(a, m);
    const Tensor picked = take(r, row0);
    delta = mul_rows(delta, cfg.gate == GateKind::kSigmoid ? sigmoid(picked) : picked);
    x = scatter_rows_add(x, row0, delta);
  }
  const Tensor logits = matmul_bt(layer_norm(x, model.ln_f.gain, model.ln_f.bias), model.embed);
  out.logits.assign(logits.data().begin(), logits.data().end());
  ++state.length;
  return out;
}

/// Greedy when temperature == 0, otherwise softmax(logits / T) sampling.
template <class Rng>
std::size_t pick_token(std::span<const double> logits, double temperature, Rng& rng) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i)
    if (logits[i] > logits[best]) best = i;
  if (temperature <= 0.0) return best;
  std::vector<double> w(logits.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::exp((logits[i] - logits[best]) / temperature);
  std::discrete_distribution<std::size_t> dist(w.begin(), w.end());
  return dist(rng);
}

struct Generation {
  std::vector<std::size_t> tokens;                // generated ids (prompt excluded)
  std::vector<std::vector<bool>> routes;          // per consumed token, per block
};

/// Feeds `prompt` then samples `max_new` tokens. Variants without a causal
/// routing rule fall back to re-running teacher-forced top-k over the whole
/// context at each step.
template <class Rng>
Generation generate(const Model& model, std::span<const std::size_t> prompt, std::size_t max_new, double temperature, Rng& rng) {
  if (prompt.empty()) throw ContractError("generate needs at least one prompt token");
  Generation g;
  if (supports_cached_decode(model.cfg)) {
    DecodeState state = DecodeState::for_model(model);
    DecodeOutput o;
    for (std::size_t t : prompt) {
      o = decode_step(model, t, state);
      g.routes.push_back(o.routed);
    }
    for (std::size_t i = 0; i < max_new; ++i) {
      const std::size_t next = pick_token(o.logits, temperature, rng);
      g.tokens.push_back(next);
      if (i + 1 == max_new) break;
      o = decode_step(model, next, state);
      g.routes.push_back(o.routed);
    }
    return g;
  }
  Tape::Pause no_grad;
  std::vector<std::size_t> context(prompt.begin(), prompt.end());
  for (std::size_t i = 0; i < max_new; ++i) {
    const ForwardResult f = lm_forward(model, context, 1);
    const std::size_t v = model.cfg.vocab_size;
    const auto all = f.logits.data();
    const std::size_t next = pick_token(all.subspan((context.size() - 1) * v, v), temperature, rng);
    g.tokens.push_back(next);
    context.push_back(next);
  }
  return g;
}

struct Agreement {
  std::size_t agree = 0;
  std::size_t total = 0;
  double fraction() const { return total == 0 ? 1.0 : static_cast<double>(agree) / static_cast<double>(total); }
};

/// Fraction of (token, routed block) pairs whose causal decision matches
/// teacher-forced top-k membership. `windows` holds whole sequences.
inline Agreement predictor_accuracy(const Model& model, std::span<const std::size_t> windows, std::size_t batch) {
  Tape::Pause no_grad;
  const ForwardResult f = lm_forward(model, windows, batch);
  return {f.agree, f.judged};
}

}  // namespace mod
