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

// Transformer building blocks: pre-norm attention and MLP sub-blocks over a
// batch of sequences stored as stacked rows.

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "mod/tensor.hpp"

namespace mod {

/// Row bookkeeping for a batch flattened to [N×d]: each row's original
/// position within its sequence, and the contiguous row range of each
/// sequence. Gathered subsets keep their original positions.
struct RowLayout {
  std::vector<std::size_t> positions;
  std::vector<Segment> segments;

  std::size_t rows() const { return positions.size(); }

  /// B sequences of length S, positions 0..S-1.
  static RowLayout dense(std::size_t batch, std::size_t seq_len) {
    RowLayout l;
    l.positions.reserve(batch * seq_len);
    for (std::size_t b = 0; b < batch; ++b) {
      l.segments.push_back({b * seq_len, seq_len});
      for (std::size_t i = 0; i < seq_len; ++i) l.positions.push_back(i);
    }
    return l;
  }

  /// Layout of the rows `global_idx` (sorted) selected out of this layout.
  RowLayout select(std::span<const std::size_t> global_idx) const {
    RowLayout out;
    out.positions.reserve(global_idx.size());
    std::size_t j = 0;
    for (const auto& seg : segments) {
      const std::size_t begin = out.positions.size();
      while (j < global_idx.size() && global_idx[j] < seg.begin + seg.length) {
        out.positions.push_back(positions[global_idx[j]]);
        ++j;
      }
      out.segments.push_back({begin, out.positions.size() - begin});
    }
    return out;
  }
};

struct MlpWeights {
  Tensor w1, b1, w2, b2;
};

struct AttentionWeights {
  Tensor wq, wk, wv, wo;
};

struct LayerNormWeights {
  Tensor gain, bias;
};

/// Parameters of one block. The router, predictor and expert members are
/// populated only for the block kinds that use them.
struct BlockWeights {
  LayerNormWeights ln1, ln2;
  AttentionWeights attn;
  MlpWeights ffn;
  Tensor router;          // [d×1] token router (MoD and staged blocks)
  MlpWeights predictor;   // d→h→1 causal membership predictor
  Tensor expert_router;   // [d×E'] expert affinities (E' includes the no-op column)
  std::vector<MlpWeights> experts;
};

/// gelu(x·W1 + b1)·W2 + b2
inline Tensor mlp(const MlpWeights& w, const Tensor& x) {
  return add_rowvec(matmul(gelu(add_rowvec(matmul(x, w.w1), w.b1)), w.w2), w.b2);
}

/// Causal multi-head self-attention with rotary encoding at the rows'
/// original positions, followed by the output projection.
inline Tensor attention(const AttentionWeights& w, const Tensor& x, const RowLayout& layout, std::size_t n_heads) {
  const Tensor q = rotary(matmul(x, w.wq), layout.positions, n_heads);
  const Tensor k = rotary(matmul(x, w.wk), layout.positions, n_heads);
  const Tensor v = matmul(x, w.wv);
  return matmul(causal_attention(q, k, v, layout.positions, layout.segments, n_heads), w.wo);
}

/// Residual contribution of a full transformer block on rows x:
/// a = attn(ln1(x)); m = mlp(ln2(x + a)); returns a + m.
inline Tensor block_delta(const BlockWeights& w, const Tensor& x, const RowLayout& layout, std::size_t n_heads) {
  const Tensor a = attention(w.attn, layer_norm(x, w.ln1.gain, w.ln1.bias), layout, n_heads);
  const Tensor h = add(x, a);
  const Tensor m = mlp(w.ffn, layer_norm(h, w.ln2.gain, w.ln2.bias));
  return add(a, m);
}

/// Standard pre-norm block: h = x + attn(ln1(x)); out = h + mlp(ln2(h)).
inline Tensor vanilla_block(const BlockWeights& w, const Tensor& x, const RowLayout& layout, std::size_t n_heads) {
  const Tensor h = add(x, attention(w.attn, layer_norm(x, w.ln1.gain, w.ln1.bias), layout, n_heads));
  return add(h, mlp(w.ffn, layer_norm(h, w.ln2.gain, w.ln2.bias)));
}

}  // namespace mod
