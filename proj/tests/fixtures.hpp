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

#include <random>
#include <string>
#include <utility>
#include <vector>

#include "mod/model.hpp"
#include "oracles.hpp"

namespace mod::testing {

inline ModelConfig tiny_config(Variant variant, std::size_t d = 16, std::size_t heads = 2, std::size_t layers = 2,
                               std::size_t seq = 8, std::size_t capacity = 4) {
  ModelConfig c;
  c.vocab_size = 257;
  c.d_model = d;
  c.n_heads = heads;
  c.n_layers = layers;
  c.d_ff = 2 * d;
  c.seq_len = seq;
  c.variant = variant;
  c.capacity = capacity;
  c.routing_pattern = "all";
  c.moe.num_experts = 2;
  c.moe.capacity = capacity / 2 == 0 ? 1 : capacity / 2;
  c.seed = 5;
  c.resolve();
  return c;
}

/// Replaces every parameter with N(0, stddev) draws so no gradient or
/// routing decision is degenerate at initialization.
inline void randomize(Model& m, std::uint64_t seed, double stddev = 0.3) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, stddev);
  for (auto& [name, t] : m.named_parameters())
    for (double& v : t.mutable_data()) v = n(rng);
}

inline std::vector<std::size_t> random_tokens(std::size_t n, std::mt19937_64& rng, std::size_t vocab = 256) {
  std::vector<std::size_t> t(n);
  for (auto& v : t) v = rng() % vocab;
  return t;
}

/// Finite-difference check of every parameter of `m` on the training loss.
/// Entries with |grad| below `floor` are compared on an absolute scale: at
/// h = 1e-5 the central difference of an O(1) loss carries ~1e-10 of
/// rounding noise, which swamps the relative error of a 1e-6 gradient.
inline GradCheckResult model_grad_check(Model& m, const std::vector<std::size_t>& tokens,
                                        const std::vector<std::size_t>& targets, std::size_t batch,
                                        const ForwardOptions& opts = {}, double floor = 1e-5) {
  m.zero_grad();
  {
    Tape tape;
    Tape::Scope scope(tape);
    tape.backward(training_loss(m.cfg, lm_forward(m, tokens, batch, opts), targets));
  }
  const auto params = m.named_parameters();
  return finite_difference_check(
      [&] {
        Tape::Pause pause;
        return training_loss(m.cfg, lm_forward(m, tokens, batch, opts), targets).item();
      },
      params, 1e-5, floor);
}

}  // namespace mod::testing
