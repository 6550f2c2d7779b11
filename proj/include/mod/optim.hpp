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

// AdamW with global-norm clipping, and the warmup + cosine schedule.

#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>
#include <vector>

#include "mod/config.hpp"
#include "mod/model.hpp"

namespace mod {

struct ScheduleConfig {
  double peak_lr = 3e-3;
  double min_lr = 3e-4;
  std::size_t warmup = 100;
  std::size_t steps = 1000;

  void validate() const {
    if (steps == 0) throw ConfigError("train.steps must be >= 1");
    if (warmup >= steps) throw ConfigError("train.warmup must be smaller than train.steps");
    if (peak_lr <= 0.0 || min_lr < 0.0 || min_lr > peak_lr) throw ConfigError("need 0 <= train.min_lr <= train.lr, lr > 0");
  }
};

/// Linear warmup 0 -> peak, then cosine peak -> min, reaching min at `steps`.
inline double lr_at(std::size_t step, const ScheduleConfig& s) {
  if (step > s.steps) throw ContractError("lr_at: step " + std::to_string(step) + " past the schedule horizon");
  if (step < s.warmup) return s.peak_lr * static_cast<double>(step) / static_cast<double>(s.warmup);
  const double t = static_cast<double>(step - s.warmup) / static_cast<double>(s.steps - s.warmup);
  return s.min_lr + 0.5 * (s.peak_lr - s.min_lr) * (1.0 + std::cos(std::numbers::pi * t));
}

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
  double clip_norm = 1.0;  // 0 disables clipping
};

/// Matrices decay; vectors (biases, norms) and d×1 projections such as the
/// token routers do not.
inline bool decays(const Tensor& t) { return t.rank() == 2 && t.cols() > 1; }

struct AdamW {
  AdamWConfig cfg;
  std::size_t t = 0;
  std::vector<std::vector<double>> m, v;

  static AdamW for_model(const Model& model, const AdamWConfig& cfg) {
    AdamW a;
    a.cfg = cfg;
    for (const auto& [name, p] : model.named_parameters()) {
      a.m.emplace_back(p.size(), 0.0);
      a.v.emplace_back(p.size(), 0.0);
    }
    return a;
  }

  /// Clips, then applies one update. Returns the pre-clip gradient norm.
  double step(Model& model, double lr) {
    auto params = model.named_parameters();
    if (params.size() != m.size()) throw ContractError("optimizer state does not match the model");
    double sq = 0.0;
    for (const auto& [name, p] : params)
      for (double g : p.grad()) sq += g * g;
    const double norm = std::sqrt(sq);
    const double clip = cfg.clip_norm > 0.0 && norm > cfg.clip_norm ? cfg.clip_norm / norm : 1.0;
    ++t;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto& [name, p] = params[k];
      const auto grad = p.grad();
      auto data = p.mutable_data();
      const double wd = decays(p) ? cfg.weight_decay : 0.0;
      for (std::size_t i = 0; i < data.size(); ++i) {
        const double g = grad.empty() ? 0.0 : grad[i] * clip;
        m[k][i] = cfg.beta1 * m[k][i] + (1.0 - cfg.beta1) * g;
        v[k][i] = cfg.beta2 * v[k][i] + (1.0 - cfg.beta2) * g * g;
        const double mh = m[k][i] / c1, vh = v[k][i] / c2;
        data[i] -= lr * (mh / (std::sqrt(vh) + cfg.eps) + wd * data[i]);
      }
    }
    return norm;
  }
};

}  // namespace mod
