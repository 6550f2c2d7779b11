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

// Routing-trace export: one CSV row per (token, routed block), a 50-bin
// histogram of router sigmoid weights, and run comparison tables.

#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mod/data.hpp"
#include "mod/flops.hpp"
#include "mod/model.hpp"
#include "mod/train.hpp"

namespace mod {

struct TraceRow {
  std::size_t sequence = 0;
  std::size_t sequence_pos = 0;
  std::size_t token_byte = 0;  // 256 marks BOS
  std::size_t block_index = 0;
  double router_logit = 0.0;
  double sigmoid_weight = 0.0;
  bool selected = false;
  double prediction_entropy_nats = 0.0;
  long expert_id = -1;  // -1: token router; otherwise the expert column
};

struct Histogram {
  static constexpr std::size_t kBins = 50;
  std::vector<std::size_t> counts = std::vector<std::size_t>(kBins, 0);
  std::size_t total = 0;
  std::size_t above_half = 0;

  void add(double w) {
    const auto bin = std::min<std::size_t>(kBins - 1, static_cast<std::size_t>(w * static_cast<double>(kBins)));
    ++counts[bin];
    ++total;
    above_half += w > 0.5;
  }
  double fraction_above_half() const { return total ? static_cast<double>(above_half) / static_cast<double>(total) : 0.0; }
};

struct RoutingTrace {
  std::vector<TraceRow> rows;
  Histogram all;                      // token routers, every routed block
  std::vector<std::size_t> blocks;    // routed block indices
  std::vector<Histogram> per_block;
  double capacity_fraction = 0.0;     // C/S of the routed blocks
};

inline double entropy_nats(std::span<const double> logits) {
  double mx = -INFINITY;
  for (double v : logits) mx = std::max(mx, v);
  double z = 0.0;
  for (double v : logits) z += std::exp(v - mx);
  const double log_z = std::log(z) + mx;
  double h = 0.0;
  for (double v : logits) {
    const double lp = v - log_z;
    h -= std::exp(lp) * lp;
  }
  return h;
}

/// Runs `text` through the model in BOS-prefixed windows of seq_len and
/// records every routing decision under teacher-forced top-k.
inline RoutingTrace export_routing_trace(const Model& model, std::string_view text, std::size_t max_windows = 64) {
  const ModelConfig& cfg = model.cfg;
  if (cfg.variant == Variant::kBaseline) throw ConfigError("routing traces need a routed variant");
  const auto ids = tokenize(text);
  const std::size_t seq = cfg.seq_len;
  Batch windows;
  for (std::size_t off = 0; off + seq <= ids.size() && windows.batch < max_windows; off += seq) append_window(windows, ids, off, seq);
  if (windows.batch == 0) throw DataError("text is shorter than one sequence of " + std::to_string(seq) + " bytes");

  Tape::Pause no_grad;
  RoutingTrace tr;
  for (std::size_t w = 0; w < windows.batch; ++w) {
    const std::span<const std::size_t> in(windows.inputs.data() + w * seq, seq);
    const ForwardResult f = lm_forward(model, in, 1);
    std::vector<double> ent(seq);
    for (std::size_t i = 0; i < seq; ++i) ent[i] = entropy_nats(f.logits.data().subspan(i * cfg.vocab_size, cfg.vocab_size));
    if (tr.blocks.empty()) {
      for (const auto& b : f.blocks)
        if (!b.decisions.empty()) tr.blocks.push_back(b.block);
      tr.per_block.resize(tr.blocks.size());
    }
    std::size_t routed_k = 0;
    for (const auto& b : f.blocks) {
      if (!b.decisions.empty()) {
        const RoutingDecision& d = b.decisions[0];
        std::size_t k = 0;
        for (std::size_t i = 0; i < seq; ++i) {
          const bool sel = k < d.selected.size() && d.selected[k] == i;
          if (sel) ++k;
          const double sw = 1.0 / (1.0 + std::exp(-d.logits[i]));
          tr.rows.push_back({w, i, in[i], b.block, d.logits[i], sw, sel, ent[i], -1});
          tr.all.add(sw);
          tr.per_block[routed_k].add(sw);
        }
        tr.capacity_fraction = static_cast<double>(d.selected.size()) / static_cast<double>(seq);
        ++routed_k;
      }
      for (const auto& e : b.experts) {
        const RoutingDecision& d = e.per_sequence[0];
        std::size_t k = 0;
        for (std::size_t i = 0; i < d.logits.size(); ++i) {
          const bool sel = k < d.selected.size() && d.selected[k] == i;
          if (sel) ++k;
          // Staged experts see only the gathered subset; map back to positions.
          std::size_t pos = i;
          if (!b.decisions.empty()) pos = b.decisions[0].selected[i];
          tr.rows.push_back({w, pos, in[pos], b.block, d.logits[i], 1.0 / (1.0 + std::exp(-d.logits[i])), sel, ent[pos],
                             static_cast<long>(e.expert)});
        }
      }
    }
  }
  return tr;
}

inline void write_trace_csv(const RoutingTrace& tr, std::ostream& out) {
  out << "sequence,sequence_pos,token_byte,block_index,router_logit,sigmoid_weight,selected,prediction_entropy_nats,expert_id\n";
  char buf[256];
  for (const auto& r : tr.rows) {
    std::snprintf(buf, sizeof buf, "%zu,%zu,%zu,%zu,%.17g,%.17g,%d,%.17g,%ld\n", r.sequence, r.sequence_pos, r.token_byte,
                  r.block_index, r.router_logit, r.sigmoid_weight, r.selected ? 1 : 0, r.prediction_entropy_nats, r.expert_id);
    out << buf;
  }
}

inline nlohmann::json histogram_json(const RoutingTrace& tr) {
  auto one = [](const Histogram& h) {
    return nlohmann::json{{"counts", h.counts}, {"total", h.total}, {"fraction_above_half", h.fraction_above_half()}};
  };
  nlohmann::json j;
  j["bins"] = Histogram::kBins;
  j["range"] = {0.0, 1.0};
  j["capacity_fraction"] = tr.capacity_fraction;
  j["all_blocks"] = one(tr.all);
  nlohmann::json per = nlohmann::json::array();
  for (std::size_t k = 0; k < tr.blocks.size(); ++k) {
    nlohmann::json b = one(tr.per_block[k]);
    b["block_index"] = tr.blocks[k];
    per.push_back(b);
  }
  j["per_block"] = per;
  return j;
}

// ---------------------------------------------------------------------------

struct RunSummary {
  std::string name;
  std::string variant;
  std::size_t steps = 0;
  double final_val_loss = 0.0;
  std::uint64_t flops_per_forward = 0;
  double flops_ratio = 1.0;
  double steps_per_sec = 0.0;
  std::size_t params = 0;
};

/// Summarizes a run directory from its persisted config and metrics only.
/// Returns nullopt (with a warning on `warn`) when the run is incomplete.
inline std::optional<RunSummary> summarize_run(const std::filesystem::path& dir, std::ostream& warn) {
  const auto cfg_path = dir / "config.txt", metrics_path = dir / "metrics.jsonl";
  if (!std::filesystem::exists(cfg_path) || !std::filesystem::exists(metrics_path)) {
    warn << "warning: skipping " << dir.string() << ": missing config.txt or metrics.jsonl\n";
    return std::nullopt;
  }
  const KeyValues kv = load_key_values(cfg_path.string());
  const ModelConfig mc = model_config_from(kv);
  const TrainConfig tc = train_config_from(kv);
  const auto records = read_metrics(metrics_path.string());
  if (records.empty() || records.back().step != tc.schedule.steps) {
    warn << "warning: skipping " << dir.string() << ": run incomplete (" << (records.empty() ? 0 : records.back().step) << "/"
         << tc.schedule.steps << " steps)\n";
    return std::nullopt;
  }
  RunSummary s;
  s.name = dir.filename().string();
  s.variant = std::string(to_string(mc.variant));
  s.steps = tc.schedule.steps;
  s.final_val_loss = records.back().val_loss;
  const FlopReport fr = model_forward_flops(mc);
  s.flops_per_forward = fr.total;
  s.flops_ratio = fr.ratio_to_baseline;
  double ms = 0.0;
  for (const auto& r : records) ms += r.step_time_ms;
  s.steps_per_sec = 1000.0 * static_cast<double>(records.size()) / ms;
  s.params = Model::init(mc).parameter_count();
  return s;
}

inline void write_compare_csv(const std::vector<RunSummary>& runs, std::ostream& out) {
  out << "run,variant,steps,final_val_loss,flops_per_forward,flops_ratio_to_baseline,steps_per_sec,params\n";
  char buf[512];
  for (const auto& r : runs) {
    std::snprintf(buf, sizeof buf, "%s,%s,%zu,%.6f,%llu,%.6f,%.3f,%zu\n", r.name.c_str(), r.variant.c_str(), r.steps, r.final_val_loss,
                  static_cast<unsigned long long>(r.flops_per_forward), r.flops_ratio, r.steps_per_sec, r.params);
    out << buf;
  }
}

}  // namespace mod
