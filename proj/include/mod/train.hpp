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

// Training loop, held-out evaluation and the metrics stream.

#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mod/checkpoint.hpp"
#include "mod/config.hpp"
#include "mod/data.hpp"
#include "mod/model.hpp"
#include "mod/optim.hpp"

namespace mod {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string format_double(double v) {
  std::ostringstream s;
  s.precision(17);
  s << v;
  return s.str();
}

struct TrainConfig {
  std::string corpus = "synthetic";  // a file path, or "synthetic"
  std::size_t synthetic_bytes = 1 << 20;
  double split = 0.9;
  std::size_t batch = 8;
  ScheduleConfig schedule{3e-3, 3e-4, 100, 3000};
  AdamWConfig optimizer;
  std::uint64_t seed = 1;
  std::size_t eval_interval = 100;
  std::size_t eval_windows = 64;
  std::size_t checkpoint_interval = 0;  // 0: final checkpoint only

  void validate() const {
    if (batch < 1) throw ConfigError("train.batch must be >= 1");
    if (!(split > 0.0 && split < 1.0)) throw ConfigError("train.split must lie in (0, 1)");
    if (eval_interval < 1) throw ConfigError("train.eval_interval must be >= 1");
    if (eval_windows < 1) throw ConfigError("train.eval_windows must be >= 1");
    schedule.validate();
  }
};

inline const std::set<std::string>& train_keys() {
  static const std::set<std::string> k{"train.corpus",        "train.synthetic_bytes", "train.split",       "train.batch",
                                       "train.steps",         "train.lr",              "train.min_lr",      "train.warmup",
                                       "train.beta1",         "train.beta2",           "train.eps",         "train.weight_decay",
                                       "train.clip",          "train.seed",            "train.eval_interval", "train.eval_windows",
                                       "train.checkpoint_interval"};
  return k;
}

inline const std::set<std::string>& model_keys() {
  static const std::set<std::string> k{"model.vocab_size", "model.d_model",     "model.n_heads",      "model.n_layers",
                                       "model.d_ff",       "model.seq_len",     "model.variant",      "model.seed",
                                       "model.gate",       "routing.pattern",   "routing.capacity",   "moe.experts",
                                       "moe.capacity",     "sampler.method",    "sampler.aux_weight", "sampler.predictor_hidden",
                                       "sampler.temperature", "sampler.max_new_tokens"};
  return k;
}

/// Rejects keys that neither config consumes, so typos are not silently ignored.
inline void check_known_keys(const KeyValues& kv) {
  for (const auto& [k, v] : kv)
    if (!train_keys().count(k) && !model_keys().count(k)) throw ConfigError("unknown config key '" + k + "'");
}

inline TrainConfig train_config_from(const KeyValues& kv) {
  TrainConfig c;
  // min_lr follows lr unless set explicitly.
  bool min_lr_set = false;
  for (const auto& [k, v] : kv) {
    if (k == "train.corpus") c.corpus = v;
    else if (k == "train.synthetic_bytes") c.synthetic_bytes = parse_number<std::size_t>(k, v);
    else if (k == "train.split") c.split = parse_number<double>(k, v);
    else if (k == "train.batch") c.batch = parse_number<std::size_t>(k, v);
    else if (k == "train.steps") c.schedule.steps = parse_number<std::size_t>(k, v);
    else if (k == "train.lr") c.schedule.peak_lr = parse_number<double>(k, v);
    else if (k == "train.min_lr") {
      c.schedule.min_lr = parse_number<double>(k, v);
      min_lr_set = true;
    } else if (k == "train.warmup") c.schedule.warmup = parse_number<std::size_t>(k, v);
    else if (k == "train.beta1") c.optimizer.beta1 = parse_number<double>(k, v);
    else if (k == "train.beta2") c.optimizer.beta2 = parse_number<double>(k, v);
    else if (k == "train.eps") c.optimizer.eps = parse_number<double>(k, v);
    else if (k == "train.weight_decay") c.optimizer.weight_decay = parse_number<double>(k, v);
    else if (k == "train.clip") c.optimizer.clip_norm = parse_number<double>(k, v);
    else if (k == "train.seed") c.seed = parse_number<std::uint64_t>(k, v);
    else if (k == "train.eval_interval") c.eval_interval = parse_number<std::size_t>(k, v);
    else if (k == "train.eval_windows") c.eval_windows = parse_number<std::size_t>(k, v);
    else if (k == "train.checkpoint_interval") c.checkpoint_interval = parse_number<std::size_t>(k, v);
  }
  if (!min_lr_set) c.schedule.min_lr = c.schedule.peak_lr / 10.0;
  c.validate();
  return c;
}

inline KeyValues to_key_values(const TrainConfig& c) {
  return {{"train.corpus", c.corpus},
          {"train.synthetic_bytes", std::to_string(c.synthetic_bytes)},
          {"train.split", format_double(c.split)},
          {"train.batch", std::to_string(c.batch)},
          {"train.steps", std::to_string(c.schedule.steps)},
          {"train.lr", format_double(c.schedule.peak_lr)},
          {"train.min_lr", format_double(c.schedule.min_lr)},
          {"train.warmup", std::to_string(c.schedule.warmup)},
          {"train.beta1", format_double(c.optimizer.beta1)},
          {"train.beta2", format_double(c.optimizer.beta2)},
          {"train.eps", format_double(c.optimizer.eps)},
          {"train.weight_decay", format_double(c.optimizer.weight_decay)},
          {"train.clip", format_double(c.optimizer.clip_norm)},
          {"train.seed", std::to_string(c.seed)},
          {"train.eval_interval", std::to_string(c.eval_interval)},
          {"train.eval_windows", std::to_string(c.eval_windows)},
          {"train.checkpoint_interval", std::to_string(c.checkpoint_interval)}};
}

/// The synthetic corpus is fixed across training seeds.
inline constexpr std::uint64_t kSyntheticCorpusSeed = 2026;

inline std::string load_corpus_text(const TrainConfig& c) {
  if (c.corpus == "synthetic") return synthetic_corpus(c.synthetic_bytes, kSyntheticCorpusSeed);
  return read_file(c.corpus);
}

// ---------------------------------------------------------------------------

struct EvalResult {
  double loss = 0.0;              // mean NLL per token
  double agreement = 1.0;         // causal decision vs top-k membership
  std::size_t judged = 0;
  std::vector<double> routed_fraction;  // per routed block
  std::size_t tokens = 0;
};

/// Held-out NLL under `mode`. Agreement always comes from the teacher-forced
/// pass since it compares against top-k membership.
inline EvalResult evaluate(const Model& model, const Batch& windows, EvalMode mode, std::uint64_t stochastic_seed = 0,
                           std::size_t chunk = 8) {
  check_mode_supported(model.cfg, mode);
  if (windows.batch == 0) throw DataError("no evaluation windows");
  Tape::Pause no_grad;
  const std::size_t seq = windows.inputs.size() / windows.batch;
  EvalResult r;
  double nll = 0.0;
  std::vector<double> routed;
  std::vector<std::size_t> rows;
  std::size_t agree = 0;
  for (std::size_t b0 = 0; b0 < windows.batch; b0 += chunk) {
    const std::size_t nb = std::min(chunk, windows.batch - b0);
    const std::span<const std::size_t> in(windows.inputs.data() + b0 * seq, nb * seq);
    const std::span<const std::size_t> tg(windows.targets.data() + b0 * seq, nb * seq);
    ForwardOptions o;
    o.mode = mode;
    o.stochastic_seed = stochastic_seed;
    const ForwardResult f = lm_forward(model, in, nb, o);
    nll += cross_entropy(f.logits, tg).item() * static_cast<double>(nb * seq);
    if (routed.empty()) {
      routed.assign(f.blocks.size(), 0.0);
      rows.assign(f.blocks.size(), 0);
    }
    for (std::size_t k = 0; k < f.blocks.size(); ++k) {
      routed[k] += static_cast<double>(f.blocks[k].rows_processed);
      rows[k] += nb * seq;
    }
    if (mode == EvalMode::kTeacherForced) {
      agree += f.agree;
      r.judged += f.judged;
    } else {
      ForwardOptions t;
      t.stochastic_seed = stochastic_seed;
      const ForwardResult tf = lm_forward(model, in, nb, t);
      agree += tf.agree;
      r.judged += tf.judged;
    }
  }
  r.tokens = windows.inputs.size();
  r.loss = nll / static_cast<double>(r.tokens);
  r.agreement = r.judged ? static_cast<double>(agree) / static_cast<double>(r.judged) : 1.0;
  for (std::size_t k = 0; k < routed.size(); ++k) r.routed_fraction.push_back(routed[k] / static_cast<double>(rows[k]));
  return r;
}

// ---------------------------------------------------------------------------

struct MetricsRecord {
  std::size_t step = 0;
  double lr = 0.0;
  double train_loss = 0.0;  // mean training loss since the previous record
  double val_loss = 0.0;
  double aux_loss = 0.0;    // mean router BCE since the previous record
  double predictor_loss = 0.0;
  double predictor_accuracy = 1.0;
  std::vector<double> routed_fraction;
  double grad_norm = 0.0;
  // timing, excluded from determinism comparisons
  double tokens_per_sec = 0.0;
  double step_time_ms = 0.0;

  nlohmann::json to_json() const {
    return {{"step", step},
            {"lr", lr},
            {"train_loss", train_loss},
            {"val_loss", val_loss},
            {"aux_loss", aux_loss},
            {"predictor_loss", predictor_loss},
            {"predictor_accuracy", predictor_accuracy},
            {"routed_fraction", routed_fraction},
            {"grad_norm", grad_norm},
            {"tokens_per_sec", tokens_per_sec},
            {"step_time_ms", step_time_ms}};
  }

  static MetricsRecord from_json(const nlohmann::json& j) {
    MetricsRecord r;
    r.step = j.at("step").get<std::size_t>();
    r.lr = j.at("lr").get<double>();
    r.train_loss = j.at("train_loss").get<double>();
    r.val_loss = j.at("val_loss").get<double>();
    r.aux_loss = j.value("aux_loss", 0.0);
    r.predictor_loss = j.value("predictor_loss", 0.0);
    r.predictor_accuracy = j.value("predictor_accuracy", 1.0);
    r.routed_fraction = j.value("routed_fraction", std::vector<double>{});
    r.grad_norm = j.value("grad_norm", 0.0);
    r.tokens_per_sec = j.value("tokens_per_sec", 0.0);
    r.step_time_ms = j.value("step_time_ms", 0.0);
    return r;
  }

  /// The record with timing fields cleared.
  MetricsRecord without_timing() const {
    MetricsRecord r = *this;
    r.tokens_per_sec = 0.0;
    r.step_time_ms = 0.0;
    return r;
  }
};

inline std::vector<MetricsRecord> read_metrics(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open metrics " + path);
  std::vector<MetricsRecord> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(MetricsRecord::from_json(nlohmann::json::parse(line)));
  return out;
}

// ---------------------------------------------------------------------------

struct TrainOptions {
  std::filesystem::path run_dir;           // empty: keep everything in memory
  std::optional<std::size_t> stop_after;   // stop (and checkpoint) after this step, for resume tests
  std::function<void(const MetricsRecord&)> on_record;
};

struct TrainResult {
  Checkpoint state;
  std::vector<MetricsRecord> records;
  EvalResult final_eval;
  double seconds = 0.0;
};

namespace detail {

struct Accumulator {
  double loss = 0.0, aux = 0.0, pred = 0.0, seconds = 0.0;
  std::size_t steps = 0;

  nlohmann::json to_json() const { return {{"loss", loss}, {"aux", aux}, {"pred", pred}, {"seconds", seconds}, {"steps", steps}}; }
  static Accumulator from_json(const nlohmann::json& j) {
    Accumulator a;
    if (j.is_null()) return a;
    a.loss = j.at("loss").get<double>();
    a.aux = j.at("aux").get<double>();
    a.pred = j.at("pred").get<double>();
    a.seconds = j.at("seconds").get<double>();
    a.steps = j.at("steps").get<std::size_t>();
    return a;
  }
};

inline std::uint64_t eval_seed(std::uint64_t seed) { return mix_seed(seed, 0xE7A1); }

}  // namespace detail

inline Checkpoint fresh_state(const TrainConfig& tc, const ModelConfig& mc) {
  Checkpoint c;
  c.model_cfg = mc;
  c.train_kv = to_key_values(tc);
  c.data_seed = tc.seed;
  c.model = Model::init(mc);
  c.optimizer = AdamW::for_model(c.model, tc.optimizer);
  return c;
}

/// Trains from `state` (fresh or resumed) to the schedule horizon.
inline TrainResult train_run(const TrainConfig& tc, Checkpoint state, const Dataset& data, const TrainOptions& opts = {}) {
  tc.validate();
  const ModelConfig& mc = state.model_cfg;
  data.require(tc.batch, mc.seq_len);
  const Batch val = data.validation_windows(mc.seq_len, tc.eval_windows);
  namespace fs = std::filesystem;
  const bool persist = !opts.run_dir.empty();
  std::ofstream metrics;
  if (persist) {
    fs::create_directories(opts.run_dir);
    KeyValues resolved = to_key_values(mc);
    resolved.merge(to_key_values(tc));
    std::ofstream(opts.run_dir / "config.txt") << format_key_values(resolved);
    const fs::path metrics_path = opts.run_dir / "metrics.jsonl";
    // Resuming drops records written after the checkpoint so the file stays one record per step.
    std::vector<MetricsRecord> kept;
    if (state.step > 0 && fs::exists(metrics_path))
      for (auto& r : read_metrics(metrics_path.string()))
        if (r.step <= state.step) kept.push_back(std::move(r));
    metrics.open(metrics_path, std::ios::trunc);
    for (const auto& r : kept) metrics << r.to_json().dump() << "\n";
    if (!metrics) throw TrainingError("cannot write metrics under " + opts.run_dir.string());
  }

  TrainResult res;
  detail::Accumulator acc = detail::Accumulator::from_json(state.extra.value("accumulator", nlohmann::json()));
  const auto started = std::chrono::steady_clock::now();
  auto checkpoint_to = [&](const std::string& name) {
    state.extra["accumulator"] = acc.to_json();
    if (persist) save_checkpoint(state, (opts.run_dir / name).string());
  };

  const std::size_t last = opts.stop_after ? std::min(*opts.stop_after, tc.schedule.steps) : tc.schedule.steps;
  while (state.step < last) {
    const std::size_t step = state.step + 1;
    const auto t0 = std::chrono::steady_clock::now();
    const Batch b = data.train_batch(state.data_seed, step, tc.batch, mc.seq_len);
    state.model.zero_grad();
    double loss_value = 0.0, aux_value = 0.0, pred_value = 0.0, norm = 0.0;
    try {
      Tape tape;
      Tape::Scope scope(tape);
      ForwardOptions fo;
      fo.stochastic_seed = mix_seed(state.data_seed, step);
      const ForwardResult f = lm_forward(state.model, b.inputs, b.batch, fo);
      const Tensor loss = training_loss(mc, f, b.targets);
      loss_value = loss.item();
      if (f.aux_loss.defined()) aux_value = f.aux_loss.item();
      if (f.predictor_loss.defined()) pred_value = f.predictor_loss.item();
      tape.backward(loss);
      norm = state.optimizer.step(state.model, lr_at(step, tc.schedule));
      if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
      for (const auto& [name, p] : state.model.named_parameters())
        for (double v : p.data())
          if (!std::isfinite(v)) throw NumericError("parameter " + name + " became non-finite");
    } catch (const NumericError& e) {
      checkpoint_to("diverged.ckpt");
      throw TrainingError("training diverged at step " + std::to_string(step) + ": " + e.what() +
                          (persist ? " (diagnostic checkpoint: " + (opts.run_dir / "diverged.ckpt").string() + ")" : ""));
    }
    state.step = step;
    acc.loss += loss_value;
    acc.aux += aux_value;
    acc.pred += pred_value;
    acc.seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    ++acc.steps;

    if (step % tc.eval_interval == 0 || step == tc.schedule.steps) {
      const EvalResult ev = evaluate(state.model, val, EvalMode::kTeacherForced, detail::eval_seed(state.data_seed));
      MetricsRecord r;
      r.step = step;
      r.lr = lr_at(step, tc.schedule);
      r.train_loss = acc.loss / static_cast<double>(acc.steps);
      r.aux_loss = acc.aux / static_cast<double>(acc.steps);
      r.predictor_loss = acc.pred / static_cast<double>(acc.steps);
      r.val_loss = ev.loss;
      r.predictor_accuracy = ev.agreement;
      r.routed_fraction = ev.routed_fraction;
      r.grad_norm = norm;
      r.step_time_ms = 1000.0 * acc.seconds / static_cast<double>(acc.steps);
      r.tokens_per_sec = static_cast<double>(acc.steps * tc.batch * mc.seq_len) / acc.seconds;
      acc = {};
      if (persist) metrics << r.to_json().dump() << "\n" << std::flush;
      if (opts.on_record) opts.on_record(r);
      res.records.push_back(std::move(r));
    }
    if (tc.checkpoint_interval && step % tc.checkpoint_interval == 0 && step != tc.schedule.steps)
      checkpoint_to("step_" + std::to_string(step) + ".ckpt");
  }
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  if (state.step == tc.schedule.steps) {
    res.final_eval = res.records.empty() ? evaluate(state.model, val, EvalMode::kTeacherForced, detail::eval_seed(state.data_seed))
                                         : EvalResult{res.records.back().val_loss, res.records.back().predictor_accuracy, 0,
                                                      res.records.back().routed_fraction, val.inputs.size()};
    checkpoint_to("final.ckpt");
  } else {
    checkpoint_to("step_" + std::to_string(state.step) + ".ckpt");
  }
  res.state = std::move(state);
  return res;
}

}  // namespace mod
