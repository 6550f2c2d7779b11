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

// modctl: train, evaluate, sample from, analyze and compare routed models.
//
// Exit codes: 0 success, 2 configuration error, 3 runtime failure.
// Run directories are created under $MOD_RUNS_DIR (default ./runs).

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mod/checkpoint.hpp"
#include "mod/data.hpp"
#include "mod/decode.hpp"
#include "mod/flops.hpp"
#include "mod/trace.hpp"
#include "mod/train.hpp"

namespace fs = std::filesystem;
using namespace mod;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

fs::path runs_root() {
  const char* env = std::getenv("MOD_RUNS_DIR");
  return env && *env ? fs::path(env) : fs::path("runs");
}

KeyValues load_config(const std::string& path, const std::vector<std::string>& overrides) {
  KeyValues kv = path.empty() ? KeyValues{} : load_key_values(path);
  for (const auto& o : overrides) apply_override(kv, o);
  check_known_keys(kv);
  return kv;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

void print_record(const MetricsRecord& r) {
  std::printf("step %6zu  lr %.2e  train %.4f  val %.4f  aux %.4f  pred_acc %.4f  %7.1f ms/step  routed", r.step, r.lr, r.train_loss,
              r.val_loss, r.aux_loss, r.predictor_accuracy, r.step_time_ms);
  for (double f : r.routed_fraction) std::printf(" %.3f", f);
  std::printf("\n");
  std::fflush(stdout);
}

// --- subcommands -----------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::vector<std::string> overrides;
  std::string name;
  std::string resume;
};

int cmd_train(const TrainArgs& a) {
  Checkpoint state;
  TrainConfig tc;
  if (!a.resume.empty()) {
    state = load_checkpoint(a.resume);
    KeyValues kv = to_key_values(state.model_cfg);
    for (const auto& [k, v] : state.train_kv) kv[k] = v;
    for (const auto& o : a.overrides) apply_override(kv, o);
    check_known_keys(kv);
    tc = train_config_from(kv);
  } else {
    const KeyValues kv = load_config(a.config, a.overrides);
    tc = train_config_from(kv);
    state = fresh_state(tc, model_config_from(kv));
  }
  std::string name = a.name;
  if (name.empty()) name = a.config.empty() ? std::string(to_string(state.model_cfg.variant)) : fs::path(a.config).stem().string();
  const fs::path dir = a.resume.empty() ? runs_root() / name : fs::path(a.resume).parent_path();

  const Dataset data = Dataset::from_text(load_corpus_text(tc), tc.split);
  const FlopReport fr = model_forward_flops(state.model_cfg);
  std::printf("run %s  variant %s  params %zu  flops/forward %llu (%.4f of baseline)\n", dir.string().c_str(),
              std::string(to_string(state.model_cfg.variant)).c_str(), state.model.parameter_count(),
              static_cast<unsigned long long>(fr.total), fr.ratio_to_baseline);
  TrainOptions o;
  o.run_dir = dir;
  o.on_record = print_record;
  const TrainResult res = train_run(tc, std::move(state), data, o);
  std::printf("done in %.1f s; final validation loss %.5f; checkpoint %s\n", res.seconds, res.final_eval.loss,
              (dir / "final.ckpt").string().c_str());
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& mode_name, const std::string& text_path, std::size_t windows) {
  const EvalMode mode = parse_eval_mode(mode_name);
  const Checkpoint c = load_checkpoint(ckpt);
  KeyValues kv = c.train_kv;
  const TrainConfig tc = train_config_from(kv);
  const std::size_t seq = c.model_cfg.seq_len;
  Batch val;
  if (text_path.empty()) {
    val = Dataset::from_text(load_corpus_text(tc), tc.split).validation_windows(seq, windows ? windows : tc.eval_windows);
  } else {
    const auto ids = tokenize(read_file(text_path));
    for (std::size_t off = 0; off + seq <= ids.size() && (windows == 0 || val.batch < windows); off += seq) append_window(val, ids, off, seq);
  }
  const EvalResult r = evaluate(c.model, val, mode, detail::eval_seed(tc.seed));
  nlohmann::json j{{"checkpoint", ckpt}, {"mode", mode_name},        {"loss", r.loss},
                   {"tokens", r.tokens}, {"agreement", r.agreement}, {"routed_fraction", r.routed_fraction}};
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_sample(const std::string& ckpt, const std::string& prompt, std::size_t max_new, double temperature, std::uint64_t seed,
               const std::string& trace_path) {
  const Checkpoint c = load_checkpoint(ckpt);
  std::vector<std::size_t> ids{kBosId};
  for (std::size_t t : tokenize(prompt)) ids.push_back(t);
  std::mt19937_64 rng(seed);
  const Generation g = generate(c.model, ids, max_new, temperature, rng);
  std::cout << prompt << detokenize(g.tokens, c.model_cfg.vocab_size) << "\n";
  if (!trace_path.empty()) {
    nlohmann::json routes = nlohmann::json::array();
    std::vector<std::size_t> consumed = ids;
    consumed.insert(consumed.end(), g.tokens.begin(), g.tokens.end());
    for (std::size_t i = 0; i < g.routes.size(); ++i)
      routes.push_back({{"position", i}, {"token", consumed[i]}, {"routed", g.routes[i]}});
    write_json(trace_path, {{"checkpoint", ckpt},
                            {"variant", to_string(c.model_cfg.variant)},
                            {"cached_decode", supports_cached_decode(c.model_cfg)},
                            {"prompt_tokens", ids.size()},
                            {"generated", g.tokens},
                            {"steps", routes}});
  }
  return 0;
}

int cmd_analyze(const std::string& ckpt, const std::string& text_path, const std::string& out_dir, std::size_t windows) {
  const Checkpoint c = load_checkpoint(ckpt);
  const RoutingTrace tr = export_routing_trace(c.model, read_file(text_path), windows);
  fs::create_directories(out_dir);
  {
    std::ofstream csv(fs::path(out_dir) / "routing_trace.csv");
    if (!csv) throw std::runtime_error("cannot write into " + out_dir);
    write_trace_csv(tr, csv);
  }
  write_json(fs::path(out_dir) / "router_histogram.json", histogram_json(tr));
  std::printf("%zu rows; %.4f of sigmoid weights above 0.5 (capacity fraction %.4f)\n", tr.rows.size(), tr.all.fraction_above_half(),
              tr.capacity_fraction);
  return 0;
}

nlohmann::json flops_json(const ModelConfig& mc, const FlopReport& r) {
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& b : r.blocks) {
    const char* kind = b.kind == BlockKind::kFull ? "full" : b.kind == BlockKind::kRouted ? "routed" : b.kind == BlockKind::kMoe ? "moe" : "staged";
    blocks.push_back({{"block", b.block},
                      {"kind", kind},
                      {"capacity", b.capacity},
                      {"qkv_proj", b.attention.qkv_proj},
                      {"qk_matmul", b.attention.qk_matmul},
                      {"av_matmul", b.attention.av_matmul},
                      {"out_proj", b.attention.out_proj},
                      {"mlp", b.mlp},
                      {"router", b.router},
                      {"predictor", b.predictor},
                      {"total", b.total()}});
  }
  return {{"config", to_key_values(mc)}, {"convention", r.convention}, {"blocks", blocks},          {"embed", r.embed},
          {"unembed", r.unembed},         {"block_total", r.block_total}, {"total", r.total},        {"baseline_total", r.baseline_total},
          {"ratio_to_baseline", r.ratio_to_baseline}};
}

int cmd_flops(const std::string& config, const std::vector<std::string>& overrides, const std::string& json_path) {
  const ModelConfig mc = model_config_from(load_config(config, overrides));
  const FlopReport r = model_forward_flops(mc);
  std::printf("%-6s %-7s %5s %14s %14s %14s %14s %14s %12s %12s %15s\n", "block", "kind", "cap", "qkv_proj", "qk_matmul", "av_matmul",
              "out_proj", "mlp", "router", "predictor", "total");
  for (const auto& b : r.blocks) {
    const char* kind = b.kind == BlockKind::kFull ? "full" : b.kind == BlockKind::kRouted ? "routed" : b.kind == BlockKind::kMoe ? "moe" : "staged";
    std::printf("%-6zu %-7s %5zu %14llu %14llu %14llu %14llu %14llu %12llu %12llu %15llu\n", b.block, kind, b.capacity,
                static_cast<unsigned long long>(b.attention.qkv_proj), static_cast<unsigned long long>(b.attention.qk_matmul),
                static_cast<unsigned long long>(b.attention.av_matmul), static_cast<unsigned long long>(b.attention.out_proj),
                static_cast<unsigned long long>(b.mlp), static_cast<unsigned long long>(b.router),
                static_cast<unsigned long long>(b.predictor), static_cast<unsigned long long>(b.total()));
  }
  std::printf("%-22s %15llu\n", "blocks", static_cast<unsigned long long>(r.block_total));
  std::printf("%-22s %15llu\n", "embed", static_cast<unsigned long long>(r.embed));
  std::printf("%-22s %15llu\n", "unembed", static_cast<unsigned long long>(r.unembed));
  std::printf("%-22s %15llu\n", "total", static_cast<unsigned long long>(r.total));
  std::printf("%-22s %15llu\n", "baseline total", static_cast<unsigned long long>(r.baseline_total));
  std::printf("%-22s %15.6f\n", "ratio to baseline", r.ratio_to_baseline);
  std::printf("(%s)\n", r.convention.c_str());
  write_json(json_path, flops_json(mc, r));
  return 0;
}

int cmd_compare(const std::vector<std::string>& dirs, const std::string& csv_path) {
  std::vector<RunSummary> runs;
  for (const auto& d : dirs)
    if (auto s = summarize_run(d, std::cerr)) runs.push_back(*s);
  if (runs.size() < 2) throw ConfigError("compare needs at least two completed runs, found " + std::to_string(runs.size()));
  std::printf("%-20s %-16s %7s %10s %16s %8s %10s %10s\n", "run", "variant", "steps", "val_loss", "flops/forward", "ratio", "steps/s",
              "params");
  for (const auto& r : runs)
    std::printf("%-20s %-16s %7zu %10.4f %16llu %8.4f %10.3f %10zu\n", r.name.c_str(), r.variant.c_str(), r.steps, r.final_val_loss,
                static_cast<unsigned long long>(r.flops_per_forward), r.flops_ratio, r.steps_per_sec, r.params);
  std::ofstream csv(csv_path);
  if (!csv) throw std::runtime_error("cannot write " + csv_path);
  write_compare_csv(runs, csv);
  return 0;
}

int cmd_corpus(std::size_t bytes, std::uint64_t seed, const std::string& out_path) {
  std::ofstream out(out_path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + out_path);
  out << synthetic_corpus(bytes, seed);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mixture-of-Depths transformer toolkit"};
  app.require_subcommand(1);

  TrainArgs train;
  auto* t = app.add_subcommand("train", "train a model; writes config, metrics and checkpoints to a run directory");
  t->add_option("--config", train.config, "key = value config file");
  t->add_option("--override", train.overrides, "k=v settings applied after the config file")->take_all();
  t->add_option("--name", train.name, "run directory name (default: config file stem)");
  t->add_option("--resume", train.resume, "continue from a checkpoint inside its run directory");

  std::string ckpt, mode = "teacher_forced_topk", text, out_dir, prompt, trace, json_path = "flops.json", csv_path = "compare.csv";
  std::size_t windows = 0, max_new = 64, bytes = 1 << 20;
  double temperature = 0.0;
  std::uint64_t seed = 1;
  std::vector<std::string> runs, overrides;
  std::string config;

  auto* e = app.add_subcommand("eval", "held-out loss under a routing mode");
  e->add_option("--ckpt", ckpt, "checkpoint file")->required();
  e->add_option("--mode", mode, "teacher_forced_topk | causal_aux | causal_predictor");
  e->add_option("--text", text, "evaluate on this file instead of the run's validation split");
  e->add_option("--windows", windows, "maximum number of sequences (0: config default / all)");

  auto* s = app.add_subcommand("sample", "generate text with causal routing");
  s->add_option("--ckpt", ckpt, "checkpoint file")->required();
  s->add_option("--prompt", prompt, "prompt text")->required();
  s->add_option("--max-new", max_new, "tokens to generate");
  s->add_option("--temperature", temperature, "0 means greedy");
  s->add_option("--seed", seed, "sampling seed");
  s->add_option("--trace", trace, "JSON side-file of per-token, per-block route decisions");

  auto* an = app.add_subcommand("analyze", "export a routing trace CSV and router-weight histogram");
  an->add_option("--ckpt", ckpt, "checkpoint file")->required();
  an->add_option("--text", text, "text file to route")->required();
  an->add_option("--out", out_dir, "output directory")->required();
  an->add_option("--windows", windows, "maximum number of sequences")->default_val(64);

  auto* f = app.add_subcommand("flops", "analytic forward FLOPs per block");
  f->add_option("--config", config, "key = value config file")->required();
  f->add_option("--override", overrides, "k=v settings")->take_all();
  f->add_option("--json", json_path, "where to write the JSON report");

  auto* c = app.add_subcommand("compare", "summarize completed runs");
  c->add_option("--runs", runs, "run directories")->required();
  c->add_option("--csv", csv_path, "where to write the CSV table");

  auto* g = app.add_subcommand("corpus", "write the seeded synthetic corpus to a file");
  g->add_option("--bytes", bytes, "corpus size");
  g->add_option("--seed", seed, "generator seed")->default_val(kSyntheticCorpusSeed);
  g->add_option("--out", out_dir, "output file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int rc = app.exit(err);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    if (t->parsed()) return cmd_train(train);
    if (e->parsed()) return cmd_eval(ckpt, mode, text, windows);
    if (s->parsed()) return cmd_sample(ckpt, prompt, max_new, temperature, seed, trace);
    if (an->parsed()) return cmd_analyze(ckpt, text, out_dir, windows);
    if (f->parsed()) return cmd_flops(config, overrides, json_path);
    if (c->parsed()) return cmd_compare(runs, csv_path);
    if (g->parsed()) return cmd_corpus(bytes, seed, out_dir);
  } catch (const ConfigError& err) {
    std::cerr << "config error: " << err.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}
