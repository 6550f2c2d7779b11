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

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>
#include <sstream>

#include <unistd.h>

#include "fixtures.hpp"
#include "mod/trace.hpp"
#include "mod/train.hpp"

namespace mod {
namespace {

namespace fs = std::filesystem;
using testing::tiny_config;

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("modepth_test_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

TEST(Tokenizer, BytesRoundTrip) {
  EXPECT_EQ(tokenize("ab"), (std::vector<std::size_t>{97, 98}));
  EXPECT_TRUE(tokenize("").empty());
  std::mt19937_64 rng(1);
  std::string blob(1024, '\0');
  for (char& c : blob) c = static_cast<char>(rng() & 0xff);
  EXPECT_EQ(detokenize(tokenize(blob)), blob);
  const std::vector<std::size_t> bad{65, 257};
  EXPECT_THROW(detokenize(bad), IndexError);
  const std::vector<std::size_t> bos{kBosId, 104, 105};
  EXPECT_EQ(detokenize(bos), "hi");
}

TEST(SyntheticCorpus, DeterministicAndSized) {
  const std::string a = synthetic_corpus(5000, 7), b = synthetic_corpus(5000, 7), c = synthetic_corpus(5000, 8);
  EXPECT_EQ(a.size(), 5000u);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  for (unsigned char ch : a) EXPECT_LT(ch, 128);
}

TEST(Dataset, BatchesArePureFunctionsOfSeedAndStep) {
  const Dataset d = Dataset::from_text(synthetic_corpus(40000, 1), 0.9);
  const Batch a = d.train_batch(3, 17, 4, 16), b = d.train_batch(3, 17, 4, 16), c = d.train_batch(3, 18, 4, 16);
  EXPECT_EQ(a.inputs, b.inputs);
  EXPECT_NE(a.inputs, c.inputs);
  ASSERT_EQ(a.inputs.size(), 64u);
  for (std::size_t w = 0; w < 4; ++w) {
    EXPECT_EQ(a.inputs[w * 16], kBosId);
    for (std::size_t i = 1; i < 16; ++i) EXPECT_EQ(a.inputs[w * 16 + i], a.targets[w * 16 + i - 1]);
  }
  EXPECT_THROW(d.require(8, 64), DataError);
  EXPECT_NO_THROW(d.require(2, 16));
}

TEST(Schedule, WarmupCosineEndpoints) {
  ScheduleConfig s{1e-3, 1e-4, 10, 110};
  EXPECT_EQ(lr_at(0, s), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(5, s), 5e-4);
  EXPECT_DOUBLE_EQ(lr_at(10, s), 1e-3);
  EXPECT_DOUBLE_EQ(lr_at(60, s), 5.5e-4);
  EXPECT_DOUBLE_EQ(lr_at(110, s), 1e-4);
  for (std::size_t t = 10; t < 110; ++t) EXPECT_GE(lr_at(t, s), lr_at(t + 1, s));
  EXPECT_THROW(lr_at(111, s), ContractError);
  EXPECT_THROW((ScheduleConfig{1e-3, 1e-4, 110, 110}.validate()), ConfigError);
}

TEST(AdamW, FirstStepMovesEachWeightByLr) {
  Model m = Model::init(tiny_config(Variant::kBaseline, 8, 2, 1, 4, 4));
  testing::randomize(m, 2);
  std::mt19937_64 rng(3);
  const auto tokens = testing::random_tokens(8, rng), targets = testing::random_tokens(8, rng);
  {
    Tape tape;
    Tape::Scope s(tape);
    tape.backward(cross_entropy(lm_forward(m, tokens, 2).logits, targets));
  }
  const Model before = m.clone();
  AdamWConfig cfg;
  cfg.weight_decay = 0.0;
  cfg.clip_norm = 0.0;
  AdamW opt = AdamW::for_model(m, cfg);
  opt.step(m, 0.01);
  const auto pa = before.named_parameters(), pb = m.named_parameters();
  for (std::size_t k = 0; k < pa.size(); ++k)
    for (std::size_t i = 0; i < pa[k].second.size(); ++i) {
      const double g = pb[k].second.grad()[i];
      const double moved = pa[k].second[i] - pb[k].second[i];
      if (std::abs(g) > 1e-6) EXPECT_NEAR(moved, 0.01 * (g > 0 ? 1.0 : -1.0), 1e-4) << pa[k].first;
    }
}

TEST(AdamW, ClippingBoundsTheUpdateNorm) {
  Model m = Model::init(tiny_config(Variant::kBaseline, 8, 2, 1, 4, 4));
  for (auto& [name, p] : m.named_parameters()) {
    auto g = p.mutable_grad();
    for (double& v : g) v = 100.0;
  }
  AdamW opt = AdamW::for_model(m, {});
  const double norm = opt.step(m, 0.0);
  EXPECT_GT(norm, 1.0);
  EXPECT_TRUE(decays(m.embed));
  EXPECT_FALSE(decays(m.ln_f.gain));
}

struct TinyRun {
  ModelConfig mc;
  TrainConfig tc;
  Dataset data;

  explicit TinyRun(Variant v = Variant::kMod, std::size_t steps = 24) {
    mc = tiny_config(v, 16, 2, 2, 16, 4);
    tc.batch = 2;
    tc.schedule = {3e-3, 3e-4, 4, steps};
    tc.eval_interval = 8;
    tc.eval_windows = 4;
    tc.checkpoint_interval = 0;
    data = Dataset::from_text(synthetic_corpus(8000, 11), 0.9);
  }
};

TEST(Checkpoint, RoundTripIsBitIdentical) {
  TinyRun r;
  TrainResult res = train_run(r.tc, fresh_state(r.tc, r.mc), r.data);
  const std::string a = serialize(res.state);
  const Checkpoint back = deserialize(a);
  EXPECT_EQ(serialize(back), a);
  EXPECT_EQ(back.step, res.state.step);
  EXPECT_EQ(back.optimizer.t, res.state.optimizer.t);
  const auto pa = res.state.model.named_parameters(), pb = back.model.named_parameters();
  for (std::size_t k = 0; k < pa.size(); ++k)
    EXPECT_TRUE(std::equal(pa[k].second.data().begin(), pa[k].second.data().end(), pb[k].second.data().begin()));
}

TEST(Checkpoint, CorruptionIsDetected) {
  TinyRun r;
  const std::string a = serialize(fresh_state(r.tc, r.mc));
  std::string flipped = a;
  flipped[flipped.size() - 3] ^= 0x10;
  EXPECT_THROW(deserialize(flipped), CheckpointError);
  EXPECT_THROW(deserialize(a.substr(0, a.size() - 8)), CheckpointError);
  std::string magic = a;
  magic[0] = 'X';
  EXPECT_THROW(deserialize(magic), CheckpointError);
}

TEST(Training, DeterministicAndResumable) {
  TinyRun r;
  const fs::path dir_a = scratch_dir("a"), dir_b = scratch_dir("b");
  TrainOptions oa;
  oa.run_dir = dir_a;
  const TrainResult full = train_run(r.tc, fresh_state(r.tc, r.mc), r.data, oa);
  const TrainResult again = train_run(r.tc, fresh_state(r.tc, r.mc), r.data);
  ASSERT_EQ(full.records.size(), again.records.size());
  for (std::size_t i = 0; i < full.records.size(); ++i)
    EXPECT_EQ(full.records[i].without_timing().to_json(), again.records[i].without_timing().to_json());

  TrainOptions ob;
  ob.run_dir = dir_b;
  ob.stop_after = 13;  // mid-interval
  const TrainResult first = train_run(r.tc, fresh_state(r.tc, r.mc), r.data, ob);
  EXPECT_EQ(first.state.step, 13u);
  const Checkpoint resumed = load_checkpoint((dir_b / "step_13.ckpt").string());
  ob.stop_after.reset();
  const TrainResult second = train_run(r.tc, resumed, r.data, ob);
  EXPECT_EQ(serialize(second.state), serialize(full.state));

  const auto ma = read_metrics((dir_a / "metrics.jsonl").string()), mb = read_metrics((dir_b / "metrics.jsonl").string());
  ASSERT_EQ(ma.size(), mb.size());
  for (std::size_t i = 0; i < ma.size(); ++i) EXPECT_EQ(ma[i].without_timing().to_json(), mb[i].without_timing().to_json());
  EXPECT_TRUE(fs::exists(dir_a / "final.ckpt"));
  EXPECT_TRUE(fs::exists(dir_a / "config.txt"));
  fs::remove_all(dir_a);
  fs::remove_all(dir_b);
}

TEST(Training, RouterWeightsMoveAfterOneStep) {
  TinyRun r(Variant::kMod, 5);
  const TrainResult res = [&] {
    TrainOptions o;
    o.stop_after = 1;
    return train_run(r.tc, fresh_state(r.tc, r.mc), r.data, o);
  }();
  double norm = 0.0;
  for (double v : res.state.model.blocks[0].router.data()) norm += v * v;
  EXPECT_GT(norm, 0.0);
}

TEST(Config, KeyValuesAndOverrides) {
  KeyValues kv = parse_key_values("# comment\nmodel.d_model = 32\ntrain.steps=50 # trailing\ntrain.warmup=5\n\n");
  apply_override(kv, "train.lr=0.01");
  apply_override(kv, "model.variant = mod");
  check_known_keys(kv);
  const ModelConfig mc = model_config_from(kv);
  const TrainConfig tc = train_config_from(kv);
  EXPECT_EQ(mc.d_model, 32u);
  EXPECT_EQ(mc.variant, Variant::kMod);
  EXPECT_EQ(tc.schedule.steps, 50u);
  EXPECT_DOUBLE_EQ(tc.schedule.min_lr, 0.001);
  EXPECT_EQ(train_config_from(to_key_values(tc)).schedule.peak_lr, tc.schedule.peak_lr);
  EXPECT_EQ(to_key_values(model_config_from(to_key_values(mc))), to_key_values(mc));
  kv["model.d_modle"] = "8";
  EXPECT_THROW(check_known_keys(kv), ConfigError);
  EXPECT_THROW(parse_key_values("no equals sign"), ConfigError);
  EXPECT_THROW(train_config_from({{"train.steps", "ten"}}), ConfigError);
  EXPECT_THROW(model_config_from({{"model.n_heads", "3"}}), ConfigError);
}

TEST(Evaluate, DeterministicAndModeRules) {
  TinyRun r;
  const TrainResult res = train_run(r.tc, fresh_state(r.tc, r.mc), r.data);
  const Batch val = r.data.validation_windows(16, 4);
  const EvalResult a = evaluate(res.state.model, val, EvalMode::kTeacherForced), b = evaluate(res.state.model, val, EvalMode::kTeacherForced);
  EXPECT_EQ(a.loss, b.loss);
  EXPECT_LT(a.loss, std::log(256.0));
  for (double f : a.routed_fraction) EXPECT_DOUBLE_EQ(f, 4.0 / 16.0);
  EXPECT_NO_THROW(evaluate(res.state.model, val, EvalMode::kCausalAux));
  EXPECT_THROW(evaluate(res.state.model, val, EvalMode::kCausalPredictor), ConfigError);
}

TEST(Trace, ConservationAndEntropyOracle) {
  TinyRun r;
  Model m = Model::init(r.mc);
  testing::randomize(m, 4);
  const std::string text = synthetic_corpus(16 * 5 + 3, 9);
  const RoutingTrace tr = export_routing_trace(m, text);
  ASSERT_EQ(tr.blocks.size(), 2u);
  std::map<std::pair<std::size_t, std::size_t>, std::size_t> selected;
  for (const auto& row : tr.rows) selected[{row.sequence, row.block_index}] += row.selected;
  EXPECT_EQ(selected.size(), 5u * 2u);
  for (const auto& [key, n] : selected) EXPECT_EQ(n, 4u);
  EXPECT_EQ(tr.all.total, 5u * 16u * 2u);
  EXPECT_DOUBLE_EQ(tr.capacity_fraction, 0.25);

  // Entropy recomputed from a separate forward pass.
  const auto ids = tokenize(text);
  std::vector<std::size_t> in{kBosId};
  for (std::size_t i = 0; i + 1 < 16; ++i) in.push_back(ids[16 + i]);
  const Tensor logits = lm_forward(m, in, 1).logits;
  for (const auto& row : tr.rows) {
    if (row.sequence != 1) continue;
    const Tensor p = softmax(Tensor::from({257}, {logits.data().begin() + row.sequence_pos * 257,
                                                  logits.data().begin() + (row.sequence_pos + 1) * 257}), 0);
    double h = 0.0;
    for (double v : p.data())
      if (v > 0) h -= v * std::log(v);
    EXPECT_NEAR(row.prediction_entropy_nats, h, 1e-9);
  }
  std::ostringstream csv;
  write_trace_csv(tr, csv);
  const std::string body = csv.str();
  EXPECT_EQ(std::count(body.begin(), body.end(), '\n'), static_cast<long>(tr.rows.size() + 1));
  const auto j = histogram_json(tr);
  EXPECT_EQ(j["all_blocks"]["counts"].size(), 50u);
  EXPECT_THROW(export_routing_trace(Model::init(tiny_config(Variant::kBaseline)), text), ConfigError);
}

TEST(Trace, ExpertRowsCarryExpertIds) {
  Model m = Model::init(tiny_config(Variant::kModeStaged, 16, 2, 1, 16, 4));
  testing::randomize(m, 5);
  const RoutingTrace tr = export_routing_trace(m, synthetic_corpus(16, 3));
  std::size_t expert_rows = 0, expert_selected = 0;
  for (const auto& row : tr.rows)
    if (row.expert_id >= 0) {
      ++expert_rows;
      expert_selected += row.selected;
      EXPECT_LT(row.sequence_pos, 16u);
    }
  // Two experts each score the four gathered tokens and keep two.
  EXPECT_EQ(expert_rows, 2u * 4u);
  EXPECT_EQ(expert_selected, 2u * 2u);
}

TEST(Compare, SummariesComeFromPersistedFiles) {
  TinyRun r;
  const fs::path root = scratch_dir("cmp");
  TrainOptions o;
  o.run_dir = root / "mod";
  train_run(r.tc, fresh_state(r.tc, r.mc), r.data, o);
  TinyRun b(Variant::kBaseline);
  o.run_dir = root / "baseline";
  train_run(b.tc, fresh_state(b.tc, b.mc), b.data, o);
  o.run_dir = root / "partial";
  o.stop_after = 8;
  train_run(b.tc, fresh_state(b.tc, b.mc), b.data, o);

  std::ostringstream warn;
  const auto mod_s = summarize_run(root / "mod", warn), base_s = summarize_run(root / "baseline", warn);
  EXPECT_FALSE(summarize_run(root / "partial", warn).has_value());
  EXPECT_NE(warn.str().find("incomplete"), std::string::npos);
  ASSERT_TRUE(mod_s && base_s);
  EXPECT_LT(mod_s->flops_per_forward, base_s->flops_per_forward);
  EXPECT_EQ(base_s->flops_ratio, 1.0);
  const auto again = summarize_run(root / "mod", warn);
  EXPECT_EQ(again->final_val_loss, mod_s->final_val_loss);
  std::ostringstream csv;
  write_compare_csv({*mod_s, *base_s}, csv);
  EXPECT_NE(csv.str().find("baseline"), std::string::npos);
  fs::remove_all(root);
}

}  // namespace
}  // namespace mod
