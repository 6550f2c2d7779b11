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
#include <charconv>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mod {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Variant { kBaseline, kMod, kModStochastic, kMoe, kModeStaged, kModeIntegrated };
enum class GateKind { kSigmoid, kRaw };
enum class RouteMethod { kAuxLoss, kPredictor };
enum class BlockKind { kFull, kRouted, kMoe, kStaged };

inline constexpr std::size_t kByteVocab = 256;
inline constexpr std::size_t kBosId = 256;

inline std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::kBaseline: return "baseline";
    case Variant::kMod: return "mod";
    case Variant::kModStochastic: return "mod-stochastic";
    case Variant::kMoe: return "moe";
    case Variant::kModeStaged: return "mode-staged";
    case Variant::kModeIntegrated: return "mode-integrated";
  }
  return "?";
}

inline Variant parse_variant(std::string_view s) {
  for (Variant v : {Variant::kBaseline, Variant::kMod, Variant::kModStochastic, Variant::kMoe, Variant::kModeStaged,
                    Variant::kModeIntegrated})
    if (to_string(v) == s) return v;
  throw ConfigError("unknown variant '" + std::string(s) + "'");
}

inline std::string_view to_string(GateKind g) { return g == GateKind::kSigmoid ? "sigmoid" : "raw"; }
inline std::string_view to_string(RouteMethod m) { return m == RouteMethod::kAuxLoss ? "aux_loss" : "predictor"; }

/// Per-block routing capacities. Non-routed blocks always run at capacity S.
struct CapacitySchedule {
  struct Entry {
    bool routed = false;
    std::size_t capacity = 0;
  };
  std::vector<Entry> blocks;

  static CapacitySchedule full(std::size_t n_layers, std::size_t seq_len) {
    return {std::vector<Entry>(n_layers, Entry{false, seq_len})};
  }

  /// Odd-indexed blocks routed at `capacity`; even blocks keep full capacity.
  static CapacitySchedule every_other(std::size_t n_layers, std::size_t seq_len, std::size_t capacity) {
    CapacitySchedule s = full(n_layers, seq_len);
    for (std::size_t i = 1; i < n_layers; i += 2) s.blocks[i] = {true, capacity};
    return s;
  }

  static CapacitySchedule all(std::size_t n_layers, std::size_t capacity) {
    return {std::vector<Entry>(n_layers, Entry{true, capacity})};
  }

  std::size_t routed_count() const {
    return static_cast<std::size_t>(std::count_if(blocks.begin(), blocks.end(), [](const Entry& e) { return e.routed; }));
  }

  /// 1 - C/S for routed block i.
  double beta(std::size_t i, std::size_t seq_len) const {
    return 1.0 - static_cast<double>(blocks.at(i).capacity) / static_cast<double>(seq_len);
  }
};

struct MoeConfig {
  std::size_t num_experts = 4;
  std::size_t capacity = 0;  // tokens per sequence per expert; 0 = S/8
  bool include_noop = false;
};

struct SamplerConfig {
  RouteMethod method = RouteMethod::kAuxLoss;
  double aux_loss_weight = 0.01;
  std::size_t predictor_hidden = 64;
  double temperature = 0.0;
  std::size_t max_new_tokens = 64;
};

struct ModelConfig {
  std::size_t vocab_size = kByteVocab + 1;
  std::size_t d_model = 256;
  std::size_t n_heads = 8;
  std::size_t n_layers = 8;
  std::size_t d_ff = 0;  // 0 = 4·d_model
  std::size_t seq_len = 256;
  Variant variant = Variant::kBaseline;
  GateKind gate = GateKind::kSigmoid;
  std::string routing_pattern = "every_other";  // every_other | all
  std::size_t capacity = 0;                      // 0 = S/8
  CapacitySchedule routing;                      // derived by resolve()
  MoeConfig moe;
  SamplerConfig sampler;
  std::uint64_t seed = 1;

  bool routes() const { return variant != Variant::kBaseline; }

  /// Whether block i carries a MoD token router.
  bool has_token_router(std::size_t i) const {
    const BlockKind k = block_kind(i);
    return (k == BlockKind::kRouted && variant == Variant::kMod) || k == BlockKind::kStaged;
  }

  BlockKind block_kind(std::size_t i) const {
    if (variant == Variant::kBaseline || !routing.blocks.at(i).routed) return BlockKind::kFull;
    switch (variant) {
      case Variant::kMod:
      case Variant::kModStochastic: return BlockKind::kRouted;
      case Variant::kMoe:
      case Variant::kModeIntegrated: return BlockKind::kMoe;
      case Variant::kModeStaged: return BlockKind::kStaged;
      default: return BlockKind::kFull;
    }
  }

  /// Fills derived fields (d_ff, capacities, schedule) and validates.
  ModelConfig& resolve() {
    if (d_ff == 0) d_ff = 4 * d_model;
    if (capacity == 0) capacity = std::max<std::size_t>(1, seq_len / 8);
    if (moe.capacity == 0) moe.capacity = std::max<std::size_t>(1, seq_len / 8);
    moe.include_noop = variant == Variant::kModeIntegrated;
    if (routing.blocks.size() != n_layers) {
      if (routing_pattern == "every_other")
        routing = CapacitySchedule::every_other(n_layers, seq_len, capacity);
      else if (routing_pattern == "all")
        routing = CapacitySchedule::all(n_layers, capacity);
      else
        throw ConfigError("unknown routing pattern '" + routing_pattern + "'");
    }
    validate();
    return *this;
  }

  void validate() const {
    if (vocab_size < 1 || d_model < 1 || n_heads < 1 || n_layers < 1 || seq_len < 1 || d_ff < 1)
      throw ConfigError("model dimensions must be >= 1");
    if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
    if ((d_model / n_heads) % 2 != 0) throw ConfigError("head width must be even for rotary encoding");
    if (routing.blocks.size() != n_layers) throw ConfigError("capacity schedule length differs from n_layers");
    for (const auto& e : routing.blocks) {
      if (e.capacity < 1 || e.capacity > seq_len) throw ConfigError("every capacity must lie in [1, seq_len]");
      if (!e.routed && e.capacity != seq_len) throw ConfigError("non-routed blocks must have capacity seq_len");
    }
    if (variant == Variant::kMoe || variant == Variant::kModeIntegrated || variant == Variant::kModeStaged) {
      if (moe.num_experts < 1) throw ConfigError("moe.experts must be >= 1");
      if (moe.capacity < 1 || moe.capacity > seq_len) throw ConfigError("moe.capacity must lie in [1, seq_len]");
      if (variant == Variant::kModeStaged)
        for (const auto& e : routing.blocks)
          if (e.routed && moe.capacity > e.capacity)
            throw ConfigError("staged MoDE needs moe.capacity <= routing capacity");
    }
    if (sampler.aux_loss_weight < 0.0) throw ConfigError("sampler.aux_weight must be >= 0");
    if (sampler.temperature < 0.0) throw ConfigError("sampler.temperature must be >= 0");
    if (sampler.predictor_hidden < 1) throw ConfigError("sampler.predictor_hidden must be >= 1");
  }
};

// ---------------------------------------------------------------------------
// Plain "key = value" config text. '#' starts a comment.

using KeyValues = std::map<std::string, std::string>;

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline KeyValues parse_key_values(std::string_view text) {
  KeyValues kv;
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    kv[trim(std::string_view(t).substr(0, eq))] = trim(std::string_view(t).substr(eq + 1));
  }
  return kv;
}

inline KeyValues load_key_values(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_key_values(ss.str());
}

/// Applies a "k=v" override onto kv.
inline void apply_override(KeyValues& kv, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) throw ConfigError("override '" + std::string(assignment) + "' is not k=v");
  kv[trim(assignment.substr(0, eq))] = trim(assignment.substr(eq + 1));
}

template <class T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const char* first = value.data();
  const char* last = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(first, last, out);
  if (ec != std::errc{} || ptr != last) throw ConfigError("bad value for " + key + ": '" + value + "'");
  return out;
}

/// Consumes the model.*, routing.*, moe.* and sampler.* keys.
inline ModelConfig model_config_from(const KeyValues& kv) {
  ModelConfig c;
  for (const auto& [k, v] : kv) {
    if (k == "model.vocab_size") c.vocab_size = parse_number<std::size_t>(k, v);
    else if (k == "model.d_model") c.d_model = parse_number<std::size_t>(k, v);
    else if (k == "model.n_heads") c.n_heads = parse_number<std::size_t>(k, v);
    else if (k == "model.n_layers") c.n_layers = parse_number<std::size_t>(k, v);
    else if (k == "model.d_ff") c.d_ff = parse_number<std::size_t>(k, v);
    else if (k == "model.seq_len") c.seq_len = parse_number<std::size_t>(k, v);
    else if (k == "model.variant") c.variant = parse_variant(v);
    else if (k == "model.seed") c.seed = parse_number<std::uint64_t>(k, v);
    else if (k == "model.gate") {
      if (v == "sigmoid") c.gate = GateKind::kSigmoid;
      else if (v == "raw") c.gate = GateKind::kRaw;
      else throw ConfigError("model.gate must be sigmoid or raw");
    } else if (k == "routing.pattern") c.routing_pattern = v;
    else if (k == "routing.capacity") c.capacity = parse_number<std::size_t>(k, v);
    else if (k == "moe.experts") c.moe.num_experts = parse_number<std::size_t>(k, v);
    else if (k == "moe.capacity") c.moe.capacity = parse_number<std::size_t>(k, v);
    else if (k == "sampler.method") {
      if (v == "aux_loss") c.sampler.method = RouteMethod::kAuxLoss;
      else if (v == "predictor") c.sampler.method = RouteMethod::kPredictor;
      else throw ConfigError("sampler.method must be aux_loss or predictor");
    } else if (k == "sampler.aux_weight") c.sampler.aux_loss_weight = parse_number<double>(k, v);
    else if (k == "sampler.predictor_hidden") c.sampler.predictor_hidden = parse_number<std::size_t>(k, v);
    else if (k == "sampler.temperature") c.sampler.temperature = parse_number<double>(k, v);
    else if (k == "sampler.max_new_tokens") c.sampler.max_new_tokens = parse_number<std::size_t>(k, v);
  }
  c.resolve();
  return c;
}

/// Inverse of model_config_from, emitting only the primary keys.
inline KeyValues to_key_values(const ModelConfig& c) {
  KeyValues kv;
  kv["model.vocab_size"] = std::to_string(c.vocab_size);
  kv["model.d_model"] = std::to_string(c.d_model);
  kv["model.n_heads"] = std::to_string(c.n_heads);
  kv["model.n_layers"] = std::to_string(c.n_layers);
  kv["model.d_ff"] = std::to_string(c.d_ff);
  kv["model.seq_len"] = std::to_string(c.seq_len);
  kv["model.variant"] = std::string(to_string(c.variant));
  kv["model.seed"] = std::to_string(c.seed);
  kv["model.gate"] = std::string(to_string(c.gate));
  kv["routing.pattern"] = c.routing_pattern;
  kv["routing.capacity"] = std::to_string(c.capacity);
  kv["moe.experts"] = std::to_string(c.moe.num_experts);
  kv["moe.capacity"] = std::to_string(c.moe.capacity);
  kv["sampler.method"] = std::string(to_string(c.sampler.method));
  std::ostringstream w;
  w.precision(17);
  w << c.sampler.aux_loss_weight;
  kv["sampler.aux_weight"] = w.str();
  kv["sampler.predictor_hidden"] = std::to_string(c.sampler.predictor_hidden);
  std::ostringstream t;
  t.precision(17);
  t << c.sampler.temperature;
  kv["sampler.temperature"] = t.str();
  kv["sampler.max_new_tokens"] = std::to_string(c.sampler.max_new_tokens);
  return kv;
}

inline std::string format_key_values(const KeyValues& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
  return out;
}

}  // namespace mod
