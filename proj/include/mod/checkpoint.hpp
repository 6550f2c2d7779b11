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

// Single-file checkpoints.
//
// Layout: 8-byte magic, u64 manifest length, JSON manifest, then raw
// little-endian float64 blobs in manifest order. Each blob carries an
// FNV-1a 64 digest in the manifest.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mod/config.hpp"
#include "mod/model.hpp"
#include "mod/optim.hpp"

namespace mod {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[8] = {'M', 'O', 'D', 'C', 'K', 'P', 'T', '\x01'};
inline constexpr int kCheckpointVersion = 1;

inline std::uint64_t fnv1a64(const void* data, std::size_t bytes) {
  auto p = static_cast<const unsigned char*>(data);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < bytes; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

struct Checkpoint {
  ModelConfig model_cfg;
  std::map<std::string, std::string> train_kv;  // resolved training settings
  std::size_t step = 0;                         // optimizer steps completed
  std::uint64_t data_seed = 0;                  // batches are a pure function of (data_seed, step)
  nlohmann::json extra = nlohmann::json::object();
  Model model;
  AdamW optimizer;
};

namespace detail {

struct Blob {
  std::string name;
  Shape shape;
  std::span<const double> data;
};

inline std::vector<Blob> blobs_of(const Checkpoint& c) {
  static_assert(std::endian::native == std::endian::little, "checkpoint blobs are little-endian");
  std::vector<Blob> out;
  const auto params = c.model.named_parameters();
  for (const auto& [name, t] : params) out.push_back({"param:" + name, t.shape(), t.data()});
  if (c.optimizer.m.size() != params.size()) throw CheckpointError("optimizer state does not match the model");
  for (std::size_t i = 0; i < params.size(); ++i) out.push_back({"adam.m:" + params[i].first, params[i].second.shape(), c.optimizer.m[i]});
  for (std::size_t i = 0; i < params.size(); ++i) out.push_back({"adam.v:" + params[i].first, params[i].second.shape(), c.optimizer.v[i]});
  return out;
}

}  // namespace detail

inline std::string serialize(const Checkpoint& c) {
  nlohmann::json m;
  m["format_version"] = kCheckpointVersion;
  m["model_config"] = to_key_values(c.model_cfg);
  m["train_config"] = c.train_kv;
  m["step"] = c.step;
  m["rng"] = {{"data_seed", c.data_seed}, {"next_step", c.step}};
  m["optimizer"] = {{"kind", "adamw"},
                    {"t", c.optimizer.t},
                    {"beta1", c.optimizer.cfg.beta1},
                    {"beta2", c.optimizer.cfg.beta2},
                    {"eps", c.optimizer.cfg.eps},
                    {"weight_decay", c.optimizer.cfg.weight_decay},
                    {"clip_norm", c.optimizer.cfg.clip_norm}};
  m["extra"] = c.extra;
  nlohmann::json tensors = nlohmann::json::array();
  const auto blobs = detail::blobs_of(c);
  for (const auto& b : blobs)
    tensors.push_back({{"name", b.name}, {"shape", b.shape}, {"digest", hex64(fnv1a64(b.data.data(), b.data.size_bytes()))}});
  m["tensors"] = tensors;
  const std::string manifest = m.dump();

  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  const std::uint64_t len = manifest.size();
  out.append(reinterpret_cast<const char*>(&len), sizeof len);
  out += manifest;
  for (const auto& b : blobs) out.append(reinterpret_cast<const char*>(b.data.data()), b.data.size_bytes());
  return out;
}

inline Checkpoint deserialize(const std::string& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) throw CheckpointError("not a checkpoint file (bad magic)");
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + 8, sizeof len);
  if (len > bytes.size() - 16) throw CheckpointError("truncated checkpoint manifest");
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(bytes.substr(16, len));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint manifest: ") + e.what());
  }
  if (m.value("format_version", 0) != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint format version " + m.value("format_version", nlohmann::json(0)).dump());

  Checkpoint c;
  c.model_cfg = model_config_from(m.at("model_config").get<std::map<std::string, std::string>>());
  c.train_kv = m.at("train_config").get<std::map<std::string, std::string>>();
  c.step = m.at("step").get<std::size_t>();
  c.data_seed = m.at("rng").at("data_seed").get<std::uint64_t>();
  c.extra = m.value("extra", nlohmann::json::object());
  c.model = Model::init(c.model_cfg);
  const auto& o = m.at("optimizer");
  AdamWConfig oc{o.at("beta1").get<double>(), o.at("beta2").get<double>(), o.at("eps").get<double>(),
                 o.at("weight_decay").get<double>(), o.at("clip_norm").get<double>()};
  c.optimizer = AdamW::for_model(c.model, oc);
  c.optimizer.t = o.at("t").get<std::size_t>();

  auto params = c.model.named_parameters();
  std::vector<std::span<double>> targets;
  for (auto& [name, t] : params) targets.push_back(t.mutable_data());
  for (auto& v : c.optimizer.m) targets.emplace_back(v);
  for (auto& v : c.optimizer.v) targets.emplace_back(v);
  const auto& tensors = m.at("tensors");
  if (tensors.size() != targets.size()) throw CheckpointError("checkpoint tensor list does not match the model configuration");

  std::size_t offset = 16 + len;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const std::string expect_name = i < params.size() ? "param:" + params[i].first
                                    : i < 2 * params.size() ? "adam.m:" + params[i - params.size()].first
                                                            : "adam.v:" + params[i - 2 * params.size()].first;
    const auto& entry = tensors[i];
    if (entry.at("name").get<std::string>() != expect_name)
      throw CheckpointError("checkpoint tensor " + std::to_string(i) + " is " + entry.at("name").get<std::string>() + ", expected " + expect_name);
    if (entry.at("shape").get<Shape>() != params[i % params.size()].second.shape())
      throw CheckpointError("shape mismatch for " + expect_name);
    const std::size_t n = targets[i].size_bytes();
    if (offset + n > bytes.size()) throw CheckpointError("truncated blob " + expect_name);
    if (hex64(fnv1a64(bytes.data() + offset, n)) != entry.at("digest").get<std::string>())
      throw CheckpointError("digest mismatch for " + expect_name);
    std::memcpy(targets[i].data(), bytes.data() + offset, n);
    offset += n;
  }
  if (offset != bytes.size()) throw CheckpointError("trailing bytes after the last blob");
  return c;
}

inline void save_checkpoint(const Checkpoint& c, const std::string& path) {
  const std::string bytes = serialize(c);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("write failed for " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw CheckpointError("cannot move checkpoint into place at " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize(ss.str());
}

}  // namespace mod
