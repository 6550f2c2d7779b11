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

// Byte tokenizer, corpus loading and deterministic batching.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "mod/config.hpp"
#include "mod/model.hpp"

namespace mod {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::vector<std::size_t> tokenize(std::string_view text) {
  std::vector<std::size_t> ids;
  ids.reserve(text.size());
  for (unsigned char c : text) ids.push_back(c);
  return ids;
}

/// Inverse of tokenize. Special ids (BOS) are dropped; anything at or above
/// `vocab_size` is an error.
inline std::string detokenize(std::span<const std::size_t> ids, std::size_t vocab_size = 257) {
  std::string out;
  out.reserve(ids.size());
  for (std::size_t id : ids) {
    if (id >= vocab_size) throw IndexError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(vocab_size));
    if (id < 256) out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
  }
  return out;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Seeded pseudo-English: a fixed invented lexicon split into word classes,
/// Zipf-distributed word choice and a small phrase grammar, so text has both
/// highly predictable bytes (word endings, function words, punctuation) and
/// hard ones (word starts).
inline std::string synthetic_corpus(std::size_t bytes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::vector<std::string> onsets{"b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t",
                                        "v", "w", "z", "br", "ch", "cl", "dr", "fl", "gr", "pl", "pr", "sh", "st", "th", "tr"};
  const std::vector<std::string> vowels{"a", "e", "i", "o", "u", "ai", "ea", "ou", "oo", "ie"};
  const std::vector<std::string> codas{"", "", "n", "r", "s", "t", "l", "m", "nd", "st", "ck", "ng"};
  auto pick = [&](const std::vector<std::string>& v) { return v[rng() % v.size()]; };
  auto make_word = [&](std::size_t syllables, const std::string& suffix) {
    std::string w;
    for (std::size_t i = 0; i < syllables; ++i) w += pick(onsets) + pick(vowels) + (i + 1 == syllables ? pick(codas) : "");
    return w + suffix;
  };
  auto lexicon = [&](std::size_t n, const std::string& suffix) {
    std::vector<std::string> v;
    for (std::size_t i = 0; i < n; ++i) v.push_back(make_word(1 + rng() % 3, suffix));
    return v;
  };
  const auto nouns = lexicon(400, ""), verbs = lexicon(200, "s"), adjectives = lexicon(150, "y"), adverbs = lexicon(60, "ly");
  const std::vector<std::string> determiners{"the", "a", "this", "every", "that", "some"};
  const std::vector<std::string> preps{"of", "in", "with", "under", "near", "from"};
  const std::vector<std::string> joins{"and", "but", "so", "while"};

  auto zipf = [&](const std::vector<std::string>& v) {
    // P(rank k) ~ 1/(k+1): inverse-CDF on the harmonic approximation.
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double n = static_cast<double>(v.size());
    const auto k = static_cast<std::size_t>(std::exp(u(rng) * std::log(n + 1.0)) - 1.0);
    return v[std::min(k, v.size() - 1)];
  };
  auto noun_phrase = [&] {
    std::string s = pick(determiners) + " ";
    if (rng() % 3 == 0) s += zipf(adjectives) + " ";
    s += zipf(nouns);
    if (rng() % 4 == 0) s += " " + pick(preps) + " " + pick(determiners) + " " + zipf(nouns);
    return s;
  };
  auto clause = [&] {
    std::string s = noun_phrase() + " " + zipf(verbs);
    if (rng() % 5 == 0) s += " " + zipf(adverbs);
    return s + " " + noun_phrase();
  };

  std::string out;
  out.reserve(bytes + 256);
  std::size_t in_paragraph = 0;
  while (out.size() < bytes) {
    std::string sentence = clause();
    if (rng() % 3 == 0) sentence += ", " + pick(joins) + " " + clause();
    sentence[0] = static_cast<char>(sentence[0] - 'a' + 'A');
    out += sentence + (rng() % 8 == 0 ? "?" : ".");
    out += ++in_paragraph % 6 == 0 ? "\n\n" : " ";
  }
  out.resize(bytes);
  return out;
}

/// A batch of `batch` windows: inputs start with BOS, targets are the next bytes.
struct Batch {
  std::vector<std::size_t> inputs;
  std::vector<std::size_t> targets;
  std::size_t batch = 0;
};

inline void append_window(Batch& b, std::span<const std::size_t> ids, std::size_t offset, std::size_t seq) {
  b.inputs.push_back(kBosId);
  for (std::size_t i = 0; i + 1 < seq; ++i) b.inputs.push_back(ids[offset + i]);
  for (std::size_t i = 0; i < seq; ++i) b.targets.push_back(ids[offset + i]);
  ++b.batch;
}

struct Dataset {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;

  /// First `split` of the bytes train, the remainder validates.
  static Dataset from_text(std::string_view text, double split) {
    if (!(split > 0.0 && split < 1.0)) throw ConfigError("train.split must lie in (0, 1)");
    const auto ids = tokenize(text);
    const auto cut = static_cast<std::size_t>(static_cast<double>(ids.size()) * split);
    Dataset d;
    d.train.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(cut));
    d.validation.assign(ids.begin() + static_cast<std::ptrdiff_t>(cut), ids.end());
    return d;
  }

  void require(std::size_t batch, std::size_t seq) const {
    if (train.size() < 100 * batch * seq)
      throw DataError("training split has " + std::to_string(train.size()) + " tokens; need at least 100 x batch x seq_len = " +
                      std::to_string(100 * batch * seq));
    if (validation.size() < seq) throw DataError("validation split is shorter than one sequence");
  }

  /// Random training windows; a pure function of (seed, step).
  Batch train_batch(std::uint64_t seed, std::size_t step, std::size_t batch, std::size_t seq) const {
    std::mt19937_64 rng(mix_seed(seed, step));
    Batch b;
    for (std::size_t i = 0; i < batch; ++i) append_window(b, train, rng() % (train.size() - seq + 1), seq);
    return b;
  }

  /// Consecutive non-overlapping validation windows, at most `max_windows`.
  Batch validation_windows(std::size_t seq, std::size_t max_windows) const {
    Batch b;
    for (std::size_t off = 0; off + seq <= validation.size() && b.batch < max_windows; off += seq) append_window(b, validation, off, seq);
    return b;
  }
};

}  // namespace mod
