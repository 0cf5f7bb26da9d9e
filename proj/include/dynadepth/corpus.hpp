// Copyright 2026 The dynadepth Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "dynadepth/rng.hpp"
#include "dynadepth/text.hpp"

namespace dynadepth {

struct Example {
  std::string id;
  std::string prompt;
  std::string label;
};

struct CorpusSpec {
  std::size_t size = 240;
  std::uint64_t seed = 7;
  /// Subset of copy, reverse, upper, add.
  std::vector<std::string> tasks{"copy", "reverse", "upper", "add"};
  std::size_t min_words = 1;
  std::size_t max_words = 3;
  double train_frac = 0.70;
  double val_frac = 0.15;
  double test_frac = 0.15;

  void validate() const {
    if (tasks.empty()) throw std::invalid_argument("corpus: no tasks");
    for (const auto& t : tasks) {
      if (t != "copy" && t != "reverse" && t != "upper" && t != "add") {
        throw std::invalid_argument("corpus: unknown task '" + t + "'");
      }
    }
    if (min_words < 1 || max_words < min_words) throw std::invalid_argument("corpus: bad word range");
    if (train_frac < 0 || val_frac < 0 || test_frac < 0 ||
        std::abs(train_frac + val_frac + test_frac - 1.0) > 1e-9) {
      throw std::invalid_argument("corpus: split fractions must be nonnegative and sum to 1");
    }
  }
};

struct Corpus {
  std::vector<Example> train, val, test;
};

namespace detail {
inline const std::vector<std::string>& corpus_words() {
  static const std::vector<std::string> words{"cat", "dog",  "sun", "red",  "map", "box",  "tea", "fox",
                                              "owl", "jam",  "ink", "sky",  "log", "pen",  "cup", "hat",
                                              "bird", "fish", "tree", "lamp", "rock", "milk", "star", "wind"};
  return words;
}
}  // namespace detail

/// Deterministic synthetic string-transformation tasks.
inline std::vector<Example> generate_examples(const CorpusSpec& spec) {
  spec.validate();
  Rng rng = make_rng(spec.seed, 0xc0);
  const auto& words = detail::corpus_words();
  std::uniform_int_distribution<std::size_t> pick_task(0, spec.tasks.size() - 1);
  std::uniform_int_distribution<std::size_t> pick_word(0, words.size() - 1);
  std::uniform_int_distribution<std::size_t> pick_count(spec.min_words, spec.max_words);
  std::uniform_int_distribution<int> pick_num(0, 99);
  std::vector<Example> out;
  for (std::size_t i = 0; i < spec.size; ++i) {
    const std::string& task = spec.tasks[pick_task(rng)];
    Example ex;
    ex.id = "ex" + std::to_string(i);
    if (task == "add") {
      const int a = pick_num(rng), b = pick_num(rng);
      ex.prompt = "add " + std::to_string(a) + " " + std::to_string(b) + ":";
      ex.label = std::to_string(a + b);
    } else {
      std::vector<std::string> ws(pick_count(rng));
      for (auto& w : ws) w = words[pick_word(rng)];
      ex.prompt = task + " " + text::join(ws, " ") + ":";
      if (task == "reverse") std::reverse(ws.begin(), ws.end());
      if (task == "upper") {
        for (auto& w : ws) {
          for (char& ch : w) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
        }
      }
      ex.label = text::join(ws, " ");
    }
    out.push_back(std::move(ex));
  }
  return out;
}

/// Shuffled train/val/test split; val and test sizes are floored.
inline Corpus split_corpus(std::vector<Example> all, const CorpusSpec& spec) {
  spec.validate();
  Rng rng = make_rng(spec.seed, 0x5b);
  std::vector<std::size_t> idx(all.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = idx.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> d(0, i - 1);
    std::swap(idx[i - 1], idx[d(rng)]);
  }
  const auto n = static_cast<double>(all.size());
  const auto n_val = static_cast<std::size_t>(std::floor(spec.val_frac * n + 1e-9));
  const auto n_test = static_cast<std::size_t>(std::floor(spec.test_frac * n + 1e-9));
  const std::size_t n_train = all.size() - n_val - n_test;
  Corpus c;
  for (std::size_t k = 0; k < idx.size(); ++k) {
    auto& dst = k < n_train ? c.train : (k < n_train + n_val ? c.val : c.test);
    dst.push_back(std::move(all[idx[k]]));
  }
  return c;
}

inline Corpus generate_corpus(const CorpusSpec& spec) { return split_corpus(generate_examples(spec), spec); }

inline std::string to_jsonl(const std::vector<Example>& xs) {
  std::string out;
  for (const auto& x : xs) {
    nlohmann::ordered_json j;
    j["id"] = x.id;
    j["prompt"] = x.prompt;
    j["label"] = x.label;
    out += j.dump() + "\n";
  }
  return out;
}

inline std::vector<Example> parse_jsonl(const std::string& content, const std::string& source = "jsonl") {
  std::vector<Example> out;
  std::size_t line_no = 0;
  for (const auto& line : text::lines(content)) {
    ++line_no;
    if (text::trim(line).empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      out.push_back({j.at("id").get<std::string>(), j.at("prompt").get<std::string>(),
                     j.at("label").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
      throw std::invalid_argument(source + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace dynadepth
