// Copyright 2026 The dynadepth Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

namespace dynadepth {

/// Byte-level tokenizer: ids 0..255 are raw bytes, followed by BOS, EOS, PAD.
struct ByteTokenizer {
  static constexpr std::size_t kBos = 256;
  static constexpr std::size_t kEos = 257;
  static constexpr std::size_t kPad = 258;
  static constexpr std::size_t kVocabSize = 259;
  static constexpr std::string_view kId = "byte-level-v1";

  static std::vector<std::size_t> encode(std::string_view text) {
    std::vector<std::size_t> ids;
    ids.reserve(text.size());
    for (unsigned char ch : text) ids.push_back(ch);
    return ids;
  }

  /// Prompt tokens as fed to the model: BOS followed by the prompt bytes.
  static std::vector<std::size_t> encode_prompt(std::string_view prompt) {
    std::vector<std::size_t> ids{kBos};
    for (unsigned char ch : prompt) ids.push_back(ch);
    return ids;
  }

  /// Drops special tokens.
  static std::string decode(const std::vector<std::size_t>& ids) {
    std::string out;
    for (auto id : ids) {
      if (id < 256) out.push_back(static_cast<char>(id));
    }
    return out;
  }
};

}  // namespace dynadepth
