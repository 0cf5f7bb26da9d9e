// Copyright 2026 The dynadepth Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <string_view>

#include <openssl/evp.h>

namespace dynadepth {

inline std::string sha1_hex(std::string_view data) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md.data(), &len, EVP_sha1(), nullptr) != 1) {
    throw std::runtime_error("sha1 digest failed");
  }
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", md[i]);
    hex += buf;
  }
  return hex;
}

/// Same digest git assigns to a blob with this content.
inline std::string git_blob_hash(std::string_view content) {
  std::string framed = "blob " + std::to_string(content.size());
  framed.push_back('\0');
  framed.append(content);
  return sha1_hex(framed);
}

}  // namespace dynadepth
