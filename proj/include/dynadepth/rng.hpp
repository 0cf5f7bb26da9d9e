// Copyright 2026 The dynadepth Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace dynadepth {

using Rng = std::mt19937_64;

/// Independent stream for (seed, stream id), e.g. (master_seed, sequence_id).
inline Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32),
                    0x6a09e667u};
  return Rng(seq);
}

/// Uniform draw on the open interval (0, 1).
inline double uniform_open(Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double v = u(rng);
  while (v <= 0.0) v = u(rng);
  return v;
}

/// Standard Gumbel(0, 1) sample.
inline double gumbel(Rng& rng) { return -std::log(-std::log(uniform_open(rng))); }

}  // namespace dynadepth
