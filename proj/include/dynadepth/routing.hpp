// Copyright 2026 The dynadepth Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "dynadepth/rng.hpp"

namespace dynadepth {

/// Realized per-layer execute bits G^1..G^L (index 0 is layer 1).
struct RouteMask {
  std::vector<std::uint8_t> bits;

  std::size_t size() const noexcept { return bits.size(); }
  bool executes(std::size_t layer) const { return bits.at(layer - 1) != 0; }

  /// Layers are serialized as a 0/1 string, layer 1 first.
  std::string str() const {
    std::string s;
    s.reserve(bits.size());
    for (auto b : bits) s.push_back(b ? '1' : '0');
    return s;
  }

  static RouteMask parse(const std::string& s) {
    RouteMask m;
    for (char ch : s) {
      if (ch != '0' && ch != '1') throw std::invalid_argument("route mask must be a 0/1 string: " + s);
      m.bits.push_back(ch == '1');
    }
    return m;
  }

  static RouteMask all(std::size_t num_layers, bool on = true) {
    return RouteMask{std::vector<std::uint8_t>(num_layers, on ? 1 : 0)};
  }

  bool operator==(const RouteMask&) const = default;
};

inline std::size_t cost_of(const RouteMask& mask) {
  return static_cast<std::size_t>(std::count(mask.bits.begin(), mask.bits.end(), 1));
}

namespace detail {
inline void check_cost(const char* who, std::size_t num_layers, std::size_t c) {
  if (num_layers == 0) throw std::invalid_argument(std::string(who) + ": model has no layers");
  if (c < 1 || c > num_layers) {
    throw std::out_of_range(std::string(who) + ": cost " + std::to_string(c) + " outside [1, " +
                            std::to_string(num_layers) + "]");
  }
}
}  // namespace detail

/// Uniform layer skipping: layer l executes iff the number of layers already
/// executed is at most (l - 1) * c / L. Compared in integers (cross-multiplied)
/// so exact ties resolve toward execution.
inline RouteMask uls_mask(std::size_t num_layers, std::size_t c) {
  detail::check_cost("uls_mask", num_layers, c);
  RouteMask m;
  m.bits.resize(num_layers);
  std::size_t executed = 0;
  for (std::size_t l = 1; l <= num_layers; ++l) {
    const bool on = executed * num_layers <= (l - 1) * c;
    m.bits[l - 1] = on;
    executed += on;
  }
  return m;
}

/// Early exit after layer exit_layer.
inline RouteMask ee_mask(std::size_t num_layers, std::size_t exit_layer) {
  detail::check_cost("ee_mask", num_layers, exit_layer);
  RouteMask m = RouteMask::all(num_layers, false);
  for (std::size_t l = 0; l < exit_layer; ++l) m.bits[l] = 1;
  return m;
}

/// Exactly c uniformly chosen layers; layer 1 is forced when enforce_first.
template <class URBG>
RouteMask rls_mask(std::size_t num_layers, std::size_t c, bool enforce_first, URBG& rng) {
  detail::check_cost("rls_mask", num_layers, c);
  RouteMask m = RouteMask::all(num_layers, false);
  std::vector<std::size_t> pool;
  std::size_t need = c;
  if (enforce_first) {
    m.bits[0] = 1;
    --need;
    for (std::size_t l = 1; l < num_layers; ++l) pool.push_back(l);
  } else {
    pool.resize(num_layers);
    std::iota(pool.begin(), pool.end(), std::size_t{0});
  }
  // Partial Fisher-Yates: the first `need` slots are a uniform subset.
  for (std::size_t i = 0; i < need; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
    m.bits[pool[i]] = 1;
  }
  return m;
}

enum class Strategy { Full, EarlyExit, UniformSkip, RandomSkip };

/// A routing strategy for a model of num_layers layers.
struct RoutePlan {
  Strategy kind = Strategy::Full;
  std::size_t num_layers = 0;
  std::size_t cost = 0;
  bool enforce_first = true;
  std::uint64_t seed = 0;
  /// RandomSkip only: draw one mask per sequence instead of per token step.
  bool per_sequence = false;

  static RoutePlan full(std::size_t L) { return {Strategy::Full, L, L}; }
  static RoutePlan early_exit(std::size_t L, std::size_t exit_layer) {
    detail::check_cost("early_exit", L, exit_layer);
    return {Strategy::EarlyExit, L, exit_layer};
  }
  static RoutePlan uniform_skip(std::size_t L, std::size_t c) {
    detail::check_cost("uniform_skip", L, c);
    return {Strategy::UniformSkip, L, c};
  }
  static RoutePlan random_skip(std::size_t L, std::size_t c, bool enforce_first, std::uint64_t seed) {
    detail::check_cost("random_skip", L, c);
    return {Strategy::RandomSkip, L, c, enforce_first, seed};
  }

  /// Short identifier used in file names and reports.
  std::string label() const {
    switch (kind) {
      case Strategy::Full: return "full";
      case Strategy::EarlyExit: return "ee";
      case Strategy::UniformSkip: return "uls";
      case Strategy::RandomSkip: return enforce_first ? "rls" : "rls-no1";
    }
    return "?";
  }

  bool deterministic() const { return kind != Strategy::RandomSkip; }

  /// Mask for deterministic strategies.
  RouteMask fixed_mask() const {
    switch (kind) {
      case Strategy::Full: return RouteMask::all(num_layers);
      case Strategy::EarlyExit: return ee_mask(num_layers, cost);
      case Strategy::UniformSkip: return uls_mask(num_layers, cost);
      case Strategy::RandomSkip: break;
    }
    throw std::logic_error("random_skip has no fixed mask");
  }
};

/// Builds a plan from a strategy label (full, ee, uls, rls, rls-no1).
inline RoutePlan make_plan(const std::string& label, std::size_t L, std::size_t c, std::uint64_t seed) {
  if (label == "full") return RoutePlan::full(L);
  if (label == "ee") return RoutePlan::early_exit(L, c);
  if (label == "uls") return RoutePlan::uniform_skip(L, c);
  if (label == "rls") return RoutePlan::random_skip(L, c, true, seed);
  if (label == "rls-no1") return RoutePlan::random_skip(L, c, false, seed);
  throw std::invalid_argument("unknown strategy '" + label + "'");
}

/// Produces one mask per token step for a plan. Random plans draw from a
/// stream seeded by (plan seed, stream id).
class MaskSampler {
 public:
  MaskSampler(RoutePlan plan, std::uint64_t stream_id)
      : plan_(plan), rng_(make_rng(plan.seed, stream_id)) {
    if (plan_.deterministic()) fixed_ = plan_.fixed_mask();
  }

  RouteMask next() {
    if (plan_.deterministic()) return fixed_;
    if (plan_.per_sequence) {
      if (fixed_.bits.empty()) fixed_ = rls_mask(plan_.num_layers, plan_.cost, plan_.enforce_first, rng_);
      return fixed_;
    }
    return rls_mask(plan_.num_layers, plan_.cost, plan_.enforce_first, rng_);
  }

  const RoutePlan& plan() const noexcept { return plan_; }

 private:
  RoutePlan plan_;
  Rng rng_;
  RouteMask fixed_;
};

}  // namespace dynadepth
