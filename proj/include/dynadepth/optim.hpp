// Copyright 2026 The dynadepth Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "dynadepth/model.hpp"
#include "dynadepth/tensor.hpp"

namespace dynadepth {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Decoupled weight decay Adam. Decay applies to rank-2 tensors only
/// (matrices and embedding tables); biases and norm gains are not decayed.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  const AdamWConfig& config() const noexcept { return cfg_; }
  std::size_t steps() const noexcept { return t_; }

  /// grads maps parameter names to gradients; names absent from grads are left alone.
  void step(ParameterSet& params, const std::map<std::string, std::vector<double>>& grads, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (const auto& [name, g] : grads) {
      Tensor& p = params.at(name);
      if (g.size() != p.numel()) throw ShapeError("adamw", "gradient size mismatch for '" + name + "'");
      auto& st = state_[name];
      if (st.m.empty()) {
        st.m.assign(g.size(), 0.0);
        st.v.assign(g.size(), 0.0);
      }
      const bool decay = p.rank() == 2;
      auto& w = p.data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        st.m[i] = cfg_.beta1 * st.m[i] + (1.0 - cfg_.beta1) * g[i];
        st.v[i] = cfg_.beta2 * st.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        const double mhat = st.m[i] / bc1;
        const double vhat = st.v[i] / bc2;
        if (decay) w[i] -= lr * cfg_.weight_decay * w[i];
        w[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
  }

 private:
  struct State {
    std::vector<double> m, v;
  };
  AdamWConfig cfg_;
  std::size_t t_ = 0;
  std::map<std::string, State> state_;
};

/// Linear decay from base to 0 over total steps.
inline double linear_decay(double base, std::size_t step, std::size_t total) {
  if (total == 0) return base;
  const double frac = 1.0 - static_cast<double>(step) / static_cast<double>(total);
  return base * std::max(0.0, frac);
}

}  // namespace dynadepth
