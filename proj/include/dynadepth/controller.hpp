// Copyright 2026 The dynadepth Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dynadepth/graph.hpp"
#include "dynadepth/model.hpp"
#include "dynadepth/rng.hpp"
#include "dynadepth/tensor.hpp"

namespace dynadepth {

enum class InputMode { HiddenState, FixedOnes };

inline std::string input_mode_name(InputMode m) { return m == InputMode::HiddenState ? "hidden" : "fixed"; }

inline InputMode parse_input_mode(const std::string& s) {
  if (s == "hidden") return InputMode::HiddenState;
  if (s == "fixed") return InputMode::FixedOnes;
  throw std::invalid_argument("input mode must be 'hidden' or 'fixed', got '" + s + "'");
}

struct GumbelConfig {
  double temperature = 1.0;
  std::uint64_t seed = 0;
  bool hard_forward = true;

  void validate() const {
    if (!(temperature > 0.0)) throw std::invalid_argument("gumbel temperature must be > 0");
  }
};

/// Logit index 0 means execute, index 1 means skip.
struct GateSample {
  bool execute = true;
  std::array<double, 2> surrogate{};
};

/// surrogate = softmax((logits + Gumbel noise) / tau).
inline GateSample gate_sample(const std::array<double, 2>& logits, const GumbelConfig& cfg, Rng& rng) {
  cfg.validate();
  const double z0 = (logits[0] + gumbel(rng)) / cfg.temperature;
  const double z1 = (logits[1] + gumbel(rng)) / cfg.temperature;
  const double m = std::max(z0, z1);
  const double e0 = std::exp(z0 - m), e1 = std::exp(z1 - m);
  GateSample s;
  s.surrogate = {e0 / (e0 + e1), e1 / (e0 + e1)};
  s.execute = s.surrogate[0] >= s.surrogate[1];
  return s;
}

inline std::string controller_param(std::size_t layer, const char* leaf) {
  return "controller." + std::to_string(layer) + "." + leaf;
}

/// One linear gate per controlled layer. Layer 1 is never controlled; the
/// last layer is controlled only when control_last is set.
class Controllers {
 public:
  Controllers(std::size_t num_layers, std::size_t hidden_dim, InputMode mode, bool control_last,
              std::uint64_t seed)
      : num_layers_(num_layers), hidden_dim_(hidden_dim), mode_(mode), control_last_(control_last) {
    set_controlled();
    Rng rng = make_rng(seed, 0xc0de);
    std::normal_distribution<double> normal(0.0, 0.02);
    for (auto l : controlled_) {
      Tensor w({hidden_dim, 2});
      for (double& v : w.data()) v = normal(rng);
      params_.add(controller_param(l, "w"), std::move(w));
      params_.add(controller_param(l, "b"), Tensor::vector({2.0, 0.0}));
    }
  }

  Controllers(std::size_t num_layers, std::size_t hidden_dim, InputMode mode, bool control_last,
              ParameterSet params)
      : num_layers_(num_layers), hidden_dim_(hidden_dim), mode_(mode), control_last_(control_last) {
    set_controlled();
    for (auto l : controlled_) {
      const auto& w = params.at(controller_param(l, "w"));
      const auto& b = params.at(controller_param(l, "b"));
      if (w.shape() != Shape{hidden_dim, 2} || b.shape() != Shape{2}) {
        throw ShapeError("controllers", "layer " + std::to_string(l) + " has w " + shape_str(w.shape()) +
                                            ", b " + shape_str(b.shape()));
      }
    }
    if (params.size() != 2 * controlled_.size()) {
      throw std::invalid_argument("controller parameter set has unexpected entries");
    }
    params_ = std::move(params);
  }

  std::size_t num_layers() const noexcept { return num_layers_; }
  std::size_t hidden_dim() const noexcept { return hidden_dim_; }
  InputMode mode() const noexcept { return mode_; }
  bool control_last() const noexcept { return control_last_; }
  const std::vector<std::size_t>& controlled() const noexcept { return controlled_; }
  bool controls(std::size_t layer) const {
    return layer >= 2 && (layer < num_layers_ || (control_last_ && layer == num_layers_));
  }
  /// Layers that always execute under this controller set.
  std::size_t floor_cost() const { return num_layers_ - controlled_.size(); }

  ParameterSet& params() noexcept { return params_; }
  const ParameterSet& params() const noexcept { return params_; }

  std::array<double, 2> logits(std::size_t layer, std::span<const double> h_prev) const {
    if (!controls(layer)) throw std::out_of_range("layer " + std::to_string(layer) + " is not controlled");
    if (h_prev.size() != hidden_dim_) throw ShapeError("controller", "input dim mismatch");
    const Tensor& w = params_.at(controller_param(layer, "w"));
    const Tensor& b = params_.at(controller_param(layer, "b"));
    std::array<double, 2> z{b[0], b[1]};
    for (std::size_t i = 0; i < hidden_dim_; ++i) {
      const double x = mode_ == InputMode::HiddenState ? h_prev[i] : 1.0;
      z[0] += x * w.at(i, 0);
      z[1] += x * w.at(i, 1);
    }
    return z;
  }

  /// Differentiable gate for layer l over n rows: returns the [n x 2] surrogate
  /// softmax((x W + b + noise) / tau), straight-through one-hot when hard.
  NodeId graph_gate(Graph& g, const GraphParams& p, std::size_t layer, NodeId h_prev, const Tensor& noise,
                    const GumbelConfig& cfg) const {
    cfg.validate();
    const std::size_t n = noise.dim(0);
    const NodeId x = mode_ == InputMode::HiddenState ? h_prev : g.constant(Tensor({n, hidden_dim_}, 1.0));
    const NodeId z = g.add(g.add(g.matmul(x, p(controller_param(layer, "w"))), p(controller_param(layer, "b"))),
                           g.constant(noise));
    const NodeId s = g.softmax(g.scale(z, 1.0 / cfg.temperature));
    return cfg.hard_forward ? g.straight_through(s) : s;
  }

 private:
  std::size_t num_layers_, hidden_dim_;
  InputMode mode_;
  bool control_last_;
  std::vector<std::size_t> controlled_;
  ParameterSet params_;

  void set_controlled() {
    if (num_layers_ == 0 || hidden_dim_ == 0) throw std::invalid_argument("controllers: empty model");
    for (std::size_t l = 2; l <= num_layers_; ++l) {
      if (controls(l)) controlled_.push_back(l);
    }
  }
};

/// Routes generation steps with trained controllers. By default gates use the
/// noise-free argmax of the logits; stochastic mode draws Gumbel noise.
class ControllerRouter : public StepRouter {
 public:
  ControllerRouter(const Controllers& ctl, bool stochastic = false, GumbelConfig gumbel = {},
                   std::uint64_t stream = 0)
      : ctl_(ctl), stochastic_(stochastic), gumbel_(gumbel), rng_(make_rng(gumbel.seed, stream)),
        skips_(ctl.num_layers() + 1, 0) {}

  void begin_step() override { ++steps_; }

  bool execute(std::size_t layer, std::span<const double> h_prev) override {
    if (!ctl_.controls(layer)) return true;
    const auto z = ctl_.logits(layer, h_prev);
    const bool on = stochastic_ ? gate_sample(z, gumbel_, rng_).execute : z[0] >= z[1];
    if (!on) ++skips_[layer];
    return on;
  }

  std::size_t steps() const noexcept { return steps_; }
  std::size_t skips(std::size_t layer) const { return skips_.at(layer); }

 private:
  const Controllers& ctl_;
  bool stochastic_;
  GumbelConfig gumbel_;
  Rng rng_;
  std::size_t steps_ = 0;
  std::vector<std::size_t> skips_;
};

namespace detail {
inline void require_distribution(const std::vector<double>& p, const char* what) {
  double s = 0.0;
  for (double v : p) {
    if (!(v >= 0.0)) throw std::invalid_argument(std::string(what) + " has a negative or NaN entry");
    s += v;
  }
  if (std::abs(s - 1.0) > 1e-9) {
    throw std::invalid_argument(std::string(what) + " sums to " + std::to_string(s) + ", not 1");
  }
}
}  // namespace detail

/// Mean over tokens of KL(p_hat || p_target) + alpha * sum_l exec_probs.
/// Row t of each argument belongs to token t.
inline double controller_loss(const std::vector<std::vector<double>>& p_hat,
                              const std::vector<std::vector<double>>& p_target,
                              const std::vector<std::vector<double>>& exec_probs, double alpha) {
  if (p_hat.empty() || p_hat.size() != p_target.size() || p_hat.size() != exec_probs.size()) {
    throw std::invalid_argument("controller_loss: token counts differ or are zero");
  }
  double total = 0.0;
  for (std::size_t t = 0; t < p_hat.size(); ++t) {
    detail::require_distribution(p_hat[t], "p_hat");
    detail::require_distribution(p_target[t], "p_target");
    if (p_hat[t].size() != p_target[t].size()) throw std::invalid_argument("controller_loss: vocab mismatch");
    double kl = 0.0;
    for (std::size_t v = 0; v < p_hat[t].size(); ++v) {
      if (p_hat[t][v] > 0.0) kl += p_hat[t][v] * (std::log(p_hat[t][v]) - std::log(p_target[t][v]));
    }
    double cost = 0.0;
    for (double e : exec_probs[t]) {
      if (!(e >= 0.0 && e <= 1.0)) throw std::invalid_argument("controller_loss: exec prob outside [0,1]");
      cost += e;
    }
    total += kl + alpha * cost;
  }
  return total / static_cast<double>(p_hat.size());
}

/// Per-layer skip fractions over routed steps, keyed by alpha.
struct SkipRatioRow {
  double alpha = 0.0;
  std::string mode;
  std::vector<std::size_t> layers;
  std::vector<double> skip_ratio;
  std::size_t steps = 0;
};

}  // namespace dynadepth
