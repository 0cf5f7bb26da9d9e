// Copyright 2026 The dynadepth Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "dynadepth/controller.hpp"
#include "dynadepth/corpus.hpp"
#include "dynadepth/metrics.hpp"
#include "dynadepth/model.hpp"
#include "dynadepth/tokenizer.hpp"

namespace dynadepth {

struct Prediction {
  std::string id;
  std::string text;
  double rouge_l = 0.0;
  std::size_t label_length = 0;
  /// Mean executed layers over routed steps (0 when nothing was generated).
  double mean_cost = 0.0;
  std::size_t routed_steps = 0;
};

struct GenerationEval {
  std::vector<Prediction> predictions;
  double mean_rouge = 0.0;
  /// Mean executed layers over all routed steps in the set.
  double mean_cost = 0.0;
  std::size_t routed_steps = 0;
};

/// Builds a fresh router for the i-th example.
using RouterFactory = std::function<std::unique_ptr<StepRouter>(std::size_t index)>;

inline GenerationEval evaluate_generation(const Model& model, const std::vector<Example>& examples,
                                          const RouterFactory& make_router, std::size_t max_new) {
  GenerationEval ev;
  double cost_sum = 0.0, rouge_sum = 0.0;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& ex = examples[i];
    auto router = make_router(i);
    GenerateOptions opts;
    opts.max_new = max_new;
    const auto res = model.generate(ByteTokenizer::encode_prompt(ex.prompt), *router, opts);
    Prediction p;
    p.id = ex.id;
    p.text = ByteTokenizer::decode(res.generated);
    p.rouge_l = rouge_l_text(p.text, ex.label).f;
    p.label_length = ex.label.size();
    double c = 0.0;
    for (const auto* s : res.routed_steps()) c += static_cast<double>(cost_of(s->mask));
    p.routed_steps = res.routed_steps().size();
    p.mean_cost = p.routed_steps ? c / static_cast<double>(p.routed_steps) : 0.0;
    cost_sum += c;
    ev.routed_steps += p.routed_steps;
    rouge_sum += p.rouge_l;
    ev.predictions.push_back(std::move(p));
  }
  if (!examples.empty()) ev.mean_rouge = rouge_sum / static_cast<double>(examples.size());
  if (ev.routed_steps) ev.mean_cost = cost_sum / static_cast<double>(ev.routed_steps);
  return ev;
}

inline RouterFactory plan_router_factory(const RoutePlan& plan) {
  return [plan](std::size_t i) { return std::make_unique<PlanRouter>(plan, i); };
}

inline RouterFactory controller_router_factory(const Controllers& ctl) {
  return [&ctl](std::size_t) { return std::make_unique<ControllerRouter>(ctl); };
}

/// Fraction of routed steps where each controlled layer was skipped.
inline SkipRatioRow skip_ratio_report(const Model& model, const Controllers& ctl, const std::vector<Example>& corpus,
                                      double alpha, std::size_t max_new) {
  if (corpus.empty()) throw std::invalid_argument("skip_ratio_report: empty corpus");
  SkipRatioRow row;
  row.alpha = alpha;
  row.mode = input_mode_name(ctl.mode());
  row.layers = ctl.controlled();
  std::vector<std::size_t> skips(ctl.num_layers() + 1, 0);
  for (const auto& ex : corpus) {
    ControllerRouter router(ctl);
    GenerateOptions opts;
    opts.max_new = max_new;
    model.generate(ByteTokenizer::encode_prompt(ex.prompt), router, opts);
    row.steps += router.steps();
    for (auto l : row.layers) skips[l] += router.skips(l);
  }
  for (auto l : row.layers) {
    row.skip_ratio.push_back(row.steps ? static_cast<double>(skips[l]) / static_cast<double>(row.steps) : 0.0);
  }
  return row;
}

}  // namespace dynadepth
