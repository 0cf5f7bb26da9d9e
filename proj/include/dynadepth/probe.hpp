// Copyright 2026 The dynadepth Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dynadepth/corpus.hpp"
#include "dynadepth/metrics.hpp"
#include "dynadepth/model.hpp"
#include "dynadepth/routing.hpp"
#include "dynadepth/text.hpp"
#include "dynadepth/tokenizer.hpp"

namespace dynadepth {

struct ProbeOptions {
  std::size_t max_new = 24;
  /// Routed variants consume their own generations instead of the reference tokens.
  bool free_running = false;
  std::uint64_t seed = 0;
};

struct SimilarityEntry {
  std::string strategy;
  std::size_t cost = 0;
  MeanCi final_sim;
  MeanCi layerwise_sim;
};

struct SimilarityReport {
  std::size_t num_layers = 0;
  std::vector<SimilarityEntry> entries;
};

namespace detail {
inline MeanCi summarize(const std::vector<double>& xs) {
  if (xs.size() >= 2) return mean_ci(xs);
  MeanCi m;
  m.n = xs.size();
  if (!xs.empty()) m.mean = xs[0];
  return m;
}
}  // namespace detail

/// Cosine similarity of routed hidden states against the full model at every
/// generated-token step. `full` is reported once at cost L; other strategies
/// at every grid cost.
inline SimilarityReport probe(const Model& model, const std::vector<Example>& examples,
                              const std::vector<std::string>& strategies, const std::vector<std::size_t>& cost_grid,
                              const ProbeOptions& opts = {}) {
  const std::size_t L = model.config().num_layers;
  struct Variant {
    std::string label;
    RoutePlan plan;
    std::vector<double> fin, lw;
  };
  std::vector<Variant> variants;
  for (const auto& s : strategies) {
    if (s == "full") {
      variants.push_back({s, RoutePlan::full(L), {}, {}});
      continue;
    }
    for (auto c : cost_grid) variants.push_back({s, make_plan(s, L, c, opts.seed), {}, {}});
  }
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto prompt = ByteTokenizer::encode_prompt(examples[i].prompt);
    MaskRouter full_router(RouteMask::all(L));
    GenerateOptions ref_opts;
    ref_opts.max_new = opts.max_new;
    const auto ref = model.generate(prompt, full_router, ref_opts);
    const auto ref_steps = ref.routed_steps();
    for (auto& v : variants) {
      PlanRouter router(v.plan, i);
      GenerateOptions vo;
      vo.max_new = opts.max_new;
      if (!opts.free_running) vo.forced = &ref.generated;
      const auto out = model.generate(prompt, router, vo);
      const auto steps = out.routed_steps();
      const std::size_t n = std::min(steps.size(), ref_steps.size());
      for (std::size_t t = 0; t < n; ++t) {
        const auto& a = ref_steps[t]->trace;
        const auto& b = steps[t]->trace;
        v.fin.push_back(cosine(a.at(L), b.at(L)));
        double s = 0.0;
        for (std::size_t l = 1; l < L; ++l) s += cosine(a.at(l), b.at(l));
        v.lw.push_back(L > 1 ? s / static_cast<double>(L - 1) : 1.0);
      }
    }
  }
  SimilarityReport rep;
  rep.num_layers = L;
  for (const auto& v : variants) {
    rep.entries.push_back({v.label, v.plan.cost, detail::summarize(v.fin), detail::summarize(v.lw)});
  }
  return rep;
}

inline std::string similarity_csv(const SimilarityReport& rep, const std::string& config_hash) {
  std::ostringstream os;
  os << "# config_hash=" << config_hash << '\n';
  os << "# ci=normal approximation, mean +/- 1.959964 * s / sqrt(n), s with n-1\n";
  os << "strategy,cost,metric,mean,ci_low,ci_high,n\n";
  for (const auto& e : rep.entries) {
    for (const auto& [metric, m] : {std::pair<const char*, const MeanCi&>{"final", e.final_sim},
                                    std::pair<const char*, const MeanCi&>{"layerwise", e.layerwise_sim}}) {
      os << e.strategy << ',' << e.cost << ',' << metric << ',' << text::num(m.mean) << ',' << text::num(m.low())
         << ',' << text::num(m.high()) << ',' << m.n << '\n';
    }
  }
  return os.str();
}

struct RankingRow {
  std::size_t cost = 0;
  std::size_t rank = 0;
  std::string strategy;
  MeanCi final_sim;
};

/// Per cost, strategies ordered by final similarity (stable on ties).
inline std::vector<RankingRow> compare_strategies(const SimilarityReport& rep) {
  std::map<std::size_t, std::vector<const SimilarityEntry*>> by_cost;
  for (const auto& e : rep.entries) by_cost[e.cost].push_back(&e);
  std::vector<RankingRow> out;
  for (auto& [cost, es] : by_cost) {
    std::stable_sort(es.begin(), es.end(), [](const SimilarityEntry* a, const SimilarityEntry* b) {
      return a->final_sim.mean > b->final_sim.mean;
    });
    for (std::size_t r = 0; r < es.size(); ++r) out.push_back({cost, r + 1, es[r]->strategy, es[r]->final_sim});
  }
  return out;
}

inline std::string ranking_csv(const std::vector<RankingRow>& rows, const std::string& config_hash) {
  std::ostringstream os;
  os << "# config_hash=" << config_hash << '\n';
  os << "cost,rank,strategy,final_mean,ci_low,ci_high,n\n";
  for (const auto& r : rows) {
    os << r.cost << ',' << r.rank << ',' << r.strategy << ',' << text::num(r.final_sim.mean) << ','
       << text::num(r.final_sim.low()) << ',' << text::num(r.final_sim.high()) << ',' << r.final_sim.n << '\n';
  }
  return os.str();
}

}  // namespace dynadepth
