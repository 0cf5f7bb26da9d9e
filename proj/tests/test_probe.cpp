// Copyright 2026 The dynadepth Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "acceptance_checks.hpp"
#include "dynadepth/probe.hpp"

namespace dd = dynadepth;

namespace {

dd::ModelConfig probe_config() {
  dd::ModelConfig c;
  c.num_layers = 6;
  c.hidden_dim = 16;
  c.num_heads = 2;
  c.ffn_dim = 32;
  c.max_context = 64;
  return c;
}

const std::vector<dd::Example>& examples() {
  static const std::vector<dd::Example> xs{
      {"a", "copy cat dog:", "cat dog"}, {"b", "reverse sun red:", "red sun"}, {"c", "add 4 5:", "9"}};
  return xs;
}

const dd::SimilarityEntry& find(const dd::SimilarityReport& r, const std::string& s, std::size_t c) {
  for (const auto& e : r.entries) {
    if (e.strategy == s && e.cost == c) return e;
  }
  throw std::out_of_range("no entry " + s);
}

}  // namespace

TEST(Probe, FullAndEarlyExitAtLAreExactlyOne) {
  const auto m = checks::jittered_model(probe_config(), 1);
  dd::ProbeOptions o;
  o.max_new = 8;
  const auto r = dd::probe(m, examples(), {"full", "ee"}, {6}, o);
  for (const char* s : {"full", "ee"}) {
    const auto& e = find(r, s, 6);
    EXPECT_EQ(e.final_sim.mean, 1.0) << s;
    EXPECT_EQ(e.layerwise_sim.mean, 1.0) << s;
    EXPECT_GT(e.final_sim.n, 3u);
  }
}

TEST(Probe, EarlyExitPrefixLayersAreIdentical) {
  // With L_E = c, layers 1..c match exactly and the rest repeat h^c.
  const auto cfg = probe_config();
  const auto m = checks::jittered_model(cfg, 2);
  const auto prompt = dd::ByteTokenizer::encode_prompt("copy cat:");
  const auto ref = m.generate(prompt, dd::RoutePlan::full(6), 6, 0);
  dd::PlanRouter router(dd::RoutePlan::early_exit(6, 3), 0);
  dd::GenerateOptions o;
  o.forced = &ref.generated;
  const auto out = m.generate(prompt, router, o);
  const auto a = ref.routed_steps(), b = out.routed_steps();
  ASSERT_FALSE(a.empty());
  ASSERT_GE(b.size(), a.size());
  for (std::size_t t = 0; t < a.size(); ++t) {
    for (std::size_t l = 1; l <= 3; ++l) EXPECT_EQ(a[t]->trace.at(l), b[t]->trace.at(l));
  }
}

TEST(Probe, CostOutsideRangeIsAnError) {
  const auto m = checks::jittered_model(probe_config(), 3);
  EXPECT_THROW(dd::probe(m, examples(), {"uls"}, {0}), std::out_of_range);
  EXPECT_THROW(dd::probe(m, examples(), {"ee"}, {7}), std::out_of_range);
}

TEST(Probe, DeterministicGivenSeed) {
  const auto m = checks::jittered_model(probe_config(), 4);
  dd::ProbeOptions o;
  o.max_new = 6;
  o.seed = 12;
  const std::vector<std::string> strategies{"ee", "uls", "rls", "rls-no1"};
  const auto a = dd::similarity_csv(dd::probe(m, examples(), strategies, {2, 3, 4}, o), "h");
  const auto b = dd::similarity_csv(dd::probe(m, examples(), strategies, {2, 3, 4}, o), "h");
  EXPECT_EQ(a, b);
  o.seed = 13;
  EXPECT_NE(a, dd::similarity_csv(dd::probe(m, examples(), strategies, {2, 3, 4}, o), "h"));
}

TEST(Probe, SimilaritiesAreCosines) {
  const auto m = checks::jittered_model(probe_config(), 5);
  dd::ProbeOptions o;
  o.max_new = 6;
  const auto r = dd::probe(m, examples(), {"ee", "uls", "rls-no1"}, {1, 2, 4}, o);
  EXPECT_EQ(r.entries.size(), 9u);
  for (const auto& e : r.entries) {
    EXPECT_LE(e.final_sim.mean, 1.0 + 1e-12);
    EXPECT_GE(e.final_sim.mean, -1.0 - 1e-12);
    EXPECT_EQ(e.final_sim.n, e.layerwise_sim.n);
  }
}

TEST(Probe, FreeRunningModeStillTerminates) {
  const auto m = checks::jittered_model(probe_config(), 6);
  dd::ProbeOptions o;
  o.max_new = 5;
  o.free_running = true;
  const auto r = dd::probe(m, examples(), {"uls"}, {2}, o);
  ASSERT_EQ(r.entries.size(), 1u);
  EXPECT_GT(r.entries[0].final_sim.n, 0u);
}

TEST(Ranking, SingletonAndStableDuplicates) {
  dd::SimilarityReport rep;
  rep.num_layers = 8;
  dd::MeanCi hi{0.9, 0.01, 10}, lo{0.5, 0.01, 10};
  rep.entries.push_back({"uls", 4, hi, hi});
  auto one = dd::compare_strategies(rep);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0].rank, 1u);
  rep.entries.push_back({"ee", 4, lo, lo});
  rep.entries.push_back({"rls", 4, lo, lo});
  rep.entries.push_back({"rls", 2, lo, lo});
  const auto rows = dd::compare_strategies(rep);
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0].cost, 2u);
  EXPECT_EQ(rows[1].strategy, "uls");
  EXPECT_EQ(rows[2].strategy, "ee");
  EXPECT_EQ(rows[3].strategy, "rls");
  EXPECT_EQ(rows[3].rank, 3u);
}

TEST(Ranking, DuplicateStrategiesScoreIdentically) {
  const auto m = checks::jittered_model(probe_config(), 7);
  dd::ProbeOptions o;
  o.max_new = 5;
  const auto r = dd::probe(m, examples(), {"uls", "uls"}, {3}, o);
  ASSERT_EQ(r.entries.size(), 2u);
  EXPECT_EQ(r.entries[0].final_sim.mean, r.entries[1].final_sim.mean);
  const auto rows = dd::compare_strategies(r);
  EXPECT_EQ(rows[0].rank, 1u);
  EXPECT_EQ(rows[1].rank, 2u);
}

TEST(Probe, CsvLayout) {
  dd::SimilarityReport rep;
  rep.num_layers = 8;
  rep.entries.push_back({"ee", 2, {0.5, 0.1, 4}, {0.75, 0.0, 4}});
  const auto csv = dd::similarity_csv(rep, "abc");
  EXPECT_EQ(csv,
            "# config_hash=abc\n"
            "# ci=normal approximation, mean +/- 1.959964 * s / sqrt(n), s with n-1\n"
            "strategy,cost,metric,mean,ci_low,ci_high,n\n"
            "ee,2,final,0.5,0.4,0.6,4\n"
            "ee,2,layerwise,0.75,0.75,0.75,4\n");
}
