// Copyright 2026 The dynadepth Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <string>

#include "acceptance_checks.hpp"
#include "dynadepth/metrics.hpp"

namespace dd = dynadepth;

namespace {

// Plain O(nm) table, kept separate from the rolling-row version.
std::size_t lcs_table(const std::string& a, const std::string& b) {
  std::vector<std::vector<std::size_t>> t(a.size() + 1, std::vector<std::size_t>(b.size() + 1, 0));
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      t[i][j] = a[i - 1] == b[j - 1] ? t[i - 1][j - 1] + 1 : std::max(t[i - 1][j], t[i][j - 1]);
    }
  }
  return t[a.size()][b.size()];
}

std::vector<char> chars(const std::string& s) { return {s.begin(), s.end()}; }

}  // namespace

TEST(Lcs, SmallCases) {
  EXPECT_EQ(dd::lcs_length(chars("ABCBDAB"), chars("BDCABA")), 4u);
  EXPECT_EQ(dd::lcs_length(chars(""), chars("abc")), 0u);
  EXPECT_EQ(dd::lcs_length(chars("abc"), chars("abc")), 3u);
  EXPECT_EQ(dd::lcs_length(chars("abc"), chars("def")), 0u);
}

TEST(Lcs, ExhaustiveAgainstSubsequenceEnumeration) {
  const auto o = checks::rouge_oracle(5);
  EXPECT_TRUE(o.pass) << o.detail;
}

TEST(Lcs, LongInputsMatchTable) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> ch('a', 'd');
  std::uniform_int_distribution<std::size_t> len(0, 140);
  for (int k = 0; k < 60; ++k) {
    std::string a(len(rng), ' '), b(len(rng), ' ');
    for (char& c : a) c = static_cast<char>(ch(rng));
    for (char& c : b) c = static_cast<char>(ch(rng));
    ASSERT_EQ(dd::lcs_length(chars(a), chars(b)), lcs_table(a, b)) << a << " / " << b;
    ASSERT_EQ(dd::lcs_length(chars(a), chars(b)), dd::lcs_length(chars(b), chars(a)));
  }
}

TEST(Rouge, FixtureAndEdgeCases) {
  const auto r = dd::rouge_l_text("a b c d", "a c d e");
  EXPECT_EQ(r.f, 0.75);
  EXPECT_EQ(dd::rouge_l_text("", "a").f, 0.0);
  EXPECT_EQ(dd::rouge_l_text("a", "").f, 0.0);
  EXPECT_EQ(dd::rouge_l_text("The CAT .", "the cat").f, 1.0);
  // Attached punctuation stays part of the token.
  EXPECT_EQ(dd::rouge_l_text("The cat.", "the CAT").f, 0.5);
  const auto p = dd::rouge_l_text("a b", "a b c d");
  EXPECT_EQ(p.precision, 1.0);
  EXPECT_EQ(p.recall, 0.5);
  EXPECT_NEAR(p.f, 2.0 / 3.0, 1e-15);
  // Larger beta leans towards recall.
  EXPECT_LT(dd::rouge_l_text("a b", "a b c d", 4.0).f, p.f);
}

TEST(Rouge, TokenizerDropsPunctuationOnlyTokens) {
  EXPECT_EQ(dd::rouge_tokens("Hello , World !"), (std::vector<std::string>{"hello", "world"}));
  EXPECT_EQ(dd::rouge_tokens("  "), std::vector<std::string>{});
}

TEST(Cosine, HandValues) {
  EXPECT_NEAR(dd::cosine({1, 0}, {1, 1}), 0.70710678, 1e-8);
  EXPECT_DOUBLE_EQ(dd::cosine({1, 2}, {2, 4}), 1.0);
  EXPECT_EQ(dd::cosine({0, 0}, {1, 1}), 0.0);
  EXPECT_EQ(dd::cosine({1e-13, 0}, {1, 1}), 0.0);
  EXPECT_NEAR(dd::cosine({1, 0}, {-1, 0}), -1.0, 1e-15);
  EXPECT_THROW(dd::cosine({1}, {1, 2}), std::invalid_argument);
}

TEST(Cosine, BoundedAndSymmetric) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n;
  for (int k = 0; k < 200; ++k) {
    std::vector<double> u(7), v(7);
    for (auto& x : u) x = n(rng);
    for (auto& x : v) x = n(rng);
    const double c = dd::cosine(u, v);
    EXPECT_LE(std::abs(c), 1.0 + 1e-15);
    EXPECT_EQ(c, dd::cosine(v, u));
    EXPECT_NEAR(dd::cosine(u, u), 1.0, 1e-15);
  }
}

TEST(MeanCi, TwoPointFixture) {
  const auto ci = dd::mean_ci({0, 1});
  EXPECT_EQ(ci.mean, 0.5);
  EXPECT_NEAR(ci.half_width, 0.9800, 5e-5);
  EXPECT_EQ(ci.n, 2u);
  EXPECT_THROW(dd::mean_ci({1}), std::invalid_argument);
  const auto flat = dd::mean_ci({3, 3, 3});
  EXPECT_EQ(flat.half_width, 0.0);
}

TEST(Spearman, Cases) {
  EXPECT_NEAR(dd::spearman({1, 2, 3, 4}, {10, 20, 30, 40}), 1.0, 1e-15);
  EXPECT_NEAR(dd::spearman({1, 2, 3, 4}, {4, 3, 2, 1}), -1.0, 1e-15);
  EXPECT_NEAR(dd::spearman({1, 2, 3}, {1, 9, 4}), 0.5, 1e-15);
  // Ties take the average rank: ranks (1.5, 1.5, 3) vs (1, 2, 3).
  EXPECT_NEAR(dd::spearman({5, 5, 7}, {1, 2, 3}), std::sqrt(3.0) / 2.0, 1e-15);
  EXPECT_TRUE(std::isnan(dd::spearman({1, 1, 1}, {1, 2, 3})));
  EXPECT_THROW(dd::spearman({1}, {1}), std::invalid_argument);
  EXPECT_EQ(dd::average_ranks({3, 1, 3, 2}), (std::vector<double>{3.5, 1, 3.5, 2}));
}
