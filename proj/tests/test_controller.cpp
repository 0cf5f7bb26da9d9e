// Copyright 2026 The dynadepth Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "acceptance_checks.hpp"
#include "dynadepth/evaluation.hpp"

namespace dd = dynadepth;

namespace {

std::vector<double> uniform(std::size_t v) { return std::vector<double>(v, 1.0 / static_cast<double>(v)); }

}  // namespace

TEST(GateSample, SaturatedLogitsAlmostAlwaysExecute) {
  auto rng = dd::make_rng(1, 0);
  dd::GumbelConfig g;
  std::size_t on = 0;
  for (int i = 0; i < 10000; ++i) on += dd::gate_sample({20.0, -20.0}, g, rng).execute;
  EXPECT_GT(on, 9990u);
}

TEST(GateSample, EqualLogitsAreAFairCoin) {
  auto rng = dd::make_rng(2, 0);
  dd::GumbelConfig g;
  std::size_t on = 0;
  for (int i = 0; i < 10000; ++i) on += dd::gate_sample({0.0, 0.0}, g, rng).execute;
  EXPECT_NEAR(static_cast<double>(on) / 10000.0, 0.5, 0.02);
}

TEST(GateSample, SeededAndSurrogateIsADistribution) {
  dd::GumbelConfig g;
  g.temperature = 0.5;
  auto a = dd::make_rng(3, 0), b = dd::make_rng(3, 0);
  for (int i = 0; i < 50; ++i) {
    const auto x = dd::gate_sample({0.3, -0.1}, g, a), y = dd::gate_sample({0.3, -0.1}, g, b);
    EXPECT_EQ(x.execute, y.execute);
    EXPECT_EQ(x.surrogate, y.surrogate);
    EXPECT_NEAR(x.surrogate[0] + x.surrogate[1], 1.0, 1e-15);
    EXPECT_EQ(x.execute, x.surrogate[0] >= x.surrogate[1]);
  }
  g.temperature = 0.0;
  EXPECT_THROW(dd::gate_sample({0, 0}, g, a), std::invalid_argument);
}

TEST(ControllerLoss, ZeroAlphaIsKl) {
  const std::vector<std::vector<double>> p{{0.5, 0.25, 0.25}}, q{{0.25, 0.5, 0.25}}, e{{1.0, 0.0}};
  const double kl = 0.5 * std::log(2.0) + 0.25 * std::log(0.5);
  EXPECT_NEAR(dd::controller_loss(p, q, e, 0.0), kl, 1e-15);
}

TEST(ControllerLoss, MatchingDistributionsLeaveOnlyCost) {
  const std::size_t controlled = 6;
  const std::vector<std::vector<double>> p(3, uniform(7));
  const std::vector<std::vector<double>> e(3, std::vector<double>(controlled, 1.0));
  EXPECT_DOUBLE_EQ(dd::controller_loss(p, p, e, 2.5), 2.5 * static_cast<double>(controlled));
}

TEST(ControllerLoss, RejectsBadInputs) {
  const std::vector<std::vector<double>> ok{{0.5, 0.5}}, bad{{0.6, 0.6}}, e{{0.5}};
  EXPECT_THROW(dd::controller_loss(bad, ok, e, 1.0), std::invalid_argument);
  EXPECT_THROW(dd::controller_loss(ok, bad, e, 1.0), std::invalid_argument);
  EXPECT_THROW(dd::controller_loss(ok, ok, {{1.5}}, 1.0), std::invalid_argument);
  EXPECT_THROW(dd::controller_loss({}, {}, {}, 1.0), std::invalid_argument);
}

TEST(Controllers, ControlledSetExcludesFirstAndLast) {
  dd::Controllers c(8, 4, dd::InputMode::HiddenState, false, 0);
  EXPECT_EQ(c.controlled(), (std::vector<std::size_t>{2, 3, 4, 5, 6, 7}));
  EXPECT_EQ(c.floor_cost(), 2u);
  EXPECT_THROW(c.logits(1, std::vector<double>(4)), std::out_of_range);
  EXPECT_THROW(c.logits(8, std::vector<double>(4)), std::out_of_range);
  dd::Controllers last(8, 4, dd::InputMode::HiddenState, true, 0);
  EXPECT_EQ(last.controlled().back(), 8u);
  EXPECT_EQ(last.floor_cost(), 1u);
}

TEST(Controllers, InitialBiasFavoursExecution) {
  dd::Controllers c(4, 3, dd::InputMode::HiddenState, false, 9);
  const auto z = c.logits(2, std::vector<double>(3, 0.0));
  EXPECT_EQ(z[0], 2.0);
  EXPECT_EQ(z[1], 0.0);
}

TEST(Controllers, FixedOnesIgnoresTheHiddenState) {
  dd::Controllers c(6, 5, dd::InputMode::FixedOnes, false, 4);
  const auto a = c.logits(3, std::vector<double>{1, 2, 3, 4, 5});
  const auto b = c.logits(3, std::vector<double>{-9, 0, 0.5, 7, 1e3});
  EXPECT_EQ(a, b);
  dd::Controllers h(6, 5, dd::InputMode::HiddenState, false, 4);
  EXPECT_NE(h.logits(3, std::vector<double>{1, 2, 3, 4, 5}), h.logits(3, std::vector<double>{-9, 0, 0.5, 7, 1e3}));
}

TEST(Controllers, FixedOnesRoutesEveryTokenTheSameWay) {
  const auto cfg = checks::tiny_config();
  const auto m = checks::jittered_model(cfg, 31);
  dd::Controllers c(cfg.num_layers, cfg.hidden_dim, dd::InputMode::FixedOnes, true, 4);
  c.params().at("controller.2.b") = dd::Tensor::vector({-1.0, 1.0});
  dd::ControllerRouter r(c);
  dd::GenerateOptions o;
  o.max_new = 10;
  const auto res = m.generate(dd::ByteTokenizer::encode_prompt("ab:"), r, o);
  const auto steps = res.routed_steps();
  ASSERT_FALSE(steps.empty());
  for (const auto* s : steps) EXPECT_EQ(s->mask.str(), steps.front()->mask.str());
  EXPECT_FALSE(steps.front()->mask.executes(2));
}

TEST(Controllers, RejectsWrongParameterShapes) {
  dd::Controllers c(4, 3, dd::InputMode::HiddenState, false, 1);
  auto ps = c.params();
  ps.at("controller.2.w") = dd::Tensor({2, 2});
  EXPECT_THROW(dd::Controllers(4, 3, dd::InputMode::HiddenState, false, ps), dd::ShapeError);
  EXPECT_EQ(dd::parse_input_mode("hidden"), dd::InputMode::HiddenState);
  EXPECT_EQ(dd::parse_input_mode("fixed"), dd::InputMode::FixedOnes);
  EXPECT_THROW(dd::parse_input_mode("other"), std::invalid_argument);
}

TEST(ControllerRouter, StochasticModeIsSeeded) {
  dd::Controllers c(6, 4, dd::InputMode::FixedOnes, false, 2);
  for (auto l : c.controlled()) c.params().at(dd::controller_param(l, "b")) = dd::Tensor::vector({0.0, 0.0});
  dd::GumbelConfig g;
  g.seed = 8;
  dd::ControllerRouter a(c, true, g), b(c, true, g);
  const std::vector<double> h(4, 0.0);
  std::size_t skips = 0;
  for (int i = 0; i < 200; ++i) {
    a.begin_step();
    b.begin_step();
    for (std::size_t l = 1; l <= 6; ++l) {
      const bool x = a.execute(l, h), y = b.execute(l, h);
      ASSERT_EQ(x, y);
      if (l == 1 || l == 6) {
        EXPECT_TRUE(x);
      }
      skips += !x;
    }
  }
  EXPECT_GT(skips, 0u);
  EXPECT_EQ(a.steps(), 200u);
}

TEST(SkipRatio, SaturatedGatesGiveZeroOrOne) {
  const auto cfg = checks::tiny_config();
  const auto m = checks::jittered_model(cfg, 32);
  dd::Controllers c(cfg.num_layers, cfg.hidden_dim, dd::InputMode::FixedOnes, false, 0);
  const std::vector<dd::Example> corpus{{"a", "copy ab:", "ab"}, {"b", "upper x:", "X"}};
  auto off = c;
  for (auto l : off.controlled()) off.params().at(dd::controller_param(l, "b")) = dd::Tensor::vector({-50.0, 50.0});
  auto on = c;
  for (auto l : on.controlled()) on.params().at(dd::controller_param(l, "b")) = dd::Tensor::vector({50.0, -50.0});
  const auto r_off = dd::skip_ratio_report(m, off, corpus, 1.0, 6);
  const auto r_on = dd::skip_ratio_report(m, on, corpus, 1.0, 6);
  ASSERT_GT(r_off.steps, 0u);
  for (double v : r_off.skip_ratio) EXPECT_EQ(v, 1.0);
  for (double v : r_on.skip_ratio) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(r_on.layers, c.controlled());
  EXPECT_EQ(r_on.mode, "fixed");
  EXPECT_THROW(dd::skip_ratio_report(m, c, {}, 1.0, 6), std::invalid_argument);
}
