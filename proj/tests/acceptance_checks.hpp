// Copyright 2026 The dynadepth Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <memory>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dynadepth/controller.hpp"
#include "dynadepth/graph.hpp"
#include "dynadepth/metrics.hpp"
#include "dynadepth/model.hpp"
#include "dynadepth/oracle.hpp"
#include "dynadepth/routing.hpp"
#include "dynadepth/text.hpp"
#include "dynadepth/trainer.hpp"

namespace checks {

namespace dd = dynadepth;

struct Outcome {
  bool pass = false;
  std::string detail;
};

// ---------------------------------------------------------------- ULS

inline Outcome uls_exactness(const std::string& fixture_path) {
  std::size_t checked = 0;
  for (std::size_t L = 1; L <= 48; ++L) {
    for (std::size_t c = 1; c <= L; ++c) {
      const auto m = dd::uls_mask(L, c);
      if (dd::cost_of(m) != c || !m.executes(1)) {
        return {false, "popcount/first layer fails at L=" + std::to_string(L) + " c=" + std::to_string(c)};
      }
      const std::size_t lo = L / c, hi = (L + c - 1) / c;
      std::size_t prev = 0;
      for (std::size_t l = 1; l <= L; ++l) {
        if (!m.executes(l)) continue;
        if (prev) {
          const std::size_t gap = l - prev;
          if (gap != lo && gap != hi) {
            return {false, "spacing fails at L=" + std::to_string(L) + " c=" + std::to_string(c)};
          }
        }
        prev = l;
      }
      ++checked;
    }
  }
  std::ifstream in(fixture_path);
  if (!in) return {false, "fixture missing: " + fixture_path};
  std::string line;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::size_t c = 0;
    std::string mask;
    ls >> c >> mask;
    if (dd::uls_mask(24, c).str() != mask) return {false, "L=24 fixture mismatch at c=" + std::to_string(c)};
    ++rows;
  }
  if (rows != 24) return {false, "L=24 fixture has " + std::to_string(rows) + " rows"};
  return {true, std::to_string(checked) + " (L,c) pairs, 24 fixture masks"};
}

// ---------------------------------------------------------------- knapsack

/// Exhaustive multiple-choice knapsack: best score, then lower total cost,
/// then lexicographically smallest per-row cost vector.
inline std::vector<std::size_t> brute_force_assignment(const dd::ScoreMatrix& m, double beta) {
  const std::size_t n = m.rows(), k = m.cols();
  const auto budget = static_cast<std::size_t>(std::floor(beta * static_cast<double>(n) + 1e-9));
  std::vector<std::size_t> cur(n, 0), best;
  double best_score = -1.0;
  std::size_t best_cost = 0;
  std::vector<std::size_t> best_s;
  while (true) {
    std::size_t cost = 0;
    double score = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      cost += m.costs[cur[i]];
      score += m.scores[i][cur[i]];
    }
    if (cost <= budget) {
      std::vector<std::size_t> s(n);
      for (std::size_t i = 0; i < n; ++i) s[i] = m.costs[cur[i]];
      bool take = best.empty() || score > best_score + 1e-12;
      if (!take && std::abs(score - best_score) <= 1e-12) {
        take = cost < best_cost || (cost == best_cost && s < best_s);
      }
      if (take) {
        best = cur;
        best_score = score;
        best_cost = cost;
        best_s = s;
      }
    }
    std::size_t i = 0;
    while (i < n && ++cur[i] == k) cur[i++] = 0;
    if (i == n) break;
  }
  return best;
}

inline dd::ScoreMatrix random_matrix(std::mt19937_64& rng, std::size_t n, const std::vector<std::size_t>& costs,
                                     bool quantized) {
  dd::ScoreMatrix m;
  m.costs = costs;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> q(0, 4);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> row;
    for (std::size_t j = 0; j < costs.size(); ++j) row.push_back(quantized ? q(rng) * 0.25 : u(rng));
    m.add_row("r" + std::to_string(i), 1 + i, std::move(row));
  }
  return m;
}

inline std::vector<std::size_t> random_costs(std::mt19937_64& rng, const std::vector<std::size_t>& pool,
                                             std::size_t k) {
  std::vector<std::size_t> p = pool;
  std::shuffle(p.begin(), p.end(), rng);
  p.resize(k);
  return p;
}

inline Outcome knapsack_exactness(std::size_t instances = 200, bool quantized = false, std::uint64_t seed = 2024) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> n_d(1, 8), k_d(1, 4);
  for (std::size_t t = 0; t < instances; ++t) {
    const auto costs = random_costs(rng, {4, 8, 12, 24}, k_d(rng));
    const auto m = random_matrix(rng, n_d(rng), costs, quantized);
    const double lo = static_cast<double>(m.min_cost()), hi = static_cast<double>(m.max_cost());
    std::uniform_real_distribution<double> b_d(lo, hi + 2.0);
    for (double beta : {lo, b_d(rng), b_d(rng), hi}) {
      const auto exact = dd::solve_exact(m, beta);
      const auto brute = brute_force_assignment(m, beta);
      if (exact.choice != brute) {
        return {false, "assignment differs on instance " + std::to_string(t) + " beta=" + dd::text::num(beta)};
      }
      double v = 0.0;
      for (std::size_t i = 0; i < m.rows(); ++i) v += m.scores[i][brute[i]];
      if (std::abs(exact.mean_score - v / static_cast<double>(m.rows())) > 1e-12) {
        return {false, "optimal value differs on instance " + std::to_string(t)};
      }
    }
  }
  return {true, std::to_string(instances) + " instances x 4 budgets match enumeration"};
}

inline Outcome oracle_dominance(std::size_t instances = 100, std::uint64_t seed = 77) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> n_d(1, 40), k_d(1, 5), c_d(1, 24), g_d(2, 12);
  std::vector<std::size_t> pool(24);
  for (std::size_t i = 0; i < 24; ++i) pool[i] = i + 1;
  for (std::size_t t = 0; t < instances; ++t) {
    const auto m = random_matrix(rng, n_d(rng), random_costs(rng, pool, k_d(rng)), false);
    const double lo = static_cast<double>(m.min_cost()), hi = static_cast<double>(m.max_cost());
    std::uniform_real_distribution<double> b_d(lo, hi);
    std::vector<double> grid{lo, hi};
    for (std::size_t i = g_d(rng); i > 0; --i) grid.push_back(b_d(rng));
    std::sort(grid.begin(), grid.end());
    const auto sw = dd::sweep(m, grid);
    double prev = -1.0;
    for (const auto& p : sw.points) {
      const double e = p.exact.mean_score, g = p.greedy.mean_score;
      if (e < g - 1e-12 || g < p.best_single - 1e-12) {
        return {false, "chain exact>=greedy>=single broken on instance " + std::to_string(t)};
      }
      if (e < prev - 1e-12) return {false, "exact(beta) decreases on instance " + std::to_string(t)};
      if (p.exact.total_cost > static_cast<std::size_t>(std::floor(p.beta * static_cast<double>(m.rows()) + 1e-9))) {
        return {false, "exact exceeds budget on instance " + std::to_string(t)};
      }
      prev = e;
    }
    const auto& top = sw.points.back();
    if (std::abs(top.exact.mean_score - top.greedy.mean_score) > 1e-12) {
      return {false, "exact != greedy at max cost on instance " + std::to_string(t)};
    }
  }
  return {true, std::to_string(instances) + " matrices with random budget grids"};
}

// ---------------------------------------------------------------- gradients

struct GradCase {
  std::string name;
  double worst = 0.0;
  bool pass = false;
};

inline dd::Tensor random_tensor(std::mt19937_64& rng, dd::Shape shape, double lo = -1.0, double hi = 1.0) {
  dd::Tensor t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (double& v : t.data()) v = u(rng);
  return t;
}

/// Reduces y to a scalar through fixed random weights so no gradient is trivially uniform.
inline dd::NodeId weighted_sum(dd::Graph& g, dd::NodeId y, std::mt19937_64& rng) {
  return g.sum(g.multiply(y, g.constant(random_tensor(rng, g.value(y).shape()))));
}

inline dd::ModelConfig tiny_config() {
  dd::ModelConfig c;
  c.num_layers = 3;
  c.hidden_dim = 8;
  c.num_heads = 2;
  c.ffn_dim = 16;
  c.max_context = 32;
  return c;
}

/// Perturbs every parameter away from its initialization so LayerNorm gains
/// and biases are not at special points.
inline dd::Model jittered_model(const dd::ModelConfig& cfg, std::uint64_t seed) {
  dd::Model base(cfg, seed);
  dd::ParameterSet ps = base.params();
  std::mt19937_64 rng(seed + 1);
  std::normal_distribution<double> n(0.0, 0.3);
  for (std::size_t i = 0; i < ps.size(); ++i) {
    for (double& v : ps.at(i).data()) v += n(rng);
  }
  return dd::Model(cfg, std::move(ps));
}

inline std::vector<GradCase> gradient_suite(double tol = 1e-4) {
  std::vector<GradCase> out;
  std::mt19937_64 rng(99);
  dd::GradCheckOptions opts;
  opts.step = 1e-5;
  auto run = [&](const std::string& name, const std::function<dd::NodeId(dd::Graph&)>& build,
                 dd::GradCheckOptions o) {
    dd::Graph g;
    const dd::NodeId loss = build(g);
    const auto rep = dd::gradient_check(g, loss, tol, o);
    out.push_back({name, rep.worst(), rep.passed() && !rep.leaves.empty()});
  };
  auto op = [&](const std::string& name, const std::function<dd::NodeId(dd::Graph&)>& build) { run(name, build, opts); };

  op("matmul", [&](dd::Graph& g) {
    return weighted_sum(g, g.matmul(g.parameter("a", random_tensor(rng, {3, 4})), g.parameter("b", random_tensor(rng, {4, 5}))), rng);
  });
  op("add", [&](dd::Graph& g) {
    return weighted_sum(g, g.add(g.parameter("a", random_tensor(rng, {3, 4})), g.parameter("b", random_tensor(rng, {3, 4}))), rng);
  });
  op("add_rowwise", [&](dd::Graph& g) {
    return weighted_sum(g, g.add(g.parameter("a", random_tensor(rng, {3, 4})), g.parameter("b", random_tensor(rng, {4}))), rng);
  });
  op("sub", [&](dd::Graph& g) {
    return weighted_sum(g, g.sub(g.parameter("a", random_tensor(rng, {3, 4})), g.parameter("b", random_tensor(rng, {3, 4}))), rng);
  });
  op("sub_rowwise", [&](dd::Graph& g) {
    return weighted_sum(g, g.sub(g.parameter("a", random_tensor(rng, {3, 4})), g.parameter("b", random_tensor(rng, {4}))), rng);
  });
  op("multiply", [&](dd::Graph& g) {
    return weighted_sum(g, g.multiply(g.parameter("a", random_tensor(rng, {3, 4})), g.parameter("b", random_tensor(rng, {3, 4}))), rng);
  });
  op("multiply_rowwise", [&](dd::Graph& g) {
    return weighted_sum(g, g.multiply(g.parameter("a", random_tensor(rng, {3, 4})), g.parameter("b", random_tensor(rng, {4}))), rng);
  });
  op("scale", [&](dd::Graph& g) { return weighted_sum(g, g.scale(g.parameter("a", random_tensor(rng, {3, 4})), -1.7), rng); });
  op("layer_norm", [&](dd::Graph& g) {
    return weighted_sum(g, g.layer_norm(g.parameter("a", random_tensor(rng, {3, 6})), 1e-5), rng);
  });
  op("softmax", [&](dd::Graph& g) { return weighted_sum(g, g.softmax(g.parameter("a", random_tensor(rng, {3, 5}))), rng); });
  op("log_softmax", [&](dd::Graph& g) {
    return weighted_sum(g, g.log_softmax(g.parameter("a", random_tensor(rng, {3, 5}))), rng);
  });
  op("gelu", [&](dd::Graph& g) { return weighted_sum(g, g.gelu(g.parameter("a", random_tensor(rng, {3, 5}, -3, 3))), rng); });
  op("embedding", [&](dd::Graph& g) {
    return weighted_sum(g, g.embedding(g.parameter("t", random_tensor(rng, {6, 4})), {0, 3, 3, 5, 1}), rng);
  });
  op("concat_rows", [&](dd::Graph& g) {
    return weighted_sum(g, g.concat({g.parameter("a", random_tensor(rng, {2, 3})), g.parameter("b", random_tensor(rng, {4, 3}))}, 0), rng);
  });
  op("concat_cols", [&](dd::Graph& g) {
    return weighted_sum(g, g.concat({g.parameter("a", random_tensor(rng, {3, 2})), g.parameter("b", random_tensor(rng, {3, 4}))}, 1), rng);
  });
  op("slice_rows", [&](dd::Graph& g) {
    return weighted_sum(g, g.slice(g.parameter("a", random_tensor(rng, {5, 3})), 0, 1, 4), rng);
  });
  op("slice_cols", [&](dd::Graph& g) {
    return weighted_sum(g, g.slice(g.parameter("a", random_tensor(rng, {3, 5})), 1, 2, 5), rng);
  });
  op("transpose", [&](dd::Graph& g) {
    return weighted_sum(g, g.transpose(g.parameter("a", random_tensor(rng, {3, 5}))), rng);
  });
  op("sum", [&](dd::Graph& g) {
    const auto a = g.parameter("a", random_tensor(rng, {3, 4}));
    return g.multiply(g.sum(g.multiply(a, a)), g.constant(dd::Tensor::scalar(0.7)));
  });
  op("mean", [&](dd::Graph& g) {
    const auto a = g.parameter("a", random_tensor(rng, {3, 4}));
    return g.mean(g.multiply(a, a));
  });
  op("log", [&](dd::Graph& g) { return weighted_sum(g, g.log(g.parameter("a", random_tensor(rng, {3, 4}, 0.5, 2.0))), rng); });
  op("exp", [&](dd::Graph& g) { return weighted_sum(g, g.exp(g.parameter("a", random_tensor(rng, {3, 4}))), rng); });
  op("scale_rows_vector", [&](dd::Graph& g) {
    return weighted_sum(g, g.scale_rows(g.parameter("x", random_tensor(rng, {3, 4})), g.parameter("s", random_tensor(rng, {3}))), rng);
  });
  op("scale_rows_column", [&](dd::Graph& g) {
    return weighted_sum(g, g.scale_rows(g.parameter("x", random_tensor(rng, {3, 4})), g.parameter("s", random_tensor(rng, {3, 1}))), rng);
  });
  op("attention_chain", [&](dd::Graph& g) {
    const auto q = g.parameter("q", random_tensor(rng, {4, 3})), k = g.parameter("k", random_tensor(rng, {4, 3})),
               v = g.parameter("v", random_tensor(rng, {4, 3}));
    const auto s = g.softmax(g.scale(g.matmul(q, g.transpose(k)), 0.577));
    return weighted_sum(g, g.matmul(s, v), rng);
  });

  dd::GradCheckOptions dense = opts;
  dense.max_per_leaf = 24;
  const auto cfg = tiny_config();
  const auto model = jittered_model(cfg, 3);
  const std::vector<std::size_t> tokens{1, 70, 101, 58, 9, 200, 33};
  run("transformer_forward", [&](dd::Graph& g) {
    const auto p = dd::bind_parameters(g, model.params(), true);
    const auto sg = model.build_graph(g, p, tokens);
    return weighted_sum(g, g.log_softmax(sg.logits), rng);
  }, dense);

  // Controller objective through the continuous Gumbel surrogate.
  dd::Example ex{"g0", "copy ab:", "ab"};
  const auto t = dd::tokenize_example(ex, cfg.max_context);
  const auto teacher_model = jittered_model(cfg, 8);
  const auto teacher = dd::teacher_log_probs(teacher_model, t);
  for (const auto& [label, target, dir, mode] :
       std::vector<std::tuple<std::string, dd::ControllerTarget, dd::KlDirection, dd::InputMode>>{
           {"controller_loss_forward_kl_hidden", dd::ControllerTarget::Teacher, dd::KlDirection::Forward,
            dd::InputMode::HiddenState},
           {"controller_loss_reverse_kl_hidden", dd::ControllerTarget::Teacher, dd::KlDirection::Reverse,
            dd::InputMode::HiddenState},
           {"controller_loss_forward_kl_fixed", dd::ControllerTarget::Teacher, dd::KlDirection::Forward,
            dd::InputMode::FixedOnes},
           {"controller_loss_labels", dd::ControllerTarget::Labels, dd::KlDirection::Reverse,
            dd::InputMode::HiddenState}}) {
    dd::Controllers ctl(cfg.num_layers, cfg.hidden_dim, mode, true, 4);
    for (std::size_t i = 0; i < ctl.params().size(); ++i) {
      for (double& v : ctl.params().at(i).data()) v = std::uniform_real_distribution<double>(-0.8, 0.8)(rng);
    }
    dd::ControllerTrainConfig cc;
    cc.alpha = 2.5;
    cc.gumbel.hard_forward = false;
    cc.gumbel.temperature = 0.8;
    cc.target = target;
    cc.direction = dir;
    auto noise = dd::make_rng(5, 6);
    auto cg = dd::build_controller_graph(model, ctl, t, &teacher, cc, 1.0 / static_cast<double>(t.loss_rows()),
                                         1.0 / static_cast<double>(t.gated_rows()), &noise);
    const auto rep = dd::gradient_check(cg->graph, cg->loss, tol, dense);
    out.push_back({std::string(label), rep.worst(), rep.passed() && !rep.leaves.empty()});
  }
  return out;
}

inline Outcome gradient_outcome(const std::vector<GradCase>& cases) {
  double worst = 0.0;
  std::string failed;
  for (const auto& c : cases) {
    worst = std::max(worst, c.worst);
    if (!c.pass) failed += (failed.empty() ? "" : ",") + c.name;
  }
  std::ostringstream os;
  os << cases.size() << " cases, worst relative error " << worst;
  if (!failed.empty()) os << ", failed: " << failed;
  return {failed.empty(), os.str()};
}

// ---------------------------------------------------------------- routing equivalence

inline Outcome routing_equivalence(std::size_t inputs = 50) {
  dd::ModelConfig cfg;
  cfg.max_context = 64;
  const dd::Model model(cfg, 17);
  std::mt19937_64 rng(31);
  std::uniform_int_distribution<std::size_t> len_d(1, 24), tok_d(0, cfg.vocab_size - 1);
  const auto ones = dd::RouteMask::all(cfg.num_layers);
  const auto ee_plan = dd::RoutePlan::early_exit(cfg.num_layers, cfg.num_layers);
  for (std::size_t k = 0; k < inputs; ++k) {
    std::vector<std::size_t> toks(len_d(rng));
    for (auto& t : toks) t = tok_d(rng);
    dd::KVCache ca(cfg), cb(cfg), cc(cfg);
    dd::PlanRouter ee(ee_plan, k);
    dd::SequenceState s;
    for (auto t : toks) {
      s.prompt.push_back(t);
      const auto a = model.forward(s, ca);
      const auto b = model.routed_forward(s, ones, cb);
      ee.begin_step();
      const auto c = model.routed_forward(s, ee, cc);
      if (a.probs != b.probs || a.trace.states != b.trace.states) {
        return {false, "all-ones mask differs from forward on input " + std::to_string(k)};
      }
      if (a.probs != c.probs || a.trace.states != c.trace.states) {
        return {false, "full early exit differs from forward on input " + std::to_string(k)};
      }
    }
    for (std::size_t l = 1; l <= cfg.num_layers; ++l) {
      for (std::size_t p = 0; p < toks.size(); ++p) {
        const auto ka = ca.key(l, p), kb = cb.key(l, p), kc = cc.key(l, p);
        if (!std::equal(ka.begin(), ka.end(), kb.begin()) || !std::equal(ka.begin(), ka.end(), kc.begin())) {
          return {false, "kv caches differ on input " + std::to_string(k)};
        }
      }
    }
  }
  return {true, std::to_string(inputs) + " random inputs bit-identical (all-ones and EE at L)"};
}

// ---------------------------------------------------------------- kv fill

class BernoulliRouter : public dd::StepRouter {
 public:
  BernoulliRouter(double p, std::uint64_t seed) : rng_(seed), p_(p) {}
  bool execute(std::size_t, std::span<const double>) override { return std::bernoulli_distribution(p_)(rng_); }

 private:
  std::mt19937_64 rng_;
  double p_;
};

inline bool cache_complete(const dd::KVCache& c) {
  for (std::size_t l = 1; l <= c.num_layers(); ++l) {
    for (std::size_t p = 0; p < c.length(); ++p) {
      if (c.provenance(l, p) == dd::KvProvenance::Absent) return false;
    }
  }
  return c.count(dd::KvProvenance::Absent) == 0;
}

inline Outcome kv_fill_contract(std::size_t prompts = 6) {
  dd::ModelConfig cfg;
  cfg.max_context = 64;
  const dd::Model model(cfg, 23);
  const std::size_t L = cfg.num_layers;
  std::mt19937_64 rng(41);
  std::uniform_int_distribution<std::size_t> len_d(1, 10), tok_d(3, cfg.vocab_size - 1);
  std::size_t runs = 0, filled_total = 0;
  for (std::size_t k = 0; k < prompts; ++k) {
    std::vector<std::size_t> prompt(len_d(rng));
    for (auto& t : prompt) t = tok_d(rng);
    std::vector<std::pair<std::string, std::unique_ptr<dd::StepRouter>>> routers;
    routers.emplace_back("full", std::make_unique<dd::PlanRouter>(dd::RoutePlan::full(L), k));
    for (const std::string s : {"ee", "uls", "rls", "rls-no1"}) {
      for (std::size_t c = 1; c <= L; ++c) {
        routers.emplace_back(s, std::make_unique<dd::PlanRouter>(dd::make_plan(s, L, c, 7 + k), k));
      }
    }
    for (double p : {0.1, 0.5, 0.9}) routers.emplace_back("bernoulli", std::make_unique<BernoulliRouter>(p, 100 * k + 1));
    routers.emplace_back("mask", std::make_unique<dd::MaskRouter>(dd::RouteMask::parse("10100110")));
    routers.emplace_back("mask-ones", std::make_unique<dd::MaskRouter>(dd::RouteMask::all(L)));
    dd::Controllers ctl(L, cfg.hidden_dim, dd::InputMode::HiddenState, false, k);
    for (std::size_t i = 0; i < ctl.params().size(); ++i) {
      for (double& v : ctl.params().at(i).data()) v = std::normal_distribution<double>(0.0, 1.0)(rng);
    }
    dd::GumbelConfig gc;
    gc.seed = k;
    routers.emplace_back("controller", std::make_unique<dd::ControllerRouter>(ctl, true, gc, k));
    for (auto& [name, r] : routers) {
      for (bool sample : {false, true}) {
        dd::GenerateOptions o;
        o.max_new = 20;
        o.sample = sample;
        o.seed = k;
        const auto res = model.generate(prompt, *r, o);
        ++runs;
        if (!cache_complete(res.cache)) return {false, "absent kv entry after " + name + " generation"};
        bool all_full = true;
        for (const auto& st : res.steps) all_full &= dd::cost_of(st.mask) == L;
        const auto filled = res.cache.count(dd::KvProvenance::Filled);
        filled_total += filled;
        if (all_full && filled != 0) return {false, "filled entries under full execution (" + name + ")"};
        if (name == "full" && !all_full) return {false, "full plan produced a partial mask"};
      }
    }
  }
  return {true, std::to_string(runs) + " generations, " + std::to_string(filled_total) + " filled entries, none absent"};
}

// ---------------------------------------------------------------- ROUGE-L

inline Outcome rouge_oracle(std::size_t kMax = 8) {
  // All strings of length 0..kMax over {0,1,2}, indexed by (length, base-3 value).
  std::vector<std::size_t> offset(kMax + 2, 0);
  std::size_t pow3 = 1;
  for (std::size_t len = 0; len <= kMax; ++len) {
    offset[len + 1] = offset[len] + pow3;
    pow3 *= 3;
  }
  const std::size_t N = offset[kMax + 1];
  std::vector<std::vector<int>> strs(N);
  for (std::size_t len = 0; len <= kMax; ++len) {
    for (std::size_t v = 0; v < offset[len + 1] - offset[len]; ++v) {
      std::vector<int> s(len);
      std::size_t x = v;
      for (std::size_t i = len; i-- > 0;) {
        s[i] = static_cast<int>(x % 3);
        x /= 3;
      }
      strs[offset[len] + v] = std::move(s);
    }
  }
  auto index_of = [&](const std::vector<int>& s) {
    std::size_t v = 0;
    for (int c : s) v = v * 3 + static_cast<std::size_t>(c);
    return offset[s.size()] + v;
  };
  const std::size_t W = (N + 63) / 64;
  // holders[w] = bitset of strings having w as a subsequence.
  std::vector<std::uint64_t> holders(N * W, 0);
  std::vector<std::vector<std::size_t>> subseqs(N);
  for (std::size_t s = 0; s < N; ++s) {
    const auto& str = strs[s];
    std::vector<std::size_t> subs;
    for (std::uint32_t mask = 0; mask < (1u << str.size()); ++mask) {
      std::vector<int> w;
      for (std::size_t i = 0; i < str.size(); ++i) {
        if (mask >> i & 1u) w.push_back(str[i]);
      }
      subs.push_back(index_of(w));
    }
    std::sort(subs.begin(), subs.end());
    subs.erase(std::unique(subs.begin(), subs.end()), subs.end());
    for (auto w : subs) holders[w * W + s / 64] |= std::uint64_t{1} << (s % 64);
    subseqs[s] = std::move(subs);
  }
  std::size_t pairs = 0;
  std::vector<std::uint64_t> reach((kMax + 2) * W);
  for (std::size_t a = 0; a < N; ++a) {
    // reach[k] = strings sharing some length-k subsequence with a.
    std::fill(reach.begin(), reach.end(), 0);
    for (auto w : subseqs[a]) {
      const std::size_t k = strs[w].size();
      for (std::size_t i = 0; i < W; ++i) reach[k * W + i] |= holders[w * W + i];
    }
    for (std::size_t b = 0; b < N; ++b) {
      const std::size_t got = dd::lcs_length(strs[a], strs[b]);
      auto has = [&](std::size_t k) { return (reach[k * W + b / 64] >> (b % 64)) & 1u; };
      if (!has(got) || has(got + 1)) {
        return {false, "lcs mismatch for pair " + std::to_string(a) + "," + std::to_string(b)};
      }
      ++pairs;
    }
  }
  const auto r = dd::rouge_l_text("a b c d", "a c d e");
  if (r.f != 0.75 || r.precision != 0.75 || r.recall != 0.75) {
    return {false, "fixture F=" + dd::text::num(r.f)};
  }
  return {true, std::to_string(pairs) + " pairs match subsequence enumeration, fixture F=0.75"};
}

// ---------------------------------------------------------------- chi-square

/// 1 - CDF of chi-square with 1 dof by composite Simpson integration of the
/// density after substituting x = u^2 (removes the singularity at 0).
inline double chi2_1_sf_numeric(double x, std::size_t panels = 20000) {
  const double ub = std::sqrt(x);
  const double h = ub / static_cast<double>(panels);
  auto f = [](double u) { return 2.0 * std::exp(-0.5 * u * u) / std::sqrt(2.0 * std::numbers::pi); };
  double s = f(0.0) + f(ub);
  for (std::size_t i = 1; i < panels; ++i) s += (i % 2 ? 4.0 : 2.0) * f(static_cast<double>(i) * h);
  return 1.0 - s * h / 3.0;
}

/// Regularized lower incomplete gamma P(a, x) by its power series.
inline double gamma_p_series(double a, double x) {
  double term = 1.0 / a, sum = term;
  for (int n = 1; n < 500; ++n) {
    term *= x / (a + n);
    sum += term;
    if (term < sum * 1e-17) break;
  }
  return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

inline Outcome chi_square_numerics() {
  const double q = dd::chi_square_sf(3.8415, 1.0);
  const double q_num = chi2_1_sf_numeric(3.8415), q_ser = 1.0 - gamma_p_series(0.5, 3.8415 / 2.0);
  if (std::abs(q - 0.05) > 1e-4 || std::abs(q_num - 0.05) > 1e-4 || std::abs(q_ser - 0.05) > 1e-4) {
    return {false, "quantile check p=" + dd::text::num(q)};
  }
  const auto r = dd::chi_square_table({{10, 20}, {20, 10}});
  const double p_num = chi2_1_sf_numeric(r.statistic);
  if (std::abs(r.statistic - 6.6667) > 1e-3 || r.dof != 1 || std::abs(r.p - 0.00982) > 1e-4 ||
      std::abs(r.p - p_num) > 1e-6) {
    return {false, "2x2 fixture chi2=" + dd::text::num(r.statistic) + " p=" + dd::text::num(r.p)};
  }
  std::ostringstream os;
  os << "p(3.8415)=" << q << ", chi2=" << r.statistic << ", p=" << r.p << " (integration " << p_num << ")";
  return {true, os.str()};
}

}  // namespace checks
