// Copyright 2026 The dynadepth Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <boost/math/special_functions/gamma.hpp>

#include "dynadepth/text.hpp"

namespace dynadepth {

/// n sequences x k fixed-cost models. Column j has cost costs[j] for every row.
struct ScoreMatrix {
  std::vector<std::size_t> costs;
  std::vector<std::string> ids;
  std::vector<std::size_t> label_lengths;
  std::vector<std::vector<double>> scores;
  /// Optional generated text per cell (empty when not tracked).
  std::vector<std::vector<std::string>> texts;

  std::size_t rows() const noexcept { return scores.size(); }
  std::size_t cols() const noexcept { return costs.size(); }

  void add_row(std::string id, std::size_t label_length, std::vector<double> row,
               std::vector<std::string> row_texts = {}) {
    if (row.size() != costs.size()) {
      throw std::invalid_argument("score row '" + id + "' has " + std::to_string(row.size()) + " cells, expected " +
                                  std::to_string(costs.size()));
    }
    ids.push_back(std::move(id));
    label_lengths.push_back(label_length);
    scores.push_back(std::move(row));
    texts.push_back(std::move(row_texts));
  }

  void validate() const {
    if (costs.empty()) throw std::invalid_argument("score matrix needs at least one model");
    for (std::size_t j = 0; j < costs.size(); ++j) {
      if (costs[j] == 0) throw std::invalid_argument("model costs must be positive");
      for (std::size_t i = 0; i < j; ++i) {
        if (costs[i] == costs[j]) throw std::invalid_argument("duplicate model cost " + std::to_string(costs[j]));
      }
    }
    if (ids.size() != scores.size() || label_lengths.size() != scores.size()) {
      throw std::invalid_argument("score matrix row metadata misaligned");
    }
    for (const auto& r : scores) {
      if (r.size() != costs.size()) throw std::invalid_argument("score matrix row has missing cells");
    }
  }

  std::size_t min_cost() const { return *std::min_element(costs.begin(), costs.end()); }
  std::size_t max_cost() const { return *std::max_element(costs.begin(), costs.end()); }

  double column_mean(std::size_t j) const {
    if (scores.empty()) return 0.0;
    double s = 0.0;
    for (const auto& r : scores) s += r.at(j);
    return s / static_cast<double>(scores.size());
  }

  std::size_t column_of_cost(std::size_t c) const {
    for (std::size_t j = 0; j < costs.size(); ++j) {
      if (costs[j] == c) return j;
    }
    throw std::out_of_range("no model with cost " + std::to_string(c));
  }
};

struct BudgetAssignment {
  double beta = 0.0;
  /// Chosen column per row.
  std::vector<std::size_t> choice;
  /// Chosen cost per row (S_i).
  std::vector<std::size_t> chosen_cost;
  double mean_score = 0.0;
  double mean_cost = 0.0;
  std::size_t total_cost = 0;
  /// Percentage of rows per column, in matrix column order.
  std::vector<double> selection_pct;
};

class InfeasibleBudget : public std::invalid_argument {
 public:
  InfeasibleBudget(double beta, double min_feasible)
      : std::invalid_argument("budget beta=" + text::num(beta) + " is infeasible; minimum feasible beta is " +
                              text::num(min_feasible)),
        min_feasible_(min_feasible) {}
  double min_feasible() const noexcept { return min_feasible_; }

 private:
  double min_feasible_;
};

namespace detail {

inline constexpr double kScoreTol = 1e-12;

inline BudgetAssignment finish_assignment(const ScoreMatrix& m, double beta, std::vector<std::size_t> choice) {
  BudgetAssignment a;
  a.beta = beta;
  a.choice = std::move(choice);
  a.selection_pct.assign(m.cols(), 0.0);
  double score = 0.0;
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const std::size_t j = a.choice[i];
    a.chosen_cost.push_back(m.costs[j]);
    a.total_cost += m.costs[j];
    score += m.scores[i][j];
    a.selection_pct[j] += 1.0;
  }
  const double n = static_cast<double>(m.rows());
  if (m.rows() > 0) {
    a.mean_score = score / n;
    a.mean_cost = static_cast<double>(a.total_cost) / n;
    for (double& p : a.selection_pct) p = 100.0 * p / n;
  }
  return a;
}

inline std::size_t budget_units(double beta, std::size_t n) {
  return static_cast<std::size_t>(std::floor(beta * static_cast<double>(n) + 1e-9));
}

inline void check_feasible(const ScoreMatrix& m, double beta) {
  m.validate();
  if (!std::isfinite(beta)) throw std::invalid_argument("budget beta must be finite");
  const double cmin = static_cast<double>(m.min_cost());
  if (m.rows() == 0) return;
  if (budget_units(beta, m.rows()) < m.min_cost() * m.rows()) throw InfeasibleBudget(beta, cmin);
}

// (score, cost) ordering: higher score wins, then lower cost.
inline bool better(double s1, std::size_t c1, double s2, std::size_t c2) {
  if (s1 > s2 + kScoreTol) return true;
  if (s1 < s2 - kScoreTol) return false;
  return c1 < c2;
}

/// Knapsack DP over items in reverse. After the call, value/cost hold the best
/// (score, scaled cost) of all rows for each scaled budget 0..B, and parent[i]
/// holds the column chosen for row i at each budget.
struct KnapsackTable {
  std::size_t gcd = 1;
  std::size_t budget = 0;
  std::vector<std::size_t> weight;  // scaled cost per column
  std::vector<double> value;
  std::vector<std::size_t> cost;
  std::vector<std::vector<std::uint8_t>> parent;
};

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

inline KnapsackTable knapsack(const ScoreMatrix& m, std::size_t budget_raw) {
  if (m.cols() > 255) throw std::invalid_argument("knapsack supports at most 255 models");
  KnapsackTable t;
  t.gcd = 0;
  for (auto c : m.costs) t.gcd = std::gcd(t.gcd, c);
  for (auto c : m.costs) t.weight.push_back(c / t.gcd);
  t.budget = budget_raw / t.gcd;
  const std::size_t B = t.budget;
  // Columns visited in increasing cost so the first of equal candidates is cheapest.
  std::vector<std::size_t> order(m.cols());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return m.costs[a] < m.costs[b]; });

  t.value.assign(B + 1, 0.0);
  t.cost.assign(B + 1, 0);
  t.parent.assign(m.rows(), std::vector<std::uint8_t>(B + 1, 0));
  std::vector<double> nv(B + 1);
  std::vector<std::size_t> nc(B + 1);
  for (std::size_t i = m.rows(); i-- > 0;) {
    for (std::size_t b = 0; b <= B; ++b) {
      double best_v = kNegInf;
      std::size_t best_c = 0;
      std::uint8_t best_j = 0;
      bool found = false;
      for (auto j : order) {
        const std::size_t w = t.weight[j];
        if (w > b || t.value[b - w] == kNegInf) continue;
        const double v = m.scores[i][j] + t.value[b - w];
        const std::size_t c = w + t.cost[b - w];
        if (!found || better(v, c, best_v, best_c)) {
          best_v = v;
          best_c = c;
          best_j = static_cast<std::uint8_t>(j);
          found = true;
        }
      }
      nv[b] = found ? best_v : kNegInf;
      nc[b] = best_c;
      t.parent[i][b] = best_j;
    }
    t.value.swap(nv);
    t.cost.swap(nc);
  }
  return t;
}

inline std::vector<std::size_t> reconstruct(const ScoreMatrix& m, const KnapsackTable& t, std::size_t b) {
  std::vector<std::size_t> choice(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    choice[i] = t.parent[i][b];
    b -= t.weight[choice[i]];
  }
  return choice;
}

}  // namespace detail

/// Multiple-choice knapsack: maximize mean score subject to sum S_i <= floor(beta n).
/// Ties: lower total cost, then the lexicographically smallest S.
inline BudgetAssignment solve_exact(const ScoreMatrix& m, double beta) {
  detail::check_feasible(m, beta);
  if (m.rows() == 0) return detail::finish_assignment(m, beta, {});
  const auto t = detail::knapsack(m, detail::budget_units(beta, m.rows()));
  return detail::finish_assignment(m, beta, detail::reconstruct(m, t, t.budget));
}

/// Per-row argmax over models with cost <= beta; ties go to the cheaper model.
inline BudgetAssignment solve_greedy(const ScoreMatrix& m, double beta) {
  detail::check_feasible(m, beta);
  std::vector<std::size_t> choice(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    std::optional<std::size_t> best;
    for (std::size_t j = 0; j < m.cols(); ++j) {
      if (static_cast<double>(m.costs[j]) > beta + 1e-9) continue;
      if (!best || detail::better(m.scores[i][j], m.costs[j], m.scores[i][*best], m.costs[*best])) best = j;
    }
    choice[i] = *best;
  }
  return detail::finish_assignment(m, beta, std::move(choice));
}

/// Highest column mean among models with cost <= beta.
inline double best_single_column(const ScoreMatrix& m, double beta) {
  double best = detail::kNegInf;
  for (std::size_t j = 0; j < m.cols(); ++j) {
    if (static_cast<double>(m.costs[j]) <= beta + 1e-9) best = std::max(best, m.column_mean(j));
  }
  return best;
}

struct SweepPoint {
  double beta = 0.0;
  BudgetAssignment exact;
  BudgetAssignment greedy;
  double best_single = 0.0;
};

struct SweepResult {
  std::vector<std::size_t> costs;
  std::vector<SweepPoint> points;
  /// Mean score of the most expensive model.
  double full_score = 0.0;
  /// Smallest beta whose exact score reaches full_score (empty if none).
  std::optional<double> parity_beta;
};

inline SweepResult sweep(const ScoreMatrix& m, const std::vector<double>& grid) {
  if (grid.empty()) throw std::invalid_argument("budget grid is empty");
  m.validate();
  SweepResult r;
  r.costs = m.costs;
  r.full_score = m.column_mean(m.column_of_cost(m.max_cost()));
  for (double beta : grid) {
    SweepPoint p;
    p.beta = beta;
    p.exact = solve_exact(m, beta);
    p.greedy = solve_greedy(m, beta);
    p.best_single = best_single_column(m, beta);
    r.points.push_back(std::move(p));
  }
  if (m.rows() > 0) {
    // One DP at the largest useful budget yields the optimum for every smaller budget.
    const auto t = detail::knapsack(m, m.max_cost() * m.rows());
    const double target = r.full_score * static_cast<double>(m.rows());
    for (std::size_t b = 0; b <= t.budget; ++b) {
      if (t.value[b] != detail::kNegInf && t.value[b] >= target - detail::kScoreTol) {
        r.parity_beta = static_cast<double>(b * t.gcd) / static_cast<double>(m.rows());
        break;
      }
    }
  }
  return r;
}

inline std::string sweep_csv(const SweepResult& r) {
  std::ostringstream os;
  os << "beta,exact_score,greedy_score,best_single_score,exact_mean_cost,greedy_mean_cost";
  for (auto c : r.costs) os << ",pct_" << c;
  for (auto c : r.costs) os << ",greedy_pct_" << c;
  os << '\n';
  for (const auto& p : r.points) {
    os << text::num(p.beta) << ',' << text::num(p.exact.mean_score) << ',' << text::num(p.greedy.mean_score) << ','
       << text::num(p.best_single) << ',' << text::num(p.exact.mean_cost) << ',' << text::num(p.greedy.mean_cost);
    for (double v : p.exact.selection_pct) os << ',' << text::num(v);
    for (double v : p.greedy.selection_pct) os << ',' << text::num(v);
    os << '\n';
  }
  return os.str();
}

inline std::string assignment_csv(const ScoreMatrix& m, const BudgetAssignment& a) {
  std::ostringstream os;
  os << "id,chosen_cost\n";
  for (std::size_t i = 0; i < m.rows(); ++i) os << m.ids[i] << ',' << a.chosen_cost[i] << '\n';
  return os.str();
}

/// CSV: id,label_len,cost_<c>,score_<c>,... one pair per model.
inline std::string score_matrix_csv(const ScoreMatrix& m) {
  std::ostringstream os;
  os << "id,label_len";
  for (auto c : m.costs) os << ",cost_" << c << ",score_" << c;
  os << '\n';
  for (std::size_t i = 0; i < m.rows(); ++i) {
    os << m.ids[i] << ',' << m.label_lengths[i];
    for (std::size_t j = 0; j < m.cols(); ++j) os << ',' << m.costs[j] << ',' << text::num(m.scores[i][j]);
    os << '\n';
  }
  return os.str();
}

inline ScoreMatrix parse_score_matrix_csv(const std::string& content) {
  std::vector<std::string> rows;
  for (auto& l : text::lines(content)) {
    if (!l.empty() && l[0] != '#') rows.push_back(std::move(l));
  }
  if (rows.empty()) throw std::invalid_argument("score matrix csv: missing header");
  const auto header = text::split(rows[0], ',');
  if (header.size() < 4 || header[0] != "id" || header[1] != "label_len" || header.size() % 2 != 0) {
    throw std::invalid_argument("score matrix csv: header must be id,label_len,cost_<c>,score_<c>,...");
  }
  ScoreMatrix m;
  for (std::size_t k = 2; k < header.size(); k += 2) {
    if (header[k].rfind("cost_", 0) != 0 || header[k + 1].rfind("score_", 0) != 0 ||
        header[k].substr(5) != header[k + 1].substr(6)) {
      throw std::invalid_argument("score matrix csv: bad column pair '" + header[k] + "," + header[k + 1] + "'");
    }
    m.costs.push_back(static_cast<std::size_t>(text::parse_uint(header[k].substr(5), "cost column")));
  }
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto f = text::split(rows[r], ',');
    if (f.size() != header.size()) {
      throw std::invalid_argument("score matrix csv: line " + std::to_string(r + 1) + " has " +
                                  std::to_string(f.size()) + " fields");
    }
    std::vector<double> sc;
    for (std::size_t k = 2; k < f.size(); k += 2) {
      if (text::parse_uint(f[k], "cost") != m.costs[(k - 2) / 2]) {
        throw std::invalid_argument("score matrix csv: cost differs down column on line " + std::to_string(r + 1));
      }
      sc.push_back(text::parse_double(f[k + 1], "score"));
    }
    m.add_row(f[0], static_cast<std::size_t>(text::parse_uint(f[1], "label_len")), std::move(sc));
  }
  m.validate();
  return m;
}

struct ChiSquareResult {
  double statistic = 0.0;
  std::size_t dof = 0;
  double p = 1.0;
  /// Rows = retained length bins, columns = retained models.
  std::vector<std::vector<double>> table;
  std::vector<std::string> bin_labels;
  std::vector<std::size_t> model_costs;
  std::vector<std::string> dropped;
};

/// Upper tail of the chi-square distribution.
inline double chi_square_sf(double x, double dof) {
  if (dof <= 0.0) throw std::invalid_argument("chi-square dof must be positive");
  if (x <= 0.0) return 1.0;
  return boost::math::gamma_q(dof / 2.0, x / 2.0);
}

/// Pearson statistic over cells with positive expectation. Empty rows and
/// columns must already be removed.
inline ChiSquareResult chi_square_table(std::vector<std::vector<double>> table) {
  ChiSquareResult r;
  const std::size_t R = table.size(), C = R ? table[0].size() : 0;
  std::vector<double> rs(R, 0.0), cs(C, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < R; ++i) {
    if (table[i].size() != C) throw std::invalid_argument("chi-square table is ragged");
    for (std::size_t j = 0; j < C; ++j) {
      rs[i] += table[i][j];
      cs[j] += table[i][j];
      total += table[i][j];
    }
  }
  for (std::size_t i = 0; i < R; ++i) {
    for (std::size_t j = 0; j < C; ++j) {
      const double e = rs[i] * cs[j] / total;
      if (e > 0.0) r.statistic += (table[i][j] - e) * (table[i][j] - e) / e;
    }
  }
  r.dof = R >= 1 && C >= 1 ? (R - 1) * (C - 1) : 0;
  r.p = r.dof == 0 ? 1.0 : chi_square_sf(r.statistic, static_cast<double>(r.dof));
  r.table = std::move(table);
  return r;
}

/// 1-based label-length bin: [w(i-1)+1, w i] for i < num_bins, the last bin
/// takes everything longer.
inline std::size_t length_bin(std::size_t len, std::size_t bin_width, std::size_t num_bins) {
  if (len == 0) return 1;
  return std::min((len - 1) / bin_width + 1, num_bins);
}

/// Homogeneity of model selection across label-length bins.
inline ChiSquareResult chi_square_homogeneity(const BudgetAssignment& a, const std::vector<std::size_t>& costs,
                                              const std::vector<std::size_t>& label_lengths,
                                              std::size_t bin_width = 15, std::size_t num_bins = 11) {
  if (a.choice.size() != label_lengths.size()) {
    throw std::invalid_argument("assignment and label lengths are not aligned");
  }
  if (bin_width == 0 || num_bins < 1) throw std::invalid_argument("invalid binning");
  std::vector<std::vector<double>> full(num_bins, std::vector<double>(costs.size(), 0.0));
  for (std::size_t i = 0; i < a.choice.size(); ++i) {
    full[length_bin(label_lengths[i], bin_width, num_bins) - 1].at(a.choice[i]) += 1.0;
  }
  std::vector<std::size_t> keep_rows, keep_cols;
  std::vector<std::string> dropped;
  for (std::size_t b = 0; b < num_bins; ++b) {
    const std::string label = b + 1 < num_bins ? std::to_string(b * bin_width + 1) + "-" +
                                                     std::to_string((b + 1) * bin_width)
                                               : ">" + std::to_string(b * bin_width);
    double s = 0.0;
    for (double v : full[b]) s += v;
    if (s > 0.0) {
      keep_rows.push_back(b);
    } else {
      dropped.push_back("bin " + label);
    }
  }
  for (std::size_t j = 0; j < costs.size(); ++j) {
    double s = 0.0;
    for (const auto& row : full) s += row[j];
    if (s > 0.0) {
      keep_cols.push_back(j);
    } else {
      dropped.push_back("model " + std::to_string(costs[j]));
    }
  }
  std::vector<std::vector<double>> table;
  std::vector<std::string> labels;
  for (auto b : keep_rows) {
    std::vector<double> row;
    for (auto j : keep_cols) row.push_back(full[b][j]);
    table.push_back(std::move(row));
    labels.push_back(b + 1 < num_bins ? std::to_string(b * bin_width + 1) + "-" + std::to_string((b + 1) * bin_width)
                                      : ">" + std::to_string(b * bin_width));
  }
  auto r = chi_square_table(std::move(table));
  r.bin_labels = std::move(labels);
  for (auto j : keep_cols) r.model_costs.push_back(costs[j]);
  r.dropped = std::move(dropped);
  return r;
}

}  // namespace dynadepth
