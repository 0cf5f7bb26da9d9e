// Copyright 2026 The dynadepth Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace dynadepth {

struct RougeScore {
  double precision = 0.0;
  double recall = 0.0;
  double f = 0.0;
};

namespace detail {
template <class T>
std::size_t lcs_rows(const std::vector<T>& a, const std::vector<T>& b, std::size_t* row) {
  std::fill(row, row + b.size() + 1, std::size_t{0});
  for (std::size_t i = 1; i <= a.size(); ++i) {
    std::size_t diag = 0;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t up = row[j];
      row[j] = a[i - 1] == b[j - 1] ? diag + 1 : std::max(row[j], row[j - 1]);
      diag = up;
    }
  }
  return row[b.size()];
}
}  // namespace detail

template <class T>
std::size_t lcs_length(const std::vector<T>& a, const std::vector<T>& b) {
  if (b.size() < 64) {
    std::size_t row[64];
    return detail::lcs_rows(a, b, row);
  }
  std::vector<std::size_t> row(b.size() + 1);
  return detail::lcs_rows(a, b, row.data());
}

/// LCS-based ROUGE-L. beta = 1 gives the harmonic mean; larger beta weights
/// recall as in the original definition.
template <class T>
RougeScore rouge_l(const std::vector<T>& candidate, const std::vector<T>& reference, double beta = 1.0) {
  if (candidate.empty() || reference.empty()) return {};
  const double lcs = static_cast<double>(lcs_length(candidate, reference));
  RougeScore s;
  s.precision = lcs / static_cast<double>(candidate.size());
  s.recall = lcs / static_cast<double>(reference.size());
  if (s.precision + s.recall > 0.0) {
    const double b2 = beta * beta;
    s.f = (1.0 + b2) * s.precision * s.recall / (s.recall + b2 * s.precision);
  }
  return s;
}

/// Lowercases, splits on whitespace and drops tokens made only of punctuation.
inline std::vector<std::string> rouge_tokens(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string tok;
  while (in >> tok) {
    bool keep = false;
    for (char& ch : tok) {
      const auto u = static_cast<unsigned char>(ch);
      ch = static_cast<char>(std::tolower(u));
      if (!std::ispunct(u)) keep = true;
    }
    if (keep) out.push_back(tok);
  }
  return out;
}

inline RougeScore rouge_l_text(const std::string& candidate, const std::string& reference, double beta = 1.0) {
  return rouge_l(rouge_tokens(candidate), rouge_tokens(reference), beta);
}

/// Cosine similarity; 0 when either norm is below 1e-12.
inline double cosine(const std::vector<double>& u, const std::vector<double>& v) {
  if (u.size() != v.size()) {
    throw std::invalid_argument("cosine: dimension mismatch " + std::to_string(u.size()) + " vs " +
                                std::to_string(v.size()));
  }
  double dot = 0.0, nu = 0.0, nv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += u[i] * v[i];
    nu += u[i] * u[i];
    nv += v[i] * v[i];
  }
  nu = std::sqrt(nu);
  nv = std::sqrt(nv);
  if (nu < 1e-12 || nv < 1e-12) return 0.0;
  return dot / (nu * nv);
}

struct MeanCi {
  double mean = 0.0;
  double half_width = 0.0;
  std::size_t n = 0;
  double low() const { return mean - half_width; }
  double high() const { return mean + half_width; }
};

inline constexpr double kZ95 = 1.959963984540054;

/// Normal-approximation interval mean +/- z * s / sqrt(n), s with n - 1.
inline MeanCi mean_ci(const std::vector<double>& samples, double z = kZ95) {
  if (samples.size() < 2) throw std::invalid_argument("mean_ci needs at least 2 samples");
  const double n = static_cast<double>(samples.size());
  const double mean = std::accumulate(samples.begin(), samples.end(), 0.0) / n;
  double ss = 0.0;
  for (double x : samples) ss += (x - mean) * (x - mean);
  const double s = std::sqrt(ss / (n - 1.0));
  return {mean, z * s / std::sqrt(n), samples.size()};
}

/// 1-based ranks, ties get the average rank.
inline std::vector<double> average_ranks(const std::vector<double>& x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

/// Spearman rank correlation (Pearson on average ranks). NaN when either
/// input is constant.
inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("spearman: need >= 2 paired samples");
  const auto rx = average_ranks(x), ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return std::nan("");
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace dynadepth
