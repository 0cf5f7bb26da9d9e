// Copyright 2026 The dynadepth Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <span>

// Plain numeric kernels shared by the differentiable graph and the inference
// path. Everything is row-major and single-threaded.
namespace dynadepth::kernels {

/// c[m x n] = a[m x k] * b[k x n]
inline void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c,
                   std::size_t m, std::size_t k, std::size_t n) {
  std::fill(c.begin(), c.end(), 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c.data() + i * n;
    const double* arow = a.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

/// c[m x n] += a[m x k] * b[n x k]^T
inline void matmul_add_bt(std::span<const double> a, std::span<const double> b,
                          std::span<double> c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a.data() + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b.data() + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[i * n + j] += acc;
    }
  }
}

/// c[k x n] += a[m x k]^T * b[m x n]
inline void matmul_add_at(std::span<const double> a, std::span<const double> b,
                          std::span<double> c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a.data() + i * k;
    const double* brow = b.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      double* crow = c.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

/// Normalizes each row of x to zero mean and unit variance (biased variance).
/// rstd receives 1/sqrt(var + eps) per row so backward passes can reuse it.
inline void layer_norm_rows(std::span<const double> x, std::span<double> y, std::span<double> rstd,
                            std::size_t rows, std::size_t d, double eps) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * d;
    double* yr = y.data() + r * d;
    double mean = 0.0;
    for (std::size_t i = 0; i < d; ++i) mean += xr[i];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) var += (xr[i] - mean) * (xr[i] - mean);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    rstd[r] = inv;
    for (std::size_t i = 0; i < d; ++i) yr[i] = (xr[i] - mean) * inv;
  }
}

inline void softmax_rows(std::span<const double> x, std::span<double> y, std::size_t rows,
                         std::size_t d) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * d;
    double* yr = y.data() + r * d;
    const double mx = *std::max_element(xr, xr + d);
    double sum = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      yr[i] = std::exp(xr[i] - mx);
      sum += yr[i];
    }
    for (std::size_t i = 0; i < d; ++i) yr[i] /= sum;
  }
}

inline void log_softmax_rows(std::span<const double> x, std::span<double> y, std::size_t rows,
                             std::size_t d) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * d;
    double* yr = y.data() + r * d;
    const double mx = *std::max_element(xr, xr + d);
    double sum = 0.0;
    for (std::size_t i = 0; i < d; ++i) sum += std::exp(xr[i] - mx);
    const double lse = mx + std::log(sum);
    for (std::size_t i = 0; i < d; ++i) yr[i] = xr[i] - lse;
  }
}

// Exact (erf) GELU.
inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

inline double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

/// Index of the first maximal element.
inline std::size_t argmax(std::span<const double> x) {
  return static_cast<std::size_t>(std::max_element(x.begin(), x.end()) - x.begin());
}

}  // namespace dynadepth::kernels
