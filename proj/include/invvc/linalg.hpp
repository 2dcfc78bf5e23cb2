// Copyright 2026 the invvc authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "invvc/error.hpp"
#include "invvc/rng.hpp"
#include "invvc/tensor.hpp"

namespace invvc::linalg {

// Householder QR of a square matrix; returns Q with the sign convention
// diag(R) > 0, which makes the factor unique and therefore reproducible.
inline Tensor<double> qr_orthonormal(const Tensor<double>& a) {
  const std::size_t n = a.rows();
  Tensor<double> r = a;
  Tensor<double> q({n, n});
  for (std::size_t i = 0; i < n; ++i) q(i, i) = 1.0;

  std::vector<double> v(n);
  for (std::size_t k = 0; k < n; ++k) {
    double norm = 0.0;
    for (std::size_t i = k; i < n; ++i) norm += r(i, k) * r(i, k);
    norm = std::sqrt(norm);
    if (norm == 0.0) continue;
    const double alpha = r(k, k) >= 0.0 ? -norm : norm;
    double vnorm2 = 0.0;
    for (std::size_t i = k; i < n; ++i) v[i] = r(i, k);
    v[k] -= alpha;
    for (std::size_t i = k; i < n; ++i) vnorm2 += v[i] * v[i];
    if (vnorm2 == 0.0) continue;

    // R <- H R, Q <- Q H with H = I - 2 v v^T / (v^T v)
    for (std::size_t j = k; j < n; ++j) {
      double dot = 0.0;
      for (std::size_t i = k; i < n; ++i) dot += v[i] * r(i, j);
      const double f = 2.0 * dot / vnorm2;
      for (std::size_t i = k; i < n; ++i) r(i, j) -= f * v[i];
    }
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = k; j < n; ++j) dot += q(i, j) * v[j];
      const double f = 2.0 * dot / vnorm2;
      for (std::size_t j = k; j < n; ++j) q(i, j) -= f * v[j];
    }
  }
  for (std::size_t k = 0; k < n; ++k) {
    if (r(k, k) < 0.0)
      for (std::size_t i = 0; i < n; ++i) q(i, k) = -q(i, k);
  }
  return q;
}

// Random orthonormal matrix from a seeded Gaussian draw.
inline Tensor<double> random_orthonormal(std::size_t n, Rng& rng) {
  Tensor<double> g({n, n});
  for (std::size_t i = 0; i < n * n; ++i) g[i] = rng.normal();
  return qr_orthonormal(g);
}

struct LuFactors {
  Tensor<double> lu;
  std::vector<std::size_t> piv;
};

inline LuFactors lu_factor(const Tensor<double>& a) {
  const std::size_t n = a.rows();
  LuFactors f{a, std::vector<std::size_t>(n)};
  Tensor<double>& lu = f.lu;
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t p = k;
    double best = std::abs(lu(k, k));
    for (std::size_t i = k + 1; i < n; ++i) {
      const double m = std::abs(lu(i, k));
      if (m > best) {
        best = m;
        p = i;
      }
    }
    if (best == 0.0)
      throw NumericError("singular matrix in LU factorization (pivot " +
                         std::to_string(k) + " is zero)");
    f.piv[k] = p;
    if (p != k)
      for (std::size_t j = 0; j < n; ++j) std::swap(lu(k, j), lu(p, j));
    for (std::size_t i = k + 1; i < n; ++i) {
      lu(i, k) /= lu(k, k);
      const double l = lu(i, k);
      for (std::size_t j = k + 1; j < n; ++j) lu(i, j) -= l * lu(k, j);
    }
  }
  return f;
}

inline void lu_solve_inplace(const LuFactors& f, std::vector<double>& x) {
  const std::size_t n = f.lu.rows();
  for (std::size_t k = 0; k < n; ++k)
    if (f.piv[k] != k) std::swap(x[k], x[f.piv[k]]);
  for (std::size_t i = 1; i < n; ++i) {
    double s = x[i];
    for (std::size_t j = 0; j < i; ++j) s -= f.lu(i, j) * x[j];
    x[i] = s;
  }
  for (std::size_t i = n; i-- > 0;) {
    double s = x[i];
    for (std::size_t j = i + 1; j < n; ++j) s -= f.lu(i, j) * x[j];
    x[i] = s / f.lu(i, i);
  }
}

inline Tensor<double> invert(const Tensor<double>& a) {
  const std::size_t n = a.rows();
  const LuFactors f = lu_factor(a);
  Tensor<double> inv({n, n});
  std::vector<double> col(n);
  for (std::size_t j = 0; j < n; ++j) {
    std::fill(col.begin(), col.end(), 0.0);
    col[j] = 1.0;
    lu_solve_inplace(f, col);
    for (std::size_t i = 0; i < n; ++i) inv(i, j) = col[i];
  }
  return inv;
}

inline double norm1(const Tensor<double>& a) {
  double best = 0.0;
  for (std::size_t j = 0; j < a.cols(); ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i) s += std::abs(a(i, j));
    best = std::max(best, s);
  }
  return best;
}

// Exact 1-norm condition number (the inverse is needed anyway by callers).
inline double cond1(const Tensor<double>& a, const Tensor<double>& a_inv) {
  return norm1(a) * norm1(a_inv);
}

} // namespace invvc::linalg
