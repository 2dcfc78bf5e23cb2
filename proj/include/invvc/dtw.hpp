// Copyright 2026 the invvc authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <utility>
#include <vector>

#include "invvc/error.hpp"
#include "invvc/tensor.hpp"

namespace invvc::align {

struct AlignmentPath {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  double total_cost = 0.0;
};

namespace detail {

template <typename T>
double frame_cost(const Tensor<T>& a, std::size_t i, const Tensor<T>& b,
                  std::size_t j) {
  const std::size_t d = a.cols();
  const T* ra = a.data() + i * d;
  const T* rb = b.data() + j * d;
  double s = 0.0;
  for (std::size_t k = 0; k < d; ++k) {
    const double dv = static_cast<double>(ra[k]) - static_cast<double>(rb[k]);
    s += dv * dv;
  }
  return std::sqrt(s);
}

} // namespace detail

// Exact DTW under Euclidean frame cost with steps {(1,0),(0,1),(1,1)}.
// The dynamic program accumulates cost-to-go from the end; the path is then
// read out from (0,0) with ties broken preferring the (1,1) step, then
// (1,0), then (0,1), which makes alignments bit-stable across runs.
template <typename T>
AlignmentPath dtw(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.empty() || b.empty()) throw FormatError("dtw: empty input sequence");
  if (a.rank() != 2 || b.rank() != 2)
    throw FormatError("dtw expects rank-2 inputs");
  if (a.cols() != b.cols())
    throw FormatError("dtw feature dimension mismatch: " +
                      std::to_string(a.cols()) + " vs " +
                      std::to_string(b.cols()));
  const std::size_t ta = a.rows(), tb = b.rows();
  const double inf = std::numeric_limits<double>::infinity();

  std::vector<double> g(ta * tb, inf);
  auto at = [&](std::size_t i, std::size_t j) -> double& {
    return g[i * tb + j];
  };
  for (std::size_t i = ta; i-- > 0;) {
    for (std::size_t j = tb; j-- > 0;) {
      const double c = detail::frame_cost(a, i, b, j);
      if (i + 1 == ta && j + 1 == tb) {
        at(i, j) = c;
        continue;
      }
      double best = inf;
      if (i + 1 < ta && j + 1 < tb) best = std::min(best, at(i + 1, j + 1));
      if (i + 1 < ta) best = std::min(best, at(i + 1, j));
      if (j + 1 < tb) best = std::min(best, at(i, j + 1));
      at(i, j) = c + best;
    }
  }

  AlignmentPath path;
  path.total_cost = at(0, 0);
  std::size_t i = 0, j = 0;
  path.pairs.emplace_back(0, 0);
  while (i + 1 < ta || j + 1 < tb) {
    double best = inf;
    if (i + 1 < ta && j + 1 < tb) best = std::min(best, at(i + 1, j + 1));
    if (i + 1 < ta) best = std::min(best, at(i + 1, j));
    if (j + 1 < tb) best = std::min(best, at(i, j + 1));
    if (i + 1 < ta && j + 1 < tb && at(i + 1, j + 1) == best) {
      ++i;
      ++j;
    } else if (i + 1 < ta && at(i + 1, j) == best) {
      ++i;
    } else {
      ++j;
    }
    path.pairs.emplace_back(i, j);
  }
  return path;
}

// Source/target frame sequences expanded positionally along a DTW path.
struct AlignedPair {
  Tensor<float> source; // L x D
  Tensor<float> target; // L x D
};

inline AlignedPair expand_along_path(const Tensor<float>& src,
                                     const Tensor<float>& tgt,
                                     const AlignmentPath& path) {
  const std::size_t d = src.cols();
  const std::size_t l = path.pairs.size();
  AlignedPair out{Tensor<float>({l, d}), Tensor<float>({l, d})};
  for (std::size_t k = 0; k < l; ++k) {
    const auto [i, j] = path.pairs[k];
    for (std::size_t x = 0; x < d; ++x) {
      out.source(k, x) = src(i, x);
      out.target(k, x) = tgt(j, x);
    }
  }
  return out;
}

inline AlignedPair align_pair(const Tensor<float>& src,
                              const Tensor<float>& tgt) {
  return expand_along_path(src, tgt, dtw(src, tgt));
}

} // namespace invvc::align
