// Copyright 2026 the invvc authors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "invvc/dtw.hpp"
#include "invvc/rng.hpp"

namespace align = invvc::align;
using invvc::FormatError;
using invvc::Rng;
using invvc::Tensor;

namespace {

// Independent oracle: minimum cost over every monotonic path, by exhaustive
// recursion. Tractable for Ta, Tb <= 6.
double brute_force_cost(const Tensor<float>& a, const Tensor<float>& b,
                        std::size_t i, std::size_t j) {
  const std::size_t d = a.cols();
  double c = 0.0;
  for (std::size_t k = 0; k < d; ++k) {
    const double dv = double(a(i, k)) - double(b(j, k));
    c += dv * dv;
  }
  c = std::sqrt(c);
  if (i + 1 == a.rows() && j + 1 == b.rows()) return c;
  double best = std::numeric_limits<double>::infinity();
  if (i + 1 < a.rows() && j + 1 < b.rows())
    best = std::min(best, brute_force_cost(a, b, i + 1, j + 1));
  if (i + 1 < a.rows()) best = std::min(best, brute_force_cost(a, b, i + 1, j));
  if (j + 1 < b.rows()) best = std::min(best, brute_force_cost(a, b, i, j + 1));
  return c + best;
}

Tensor<float> random_frames(std::size_t t, std::size_t d, Rng& rng) {
  Tensor<float> m({t, d});
  for (std::size_t i = 0; i < m.numel(); ++i)
    m[i] = float(rng.uniform(-1.0, 1.0));
  return m;
}

} // namespace

TEST_CASE("identical sequences align on the diagonal with zero cost") {
  Rng rng(2);
  const auto a = random_frames(5, 3, rng);
  const auto p = align::dtw(a, a);
  CHECK(p.total_cost == 0.0);
  REQUIRE(p.pairs.size() == 5);
  for (std::size_t k = 0; k < 5; ++k) {
    CHECK(p.pairs[k].first == k);
    CHECK(p.pairs[k].second == k);
  }
}

TEST_CASE("three-vs-two example follows the diagonal-preference tie-break") {
  const Tensor<float> a({3, 1}, {0, 1, 2});
  const Tensor<float> b({2, 1}, {0, 2});
  const auto p = align::dtw(a, b);
  CHECK(p.total_cost == Catch::Approx(1.0).margin(1e-12));
  REQUIRE(p.pairs.size() == 3);
  CHECK(p.pairs[0] == std::make_pair<std::size_t, std::size_t>(0, 0));
  CHECK(p.pairs[1] == std::make_pair<std::size_t, std::size_t>(1, 1));
  CHECK(p.pairs[2] == std::make_pair<std::size_t, std::size_t>(2, 1));
}

TEST_CASE("dtw validates inputs") {
  const Tensor<float> a({2, 3});
  const Tensor<float> b({2, 4});
  CHECK_THROWS_AS(align::dtw(a, b), FormatError);
  CHECK_THROWS_AS(align::dtw(Tensor<float>(), a), FormatError);
}

TEST_CASE("dtw equals brute-force enumeration on all small instances") {
  Rng rng(77);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t ta = 1 + rng.index(6);
    const std::size_t tb = 1 + rng.index(6);
    const auto a = random_frames(ta, 2, rng);
    const auto b = random_frames(tb, 2, rng);
    const auto p = align::dtw(a, b);
    const double brute = brute_force_cost(a, b, 0, 0);
    CHECK(std::abs(p.total_cost - brute) <= 1e-12 * std::max(1.0, brute));
  }
}

TEST_CASE("path structure invariants hold on random instances") {
  Rng rng(31);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t ta = 1 + rng.index(8);
    const std::size_t tb = 1 + rng.index(8);
    const auto a = random_frames(ta, 3, rng);
    const auto b = random_frames(tb, 3, rng);
    const auto p = align::dtw(a, b);
    REQUIRE(!p.pairs.empty());
    CHECK(p.pairs.front() == std::make_pair<std::size_t, std::size_t>(0, 0));
    CHECK(p.pairs.back().first == ta - 1);
    CHECK(p.pairs.back().second == tb - 1);
    CHECK(p.pairs.size() >= std::max(ta, tb));
    CHECK(p.total_cost >= 0.0);
    for (std::size_t k = 1; k < p.pairs.size(); ++k) {
      const auto di = p.pairs[k].first - p.pairs[k - 1].first;
      const auto dj = p.pairs[k].second - p.pairs[k - 1].second;
      CHECK(di <= 1);
      CHECK(dj <= 1);
      CHECK(di + dj >= 1); // no repeated pair, monotonic step
    }
  }
}

TEST_CASE("cost is symmetric and invariant under channel permutation") {
  Rng rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t ta = 2 + rng.index(7);
    const std::size_t tb = 2 + rng.index(7);
    const auto a = random_frames(ta, 4, rng);
    const auto b = random_frames(tb, 4, rng);
    CHECK(align::dtw(a, b).total_cost == align::dtw(b, a).total_cost);

    // permute the 4 channels of both inputs jointly
    const std::size_t perm[4] = {2, 0, 3, 1};
    Tensor<float> ap({ta, 4}), bp({tb, 4});
    for (std::size_t i = 0; i < ta; ++i)
      for (std::size_t k = 0; k < 4; ++k) ap(i, k) = a(i, perm[k]);
    for (std::size_t i = 0; i < tb; ++i)
      for (std::size_t k = 0; k < 4; ++k) bp(i, k) = b(i, perm[k]);
    // permuting channels reorders the cost summation, so exact equality is
    // only up to rounding
    const double c0 = align::dtw(a, b).total_cost;
    CHECK(align::dtw(ap, bp).total_cost ==
          Catch::Approx(c0).epsilon(1e-12).margin(1e-300));
  }
}

TEST_CASE("align_pair expands both sides along the path") {
  Rng rng(5);
  const auto same = random_frames(6, 80, rng);
  const auto ident = align::align_pair(same, same);
  REQUIRE(ident.source.rows() == 6);
  for (std::size_t i = 0; i < same.numel(); ++i) {
    CHECK(ident.source[i] == same[i]);
    CHECK(ident.target[i] == same[i]);
  }

  const Tensor<float> a({3, 1}, {0, 1, 2});
  const Tensor<float> b({2, 1}, {0, 2});
  const auto pair = align::align_pair(a, b);
  REQUIRE(pair.source.rows() == 3);
  REQUIRE(pair.target.rows() == 3);
  CHECK(pair.source(0, 0) == 0.0f);
  CHECK(pair.source(1, 0) == 1.0f);
  CHECK(pair.source(2, 0) == 2.0f);
  CHECK(pair.target(0, 0) == 0.0f);
  CHECK(pair.target(1, 0) == 2.0f);
  CHECK(pair.target(2, 0) == 2.0f); // duplicates tgt[1]
}

TEST_CASE("aligned length bounds") {
  Rng rng(8);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t ta = 1 + rng.index(10);
    const std::size_t tb = 1 + rng.index(10);
    const auto a = random_frames(ta, 2, rng);
    const auto b = random_frames(tb, 2, rng);
    const auto pair = align::align_pair(a, b);
    CHECK(pair.source.rows() == pair.target.rows());
    CHECK(pair.source.rows() >= std::max(ta, tb));
    CHECK(pair.source.rows() <= ta + tb - 1);
  }
}
