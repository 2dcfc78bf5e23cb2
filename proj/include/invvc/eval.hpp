// Copyright 2026 the invvc authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "invvc/audio.hpp"
#include "invvc/dtw.hpp"
#include "invvc/error.hpp"
#include "invvc/model.hpp"
#include "invvc/rng.hpp"
#include "invvc/tensor.hpp"

// Objective metrics: mel-spectrogram distortion over a DTW alignment, a
// cosine speaker-similarity harness with a pluggable embedder, and
// round-trip invertibility reports.
namespace invvc::eval {

// MCD constant, applied verbatim to natural-log mel differences.
inline constexpr double kMsdScale = 4.342944819032518 * 1.4142135623730951;

// Mean per-step distortion in dB along the DTW path of the two sequences.
inline double msd(const Tensor<float>& a, const Tensor<float>& b) {
  if (a.empty() || b.empty()) throw FormatError("msd: empty spectrogram");
  if (a.cols() != b.cols())
    throw FormatError("msd: channel mismatch (" + std::to_string(a.cols()) +
                      " vs " + std::to_string(b.cols()) + ")");
  const align::AlignmentPath path = align::dtw(a, b);
  double acc = 0.0;
  for (const auto& [i, j] : path.pairs) {
    double s = 0.0;
    for (std::size_t d = 0; d < a.cols(); ++d) {
      const double dv = double(a(i, d)) - double(b(j, d));
      s += dv * dv;
    }
    acc += kMsdScale * std::sqrt(s);
  }
  return acc / static_cast<double>(path.pairs.size());
}

inline double msd(const audio::MelSpectrogram& a,
                  const audio::MelSpectrogram& b) {
  return msd(a.frames, b.frames);
}

inline double cosine_similarity(const std::vector<double>& a,
                                const std::vector<double>& b) {
  if (a.size() != b.size())
    throw FormatError("cosine_similarity: length mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0)
    throw NumericError("cosine_similarity: zero vector");
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

// ---------------------------------------------------------------------------
// Embedders
// ---------------------------------------------------------------------------

struct Embedder {
  virtual ~Embedder() = default;
  virtual std::size_t dim() const = 0;
  virtual std::vector<double> embed(const Tensor<float>& mel) const = 0;
};

// Deterministic stand-in for a speaker-verification model: per-channel
// temporal means and standard deviations. Separates toy speakers with
// distinct channel statistics; makes no claims about humans.
class ReferenceEmbedder final : public Embedder {
public:
  std::size_t dim() const override { return 160; }

  std::vector<double> embed(const Tensor<float>& mel) const override {
    if (mel.empty()) throw FormatError("reference embedder: empty input");
    const std::size_t t = mel.rows(), c = mel.cols();
    std::vector<double> out(2 * c, 0.0);
    for (std::size_t ch = 0; ch < c; ++ch) {
      double mean = 0.0;
      for (std::size_t i = 0; i < t; ++i) mean += double(mel(i, ch));
      mean /= double(t);
      double var = 0.0;
      for (std::size_t i = 0; i < t; ++i) {
        const double d = double(mel(i, ch)) - mean;
        var += d * d;
      }
      out[ch] = mean;
      out[c + ch] = std::sqrt(var / double(t));
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Similarity suite
// ---------------------------------------------------------------------------

struct SimilarityReport {
  std::string set_name;
  double mean_cosine = 0.0;
  std::size_t pair_count = 0;
};

// A named collection of candidate pairs: left x right when the collections
// differ, unordered distinct pairs when `right` aliases `left`.
struct PairSet {
  std::string name;
  const std::vector<Tensor<float>>* left = nullptr;
  const std::vector<Tensor<float>>* right = nullptr; // null -> within left
};

inline SimilarityReport
similarity_of_embedded(const std::string& name,
                       const std::vector<std::vector<double>>& left,
                       const std::vector<std::vector<double>>* right,
                       std::size_t pairs_per_set, std::uint64_t seed) {
  std::vector<std::pair<std::size_t, std::size_t>> candidates;
  if (right == nullptr) {
    for (std::size_t i = 0; i < left.size(); ++i)
      for (std::size_t j = i + 1; j < left.size(); ++j)
        candidates.emplace_back(i, j);
  } else {
    for (std::size_t i = 0; i < left.size(); ++i)
      for (std::size_t j = 0; j < right->size(); ++j)
        candidates.emplace_back(i, j);
  }
  if (candidates.size() < pairs_per_set)
    throw UsageError("insufficient distinct pairs for set \"" + name +
                     "\": need " + std::to_string(pairs_per_set) + ", have " +
                     std::to_string(candidates.size()));
  Rng rng(mix_seed(seed, std::hash<std::string>{}(name)));
  rng.shuffle(candidates.begin(), candidates.end());
  double acc = 0.0;
  for (std::size_t k = 0; k < pairs_per_set; ++k) {
    const auto [i, j] = candidates[k];
    acc += cosine_similarity(left[i], right ? (*right)[j] : left[j]);
  }
  return {name, acc / double(pairs_per_set), pairs_per_set};
}

inline std::vector<SimilarityReport>
similarity_suite(const std::vector<PairSet>& sets, const Embedder& embedder,
                 std::size_t pairs_per_set, std::uint64_t seed) {
  std::vector<SimilarityReport> out;
  for (const auto& set : sets) {
    if (set.left == nullptr || set.left->empty())
      throw UsageError("similarity set \"" + set.name + "\" is empty");
    std::vector<std::vector<double>> le;
    for (const auto& m : *set.left) le.push_back(embedder.embed(m));
    if (set.right == nullptr) {
      out.push_back(similarity_of_embedded(set.name, le, nullptr,
                                           pairs_per_set, seed));
    } else {
      std::vector<std::vector<double>> re;
      for (const auto& m : *set.right) re.push_back(embedder.embed(m));
      out.push_back(
          similarity_of_embedded(set.name, le, &re, pairs_per_set, seed));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Round-trip invertibility report
// ---------------------------------------------------------------------------

struct RoundTripRow {
  std::string name;
  std::size_t frames = 0;
  double max_abs_error = 0.0;
  double msd_db = 0.0;
};

template <typename T>
RoundTripRow roundtrip_one(const model::InvvcModel<T>& m,
                           const Tensor<float>& mel, std::string name) {
  const Tensor<T> x = mel.cast<T>();
  const Tensor<T> y = model::stack_forward(m, x);
  const Tensor<T> back = model::stack_inverse(m, y);
  RoundTripRow row;
  row.name = std::move(name);
  row.frames = mel.rows();
  row.max_abs_error = double(invvc::max_abs_diff(back, x));
  row.msd_db = msd(mel, back.template cast<float>());
  return row;
}

template <typename T>
std::vector<RoundTripRow>
roundtrip_report(const model::InvvcModel<T>& m,
                 const std::vector<Tensor<float>>& mels) {
  std::vector<RoundTripRow> rows;
  for (std::size_t i = 0; i < mels.size(); ++i)
    rows.push_back(roundtrip_one(m, mels[i], "utt" + std::to_string(i)));
  return rows;
}

// ---------------------------------------------------------------------------
// CSV emitters (one row per item, header first, mean row last)
// ---------------------------------------------------------------------------

struct MsdRow {
  std::string name;
  std::size_t frames_a = 0, frames_b = 0;
  double msd_db = 0.0;
};

inline std::string msd_csv(const std::vector<MsdRow>& rows) {
  std::ostringstream os;
  os << "utterance,frames_a,frames_b,msd_db\n";
  double mean = 0.0;
  for (const auto& r : rows) {
    os << r.name << "," << r.frames_a << "," << r.frames_b << "," << r.msd_db
       << "\n";
    mean += r.msd_db;
  }
  os << "mean,,," << (rows.empty() ? 0.0 : mean / double(rows.size())) << "\n";
  return os.str();
}

inline std::string similarity_csv(const std::vector<SimilarityReport>& rows) {
  std::ostringstream os;
  os << "set,pairs,mean_cosine\n";
  double mean = 0.0;
  for (const auto& r : rows) {
    os << r.set_name << "," << r.pair_count << "," << r.mean_cosine << "\n";
    mean += r.mean_cosine;
  }
  os << "mean,," << (rows.empty() ? 0.0 : mean / double(rows.size())) << "\n";
  return os.str();
}

inline std::string roundtrip_csv(const std::vector<RoundTripRow>& rows) {
  std::ostringstream os;
  os << "utterance,frames,max_abs_error,msd_db\n";
  double mean = 0.0;
  for (const auto& r : rows) {
    os << r.name << "," << r.frames << "," << r.max_abs_error << ","
       << r.msd_db << "\n";
    mean += r.msd_db;
  }
  os << "mean,,," << (rows.empty() ? 0.0 : mean / double(rows.size())) << "\n";
  return os.str();
}

} // namespace invvc::eval
