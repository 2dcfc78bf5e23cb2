// Copyright 2026 the invvc authors
// SPDX-License-Identifier: Apache-2.0

// Shared helpers for the unit and acceptance suites: toy model configs,
// synthetic parallel tasks, and a whole-model finite-difference harness.
#pragma once

#include <string>
#include <utility>
#include <vector>

#include "invvc/dtw.hpp"
#include "invvc/linalg.hpp"
#include "invvc/model.hpp"
#include "invvc/rng.hpp"
#include "invvc/train.hpp"

namespace invvc::testing {

inline model::ModelConfig toy_config(std::size_t channels = 8,
                                     std::size_t n_invconv = 1,
                                     std::size_t n_flows = 1,
                                     std::size_t n_blocks = 1,
                                     std::size_t d_h = 16,
                                     std::size_t inner = 20) {
  model::ModelConfig cfg;
  cfg.n_channels = channels;
  cfg.n_invconv = n_invconv;
  cfg.n_flows = n_flows;
  cfg.net.n_blocks = n_blocks;
  cfg.net.d_h = d_h;
  cfg.net.block_inner_channels = inner;
  return cfg;
}

template <typename T>
Tensor<T> random_frames(std::size_t t, std::size_t c, Rng& rng,
                        double lo = -1.0, double hi = 1.0) {
  Tensor<T> m({t, c});
  for (std::size_t i = 0; i < m.numel(); ++i)
    m[i] = static_cast<T>(rng.uniform(lo, hi));
  return m;
}

// init + moderate perturbation of every parameter, so round trips and
// gradient checks run at a generic point instead of the zeroed couplings.
template <typename T>
model::InvvcModel<T> perturbed_model(const model::ModelConfig& cfg,
                                     std::uint64_t seed, double amount = 0.1) {
  auto m = model::init_model<T>(cfg, seed);
  Rng rng(mix_seed(seed, 0xabc));
  model::visit_params(m, [&](const std::string&, Tensor<T>& p) {
    for (std::size_t i = 0; i < p.numel(); ++i)
      p[i] += static_cast<T>(rng.uniform(-amount, amount));
  });
  return m;
}

// Synthetic parallel task: target = P source + b per frame, with a fixed
// random orthonormal P and bias b shared by every pair.
struct LinearTask {
  std::vector<align::AlignedPair> pairs;
  Tensor<double> mix;  // C x C orthonormal
  Tensor<double> bias; // C
};

inline LinearTask make_linear_task(std::size_t n_pairs, std::size_t frames,
                                   std::size_t channels, std::uint64_t seed,
                                   double bias_scale = 0.5) {
  Rng rng(mix_seed(seed, 0x11e4));
  LinearTask task;
  task.mix = linalg::random_orthonormal(channels, rng);
  task.bias = Tensor<double>({channels});
  for (std::size_t i = 0; i < channels; ++i)
    task.bias[i] = rng.uniform(-bias_scale, bias_scale);
  for (std::size_t p = 0; p < n_pairs; ++p) {
    Tensor<float> src({frames, channels}), tgt({frames, channels});
    for (std::size_t t = 0; t < frames; ++t) {
      std::vector<double> row(channels);
      for (std::size_t c = 0; c < channels; ++c) {
        row[c] = rng.uniform(-1.0, 1.0);
        src(t, c) = static_cast<float>(row[c]);
      }
      for (std::size_t c = 0; c < channels; ++c) {
        double acc = task.bias[c];
        for (std::size_t k = 0; k < channels; ++k)
          acc += task.mix(c, k) * row[k];
        tgt(t, c) = static_cast<float>(acc);
      }
    }
    task.pairs.push_back({std::move(src), std::move(tgt)});
  }
  return task;
}

struct FullGradReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t failures = 0;
  std::string worst;
};

// Central finite differences of the composite loss through the whole stack,
// probing every parameter coordinate.
inline FullGradReport
full_loss_gradcheck(model::InvvcModel<double>& m, const Tensor<double>& x,
                    const Tensor<double>& target, double step, double tol,
                    double floor = 1e-3) {
  std::vector<Tensor<double>> analytic;
  {
    ad::Tape<double> tape;
    auto vars = model::lift(tape, m, true);
    auto pred = model::stack_forward(vars, tape.constant(x), m.config);
    auto loss = train::mel_loss(pred, tape.constant(target));
    tape.backward(loss);
    model::visit_params(vars, [&](const std::string&, ad::Var<double>& v) {
      analytic.push_back(v.grad());
    });
  }
  auto eval = [&]() {
    ad::Tape<double> tape(false);
    auto vars = model::lift(tape, m, false);
    auto pred = model::stack_forward(vars, tape.constant(x), m.config);
    return train::mel_loss(pred, tape.constant(target)).value()[0];
  };
  FullGradReport rep;
  std::size_t tensor_idx = 0;
  model::visit_params(m, [&](const std::string& name, Tensor<double>& p) {
    const Tensor<double>& g = analytic[tensor_idx++];
    for (std::size_t k = 0; k < p.numel(); ++k) {
      const double orig = p[k];
      p[k] = orig + step;
      const double fp = eval();
      p[k] = orig - step;
      const double fm = eval();
      p[k] = orig;
      const double numeric = (fp - fm) / (2.0 * step);
      const double err = ad::rel_error(g[k], numeric, floor);
      ++rep.checked;
      if (err > rep.max_rel_error) {
        rep.max_rel_error = err;
        rep.worst = name + "[" + std::to_string(k) + "]";
      }
      if (err > tol) ++rep.failures;
    }
  });
  return rep;
}

} // namespace invvc::testing
