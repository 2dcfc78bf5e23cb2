// Copyright 2026 the invvc authors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "invvc/model.hpp"

namespace ad = invvc::ad;
namespace model = invvc::model;
using invvc::FormatError;
using invvc::NumericError;
using invvc::Rng;
using invvc::Tensor;

namespace {

model::ModelConfig toy_config(std::size_t channels = 8, std::size_t n_invconv = 1,
                              std::size_t n_flows = 1, std::size_t n_blocks = 1) {
  model::ModelConfig cfg;
  cfg.n_channels = channels;
  cfg.n_invconv = n_invconv;
  cfg.n_flows = n_flows;
  cfg.net.n_blocks = n_blocks;
  cfg.net.d_h = 16;
  cfg.net.block_inner_channels = 20;
  return cfg;
}

Tensor<double> random_frames(std::size_t t, std::size_t c, Rng& rng,
                             double scale = 1.0) {
  Tensor<double> m({t, c});
  for (std::size_t i = 0; i < m.numel(); ++i)
    m[i] = rng.uniform(-scale, scale);
  return m;
}

// Random weights for round-trip property tests: init + moderate perturbation
// of every parameter (keeps invconvs well-conditioned).
template <typename T>
model::InvvcModel<T> perturbed_model(const model::ModelConfig& cfg,
                                     std::uint64_t seed, double amount = 0.1) {
  auto m = model::init_model<T>(cfg, seed);
  Rng rng(invvc::mix_seed(seed, 0xabc));
  model::visit_params(m, [&](const std::string&, Tensor<T>& p) {
    for (std::size_t i = 0; i < p.numel(); ++i)
      p[i] += static_cast<T>(rng.uniform(-amount, amount));
  });
  return m;
}

} // namespace

TEST_CASE("invconv forward: identity and permutation weights") {
  ad::Tape<double> tape(false);
  auto x = tape.leaf(Tensor<double>({1, 2}, {1, 2}));
  auto eye = tape.leaf(Tensor<double>({2, 2}, {1, 0, 0, 1}));
  auto y = model::invconv_forward(eye, x);
  CHECK(y.value()(0, 0) == 1.0);
  CHECK(y.value()(0, 1) == 2.0);

  auto swap = tape.leaf(Tensor<double>({2, 2}, {0, 1, 1, 0}));
  auto z = model::invconv_forward(swap, x);
  CHECK(z.value()(0, 0) == 2.0);
  CHECK(z.value()(0, 1) == 1.0);

  auto bad = tape.leaf(Tensor<double>({3, 4}));
  CHECK_THROWS_AS(model::invconv_forward(eye, bad), FormatError);
}

TEST_CASE("invconv inverse: scalar matrix, round trip, singular weight") {
  model::InvConv1x1<double> doubler{Tensor<double>({2, 2}, {2, 0, 0, 2})};
  const Tensor<double> y({1, 2}, {4, 6});
  const auto x = model::invconv_inverse(doubler, y);
  CHECK(x(0, 0) == 2.0);
  CHECK(x(0, 1) == 3.0);

  Rng rng(4);
  model::InvConv1x1<double> ortho{invvc::linalg::random_orthonormal(16, rng)};
  const auto frames = random_frames(9, 16, rng);
  ad::Tape<double> tape(false);
  const auto fwd =
      model::invconv_forward(tape.leaf(ortho.weight), tape.leaf(frames));
  const auto back = model::invconv_inverse(ortho, fwd.value());
  CHECK(invvc::max_abs_diff(back, frames) < 1e-10);

  model::InvConv1x1<double> singular{
      Tensor<double>({2, 2}, {1, 2, 1, 2})}; // duplicated row
  CHECK_THROWS_AS(model::invconv_inverse(singular, y), NumericError);
}

TEST_CASE("orthonormal init: W^T W = I within 1e-6, reproducible from seed") {
  const auto cfg = toy_config(8, 2, 1);
  for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
    const auto m = model::init_model<double>(cfg, seed);
    REQUIRE(m.invconvs.size() == 2);
    for (const auto& ic : m.invconvs) {
      const std::size_t c = ic.weight.rows();
      double worst = 0.0;
      for (std::size_t i = 0; i < c; ++i)
        for (std::size_t j = 0; j < c; ++j) {
          double dot = 0.0;
          for (std::size_t k = 0; k < c; ++k)
            dot += ic.weight(k, i) * ic.weight(k, j);
          worst = std::max(worst, std::abs(dot - (i == j ? 1.0 : 0.0)));
        }
      CHECK(worst < 1e-6);
    }
  }

  const auto a = model::init_model<float>(cfg, 42);
  const auto b = model::init_model<float>(cfg, 42);
  bool identical = true;
  std::vector<const Tensor<float>*> pa, pb;
  model::visit_params(const_cast<model::InvvcModel<float>&>(a),
                      [&](const std::string&, Tensor<float>& t) { pa.push_back(&t); });
  model::visit_params(const_cast<model::InvvcModel<float>&>(b),
                      [&](const std::string&, Tensor<float>& t) { pb.push_back(&t); });
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i)
    for (std::size_t k = 0; k < pa[i]->numel(); ++k)
      identical = identical && ((*pa[i])[k] == (*pb[i])[k]);
  CHECK(identical);

  const auto c = model::init_model<float>(cfg, 43);
  bool all_same = true;
  std::vector<const Tensor<float>*> pc;
  model::visit_params(const_cast<model::InvvcModel<float>&>(c),
                      [&](const std::string&, Tensor<float>& t) { pc.push_back(&t); });
  for (std::size_t k = 0; k < pa[0]->numel(); ++k)
    all_same = all_same && ((*pa[0])[k] == (*pc[0])[k]);
  CHECK_FALSE(all_same);
}

TEST_CASE("fresh net emits u = 0, t = 0 for any input") {
  const auto cfg = toy_config(8, 1, 1, 2);
  const auto m = model::init_model<double>(cfg, 9);
  Rng rng(10);
  for (int trial = 0; trial < 3; ++trial) {
    const auto h = random_frames(5, 4, rng, 3.0);
    ad::Tape<double> tape(false);
    const auto net = model::lift_net(tape, m.flows[0].first.net);
    auto [u, t] = model::net_apply(net, tape.leaf(h), cfg.net);
    CHECK(u.shape() == invvc::Shape{5, 4});
    CHECK(t.shape() == invvc::Shape{5, 4});
    for (std::size_t i = 0; i < u.value().numel(); ++i) {
      CHECK(u.value()[i] == 0.0);
      CHECK(t.value()[i] == 0.0);
    }
  }
}

TEST_CASE("net output shapes hold for any length") {
  const auto cfg = toy_config();
  const auto m = perturbed_model<double>(cfg, 3);
  Rng rng(11);
  for (std::size_t t : {1ul, 2ul, 17ul}) {
    ad::Tape<double> tape(false);
    const auto net = model::lift_net(tape, m.flows[0].first.net);
    auto [u, tt] = model::net_apply(net, tape.leaf(random_frames(t, 4, rng)),
                                    cfg.net);
    CHECK(u.shape() == invvc::Shape{t, 4});
    CHECK(tt.shape() == invvc::Shape{t, 4});
  }
}

TEST_CASE("fresh coupling scales the transformed half by sigmoid(eps)") {
  auto cfg = toy_config();
  cfg.coupling_eps = 2.0;
  const auto m = model::init_model<double>(cfg, 21);
  const double sig2 = 0.8807970779778823; // 1/(1+e^-2)

  Tensor<double> x({1, 8});
  x(0, 0) = 1.0;
  x(0, 1) = -1.0;
  for (std::size_t i = 2; i < 8; ++i) x(0, i) = 0.25 * double(i);
  const auto y = model::coupling_forward(m.flows[0].first, x, cfg);
  CHECK(y(0, 0) == Catch::Approx(sig2).epsilon(1e-15));
  CHECK(y(0, 1) == Catch::Approx(-sig2).epsilon(1e-15));
  for (std::size_t i = 4; i < 8; ++i) CHECK(y(0, i) == x(0, i)); // bit-exact

  // Whole fresh flow: both halves scaled by sigmoid(eps).
  const auto yf = model::flow_forward(m.flows[0], x, cfg);
  for (std::size_t i = 0; i < 8; ++i)
    CHECK(yf(0, i) == Catch::Approx(x(0, i) * sig2).epsilon(1e-14).margin(1e-300));
}

TEST_CASE("coupling with pinned scale and shift, and its exact inverse") {
  // Set the closing layer-norm beta so the fresh net emits u = -eps (scale
  // 0.5) and t = 0.5 for every position.
  auto cfg = toy_config();
  cfg.coupling_eps = 2.0;
  auto m = model::init_model<double>(cfg, 33);
  auto& beta = m.flows[0].first.net.blocks.back().ln_conv.beta;
  for (std::size_t i = 0; i < 4; ++i) {
    beta[i] = -cfg.coupling_eps; // u half
    beta[4 + i] = 0.5;           // t half
  }
  Tensor<double> x({1, 8});
  x(0, 0) = 1.0;
  x(0, 1) = -1.0;
  const auto y = model::coupling_forward(m.flows[0].first, x, cfg);
  CHECK(y(0, 0) == 1.0); // 0.5*1 + 0.5
  CHECK(y(0, 1) == 0.0); // 0.5*(-1) + 0.5

  const auto back = model::coupling_inverse(m.flows[0].first, y, cfg);
  CHECK(back(0, 0) == 1.0); // exact: the arithmetic is in powers of two
  CHECK(back(0, 1) == -1.0);
}

TEST_CASE("zero-init net inverse divides by sigmoid(eps) and subtracts zero") {
  auto cfg = toy_config();
  cfg.coupling_eps = 2.0;
  const auto m = model::init_model<double>(cfg, 5);
  Rng rng(6);
  const auto y = random_frames(3, 8, rng);
  const auto x = model::coupling_inverse(m.flows[0].first, y, cfg);
  const double sig2 = 0.8807970779778823;
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(x(r, i) == Catch::Approx(y(r, i) / sig2).epsilon(1e-15));
      CHECK(x(r, 4 + i) == y(r, 4 + i));
    }
}

TEST_CASE("coupling and flow round trips (200 random-weight cases)") {
  Rng rng(71);
  double worst_coupling = 0.0, worst_flow = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const auto cfg = toy_config(4 + 2 * rng.index(4)); // C in {4,6,8,10}
    const auto m =
        perturbed_model<double>(cfg, invvc::mix_seed(71, trial), 0.15);
    const std::size_t t = 1 + rng.index(6);
    const auto x = random_frames(t, cfg.n_channels, rng);

    const auto yc = model::coupling_forward(m.flows[0].first, x, cfg);
    worst_coupling = std::max(
        worst_coupling,
        double(invvc::max_abs_diff(
            model::coupling_inverse(m.flows[0].first, yc, cfg), x)));

    const auto yf = model::flow_forward(m.flows[0], x, cfg);
    worst_flow = std::max(
        worst_flow, double(invvc::max_abs_diff(
                        model::flow_inverse(m.flows[0], yf, cfg), x)));
  }
  INFO("worst coupling " << worst_coupling << ", worst flow " << worst_flow);
  CHECK(worst_coupling < 1e-12);
  CHECK(worst_flow < 1e-12);
}

TEST_CASE("the kept half passes through forward and inverse bit-exactly") {
  Rng rng(83);
  const auto cfg = toy_config();
  const auto m = perturbed_model<double>(cfg, 17, 0.2);
  const auto x = random_frames(6, 8, rng);
  const auto y = model::coupling_forward(m.flows[0].first, x, cfg);
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t i = 4; i < 8; ++i) CHECK(y(r, i) == x(r, i));
  const auto back = model::coupling_inverse(m.flows[0].first, y, cfg);
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t i = 4; i < 8; ++i) CHECK(back(r, i) == y(r, i));
}

TEST_CASE("stack round trip at T in {1, 7, 200} (64-bit)") {
  const auto cfg = toy_config(8, 2, 2);
  const auto m = perturbed_model<double>(cfg, 55, 0.1);
  Rng rng(56);
  for (std::size_t t : {1ul, 7ul, 200ul}) {
    const auto x = random_frames(t, 8, rng);
    const auto y = model::stack_forward(m, x);
    CHECK(y.shape() == x.shape());
    const auto back = model::stack_inverse(m, y);
    const double rel =
        double(invvc::max_abs_diff(back, x)) / (x.max_abs() + 1.0);
    INFO("T=" << t << " rel error " << rel);
    CHECK(rel < 1e-9);
  }
}

TEST_CASE("stack round trip in 32-bit stays below 1e-4 relative") {
  const auto cfg = toy_config(8, 2, 2);
  const auto m64 = perturbed_model<double>(cfg, 99, 0.1);
  const auto m32 = model::model_cast<float>(m64);
  Rng rng(100);
  const auto xd = random_frames(50, 8, rng);
  const auto x = xd.cast<float>();
  const auto y = model::stack_forward(m32, x);
  const auto back = model::stack_inverse(m32, y);
  const double rel =
      double(invvc::max_abs_diff(back, x)) / (double(x.max_abs()) + 1.0);
  INFO("rel error " << rel);
  CHECK(rel < 1e-4);
}

TEST_CASE("stack forward is deterministic") {
  const auto cfg = toy_config();
  const auto m = perturbed_model<double>(cfg, 7, 0.1);
  Rng rng(8);
  const auto x = random_frames(10, 8, rng);
  const auto y1 = model::stack_forward(m, x);
  const auto y2 = model::stack_forward(m, x);
  for (std::size_t i = 0; i < y1.numel(); ++i) CHECK(y1[i] == y2[i]);
}

TEST_CASE("parameter count depends only on the config") {
  const auto cfg = toy_config(8, 2, 3, 2);
  CHECK(model::param_count(model::init_model<double>(cfg, 1)) ==
        model::param_count(model::init_model<double>(cfg, 2)));
}

TEST_CASE("config validation rejects bad setups") {
  auto cfg = toy_config();
  cfg.n_channels = 7;
  CHECK_THROWS_AS(cfg.validate(), invvc::UsageError);
  cfg = toy_config();
  cfg.net.attn_heads = 3; // 8 % 3 != 0
  CHECK_THROWS_AS(cfg.validate(), invvc::UsageError);
  cfg = toy_config();
  cfg.net.block_kernel1 = 4;
  CHECK_THROWS_AS(cfg.validate(), invvc::UsageError);
  cfg = toy_config();
  cfg.n_flows = 0;
  CHECK_THROWS_AS(cfg.validate(), invvc::UsageError);
}

TEST_CASE("net gradients match finite differences on the toy config") {
  // sum(u) + sum(t) through a perturbed net, probing a slice of every
  // parameter tensor via the full-model harness in test_train_checkpoint;
  // here the net alone.
  const auto cfg = toy_config();
  const auto m = perturbed_model<double>(cfg, 61, 0.1);
  const auto& net = m.flows[0].first.net;
  Rng rng(62);
  const auto h = random_frames(3, 4, rng);

  // analytic gradients
  ad::Tape<double> tape;
  const auto vars = model::lift_net(tape, net, true);
  auto [u, t] = model::net_apply(vars, tape.leaf(h), cfg.net);
  tape.backward(ad::add(ad::sum_all(u), ad::sum_all(t)));

  std::vector<std::pair<std::string, Tensor<double>>> analytic;
  {
    auto mut = vars;
    model::visit_net_params(
        mut, "", [&](const std::string& name, ad::Var<double>& v) {
          analytic.emplace_back(name, v.grad());
        });
  }

  // numeric: per-tensor probe of a few coordinates
  auto eval = [&](const model::ConversionNet<double>& n) {
    ad::Tape<double> tp(false);
    const auto vs = model::lift_net(tp, n, false);
    auto [uu, tt] = model::net_apply(vs, tp.leaf(h), cfg.net);
    return ad::sum_all(ad::add(ad::sum_all(uu), ad::sum_all(tt))).value()[0];
  };
  const double step = 1e-5;
  std::size_t tensor_idx = 0;
  auto probe = model::init_model<double>(cfg, 61);
  probe.flows[0].first.net = net;
  Rng pick(63);
  model::visit_params(probe, [&](const std::string& name, Tensor<double>& p) {
    if (name.rfind("flow.0.a.", 0) != 0) return;
    const std::string leaf_name = name.substr(9);
    // find matching analytic entry
    const Tensor<double>* g = nullptr;
    for (const auto& [an, ag] : analytic)
      if (an == leaf_name) g = &ag;
    REQUIRE(g != nullptr);
    for (int probe_i = 0; probe_i < 3; ++probe_i) {
      const std::size_t i = pick.index(p.numel());
      const double orig = p[i];
      p[i] = orig + step;
      const double fp = eval(probe.flows[0].first.net);
      p[i] = orig - step;
      const double fm = eval(probe.flows[0].first.net);
      p[i] = orig;
      const double numeric = (fp - fm) / (2.0 * step);
      const double err = invvc::ad::rel_error((*g)[i], numeric, 1e-3);
      INFO(leaf_name << "[" << i << "] analytic " << (*g)[i] << " numeric "
                     << numeric);
      CHECK(err < 1e-4);
    }
    ++tensor_idx;
  });
  CHECK(tensor_idx == 16); // pre1/pre2 + one block, weights and biases
}
