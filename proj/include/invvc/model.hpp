// Copyright 2026 the invvc authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "invvc/autodiff.hpp"
#include "invvc/error.hpp"
#include "invvc/linalg.hpp"
#include "invvc/rng.hpp"
#include "invvc/tensor.hpp"

// The invertible conversion stack: n_invconv 1x1 invertible convolutions
// followed by n_flows FLOW blocks, each a pair of affine coupling layers
// driven by a transformer-based conversion net.
namespace invvc::model {

struct NetConfig {
  std::size_t n_blocks = 4; // transformer blocks
  std::size_t d_h = 512;    // pre-encoding width
  std::size_t pre_kernel = 3;
  std::size_t attn_heads = 2;
  std::size_t block_inner_channels = 1032;
  std::size_t block_kernel1 = 9;
  std::size_t block_kernel2 = 1;

  void validate(std::size_t n_channels) const {
    if (n_blocks < 1 || d_h < 1 || block_inner_channels < 1 || attn_heads < 1)
      throw UsageError("net config: all sizes must be >= 1");
    if (pre_kernel % 2 == 0 || block_kernel1 % 2 == 0 || block_kernel2 % 2 == 0)
      throw UsageError("net config: same-padded kernels must be odd");
    if (n_channels % attn_heads != 0)
      throw UsageError("net config: working width " +
                       std::to_string(n_channels) +
                       " not divisible by attn_heads " +
                       std::to_string(attn_heads));
  }
};

struct ModelConfig {
  std::size_t n_channels = 80;
  std::size_t n_invconv = 2; // N1
  std::size_t n_flows = 4;   // N2 (4 one-to-one, 6 many-to-one)
  double coupling_eps = 2.0;
  NetConfig net;

  void validate() const {
    if (n_channels < 2 || n_channels % 2 != 0)
      throw UsageError("model config: n_channels must be even and >= 2");
    if (n_invconv < 1 || n_flows < 1)
      throw UsageError("model config: layer counts must be >= 1");
    if (!std::isfinite(coupling_eps))
      throw UsageError("model config: coupling_eps must be finite");
    net.validate(n_channels);
  }
};

inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kInvConvCondLimit = 1e8;

// ---------------------------------------------------------------------------
// Parameter containers. The Vars mirrors use identical member names so the
// same visitor walks both.
// ---------------------------------------------------------------------------

template <typename T> struct Conv1d {
  Tensor<T> weight; // K x Cin x Cout
  Tensor<T> bias;   // Cout
};

template <typename T> struct LayerNorm {
  Tensor<T> gamma, beta; // C
};

template <typename T> struct Attention {
  Tensor<T> wq, wk, wv, wo; // C x C
};

template <typename T> struct NetBlock {
  Attention<T> attn;
  LayerNorm<T> ln_attn;
  Conv1d<T> conv1, conv2;
  LayerNorm<T> ln_conv;
};

template <typename T> struct ConversionNet {
  Conv1d<T> pre1, pre2;
  std::vector<NetBlock<T>> blocks;
};

template <typename T> struct AffineCoupling {
  ConversionNet<T> net;
  bool transforms_second_half = false;
};

template <typename T> struct InvConv1x1 {
  Tensor<T> weight; // C x C
};

template <typename T> struct Flow {
  AffineCoupling<T> first;  // transforms the first half
  AffineCoupling<T> second; // transforms the second half
};

template <typename T> struct InvvcModel {
  ModelConfig config;
  std::vector<InvConv1x1<T>> invconvs;
  std::vector<Flow<T>> flows;
};

template <typename T> struct Conv1dVars {
  ad::Var<T> weight, bias;
};
template <typename T> struct LayerNormVars {
  ad::Var<T> gamma, beta;
};
template <typename T> struct AttentionVars {
  ad::Var<T> wq, wk, wv, wo;
};
template <typename T> struct NetBlockVars {
  AttentionVars<T> attn;
  LayerNormVars<T> ln_attn;
  Conv1dVars<T> conv1, conv2;
  LayerNormVars<T> ln_conv;
};
template <typename T> struct ConversionNetVars {
  Conv1dVars<T> pre1, pre2;
  std::vector<NetBlockVars<T>> blocks;
};
template <typename T> struct CouplingVars {
  ConversionNetVars<T> net;
  bool transforms_second_half = false;
};
template <typename T> struct InvConvVars {
  ad::Var<T> weight;
};
template <typename T> struct FlowVars {
  CouplingVars<T> first, second;
};
template <typename T> struct ModelVars {
  std::vector<InvConvVars<T>> invconvs;
  std::vector<FlowVars<T>> flows;
};

// Visits net parameters with their checkpoint-name suffixes, in a fixed
// order shared by ConversionNet (Tensor fields) and ConversionNetVars (Var
// fields).
template <typename NetLike, typename F>
void visit_net_params(NetLike& net, const std::string& prefix, F&& f) {
  f(prefix + "pre1.w", net.pre1.weight);
  f(prefix + "pre1.b", net.pre1.bias);
  f(prefix + "pre2.w", net.pre2.weight);
  f(prefix + "pre2.b", net.pre2.bias);
  for (std::size_t k = 0; k < net.blocks.size(); ++k) {
    auto& blk = net.blocks[k];
    const std::string bp = prefix + "block." + std::to_string(k) + ".";
    f(bp + "attn.wq", blk.attn.wq);
    f(bp + "attn.wk", blk.attn.wk);
    f(bp + "attn.wv", blk.attn.wv);
    f(bp + "attn.wo", blk.attn.wo);
    f(bp + "ln1.gamma", blk.ln_attn.gamma);
    f(bp + "ln1.beta", blk.ln_attn.beta);
    f(bp + "conv1.w", blk.conv1.weight);
    f(bp + "conv1.b", blk.conv1.bias);
    f(bp + "conv2.w", blk.conv2.weight);
    f(bp + "conv2.b", blk.conv2.bias);
    f(bp + "ln2.gamma", blk.ln_conv.gamma);
    f(bp + "ln2.beta", blk.ln_conv.beta);
  }
}

// Visits every model parameter with its checkpoint name.
template <typename ModelLike, typename F>
void visit_params(ModelLike& m, F&& f) {
  for (std::size_t i = 0; i < m.invconvs.size(); ++i)
    f("invconv." + std::to_string(i) + ".W", m.invconvs[i].weight);
  for (std::size_t i = 0; i < m.flows.size(); ++i) {
    const std::string base = "flow." + std::to_string(i) + ".";
    visit_net_params(m.flows[i].first.net, base + "a.", f);
    visit_net_params(m.flows[i].second.net, base + "b.", f);
  }
}

template <typename T> std::size_t param_count(const InvvcModel<T>& m) {
  std::size_t n = 0;
  visit_params(const_cast<InvvcModel<T>&>(m),
               [&n](const std::string&, const Tensor<T>& t) { n += t.numel(); });
  return n;
}

template <typename To, typename From>
InvvcModel<To> model_cast(const InvvcModel<From>& m) {
  InvvcModel<To> out;
  out.config = m.config;
  for (const auto& ic : m.invconvs)
    out.invconvs.push_back({ic.weight.template cast<To>()});
  auto cast_net = [](const ConversionNet<From>& net) {
    ConversionNet<To> o;
    auto cc = [](const Conv1d<From>& c) {
      return Conv1d<To>{c.weight.template cast<To>(),
                        c.bias.template cast<To>()};
    };
    auto cl = [](const LayerNorm<From>& l) {
      return LayerNorm<To>{l.gamma.template cast<To>(),
                           l.beta.template cast<To>()};
    };
    o.pre1 = cc(net.pre1);
    o.pre2 = cc(net.pre2);
    for (const auto& b : net.blocks)
      o.blocks.push_back(NetBlock<To>{
          Attention<To>{b.attn.wq.template cast<To>(),
                        b.attn.wk.template cast<To>(),
                        b.attn.wv.template cast<To>(),
                        b.attn.wo.template cast<To>()},
          cl(b.ln_attn), cc(b.conv1), cc(b.conv2), cl(b.ln_conv)});
    return o;
  };
  for (const auto& fl : m.flows)
    out.flows.push_back(Flow<To>{
        AffineCoupling<To>{cast_net(fl.first.net),
                           fl.first.transforms_second_half},
        AffineCoupling<To>{cast_net(fl.second.net),
                           fl.second.transforms_second_half}});
  return out;
}

// ---------------------------------------------------------------------------
// Lifting parameters onto a tape
// ---------------------------------------------------------------------------

template <typename T>
ConversionNetVars<T> lift_net(ad::Tape<T>& tape, const ConversionNet<T>& net,
                              bool requires_grad = false) {
  auto lc = [&](const Conv1d<T>& c) {
    return Conv1dVars<T>{tape.leaf(c.weight, requires_grad),
                         tape.leaf(c.bias, requires_grad)};
  };
  auto ll = [&](const LayerNorm<T>& l) {
    return LayerNormVars<T>{tape.leaf(l.gamma, requires_grad),
                            tape.leaf(l.beta, requires_grad)};
  };
  ConversionNetVars<T> out;
  out.pre1 = lc(net.pre1);
  out.pre2 = lc(net.pre2);
  for (const auto& b : net.blocks)
    out.blocks.push_back(NetBlockVars<T>{
        AttentionVars<T>{tape.leaf(b.attn.wq, requires_grad),
                         tape.leaf(b.attn.wk, requires_grad),
                         tape.leaf(b.attn.wv, requires_grad),
                         tape.leaf(b.attn.wo, requires_grad)},
        ll(b.ln_attn), lc(b.conv1), lc(b.conv2), ll(b.ln_conv)});
  return out;
}

template <typename T>
ModelVars<T> lift(ad::Tape<T>& tape, const InvvcModel<T>& m,
                  bool requires_grad = false) {
  ModelVars<T> out;
  for (const auto& ic : m.invconvs)
    out.invconvs.push_back({tape.leaf(ic.weight, requires_grad)});
  for (const auto& fl : m.flows)
    out.flows.push_back(FlowVars<T>{
        CouplingVars<T>{lift_net(tape, fl.first.net, requires_grad),
                        fl.first.transforms_second_half},
        CouplingVars<T>{lift_net(tape, fl.second.net, requires_grad),
                        fl.second.transforms_second_half}});
  return out;
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
Tensor<T> kaiming_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  Tensor<T> t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i)
    t[i] = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

template <typename T>
Conv1d<T> init_conv(std::size_t kernel, std::size_t cin, std::size_t cout,
                    Rng& rng) {
  return Conv1d<T>{kaiming_uniform<T>({kernel, cin, cout}, kernel * cin, rng),
                   Tensor<T>({cout})};
}

template <typename T>
ConversionNet<T> init_net(const ModelConfig& cfg, Rng& rng) {
  const std::size_t c = cfg.n_channels;
  const std::size_t half = c / 2;
  const NetConfig& nc = cfg.net;
  ConversionNet<T> net;
  net.pre1 = init_conv<T>(nc.pre_kernel, half, nc.d_h, rng);
  net.pre2 = init_conv<T>(nc.pre_kernel, nc.d_h, c, rng);
  for (std::size_t k = 0; k < nc.n_blocks; ++k) {
    NetBlock<T> blk;
    blk.attn = Attention<T>{kaiming_uniform<T>({c, c}, c, rng),
                            kaiming_uniform<T>({c, c}, c, rng),
                            kaiming_uniform<T>({c, c}, c, rng),
                            kaiming_uniform<T>({c, c}, c, rng)};
    blk.ln_attn = LayerNorm<T>{Tensor<T>::ones({c}), Tensor<T>({c})};
    blk.conv1 = init_conv<T>(nc.block_kernel1, c, nc.block_inner_channels, rng);
    blk.conv2 = init_conv<T>(nc.block_kernel2, nc.block_inner_channels, c, rng);
    blk.ln_conv = LayerNorm<T>{Tensor<T>::ones({c}), Tensor<T>({c})};
    net.blocks.push_back(std::move(blk));
  }
  // The net's closing layer is zeroed so a fresh coupling emits u = t = 0 for
  // any input: the trailing layer-norm would undo a zeroed convolution alone,
  // so its gamma is zeroed together with the final kernel-1 convolution.
  NetBlock<T>& last = net.blocks.back();
  last.conv2.weight = Tensor<T>(last.conv2.weight.shape());
  last.conv2.bias = Tensor<T>(last.conv2.bias.shape());
  last.ln_conv.gamma = Tensor<T>({c});
  return net;
}

} // namespace detail

template <typename T>
InvvcModel<T> init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(mix_seed(seed, 0x111ull));
  InvvcModel<T> m;
  m.config = cfg;
  for (std::size_t i = 0; i < cfg.n_invconv; ++i) {
    const Tensor<double> q = linalg::random_orthonormal(cfg.n_channels, rng);
    m.invconvs.push_back({q.cast<T>()});
  }
  for (std::size_t i = 0; i < cfg.n_flows; ++i) {
    Flow<T> fl;
    fl.first.net = detail::init_net<T>(cfg, rng);
    fl.first.transforms_second_half = false;
    fl.second.net = detail::init_net<T>(cfg, rng);
    fl.second.transforms_second_half = true;
    m.flows.push_back(std::move(fl));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Forward passes (recorded on a tape)
// ---------------------------------------------------------------------------

template <typename T>
ad::Var<T> invconv_forward(const ad::Var<T>& weight, const ad::Var<T>& x) {
  if (x.shape()[1] != weight.shape()[0])
    throw FormatError("invconv channel mismatch: input has " +
                      std::to_string(x.shape()[1]) + ", weight is " +
                      shape_str(weight.shape()));
  return ad::matmul(x, ad::transpose(weight)); // y_i = W x_i, frames as rows
}

template <typename T>
ad::Var<T> attention_forward(const AttentionVars<T>& at, const ad::Var<T>& x,
                             std::size_t heads) {
  const std::size_t c = x.shape()[1];
  if (c % heads != 0)
    throw FormatError("attention width " + std::to_string(c) +
                      " not divisible by " + std::to_string(heads) + " heads");
  const std::size_t dk = c / heads;
  auto q = ad::matmul(x, at.wq);
  auto k = ad::matmul(x, at.wk);
  auto v = ad::matmul(x, at.wv);
  ad::Var<T> merged;
  for (std::size_t h = 0; h < heads; ++h) {
    auto qh = ad::slice(q, 1, h * dk, (h + 1) * dk);
    auto kh = ad::slice(k, 1, h * dk, (h + 1) * dk);
    auto vh = ad::slice(v, 1, h * dk, (h + 1) * dk);
    auto scores = ad::mul_scalar(ad::matmul(qh, ad::transpose(kh)),
                                 T(1) / std::sqrt(static_cast<T>(dk)));
    auto oh = ad::matmul(ad::softmax(scores, 1), vh);
    merged = h == 0 ? oh : ad::concat(merged, oh, 1);
  }
  return ad::matmul(merged, at.wo);
}

// Conversion net: two pre-encoding convolutions (the second doubles the
// channel count relative to the half-feature input), then n_blocks of
// self-attention and convolution modules, both residual + layer-norm.
// Output splits into the coupling's (u, t).
template <typename T>
std::pair<ad::Var<T>, ad::Var<T>>
net_apply(const ConversionNetVars<T>& net, const ad::Var<T>& h,
          const NetConfig& cfg) {
  auto x =
      ad::relu(ad::conv1d(h, net.pre1.weight, net.pre1.bias, ad::Padding::same));
  x = ad::conv1d(x, net.pre2.weight, net.pre2.bias, ad::Padding::same);
  for (const auto& blk : net.blocks) {
    auto attn = attention_forward(blk.attn, x, cfg.attn_heads);
    x = ad::layer_norm(ad::add(x, attn), blk.ln_attn.gamma, blk.ln_attn.beta,
                       static_cast<T>(kLayerNormEps));
    auto mid = ad::relu(
        ad::conv1d(x, blk.conv1.weight, blk.conv1.bias, ad::Padding::same));
    auto conv = ad::conv1d(mid, blk.conv2.weight, blk.conv2.bias,
                           ad::Padding::same);
    x = ad::layer_norm(ad::add(x, conv), blk.ln_conv.gamma, blk.ln_conv.beta,
                       static_cast<T>(kLayerNormEps));
  }
  return ad::split(x, 1);
}

template <typename T>
ad::Var<T> coupling_forward(const CouplingVars<T>& cp, const ad::Var<T>& x,
                            const ModelConfig& cfg) {
  if (x.shape()[1] % 2 != 0)
    throw FormatError("coupling needs an even channel count");
  auto [first, second] = ad::split(x, 1);
  const auto& kept = cp.transforms_second_half ? first : second;
  const auto& moved = cp.transforms_second_half ? second : first;
  auto [u, t] = net_apply(cp.net, kept, cfg.net);
  auto s = ad::sigmoid(ad::add_scalar(u, static_cast<T>(cfg.coupling_eps)));
  auto y = ad::add(ad::mul(s, moved), t);
  return cp.transforms_second_half ? ad::concat(kept, y, 1)
                                   : ad::concat(y, kept, 1);
}

template <typename T>
ad::Var<T> flow_forward(const FlowVars<T>& fl, const ad::Var<T>& x,
                        const ModelConfig& cfg) {
  return coupling_forward(fl.second, coupling_forward(fl.first, x, cfg), cfg);
}

template <typename T>
ad::Var<T> stack_forward(const ModelVars<T>& m, const ad::Var<T>& x,
                         const ModelConfig& cfg) {
  ad::Var<T> h = x;
  for (const auto& ic : m.invconvs) h = invconv_forward(ic.weight, h);
  for (const auto& fl : m.flows) h = flow_forward(fl, h, cfg);
  return h;
}

// ---------------------------------------------------------------------------
// Plain-tensor forward / inverse
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> stack_forward(const InvvcModel<T>& m, const Tensor<T>& x) {
  ad::Tape<T> tape(false);
  const ModelVars<T> vars = lift(tape, m, false);
  return stack_forward(vars, tape.leaf(x), m.config).value();
}

template <typename T>
Tensor<T> coupling_forward(const AffineCoupling<T>& cp, const Tensor<T>& x,
                           const ModelConfig& cfg) {
  ad::Tape<T> tape(false);
  CouplingVars<T> vars{lift_net(tape, cp.net, false),
                       cp.transforms_second_half};
  return coupling_forward(vars, tape.leaf(x), cfg).value();
}

template <typename T>
Tensor<T> flow_forward(const Flow<T>& fl, const Tensor<T>& x,
                       const ModelConfig& cfg) {
  ad::Tape<T> tape(false);
  FlowVars<T> vars{CouplingVars<T>{lift_net(tape, fl.first.net, false),
                                   fl.first.transforms_second_half},
                   CouplingVars<T>{lift_net(tape, fl.second.net, false),
                                   fl.second.transforms_second_half}};
  return flow_forward(vars, tape.leaf(x), cfg).value();
}

// W^-1 via pivoted LU in double, recomputed per call; a trained model whose
// invconv became near-singular is reported instead of silently degrading.
template <typename T>
Tensor<T> invconv_inverse(const InvConv1x1<T>& layer, const Tensor<T>& y) {
  const Tensor<double> w = layer.weight.template cast<double>();
  Tensor<double> w_inv;
  try {
    w_inv = linalg::invert(w);
  } catch (const NumericError&) {
    throw NumericError("invertible convolution weight is singular");
  }
  const double cond = linalg::cond1(w, w_inv);
  if (!(cond < kInvConvCondLimit))
    throw NumericError(
        "invertible convolution weight is near-singular (cond ~ " +
        std::to_string(cond) + ")");
  const Tensor<T> wi = w_inv.cast<T>();
  const std::size_t t = y.rows(), c = y.cols();
  if (c != wi.rows())
    throw FormatError("invconv channel mismatch on inverse");
  Tensor<T> x({t, c});
  for (std::size_t r = 0; r < t; ++r)
    for (std::size_t i = 0; i < c; ++i) {
      T s = T(0);
      for (std::size_t j = 0; j < c; ++j) s += y(r, j) * wi(i, j);
      x(r, i) = s;
    }
  return x;
}

template <typename T>
Tensor<T> coupling_inverse(const AffineCoupling<T>& cp, const Tensor<T>& y,
                           const ModelConfig& cfg) {
  const std::size_t c = y.cols();
  if (c % 2 != 0) throw FormatError("coupling needs an even channel count");
  const std::size_t half = c / 2, rows = y.rows();
  Tensor<T> ya({rows, half}), yb({rows, half});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < half; ++i) {
      ya(r, i) = y(r, i);
      yb(r, i) = y(r, half + i);
    }
  const Tensor<T>& kept = cp.transforms_second_half ? ya : yb;
  const Tensor<T>& moved = cp.transforms_second_half ? yb : ya;

  ad::Tape<T> tape(false);
  const ConversionNetVars<T> net = lift_net(tape, cp.net, false);
  auto [u, t] = net_apply(net, tape.leaf(kept), cfg.net);
  const Tensor<T>& uv = u.value();
  const Tensor<T>& tv = t.value();

  Tensor<T> x({rows, c});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < half; ++i) {
      const T s = ad::sigmoid_scalar(
          uv(r, i) + static_cast<T>(cfg.coupling_eps));
      if (s == T(0))
        throw NumericError("coupling scale underflowed to zero on inverse");
      const T orig = (moved(r, i) - tv(r, i)) / s;
      if (cp.transforms_second_half) {
        x(r, i) = kept(r, i);
        x(r, half + i) = orig;
      } else {
        x(r, i) = orig;
        x(r, half + i) = kept(r, i);
      }
    }
  return x;
}

template <typename T>
Tensor<T> flow_inverse(const Flow<T>& fl, const Tensor<T>& y,
                       const ModelConfig& cfg) {
  return coupling_inverse(fl.first, coupling_inverse(fl.second, y, cfg), cfg);
}

template <typename T>
Tensor<T> stack_inverse(const InvvcModel<T>& m, const Tensor<T>& y) {
  Tensor<T> h = y;
  for (std::size_t i = m.flows.size(); i-- > 0;)
    h = flow_inverse(m.flows[i], h, m.config);
  for (std::size_t i = m.invconvs.size(); i-- > 0;)
    h = invconv_inverse(m.invconvs[i], h);
  return h;
}

} // namespace invvc::model
