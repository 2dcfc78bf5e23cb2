// Copyright 2026 the invvc authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "invvc/autodiff.hpp"
#include "invvc/container.hpp"
#include "invvc/dtw.hpp"
#include "invvc/error.hpp"
#include "invvc/model.hpp"
#include "invvc/rng.hpp"

// Optimization of the conversion stack on aligned parallel pairs: composite
// MSE + L1-of-means + L1-of-stds loss, Adam, fixed-length crops with loss
// masking, and checkpoint persistence.
namespace invvc::train {

struct TrainConfig {
  double learning_rate = 1e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.98;
  double adam_eps = 1e-8;
  std::size_t crop_length = 200;
  std::size_t batch_size = 8;
  std::size_t max_steps = 2000;
  std::uint64_t seed = 1;
  std::string precision = "float32"; // or "float64"
  std::size_t checkpoint_every = 500;

  void validate() const {
    if (!(learning_rate > 0.0))
      throw UsageError("train config: learning_rate must be > 0");
    if (adam_beta1 < 0.0 || adam_beta1 >= 1.0 || adam_beta2 < 0.0 ||
        adam_beta2 >= 1.0)
      throw UsageError("train config: betas must lie in [0, 1)");
    if (adam_eps <= 0.0) throw UsageError("train config: adam_eps must be > 0");
    if (crop_length < 1) throw UsageError("train config: crop_length must be >= 1");
    if (batch_size < 1) throw UsageError("train config: batch_size must be >= 1");
    if (precision != "float32" && precision != "float64")
      throw UsageError("train config: precision must be float32 or float64");
    if (checkpoint_every < 1)
      throw UsageError("train config: checkpoint_every must be >= 1");
  }
};

// ---------------------------------------------------------------------------
// Config JSON (strict: unknown keys are rejected)
// ---------------------------------------------------------------------------

using nlohmann::json;

inline void check_keys(const json& obj, std::initializer_list<const char*> allowed,
                       const std::string& path) {
  if (!obj.is_object())
    throw UsageError("config node " + path + " must be a JSON object");
  for (const auto& [key, value] : obj.items()) {
    bool known = false;
    for (const char* a : allowed) known = known || key == a;
    if (!known)
      throw UsageError("unknown config key: " + path + "." + key);
  }
}

inline json to_json(const model::NetConfig& c) {
  return json{{"n_blocks", c.n_blocks},
              {"d_h", c.d_h},
              {"pre_kernel", c.pre_kernel},
              {"attn_heads", c.attn_heads},
              {"block_inner_channels", c.block_inner_channels},
              {"block_kernels", json::array({c.block_kernel1, c.block_kernel2})}};
}

inline model::NetConfig net_config_from_json(const json& j,
                                             const std::string& path) {
  check_keys(j, {"n_blocks", "d_h", "pre_kernel", "attn_heads",
                 "block_inner_channels", "block_kernels"},
             path);
  model::NetConfig c;
  if (j.contains("n_blocks")) c.n_blocks = j["n_blocks"].get<std::size_t>();
  if (j.contains("d_h")) c.d_h = j["d_h"].get<std::size_t>();
  if (j.contains("pre_kernel")) c.pre_kernel = j["pre_kernel"].get<std::size_t>();
  if (j.contains("attn_heads")) c.attn_heads = j["attn_heads"].get<std::size_t>();
  if (j.contains("block_inner_channels"))
    c.block_inner_channels = j["block_inner_channels"].get<std::size_t>();
  if (j.contains("block_kernels")) {
    const auto& k = j["block_kernels"];
    if (!k.is_array() || k.size() != 2)
      throw UsageError(path + ".block_kernels must be a two-element array");
    c.block_kernel1 = k[0].get<std::size_t>();
    c.block_kernel2 = k[1].get<std::size_t>();
  }
  return c;
}

inline json to_json(const model::ModelConfig& c) {
  return json{{"n_channels", c.n_channels},
              {"n_invconv", c.n_invconv},
              {"n_flows", c.n_flows},
              {"coupling_eps", c.coupling_eps},
              {"net", to_json(c.net)}};
}

inline model::ModelConfig model_config_from_json(const json& j,
                                                 const std::string& path) {
  check_keys(j, {"n_channels", "n_invconv", "n_flows", "coupling_eps", "net"},
             path);
  model::ModelConfig c;
  if (j.contains("n_channels")) c.n_channels = j["n_channels"].get<std::size_t>();
  if (j.contains("n_invconv")) c.n_invconv = j["n_invconv"].get<std::size_t>();
  if (j.contains("n_flows")) c.n_flows = j["n_flows"].get<std::size_t>();
  if (j.contains("coupling_eps")) c.coupling_eps = j["coupling_eps"].get<double>();
  if (j.contains("net")) c.net = net_config_from_json(j["net"], path + ".net");
  return c;
}

inline json to_json(const TrainConfig& c) {
  return json{{"learning_rate", c.learning_rate},
              {"adam_beta1", c.adam_beta1},
              {"adam_beta2", c.adam_beta2},
              {"adam_eps", c.adam_eps},
              {"crop_length", c.crop_length},
              {"batch_size", c.batch_size},
              {"max_steps", c.max_steps},
              {"seed", c.seed},
              {"precision", c.precision},
              {"checkpoint_every", c.checkpoint_every}};
}

inline TrainConfig train_config_from_json(const json& j,
                                          const std::string& path) {
  check_keys(j,
             {"learning_rate", "adam_beta1", "adam_beta2", "adam_eps",
              "crop_length", "batch_size", "max_steps", "seed", "precision",
              "checkpoint_every"},
             path);
  TrainConfig c;
  if (j.contains("learning_rate")) c.learning_rate = j["learning_rate"].get<double>();
  if (j.contains("adam_beta1")) c.adam_beta1 = j["adam_beta1"].get<double>();
  if (j.contains("adam_beta2")) c.adam_beta2 = j["adam_beta2"].get<double>();
  if (j.contains("adam_eps")) c.adam_eps = j["adam_eps"].get<double>();
  if (j.contains("crop_length")) c.crop_length = j["crop_length"].get<std::size_t>();
  if (j.contains("batch_size")) c.batch_size = j["batch_size"].get<std::size_t>();
  if (j.contains("max_steps")) c.max_steps = j["max_steps"].get<std::size_t>();
  if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
  if (j.contains("precision")) c.precision = j["precision"].get<std::string>();
  if (j.contains("checkpoint_every"))
    c.checkpoint_every = j["checkpoint_every"].get<std::size_t>();
  return c;
}

// ---------------------------------------------------------------------------
// Composite loss (Eq.-style): MSE + L1 of per-channel temporal means + L1 of
// per-channel temporal stds, statistics over the time axis, averaged over
// channels. `mask` (T x 1 of 0/1), when given, excludes padded frames; the
// masked loss equals the loss on the truncated rows exactly.
// ---------------------------------------------------------------------------

template <typename T>
ad::Var<T> mel_loss(const ad::Var<T>& pred, const ad::Var<T>& target,
                    const ad::Var<T>* mask = nullptr,
                    std::size_t real_frames = 0) {
  if (pred.shape() != target.shape())
    throw FormatError("loss shape mismatch: " + shape_str(pred.shape()) +
                      " vs " + shape_str(target.shape()));
  const std::size_t frames = pred.shape()[0];
  const std::size_t channels = pred.shape()[1];
  const T n = static_cast<T>(real_frames ? real_frames : frames);

  ad::Var<T> diff = ad::sub(pred, target);
  if (mask) diff = ad::mul(diff, *mask);
  auto mse = ad::mul_scalar(ad::sum_all(ad::mul(diff, diff)),
                            T(1) / (n * static_cast<T>(channels)));

  auto stats = [&](const ad::Var<T>& x) {
    ad::Var<T> masked = mask ? ad::mul(x, *mask) : x;
    auto mean_c = ad::mul_scalar(ad::sum(masked, 0), T(1) / n);
    ad::Var<T> centered = ad::sub(x, mean_c);
    if (mask) centered = ad::mul(centered, *mask);
    auto var_c =
        ad::mul_scalar(ad::sum(ad::mul(centered, centered), 0), T(1) / n);
    return std::make_pair(mean_c, ad::sqrt(var_c));
  };
  auto [mean_p, std_p] = stats(pred);
  auto [mean_t, std_t] = stats(target);
  auto mean_l1 = ad::mul_scalar(ad::sum_all(ad::abs(ad::sub(mean_p, mean_t))),
                                T(1) / static_cast<T>(channels));
  auto std_l1 = ad::mul_scalar(ad::sum_all(ad::abs(ad::sub(std_p, std_t))),
                               T(1) / static_cast<T>(channels));
  return ad::add(ad::add(mse, mean_l1), std_l1);
}

template <typename T>
T loss_value(const Tensor<T>& pred, const Tensor<T>& target) {
  ad::Tape<T> tape(false);
  return mel_loss(tape.leaf(pred), tape.leaf(target)).value()[0];
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

template <typename T> struct AdamState {
  std::vector<Tensor<T>> m, v;
  std::size_t step = 0;
};

template <typename T>
void adam_step(const std::vector<std::pair<std::string, Tensor<T>*>>& params,
               const std::vector<Tensor<T>>& grads, AdamState<T>& state,
               const TrainConfig& cfg) {
  if (params.size() != grads.size())
    throw FormatError("adam_step: parameter/gradient count mismatch");
  if (state.m.empty()) {
    for (const auto& [name, p] : params) {
      state.m.emplace_back(p->shape());
      state.v.emplace_back(p->shape());
    }
  }
  if (state.m.size() != params.size())
    throw FormatError("adam_step: state size mismatch");
  ++state.step;
  const T b1 = static_cast<T>(cfg.adam_beta1);
  const T b2 = static_cast<T>(cfg.adam_beta2);
  const T bc1 = T(1) - static_cast<T>(std::pow(cfg.adam_beta1,
                                               double(state.step)));
  const T bc2 = T(1) - static_cast<T>(std::pow(cfg.adam_beta2,
                                               double(state.step)));
  const T lr = static_cast<T>(cfg.learning_rate);
  const T eps = static_cast<T>(cfg.adam_eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& p = *params[i].second;
    const Tensor<T>& g = grads[i];
    if (!p.same_shape(g))
      throw FormatError("adam_step: gradient shape mismatch for " +
                        params[i].first);
    if (!g.all_finite())
      throw NumericError("non-finite gradient for parameter " +
                         params[i].first);
    Tensor<T>& m = state.m[i];
    Tensor<T>& v = state.v[i];
    for (std::size_t k = 0; k < p.numel(); ++k) {
      m[k] = b1 * m[k] + (T(1) - b1) * g[k];
      v[k] = b2 * v[k] + (T(1) - b2) * g[k] * g[k];
      const T mhat = m[k] / bc1;
      const T vhat = v[k] / bc2;
      p[k] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Batching: seeded shuffle each epoch, fixed-length random crops, zero
// padding with a loss mask for short pairs.
// ---------------------------------------------------------------------------

template <typename T> struct Crop {
  Tensor<T> source, target; // crop_length x C
  Tensor<T> mask;           // crop_length x 1, 1 on real frames
  std::size_t real_frames = 0;
  std::size_t pair_index = 0;
};

template <typename T> struct Batch {
  std::vector<Crop<T>> crops;
};

template <typename T> class BatchStream {
public:
  BatchStream(const std::vector<align::AlignedPair>& pairs,
              const TrainConfig& cfg, std::uint64_t seed)
      : pairs_(pairs), cfg_(cfg), rng_(mix_seed(seed, 0xba7c)) {
    if (pairs_.empty()) throw UsageError("empty dataset: no aligned pairs");
    for (const auto& p : pairs_)
      if (p.source.empty() || p.source.rows() != p.target.rows() ||
          p.source.cols() != p.target.cols())
        throw FormatError("aligned pair with mismatched or empty sides");
  }

  Batch<T> next() {
    Batch<T> b;
    b.crops.reserve(cfg_.batch_size);
    for (std::size_t i = 0; i < cfg_.batch_size; ++i) b.crops.push_back(crop());
    return b;
  }

private:
  Crop<T> crop() {
    if (queue_pos_ >= order_.size()) {
      order_.resize(pairs_.size());
      for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
      rng_.shuffle(order_.begin(), order_.end());
      queue_pos_ = 0;
    }
    const std::size_t idx = order_[queue_pos_++];
    const align::AlignedPair& pair = pairs_[idx];
    const std::size_t len = pair.source.rows();
    const std::size_t c = pair.source.cols();
    const std::size_t cl = cfg_.crop_length;
    Crop<T> out;
    out.pair_index = idx;
    out.source = Tensor<T>({cl, c});
    out.target = Tensor<T>({cl, c});
    out.mask = Tensor<T>({cl, 1});
    const std::size_t take = std::min(len, cl);
    const std::size_t start = len > cl ? rng_.index(len - cl + 1) : 0;
    out.real_frames = take;
    for (std::size_t t = 0; t < take; ++t) {
      for (std::size_t k = 0; k < c; ++k) {
        out.source(t, k) = static_cast<T>(pair.source(start + t, k));
        out.target(t, k) = static_cast<T>(pair.target(start + t, k));
      }
      out.mask(t, 0) = T(1);
    }
    return out;
  }

  const std::vector<align::AlignedPair>& pairs_;
  TrainConfig cfg_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t queue_pos_ = std::size_t(-1);
};

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

struct Checkpoint {
  model::ModelConfig model_config;
  TrainConfig train_config;
  std::size_t step = 0;
  container::TensorTable params;
  bool has_adam = false;
  container::TensorTable adam_m, adam_v;
};

template <typename T>
Checkpoint make_checkpoint(const model::InvvcModel<T>& m,
                           const TrainConfig& tc, std::size_t step,
                           const AdamState<T>* adam = nullptr) {
  Checkpoint c;
  c.model_config = m.config;
  c.train_config = tc;
  c.step = step;
  model::visit_params(const_cast<model::InvvcModel<T>&>(m),
                      [&](const std::string& name, Tensor<T>& p) {
                        c.params.add(name, p.template cast<float>());
                      });
  if (adam && !adam->m.empty()) {
    c.has_adam = true;
    std::size_t i = 0;
    model::visit_params(const_cast<model::InvvcModel<T>&>(m),
                        [&](const std::string& name, Tensor<T>&) {
                          c.adam_m.add("adam.m." + name,
                                       adam->m[i].template cast<float>());
                          c.adam_v.add("adam.v." + name,
                                       adam->v[i].template cast<float>());
                          ++i;
                        });
  }
  return c;
}

template <typename T>
model::InvvcModel<T> model_from_checkpoint(const Checkpoint& c) {
  c.model_config.validate();
  model::InvvcModel<T> m = model::init_model<T>(c.model_config, 0);
  std::size_t i = 0;
  model::visit_params(m, [&](const std::string& name, Tensor<T>& p) {
    if (i >= c.params.entries.size())
      throw FormatError("checkpoint tensor table is shorter than its config "
                        "implies (missing \"" + name + "\")");
    const container::TensorEntry& e = c.params.entries[i];
    if (e.name != name)
      throw FormatError("checkpoint tensor order mismatch: expected \"" +
                        name + "\", found \"" + e.name + "\"");
    if (e.shape != p.shape())
      throw FormatError("checkpoint tensor \"" + name + "\" has shape " +
                        shape_str(e.shape) + " but the config implies " +
                        shape_str(p.shape()));
    p = Tensor<float>(e.shape, e.data).template cast<T>();
    ++i;
  });
  if (i != c.params.entries.size())
    throw FormatError("checkpoint holds " +
                      std::to_string(c.params.entries.size()) +
                      " tensors but the config implies " + std::to_string(i));
  return m;
}

inline std::string checkpoint_bytes(const Checkpoint& c) {
  json config{{"kind", "checkpoint"},
              {"step", c.step},
              {"has_adam", c.has_adam},
              {"model", to_json(c.model_config)},
              {"train", to_json(c.train_config)}};
  container::Container box;
  box.config_json = config.dump();
  box.tensors = c.params;
  if (c.has_adam) {
    for (const auto& e : c.adam_m.entries) box.tensors.entries.push_back(e);
    for (const auto& e : c.adam_v.entries) box.tensors.entries.push_back(e);
  }
  return container::serialize(box);
}

inline void save_checkpoint(const Checkpoint& c,
                            const std::filesystem::path& path) {
  const std::string bytes = checkpoint_bytes(c);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write checkpoint " + path.string());
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("failed writing checkpoint " + path.string());
}

inline Checkpoint parse_checkpoint(const container::Container& box,
                                   const std::string& context) {
  json config;
  try {
    config = json::parse(box.config_json);
  } catch (const json::exception& e) {
    throw FormatError("invalid config JSON in " + context + ": " + e.what());
  }
  check_keys(config, {"kind", "step", "has_adam", "model", "train"}, context);
  if (!config.contains("kind") || config["kind"] != "checkpoint")
    throw FormatError(context + " is not a checkpoint container");
  Checkpoint c;
  c.step = config.value("step", std::size_t(0));
  c.has_adam = config.value("has_adam", false);
  c.model_config =
      model_config_from_json(config.value("model", json::object()), "model");
  c.train_config =
      train_config_from_json(config.value("train", json::object()), "train");
  c.model_config.validate();
  c.train_config.validate();

  // Partition the tensor table into params and Adam moments; verify against
  // the config-implied layout.
  const model::InvvcModel<float> skeleton =
      model::init_model<float>(c.model_config, 0);
  std::vector<std::pair<std::string, Shape>> expected;
  model::visit_params(const_cast<model::InvvcModel<float>&>(skeleton),
                      [&](const std::string& name, Tensor<float>& p) {
                        expected.emplace_back(name, p.shape());
                      });
  const std::size_t n = expected.size();
  const std::size_t want = c.has_adam ? 3 * n : n;
  if (box.tensors.entries.size() != want)
    throw FormatError("checkpoint " + context + " holds " +
                      std::to_string(box.tensors.entries.size()) +
                      " tensors but its config implies " +
                      std::to_string(want));
  for (std::size_t i = 0; i < n; ++i) {
    const auto& e = box.tensors.entries[i];
    if (e.name != expected[i].first || e.shape != expected[i].second)
      throw FormatError("checkpoint " + context +
                        " tensor table does not match its config at \"" +
                        e.name + "\"");
    c.params.entries.push_back(e);
  }
  if (c.has_adam) {
    for (std::size_t i = 0; i < n; ++i) {
      const auto& e = box.tensors.entries[n + i];
      if (e.name != "adam.m." + expected[i].first ||
          e.shape != expected[i].second)
        throw FormatError("checkpoint " + context +
                          " Adam first-moment table mismatch at \"" + e.name +
                          "\"");
      c.adam_m.entries.push_back(e);
    }
    for (std::size_t i = 0; i < n; ++i) {
      const auto& e = box.tensors.entries[2 * n + i];
      if (e.name != "adam.v." + expected[i].first ||
          e.shape != expected[i].second)
        throw FormatError("checkpoint " + context +
                          " Adam second-moment table mismatch at \"" + e.name +
                          "\"");
      c.adam_v.entries.push_back(e);
    }
  }
  return c;
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return parse_checkpoint(container::read_file(path), path.string());
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainResult {
  std::vector<double> loss_history;
  Checkpoint final_checkpoint;
};

using CheckpointSink = std::function<void(const Checkpoint&, bool is_final)>;
using ProgressFn = std::function<void(std::size_t step, double loss)>;

template <typename T>
TrainResult train(const std::vector<align::AlignedPair>& pairs,
                  model::InvvcModel<T>& m, const TrainConfig& cfg,
                  const CheckpointSink& sink = {},
                  const ProgressFn& progress = {}) {
  cfg.validate();
  m.config.validate();
  for (const auto& p : pairs)
    if (!p.source.empty() && p.source.cols() != m.config.n_channels)
      throw FormatError("aligned pair has " + std::to_string(p.source.cols()) +
                        " channels, model expects " +
                        std::to_string(m.config.n_channels));

  BatchStream<T> stream(pairs, cfg, cfg.seed);
  AdamState<T> state;
  TrainResult result;
  result.loss_history.reserve(cfg.max_steps);

  std::vector<std::pair<std::string, Tensor<T>*>> params;
  model::visit_params(m, [&](const std::string& name, Tensor<T>& p) {
    params.emplace_back(name, &p);
  });

  for (std::size_t step = 1; step <= cfg.max_steps; ++step) {
    const Batch<T> batch = stream.next();
    ad::Tape<T> tape;
    model::ModelVars<T> vars = model::lift(tape, m, true);
    ad::Var<T> total;
    for (std::size_t i = 0; i < batch.crops.size(); ++i) {
      const Crop<T>& crop = batch.crops[i];
      auto pred = model::stack_forward(vars, tape.constant(crop.source),
                                       m.config);
      auto mask = tape.constant(crop.mask);
      auto l = mel_loss(pred, tape.constant(crop.target), &mask,
                        crop.real_frames);
      total = i == 0 ? l : ad::add(total, l);
    }
    total = ad::mul_scalar(total, T(1) / static_cast<T>(batch.crops.size()));
    const double loss = static_cast<double>(total.value()[0]);
    if (!std::isfinite(loss))
      throw NumericError("non-finite loss at step " + std::to_string(step));
    tape.backward(total);

    std::vector<Tensor<T>> grads;
    grads.reserve(params.size());
    model::visit_params(vars, [&](const std::string&, ad::Var<T>& v) {
      grads.push_back(v.grad());
    });
    adam_step(params, grads, state, cfg);
    result.loss_history.push_back(loss);
    if (progress) progress(step, loss);
    if (sink && step % cfg.checkpoint_every == 0 && step != cfg.max_steps)
      sink(make_checkpoint(m, cfg, step, &state), false);
  }
  result.final_checkpoint = make_checkpoint(m, cfg, cfg.max_steps, &state);
  if (sink) sink(result.final_checkpoint, true);
  return result;
}

} // namespace invvc::train
