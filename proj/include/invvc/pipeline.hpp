// Copyright 2026 the invvc authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "invvc/audio.hpp"
#include "invvc/container.hpp"
#include "invvc/dtw.hpp"
#include "invvc/error.hpp"
#include "invvc/eval.hpp"
#include "invvc/model.hpp"
#include "invvc/train.hpp"

// Everything the CLI surfaces: the JSON run configuration, the feature /
// aligned-pair / embedding file schemas, and the extract -> align -> train ->
// convert/invert -> evaluate drivers.
namespace invvc::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;
using train::check_keys;

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

struct RunConfig {
  audio::MelConfig mel;
  model::ModelConfig model_config;
  train::TrainConfig train_config;
  std::string source_dir, target_dir, pairs_list;
};

inline json to_json(const audio::MelConfig& c) {
  return json{{"sample_rate", c.sample_rate}, {"win_length", c.win_length},
              {"hop", c.hop},                 {"fft_size", c.fft_size},
              {"n_mels", c.n_mels},           {"fmin", c.fmin},
              {"fmax", c.fmax},               {"log_floor", c.log_floor}};
}

inline audio::MelConfig mel_config_from_json(const json& j,
                                             const std::string& path) {
  check_keys(j,
             {"sample_rate", "win_length", "hop", "fft_size", "n_mels", "fmin",
              "fmax", "log_floor"},
             path);
  audio::MelConfig c;
  if (j.contains("sample_rate")) c.sample_rate = j["sample_rate"].get<std::size_t>();
  if (j.contains("win_length")) c.win_length = j["win_length"].get<std::size_t>();
  if (j.contains("hop")) c.hop = j["hop"].get<std::size_t>();
  if (j.contains("fft_size")) c.fft_size = j["fft_size"].get<std::size_t>();
  if (j.contains("n_mels")) c.n_mels = j["n_mels"].get<std::size_t>();
  if (j.contains("fmin")) c.fmin = j["fmin"].get<double>();
  if (j.contains("fmax")) c.fmax = j["fmax"].get<double>();
  if (j.contains("log_floor")) c.log_floor = j["log_floor"].get<double>();
  return c;
}

inline json to_json(const RunConfig& c) {
  return json{{"mel", to_json(c.mel)},
              {"model", train::to_json(c.model_config)},
              {"train", train::to_json(c.train_config)},
              {"data",
               json{{"source_dir", c.source_dir},
                    {"target_dir", c.target_dir},
                    {"pairs_list", c.pairs_list}}}};
}

inline RunConfig run_config_from_json(const json& j) {
  check_keys(j, {"mel", "model", "train", "data"}, "config");
  RunConfig c;
  if (j.contains("mel")) c.mel = mel_config_from_json(j["mel"], "mel");
  if (j.contains("model"))
    c.model_config = train::model_config_from_json(j["model"], "model");
  if (j.contains("train"))
    c.train_config = train::train_config_from_json(j["train"], "train");
  if (j.contains("data")) {
    check_keys(j["data"], {"source_dir", "target_dir", "pairs_list"}, "data");
    const auto& d = j["data"];
    if (d.contains("source_dir")) c.source_dir = d["source_dir"].get<std::string>();
    if (d.contains("target_dir")) c.target_dir = d["target_dir"].get<std::string>();
    if (d.contains("pairs_list")) c.pairs_list = d["pairs_list"].get<std::string>();
  }
  c.mel.validate();
  c.model_config.validate();
  c.train_config.validate();
  return c;
}

inline RunConfig load_run_config(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config " + path.string());
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw UsageError("invalid JSON in " + path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

// ---------------------------------------------------------------------------
// Feature / aligned / embedding files (tensor-table containers)
// ---------------------------------------------------------------------------

inline void save_features(const fs::path& path, const audio::MelSpectrogram& mel,
                          const audio::MelConfig& cfg) {
  container::Container box;
  box.config_json = json{{"kind", "mel"}, {"mel", to_json(cfg)}}.dump();
  box.tensors.add("mel", mel.frames);
  container::write_file(path, box);
}

struct FeatureFile {
  audio::MelSpectrogram mel;
  audio::MelConfig config;
};

inline FeatureFile load_features(const fs::path& path) {
  const container::Container box = container::read_file(path);
  json j;
  try {
    j = json::parse(box.config_json);
  } catch (const json::exception& e) {
    throw FormatError("invalid config JSON in " + path.string() + ": " +
                      e.what());
  }
  if (j.value("kind", "") != "mel")
    throw FormatError(path.string() + " is not a feature container");
  FeatureFile out;
  if (j.contains("mel")) out.config = mel_config_from_json(j["mel"], "mel");
  out.mel.frames = box.tensors.tensor("mel", path.string());
  if (out.mel.frames.rank() != 2)
    throw FormatError("feature container " + path.string() +
                      " holds a non-matrix \"mel\" tensor");
  return out;
}

inline void save_aligned(const fs::path& path, const align::AlignedPair& pair,
                         const std::string& src_id, const std::string& tgt_id,
                         double dtw_cost) {
  container::Container box;
  box.config_json = json{{"kind", "aligned"},
                         {"source_id", src_id},
                         {"target_id", tgt_id},
                         {"dtw_cost", dtw_cost}}
                        .dump();
  box.tensors.add("src", pair.source);
  box.tensors.add("tgt", pair.target);
  container::write_file(path, box);
}

inline align::AlignedPair load_aligned(const fs::path& path) {
  const container::Container box = container::read_file(path);
  json j;
  try {
    j = json::parse(box.config_json);
  } catch (const json::exception& e) {
    throw FormatError("invalid config JSON in " + path.string() + ": " +
                      e.what());
  }
  if (j.value("kind", "") != "aligned")
    throw FormatError(path.string() + " is not an aligned-pair container");
  align::AlignedPair pair;
  pair.source = box.tensors.tensor("src", path.string());
  pair.target = box.tensors.tensor("tgt", path.string());
  if (!pair.source.same_shape(pair.target))
    throw FormatError("aligned container " + path.string() +
                      " has mismatched src/tgt shapes");
  return pair;
}

inline std::vector<double> load_embedding(const fs::path& path) {
  const container::Container box = container::read_file(path);
  const Tensor<float> e = box.tensors.tensor("embedding", path.string());
  return std::vector<double>(e.data(), e.data() + e.numel());
}

inline std::vector<fs::path> list_files(const fs::path& dir,
                                        const std::string& extension) {
  if (!fs::is_directory(dir))
    throw IoError("not a directory: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == extension)
      out.push_back(entry.path());
  std::sort(out.begin(), out.end());
  return out;
}

// ---------------------------------------------------------------------------
// extract / align
// ---------------------------------------------------------------------------

inline std::size_t run_extract(const fs::path& wav_dir, const fs::path& out_dir,
                               const audio::MelConfig& cfg, std::ostream& log) {
  cfg.validate();
  const auto wavs = list_files(wav_dir, ".wav");
  fs::create_directories(out_dir);
  for (const auto& wav_path : wavs) {
    const audio::Waveform w = audio::read_wav(wav_path, cfg.sample_rate);
    const audio::MelSpectrogram mel = audio::mel_spectrogram(w, cfg);
    const fs::path out = out_dir / (wav_path.stem().string() + ".mel");
    save_features(out, mel, cfg);
    log << wav_path.filename().string() << ": " << mel.length() << " frames\n";
  }
  log << wavs.size() << " files\n";
  return wavs.size();
}

struct PairSpec {
  std::string src_id, tgt_id;
};

inline std::vector<PairSpec> load_pair_list(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open pair list " + path.string());
  std::vector<PairSpec> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw FormatError("pair list line without a tab separator: \"" + line +
                        "\"");
    out.push_back({line.substr(0, tab), line.substr(tab + 1)});
  }
  return out;
}

inline std::size_t run_align(const fs::path& src_dir, const fs::path& tgt_dir,
                             const fs::path& list_path, const fs::path& out_dir,
                             std::ostream& log) {
  const auto pairs = load_pair_list(list_path);
  fs::create_directories(out_dir);
  log << "pair\tsrc_frames\ttgt_frames\taligned\tcost\n";
  for (const auto& spec : pairs) {
    const fs::path src_path = src_dir / (spec.src_id + ".mel");
    const fs::path tgt_path = tgt_dir / (spec.tgt_id + ".mel");
    if (!fs::exists(src_path))
      throw IoError("missing source features for id \"" + spec.src_id +
                    "\" (" + src_path.string() + ")");
    if (!fs::exists(tgt_path))
      throw IoError("missing target features for id \"" + spec.tgt_id +
                    "\" (" + tgt_path.string() + ")");
    const FeatureFile src = load_features(src_path);
    const FeatureFile tgt = load_features(tgt_path);
    if (src.mel.channels() != tgt.mel.channels())
      throw FormatError("channel mismatch between " + src_path.string() +
                        " and " + tgt_path.string());
    const align::AlignmentPath path = align::dtw(src.mel.frames, tgt.mel.frames);
    const align::AlignedPair aligned =
        align::expand_along_path(src.mel.frames, tgt.mel.frames, path);
    const fs::path out =
        out_dir / (spec.src_id + "__" + spec.tgt_id + ".pair");
    save_aligned(out, aligned, spec.src_id, spec.tgt_id, path.total_cost);
    log << spec.src_id << "__" << spec.tgt_id << "\t" << src.mel.length()
        << "\t" << tgt.mel.length() << "\t" << aligned.source.rows() << "\t"
        << path.total_cost << "\n";
  }
  return pairs.size();
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

inline std::vector<align::AlignedPair> load_dataset(const fs::path& aligned_dir) {
  std::vector<align::AlignedPair> pairs;
  for (const auto& p : list_files(aligned_dir, ".pair"))
    pairs.push_back(load_aligned(p));
  if (pairs.empty())
    throw IoError("no .pair files in " + aligned_dir.string());
  return pairs;
}

template <typename T>
train::TrainResult train_dataset(const std::vector<align::AlignedPair>& pairs,
                                 const RunConfig& cfg, const fs::path& out_dir,
                                 std::ostream& log) {
  auto m = model::init_model<T>(cfg.model_config, cfg.train_config.seed);
  const std::size_t milestone =
      std::max<std::size_t>(1, cfg.train_config.max_steps / 10);
  double window_sum = 0.0;
  std::size_t window_n = 0;
  const auto result = train::train<T>(
      pairs, m, cfg.train_config,
      [&](const train::Checkpoint& c, bool is_final) {
        const fs::path path =
            out_dir / (is_final ? std::string("ckpt_final.ivvc")
                                : "ckpt_step" + std::to_string(c.step) +
                                      ".ivvc");
        train::save_checkpoint(c, path);
        log << "checkpoint: " << path.string() << "\n";
      },
      [&](std::size_t step, double loss) {
        window_sum += loss;
        ++window_n;
        if (step % milestone == 0 || step == cfg.train_config.max_steps) {
          log << "step " << step << ": mean loss " << window_sum / window_n
              << "\n";
          window_sum = 0.0;
          window_n = 0;
        }
      });
  return result;
}

inline void run_train(const fs::path& aligned_dir, const RunConfig& cfg,
                      const fs::path& out_dir, std::ostream& log) {
  const auto pairs = load_dataset(aligned_dir);
  fs::create_directories(out_dir);
  train::TrainResult result;
  if (cfg.train_config.precision == "float64")
    result = train_dataset<double>(pairs, cfg, out_dir, log);
  else
    result = train_dataset<float>(pairs, cfg, out_dir, log);
  std::ofstream csv(out_dir / "loss_history.csv");
  csv << "step,loss\n";
  for (std::size_t i = 0; i < result.loss_history.size(); ++i)
    csv << (i + 1) << "," << result.loss_history[i] << "\n";
}

// ---------------------------------------------------------------------------
// convert / invert
// ---------------------------------------------------------------------------

enum class Direction { convert, invert };

// Runs the model in the checkpoint's training precision.
inline Tensor<float> apply_model(const train::Checkpoint& ckpt,
                                 const Tensor<float>& mel, Direction dir) {
  if (mel.cols() != ckpt.model_config.n_channels)
    throw FormatError("input has " + std::to_string(mel.cols()) +
                      " channels, checkpoint expects " +
                      std::to_string(ckpt.model_config.n_channels));
  if (ckpt.train_config.precision == "float64") {
    const auto m = train::model_from_checkpoint<double>(ckpt);
    const Tensor<double> x = mel.cast<double>();
    const Tensor<double> y = dir == Direction::convert
                                 ? model::stack_forward(m, x)
                                 : model::stack_inverse(m, x);
    return y.cast<float>();
  }
  const auto m = train::model_from_checkpoint<float>(ckpt);
  return dir == Direction::convert ? model::stack_forward(m, mel)
                                   : model::stack_inverse(m, mel);
}

struct ConvertOptions {
  fs::path wav_out;            // optional audible rendering
  std::size_t gl_iterations = 60;
};

inline void run_apply(const fs::path& ckpt_path, const fs::path& in_path,
                      const fs::path& out_path, Direction dir,
                      const audio::MelConfig& wav_cfg,
                      const ConvertOptions& opts, std::ostream& log) {
  const train::Checkpoint ckpt = train::load_checkpoint(ckpt_path);
  audio::MelConfig mel_cfg = wav_cfg;
  audio::MelSpectrogram mel;
  if (in_path.extension() == ".wav") {
    const audio::Waveform w = audio::read_wav(in_path, mel_cfg.sample_rate);
    mel = audio::mel_spectrogram(w, mel_cfg);
  } else {
    FeatureFile f = load_features(in_path);
    mel = std::move(f.mel);
    mel_cfg = f.config;
  }
  const Tensor<float> out = apply_model(ckpt, mel.frames, dir);
  save_features(out_path, audio::MelSpectrogram{out}, mel_cfg);
  log << (dir == Direction::convert ? "converted " : "inverted ")
      << in_path.filename().string() << ": " << out.rows() << " frames -> "
      << out_path.string() << "\n";
  if (!opts.wav_out.empty()) {
    const audio::Waveform w = audio::griffin_lim_invert(
        audio::MelSpectrogram{out}, mel_cfg, opts.gl_iterations);
    audio::write_wav(opts.wav_out, w);
    log << "wrote audio " << opts.wav_out.string() << "\n";
  }
}

// ---------------------------------------------------------------------------
// evaluation drivers
// ---------------------------------------------------------------------------

inline std::string run_eval_msd(const fs::path& a_dir, const fs::path& b_dir,
                                const fs::path& list_path) {
  std::vector<PairSpec> specs;
  if (!list_path.empty()) {
    specs = load_pair_list(list_path);
  } else {
    for (const auto& p : list_files(a_dir, ".mel"))
      specs.push_back({p.stem().string(), p.stem().string()});
  }
  std::vector<eval::MsdRow> rows;
  for (const auto& s : specs) {
    const fs::path pa = a_dir / (s.src_id + ".mel");
    const fs::path pb = b_dir / (s.tgt_id + ".mel");
    if (!fs::exists(pa)) throw IoError("missing features " + pa.string());
    if (!fs::exists(pb)) throw IoError("missing features " + pb.string());
    const auto a = load_features(pa);
    const auto b = load_features(pb);
    rows.push_back({s.src_id + "__" + s.tgt_id, a.mel.length(), b.mel.length(),
                    eval::msd(a.mel, b.mel)});
  }
  return eval::msd_csv(rows);
}

inline std::string run_eval_roundtrip(const fs::path& ckpt_path,
                                      const fs::path& feat_dir) {
  const train::Checkpoint ckpt = train::load_checkpoint(ckpt_path);
  std::vector<eval::RoundTripRow> rows;
  for (const auto& p : list_files(feat_dir, ".mel")) {
    const auto f = load_features(p);
    const Tensor<float> fwd = apply_model(ckpt, f.mel.frames, Direction::convert);
    const Tensor<float> back = apply_model(ckpt, fwd, Direction::invert);
    eval::RoundTripRow row;
    row.name = p.stem().string();
    row.frames = f.mel.length();
    row.max_abs_error = double(invvc::max_abs_diff(back, f.mel.frames));
    row.msd_db = eval::msd(f.mel.frames, back);
    rows.push_back(row);
  }
  if (rows.empty()) throw IoError("no .mel files in " + feat_dir.string());
  return eval::roundtrip_csv(rows);
}

struct SimilaritySetSpec {
  std::string name;
  fs::path left_dir;
  fs::path right_dir; // empty -> within-set pairs
};

inline SimilaritySetSpec parse_set_spec(const std::string& spec) {
  const auto c1 = spec.find(':');
  if (c1 == std::string::npos)
    throw UsageError("similarity set must be NAME:DIR or NAME:DIRA:DIRB, got \"" +
                     spec + "\"");
  const auto c2 = spec.find(':', c1 + 1);
  SimilaritySetSpec out;
  out.name = spec.substr(0, c1);
  if (c2 == std::string::npos) {
    out.left_dir = spec.substr(c1 + 1);
  } else {
    out.left_dir = spec.substr(c1 + 1, c2 - c1 - 1);
    out.right_dir = spec.substr(c2 + 1);
  }
  return out;
}

inline std::string run_eval_similarity(const std::vector<SimilaritySetSpec>& specs,
                                       std::size_t pairs_per_set,
                                       std::uint64_t seed, bool from_embeddings) {
  std::vector<eval::SimilarityReport> reports;
  auto load_set_embeddings = [&](const fs::path& dir) {
    std::vector<std::vector<double>> out;
    if (from_embeddings) {
      for (const auto& p : list_files(dir, ".emb"))
        out.push_back(load_embedding(p));
    } else {
      eval::ReferenceEmbedder emb;
      for (const auto& p : list_files(dir, ".mel"))
        out.push_back(emb.embed(load_features(p).mel.frames));
    }
    if (out.empty()) throw IoError("no utterances found in " + dir.string());
    return out;
  };
  for (const auto& s : specs) {
    const auto left = load_set_embeddings(s.left_dir);
    if (s.right_dir.empty()) {
      reports.push_back(eval::similarity_of_embedded(s.name, left, nullptr,
                                                     pairs_per_set, seed));
    } else {
      const auto right = load_set_embeddings(s.right_dir);
      reports.push_back(eval::similarity_of_embedded(s.name, left, &right,
                                                     pairs_per_set, seed));
    }
  }
  return eval::similarity_csv(reports);
}

} // namespace invvc::pipeline
