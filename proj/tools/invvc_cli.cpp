// Copyright 2026 the invvc authors
// SPDX-License-Identifier: Apache-2.0

// Command-line surface for the invertible voice-conversion pipeline:
// extract -> align -> train -> convert/invert -> eval, plus config printing
// and a synthetic demo-data generator.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "invvc/pipeline.hpp"
#include "invvc/synth.hpp"

namespace fs = std::filesystem;
namespace pipeline = invvc::pipeline;

namespace {

pipeline::RunConfig config_or_default(const std::string& path) {
  if (path.empty()) return pipeline::RunConfig{};
  return pipeline::load_run_config(path);
}

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream f(path);
  if (!f) throw invvc::IoError("cannot write " + path);
  f << text;
}

void cmd_demo_data(const std::string& out_dir, std::size_t utterances,
                   double seconds, std::uint64_t seed) {
  // Two parallel toy voices saying the same "sentences".
  const invvc::synth::VoiceParams src_voice{
      110.0, {620.0, 1150.0, 2500.0}, {80.0, 100.0, 160.0}};
  const invvc::synth::VoiceParams tgt_voice{
      185.0, {800.0, 1350.0, 2800.0}, {95.0, 120.0, 180.0}};
  const fs::path src_dir = fs::path(out_dir) / "src";
  const fs::path tgt_dir = fs::path(out_dir) / "tgt";
  fs::create_directories(src_dir);
  fs::create_directories(tgt_dir);
  std::ofstream pairs(fs::path(out_dir) / "pairs.txt");
  for (std::size_t u = 0; u < utterances; ++u) {
    char name[16];
    std::snprintf(name, sizeof name, "utt%03zu", u);
    const std::uint64_t content = invvc::mix_seed(seed, u + 1);
    invvc::audio::write_wav(
        src_dir / (std::string(name) + ".wav"),
        invvc::synth::synth_utterance(src_voice, seconds, content));
    invvc::audio::write_wav(
        tgt_dir / (std::string(name) + ".wav"),
        invvc::synth::synth_utterance(tgt_voice, seconds, content));
    pairs << name << "\t" << name << "\n";
  }
  std::cout << "wrote " << utterances << " parallel utterances under "
            << out_dir << "\n";
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"invvc: invertible voice conversion pipeline"};
  app.require_subcommand(1);

  auto* print_config = app.add_subcommand(
      "print-config", "Print the full default run configuration as JSON");

  std::string demo_out = "demo_data";
  std::size_t demo_utts = 12;
  double demo_seconds = 1.2;
  std::uint64_t demo_seed = 1;
  auto* demo = app.add_subcommand("demo-data",
                                  "Generate a synthetic parallel toy corpus");
  demo->add_option("--out", demo_out, "output directory");
  demo->add_option("--utterances", demo_utts, "utterances per voice");
  demo->add_option("--seconds", demo_seconds, "utterance length in seconds");
  demo->add_option("--seed", demo_seed, "corpus seed");

  std::string ex_in, ex_out, ex_cfg;
  auto* extract =
      app.add_subcommand("extract", "WAV directory -> mel feature containers");
  extract->add_option("--in", ex_in, "directory of 16 kHz mono PCM16 WAVs")
      ->required();
  extract->add_option("--out", ex_out, "output feature directory")->required();
  extract->add_option("--config", ex_cfg, "run config JSON");

  std::string al_src, al_tgt, al_list, al_out;
  auto* align_cmd = app.add_subcommand(
      "align", "DTW-align parallel feature pairs for training");
  align_cmd->add_option("--src", al_src, "source feature directory")->required();
  align_cmd->add_option("--tgt", al_tgt, "target feature directory")->required();
  align_cmd->add_option("--list", al_list, "pair list (src_id<TAB>tgt_id)")
      ->required();
  align_cmd->add_option("--out", al_out, "output directory")->required();

  std::string tr_data, tr_cfg, tr_out;
  auto* train_cmd =
      app.add_subcommand("train", "Optimize the stack on aligned pairs");
  train_cmd->add_option("--data", tr_data, "directory of .pair files")
      ->required();
  train_cmd->add_option("--config", tr_cfg, "run config JSON")->required();
  train_cmd->add_option("--out", tr_out, "checkpoint output directory")
      ->required();

  std::string cv_ckpt, cv_in, cv_out, cv_wav, cv_cfg;
  std::size_t cv_gl = 60;
  auto* convert = app.add_subcommand(
      "convert", "Source -> target conversion (forward pass)");
  convert->add_option("--ckpt", cv_ckpt, "checkpoint file")->required();
  convert->add_option("--in", cv_in, "input features (.mel) or .wav")
      ->required();
  convert->add_option("--out", cv_out, "output feature container")->required();
  convert->add_option("--wav", cv_wav, "also render audio via Griffin-Lim");
  convert->add_option("--gl-iterations", cv_gl, "Griffin-Lim iterations");
  convert->add_option("--config", cv_cfg, "run config JSON (for .wav input)");

  std::string iv_ckpt, iv_in, iv_out, iv_wav, iv_cfg;
  std::size_t iv_gl = 60;
  auto* invert = app.add_subcommand(
      "invert", "Converted -> source tracing (inverse pass)");
  invert->add_option("--ckpt", iv_ckpt, "checkpoint file")->required();
  invert->add_option("--in", iv_in, "input features (.mel) or .wav")->required();
  invert->add_option("--out", iv_out, "output feature container")->required();
  invert->add_option("--wav", iv_wav, "also render audio via Griffin-Lim");
  invert->add_option("--gl-iterations", iv_gl, "Griffin-Lim iterations");
  invert->add_option("--config", iv_cfg, "run config JSON (for .wav input)");

  std::string ev_mode, ev_a, ev_b, ev_list, ev_ckpt, ev_in, ev_out;
  std::vector<std::string> ev_sets;
  std::size_t ev_pairs = 100;
  std::uint64_t ev_seed = 1;
  bool ev_embeddings = false;
  auto* eval_cmd = app.add_subcommand("eval", "Objective evaluation reports");
  eval_cmd->add_option("--mode", ev_mode, "msd | similarity | roundtrip")
      ->required();
  eval_cmd->add_option("--a", ev_a, "msd: first feature directory");
  eval_cmd->add_option("--b", ev_b, "msd: second feature directory");
  eval_cmd->add_option("--list", ev_list, "msd: explicit id pair list");
  eval_cmd->add_option("--ckpt", ev_ckpt, "roundtrip: checkpoint");
  eval_cmd->add_option("--in", ev_in, "roundtrip: feature directory");
  eval_cmd->add_option("--set", ev_sets,
                       "similarity: NAME:DIR (within) or NAME:DIRA:DIRB");
  eval_cmd->add_option("--pairs", ev_pairs, "similarity: pairs per set");
  eval_cmd->add_option("--seed", ev_seed, "similarity: sampling seed");
  eval_cmd->add_flag("--embeddings", ev_embeddings,
                     "similarity: read .emb containers instead of .mel");
  eval_cmd->add_option("--out", ev_out, "report CSV path (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (*print_config) {
      std::cout << pipeline::to_json(pipeline::RunConfig{}).dump(2) << "\n";
    } else if (*demo) {
      cmd_demo_data(demo_out, demo_utts, demo_seconds, demo_seed);
    } else if (*extract) {
      const auto cfg = config_or_default(ex_cfg);
      pipeline::run_extract(ex_in, ex_out, cfg.mel, std::cout);
    } else if (*align_cmd) {
      pipeline::run_align(al_src, al_tgt, al_list, al_out, std::cout);
    } else if (*train_cmd) {
      const auto cfg = pipeline::load_run_config(tr_cfg);
      pipeline::run_train(tr_data, cfg, tr_out, std::cout);
    } else if (*convert) {
      const auto cfg = config_or_default(cv_cfg);
      pipeline::ConvertOptions opts;
      opts.wav_out = cv_wav;
      opts.gl_iterations = cv_gl;
      pipeline::run_apply(cv_ckpt, cv_in, cv_out, pipeline::Direction::convert,
                          cfg.mel, opts, std::cout);
    } else if (*invert) {
      const auto cfg = config_or_default(iv_cfg);
      pipeline::ConvertOptions opts;
      opts.wav_out = iv_wav;
      opts.gl_iterations = iv_gl;
      pipeline::run_apply(iv_ckpt, iv_in, iv_out, pipeline::Direction::invert,
                          cfg.mel, opts, std::cout);
    } else if (*eval_cmd) {
      std::string csv;
      if (ev_mode == "msd") {
        if (ev_a.empty() || ev_b.empty())
          throw invvc::UsageError("eval --mode msd needs --a and --b");
        csv = pipeline::run_eval_msd(ev_a, ev_b, ev_list);
      } else if (ev_mode == "roundtrip") {
        if (ev_ckpt.empty() || ev_in.empty())
          throw invvc::UsageError("eval --mode roundtrip needs --ckpt and --in");
        csv = pipeline::run_eval_roundtrip(ev_ckpt, ev_in);
      } else if (ev_mode == "similarity") {
        if (ev_sets.empty())
          throw invvc::UsageError(
              "eval --mode similarity needs at least one --set");
        std::vector<pipeline::SimilaritySetSpec> specs;
        for (const auto& s : ev_sets)
          specs.push_back(pipeline::parse_set_spec(s));
        csv = pipeline::run_eval_similarity(specs, ev_pairs, ev_seed,
                                            ev_embeddings);
      } else {
        throw invvc::UsageError("unknown eval mode \"" + ev_mode + "\"");
      }
      write_text(ev_out, csv);
    }
  } catch (const invvc::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
