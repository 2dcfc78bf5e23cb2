// Copyright 2026 the invvc authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "invvc/audio.hpp"
#include "invvc/rng.hpp"

// Deterministic vowel-like test signals: harmonic stacks under a formant
// envelope with slow pitch and amplitude contours. Good enough to exercise
// the feature pipeline and make demo output audible; not a speech model.
namespace invvc::synth {

struct VoiceParams {
  double f0 = 120.0;
  std::array<double, 3> formants{700.0, 1200.0, 2600.0};
  std::array<double, 3> bandwidths{90.0, 110.0, 170.0};
};

inline double formant_envelope(const VoiceParams& v, double f) {
  double a = 0.0;
  for (std::size_t i = 0; i < v.formants.size(); ++i) {
    const double d = (f - v.formants[i]) / v.bandwidths[i];
    a += 1.0 / (1.0 + d * d);
  }
  return a;
}

inline audio::Waveform synth_utterance(const VoiceParams& voice,
                                       double seconds, std::uint64_t seed,
                                       std::size_t sample_rate = 16000) {
  Rng rng(mix_seed(seed, 0x5eed));
  const std::size_t n =
      static_cast<std::size_t>(seconds * static_cast<double>(sample_rate));
  const double pi = 3.14159265358979323846;

  // Slow random contours from a handful of control points.
  const std::size_t ctrl = 6;
  std::vector<double> pitch_ctrl(ctrl), amp_ctrl(ctrl);
  for (std::size_t i = 0; i < ctrl; ++i) {
    pitch_ctrl[i] = 1.0 + 0.08 * rng.uniform(-1.0, 1.0);
    amp_ctrl[i] = 0.55 + 0.4 * rng.uniform();
  }
  auto interp = [&](const std::vector<double>& c, double pos01) {
    const double x = pos01 * static_cast<double>(ctrl - 1);
    const std::size_t i = std::min(static_cast<std::size_t>(x), ctrl - 2);
    const double frac = x - static_cast<double>(i);
    const double u = 0.5 - 0.5 * std::cos(pi * frac);
    return c[i] * (1.0 - u) + c[i + 1] * u;
  };

  const std::size_t n_harm = static_cast<std::size_t>(
      std::floor(7000.0 / voice.f0));
  std::vector<double> harm_amp(n_harm);
  for (std::size_t h = 0; h < n_harm; ++h)
    harm_amp[h] = formant_envelope(voice, voice.f0 * static_cast<double>(h + 1)) /
                  (1.0 + 0.15 * static_cast<double>(h));

  audio::Waveform w;
  w.sample_rate = sample_rate;
  w.samples.resize(n);
  double phase = 0.0;
  double peak = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double t01 = static_cast<double>(i) / static_cast<double>(n);
    const double f0 = voice.f0 * interp(pitch_ctrl, t01) *
                      (1.0 + 0.015 * std::sin(2.0 * pi * 4.5 *
                                              static_cast<double>(i) /
                                              static_cast<double>(sample_rate)));
    phase += 2.0 * pi * f0 / static_cast<double>(sample_rate);
    double s = 0.0;
    for (std::size_t h = 0; h < n_harm; ++h)
      s += harm_amp[h] * std::sin(phase * static_cast<double>(h + 1));
    const double fade =
        std::min({1.0, static_cast<double>(i) / 400.0,
                  static_cast<double>(n - 1 - i) / 400.0});
    w.samples[i] = s * interp(amp_ctrl, t01) * fade;
    peak = std::max(peak, std::abs(w.samples[i]));
  }
  if (peak > 0.0)
    for (double& s : w.samples) s *= 0.6 / peak;
  return w;
}

// A small parallel toy corpus: every "speaker" utters the same contours with
// its own voice. Returned per speaker in utterance order.
inline std::vector<audio::Waveform>
synth_speaker_set(const VoiceParams& voice, std::size_t utterances,
                  double seconds, std::uint64_t corpus_seed) {
  std::vector<audio::Waveform> out;
  out.reserve(utterances);
  for (std::size_t u = 0; u < utterances; ++u)
    out.push_back(
        synth_utterance(voice, seconds, mix_seed(corpus_seed, u + 1)));
  return out;
}

} // namespace invvc::synth
