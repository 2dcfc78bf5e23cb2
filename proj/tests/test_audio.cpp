// Copyright 2026 the invvc authors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <complex>
#include <filesystem>
#include <fstream>

#include "invvc/audio.hpp"
#include "invvc/synth.hpp"

namespace audio = invvc::audio;
using invvc::FormatError;
using invvc::Tensor;

namespace {

namespace fs = std::filesystem;

fs::path temp_dir() {
  auto d = fs::temp_directory_path() / "invvc_audio_test";
  fs::create_directories(d);
  return d;
}

// Raw WAV bytes with adjustable header fields, for error-path tests.
std::string wav_bytes(const std::vector<std::int16_t>& samples,
                      std::uint32_t rate = 16000, std::uint16_t channels = 1,
                      std::uint16_t bits = 16, std::uint16_t format = 1) {
  std::string out;
  auto u32 = [&](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
  };
  auto u16 = [&](std::uint16_t v) {
    for (int i = 0; i < 2; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
  };
  const std::uint32_t nbytes = std::uint32_t(samples.size() * 2);
  out += "RIFF";
  u32(36 + nbytes);
  out += "WAVEfmt ";
  u32(16);
  u16(format);
  u16(channels);
  u32(rate);
  u32(rate * channels * bits / 8);
  u16(std::uint16_t(channels * bits / 8));
  u16(bits);
  out += "data";
  u32(nbytes);
  for (std::int16_t s : samples) u16(std::uint16_t(s));
  return out;
}

fs::path write_bytes(const std::string& name, const std::string& bytes) {
  const fs::path p = temp_dir() / name;
  std::ofstream f(p, std::ios::binary);
  f.write(bytes.data(), std::streamsize(bytes.size()));
  return p;
}

} // namespace

TEST_CASE("read_wav normalizes PCM16 by 1/32768") {
  const auto p =
      write_bytes("probe.wav", wav_bytes({0, 32767, -32768, 16384}));
  const auto w = audio::read_wav(p);
  REQUIRE(w.samples.size() == 4);
  CHECK(w.samples[0] == 0.0);
  CHECK(w.samples[1] == 0.999969482421875); // 32767/32768
  CHECK(w.samples[2] == -1.0);
  CHECK(w.samples[3] == 0.5);
}

TEST_CASE("read_wav rejects unsupported files with distinct messages") {
  using Catch::Matchers::ContainsSubstring;
  using Catch::Matchers::MessageMatches;
  auto p441 = write_bytes("r441.wav", wav_bytes({0, 0}, 44100));
  CHECK_THROWS_MATCHES(audio::read_wav(p441), FormatError,
                       MessageMatches(ContainsSubstring("sample rate")));
  auto pst = write_bytes("stereo.wav", wav_bytes({0, 0}, 16000, 2));
  CHECK_THROWS_MATCHES(audio::read_wav(pst), FormatError,
                       MessageMatches(ContainsSubstring("channel count")));
  auto p8 = write_bytes("8bit.wav", wav_bytes({0, 0}, 16000, 1, 8));
  CHECK_THROWS_MATCHES(audio::read_wav(p8), FormatError,
                       MessageMatches(ContainsSubstring("bit depth")));
  auto pf = write_bytes("float.wav", wav_bytes({0, 0}, 16000, 1, 16, 3));
  CHECK_THROWS_MATCHES(audio::read_wav(pf), FormatError,
                       MessageMatches(ContainsSubstring("encoding")));
  auto bad = write_bytes("bad.wav", "NOTAWAVEFILE");
  CHECK_THROWS_MATCHES(audio::read_wav(bad), FormatError,
                       MessageMatches(ContainsSubstring("malformed")));
  CHECK_THROWS_AS(audio::read_wav(temp_dir() / "missing.wav"), invvc::IoError);
}

TEST_CASE("wav round trip preserves quantized samples") {
  invvc::Rng rng(99);
  audio::Waveform w;
  w.samples.resize(1000);
  for (auto& s : w.samples) s = rng.uniform(-0.9, 0.9);
  const auto p = temp_dir() / "rt.wav";
  audio::write_wav(p, w);
  const auto r = audio::read_wav(p);
  REQUIRE(r.samples.size() == w.samples.size());
  // write quantizes by 32767 with rounding, read scales by 1/32768
  for (std::size_t i = 0; i < w.samples.size(); ++i)
    CHECK(std::abs(r.samples[i] - w.samples[i]) < 1.5 / 32768.0);
}

TEST_CASE("stft frame count formula") {
  audio::MelConfig cfg;
  CHECK(cfg.frame_count(4000) == 19);
  CHECK(cfg.frame_count(16000) == 79);
  CHECK(cfg.frame_count(400) == 1);

  audio::Waveform w;
  w.samples.assign(4000, 0.0);
  CHECK(audio::stft_magnitude(w, cfg).rows() == 19);

  w.samples.assign(399, 0.0);
  CHECK_THROWS_AS(audio::stft_magnitude(w, cfg), FormatError);
}

TEST_CASE("stft of silence is zero") {
  audio::MelConfig cfg;
  audio::Waveform w;
  w.samples.assign(2000, 0.0);
  const auto mag = audio::stft_magnitude(w, cfg);
  for (std::size_t i = 0; i < mag.numel(); ++i) CHECK(mag[i] == 0.0);
}

TEST_CASE("stft peaks at the bin of an on-grid cosine and matches a naive DFT") {
  audio::MelConfig cfg;
  const std::size_t k_true = 32; // 32 * 16000/512 = 1000 Hz
  const double freq = static_cast<double>(k_true) * 16000.0 / 512.0;
  audio::Waveform w;
  w.samples.resize(3200);
  const double pi = 3.14159265358979323846;
  for (std::size_t i = 0; i < w.samples.size(); ++i)
    w.samples[i] = std::cos(2.0 * pi * freq * double(i) / 16000.0);
  const auto mag = audio::stft_magnitude(w, cfg);
  for (std::size_t t = 0; t < mag.rows(); ++t) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < mag.cols(); ++k)
      if (mag(t, k) > mag(t, best)) best = k;
    CHECK(best == k_true);
  }

  // Naive DFT oracle on frame 0 (independent of the fft routine).
  std::vector<double> window(cfg.win_length);
  for (std::size_t i = 0; i < cfg.win_length; ++i)
    window[i] = 0.5 * (1.0 - std::cos(2.0 * pi * double(i) / double(cfg.win_length)));
  for (std::size_t k = 0; k < cfg.bins(); k += 16) {
    std::complex<double> acc(0.0, 0.0);
    for (std::size_t nn = 0; nn < cfg.fft_size; ++nn) {
      const double x = nn < cfg.win_length ? w.samples[nn] * window[nn] : 0.0;
      const double ang = -2.0 * pi * double(k) * double(nn) / double(cfg.fft_size);
      acc += x * std::complex<double>(std::cos(ang), std::sin(ang));
    }
    CHECK(mag(0, k) == Catch::Approx(std::abs(acc)).margin(1e-9));
  }
}

TEST_CASE("mel scale and filterbank") {
  CHECK(audio::hz_to_mel(700.0) ==
        Catch::Approx(2595.0 * std::log10(2.0)).epsilon(1e-14));
  CHECK(audio::mel_to_hz(audio::hz_to_mel(1234.5)) ==
        Catch::Approx(1234.5).epsilon(1e-10));

  audio::MelConfig cfg;
  const auto fb = audio::mel_filterbank(cfg);
  REQUIRE(fb.rows() == 80);
  REQUIRE(fb.cols() == 257);
  for (std::size_t m = 0; m < fb.rows(); ++m) {
    double row_sum = 0.0;
    for (std::size_t k = 0; k < fb.cols(); ++k) {
      CHECK(fb(m, k) >= 0.0);
      row_sum += fb(m, k);
    }
    CHECK(row_sum > 0.0);
  }

  audio::MelConfig too_many = cfg;
  too_many.n_mels = 400;
  CHECK_THROWS_AS(audio::mel_filterbank(too_many), FormatError);
}

TEST_CASE("mel spectrogram of silence sits at the log floor") {
  audio::MelConfig cfg;
  audio::Waveform w;
  w.samples.assign(16000, 0.0);
  const auto mel = audio::mel_spectrogram(w, cfg);
  CHECK(mel.length() == 79);
  CHECK(mel.channels() == 80);
  const float floor_ln = std::log(1e-5f);
  for (std::size_t i = 0; i < mel.frames.numel(); ++i)
    CHECK(mel.frames[i] == Catch::Approx(floor_ln).epsilon(1e-6));
}

TEST_CASE("mel values respect the floor and stay finite") {
  audio::MelConfig cfg;
  const auto w = invvc::synth::synth_utterance({}, 0.5, 7);
  const auto mel = audio::mel_spectrogram(w, cfg);
  CHECK(mel.frames.all_finite());
  for (std::size_t i = 0; i < mel.frames.numel(); ++i)
    CHECK(mel.frames[i] >= std::log(static_cast<float>(cfg.log_floor)) - 1e-6f);
}

TEST_CASE("shifting input by one hop shifts the output by one frame") {
  audio::MelConfig cfg;
  const auto w = invvc::synth::synth_utterance({}, 0.5, 21);
  audio::Waveform shifted;
  shifted.sample_rate = w.sample_rate;
  shifted.samples.assign(w.samples.begin() + long(cfg.hop), w.samples.end());
  const auto a = audio::mel_spectrogram(w, cfg);
  const auto b = audio::mel_spectrogram(shifted, cfg);
  REQUIRE(b.length() == a.length() - 1);
  for (std::size_t t = 0; t < b.length(); ++t)
    for (std::size_t m = 0; m < 80; ++m)
      CHECK(a.frames(t + 1, m) == b.frames(t, m)); // bit-exact
}

TEST_CASE("filterbank application is linear in power before the log") {
  audio::MelConfig cfg;
  auto w = invvc::synth::synth_utterance({}, 0.4, 3);
  audio::Waveform loud = w;
  for (auto& s : loud.samples) s *= 0.5; // still above the floor everywhere?
  const auto a = audio::mel_spectrogram(w, cfg);
  const auto b = audio::mel_spectrogram(loud, cfg);
  const double expected = std::log(0.25); // power scales by a^2
  std::size_t checked = 0;
  const float floor_ln = std::log(static_cast<float>(cfg.log_floor));
  for (std::size_t i = 0; i < a.frames.numel(); ++i) {
    if (a.frames[i] > floor_ln + 3.0f && b.frames[i] > floor_ln + 1.0f) {
      CHECK(double(b.frames[i]) - double(a.frames[i]) ==
            Catch::Approx(expected).margin(1e-4));
      ++checked;
    }
  }
  CHECK(checked > 100);
}

TEST_CASE("griffin_lim on an all-floor mel is near silence") {
  audio::MelConfig cfg;
  audio::MelSpectrogram mel{
      Tensor<float>::full({20, 80}, std::log(1e-5f))};
  const auto w = audio::griffin_lim_invert(mel, cfg, 5);
  double peak = 0.0;
  for (double s : w.samples) peak = std::max(peak, std::abs(s));
  CHECK(peak < 1e-3);
}

TEST_CASE("griffin_lim objective is non-increasing") {
  audio::MelConfig cfg;
  const auto w = invvc::synth::synth_utterance({}, 1.0, 5);
  const auto mel = audio::mel_spectrogram(w, cfg);
  std::vector<double> obj;
  audio::griffin_lim_invert(mel, cfg, 30, &obj);
  REQUIRE(obj.size() == 30);
  for (std::size_t i = 1; i < obj.size(); ++i)
    CHECK(obj[i] <= obj[i - 1] * (1.0 + 1e-9) + 1e-12);
}

TEST_CASE("griffin_lim round trip stays within 3 dB mean log-mel error") {
  audio::MelConfig cfg;
  const auto w = invvc::synth::synth_utterance({}, 1.0, 13);
  const auto mel = audio::mel_spectrogram(w, cfg);
  const auto recon = audio::griffin_lim_invert(mel, cfg, 60);
  REQUIRE(recon.samples.size() >= std::size_t(cfg.win_length));
  const auto mel2 = audio::mel_spectrogram(recon, cfg);
  const std::size_t frames = std::min(mel.length(), mel2.length());
  double err_db = 0.0;
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t m = 0; m < 80; ++m)
      err_db += std::abs(double(mel.frames(t, m)) - double(mel2.frames(t, m)));
  err_db *= 10.0 / std::log(10.0) / double(frames * 80);
  INFO("mean abs log-mel error " << err_db << " dB");
  CHECK(err_db < 3.0);
}
