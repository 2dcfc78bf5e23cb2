// Copyright 2026 the invvc authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "invvc/error.hpp"
#include "invvc/linalg.hpp"
#include "invvc/tensor.hpp"

namespace invvc::audio {

struct MelConfig {
  std::size_t sample_rate = 16000;
  std::size_t win_length = 400; // 25 ms
  std::size_t hop = 200;        // 12.5 ms
  std::size_t fft_size = 512;
  std::size_t n_mels = 80;
  double fmin = 0.0;
  double fmax = 8000.0;
  double log_floor = 1e-5;

  void validate() const {
    if (win_length > fft_size)
      throw UsageError("mel config: win_length must be <= fft_size");
    if (fmax > static_cast<double>(sample_rate) / 2.0)
      throw UsageError("mel config: fmax must be <= sample_rate/2");
    if (n_mels < 1) throw UsageError("mel config: n_mels must be >= 1");
    if (hop == 0 || win_length == 0) throw UsageError("mel config: zero hop/window");
    if ((fft_size & (fft_size - 1)) != 0)
      throw UsageError("mel config: fft_size must be a power of two");
    if (log_floor <= 0.0) throw UsageError("mel config: log_floor must be > 0");
    if (fmin < 0.0 || fmin >= fmax) throw UsageError("mel config: need 0 <= fmin < fmax");
  }

  std::size_t bins() const { return fft_size / 2 + 1; }
  std::size_t frame_count(std::size_t n_samples) const {
    return 1 + (n_samples - win_length) / hop;
  }
};

struct Waveform {
  std::vector<double> samples;
  std::size_t sample_rate = 16000;
};

// T x n_mels matrix of natural-log mel energies. Stored as float32 to match
// the on-disk tensor-table format.
struct MelSpectrogram {
  Tensor<float> frames;

  std::size_t length() const { return frames.rows(); }
  std::size_t channels() const { return frames.cols(); }
};

// --------------------------------------------------------------------------
// WAV I/O (RIFF, PCM 16-bit little-endian, mono)
// --------------------------------------------------------------------------

namespace detail {

inline std::uint32_t read_u32le(const unsigned char* p) {
  return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 |
         std::uint32_t(p[2]) << 16 | std::uint32_t(p[3]) << 24;
}
inline std::uint16_t read_u16le(const unsigned char* p) {
  return std::uint16_t(p[0]) | std::uint16_t(p[1]) << 8;
}
inline void put_u32le(std::string& out, std::uint32_t v) {
  out.push_back(char(v & 0xff));
  out.push_back(char((v >> 8) & 0xff));
  out.push_back(char((v >> 16) & 0xff));
  out.push_back(char((v >> 24) & 0xff));
}
inline void put_u16le(std::string& out, std::uint16_t v) {
  out.push_back(char(v & 0xff));
  out.push_back(char((v >> 8) & 0xff));
}

} // namespace detail

inline Waveform read_wav(const std::filesystem::path& path,
                         std::size_t expected_rate = 16000) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open WAV file: " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  const std::string name = path.string();
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
    throw FormatError("malformed WAV header in " + name);

  bool have_fmt = false;
  std::uint16_t format_tag = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const char* id = reinterpret_cast<const char*>(bytes.data() + pos);
    const std::uint32_t sz = detail::read_u32le(bytes.data() + pos + 4);
    const std::size_t body = pos + 8;
    if (std::memcmp(id, "fmt ", 4) == 0) {
      if (sz < 16 || body + 16 > bytes.size())
        throw FormatError("malformed WAV fmt chunk in " + name);
      format_tag = detail::read_u16le(bytes.data() + body);
      channels = detail::read_u16le(bytes.data() + body + 2);
      rate = detail::read_u32le(bytes.data() + body + 4);
      bits = detail::read_u16le(bytes.data() + body + 14);
      have_fmt = true;
    } else if (std::memcmp(id, "data", 4) == 0) {
      if (!have_fmt)
        throw FormatError("malformed WAV header in " + name +
                          " (data before fmt)");
      if (format_tag != 1)
        throw FormatError("unsupported WAV encoding in " + name +
                          " (expected PCM, got format tag " +
                          std::to_string(format_tag) + ")");
      if (channels != 1)
        throw FormatError("unsupported WAV channel count in " + name +
                          " (expected mono, got " + std::to_string(channels) +
                          ")");
      if (rate != expected_rate)
        throw FormatError("unsupported WAV sample rate in " + name +
                          " (expected " + std::to_string(expected_rate) +
                          " Hz, got " + std::to_string(rate) + " Hz)");
      if (bits != 16)
        throw FormatError("unsupported WAV bit depth in " + name +
                          " (expected 16, got " + std::to_string(bits) + ")");
      if (body + sz > bytes.size())
        throw FormatError("truncated WAV data chunk in " + name);
      Waveform w;
      w.sample_rate = rate;
      const std::size_t n = sz / 2;
      w.samples.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        const std::int16_t s = static_cast<std::int16_t>(
            detail::read_u16le(bytes.data() + body + 2 * i));
        w.samples[i] = static_cast<double>(s) / 32768.0;
      }
      return w;
    }
    pos = body + sz + (sz & 1); // chunks are word-aligned
  }
  throw FormatError("malformed WAV header in " + name + " (no data chunk)");
}

inline void write_wav(const std::filesystem::path& path, const Waveform& w) {
  std::string out;
  const std::uint32_t data_bytes =
      static_cast<std::uint32_t>(w.samples.size() * 2);
  out.reserve(44 + data_bytes);
  out += "RIFF";
  detail::put_u32le(out, 36 + data_bytes);
  out += "WAVEfmt ";
  detail::put_u32le(out, 16);
  detail::put_u16le(out, 1); // PCM
  detail::put_u16le(out, 1); // mono
  detail::put_u32le(out, static_cast<std::uint32_t>(w.sample_rate));
  detail::put_u32le(out, static_cast<std::uint32_t>(w.sample_rate * 2));
  detail::put_u16le(out, 2);
  detail::put_u16le(out, 16);
  out += "data";
  detail::put_u32le(out, data_bytes);
  for (double s : w.samples) {
    const double clipped = std::clamp(s, -1.0, 1.0);
    const auto q = static_cast<std::int16_t>(std::lround(clipped * 32767.0));
    detail::put_u16le(out, static_cast<std::uint16_t>(q));
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write WAV file: " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("failed writing WAV file: " + path.string());
}

// --------------------------------------------------------------------------
// FFT / STFT
// --------------------------------------------------------------------------

namespace detail {

// In-place iterative radix-2 FFT. Size must be a power of two.
inline void fft(std::vector<std::complex<double>>& a, bool inverse) {
  const std::size_t n = a.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  const double pi = 3.14159265358979323846;
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = 2.0 * pi / static_cast<double>(len) * (inverse ? 1 : -1);
    const std::complex<double> wlen(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (std::size_t k = 0; k < len / 2; ++k) {
        const std::complex<double> u = a[i + k];
        const std::complex<double> v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
  if (inverse)
    for (auto& x : a) x /= static_cast<double>(n);
}

// Periodic Hann window; with hop == win/2 it satisfies constant overlap-add.
inline std::vector<double> hann_window(std::size_t n) {
  std::vector<double> w(n);
  const double pi = 3.14159265358979323846;
  for (std::size_t i = 0; i < n; ++i)
    w[i] = 0.5 * (1.0 - std::cos(2.0 * pi * static_cast<double>(i) /
                                 static_cast<double>(n)));
  return w;
}

} // namespace detail

// Complex STFT, frames at hop intervals; rows are frames, cols are bins
// 0..fft/2.
inline std::vector<std::vector<std::complex<double>>>
stft_complex(const std::vector<double>& samples, const MelConfig& cfg) {
  cfg.validate();
  if (samples.size() < cfg.win_length)
    throw FormatError("signal shorter than one analysis window (" +
                      std::to_string(samples.size()) + " < " +
                      std::to_string(cfg.win_length) + " samples)");
  const std::size_t frames = cfg.frame_count(samples.size());
  const std::vector<double> window = detail::hann_window(cfg.win_length);
  std::vector<std::vector<std::complex<double>>> out(frames);
  std::vector<std::complex<double>> buf(cfg.fft_size);
  for (std::size_t t = 0; t < frames; ++t) {
    std::fill(buf.begin(), buf.end(), std::complex<double>(0.0, 0.0));
    const std::size_t off = t * cfg.hop;
    for (std::size_t i = 0; i < cfg.win_length; ++i)
      buf[i] = samples[off + i] * window[i];
    detail::fft(buf, false);
    out[t].assign(buf.begin(), buf.begin() + static_cast<long>(cfg.bins()));
  }
  return out;
}

inline Tensor<double> stft_magnitude(const Waveform& w, const MelConfig& cfg) {
  const auto spec = stft_complex(w.samples, cfg);
  Tensor<double> mag({spec.size(), cfg.bins()});
  for (std::size_t t = 0; t < spec.size(); ++t)
    for (std::size_t k = 0; k < cfg.bins(); ++k)
      mag(t, k) = std::abs(spec[t][k]);
  return mag;
}

// Least-squares inverse STFT: windowed overlap-add normalized by the summed
// squared window.
inline std::vector<double>
istft(const std::vector<std::vector<std::complex<double>>>& spec,
      const MelConfig& cfg) {
  const std::size_t frames = spec.size();
  const std::size_t n = (frames - 1) * cfg.hop + cfg.win_length;
  const std::vector<double> window = detail::hann_window(cfg.win_length);
  std::vector<double> num(n, 0.0), den(n, 0.0);
  std::vector<std::complex<double>> buf(cfg.fft_size);
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t k = 0; k < cfg.bins(); ++k) buf[k] = spec[t][k];
    for (std::size_t k = cfg.bins(); k < cfg.fft_size; ++k)
      buf[k] = std::conj(spec[t][cfg.fft_size - k]);
    detail::fft(buf, true);
    const std::size_t off = t * cfg.hop;
    for (std::size_t i = 0; i < cfg.win_length; ++i) {
      num[off + i] += window[i] * buf[i].real();
      den[off + i] += window[i] * window[i];
    }
  }
  // Samples with near-zero window coverage (the outermost edge of the first
  // and last frame) are ill-determined; dividing there turns phase
  // inconsistencies into huge spikes. Interior coverage is >= 0.5 for the
  // 50%-overlap Hann pair, so an absolute cutoff only touches true edges.
  for (std::size_t i = 0; i < n; ++i)
    num[i] = den[i] > 1e-2 ? num[i] / den[i] : 0.0;
  return num;
}

// --------------------------------------------------------------------------
// Mel filterbank and mel spectrogram
// --------------------------------------------------------------------------

inline double hz_to_mel(double f) {
  return 2595.0 * std::log10(1.0 + f / 700.0);
}
inline double mel_to_hz(double m) {
  return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0);
}

// Triangular filters with centers equally spaced on the HTK mel scale.
// Rows: n_mels, cols: fft/2+1.
inline Tensor<double> mel_filterbank(const MelConfig& cfg) {
  cfg.validate();
  const std::size_t bins = cfg.bins();
  const double mel_lo = hz_to_mel(cfg.fmin);
  const double mel_hi = hz_to_mel(cfg.fmax);
  std::vector<double> edges(cfg.n_mels + 2);
  for (std::size_t i = 0; i < edges.size(); ++i)
    edges[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * static_cast<double>(i) /
                                      static_cast<double>(cfg.n_mels + 1));
  Tensor<double> fb({cfg.n_mels, bins});
  for (std::size_t m = 0; m < cfg.n_mels; ++m) {
    const double left = edges[m], center = edges[m + 1], right = edges[m + 2];
    bool any = false;
    for (std::size_t k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) *
                       static_cast<double>(cfg.sample_rate) /
                       static_cast<double>(cfg.fft_size);
      double wgt = 0.0;
      if (f > left && f < right)
        wgt = f <= center ? (f - left) / (center - left)
                          : (right - f) / (right - center);
      fb(m, k) = std::max(0.0, wgt);
      any = any || fb(m, k) > 0.0;
    }
    if (!any)
      throw FormatError("mel filter " + std::to_string(m) +
                        " is empty: n_mels too large for the FFT resolution");
  }
  return fb;
}

inline MelSpectrogram mel_spectrogram(const Waveform& w, const MelConfig& cfg) {
  const Tensor<double> mag = stft_magnitude(w, cfg);
  const Tensor<double> fb = mel_filterbank(cfg);
  const std::size_t frames = mag.rows(), bins = mag.cols();
  Tensor<float> out({frames, cfg.n_mels});
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t m = 0; m < cfg.n_mels; ++m) {
      double acc = 0.0;
      for (std::size_t k = 0; k < bins; ++k)
        acc += fb(m, k) * mag(t, k) * mag(t, k);
      out(t, m) =
          static_cast<float>(std::log(std::max(acc, cfg.log_floor)));
    }
  return MelSpectrogram{std::move(out)};
}

// --------------------------------------------------------------------------
// Griffin-Lim inversion (vocoder-free approximate mel -> waveform)
// --------------------------------------------------------------------------

// Minimum-norm mel -> linear power map: M^T (M M^T)^{-1}, negatives clipped
// by the caller.
inline Tensor<double> mel_pseudo_inverse(const Tensor<double>& fb) {
  const std::size_t m = fb.rows(), k = fb.cols();
  Tensor<double> gram({m, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t x = 0; x < k; ++x) s += fb(i, x) * fb(j, x);
      gram(i, j) = s;
    }
  const Tensor<double> gram_inv = linalg::invert(gram);
  Tensor<double> pinv({k, m});
  for (std::size_t x = 0; x < k; ++x)
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < m; ++i) s += fb(i, x) * gram_inv(i, j);
      pinv(x, j) = s;
    }
  return pinv;
}

// Iterative phase recovery against the target magnitudes. `objective_out`,
// when given, receives the per-iteration consistency error
// ||STFT(ISTFT(S)) - S||_F / ||mag||_F, which is non-increasing.
inline Waveform griffin_lim_invert(const MelSpectrogram& mel,
                                   const MelConfig& cfg,
                                   std::size_t iterations,
                                   std::vector<double>* objective_out = nullptr) {
  cfg.validate();
  if (iterations < 1) throw UsageError("griffin_lim_invert needs iterations >= 1");
  const std::size_t frames = mel.length();
  const std::size_t bins = cfg.bins();
  const Tensor<double> fb = mel_filterbank(cfg);
  const Tensor<double> pinv = mel_pseudo_inverse(fb);

  // mel log energies -> linear magnitude targets; cells at the log floor are
  // clamped noise, so the floor power is subtracted before inverting
  Tensor<double> target({frames, bins});
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t k = 0; k < bins; ++k) {
      double p = 0.0;
      for (std::size_t m = 0; m < cfg.n_mels; ++m)
        p += pinv(k, m) *
             std::max(std::exp(static_cast<double>(mel.frames(t, m))) -
                          cfg.log_floor,
                      0.0);
      target(t, k) = std::sqrt(std::max(0.0, p));
    }

  double target_norm = 0.0;
  for (std::size_t i = 0; i < target.numel(); ++i)
    target_norm += target[i] * target[i];
  target_norm = std::sqrt(target_norm);

  // zero initial phase keeps the whole inversion deterministic
  std::vector<std::vector<std::complex<double>>> s(frames);
  for (std::size_t t = 0; t < frames; ++t) {
    s[t].resize(bins);
    for (std::size_t k = 0; k < bins; ++k) s[t][k] = target(t, k);
  }

  std::vector<double> x;
  for (std::size_t it = 0; it < iterations; ++it) {
    x = istft(s, cfg);
    const auto c = stft_complex(x, cfg);
    if (objective_out) {
      double err = 0.0;
      for (std::size_t t = 0; t < frames; ++t)
        for (std::size_t k = 0; k < bins; ++k)
          err += std::norm(c[t][k] - s[t][k]);
      objective_out->push_back(std::sqrt(err) / (target_norm + 1e-30));
    }
    for (std::size_t t = 0; t < frames; ++t)
      for (std::size_t k = 0; k < bins; ++k) {
        const double a = std::abs(c[t][k]);
        s[t][k] = a > 0.0 ? c[t][k] / a * target(t, k)
                          : std::complex<double>(target(t, k), 0.0);
      }
  }
  x = istft(s, cfg);

  double peak = 0.0;
  for (double v : x) peak = std::max(peak, std::abs(v));
  if (peak > 1.0)
    for (double& v : x) v /= peak;
  Waveform w;
  w.sample_rate = cfg.sample_rate;
  w.samples = std::move(x);
  return w;
}

} // namespace invvc::audio
