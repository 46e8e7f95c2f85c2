// Copyright 2026 The Morphix Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <unsupported/Eigen/FFT>
#include <zlib.h>

#include "morphix/binary_io.hpp"
#include "morphix/error.hpp"
#include "morphix/latent.hpp"
#include "morphix/mask.hpp"

namespace morphix {

struct Waveform {
  std::uint32_t sample_rate = 16000;
  std::vector<double> samples;
};

inline constexpr double kLogFloor = 1e-5;

/// Log-magnitude spectrogram, frames x bins row-major.
struct Spectrogram {
  std::uint32_t frames = 0;
  std::uint32_t bins = 0;
  std::uint32_t hop = 128;
  std::uint32_t n_fft = 512;
  std::uint32_t sample_rate = 16000;
  std::vector<float> values;

  float& at(std::size_t t, std::size_t f) { return values[t * bins + f]; }
  float at(std::size_t t, std::size_t f) const { return values[t * bins + f]; }

  void validate() const {
    require(frames > 0 && bins > 0, ErrorKind::invalid_argument, "spectrogram dims must be positive");
    require(bins == n_fft / 2 + 1, ErrorKind::invalid_argument, "spectrogram bins must equal n_fft/2 + 1");
    require(values.size() == std::size_t{frames} * bins, ErrorKind::shape_mismatch, "spectrogram value count mismatch");
    require(std::all_of(values.begin(), values.end(), [](float v) { return std::isfinite(v); }),
            ErrorKind::invalid_argument, "spectrogram has non-finite values");
  }

  bool same_geometry(const Spectrogram& o) const {
    return frames == o.frames && bins == o.bins && hop == o.hop && n_fft == o.n_fft && sample_rate == o.sample_rate;
  }
  bool operator==(const Spectrogram&) const = default;
};

struct StftConfig {
  std::uint32_t n_fft = 512;
  std::uint32_t hop = 128;

  void validate() const {
    require(n_fft >= 2 && n_fft % 2 == 0, ErrorKind::invalid_argument, "n_fft must be even and >= 2");
    require(hop >= 1 && hop <= n_fft, ErrorKind::invalid_argument, "hop must lie in [1, n_fft]");
  }
};

namespace detail {

inline std::vector<double> hann(std::size_t n) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / n);
  return w;
}

inline std::size_t reflect(long i, long n) {
  if (n == 1) return 0;
  const long period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return static_cast<std::size_t>(i < n ? i : period - i);
}

using ComplexFrames = std::vector<std::vector<std::complex<double>>>;

// Complex STFT with reflect padding of n_fft/2 on both ends.
inline ComplexFrames stft_complex(const std::vector<double>& x, const StftConfig& cfg) {
  const std::size_t n = cfg.n_fft, half = n / 2, bins = half + 1;
  const std::size_t frames = 1 + x.size() / cfg.hop;
  const auto w = hann(n);
  Eigen::FFT<double> fft;
  ComplexFrames out(frames);
  std::vector<double> buf(n);
  std::vector<std::complex<double>> spec;
  for (std::size_t t = 0; t < frames; ++t) {
    const long start = static_cast<long>(t * cfg.hop) - static_cast<long>(half);
    for (std::size_t i = 0; i < n; ++i) buf[i] = w[i] * x[reflect(start + static_cast<long>(i), static_cast<long>(x.size()))];
    fft.fwd(spec, buf);
    out[t].assign(spec.begin(), spec.begin() + static_cast<long>(bins));
  }
  return out;
}

// Weighted overlap-add inverse of stft_complex, trimmed to `length` samples.
inline std::vector<double> istft_complex(const ComplexFrames& X, const StftConfig& cfg, std::size_t length) {
  const std::size_t n = cfg.n_fft, half = n / 2;
  const auto w = hann(n);
  const std::size_t padded = (X.size() - 1) * cfg.hop + n;
  std::vector<double> acc(padded, 0.0), norm(padded, 0.0), frame;
  std::vector<std::complex<double>> full(n);
  Eigen::FFT<double> fft;
  for (std::size_t t = 0; t < X.size(); ++t) {
    for (std::size_t k = 0; k <= half; ++k) full[k] = X[t][k];
    for (std::size_t k = half + 1; k < n; ++k) full[k] = std::conj(X[t][n - k]);
    full[0] = full[0].real();
    full[half] = full[half].real();
    fft.inv(frame, full);
    for (std::size_t i = 0; i < n; ++i) {
      acc[t * cfg.hop + i] += w[i] * frame[i];
      norm[t * cfg.hop + i] += w[i] * w[i];
    }
  }
  std::vector<double> y(length, 0.0);
  for (std::size_t i = 0; i < length && i + half < padded; ++i) {
    const double d = norm[i + half];
    y[i] = d > 1e-10 ? acc[i + half] / d : 0.0;
  }
  return y;
}

}  // namespace detail

/// Hann-windowed, center-padded (reflect) log-magnitude STFT.
inline Spectrogram stft(const Waveform& w, const StftConfig& cfg = {}) {
  cfg.validate();
  require(w.sample_rate > 0, ErrorKind::invalid_argument, "sample rate must be > 0");
  require(w.samples.size() >= cfg.n_fft, ErrorKind::invalid_argument,
          "waveform shorter than n_fft (" + std::to_string(w.samples.size()) + " < " + std::to_string(cfg.n_fft) + ")");
  const auto X = detail::stft_complex(w.samples, cfg);
  Spectrogram s{static_cast<std::uint32_t>(X.size()), cfg.n_fft / 2 + 1, cfg.hop, cfg.n_fft, w.sample_rate, {}};
  s.values.reserve(std::size_t{s.frames} * s.bins);
  for (const auto& row : X)
    for (const auto& c : row) s.values.push_back(static_cast<float>(std::log(std::abs(c) + kLogFloor)));
  return s;
}

/// Linear magnitudes of a log spectrogram.
inline std::vector<double> magnitudes(const Spectrogram& s) {
  std::vector<double> m(s.values.size());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = std::max(0.0, std::exp(static_cast<double>(s.values[i])) - kLogFloor);
  return m;
}

struct GriffinLimConfig {
  std::size_t iters = 32;
  double momentum = 0.99;  // 0 gives the classic algorithm
  std::uint64_t seed = 0;
};

/// Phase reconstruction from magnitudes, starting from seeded random phase.
inline Waveform griffin_lim(const Spectrogram& s, const GriffinLimConfig& cfg = {}) {
  s.validate();
  const StftConfig sc{s.n_fft, s.hop};
  sc.validate();
  const std::size_t length = std::size_t{s.frames - 1} * s.hop;
  require(length >= s.n_fft, ErrorKind::invalid_argument, "spectrogram too short for reconstruction");
  const auto mag = magnitudes(s);
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> u(0.0, 2.0 * std::numbers::pi);
  detail::ComplexFrames X(s.frames, std::vector<std::complex<double>>(s.bins));
  for (std::size_t t = 0; t < s.frames; ++t)
    for (std::size_t f = 0; f < s.bins; ++f) X[t][f] = std::polar(mag[t * s.bins + f], u(rng));
  detail::ComplexFrames prev;
  for (std::size_t it = 0; it < cfg.iters; ++it) {
    const auto y = detail::istft_complex(X, sc, length);
    auto proj = detail::stft_complex(y, sc);
    detail::ComplexFrames accel = proj;
    if (!prev.empty() && cfg.momentum != 0.0) {
      for (std::size_t t = 0; t < s.frames; ++t)
        for (std::size_t f = 0; f < s.bins; ++f) accel[t][f] = proj[t][f] + cfg.momentum * (proj[t][f] - prev[t][f]);
    }
    prev = std::move(proj);
    for (std::size_t t = 0; t < s.frames; ++t)
      for (std::size_t f = 0; f < s.bins; ++f) {
        const double a = std::abs(accel[t][f]);
        const auto ph = a > 1e-16 ? accel[t][f] / a : std::complex<double>(1.0, 0.0);
        X[t][f] = mag[t * s.bins + f] * ph;
      }
  }
  return {s.sample_rate, detail::istft_complex(X, sc, length)};
}

// ---- SPG1 --------------------------------------------------------------------

inline constexpr std::uint32_t kSpgVersion = 1;

inline std::vector<std::uint8_t> serialize(const Spectrogram& s) {
  s.validate();
  io::Writer w;
  w.magic("SPG1");
  w.u32(kSpgVersion);
  w.u32(s.frames);
  w.u32(s.bins);
  w.u32(s.hop);
  w.u32(s.n_fft);
  w.u32(s.sample_rate);
  w.f32s(s.values);
  return w.take();
}

inline Spectrogram deserialize_spectrogram(std::span<const std::uint8_t> bytes) {
  io::Reader r(bytes, "spectrogram");
  r.expect_magic("SPG1");
  const auto v = r.u32();
  require(v == kSpgVersion, ErrorKind::format, "spectrogram version " + std::to_string(v) + " unsupported");
  Spectrogram s;
  s.frames = r.u32();
  s.bins = r.u32();
  s.hop = r.u32();
  s.n_fft = r.u32();
  s.sample_rate = r.u32();
  s.values = r.f32s(std::size_t{s.frames} * s.bins);
  r.expect_end();
  try {
    s.validate();
  } catch (const Error& e) {
    fail(ErrorKind::format, std::string("spectrogram content invalid: ") + e.what());
  }
  return s;
}

inline void save_spectrogram(const std::filesystem::path& p, const Spectrogram& s) { io::write_file_atomic(p, serialize(s)); }
inline Spectrogram load_spectrogram(const std::filesystem::path& p) { return deserialize_spectrogram(io::read_file(p)); }

// ---- latent files ------------------------------------------------------------

inline std::vector<std::uint8_t> serialize(const LatentGrid& z) {
  io::Writer w;
  w.magic("MRXL");
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(z.channels()));
  w.u32(static_cast<std::uint32_t>(z.time_len()));
  w.u32(static_cast<std::uint32_t>(z.freq_len()));
  w.f64s(z.values());
  return w.take();
}

inline LatentGrid deserialize_latent(std::span<const std::uint8_t> bytes) {
  io::Reader r(bytes, "latent");
  r.expect_magic("MRXL");
  const auto v = r.u32();
  require(v == 1, ErrorKind::format, "latent version " + std::to_string(v) + " unsupported");
  GridShape g;
  g.channels = r.u32();
  g.time_len = r.u32();
  g.freq_len = r.u32();
  require(g.size() > 0, ErrorKind::format, "latent has empty shape");
  auto vals = r.f64s(g.size());
  r.expect_end();
  LatentGrid z(g, std::move(vals));
  require(z.all_finite(), ErrorKind::format, "latent has non-finite values");
  return z;
}

inline void save_latent(const std::filesystem::path& p, const LatentGrid& z) { io::write_file_atomic(p, serialize(z)); }
inline LatentGrid load_latent(const std::filesystem::path& p) { return deserialize_latent(io::read_file(p)); }

// ---- WAV (PCM16 mono) --------------------------------------------------------

inline std::vector<std::uint8_t> encode_wav(const Waveform& w) {
  require(w.sample_rate > 0, ErrorKind::invalid_argument, "sample rate must be > 0");
  const auto n = static_cast<std::uint32_t>(w.samples.size());
  io::Writer b;
  b.magic("RIFF");
  b.u32(36 + 2 * n);
  b.magic("WAVEfmt ");
  b.u32(16);
  b.u32(1 | (1u << 16));  // PCM, mono
  b.u32(w.sample_rate);
  b.u32(w.sample_rate * 2);
  b.u32(2 | (16u << 16));  // block align, bits per sample
  b.magic("data");
  b.u32(2 * n);
  std::vector<std::uint8_t> pcm;
  pcm.reserve(2 * n);
  for (double x : w.samples) {
    require(std::isfinite(x), ErrorKind::invalid_argument, "waveform has non-finite samples");
    const long q = std::clamp(std::lround(x * 32768.0), -32768L, 32767L);
    const auto u = static_cast<std::uint16_t>(static_cast<std::int16_t>(q));
    pcm.push_back(static_cast<std::uint8_t>(u & 0xff));
    pcm.push_back(static_cast<std::uint8_t>(u >> 8));
  }
  auto out = b.take();
  out.insert(out.end(), pcm.begin(), pcm.end());
  return out;
}

inline Waveform decode_wav(std::span<const std::uint8_t> bytes) {
  io::Reader r(bytes, "wav");
  r.expect_magic("RIFF");
  r.u32();
  r.expect_magic("WAVE");
  Waveform w;
  bool have_fmt = false;
  for (;;) {
    std::array<char, 4> id{};
    for (auto& c : id) c = static_cast<char>(r.u8());
    const std::uint32_t size = r.u32();
    const std::string tag(id.begin(), id.end());
    if (tag == "fmt ") {
      require(size >= 16, ErrorKind::format, "wav fmt chunk too short");
      const auto fmt_ch = r.u32();
      w.sample_rate = r.u32();
      r.u32();
      const auto align_bits = r.u32();
      require((fmt_ch & 0xffff) == 1, ErrorKind::format, "wav must be PCM");
      require((fmt_ch >> 16) == 1, ErrorKind::format, "wav must be mono");
      require((align_bits >> 16) == 16, ErrorKind::format, "wav must be 16-bit");
      for (std::uint32_t i = 16; i < size; ++i) r.u8();
      have_fmt = true;
    } else if (tag == "data") {
      require(have_fmt, ErrorKind::format, "wav data before fmt");
      require(w.sample_rate > 0, ErrorKind::format, "wav sample rate is zero");
      w.samples.resize(size / 2);
      for (auto& s : w.samples) {
        const std::uint16_t lo = r.u8(), hi = r.u8();
        s = static_cast<std::int16_t>(static_cast<std::uint16_t>(lo | (hi << 8))) / 32768.0;
      }
      return w;
    } else {
      for (std::uint32_t i = 0; i < size + (size & 1); ++i) r.u8();
    }
  }
}

inline void save_wav(const std::filesystem::path& p, const Waveform& w) { io::write_file_atomic(p, encode_wav(w)); }
inline Waveform load_wav(const std::filesystem::path& p) { return decode_wav(io::read_file(p)); }

// ---- PNG rendering -----------------------------------------------------------

namespace detail {

inline std::array<std::uint8_t, 3> viridis(double x) {
  static constexpr std::array<std::array<double, 3>, 9> kStops{{{68, 1, 84},
                                                                {71, 44, 122},
                                                                {59, 81, 139},
                                                                {44, 113, 142},
                                                                {33, 144, 141},
                                                                {39, 173, 129},
                                                                {92, 200, 99},
                                                                {170, 220, 50},
                                                                {253, 231, 37}}};
  x = std::clamp(x, 0.0, 1.0) * (kStops.size() - 1);
  const std::size_t i = std::min<std::size_t>(static_cast<std::size_t>(x), kStops.size() - 2);
  const double u = x - static_cast<double>(i);
  std::array<std::uint8_t, 3> c{};
  for (int k = 0; k < 3; ++k) c[k] = static_cast<std::uint8_t>(std::lround(kStops[i][k] * (1 - u) + kStops[i + 1][k] * u));
  return c;
}

inline void png_chunk(std::vector<std::uint8_t>& out, const char* type, const std::vector<std::uint8_t>& data) {
  const auto n = static_cast<std::uint32_t>(data.size());
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(n >> s));
  const std::size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  const auto crc = static_cast<std::uint32_t>(crc32(0L, out.data() + start, static_cast<uInt>(out.size() - start)));
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(crc >> s));
}

}  // namespace detail

/// RGB PNG: time runs left to right, low frequencies at the bottom. Values
/// are scaled to the spectrogram's own range. Masked cells are blended 50%
/// with white.
inline std::vector<std::uint8_t> render_png(const Spectrogram& s, const TFMask* mask = nullptr) {
  s.validate();
  if (mask) {
    require(mask->time_len() == s.frames && mask->freq_len() == s.bins, ErrorKind::shape_mismatch,
            "overlay mask must match spectrogram dims");
  }
  const auto [lo_it, hi_it] = std::minmax_element(s.values.begin(), s.values.end());
  const double lo = *lo_it, span = std::max(1e-12, static_cast<double>(*hi_it) - lo);
  const std::uint32_t W = s.frames, H = s.bins;
  std::vector<std::uint8_t> raw;
  raw.reserve(std::size_t{H} * (1 + 3 * std::size_t{W}));
  for (std::uint32_t y = 0; y < H; ++y) {
    raw.push_back(0);
    const std::size_t f = H - 1 - y;
    for (std::uint32_t x = 0; x < W; ++x) {
      auto c = detail::viridis((s.at(x, f) - lo) / span);
      if (mask && mask->get(x, f)) {
        for (auto& ch : c) ch = static_cast<std::uint8_t>((ch + 255 + 1) / 2);
      }
      raw.insert(raw.end(), c.begin(), c.end());
    }
  }
  uLongf zlen = compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> z(zlen);
  require(compress2(z.data(), &zlen, raw.data(), static_cast<uLong>(raw.size()), 9) == Z_OK, ErrorKind::compute,
          "png compression failed");
  z.resize(zlen);

  std::vector<std::uint8_t> out{0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  std::vector<std::uint8_t> ihdr;
  for (auto v : {W, H})
    for (int sh = 24; sh >= 0; sh -= 8) ihdr.push_back(static_cast<std::uint8_t>(v >> sh));
  ihdr.insert(ihdr.end(), {8, 2, 0, 0, 0});
  detail::png_chunk(out, "IHDR", ihdr);
  detail::png_chunk(out, "IDAT", z);
  detail::png_chunk(out, "IEND", {});
  return out;
}

// ---- latent bridge -----------------------------------------------------------

inline constexpr std::size_t kBridgeFactor = 4;

/// Spectrogram to latent: frames are pooled in blocks of 4 and each block of
/// 4 adjacent bins becomes 4 channels, so channel k at (i, j) is the mean over
/// frames 4i..4i+3 of bin 4j+k. Dims not divisible by 4 are rejected; see
/// spectrogram_to_latent for the cropping variant.
inline LatentGrid bridge_forward(const Spectrogram& s);

/// Latent to spectrogram values by broadcasting each latent value over its frames.
inline Spectrogram bridge_inverse(const LatentGrid& z, const Spectrogram& geometry) {
  constexpr std::size_t K = kBridgeFactor;
  require(z.channels() == K && z.time_len() * K == geometry.frames && z.freq_len() * K == geometry.bins,
          ErrorKind::shape_mismatch, "latent " + z.shape().str() + " does not match spectrogram geometry");
  Spectrogram s = geometry;
  s.values.assign(std::size_t{s.frames} * s.bins, 0.0f);
  for (std::size_t t = 0; t < s.frames; ++t)
    for (std::size_t f = 0; f < s.bins; ++f) s.at(t, f) = static_cast<float>(z.at(f % K, t / K, f / K));
  return s;
}

/// Largest leading block of the spectrogram whose dims are divisible by 4.
struct BridgeCrop {
  std::uint32_t frames = 0;
  std::uint32_t bins = 0;
};

inline BridgeCrop bridge_crop(const Spectrogram& s) {
  const auto K = static_cast<std::uint32_t>(kBridgeFactor);
  BridgeCrop c{s.frames - s.frames % K, s.bins - s.bins % K};
  require(c.frames > 0 && c.bins > 0, ErrorKind::invalid_argument, "spectrogram too small for the latent bridge");
  return c;
}

/// Latent of the leading 4-divisible block (same pooling rule as bridge_forward).
inline LatentGrid spectrogram_to_latent(const Spectrogram& s) {
  s.validate();
  const auto c = bridge_crop(s);
  constexpr std::size_t K = kBridgeFactor;
  LatentGrid z(GridShape{K, c.frames / K, c.bins / K});
  for (std::size_t i = 0; i < z.time_len(); ++i)
    for (std::size_t j = 0; j < z.freq_len(); ++j)
      for (std::size_t k = 0; k < K; ++k) {
        double acc = 0.0;
        for (std::size_t r = 0; r < K; ++r) acc += s.at(K * i + r, K * j + k);
        z.at(k, i, j) = acc / K;
      }
  return z;
}

inline LatentGrid bridge_forward(const Spectrogram& s) {
  require(s.frames % kBridgeFactor == 0 && s.bins % kBridgeFactor == 0, ErrorKind::invalid_argument,
          "spectrogram dims " + std::to_string(s.frames) + "x" + std::to_string(s.bins) + " not divisible by 4");
  return spectrogram_to_latent(s);
}

/// Applies a latent edit to a spectrogram as a residual: the broadcast change
/// z_edit - z_orig is added to the original values, so cells whose latent did
/// not move keep their full-resolution detail.
inline Spectrogram apply_latent_residual(const Spectrogram& s, const LatentGrid& z_orig, const LatentGrid& z_edit) {
  z_orig.check_compatible(z_edit, "apply_latent_residual");
  const auto c = bridge_crop(s);
  constexpr std::size_t K = kBridgeFactor;
  require(z_orig.channels() == K && z_orig.time_len() * K == c.frames && z_orig.freq_len() * K == c.bins,
          ErrorKind::shape_mismatch, "latent does not match spectrogram");
  Spectrogram out = s;
  for (std::size_t t = 0; t < c.frames; ++t)
    for (std::size_t f = 0; f < c.bins; ++f) {
      const double d = z_edit.at(f % K, t / K, f / K) - z_orig.at(f % K, t / K, f / K);
      out.at(t, f) = static_cast<float>(out.at(t, f) + d);
    }
  return out;
}

/// Mask at latent resolution for a spectrogram-resolution mask (cropped to
/// the bridge block, then downsampled by the 50% rule).
inline TFMask mask_to_latent(const TFMask& m, const Spectrogram& s) {
  require(m.time_len() == s.frames && m.freq_len() == s.bins, ErrorKind::shape_mismatch,
          "mask dims " + std::to_string(m.time_len()) + "x" + std::to_string(m.freq_len()) +
              " do not match spectrogram " + std::to_string(s.frames) + "x" + std::to_string(s.bins));
  const auto c = bridge_crop(s);
  TFMask crop(c.frames, c.bins);
  for (std::size_t t = 0; t < c.frames; ++t)
    for (std::size_t f = 0; f < c.bins; ++f) crop.set(t, f, m.get(t, f));
  return mask_downsample(crop, c.frames / kBridgeFactor, c.bins / kBridgeFactor);
}

}  // namespace morphix
