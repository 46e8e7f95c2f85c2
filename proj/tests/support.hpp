// Copyright 2026 The Morphix Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include <boost/multiprecision/cpp_bin_float.hpp>

#include "morphix/audio.hpp"
#include "morphix/latent.hpp"

namespace morphix::tu {

/// 50 significant decimal digits for reference evaluations.
using Big = boost::multiprecision::cpp_bin_float_50;

inline std::vector<Big> to_big(const LatentGrid& g) {
  std::vector<Big> v(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) v[i] = Big(g[i]);
  return v;
}

inline Big big_dot(const std::vector<Big>& a, const std::vector<Big>& b) {
  Big s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double max_abs_diff(const LatentGrid& a, const std::vector<Big>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - static_cast<double>(b[i])));
  return m;
}

inline double max_abs_diff(const LatentGrid& a, const LatentGrid& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double max_abs(const LatentGrid& a) {
  double m = 0.0;
  for (double v : a.storage()) m = std::max(m, std::abs(v));
  return m;
}

/// Central differences with the scale-aware step h = 1e-3 (1 + |z_i|).
inline LatentGrid finite_difference(const std::function<double(const LatentGrid&)>& f, const LatentGrid& z,
                                    double rel = 1e-3) {
  LatentGrid g(z.shape());
  LatentGrid zp = z;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double h = rel * (1.0 + std::abs(z[i]));
    zp[i] = z[i] + h;
    const double fp = f(zp);
    zp[i] = z[i] - h;
    const double fm = f(zp);
    zp[i] = z[i];
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

/// Max elementwise error normalized by the largest reference component.
inline double normwise_rel_error(const LatentGrid& got, const LatentGrid& ref) {
  return max_abs_diff(got, ref) / std::max(max_abs(ref), 1e-300);
}

inline std::vector<double> ranks(const std::vector<double>& x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = 0.5 * static_cast<double>(i + j);
    i = j + 1;
  }
  return r;
}

inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  const auto rx = ranks(x), ry = ranks(y);
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / rx.size();
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / ry.size();
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

/// SNR in dB of y against x, maximized over integer lags in [-max_lag, max_lag].
/// `margin` samples at both ends are excluded.
inline double aligned_snr_db(const std::vector<double>& x, const std::vector<double>& y, long max_lag,
                             std::size_t margin) {
  double best = -1e300;
  const long n = static_cast<long>(std::min(x.size(), y.size()));
  for (long lag = -max_lag; lag <= max_lag; ++lag) {
    double sig = 0, err = 0;
    for (long i = static_cast<long>(margin); i < n - static_cast<long>(margin); ++i) {
      const long j = i + lag;
      if (j < 0 || j >= n) continue;
      sig += x[i] * x[i];
      err += (x[i] - y[j]) * (x[i] - y[j]);
    }
    best = std::max(best, 10.0 * std::log10(sig / std::max(err, 1e-300)));
  }
  return best;
}

/// 20 log10(|M| / |M - M'|) over linear STFT magnitudes of x and its reconstruction y.
inline double spectral_snr_db(const Waveform& x, const Waveform& y, const StftConfig& cfg = {}) {
  const auto a = magnitudes(stft(x, cfg)), b = magnitudes(stft(y, cfg));
  const std::size_t n = std::min(a.size(), b.size());
  double num = 0, den = 0;
  for (std::size_t i = 0; i < n; ++i) {
    den += a[i] * a[i];
    num += (a[i] - b[i]) * (a[i] - b[i]);
  }
  return 10.0 * std::log10(den / std::max(num, 1e-300));
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("morphix-test-" + name + "-" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace morphix::tu
