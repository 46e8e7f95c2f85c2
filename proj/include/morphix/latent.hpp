// Copyright 2026 The Morphix Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "morphix/error.hpp"

namespace morphix {

/// Dimensions of a channel x time x frequency grid.
struct GridShape {
  std::size_t channels = 0;
  std::size_t time_len = 0;
  std::size_t freq_len = 0;

  std::size_t size() const { return channels * time_len * freq_len; }
  bool operator==(const GridShape&) const = default;

  std::string str() const {
    return std::to_string(channels) + "x" + std::to_string(time_len) + "x" + std::to_string(freq_len);
  }
};

/// Real-valued C x T' x F' grid, row-major by (channel, time, freq).
///
/// Every sampler, morph and guidance operation works on this type. Values are
/// kept in double precision; file formats narrow to float32 where they say so.
class LatentGrid {
 public:
  LatentGrid() = default;

  explicit LatentGrid(GridShape shape, double fill = 0.0) : shape_(shape), values_(shape.size(), fill) {
    require(shape.size() > 0, ErrorKind::invalid_argument, "latent grid must have nonzero dims");
  }

  LatentGrid(GridShape shape, std::vector<double> values) : shape_(shape), values_(std::move(values)) {
    require(shape.size() > 0, ErrorKind::invalid_argument, "latent grid must have nonzero dims");
    require(values_.size() == shape.size(), ErrorKind::shape_mismatch,
            "value count " + std::to_string(values_.size()) + " does not match shape " + shape.str());
  }

  static LatentGrid random_normal(GridShape shape, std::uint64_t seed, double stddev = 1.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, stddev);
    LatentGrid g(shape);
    for (auto& v : g.values_) v = dist(rng);
    return g;
  }

  const GridShape& shape() const { return shape_; }
  std::size_t channels() const { return shape_.channels; }
  std::size_t time_len() const { return shape_.time_len; }
  std::size_t freq_len() const { return shape_.freq_len; }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  std::vector<double>& storage() { return values_; }
  const std::vector<double>& storage() const { return values_; }

  std::size_t index(std::size_t c, std::size_t t, std::size_t f) const {
    return (c * shape_.time_len + t) * shape_.freq_len + f;
  }
  double& at(std::size_t c, std::size_t t, std::size_t f) { return values_[index(c, t, f)]; }
  double at(std::size_t c, std::size_t t, std::size_t f) const { return values_[index(c, t, f)]; }
  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  bool compatible(const LatentGrid& other) const { return shape_ == other.shape_; }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
  }

  LatentGrid& operator+=(const LatentGrid& o) {
    check_compatible(o, "+=");
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += o.values_[i];
    return *this;
  }
  LatentGrid& operator-=(const LatentGrid& o) {
    check_compatible(o, "-=");
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] -= o.values_[i];
    return *this;
  }
  LatentGrid& operator*=(double s) {
    for (auto& v : values_) v *= s;
    return *this;
  }

  /// this += s * x
  LatentGrid& axpy(double s, const LatentGrid& x) {
    check_compatible(x, "axpy");
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += s * x.values_[i];
    return *this;
  }

  friend LatentGrid operator+(LatentGrid a, const LatentGrid& b) { return a += b; }
  friend LatentGrid operator-(LatentGrid a, const LatentGrid& b) { return a -= b; }
  friend LatentGrid operator*(double s, LatentGrid a) { return a *= s; }
  friend LatentGrid operator*(LatentGrid a, double s) { return a *= s; }
  friend LatentGrid operator-(LatentGrid a) { return a *= -1.0; }

  bool operator==(const LatentGrid&) const = default;

  void check_compatible(const LatentGrid& o, const char* what) const {
    if (!compatible(o)) {
      fail(ErrorKind::shape_mismatch,
           std::string(what) + ": grids " + shape_.str() + " and " + o.shape_.str() + " differ");
    }
  }

 private:
  GridShape shape_;
  std::vector<double> values_;
};

inline double dot(const LatentGrid& a, const LatentGrid& b) {
  a.check_compatible(b, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(const LatentGrid& a) { return std::sqrt(dot(a, a)); }

inline double relative_l2(const LatentGrid& got, const LatentGrid& want) {
  const double denom = norm(want);
  const double diff = norm(got - want);
  return denom > 0.0 ? diff / denom : diff;
}

namespace detail {

// Stable angle between two nonzero vectors: 2*atan2(|a^-b^|, |a^+b^|).
inline double unit_angle(const LatentGrid& a, const LatentGrid& b, double na, double nb) {
  double minus = 0.0, plus = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double ua = a[i] / na, ub = b[i] / nb;
    minus += (ua - ub) * (ua - ub);
    plus += (ua + ub) * (ua + ub);
  }
  return 2.0 * std::atan2(std::sqrt(minus), std::sqrt(plus));
}

}  // namespace detail

inline constexpr double kCollinearEps = 1e-6;

/// Angle between two grids viewed as flat vectors, in [0, pi].
inline double geodesic_distance(const LatentGrid& a, const LatentGrid& b) {
  a.check_compatible(b, "geodesic_distance");
  const double na = norm(a), nb = norm(b);
  require(na > 0.0 && nb > 0.0, ErrorKind::degenerate_geometry, "geodesic distance of zero-norm grid");
  return detail::unit_angle(a, b, na, nb);
}

/// Interpolation weights (w_a, w_b) for spherical interpolation at ratio alpha.
struct SlerpWeights {
  double a = 1.0;
  double b = 0.0;
  double omega = 0.0;
  bool linear = false;
};

inline SlerpWeights slerp_weights(double omega, double alpha) {
  if (omega < kCollinearEps) return {1.0 - alpha, alpha, omega, true};
  const double s = std::sin(omega);
  return {std::sin((1.0 - alpha) * omega) / s, std::sin(alpha * omega) / s, omega, false};
}

inline SlerpWeights slerp_weights(const LatentGrid& za, const LatentGrid& zb, double alpha) {
  za.check_compatible(zb, "slerp");
  require(alpha >= 0.0 && alpha <= 1.0, ErrorKind::invalid_argument,
          "slerp ratio must lie in [0,1], got " + std::to_string(alpha));
  const double na = norm(za), nb = norm(zb);
  require(na > 0.0 && nb > 0.0, ErrorKind::degenerate_geometry, "slerp of zero-norm grid");
  const double omega = detail::unit_angle(za, zb, na, nb);
  require(std::numbers::pi - omega >= kCollinearEps, ErrorKind::degenerate_geometry,
          "slerp endpoints are antipodal");
  return slerp_weights(omega, alpha);
}

/// Spherical linear interpolation over the flattened grids. Falls back to
/// linear interpolation for nearly collinear inputs.
inline LatentGrid slerp(const LatentGrid& za, const LatentGrid& zb, double alpha) {
  const auto w = slerp_weights(za, zb, alpha);
  if (alpha == 0.0) return za;
  if (alpha == 1.0 && w.linear) return zb;
  LatentGrid out(za.shape());
  for (std::size_t i = 0; i < za.size(); ++i) out[i] = w.a * za[i] + w.b * zb[i];
  return out;
}

/// Removes the component of g along z.
inline LatentGrid tangent_project(const LatentGrid& g, const LatentGrid& z) {
  g.check_compatible(z, "tangent_project");
  const double zz = dot(z, z);
  require(zz > 0.0, ErrorKind::degenerate_geometry, "tangent projection onto zero-norm grid");
  LatentGrid out = g;
  out.axpy(-dot(g, z) / zz, z);
  return out;
}

}  // namespace morphix
