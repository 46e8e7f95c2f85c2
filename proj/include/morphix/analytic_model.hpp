// Copyright 2026 The Morphix Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <memory>

#include "morphix/score_model.hpp"

namespace morphix {

/// Exact noise predictor for data drawn from N(mu, s^2 I):
///   eps*(x_t, t) = sqrt(1 - ab_t) (x_t - sqrt(ab_t) mu) / (ab_t s^2 + 1 - ab_t).
/// Its only tap (layer 1) is the latent itself, so the VJP is the identity.
class AnalyticGaussianModel final : public ScoreModel {
 public:
  static constexpr std::size_t kTapLayer = 1;

  AnalyticGaussianModel(LatentGrid mean, double variance, NoiseSchedule schedule)
      : mean_(std::move(mean)), variance_(variance), schedule_(std::move(schedule)) {
    require(variance_ >= 0.0, ErrorKind::invalid_argument, "variance must be >= 0");
  }

  const LatentGrid& mean() const { return mean_; }
  double variance() const { return variance_; }
  const NoiseSchedule& schedule() const { return schedule_; }

  PredictionKind kind() const override { return PredictionKind::epsilon; }
  std::vector<std::size_t> tap_layers() const override { return {kTapLayer}; }
  GridShape tap_shape(std::size_t, const GridShape& latent) const override { return latent; }
  std::optional<std::size_t> schedule_steps() const override { return schedule_.steps(); }

  Prediction predict(const LatentGrid& z, std::size_t t, const Condition&, const std::vector<std::size_t>& want_taps,
                     AttentionControl* = nullptr) const override {
    mean_.check_compatible(z, "analytic predict");
    check_taps(want_taps);
    Prediction p{LatentGrid(z.shape()), {}};
    const double ab = schedule_.alpha_bar(t);
    const double denom = ab * variance_ + 1.0 - ab;
    if (ab < 1.0 && denom > 0.0) {
      const double gain = std::sqrt(1.0 - ab) / denom, shift = std::sqrt(ab);
      for (std::size_t i = 0; i < z.size(); ++i) p.value[i] = gain * (z[i] - shift * mean_[i]);
    }
    for (auto l : want_taps) p.taps.emplace(l, z);
    return p;
  }

  LatentGrid vjp(const LatentGrid& z, std::size_t, const Condition&, const FeatureTaps& cotangents,
                 AttentionControl* = nullptr) const override {
    LatentGrid g(z.shape());
    for (const auto& [layer, ct] : cotangents) {
      require(declares_tap(layer), ErrorKind::invalid_argument, "undeclared tap layer in cotangents");
      g += ct;
    }
    return g;
  }

 private:
  LatentGrid mean_;
  double variance_;
  NoiseSchedule schedule_;
};

}  // namespace morphix
