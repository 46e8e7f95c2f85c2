// Copyright 2026 The Morphix Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "morphix/error.hpp"
#include "morphix/latent.hpp"

namespace morphix {

enum class ScheduleShape { linear, cosine };
enum class PredictionKind : std::uint8_t { epsilon = 0, v = 1 };
enum class TargetKind { epsilon, v, x0 };

inline const char* to_string(ScheduleShape s) { return s == ScheduleShape::linear ? "linear" : "cosine"; }
inline const char* to_string(PredictionKind k) { return k == PredictionKind::epsilon ? "epsilon" : "v"; }

inline ScheduleShape schedule_shape_from_string(const std::string& s) {
  if (s == "linear") return ScheduleShape::linear;
  if (s == "cosine") return ScheduleShape::cosine;
  fail(ErrorKind::invalid_argument, "unknown schedule shape '" + s + "'");
}

/// Cumulative noise schedule indexed by timestep 0..T.
///
/// Index 0 is the clean end (alpha_bar = 1, sigma = 0, phi = 0); indices 1..T
/// follow the usual product alpha_bar_t = prod_{i<=t} (1 - beta_i).
class NoiseSchedule {
 public:
  NoiseSchedule() = default;
  NoiseSchedule(ScheduleShape shape, std::vector<double> alpha_bar) : shape_(shape), alpha_bar_(std::move(alpha_bar)) {
    require(alpha_bar_.size() >= 3, ErrorKind::invalid_argument, "schedule needs at least 2 steps");
    require(alpha_bar_[0] == 1.0, ErrorKind::invalid_argument, "alpha_bar at t=0 must be 1");
    for (std::size_t t = 1; t < alpha_bar_.size(); ++t) {
      require(alpha_bar_[t] > 0.0 && alpha_bar_[t] < alpha_bar_[t - 1], ErrorKind::invalid_argument,
              "alpha_bar must be strictly decreasing in (0,1]");
    }
  }

  std::size_t steps() const { return alpha_bar_.size() - 1; }
  ScheduleShape shape() const { return shape_; }
  const std::vector<double>& alpha_bar_table() const { return alpha_bar_; }

  double alpha_bar(std::size_t t) const {
    check(t);
    return alpha_bar_[t];
  }
  double alpha(std::size_t t) const { return std::sqrt(alpha_bar(t)); }
  double sigma(std::size_t t) const { return std::sqrt(1.0 - alpha_bar(t)); }
  double phi(std::size_t t) const { return std::atan2(sigma(t), alpha(t)); }

  void check(std::size_t t) const {
    require(t < alpha_bar_.size(), ErrorKind::invalid_argument,
            "timestep " + std::to_string(t) + " outside [0," + std::to_string(steps()) + "]");
  }

 private:
  ScheduleShape shape_ = ScheduleShape::linear;
  std::vector<double> alpha_bar_;
};

inline constexpr double kLinearBetaStart = 1e-4;
inline constexpr double kLinearBetaEnd = 2e-2;
inline constexpr double kCosineOffset = 0.008;
inline constexpr double kCosineMaxBeta = 0.999;

inline NoiseSchedule make_schedule(std::size_t steps, ScheduleShape shape) {
  require(steps >= 2, ErrorKind::invalid_argument, "schedule needs at least 2 steps, got " + std::to_string(steps));
  std::vector<double> ab(steps + 1);
  ab[0] = 1.0;
  if (shape == ScheduleShape::linear) {
    for (std::size_t i = 1; i <= steps; ++i) {
      const double beta = kLinearBetaStart + (kLinearBetaEnd - kLinearBetaStart) * static_cast<double>(i - 1) /
                                                 static_cast<double>(steps - 1);
      ab[i] = ab[i - 1] * (1.0 - beta);
    }
  } else {
    auto f = [&](std::size_t t) {
      const double x = (static_cast<double>(t) / static_cast<double>(steps) + kCosineOffset) / (1.0 + kCosineOffset);
      const double c = std::cos(x * std::numbers::pi / 2.0);
      return c * c;
    };
    for (std::size_t i = 1; i <= steps; ++i) {
      const double beta = std::min(1.0 - f(i) / f(i - 1), kCosineMaxBeta);
      ab[i] = ab[i - 1] * (1.0 - beta);
    }
  }
  return NoiseSchedule(shape, std::move(ab));
}

/// Uniform inference ladder t_0 = 0 < t_1 < ... < t_N = T.
inline std::vector<std::size_t> step_ladder(std::size_t num_steps, const NoiseSchedule& s) {
  require(num_steps >= 1 && num_steps <= s.steps(), ErrorKind::invalid_argument,
          "num_inference_steps " + std::to_string(num_steps) + " outside [1," + std::to_string(s.steps()) + "]");
  std::vector<std::size_t> ladder(num_steps + 1);
  for (std::size_t k = 0; k <= num_steps; ++k) {
    ladder[k] = static_cast<std::size_t>(std::llround(static_cast<double>(k) * static_cast<double>(s.steps()) /
                                                      static_cast<double>(num_steps)));
  }
  return ladder;
}

inline LatentGrid q_sample(const LatentGrid& x0, std::size_t t, const LatentGrid& eps, const NoiseSchedule& s) {
  require(t >= 1 && t <= s.steps(), ErrorKind::invalid_argument, "q_sample step out of range");
  x0.check_compatible(eps, "q_sample");
  LatentGrid out = s.alpha(t) * x0;
  out.axpy(s.sigma(t), eps);
  return out;
}

/// Converts a model prediction between the epsilon, v and x0 views, using
/// x_t = cos(phi) x0 + sin(phi) eps and v = cos(phi) eps - sin(phi) x0.
inline LatentGrid convert_prediction(const LatentGrid& pred, PredictionKind from, TargetKind to, const LatentGrid& x_t,
                                     std::size_t t, const NoiseSchedule& s) {
  pred.check_compatible(x_t, "convert_prediction");
  const double phi = s.phi(t);
  const double c = std::cos(phi), sn = std::sin(phi);
  LatentGrid eps(pred.shape()), x0(pred.shape());
  if (from == PredictionKind::epsilon) {
    eps = pred;
    require(s.alpha_bar(t) > 0.0, ErrorKind::invalid_argument, "x0 undefined at alpha_bar = 0");
    for (std::size_t i = 0; i < pred.size(); ++i) x0[i] = (x_t[i] - s.sigma(t) * pred[i]) / s.alpha(t);
  } else {
    for (std::size_t i = 0; i < pred.size(); ++i) {
      eps[i] = sn * x_t[i] + c * pred[i];
      x0[i] = c * x_t[i] - sn * pred[i];
    }
  }
  switch (to) {
    case TargetKind::epsilon: return eps;
    case TargetKind::x0: return x0;
    case TargetKind::v: {
      if (from == PredictionKind::v) return pred;
      LatentGrid v(pred.shape());
      for (std::size_t i = 0; i < pred.size(); ++i) v[i] = c * eps[i] - sn * x0[i];
      return v;
    }
  }
  fail(ErrorKind::invalid_argument, "unknown prediction target");
}

/// Stochasticity scale sigma_t of the generalized DDIM update.
inline double ddim_sigma(std::size_t t, std::size_t t_prev, const NoiseSchedule& s, double eta) {
  const double ab = s.alpha_bar(t), ab_prev = s.alpha_bar(t_prev);
  return eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab)) * std::sqrt(1.0 - ab / ab_prev);
}

/// One DDIM/DDPM update from t to t_prev < t. With eta = 0 the noise grid is
/// ignored and the step is the deterministic probability-flow update.
inline LatentGrid ddim_step(const LatentGrid& x_t, const LatentGrid& pred, PredictionKind kind, std::size_t t,
                            std::size_t t_prev, const NoiseSchedule& s, double eta, const LatentGrid* noise = nullptr) {
  require(t > t_prev, ErrorKind::invalid_argument,
          "ddim_step requires t > t_prev, got " + std::to_string(t) + " -> " + std::to_string(t_prev));
  require(eta >= 0.0, ErrorKind::invalid_argument, "eta must be >= 0");
  x_t.check_compatible(pred, "ddim_step");
  const LatentGrid eps = kind == PredictionKind::epsilon ? pred
                                                         : convert_prediction(pred, kind, TargetKind::epsilon, x_t, t, s);
  const double a = s.alpha(t), sg = s.sigma(t);
  const double a_prev = s.alpha(t_prev);
  const double sig = eta > 0.0 ? ddim_sigma(t, t_prev, s, eta) : 0.0;
  const double dir = std::sqrt(std::max(0.0, 1.0 - s.alpha_bar(t_prev) - sig * sig));
  LatentGrid out(x_t.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x0 = (x_t[i] - sg * eps[i]) / a;
    out[i] = a_prev * x0 + dir * eps[i];
  }
  if (sig > 0.0) {
    require(noise != nullptr, ErrorKind::invalid_argument, "stochastic ddim_step needs a noise grid");
    out.axpy(sig, *noise);
  }
  return out;
}

/// Reversed deterministic update from t to t_next > t with a frozen noise
/// prediction. Equivalent to x_{t+1}/a_{t+1} - x_t/a_t = (s_{t+1}/a_{t+1} - s_t/a_t) eps.
inline LatentGrid ddim_invert_step(const LatentGrid& x_t, const LatentGrid& eps_pred, std::size_t t, std::size_t t_next,
                                   const NoiseSchedule& s) {
  require(t_next > t, ErrorKind::invalid_argument,
          "ddim_invert_step requires t_next > t, got " + std::to_string(t) + " -> " + std::to_string(t_next));
  x_t.check_compatible(eps_pred, "ddim_invert_step");
  const double a = s.alpha(t), a_next = s.alpha(t_next);
  const double k = s.sigma(t_next) / a_next - s.sigma(t) / a;
  LatentGrid out(x_t.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a_next * (x_t[i] / a + k * eps_pred[i]);
  return out;
}

inline LatentGrid cfg_combine(const LatentGrid& eps_cond, const LatentGrid& eps_uncond, double w) {
  eps_cond.check_compatible(eps_uncond, "cfg_combine");
  LatentGrid out(eps_cond.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = w * eps_cond[i] + (1.0 - w) * eps_uncond[i];
  return out;
}

struct ScheduleConfig {
  std::size_t steps = 1000;
  ScheduleShape shape = ScheduleShape::linear;
};

struct SamplerConfig {
  std::size_t num_inference_steps = 50;
  double eta = 0.0;
  double cfg_scale = 1.0;
  std::uint64_t seed = 0;
  /// Fixed-point refinements per inversion step (0 = plain DDIM inversion).
  std::size_t inversion_refinements = 3;
  ScheduleConfig schedule;

  void validate(const NoiseSchedule& s) const {
    require(num_inference_steps >= 1 && num_inference_steps <= s.steps(), ErrorKind::invalid_argument,
            "num_inference_steps must lie in [1, schedule steps]");
    require(eta >= 0.0 && eta <= 1.0, ErrorKind::invalid_argument, "eta must lie in [0,1]");
    require(std::isfinite(cfg_scale), ErrorKind::invalid_argument, "cfg_scale must be finite");
  }
};

inline nlohmann::json to_json(const SamplerConfig& c) {
  return {{"steps", c.num_inference_steps},
          {"eta", c.eta},
          {"cfg_scale", c.cfg_scale},
          {"seed", c.seed},
          {"inversion_refinements", c.inversion_refinements},
          {"schedule", {{"T", c.schedule.steps}, {"shape", to_string(c.schedule.shape)}}}};
}

inline SamplerConfig sampler_config_from_json(const nlohmann::json& j, SamplerConfig c = {}) {
  try {
    if (j.contains("steps")) c.num_inference_steps = j.at("steps").get<std::size_t>();
    if (j.contains("eta")) c.eta = j.at("eta").get<double>();
    if (j.contains("cfg_scale")) c.cfg_scale = j.at("cfg_scale").get<double>();
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("inversion_refinements")) c.inversion_refinements = j.at("inversion_refinements").get<std::size_t>();
    if (j.contains("schedule")) {
      const auto& s = j.at("schedule");
      if (s.contains("T")) c.schedule.steps = s.at("T").get<std::size_t>();
      if (s.contains("shape")) c.schedule.shape = schedule_shape_from_string(s.at("shape").get<std::string>());
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::invalid_argument, std::string("sampler config: ") + e.what());
  }
  require(c.eta >= 0.0 && c.eta <= 1.0, ErrorKind::invalid_argument, "eta must lie in [0,1]");
  require(c.num_inference_steps >= 1, ErrorKind::invalid_argument, "steps must be >= 1");
  return c;
}

}  // namespace morphix
