// Copyright 2026 The Morphix Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "morphix/error.hpp"
#include "morphix/latent.hpp"

namespace morphix {

struct MorphConfig {
  double alpha = 0.5;
  std::size_t n_iter = 100;
  double lr = 1e-4;
  bool use_penalty = true;
  bool use_tangent = true;
  double clip_max_norm = 1.0;

  void validate() const {
    require(alpha >= 0.0 && alpha <= 1.0, ErrorKind::invalid_argument, "morph alpha must lie in [0,1]");
    require(lr > 0.0 && std::isfinite(lr), ErrorKind::invalid_argument, "morph lr must be > 0");
    require(clip_max_norm > 0.0, ErrorKind::invalid_argument, "clip_max_norm must be > 0");
  }
};

inline nlohmann::json to_json(const MorphConfig& c) {
  return {{"alpha", c.alpha},           {"n_iter", c.n_iter},           {"lr", c.lr},
          {"use_penalty", c.use_penalty}, {"use_tangent", c.use_tangent}, {"clip_max_norm", c.clip_max_norm}};
}

inline MorphConfig morph_config_from_json(const nlohmann::json& j, MorphConfig c = {}) {
  try {
    if (j.contains("alpha")) c.alpha = j.at("alpha").get<double>();
    if (j.contains("n_iter")) c.n_iter = j.at("n_iter").get<std::size_t>();
    if (j.contains("lr")) c.lr = j.at("lr").get<double>();
    if (j.contains("use_penalty")) c.use_penalty = j.at("use_penalty").get<bool>();
    if (j.contains("use_tangent")) c.use_tangent = j.at("use_tangent").get<bool>();
    if (j.contains("clip_max_norm")) c.clip_max_norm = j.at("clip_max_norm").get<double>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::invalid_argument, std::string("morph config: ") + e.what());
  }
  c.validate();
  return c;
}

/// Addition in latent space: SLERP from content toward reference.
inline LatentGrid morph_add(const LatentGrid& z_c, const LatentGrid& z_r, double alpha) {
  require(alpha >= 0.0 && alpha <= 1.0, ErrorKind::invalid_argument, "alpha must lie in [0,1]");
  return slerp(z_c, z_r, alpha);
}

struct RemovalLoss {
  double loss = 0.0;     // geodesic mismatch to the mixture
  double penalty = 0.0;  // squared normalized inner product of the two parts
  LatentGrid grad_c;     // d(loss + penalty)/d z_c_hat, penalty included only when requested
  LatentGrid grad_r;
};

namespace detail {

// d omega / d a for omega = angle(a, b); zero at the collinear ends.
inline LatentGrid angle_grad(const LatentGrid& a, const LatentGrid& b, double na, double nb) {
  LatentGrid g(a.shape());
  const double c = dot(a, b) / (na * nb);
  for (std::size_t i = 0; i < a.size(); ++i) g[i] = b[i] / nb - c * a[i] / na;
  const double s = norm(g);
  if (s < 1e-300) return LatentGrid(a.shape());
  g *= -1.0 / (na * s);
  return g;
}

}  // namespace detail

/// Mixture-fit objective of the removal optimizer and its gradient with respect
/// to both parts. Gradients are closed form, so no score model is involved.
inline RemovalLoss removal_loss(const LatentGrid& zc, const LatentGrid& zr, const LatentGrid& z_m, double alpha,
                                bool use_penalty = true) {
  zc.check_compatible(zr, "removal_loss");
  zc.check_compatible(z_m, "removal_loss");
  const auto w = slerp_weights(zc, zr, alpha);
  LatentGrid y(zc.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = w.a * zc[i] + w.b * zr[i];

  RemovalLoss out;
  out.loss = geodesic_distance(z_m, y);
  const double n = static_cast<double>(zc.size());
  const double ip = dot(zc, zr);
  out.penalty = ip * ip / (n * n);

  // dL/dy: unit tangent at y pointing toward z_m, scaled by -1/|y|.
  const double ny = norm(y);
  LatentGrid gy = detail::angle_grad(y, z_m, ny, norm(z_m));

  const double nc = norm(zc), nr = norm(zr);
  out.grad_c = w.a * gy;
  out.grad_r = w.b * gy;
  if (!w.linear) {
    const double om = w.omega, s = std::sin(om), co = std::cos(om);
    const double da = ((1.0 - alpha) * std::cos((1.0 - alpha) * om) * s - std::sin((1.0 - alpha) * om) * co) / (s * s);
    const double db = (alpha * std::cos(alpha * om) * s - std::sin(alpha * om) * co) / (s * s);
    const double k = dot(zc, gy) * da + dot(zr, gy) * db;
    out.grad_c.axpy(k, detail::angle_grad(zc, zr, nc, nr));
    out.grad_r.axpy(k, detail::angle_grad(zr, zc, nr, nc));
  }
  if (use_penalty) {
    const double gp = 2.0 * ip / (n * n);
    out.grad_c.axpy(gp, zr);
    out.grad_r.axpy(gp, zc);
  }
  return out;
}

struct RemovalSolution {
  LatentGrid z_c_hat;
  LatentGrid z_r_hat;
  std::vector<double> loss_trace;     // total objective before each update
  std::vector<double> penalty_trace;  // penalty before each update (0 when disabled)
  std::vector<double> grad_norm_trace;  // joint update norm after projection and clipping
  bool aborted = false;
  std::string abort_reason;
};

/// SGD over additive offsets to the two initial latents so that their SLERP
/// reproduces the mixture, with optional orthogonality penalty, tangent
/// projection of each gradient and joint gradient-norm clipping.
inline RemovalSolution optimize_removal(const LatentGrid& zc_init, const LatentGrid& zr_init, const LatentGrid& z_m,
                                        const MorphConfig& cfg) {
  cfg.validate();
  zc_init.check_compatible(zr_init, "optimize_removal");
  zc_init.check_compatible(z_m, "optimize_removal");
  RemovalSolution sol{zc_init, zr_init, {}, {}, {}, false, {}};
  sol.loss_trace.reserve(cfg.n_iter);
  for (std::size_t it = 0; it < cfg.n_iter; ++it) {
    auto r = removal_loss(sol.z_c_hat, sol.z_r_hat, z_m, cfg.alpha, cfg.use_penalty);
    const double total = r.loss + (cfg.use_penalty ? r.penalty : 0.0);
    if (!std::isfinite(total)) {
      sol.aborted = true;
      sol.abort_reason = "non-finite removal loss at iteration " + std::to_string(it);
      return sol;
    }
    sol.loss_trace.push_back(total);
    sol.penalty_trace.push_back(cfg.use_penalty ? r.penalty : 0.0);
    if (cfg.use_tangent) {
      r.grad_c = tangent_project(r.grad_c, sol.z_c_hat);
      r.grad_r = tangent_project(r.grad_r, sol.z_r_hat);
    }
    const double gn = std::sqrt(dot(r.grad_c, r.grad_c) + dot(r.grad_r, r.grad_r));
    if (gn > cfg.clip_max_norm) {
      const double k = cfg.clip_max_norm / gn;
      r.grad_c *= k;
      r.grad_r *= k;
    }
    sol.grad_norm_trace.push_back(std::min(gn, cfg.clip_max_norm));
    sol.z_c_hat.axpy(-cfg.lr, r.grad_c);
    sol.z_r_hat.axpy(-cfg.lr, r.grad_r);
  }
  return sol;
}

inline std::string removal_trace_csv(const RemovalSolution& s) {
  std::ostringstream os;
  os.precision(9);
  os << "iter,loss,penalty\n";
  for (std::size_t i = 0; i < s.loss_trace.size(); ++i) os << i << "," << s.loss_trace[i] << "," << s.penalty_trace[i] << "\n";
  return os.str();
}

}  // namespace morphix
