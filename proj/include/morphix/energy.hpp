// Copyright 2026 The Morphix Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "morphix/error.hpp"
#include "morphix/latent.hpp"
#include "morphix/mask.hpp"
#include "morphix/schedule.hpp"
#include "morphix/score_model.hpp"

namespace morphix {

struct GuidanceWeights {
  double w_content = 1.0;
  double w_edit = 1.0;
  double eta_guidance = 1.0;
  std::vector<std::size_t> tap_layers{2, 3};

  bool enabled() const { return eta_guidance > 0.0 && (w_content > 0.0 || w_edit > 0.0); }

  void validate() const {
    require(w_content >= 0.0 && w_edit >= 0.0 && eta_guidance >= 0.0, ErrorKind::invalid_argument,
            "guidance weights must be >= 0");
    require(!tap_layers.empty(), ErrorKind::invalid_argument, "guidance needs at least one tap layer");
    require(std::set<std::size_t>(tap_layers.begin(), tap_layers.end()).size() == tap_layers.size(),
            ErrorKind::invalid_argument, "duplicate guidance layer");
  }
};

inline nlohmann::json to_json(const GuidanceWeights& w) {
  return {{"w_content", w.w_content}, {"w_edit", w.w_edit}, {"eta", w.eta_guidance}, {"layers", w.tap_layers}};
}

inline GuidanceWeights guidance_weights_from_json(const nlohmann::json& j, GuidanceWeights w = {}) {
  try {
    if (j.contains("w_content")) w.w_content = j.at("w_content").get<double>();
    if (j.contains("w_edit")) w.w_edit = j.at("w_edit").get<double>();
    if (j.contains("eta")) w.eta_guidance = j.at("eta").get<double>();
    if (j.contains("layers")) w.tap_layers = j.at("layers").get<std::vector<std::size_t>>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::invalid_argument, std::string("guidance weights: ") + e.what());
  }
  w.validate();
  return w;
}

/// Ordered correspondence between cells of two H x W grids (flat t*W + f).
/// Entry k pairs cell c[k] on the edited side with cell r[k] on the other.
struct CellPairs {
  std::vector<std::size_t> c;
  std::vector<std::size_t> r;
  std::size_t size() const { return c.size(); }
};

/// Edited-region mask m_c and reference-region mask m_r, at any resolution at
/// least as fine as the grids they are applied to.
struct RegionPair {
  TFMask mask_c;
  TFMask mask_r;

  /// Reference region moved onto the edited region: bounding boxes are
  /// matched by translation, with nearest-neighbor resampling when the boxes
  /// differ in size. Cells whose counterpart falls outside m_r are dropped.
  CellPairs aligned(std::size_t H, std::size_t W) const {
    const TFMask mc = mask_downsample(mask_c, H, W), mr = mask_downsample(mask_r, H, W);
    require(!mc.none(), ErrorKind::invalid_argument,
            "edited region vanishes at " + std::to_string(H) + "x" + std::to_string(W));
    require(!mr.none(), ErrorKind::invalid_argument,
            "reference region vanishes at " + std::to_string(H) + "x" + std::to_string(W));
    const MaskBox bc = bounding_box(mc), br = bounding_box(mr);
    const std::size_t lc_t = bc.t1 - bc.t0, lc_f = bc.f1 - bc.f0;
    const std::size_t lr_t = br.t1 - br.t0, lr_f = br.f1 - br.f0;
    CellPairs p;
    for (std::size_t t = bc.t0; t < bc.t1; ++t) {
      const std::size_t rt = br.t0 + ((2 * (t - bc.t0) + 1) * lr_t) / (2 * lc_t);
      for (std::size_t f = bc.f0; f < bc.f1; ++f) {
        if (!mc.get(t, f)) continue;
        const std::size_t rf = br.f0 + ((2 * (f - bc.f0) + 1) * lr_f) / (2 * lc_f);
        if (!mr.get(rt, rf)) continue;
        p.c.push_back(t * W + f);
        p.r.push_back(rt * W + rf);
      }
    }
    require(p.size() > 0, ErrorKind::invalid_argument, "edited and reference regions do not overlap after alignment");
    return p;
  }

  /// Identity pairing over m_c, or over its complement.
  CellPairs same_region(std::size_t H, std::size_t W, bool complement) const {
    TFMask m = mask_downsample(mask_c, H, W);
    if (complement) m = m.complement();
    require(!m.none(), ErrorKind::invalid_argument,
            std::string(complement ? "unedited" : "edited") + " region is empty at " + std::to_string(H) + "x" +
                std::to_string(W));
    CellPairs p;
    for (std::size_t t = 0; t < H; ++t) {
      for (std::size_t f = 0; f < W; ++f) {
        if (!m.get(t, f)) continue;
        p.c.push_back(t * W + f);
        p.r.push_back(t * W + f);
      }
    }
    return p;
  }
};

/// A scalar and its gradient with respect to the edited-side features.
struct ScalarGrad {
  double value = 0.0;
  LatentGrid grad;
};

namespace detail {

inline void check_pairs(const LatentGrid& Fc, const CellPairs& p, const LatentGrid& Fr) {
  require(Fc.channels() == Fr.channels(), ErrorKind::shape_mismatch, "feature channel counts differ");
  require(p.size() > 0 && p.c.size() == p.r.size(), ErrorKind::invalid_argument, "empty or misaligned cell pairs");
  const std::size_t nc = Fc.time_len() * Fc.freq_len(), nr = Fr.time_len() * Fr.freq_len();
  for (std::size_t k = 0; k < p.size(); ++k) {
    require(p.c[k] < nc && p.r[k] < nr, ErrorKind::shape_mismatch, "cell pair outside feature grid");
  }
}

// 0.5 cos(u, v) + 0.5 and its gradient in u; a zero vector has cosine 0.
inline double half_cosine(const std::vector<double>& u, const std::vector<double>& v, std::vector<double>* du) {
  double uv = 0.0, uu = 0.0, vv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    uv += u[i] * v[i];
    uu += u[i] * u[i];
    vv += v[i] * v[i];
  }
  if (du) du->assign(u.size(), 0.0);
  if (uu == 0.0 || vv == 0.0) return 0.5;
  const double nu = std::sqrt(uu), nv = std::sqrt(vv);
  const double c = std::clamp(uv / std::sqrt(uu * vv), -1.0, 1.0);
  if (du) {
    for (std::size_t i = 0; i < u.size(); ++i) (*du)[i] = 0.5 * (v[i] / (nu * nv) - c * u[i] / uu);
  }
  return 0.5 * c + 0.5;
}

}  // namespace detail

/// Masked feature similarity in [0,1]. The reference side is a constant: the
/// gradient is taken with respect to F_c only.
inline ScalarGrad masked_similarity(const LatentGrid& Fc, const CellPairs& p, const LatentGrid& Fr) {
  detail::check_pairs(Fc, p, Fr);
  const std::size_t C = Fc.channels(), K = p.size();
  const std::size_t hc = Fc.time_len() * Fc.freq_len(), hr = Fr.time_len() * Fr.freq_len();
  std::vector<double> u(C * K), v(C * K), du;
  for (std::size_t ch = 0; ch < C; ++ch) {
    for (std::size_t k = 0; k < K; ++k) {
      u[ch * K + k] = Fc[ch * hc + p.c[k]];
      v[ch * K + k] = Fr[ch * hr + p.r[k]];
    }
  }
  ScalarGrad out{detail::half_cosine(u, v, &du), LatentGrid(Fc.shape())};
  for (std::size_t ch = 0; ch < C; ++ch) {
    for (std::size_t k = 0; k < K; ++k) out.grad[ch * hc + p.c[k]] += du[ch * K + k];
  }
  return out;
}

/// Similarity of the region-mean feature vectors (one value per channel).
inline ScalarGrad global_similarity(const LatentGrid& Fc, const CellPairs& p, const LatentGrid& Fr) {
  detail::check_pairs(Fc, p, Fr);
  const std::size_t C = Fc.channels(), K = p.size();
  const std::size_t hc = Fc.time_len() * Fc.freq_len(), hr = Fr.time_len() * Fr.freq_len();
  std::vector<double> u(C, 0.0), v(C, 0.0), du;
  for (std::size_t ch = 0; ch < C; ++ch) {
    for (std::size_t k = 0; k < K; ++k) {
      u[ch] += Fc[ch * hc + p.c[k]];
      v[ch] += Fr[ch * hr + p.r[k]];
    }
    u[ch] /= static_cast<double>(K);
    v[ch] /= static_cast<double>(K);
  }
  ScalarGrad out{detail::half_cosine(u, v, &du), LatentGrid(Fc.shape())};
  for (std::size_t ch = 0; ch < C; ++ch) {
    for (std::size_t k = 0; k < K; ++k) out.grad[ch * hc + p.c[k]] += du[ch] / static_cast<double>(K);
  }
  return out;
}

/// Per-layer consistency term 1 / (1 + 4 sim).
inline double consistency_term(double sim) { return 1.0 / (1.0 + 4.0 * sim); }

/// Energy value plus its cotangents on the edited-side taps.
struct EnergyValue {
  double value = 0.0;
  FeatureTaps cotangents;
};

using PairsForLayer = std::function<CellPairs(std::size_t H, std::size_t W)>;

namespace detail {

inline const LatentGrid& tap_at(const FeatureTaps& taps, std::size_t layer, const char* which) {
  const auto it = taps.find(layer);
  require(it != taps.end(), ErrorKind::invalid_argument,
          std::string(which) + " taps lack layer " + std::to_string(layer));
  return it->second;
}

inline void add_cotangent(FeatureTaps& cot, std::size_t layer, const LatentGrid& g, double scale) {
  auto it = cot.find(layer);
  if (it == cot.end()) it = cot.emplace(layer, LatentGrid(g.shape())).first;
  it->second.axpy(scale, g);
}

}  // namespace detail

/// Sum over layers of 1 / (1 + 4 sim_l), scaled by `weight` into `acc`.
inline double consistency_energy(const FeatureTaps& now, const FeatureTaps& other, const PairsForLayer& pairs,
                                 const std::vector<std::size_t>& layers, double weight = 1.0,
                                 EnergyValue* acc = nullptr) {
  double e = 0.0;
  for (auto l : layers) {
    const auto& Fc = detail::tap_at(now, l, "current");
    const auto& Fr = detail::tap_at(other, l, "comparison");
    const auto s = masked_similarity(Fc, pairs(Fc.time_len(), Fc.freq_len()), Fr);
    e += consistency_term(s.value);
    if (acc) {
      const double d = -4.0 / ((1.0 + 4.0 * s.value) * (1.0 + 4.0 * s.value));
      detail::add_cotangent(acc->cotangents, l, s.grad, weight * d);
    }
  }
  if (acc) acc->value += weight * e;
  return e;
}

/// Mean over layers of the similarity between region-mean features.
inline double contrast_energy(const FeatureTaps& now, const FeatureTaps& other, const PairsForLayer& pairs,
                              const std::vector<std::size_t>& layers, double weight = 1.0,
                              EnergyValue* acc = nullptr) {
  require(!layers.empty(), ErrorKind::invalid_argument, "contrast energy needs layers");
  const double inv = 1.0 / static_cast<double>(layers.size());
  double e = 0.0;
  for (auto l : layers) {
    const auto& Fc = detail::tap_at(now, l, "current");
    const auto& Fr = detail::tap_at(other, l, "comparison");
    const auto s = global_similarity(Fc, pairs(Fc.time_len(), Fc.freq_len()), Fr);
    e += s.value * inv;
    if (acc) detail::add_cotangent(acc->cotangents, l, s.grad, weight * inv);
  }
  if (acc) acc->value += weight * e;
  return e;
}

enum class EnergyKind { add, remove };

/// Task energy on the current taps given source and reference taps.
///   add:    w_content * consist(now vs source on m_c) + w_edit * consist(now on m_c vs reference on m_r)
///   remove: w_content * consist(now vs source off m_c) + w_edit * contrast(now on m_c vs reference on m_r)
inline EnergyValue task_energy(EnergyKind kind, const FeatureTaps& now, const FeatureTaps& source,
                               const FeatureTaps& reference, const RegionPair& region, const GuidanceWeights& w) {
  EnergyValue out;
  const auto& L = w.tap_layers;
  if (w.w_content > 0.0) {
    const bool off = kind == EnergyKind::remove;
    consistency_energy(now, source, [&](std::size_t H, std::size_t W) { return region.same_region(H, W, off); }, L,
                       w.w_content, &out);
  }
  if (w.w_edit > 0.0) {
    const PairsForLayer aligned = [&](std::size_t H, std::size_t W) { return region.aligned(H, W); };
    if (kind == EnergyKind::add) {
      consistency_energy(now, reference, aligned, L, w.w_edit, &out);
    } else {
      contrast_energy(now, reference, aligned, L, w.w_edit, &out);
    }
  }
  return out;
}

/// eps + eta sqrt(1 - ab_t) grad_E: minimizing E is a score correction of -grad_E.
inline LatentGrid guided_epsilon(const LatentGrid& eps, const LatentGrid& grad_E, std::size_t t, const NoiseSchedule& s,
                                 double eta_guidance) {
  eps.check_compatible(grad_E, "guided_epsilon");
  LatentGrid out = eps;
  if (eta_guidance != 0.0) out.axpy(eta_guidance * s.sigma(t), grad_E);
  return out;
}

}  // namespace morphix
