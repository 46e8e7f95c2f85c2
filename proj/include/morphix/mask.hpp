// Copyright 2026 The Morphix Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "morphix/error.hpp"
#include "morphix/latent.hpp"

namespace morphix {

/// Binary time-frequency region.
class TFMask {
 public:
  TFMask() = default;
  TFMask(std::size_t time_len, std::size_t freq_len, bool fill = false)
      : time_len_(time_len), freq_len_(freq_len), bits_(time_len * freq_len, fill ? 1 : 0) {
    require(time_len > 0 && freq_len > 0, ErrorKind::invalid_argument, "mask dims must be positive");
  }

  std::size_t time_len() const { return time_len_; }
  std::size_t freq_len() const { return freq_len_; }
  std::size_t cells() const { return bits_.size(); }

  bool get(std::size_t t, std::size_t f) const { return bits_[t * freq_len_ + f] != 0; }
  void set(std::size_t t, std::size_t f, bool v = true) { bits_[t * freq_len_ + f] = v ? 1 : 0; }
  bool flat(std::size_t i) const { return bits_[i] != 0; }

  /// Sets the half-open rectangle [t0,t1) x [f0,f1), clipped to bounds.
  void fill_rect(std::size_t t0, std::size_t t1, std::size_t f0, std::size_t f1, bool v = true) {
    t1 = std::min(t1, time_len_);
    f1 = std::min(f1, freq_len_);
    for (std::size_t t = t0; t < t1; ++t)
      for (std::size_t f = f0; f < f1; ++f) set(t, f, v);
  }

  std::size_t popcount() const {
    return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), 1));
  }
  bool none() const { return popcount() == 0; }
  bool all() const { return popcount() == bits_.size(); }

  TFMask complement() const {
    TFMask out = *this;
    for (auto& b : out.bits_) b = b ? 0 : 1;
    return out;
  }

  bool operator==(const TFMask&) const = default;

 private:
  std::size_t time_len_ = 0;
  std::size_t freq_len_ = 0;
  std::vector<unsigned char> bits_;
};

/// Half-open, inclusive-exclusive bounding box of the set cells.
struct MaskBox {
  std::size_t t0 = 0, t1 = 0, f0 = 0, f1 = 0;
  std::size_t time_extent() const { return t1 - t0; }
  std::size_t freq_extent() const { return f1 - f0; }
};

inline MaskBox bounding_box(const TFMask& m) {
  require(!m.none(), ErrorKind::invalid_argument, "bounding box of empty mask");
  MaskBox b{m.time_len(), 0, m.freq_len(), 0};
  for (std::size_t t = 0; t < m.time_len(); ++t)
    for (std::size_t f = 0; f < m.freq_len(); ++f)
      if (m.get(t, f)) {
        b.t0 = std::min(b.t0, t);
        b.t1 = std::max(b.t1, t + 1);
        b.f0 = std::min(b.f0, f);
        b.f1 = std::max(b.f1, f + 1);
      }
  return b;
}

/// Coarsens a mask; a target cell is set when at least half of the source
/// cells in its block are set.
inline TFMask mask_downsample(const TFMask& m, std::size_t target_time, std::size_t target_freq) {
  require(target_time >= 1 && target_freq >= 1, ErrorKind::invalid_argument, "target dims must be >= 1");
  require(target_time <= m.time_len() && target_freq <= m.freq_len(), ErrorKind::invalid_argument,
          "mask_downsample cannot upsample " + std::to_string(m.time_len()) + "x" +
              std::to_string(m.freq_len()) + " to " + std::to_string(target_time) + "x" +
              std::to_string(target_freq));
  if (target_time == m.time_len() && target_freq == m.freq_len()) return m;
  TFMask out(target_time, target_freq);
  for (std::size_t i = 0; i < target_time; ++i) {
    const std::size_t t0 = i * m.time_len() / target_time, t1 = (i + 1) * m.time_len() / target_time;
    for (std::size_t j = 0; j < target_freq; ++j) {
      const std::size_t f0 = j * m.freq_len() / target_freq, f1 = (j + 1) * m.freq_len() / target_freq;
      std::size_t on = 0;
      for (std::size_t t = t0; t < t1; ++t)
        for (std::size_t f = f0; f < f1; ++f) on += m.get(t, f) ? 1 : 0;
      out.set(i, j, 2 * on >= (t1 - t0) * (f1 - f0));
    }
  }
  return out;
}

/// Geometric edit applied to a mask: time shift, pitch shift, or time stretch.
struct MaskTransform {
  enum class Kind { translate_time, translate_freq, scale_time };
  Kind kind = Kind::translate_time;
  double amount = 0.0;

  static MaskTransform translate_time(long cells) { return {Kind::translate_time, static_cast<double>(cells)}; }
  static MaskTransform translate_freq(long cells) { return {Kind::translate_freq, static_cast<double>(cells)}; }
  static MaskTransform scale_time(double factor) { return {Kind::scale_time, factor}; }
};

inline const char* to_string(MaskTransform::Kind k) {
  switch (k) {
    case MaskTransform::Kind::translate_time: return "translate_time";
    case MaskTransform::Kind::translate_freq: return "translate_freq";
    case MaskTransform::Kind::scale_time: return "scale_time";
  }
  return "?";
}

/// Maps each destination cell of a transform back to the source cell it was
/// copied from, or -1 when the destination cell is unset.
struct CellMap {
  TFMask mask;
  std::vector<long> source;  // flat index into the source mask, per destination cell
};

namespace detail {

inline long round_to_long(double v) { return static_cast<long>(std::lround(v)); }

inline void validate_transform(const MaskTransform& t) {
  if (t.kind == MaskTransform::Kind::scale_time) {
    require(std::isfinite(t.amount) && t.amount > 0.0, ErrorKind::invalid_argument,
            "scale factor must be > 0, got " + std::to_string(t.amount));
  } else {
    require(std::isfinite(t.amount) && t.amount == std::round(t.amount), ErrorKind::invalid_argument,
            "translation amount must be an integer cell count");
  }
}

}  // namespace detail

inline CellMap transform_cells(const TFMask& m, const MaskTransform& tr) {
  detail::validate_transform(tr);
  require(!m.none(), ErrorKind::invalid_argument, "cannot transform an empty mask");
  const long T = static_cast<long>(m.time_len()), F = static_cast<long>(m.freq_len());
  CellMap out{TFMask(m.time_len(), m.freq_len()), std::vector<long>(m.cells(), -1)};
  auto put = [&](long t, long f, long src) {
    if (t < 0 || t >= T || f < 0 || f >= F) return;
    out.mask.set(static_cast<std::size_t>(t), static_cast<std::size_t>(f));
    out.source[static_cast<std::size_t>(t * F + f)] = src;
  };
  if (tr.kind == MaskTransform::Kind::scale_time) {
    const MaskBox box = bounding_box(m);
    const double len = static_cast<double>(box.time_extent());
    const double center = 0.5 * static_cast<double>(box.t0 + box.t1);
    const long new_len = std::max(1L, detail::round_to_long(len * tr.amount));
    const long new_t0 = detail::round_to_long(center - 0.5 * static_cast<double>(new_len));
    for (long k = 0; k < new_len; ++k) {
      const long rel = std::min(static_cast<long>(len) - 1,
                                static_cast<long>(std::floor((static_cast<double>(k) + 0.5) * len /
                                                             static_cast<double>(new_len))));
      const long src_t = static_cast<long>(box.t0) + rel;
      for (long f = 0; f < F; ++f)
        if (m.get(static_cast<std::size_t>(src_t), static_cast<std::size_t>(f))) put(new_t0 + k, f, src_t * F + f);
    }
  } else {
    const long shift = detail::round_to_long(tr.amount);
    for (long t = 0; t < T; ++t)
      for (long f = 0; f < F; ++f) {
        if (!m.get(static_cast<std::size_t>(t), static_cast<std::size_t>(f))) continue;
        if (tr.kind == MaskTransform::Kind::translate_time)
          put(t + shift, f, t * F + f);
        else
          put(t, f + shift, t * F + f);
      }
  }
  require(!out.mask.none(), ErrorKind::invalid_argument,
          std::string("transform ") + to_string(tr.kind) + " moves the mask fully out of bounds");
  return out;
}

inline TFMask apply_mask_transform(const TFMask& m, const MaskTransform& tr) { return transform_cells(m, tr).mask; }

// ---- JSON exchange ---------------------------------------------------------

inline nlohmann::json mask_to_json(const TFMask& m) {
  // Row runs along time, merged into rectangles of identical frequency span.
  nlohmann::json rects = nlohmann::json::array();
  for (std::size_t t = 0; t < m.time_len(); ++t) {
    std::size_t f = 0;
    while (f < m.freq_len()) {
      if (!m.get(t, f)) {
        ++f;
        continue;
      }
      std::size_t f1 = f;
      while (f1 < m.freq_len() && m.get(t, f1)) ++f1;
      bool merged = false;
      for (auto& r : rects) {
        if (r["t1"] == t && r["f0"] == f && r["f1"] == f1) {
          r["t1"] = t + 1;
          merged = true;
          break;
        }
      }
      if (!merged) rects.push_back({{"t0", t}, {"t1", t + 1}, {"f0", f}, {"f1", f1}});
      f = f1;
    }
  }
  return {{"time_len", m.time_len()}, {"freq_len", m.freq_len()}, {"rects", rects}};
}

inline TFMask mask_from_json(const nlohmann::json& j) {
  try {
    const auto tl = j.at("time_len").get<long>();
    const auto fl = j.at("freq_len").get<long>();
    require(tl > 0 && fl > 0, ErrorKind::invalid_argument, "mask dims must be positive");
    TFMask m(static_cast<std::size_t>(tl), static_cast<std::size_t>(fl));
    for (const auto& r : j.at("rects")) {
      const auto t0 = r.at("t0").get<long>(), t1 = r.at("t1").get<long>();
      const auto f0 = r.at("f0").get<long>(), f1 = r.at("f1").get<long>();
      require(t0 >= 0 && f0 >= 0 && t0 <= t1 && f0 <= f1 && t1 <= tl && f1 <= fl, ErrorKind::invalid_argument,
              "mask rect out of bounds: " + r.dump());
      m.fill_rect(static_cast<std::size_t>(t0), static_cast<std::size_t>(t1), static_cast<std::size_t>(f0),
                  static_cast<std::size_t>(f1));
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::invalid_argument, std::string("mask json: ") + e.what());
  }
}

inline nlohmann::json transform_to_json(const MaskTransform& t) {
  return {{"kind", to_string(t.kind)}, {"amount", t.amount}};
}

inline MaskTransform transform_from_json(const nlohmann::json& j) {
  try {
    const auto kind = j.at("kind").get<std::string>();
    MaskTransform t;
    if (kind == "translate_time") t.kind = MaskTransform::Kind::translate_time;
    else if (kind == "translate_freq") t.kind = MaskTransform::Kind::translate_freq;
    else if (kind == "scale_time") t.kind = MaskTransform::Kind::scale_time;
    else fail(ErrorKind::invalid_argument, "unknown transform kind '" + kind + "'");
    t.amount = j.at("amount").get<double>();
    detail::validate_transform(t);
    return t;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::invalid_argument, std::string("transform json: ") + e.what());
  }
}

}  // namespace morphix
