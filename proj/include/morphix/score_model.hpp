// Copyright 2026 The Morphix Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "morphix/error.hpp"
#include "morphix/latent.hpp"
#include "morphix/schedule.hpp"

namespace morphix {

/// Class-label conditioning; an empty class_id is the null token used for the
/// unconditional branch of classifier-free guidance.
struct Condition {
  std::optional<int> class_id;

  static Condition null() { return {}; }
  static Condition label(int id) { return {id}; }
  bool operator==(const Condition&) const = default;
};

/// Decoder feature maps keyed by tap layer. Each map is stored as a grid of
/// (channels, height, width), reusing LatentGrid's layout.
using FeatureTaps = std::map<std::size_t, LatentGrid>;

/// Keys and values of one self-attention layer, token-major (tokens x dim).
/// Stored at float32 precision so recorded and native values compare exactly.
struct AttentionKV {
  std::size_t tokens = 0;
  std::size_t dim = 0;
  std::vector<float> keys;
  std::vector<float> values;

  bool operator==(const AttentionKV&) const = default;
};

/// Per-call hook into a model's self-attention layers. The model hands over
/// its native K/V; the hook may record them or overwrite them in place.
/// Overwritten K/V are treated as constants by the model's gradient.
class AttentionControl {
 public:
  virtual ~AttentionControl() = default;
  /// Returns true when kv was replaced.
  virtual bool on_attention(std::size_t layer, AttentionKV& kv) = 0;
};

struct Prediction {
  LatentGrid value;
  FeatureTaps taps;
};

/// Denoiser contract shared by the analytic oracle and the toy network.
///
/// predict() is deterministic in (z, t, cond). vjp() returns the gradient of
/// sum_l <cotangent_l, F_l(z)> with respect to z.
class ScoreModel {
 public:
  virtual ~ScoreModel() = default;

  virtual PredictionKind kind() const = 0;
  virtual std::vector<std::size_t> tap_layers() const = 0;
  virtual std::vector<std::size_t> attention_layers() const { return {}; }
  virtual std::size_t num_classes() const { return 0; }
  virtual GridShape tap_shape(std::size_t layer, const GridShape& latent) const = 0;
  /// Length of the schedule the model was built against, when it has one.
  virtual std::optional<std::size_t> schedule_steps() const { return std::nullopt; }

  virtual Prediction predict(const LatentGrid& z, std::size_t t, const Condition& cond,
                             const std::vector<std::size_t>& want_taps, AttentionControl* attn = nullptr) const = 0;

  virtual LatentGrid vjp(const LatentGrid& z, std::size_t t, const Condition& cond, const FeatureTaps& cotangents,
                         AttentionControl* attn = nullptr) const = 0;

  bool declares_tap(std::size_t layer) const {
    const auto layers = tap_layers();
    return std::find(layers.begin(), layers.end(), layer) != layers.end();
  }

  void check_taps(const std::vector<std::size_t>& want) const {
    for (auto l : want) {
      require(declares_tap(l), ErrorKind::invalid_argument, "model does not declare tap layer " + std::to_string(l));
    }
  }

  void check_condition(const Condition& c) const {
    if (!c.class_id) return;
    require(*c.class_id >= 0 && static_cast<std::size_t>(*c.class_id) < std::max<std::size_t>(num_classes(), 1),
            ErrorKind::invalid_argument, "unknown class id " + std::to_string(*c.class_id));
  }
};

}  // namespace morphix
