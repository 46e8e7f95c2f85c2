// Copyright 2026 The Morphix Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "morphix/autodiff.hpp"
#include "morphix/binary_io.hpp"
#include "morphix/schedule.hpp"
#include "morphix/score_model.hpp"

namespace morphix {

struct ToyDenoiserConfig {
  std::size_t latent_channels = 4;
  std::size_t width = 16;  // channels of the full-resolution stages; inner stages use 2x
  std::size_t num_classes = 2;
  std::uint64_t seed = 42;
  PredictionKind kind = PredictionKind::epsilon;

  bool operator==(const ToyDenoiserConfig&) const = default;
};

/// Named float32 parameter tensor.
struct ParamTensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<float> values;

  bool operator==(const ParamTensor&) const = default;
};

/// Small conditional U-Net-like denoiser.
///
///   stem conv (C1, full res) -> pool -> conv (C2, 1/2) -> pool -> conv (C2, 1/4)
///   + time/class embedding -> mid conv
///   decoder stage 1: conv + self-attention at 1/4           (tap 1)
///   decoder stage 2: up, skip, conv -> C1, self-attention    (tap 2)
///   decoder stage 3: up, skip, conv, self-attention          (tap 3)
///   output conv -> latent channels
///
/// Latent time and frequency extents must be divisible by 4.
class ToyDenoiser final : public ScoreModel {
 public:
  static constexpr std::uint32_t kCheckpointVersion = 1;
  static constexpr std::size_t kTimeFeatures = 16;
  static constexpr std::size_t kEmbedWidth = 32;

  explicit ToyDenoiser(ToyDenoiserConfig cfg = {}) : cfg_(cfg) {
    require(cfg_.latent_channels > 0 && cfg_.width > 0, ErrorKind::invalid_argument, "toy denoiser dims must be > 0");
    init_params();
  }

  const ToyDenoiserConfig& config() const { return cfg_; }
  std::vector<ParamTensor>& params() { return params_; }
  const std::vector<ParamTensor>& params() const { return params_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.values.size();
    return n;
  }

  PredictionKind kind() const override { return cfg_.kind; }
  std::vector<std::size_t> tap_layers() const override { return {1, 2, 3}; }
  std::vector<std::size_t> attention_layers() const override { return {1, 2, 3}; }
  std::size_t num_classes() const override { return cfg_.num_classes; }

  GridShape tap_shape(std::size_t layer, const GridShape& latent) const override {
    require(declares_tap(layer), ErrorKind::invalid_argument, "undeclared tap layer " + std::to_string(layer));
    const std::size_t c1 = cfg_.width, c2 = 2 * cfg_.width;
    switch (layer) {
      case 1: return {c2, latent.time_len / 4, latent.freq_len / 4};
      case 2: return {c1, latent.time_len / 2, latent.freq_len / 2};
      default: return {c1, latent.time_len, latent.freq_len};
    }
  }

  Prediction predict(const LatentGrid& z, std::size_t t, const Condition& cond, const std::vector<std::size_t>& want_taps,
                     AttentionControl* attn = nullptr) const override {
    check_taps(want_taps);
    ad::Tape tape;
    auto pv = load_params(tape, false);
    const auto zin = tape.leaf(z.storage(), {z.channels(), z.time_len(), z.freq_len()}, false);
    const auto fw = forward(tape, pv, zin, t, cond, attn, {});
    Prediction p{LatentGrid(z.shape(), tape.value(fw.out)), {}};
    for (auto l : want_taps) p.taps.emplace(l, to_grid(tape, fw.taps.at(l)));
    return p;
  }

  LatentGrid vjp(const LatentGrid& z, std::size_t t, const Condition& cond, const FeatureTaps& cotangents,
                 AttentionControl* attn = nullptr) const override {
    ad::Tape tape;
    auto pv = load_params(tape, false);
    const auto zin = tape.leaf(z.storage(), {z.channels(), z.time_len(), z.freq_len()}, true);
    const auto fw = forward(tape, pv, zin, t, cond, attn, {});
    bool any = false;
    for (const auto& [layer, ct] : cotangents) {
      require(declares_tap(layer), ErrorKind::invalid_argument, "undeclared tap layer " + std::to_string(layer));
      const auto v = fw.taps.at(layer);
      require(ct.size() == tape.value(v).size(), ErrorKind::shape_mismatch,
              "cotangent for tap " + std::to_string(layer) + " has wrong size");
      tape.seed(v, ct.storage());
      any = true;
    }
    if (!any) return LatentGrid(z.shape());
    tape.backward();
    if (!tape.has_grad(zin)) return LatentGrid(z.shape());
    return LatentGrid(z.shape(), tape.grad(zin));
  }

  /// Row-stochastic attention matrix of one layer for inspection.
  std::vector<double> attention_weights(const LatentGrid& z, std::size_t t, const Condition& cond, std::size_t layer,
                                        AttentionControl* attn = nullptr) const {
    std::vector<double> w;
    ad::Tape tape;
    auto pv = load_params(tape, false);
    const auto zin = tape.leaf(z.storage(), {z.channels(), z.time_len(), z.freq_len()}, false);
    forward(tape, pv, zin, t, cond, attn, {layer, &w});
    return w;
  }

  /// One training example's loss and parameter gradients (accumulated into grads).
  double loss_and_grad(const LatentGrid& x_t, std::size_t t, const Condition& cond, const LatentGrid& target,
                       std::vector<std::vector<double>>& grads) const {
    ad::Tape tape;
    auto pv = load_params(tape, true);
    const auto zin = tape.leaf(x_t.storage(), {x_t.channels(), x_t.time_len(), x_t.freq_len()}, false);
    const auto fw = forward(tape, pv, zin, t, cond, nullptr, {});
    const auto loss = ad::mse(tape, fw.out, target.storage());
    tape.seed(loss, {1.0});
    tape.backward();
    if (grads.size() != params_.size()) {
      grads.assign(params_.size(), {});
      for (std::size_t i = 0; i < params_.size(); ++i) grads[i].assign(params_[i].values.size(), 0.0);
    }
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (!tape.has_grad(pv[i])) continue;
      const auto& g = tape.grad(pv[i]);
      for (std::size_t k = 0; k < g.size(); ++k) grads[i][k] += g[k];
    }
    return tape.value(loss)[0];
  }

  // ---- checkpoint ----------------------------------------------------------

  std::vector<std::uint8_t> serialize() const {
    io::Writer w;
    w.magic("MRXM");
    w.u32(kCheckpointVersion);
    w.u8(static_cast<std::uint8_t>(cfg_.kind));
    w.u32(static_cast<std::uint32_t>(cfg_.latent_channels));
    w.u32(static_cast<std::uint32_t>(cfg_.width));
    w.u32(static_cast<std::uint32_t>(cfg_.num_classes));
    w.u64(cfg_.seed);
    w.u32(static_cast<std::uint32_t>(params_.size()));
    for (const auto& p : params_) {
      w.str(p.name);
      w.u32(static_cast<std::uint32_t>(p.shape.size()));
      for (auto d : p.shape) w.u32(static_cast<std::uint32_t>(d));
      w.f32s(p.values);
    }
    return w.take();
  }

  static ToyDenoiser deserialize(std::span<const std::uint8_t> bytes) {
    io::Reader r(bytes, "checkpoint");
    r.expect_magic("MRXM");
    const auto version = r.u32();
    require(version == kCheckpointVersion, ErrorKind::format,
            "checkpoint version " + std::to_string(version) + " unsupported (expected " +
                std::to_string(kCheckpointVersion) + ")");
    ToyDenoiserConfig cfg;
    const auto kind = r.u8();
    require(kind <= 1, ErrorKind::format, "checkpoint has unknown prediction kind " + std::to_string(kind));
    cfg.kind = static_cast<PredictionKind>(kind);
    cfg.latent_channels = r.u32();
    cfg.width = r.u32();
    cfg.num_classes = r.u32();
    cfg.seed = r.u64();
    require(cfg.latent_channels > 0 && cfg.width > 0 && cfg.width <= 4096, ErrorKind::format, "checkpoint header invalid");
    ToyDenoiser m(cfg);
    const auto count = r.u32();
    require(count == m.params_.size(), ErrorKind::format, "checkpoint tensor count mismatch");
    for (auto& p : m.params_) {
      const auto name = r.str();
      require(name == p.name, ErrorKind::format, "checkpoint tensor '" + name + "' where '" + p.name + "' expected");
      const auto nd = r.u32();
      require(nd == p.shape.size(), ErrorKind::format, "checkpoint rank mismatch for " + p.name);
      for (auto d : p.shape) require(r.u32() == d, ErrorKind::format, "checkpoint shape mismatch for " + p.name);
      p.values = r.f32s(p.values.size());
    }
    r.expect_end();
    return m;
  }

  void save(const std::filesystem::path& path) const { io::write_file_atomic(path, serialize()); }
  static ToyDenoiser load(const std::filesystem::path& path) { return deserialize(io::read_file(path)); }

 private:
  struct Forward {
    ad::Var out;
    std::map<std::size_t, ad::Var> taps;
  };

  enum P : std::size_t {
    kTW1, kTB1, kTW2, kTB2, kClassEmb,
    kStemW, kStemB, kEnc1W, kEnc1B, kEnc2W, kEnc2B, kMidW, kMidB,
    kDec1W, kDec1B, kA1Q, kA1K, kA1V, kA1O,
    kDec2W, kDec2B, kA2Q, kA2K, kA2V, kA2O,
    kDec3W, kDec3B, kA3Q, kA3K, kA3V, kA3O,
    kOutW, kOutB, kParamCount
  };

  void add_param(const std::string& name, std::vector<std::size_t> shape, double stddev, std::mt19937_64& rng) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    std::normal_distribution<double> dist(0.0, 1.0);
    std::vector<float> v(n, 0.0f);
    if (stddev > 0.0)
      for (auto& x : v) x = static_cast<float>(stddev * dist(rng));
    params_.push_back({name, std::move(shape), std::move(v)});
  }

  void init_params() {
    std::mt19937_64 rng(cfg_.seed);
    const std::size_t C = cfg_.latent_channels, c1 = cfg_.width, c2 = 2 * cfg_.width, E = kEmbedWidth;
    auto conv = [&](const std::string& n, std::size_t o, std::size_t i, double gain = 1.0) {
      add_param(n + ".w", {o, i, 3, 3}, gain / std::sqrt(9.0 * static_cast<double>(i)), rng);
      add_param(n + ".b", {o}, 0.0, rng);
    };
    auto attn = [&](const std::string& n, std::size_t c) {
      const double s = 1.0 / std::sqrt(static_cast<double>(c));
      add_param(n + ".q", {c, c}, s, rng);
      add_param(n + ".k", {c, c}, s, rng);
      add_param(n + ".v", {c, c}, s, rng);
      add_param(n + ".o", {c, c}, 0.5 * s, rng);
    };
    add_param("time.w1", {E, kTimeFeatures}, 1.0 / std::sqrt(static_cast<double>(kTimeFeatures)), rng);
    add_param("time.b1", {E}, 0.0, rng);
    add_param("time.w2", {c2, E}, 1.0 / std::sqrt(static_cast<double>(E)), rng);
    add_param("time.b2", {c2}, 0.0, rng);
    add_param("class.emb", {cfg_.num_classes + 1, c2}, 0.5, rng);
    conv("stem", c1, C);
    conv("enc1", c2, c1);
    conv("enc2", c2, c2);
    conv("mid", c2, c2);
    conv("dec1", c2, c2);
    attn("attn1", c2);
    conv("dec2", c1, c2);
    attn("attn2", c1);
    conv("dec3", c1, c1);
    attn("attn3", c1);
    conv("out", C, c1, 0.5);
  }

  std::vector<ad::Var> load_params(ad::Tape& tape, bool requires_grad) const {
    std::vector<ad::Var> vars;
    vars.reserve(params_.size());
    for (const auto& p : params_) {
      vars.push_back(tape.leaf(std::vector<double>(p.values.begin(), p.values.end()), p.shape, requires_grad));
    }
    return vars;
  }

  std::vector<double> time_features(std::size_t t) const {
    std::vector<double> f(kTimeFeatures);
    const std::size_t half = kTimeFeatures / 2;
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
      f[i] = std::sin(static_cast<double>(t) * freq);
      f[half + i] = std::cos(static_cast<double>(t) * freq);
    }
    return f;
  }

  Forward forward(ad::Tape& tp, const std::vector<ad::Var>& pv, ad::Var z, std::size_t t, const Condition& cond,
                  AttentionControl* attn, ad::AttentionCapture capture) const {
    check_condition(cond);
    const auto& zs = tp.shape(z);
    require(zs[0] == cfg_.latent_channels, ErrorKind::shape_mismatch, "latent channel count does not match model");
    require(zs[1] % 4 == 0 && zs[2] % 4 == 0 && zs[1] >= 4 && zs[2] >= 4, ErrorKind::shape_mismatch,
            "toy denoiser needs latent dims divisible by 4");

    // time + class embedding -> per-channel bias for the inner stages
    const auto tf = tp.leaf(time_features(t), {kTimeFeatures}, false);
    auto emb = ad::silu(tp, ad::linear(tp, tf, pv[kTW1], pv[kTB1]));
    emb = ad::linear(tp, emb, pv[kTW2], pv[kTB2]);
    emb = ad::add(tp, emb, class_row(tp, pv[kClassEmb], cond));

    const auto h0 = ad::silu(tp, ad::conv3x3(tp, z, pv[kStemW], pv[kStemB]));
    const auto h1 = ad::silu(tp, ad::conv3x3(tp, ad::avgpool2(tp, h0), pv[kEnc1W], pv[kEnc1B]));
    const auto h2 = ad::silu(tp, ad::conv3x3(tp, ad::avgpool2(tp, h1), pv[kEnc2W], pv[kEnc2B]));
    auto m = ad::silu(tp, ad::add_channel_bias(tp, h2, emb));
    m = ad::silu(tp, ad::conv3x3(tp, m, pv[kMidW], pv[kMidB]));

    Forward out;
    auto d1 = ad::silu(tp, ad::add_channel_bias(tp, ad::conv3x3(tp, m, pv[kDec1W], pv[kDec1B]), emb));
    d1 = ad::self_attention(tp, d1, {pv[kA1Q], pv[kA1K], pv[kA1V], pv[kA1O]}, 1, attn, capture);
    out.taps[1] = d1;

    auto d2 = ad::add(tp, ad::upsample2(tp, d1), h1);
    d2 = ad::silu(tp, ad::conv3x3(tp, d2, pv[kDec2W], pv[kDec2B]));
    d2 = ad::self_attention(tp, d2, {pv[kA2Q], pv[kA2K], pv[kA2V], pv[kA2O]}, 2, attn, capture);
    out.taps[2] = d2;

    auto d3 = ad::add(tp, ad::upsample2(tp, d2), h0);
    d3 = ad::silu(tp, ad::conv3x3(tp, d3, pv[kDec3W], pv[kDec3B]));
    d3 = ad::self_attention(tp, d3, {pv[kA3Q], pv[kA3K], pv[kA3V], pv[kA3O]}, 3, attn, capture);
    out.taps[3] = d3;

    out.out = ad::conv3x3(tp, d3, pv[kOutW], pv[kOutB]);
    return out;
  }

  // Selects the class row (the last row is the null token) as its own node.
  ad::Var class_row(ad::Tape& tp, ad::Var table, const Condition& cond) const {
    const std::size_t width = tp.shape(table)[1];
    const std::size_t row = cond.class_id ? static_cast<std::size_t>(*cond.class_id) : cfg_.num_classes;
    const auto& tv = tp.value(table);
    std::vector<double> v(tv.begin() + static_cast<long>(row * width), tv.begin() + static_cast<long>((row + 1) * width));
    return tp.node(std::move(v), {width}, tp.requires_grad(table), [=](ad::Tape& t) {
      const auto& g = t.current_grad();
      auto& gt = t.grad(table);
      for (std::size_t i = 0; i < width; ++i) gt[row * width + i] += g[i];
    });
  }

  static LatentGrid to_grid(const ad::Tape& tp, ad::Var v) {
    const auto& s = tp.shape(v);
    return LatentGrid(GridShape{s[0], s[1], s[2]}, tp.value(v));
  }

  ToyDenoiserConfig cfg_;
  std::vector<ParamTensor> params_;
};

// ---- training --------------------------------------------------------------

/// Synthetic two-class corpus of spectrogram-like latents: class 0 holds
/// horizontal tracks (steady tones), class 1 vertical tracks (broadband
/// clicks) over a flat background.
class SpectralTrackCorpus {
 public:
  SpectralTrackCorpus(GridShape shape, std::uint64_t seed) : shape_(shape), rng_(seed) {}

  const GridShape& shape() const { return shape_; }

  std::pair<LatentGrid, int> next() {
    std::uniform_int_distribution<int> cls(0, 1);
    const int c = cls(rng_);
    return {make(c), c};
  }

  LatentGrid make(int cls) {
    LatentGrid x(shape_, -0.5);
    const std::size_t extent = cls == 0 ? shape_.freq_len : shape_.time_len;
    std::uniform_int_distribution<std::size_t> pos(0, extent - 1);
    std::uniform_int_distribution<std::size_t> count(1, 2);
    std::uniform_real_distribution<double> gain(0.6, 1.4);
    const std::size_t n = count(rng_);
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t p = pos(rng_);
      for (std::size_t ch = 0; ch < shape_.channels; ++ch) {
        const double g = gain(rng_);
        for (std::size_t i = 0; i < (cls == 0 ? shape_.time_len : shape_.freq_len); ++i) {
          if (cls == 0)
            x.at(ch, i, p) = g;
          else
            x.at(ch, p, i) = g;
        }
      }
    }
    return x;
  }

 private:
  GridShape shape_;
  std::mt19937_64 rng_;
};

struct TrainConfig {
  std::size_t steps = 5000;
  std::size_t batch = 1;
  double learning_rate = 2e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double cond_dropout = 0.1;
  std::uint64_t seed = 0;
};

struct TrainResult {
  std::vector<double> loss_trace;
};

/// Sample source for training: returns (x0, class id).
using TrainingSampler = std::function<std::pair<LatentGrid, int>()>;

/// Denoising training with Adam. Targets follow the model's prediction kind.
inline TrainResult toy_train(ToyDenoiser& model, const TrainingSampler& data, const NoiseSchedule& schedule,
                             const TrainConfig& cfg) {
  TrainResult res;
  if (cfg.steps == 0) return res;
  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> tdist(1, schedule.steps());
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> n01(0.0, 1.0);

  auto& params = model.params();
  std::vector<std::vector<double>> m(params.size()), v(params.size()), master(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    m[i].assign(params[i].values.size(), 0.0);
    v[i].assign(params[i].values.size(), 0.0);
    master[i].assign(params[i].values.begin(), params[i].values.end());
  }
  std::optional<GridShape> shape;
  std::vector<std::vector<double>> grads;
  res.loss_trace.reserve(cfg.steps);
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    for (auto& g : grads) std::fill(g.begin(), g.end(), 0.0);
    double loss = 0.0;
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      auto [x0, cls] = data();
      if (!shape) shape = x0.shape();
      require(x0.shape() == *shape, ErrorKind::shape_mismatch,
              "training sample shape drifted from " + shape->str() + " to " + x0.shape().str());
      const std::size_t t = tdist(rng);
      LatentGrid eps(x0.shape());
      for (auto& e : eps.storage()) e = n01(rng);
      const LatentGrid xt = q_sample(x0, t, eps, schedule);
      const Condition cond = u(rng) < cfg.cond_dropout ? Condition::null() : Condition::label(cls);
      const LatentGrid target =
          model.kind() == PredictionKind::epsilon
              ? eps
              : convert_prediction(eps, PredictionKind::epsilon, TargetKind::v, xt, t, schedule);
      loss += model.loss_and_grad(xt, t, cond, target, grads);
    }
    const double inv_b = 1.0 / static_cast<double>(cfg.batch);
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
    for (std::size_t i = 0; i < params.size(); ++i) {
      for (std::size_t k = 0; k < params[i].values.size(); ++k) {
        const double g = grads[i][k] * inv_b;
        m[i][k] = cfg.beta1 * m[i][k] + (1.0 - cfg.beta1) * g;
        v[i][k] = cfg.beta2 * v[i][k] + (1.0 - cfg.beta2) * g * g;
        master[i][k] -= cfg.learning_rate * (m[i][k] / bc1) / (std::sqrt(v[i][k] / bc2) + 1e-8);
        params[i].values[k] = static_cast<float>(master[i][k]);
      }
    }
    res.loss_trace.push_back(loss * inv_b);
  }
  return res;
}

/// Mean of the first / last `window` entries of a loss trace.
inline std::pair<double, double> smoothed_endpoints(const std::vector<double>& trace, std::size_t window = 100) {
  require(!trace.empty(), ErrorKind::invalid_argument, "empty loss trace");
  const std::size_t w = std::min(window, trace.size());
  double a = 0.0, b = 0.0;
  for (std::size_t i = 0; i < w; ++i) {
    a += trace[i];
    b += trace[trace.size() - 1 - i];
  }
  return {a / static_cast<double>(w), b / static_cast<double>(w)};
}

inline std::string loss_trace_csv(const std::vector<double>& trace) {
  std::ostringstream os;
  os.precision(9);
  os << "step,loss\n";
  for (std::size_t i = 0; i < trace.size(); ++i) os << (i + 1) << "," << trace[i] << "\n";
  return os.str();
}

}  // namespace morphix
