// Copyright 2026 The Morphix Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "morphix/binary_io.hpp"
#include "morphix/error.hpp"
#include "morphix/latent.hpp"
#include "morphix/score_model.hpp"

namespace morphix {

/// Per-(step, layer) memory of self-attention keys/values plus the latent
/// trajectory, indexed by sampling-step ordinal: ordinal k is the k-th
/// denoising step, whose input latent sits at ladder[N - k]. Latent ordinal N
/// is the clean end of the trajectory.
///
/// A bank is written by one job and then treated as read-only.
class TrajectoryBank {
 public:
  static constexpr std::uint32_t kVersion = 1;

  TrajectoryBank() = default;
  TrajectoryBank(std::size_t num_steps, std::vector<std::size_t> layers, std::set<std::size_t> substitution = {2, 3})
      : num_steps_(num_steps), layers_(std::move(layers)), substitution_(std::move(substitution)) {
    std::sort(layers_.begin(), layers_.end());
    require(std::adjacent_find(layers_.begin(), layers_.end()) == layers_.end(), ErrorKind::invalid_argument,
            "duplicate layer in bank layer list");
  }

  std::size_t num_steps() const { return num_steps_; }
  const std::vector<std::size_t>& layers() const { return layers_; }
  const std::set<std::size_t>& substitution() const { return substitution_; }
  void set_substitution(std::set<std::size_t> s) { substitution_ = std::move(s); }
  std::size_t size() const { return records_.size(); }

  bool complete() const { return records_.size() == num_steps_ * layers_.size(); }

  bool has_layer(std::size_t layer) const { return std::binary_search(layers_.begin(), layers_.end(), layer); }

  void record(std::size_t step, std::size_t layer, AttentionKV kv) {
    require(step < num_steps_, ErrorKind::invalid_argument,
            "bank step " + std::to_string(step) + " outside [0," + std::to_string(num_steps_) + ")");
    require(has_layer(layer), ErrorKind::invalid_argument, "bank does not track layer " + std::to_string(layer));
    const auto [it, inserted] = records_.emplace(std::make_pair(step, layer), std::move(kv));
    require(inserted, ErrorKind::invalid_argument,
            "duplicate bank record at step " + std::to_string(step) + ", layer " + std::to_string(layer));
  }

  const AttentionKV* find(std::size_t step, std::size_t layer) const {
    const auto it = records_.find({step, layer});
    return it == records_.end() ? nullptr : &it->second;
  }

  /// Cached K/V for substitution layers, native K/V otherwise.
  AttentionKV inject(std::size_t step, std::size_t layer, const AttentionKV& native) const {
    if (!substitution_.contains(layer)) return native;
    const auto* rec = find(step, layer);
    require(rec != nullptr, ErrorKind::not_found,
            "bank has no record at step " + std::to_string(step) + ", layer " + std::to_string(layer));
    require(rec->tokens == native.tokens && rec->dim == native.dim, ErrorKind::shape_mismatch,
            "cached K/V geometry differs at step " + std::to_string(step) + ", layer " + std::to_string(layer));
    return *rec;
  }

  void record_latent(std::size_t ordinal, const LatentGrid& z) {
    require(ordinal <= num_steps_, ErrorKind::invalid_argument, "latent ordinal out of range");
    latents_[ordinal] = z;
  }
  bool has_latent(std::size_t ordinal) const { return latents_.contains(ordinal); }
  const LatentGrid& latent(std::size_t ordinal) const {
    const auto it = latents_.find(ordinal);
    require(it != latents_.end(), ErrorKind::not_found, "bank has no latent at ordinal " + std::to_string(ordinal));
    return it->second;
  }
  bool latents_complete() const { return latents_.size() == num_steps_ + 1; }

  bool operator==(const TrajectoryBank&) const = default;

  // ---- serialization ------------------------------------------------------

  std::vector<std::uint8_t> serialize() const {
    io::Writer w;
    w.magic("MRXB");
    w.u32(kVersion);
    w.u32(static_cast<std::uint32_t>(num_steps_));
    w.u32(static_cast<std::uint32_t>(layers_.size()));
    for (auto l : layers_) w.u32(static_cast<std::uint32_t>(l));
    w.u32(static_cast<std::uint32_t>(substitution_.size()));
    for (auto l : substitution_) w.u32(static_cast<std::uint32_t>(l));
    w.u32(static_cast<std::uint32_t>(records_.size()));
    for (const auto& [key, kv] : records_) {
      w.u32(static_cast<std::uint32_t>(key.first));
      w.u32(static_cast<std::uint32_t>(key.second));
      w.u32(static_cast<std::uint32_t>(kv.tokens));
      w.u32(static_cast<std::uint32_t>(kv.dim));
      w.f32s(kv.keys);
      w.f32s(kv.values);
    }
    w.u32(static_cast<std::uint32_t>(latents_.size()));
    for (const auto& [ord, z] : latents_) {
      w.u32(static_cast<std::uint32_t>(ord));
      w.u32(static_cast<std::uint32_t>(z.channels()));
      w.u32(static_cast<std::uint32_t>(z.time_len()));
      w.u32(static_cast<std::uint32_t>(z.freq_len()));
      w.f64s(z.values());
    }
    return w.take();
  }

  static TrajectoryBank deserialize(std::span<const std::uint8_t> bytes) {
    io::Reader r(bytes, "bank");
    r.expect_magic("MRXB");
    const auto version = r.u32();
    require(version == kVersion, ErrorKind::format, "bank version " + std::to_string(version) + " unsupported");
    const std::size_t steps = r.u32();
    std::vector<std::size_t> layers(r.u32());
    for (auto& l : layers) l = r.u32();
    std::set<std::size_t> subs;
    for (auto n = r.u32(); n > 0; --n) subs.insert(r.u32());
    TrajectoryBank bank(steps, std::move(layers), std::move(subs));
    try {
      for (auto n = r.u32(); n > 0; --n) {
        const std::size_t step = r.u32(), layer = r.u32();
        AttentionKV kv;
        kv.tokens = r.u32();
        kv.dim = r.u32();
        kv.keys = r.f32s(kv.tokens * kv.dim);
        kv.values = r.f32s(kv.tokens * kv.dim);
        bank.record(step, layer, std::move(kv));
      }
      for (auto n = r.u32(); n > 0; --n) {
        const std::size_t ord = r.u32();
        GridShape shape;
        shape.channels = r.u32();
        shape.time_len = r.u32();
        shape.freq_len = r.u32();
        require(shape.size() > 0, ErrorKind::format, "bank latent has empty shape");
        bank.record_latent(ord, LatentGrid(shape, r.f64s(shape.size())));
      }
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::format) throw;
      fail(ErrorKind::format, std::string("bank content invalid: ") + e.what());
    }
    r.expect_end();
    return bank;
  }

  void save(const std::filesystem::path& path) const { io::write_file_atomic(path, serialize()); }
  static TrajectoryBank load(const std::filesystem::path& path) { return deserialize(io::read_file(path)); }

 private:
  std::size_t num_steps_ = 0;
  std::vector<std::size_t> layers_;
  std::set<std::size_t> substitution_;
  std::map<std::pair<std::size_t, std::size_t>, AttentionKV> records_;
  std::map<std::size_t, LatentGrid> latents_;
};

/// Attention hook that stores native K/V into a bank at the current step.
class BankRecorder final : public AttentionControl {
 public:
  explicit BankRecorder(TrajectoryBank& bank) : bank_(bank) {}
  void set_step(std::size_t step) { step_ = step; }
  bool on_attention(std::size_t layer, AttentionKV& kv) override {
    if (bank_.has_layer(layer)) bank_.record(step_, layer, kv);
    return false;
  }

 private:
  TrajectoryBank& bank_;
  std::size_t step_ = 0;
};

/// Attention hook that substitutes cached K/V on the bank's substitution layers.
/// Queries always stay native.
class BankInjector final : public AttentionControl {
 public:
  explicit BankInjector(const TrajectoryBank& bank) : bank_(bank) {}
  void set_step(std::size_t step) { step_ = step; }
  bool on_attention(std::size_t layer, AttentionKV& kv) override {
    if (!bank_.substitution().contains(layer)) return false;
    kv = bank_.inject(step_, layer, kv);
    return true;
  }

 private:
  const TrajectoryBank& bank_;
  std::size_t step_ = 0;
};

}  // namespace morphix
