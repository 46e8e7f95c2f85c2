// Copyright 2026 The Morphix Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <mutex>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "morphix/attention_cache.hpp"
#include "morphix/audio.hpp"
#include "morphix/binary_io.hpp"
#include "morphix/error.hpp"
#include "morphix/hash.hpp"
#include "morphix/toy_denoiser.hpp"

namespace morphix {

enum class AssetKind { waveform, spectrogram, latent, bank, checkpoint };

inline const char* to_string(AssetKind k) {
  switch (k) {
    case AssetKind::waveform: return "waveform";
    case AssetKind::spectrogram: return "spectrogram";
    case AssetKind::latent: return "latent";
    case AssetKind::bank: return "bank";
    case AssetKind::checkpoint: return "checkpoint";
  }
  return "?";
}

inline AssetKind asset_kind_from_string(const std::string& s) {
  for (auto k : {AssetKind::waveform, AssetKind::spectrogram, AssetKind::latent, AssetKind::bank,
                 AssetKind::checkpoint}) {
    if (s == to_string(k)) return k;
  }
  fail(ErrorKind::format, "unknown asset kind '" + s + "'");
}

/// Identifies an asset by its magic and fully parses it, so malformed uploads
/// are rejected before they reach the store.
inline AssetKind detect_asset_kind(std::span<const std::uint8_t> b) {
  auto starts = [&](std::string_view m) {
    return b.size() >= m.size() && std::equal(m.begin(), m.end(), b.begin(),
                                              [](char c, std::uint8_t u) { return static_cast<std::uint8_t>(c) == u; });
  };
  if (starts("SPG1")) {
    deserialize_spectrogram(b).validate();
    return AssetKind::spectrogram;
  }
  if (starts("RIFF")) {
    decode_wav(b);
    return AssetKind::waveform;
  }
  if (starts("MRXL")) {
    deserialize_latent(b);
    return AssetKind::latent;
  }
  if (starts("MRXB")) {
    TrajectoryBank::deserialize(b);
    return AssetKind::bank;
  }
  if (starts("MRXM")) {
    ToyDenoiser::deserialize(b);
    return AssetKind::checkpoint;
  }
  fail(ErrorKind::format, "unrecognized asset format");
}

inline bool is_asset_id(std::string_view s) {
  return s.size() == 64 && std::all_of(s.begin(), s.end(), [](char c) {
           return (c >= '0' && c <= '9') || (c >= 'a' && c <= 'f');
         });
}

/// Content-addressed asset directory: <root>/assets/<sha256> holds the bytes
/// and <sha256>.json the metadata. Assets are immutable once written.
class AssetStore {
 public:
  explicit AssetStore(const std::filesystem::path& root) : dir_(root / "assets") {
    std::filesystem::create_directories(dir_);
  }

  const std::filesystem::path& dir() const { return dir_; }

  std::string put(std::span<const std::uint8_t> bytes, const nlohmann::json& extra = nlohmann::json::object()) {
    const AssetKind kind = detect_asset_kind(bytes);
    const std::string id = sha256_hex(bytes);
    std::lock_guard lock(mu_);
    if (!std::filesystem::exists(file(id))) {
      nlohmann::json meta = {{"id", id}, {"kind", to_string(kind)}, {"size", bytes.size()}, {"metadata", extra}};
      io::write_text_atomic(meta_file(id), meta.dump(2) + "\n");
      io::write_file_atomic(file(id), bytes);
    }
    return id;
  }

  bool contains(const std::string& id) const { return is_asset_id(id) && std::filesystem::exists(file(id)); }

  std::vector<std::uint8_t> get(const std::string& id) const {
    require(contains(id), ErrorKind::not_found, "unknown asset " + id);
    return io::read_file(file(id));
  }

  nlohmann::json metadata(const std::string& id) const {
    require(contains(id), ErrorKind::not_found, "unknown asset " + id);
    const auto bytes = io::read_file(meta_file(id));
    try {
      return nlohmann::json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::format, "asset metadata " + id + ": " + e.what());
    }
  }

  AssetKind kind(const std::string& id) const {
    return asset_kind_from_string(metadata(id).at("kind").get<std::string>());
  }

  /// Spectrogram view of an audio asset; waveforms go through the STFT.
  Spectrogram spectrogram(const std::string& id, const StftConfig& stft) const {
    const auto bytes = get(id);
    switch (detect_asset_kind(bytes)) {
      case AssetKind::spectrogram: return deserialize_spectrogram(bytes);
      case AssetKind::waveform: return morphix::stft(decode_wav(bytes), stft);
      default: fail(ErrorKind::invalid_argument, "asset " + id + " is not audio");
    }
  }

  std::filesystem::path file(const std::string& id) const { return dir_ / id; }

 private:
  std::filesystem::path meta_file(const std::string& id) const { return dir_ / (id + ".json"); }

  std::filesystem::path dir_;
  std::mutex mu_;
};

/// Audio operand named either by asset id (looked up in `store` when given)
/// or by file path relative to `base`. SPG1 and WAV files are accepted.
inline Spectrogram load_audio_operand(const std::string& ref, const AssetStore* store,
                                      const std::filesystem::path& base, const StftConfig& stft) {
  if (store && store->contains(ref)) return store->spectrogram(ref, stft);
  std::filesystem::path p(ref);
  if (p.is_relative()) p = base / p;
  const auto bytes = io::read_file(p);
  switch (detect_asset_kind(bytes)) {
    case AssetKind::spectrogram: return deserialize_spectrogram(bytes);
    case AssetKind::waveform: return morphix::stft(decode_wav(bytes), stft);
    default: fail(ErrorKind::invalid_argument, p.string() + " is not audio (need SPG1 or WAV)");
  }
}

}  // namespace morphix
