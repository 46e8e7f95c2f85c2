// Copyright 2026 The Morphix Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "morphix/analytic_model.hpp"
#include "morphix/audio.hpp"
#include "morphix/binary_io.hpp"
#include "morphix/editor.hpp"
#include "morphix/hash.hpp"
#include "morphix/toy_denoiser.hpp"

namespace morphix {

/// Which score model backs edits.
struct ModelSpec {
  std::string kind = "analytic";  // analytic | toy
  double mean = 0.0;              // analytic: constant prior mean
  double variance = 1.0;          // analytic: prior variance
  std::string checkpoint;         // toy: checkpoint path
};

struct ServiceConfig {
  int port = 8080;
  std::size_t workers = 2;
  std::string data_dir = "morphix-data";
};

struct AppConfig {
  ModelSpec model;
  SamplerConfig sampler;
  GuidanceWeights guidance;
  MorphConfig morph;
  StftConfig stft;
  GriffinLimConfig griffin_lim;
  ServiceConfig service;
};

/// Reads the JSON config (sections model, sampler, guidance, morph, stft,
/// griffin_lim, service); missing sections keep defaults. With the analytic
/// model the guidance layers default to its single tap. MORPHIX_DATA_DIR
/// overrides service.data_dir.
inline AppConfig app_config_from_json(const nlohmann::json& j) {
  require(j.is_object(), ErrorKind::invalid_argument, "config must be a JSON object");
  AppConfig c;
  try {
    if (j.contains("model")) {
      const auto& m = j.at("model");
      if (m.contains("kind")) c.model.kind = m.at("kind").get<std::string>();
      if (m.contains("mean")) c.model.mean = m.at("mean").get<double>();
      if (m.contains("variance")) c.model.variance = m.at("variance").get<double>();
      if (m.contains("checkpoint")) c.model.checkpoint = m.at("checkpoint").get<std::string>();
    }
    require(c.model.kind == "analytic" || c.model.kind == "toy", ErrorKind::invalid_argument,
            "model.kind must be analytic or toy");
    if (j.contains("sampler")) c.sampler = sampler_config_from_json(j.at("sampler"));
    const bool layers_given = j.contains("guidance") && j.at("guidance").contains("layers");
    if (!layers_given && c.model.kind == "analytic") c.guidance.tap_layers = {AnalyticGaussianModel::kTapLayer};
    if (j.contains("guidance")) c.guidance = guidance_weights_from_json(j.at("guidance"), c.guidance);
    if (j.contains("morph")) c.morph = morph_config_from_json(j.at("morph"));
    if (j.contains("stft")) {
      const auto& s = j.at("stft");
      if (s.contains("n_fft")) c.stft.n_fft = s.at("n_fft").get<std::uint32_t>();
      if (s.contains("hop")) c.stft.hop = s.at("hop").get<std::uint32_t>();
      c.stft.validate();
    }
    if (j.contains("griffin_lim")) {
      const auto& g = j.at("griffin_lim");
      if (g.contains("iters")) c.griffin_lim.iters = g.at("iters").get<std::size_t>();
      if (g.contains("momentum")) c.griffin_lim.momentum = g.at("momentum").get<double>();
    }
    if (j.contains("service")) {
      const auto& s = j.at("service");
      if (s.contains("port")) c.service.port = s.at("port").get<int>();
      if (s.contains("workers")) c.service.workers = s.at("workers").get<std::size_t>();
      if (s.contains("data_dir")) c.service.data_dir = s.at("data_dir").get<std::string>();
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::invalid_argument, std::string("config: ") + e.what());
  }
  if (const char* env = std::getenv("MORPHIX_DATA_DIR"); env && *env) c.service.data_dir = env;
  require(c.service.workers >= 1, ErrorKind::invalid_argument, "service.workers must be >= 1");
  return c;
}

inline AppConfig load_app_config(const std::optional<std::filesystem::path>& path) {
  if (!path) return app_config_from_json(nlohmann::json::object());
  const auto bytes = io::read_file(*path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, std::string("config parse: ") + e.what());
  }
  return app_config_from_json(j);
}

/// Loaded model plus the schedule it samples with. The toy model is loaded
/// once and shared; the analytic model is built per latent shape.
class ModelHandle {
 public:
  ModelHandle(const ModelSpec& spec, const ScheduleConfig& sc)
      : spec_(spec), schedule_(make_schedule(sc.steps, sc.shape)) {
    if (spec_.kind == "toy") {
      require(!spec_.checkpoint.empty(), ErrorKind::invalid_argument, "toy model needs model.checkpoint");
      const auto bytes = io::read_file(spec_.checkpoint);
      toy_ = std::make_shared<const ToyDenoiser>(ToyDenoiser::deserialize(bytes));
      digest_ = sha256_hex(bytes);
    } else {
      require(spec_.variance >= 0.0, ErrorKind::invalid_argument, "analytic variance must be >= 0");
      std::ostringstream os;
      os.precision(17);
      os << "analytic:mean=" << spec_.mean << ";variance=" << spec_.variance << ";T=" << sc.steps
         << ";shape=" << to_string(sc.shape);
      digest_ = sha256_hex(os.str());
    }
  }

  std::shared_ptr<const ScoreModel> model_for(const GridShape& latent) const {
    if (toy_) {
      require(latent.channels == toy_->config().latent_channels, ErrorKind::shape_mismatch,
              "toy model expects " + std::to_string(toy_->config().latent_channels) + " latent channels");
      require(latent.time_len % 4 == 0 && latent.freq_len % 4 == 0, ErrorKind::shape_mismatch,
              "toy model needs latent dims divisible by 4, got " + latent.str());
      return toy_;
    }
    return std::make_shared<AnalyticGaussianModel>(LatentGrid(latent, spec_.mean), spec_.variance, schedule_);
  }

  const NoiseSchedule& schedule() const { return schedule_; }
  const std::string& digest() const { return digest_; }

 private:
  ModelSpec spec_;
  NoiseSchedule schedule_;
  std::shared_ptr<const ToyDenoiser> toy_;
  std::string digest_;
};

struct SpectralEditResult {
  Spectrogram spectrogram;
  LatentGrid latent;
  EditOutcome outcome;
  nlohmann::json provenance;
  double seconds = 0.0;
};

/// Operands of a spectrogram-level edit; masks in the request are at
/// spectrogram resolution.
struct SpectralEditInputs {
  Spectrogram source;
  std::optional<Spectrogram> reference;
  std::optional<Spectrogram> reference_in;
  std::vector<TrajectoryBank> banks;  // optional precomputed inversions
};

/// Moves a request's masks and transform to the latent grid of `s`.
inline EditRequest request_to_latent(const EditRequest& req, const Spectrogram& s) {
  EditRequest r = req;
  r.mask_c = mask_to_latent(req.mask_c, s);
  if (req.mask_r.cells() > 0) r.mask_r = mask_to_latent(req.mask_r, s);
  if (req.mask_r_in) r.mask_r_in = mask_to_latent(*req.mask_r_in, s);
  if (req.transform && req.transform->kind != MaskTransform::Kind::scale_time) {
    r.transform->amount = std::round(req.transform->amount / static_cast<double>(kBridgeFactor));
  }
  return r;
}

/// Full edit on spectrograms: bridge to latents, edit, and apply the latent
/// change back onto the source spectrogram as a residual.
inline SpectralEditResult run_spectral_edit(const EditRequest& req, const SpectralEditInputs& in,
                                            const ModelHandle& handle) {
  const auto t0 = std::chrono::steady_clock::now();
  req.validate();
  in.source.validate();
  for (const auto* other : {in.reference ? &*in.reference : nullptr, in.reference_in ? &*in.reference_in : nullptr}) {
    if (other) {
      require(other->same_geometry(in.source), ErrorKind::shape_mismatch, "reference geometry differs from source");
    }
  }
  const EditRequest lreq = request_to_latent(req, in.source);
  EditInputs li{spectrogram_to_latent(in.source), std::nullopt, std::nullopt, in.banks};
  if (in.reference) li.reference = spectrogram_to_latent(*in.reference);
  if (in.reference_in) li.reference_in = spectrogram_to_latent(*in.reference_in);
  const auto model = handle.model_for(li.source.shape());
  const Editor editor(*model, handle.schedule());

  SpectralEditResult res;
  res.outcome = editor.run(lreq, li);
  res.latent = res.outcome.latent;
  res.spectrogram = apply_latent_residual(in.source, li.source, res.latent);
  res.provenance = {{"request_sha256", sha256_hex(to_json(req).dump())},
                    {"seed", req.sampler.seed},
                    {"model_sha256", handle.digest()},
                    {"source_sha256", sha256_hex(serialize(in.source))}};
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

/// Request defaults taken from the config sections.
inline EditRequest request_defaults(const AppConfig& c) {
  EditRequest r;
  r.sampler = c.sampler;
  r.weights = c.guidance;
  r.morph = c.morph;
  r.alpha = c.morph.alpha;
  return r;
}

}  // namespace morphix
