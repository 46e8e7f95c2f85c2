// Copyright 2026 The Morphix Authors
// SPDX-License-Identifier: Apache-2.0

// Pastes a 1 kHz burst from one clip into another, then moves it later in
// time. Writes spectrogram renders and Griffin-Lim audio for each stage.
//
//   tone_edit [out_dir]

#include <cmath>
#include <filesystem>
#include <iostream>
#include <numbers>

#include "morphix/metrics.hpp"
#include "morphix/pipeline.hpp"

using namespace morphix;

namespace {

Waveform tone(double hz, double start, double stop, double amp) {
  Waveform w{8000, std::vector<double>(8000 * 2)};
  for (std::size_t i = 0; i < w.samples.size(); ++i) {
    const double t = static_cast<double>(i) / w.sample_rate;
    w.samples[i] = 0.02 * std::sin(2 * std::numbers::pi * 220 * t);
    if (t >= start && t < stop) w.samples[i] += amp * std::sin(2 * std::numbers::pi * hz * t);
  }
  return w;
}

}  // namespace

int main(int argc, char** argv) {
  const std::filesystem::path out = argc > 1 ? argv[1] : "tone_edit_out";
  std::filesystem::create_directories(out);

  AppConfig cfg = app_config_from_json({{"stft", {{"n_fft", 256}, {"hop", 64}}}, {"sampler", {{"steps", 25}}}});
  const ModelHandle handle(cfg.model, cfg.sampler.schedule);

  const Spectrogram source = stft(tone(440, 0.0, 0.0, 0.0), cfg.stft);
  const Spectrogram reference = stft(tone(1000, 0.5, 1.0, 0.4), cfg.stft);

  // Region around the burst: 0.5-1.0 s, 875-1125 Hz.
  const auto frame = [&](double sec) { return static_cast<std::size_t>(sec * 8000 / cfg.stft.hop); };
  const auto bin = [&](double hz) { return static_cast<std::size_t>(hz * cfg.stft.n_fft / 8000); };
  TFMask region(source.frames, source.bins, false);
  region.fill_rect(frame(0.5), frame(1.0), bin(875), bin(1125));

  EditRequest add = request_defaults(cfg);
  add.kind = EditKind::add;
  add.source = "source";
  add.reference = "reference";
  add.mask_c = region;
  add.mask_r = region;
  add.alpha = 0.7;
  const auto added = run_spectral_edit(add, {source, reference, std::nullopt, {}}, handle);

  EditRequest move = request_defaults(cfg);
  move.kind = EditKind::move;
  move.source = "added";
  move.mask_c = region;
  move.transform = MaskTransform::translate_time(static_cast<double>(frame(0.5)));
  const auto moved = run_spectral_edit(move, {added.spectrogram, std::nullopt, std::nullopt, {}}, handle);

  TFMask later(source.frames, source.bins, false);
  later.fill_rect(frame(1.0), frame(1.5), bin(875), bin(1125));

  io::write_file_atomic(out / "source.png", render_png(source, &region));
  io::write_file_atomic(out / "added.png", render_png(added.spectrogram, &region));
  io::write_file_atomic(out / "moved.png", render_png(moved.spectrogram, nullptr));
  save_wav(out / "added.wav", griffin_lim(added.spectrogram, cfg.griffin_lim));
  save_wav(out / "moved.wav", griffin_lim(moved.spectrogram, cfg.griffin_lim));

  std::cout << "add:  stages " << added.outcome.stages.size() << ", " << added.seconds << " s\n"
            << "move: stages " << moved.outcome.stages.size() << ", " << moved.seconds << " s\n"
            << "region log-magnitude RMS before/after add: " << region_rms(source, region, true) << " / "
            << region_rms(added.spectrogram, region, true) << "\n"
            << "after move, old/new region: " << region_rms(moved.spectrogram, region, true) << " / "
            << region_rms(moved.spectrogram, later, true) << "\n"
            << "wrote " << out.string() << "\n";
}
