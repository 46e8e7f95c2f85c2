// Copyright 2026 The Morphix Authors
// SPDX-License-Identifier: Apache-2.0

// morphix: command-line front end for inversion, edits, rendering and the
// HTTP job service.

#include <csignal>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "morphix/bench.hpp"
#include "morphix/pipeline.hpp"
#include "morphix/service.hpp"
#include "morphix/store.hpp"

namespace fs = std::filesystem;
using namespace morphix;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitArgs = 2;
constexpr int kExitFormat = 3;
constexpr int kExitCompute = 4;

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::format: return kExitFormat;
    case ErrorKind::compute:
    case ErrorKind::degenerate_geometry: return kExitCompute;
    default: return kExitArgs;
  }
}

struct Common {
  std::optional<std::string> config;
  std::optional<std::uint64_t> seed;

  AppConfig load() const {
    AppConfig c = load_app_config(config ? std::optional<fs::path>(*config) : std::nullopt);
    if (seed) {
      c.sampler.seed = *seed;
      c.griffin_lim.seed = *seed;
    }
    return c;
  }
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "JSON config file");
  sub->add_option("--seed", c.seed, "RNG seed");
}

Spectrogram load_audio(const std::string& path, const StftConfig& stft) {
  return load_audio_operand(path, nullptr, fs::current_path(), stft);
}

void write_text(const fs::path& p, const std::string& s) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  io::write_text_atomic(p, s);
}

Service* g_service = nullptr;
void on_signal(int) {
  if (g_service) g_service->stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"morphix: training-free audio editing in latent space"};
  app.require_subcommand(1);

  // invert
  Common inv_c;
  std::string inv_in, inv_latent, inv_bank;
  std::optional<int> inv_class;
  auto* inv = app.add_subcommand("invert", "Invert audio to its noise latent and record the trajectory bank");
  add_common(inv, inv_c);
  inv->add_option("--input", inv_in, "SPG1 or WAV input")->required();
  inv->add_option("--out-latent", inv_latent, "output noise latent (MRXL)")->required();
  inv->add_option("--out-bank", inv_bank, "output trajectory bank (MRXB)")->required();
  inv->add_option("--class", inv_class, "class condition");

  // edit
  Common ed_c;
  std::string ed_req, ed_out;
  std::optional<std::string> ed_assets, ed_trace;
  std::vector<std::string> ed_banks;
  auto* ed = app.add_subcommand("edit", "Run an edit request");
  add_common(ed, ed_c);
  ed->add_option("--request", ed_req, "edit request JSON")->required();
  ed->add_option("--out", ed_out, "output directory")->required();
  ed->add_option("--assets", ed_assets, "asset store root for resolving ids");
  ed->add_option("--bank", ed_banks, "precomputed trajectory bank (repeatable)");
  ed->add_option("--trace", ed_trace, "write the removal optimizer trace CSV here");

  // render
  Common rd_c;
  std::string rd_in, rd_out;
  std::optional<std::string> rd_mask;
  auto* rd = app.add_subcommand("render", "Render a spectrogram to PNG");
  add_common(rd, rd_c);
  rd->add_option("--input", rd_in, "SPG1 or WAV input")->required();
  rd->add_option("--out", rd_out, "output PNG")->required();
  rd->add_option("--mask", rd_mask, "mask JSON to overlay");

  // gl
  Common gl_c;
  std::string gl_in, gl_out;
  std::optional<std::size_t> gl_iters;
  auto* gl = app.add_subcommand("gl", "Reconstruct a waveform from a spectrogram");
  add_common(gl, gl_c);
  gl->add_option("--input", gl_in, "SPG1 input")->required();
  gl->add_option("--out", gl_out, "output WAV")->required();
  gl->add_option("--iters", gl_iters, "phase reconstruction iterations");

  // bench
  Common bn_c;
  std::string bn_set, bn_out;
  std::optional<std::string> bn_json;
  std::optional<std::size_t> bn_generate, bn_limit;
  auto* bn = app.add_subcommand("bench", "Run an edit set and write per-triple metrics");
  add_common(bn, bn_c);
  bn->add_option("--editset", bn_set, "edit set directory")->required();
  bn->add_option("--out", bn_out, "metrics CSV")->required();
  bn->add_option("--json", bn_json, "metrics JSON");
  bn->add_option("--generate", bn_generate, "first write a synthetic edit set of this size");
  bn->add_option("--limit", bn_limit, "run only the first N triples");

  // train-toy
  Common tr_c;
  std::string tr_out;
  std::optional<std::string> tr_trace;
  std::size_t tr_steps = 5000, tr_size = 32;
  double tr_lr = 2e-3;
  auto* tr = app.add_subcommand("train-toy", "Train the toy denoiser on the synthetic corpus");
  add_common(tr, tr_c);
  tr->add_option("--out", tr_out, "output checkpoint (MRXM)")->required();
  tr->add_option("--trace", tr_trace, "loss trace CSV");
  tr->add_option("--steps", tr_steps, "training steps")->capture_default_str();
  tr->add_option("--size", tr_size, "latent time and frequency length")->capture_default_str();
  tr->add_option("--lr", tr_lr, "Adam learning rate")->capture_default_str();

  // serve
  Common sv_c;
  std::optional<int> sv_port;
  std::optional<std::size_t> sv_workers;
  std::optional<std::string> sv_dir;
  std::string sv_host = "127.0.0.1";
  auto* sv = app.add_subcommand("serve", "Run the HTTP job service");
  add_common(sv, sv_c);
  sv->add_option("--host", sv_host, "bind address")->capture_default_str();
  sv->add_option("--port", sv_port, "port");
  sv->add_option("--workers", sv_workers, "worker threads");
  sv->add_option("--data-dir", sv_dir, "asset and job directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitArgs;
  }

  try {
    if (*inv) {
      const AppConfig cfg = inv_c.load();
      const Spectrogram s = load_audio(inv_in, cfg.stft);
      const ModelHandle handle(cfg.model, cfg.sampler.schedule);
      const LatentGrid z0 = spectrogram_to_latent(s);
      const auto model = handle.model_for(z0.shape());
      EditRequest req = request_defaults(cfg);
      req.class_id = inv_class;
      auto [zT, bank] = Editor(*model, handle.schedule()).invert(z0, req);
      save_latent(inv_latent, zT);
      bank.save(inv_bank);
      std::cout << nlohmann::json{{"latent", sha256_hex(serialize(zT))}, {"bank", sha256_hex(bank.serialize())}}.dump()
                << "\n";
    } else if (*ed) {
      const AppConfig cfg = ed_c.load();
      const auto text = io::read_file(ed_req);
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(text.begin(), text.end());
      } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::format, std::string("request: ") + e.what());
      }
      EditRequest req = edit_request_from_json(j, request_defaults(cfg));
      if (ed_c.seed) req.sampler.seed = *ed_c.seed;
      std::optional<AssetStore> store;
      if (ed_assets) store.emplace(*ed_assets);
      const fs::path base = fs::path(ed_req).parent_path();
      SpectralEditInputs in;
      in.source = load_audio_operand(req.source, store ? &*store : nullptr, base, cfg.stft);
      if (req.reference) in.reference = load_audio_operand(*req.reference, store ? &*store : nullptr, base, cfg.stft);
      if (req.reference_in) {
        in.reference_in = load_audio_operand(*req.reference_in, store ? &*store : nullptr, base, cfg.stft);
      }
      for (const auto& b : ed_banks) in.banks.push_back(TrajectoryBank::load(b));
      const ModelHandle handle(cfg.model, cfg.sampler.schedule);
      const auto res = run_spectral_edit(req, in, handle);
      const fs::path out(ed_out);
      fs::create_directories(out);
      save_spectrogram(out / "edited.spg", res.spectrogram);
      save_latent(out / "edited.mrxl", res.latent);
      write_text(out / "energy_trace.csv", energy_trace_csv(res.outcome));
      nlohmann::json result = {{"spectrogram", sha256_hex(serialize(res.spectrogram))},
                               {"latent", sha256_hex(serialize(res.latent))},
                               {"stages", res.outcome.stages},
                               {"energy_trace", res.outcome.energy_trace},
                               {"request", to_json(req)},
                               {"provenance", res.provenance}};
      write_text(out / "result.json", result.dump(2) + "\n");
      if (ed_trace) {
        const RemovalSolution empty;
        write_text(*ed_trace, removal_trace_csv(res.outcome.removals.empty() ? empty : res.outcome.removals.front()));
      }
      std::cout << result["spectrogram"].get<std::string>() << "\n";
    } else if (*rd) {
      const AppConfig cfg = rd_c.load();
      const Spectrogram s = load_audio(rd_in, cfg.stft);
      std::optional<TFMask> mask;
      if (rd_mask) {
        const auto mb = io::read_file(*rd_mask);
        try {
          mask = mask_from_json(nlohmann::json::parse(mb.begin(), mb.end()));
        } catch (const nlohmann::json::exception& e) {
          fail(ErrorKind::format, std::string("mask: ") + e.what());
        }
      }
      io::write_file_atomic(rd_out, render_png(s, mask ? &*mask : nullptr));
    } else if (*gl) {
      AppConfig cfg = gl_c.load();
      if (gl_iters) cfg.griffin_lim.iters = *gl_iters;
      const Spectrogram s = load_spectrogram(gl_in);
      save_wav(gl_out, griffin_lim(s, cfg.griffin_lim));
    } else if (*bn) {
      const AppConfig cfg = bn_c.load();
      if (bn_generate) write_editset(bn_set, make_synthetic_editset(cfg.sampler.seed, *bn_generate));
      auto set = read_editset(bn_set);
      if (bn_limit && *bn_limit < set.size()) set.resize(*bn_limit);
      const ModelHandle handle(cfg.model, cfg.sampler.schedule);
      const EditRequest defaults = request_defaults(cfg);
      std::vector<BenchRow> rows;
      for (const auto& t : set) {
        rows.push_back(bench_triple(t, defaults, handle));
        std::cerr << t.id << " " << t.kind << " changed_to_target=" << rows.back().changed_to_target << "\n";
      }
      write_text(bn_out, bench_csv(rows));
      if (bn_json) write_text(*bn_json, bench_json(rows).dump(2) + "\n");
    } else if (*tr) {
      const AppConfig cfg = tr_c.load();
      require(tr_size >= 4 && tr_size % 4 == 0, ErrorKind::invalid_argument, "--size must be a positive multiple of 4");
      ToyDenoiserConfig mc;
      mc.seed = cfg.sampler.seed;
      ToyDenoiser model(mc);
      SpectralTrackCorpus corpus({mc.latent_channels, tr_size, tr_size}, cfg.sampler.seed + 1);
      TrainConfig tc;
      tc.steps = tr_steps;
      tc.learning_rate = tr_lr;
      tc.seed = cfg.sampler.seed;
      const auto schedule = make_schedule(cfg.sampler.schedule.steps, cfg.sampler.schedule.shape);
      const auto r = toy_train(model, [&] { return corpus.next(); }, schedule, tc);
      model.save(tr_out);
      if (tr_trace) write_text(*tr_trace, loss_trace_csv(r.loss_trace));
      const auto [first, last] = smoothed_endpoints(r.loss_trace);
      std::cout << nlohmann::json{{"steps", r.loss_trace.size()}, {"initial_loss", first}, {"final_loss", last}}.dump()
                << "\n";
    } else if (*sv) {
      AppConfig cfg = sv_c.load();
      if (sv_port) cfg.service.port = *sv_port;
      if (sv_workers) cfg.service.workers = *sv_workers;
      if (sv_dir) cfg.service.data_dir = *sv_dir;
      Service service(cfg);
      g_service = &service;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::cerr << "listening on " << sv_host << ":" << cfg.service.port << "\n";
      if (!service.listen(sv_host, cfg.service.port)) fail(ErrorKind::invalid_argument, "cannot bind port");
      g_service = nullptr;
    }
  } catch (const Error& e) {
    std::cerr << "morphix: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "morphix: " << e.what() << "\n";
    return kExitCompute;
  }
  return kExitOk;
}
