// Copyright 2026 The Morphix Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "morphix/attention_cache.hpp"
#include "morphix/energy.hpp"
#include "morphix/error.hpp"
#include "morphix/latent.hpp"
#include "morphix/mask.hpp"
#include "morphix/morph.hpp"
#include "morphix/sampler.hpp"
#include "morphix/schedule.hpp"
#include "morphix/score_model.hpp"

namespace morphix {

enum class EditKind { add, remove, replace, move, stretch, pitch_shift };

inline const char* to_string(EditKind k) {
  switch (k) {
    case EditKind::add: return "add";
    case EditKind::remove: return "remove";
    case EditKind::replace: return "replace";
    case EditKind::move: return "move";
    case EditKind::stretch: return "stretch";
    case EditKind::pitch_shift: return "pitch_shift";
  }
  return "?";
}

inline EditKind edit_kind_from_string(const std::string& s) {
  for (auto k : {EditKind::add, EditKind::remove, EditKind::replace, EditKind::move, EditKind::stretch,
                 EditKind::pitch_shift}) {
    if (s == to_string(k)) return k;
  }
  fail(ErrorKind::invalid_argument, "unknown edit kind '" + s + "'");
}

inline bool is_geometric(EditKind k) {
  return k == EditKind::move || k == EditKind::stretch || k == EditKind::pitch_shift;
}

/// Which inversion supplies the cached attention K/V during edited sampling.
enum class KvSource { source, reference, none };

inline const char* to_string(KvSource k) {
  return k == KvSource::source ? "source" : k == KvSource::reference ? "reference" : "none";
}

struct EditRequest {
  EditKind kind = EditKind::add;
  std::string source;                       // asset id
  std::optional<std::string> reference;     // add/remove; outgoing reference for replace
  std::optional<std::string> reference_in;  // incoming reference for replace
  TFMask mask_c;
  TFMask mask_r;
  std::optional<TFMask> mask_r_in;  // region in the incoming reference; defaults to mask_r
  double alpha = 0.5;
  GuidanceWeights weights;
  SamplerConfig sampler;
  MorphConfig morph;
  std::optional<MaskTransform> transform;
  std::optional<int> class_id;
  KvSource kv_source = KvSource::source;
  std::set<std::size_t> kv_layers{2, 3};

  Condition condition() const { return class_id ? Condition::label(*class_id) : Condition::null(); }

  /// Schema checks that do not need the assets themselves.
  void validate() const {
    require(!source.empty(), ErrorKind::invalid_argument, "request needs a source asset");
    require(mask_c.cells() > 0 && !mask_c.none(), ErrorKind::invalid_argument, "mask_c must be nonempty");
    require(alpha >= 0.0 && alpha <= 1.0, ErrorKind::invalid_argument, "alpha must lie in [0,1]");
    weights.validate();
    morph.validate();
    if (is_geometric(kind)) {
      require(transform.has_value(), ErrorKind::invalid_argument,
              std::string(to_string(kind)) + " needs a transform");
      require(!reference && !reference_in, ErrorKind::invalid_argument,
              std::string(to_string(kind)) + " takes no reference");
      const auto want = kind == EditKind::move      ? MaskTransform::Kind::translate_time
                        : kind == EditKind::stretch ? MaskTransform::Kind::scale_time
                                                    : MaskTransform::Kind::translate_freq;
      require(transform->kind == want, ErrorKind::invalid_argument,
              std::string(to_string(kind)) + " needs a " + to_string(want) + " transform");
      apply_mask_transform(mask_c, *transform);
      return;
    }
    require(!transform, ErrorKind::invalid_argument, "transform is only valid for geometric edits");
    require(reference.has_value(), ErrorKind::invalid_argument,
            std::string(to_string(kind)) + " needs a reference asset");
    require(mask_r.cells() > 0 && !mask_r.none(), ErrorKind::invalid_argument,
            "mask_r must be nonempty (nothing to take from the reference)");
    if (kind == EditKind::replace) {
      require(reference_in.has_value(), ErrorKind::invalid_argument, "replace needs reference_in");
      if (mask_r_in) require(!mask_r_in->none(), ErrorKind::invalid_argument, "mask_r_in must be nonempty");
    } else {
      require(!reference_in, ErrorKind::invalid_argument, "reference_in is only valid for replace");
    }
  }
};

inline nlohmann::json to_json(const EditRequest& r) {
  nlohmann::json j = {{"kind", to_string(r.kind)},
                      {"source", r.source},
                      {"mask_c", mask_to_json(r.mask_c)},
                      {"alpha", r.alpha},
                      {"weights", to_json(r.weights)},
                      {"sampler", to_json(r.sampler)},
                      {"morph", to_json(r.morph)},
                      {"kv_source", to_string(r.kv_source)},
                      {"kv_layers", r.kv_layers}};
  if (r.reference) j["reference"] = *r.reference;
  if (r.reference_in) j["reference_in"] = *r.reference_in;
  if (r.mask_r.cells() > 0) j["mask_r"] = mask_to_json(r.mask_r);
  if (r.mask_r_in) j["mask_r_in"] = mask_to_json(*r.mask_r_in);
  if (r.transform) j["transform"] = transform_to_json(*r.transform);
  if (r.class_id) j["class_id"] = *r.class_id;
  return j;
}

/// Parses and validates a request; `defaults` supplies config-file values for
/// the nested sections before request fields override them.
inline EditRequest edit_request_from_json(const nlohmann::json& j, const EditRequest& defaults = {}) {
  require(j.is_object(), ErrorKind::invalid_argument, "edit request must be a JSON object");
  EditRequest r = defaults;
  try {
    r.kind = edit_kind_from_string(j.at("kind").get<std::string>());
    r.source = j.at("source").get<std::string>();
    r.mask_c = mask_from_json(j.at("mask_c"));
    if (j.contains("reference")) r.reference = j.at("reference").get<std::string>();
    if (j.contains("reference_in")) r.reference_in = j.at("reference_in").get<std::string>();
    if (j.contains("mask_r")) r.mask_r = mask_from_json(j.at("mask_r"));
    if (j.contains("mask_r_in")) r.mask_r_in = mask_from_json(j.at("mask_r_in"));
    if (j.contains("alpha")) r.alpha = j.at("alpha").get<double>();
    if (j.contains("weights")) r.weights = guidance_weights_from_json(j.at("weights"), r.weights);
    if (j.contains("sampler")) r.sampler = sampler_config_from_json(j.at("sampler"), r.sampler);
    if (j.contains("morph")) r.morph = morph_config_from_json(j.at("morph"), r.morph);
    if (j.contains("transform")) r.transform = transform_from_json(j.at("transform"));
    if (j.contains("class_id")) r.class_id = j.at("class_id").get<int>();
    if (j.contains("kv_source")) {
      const auto s = j.at("kv_source").get<std::string>();
      if (s == "source") r.kv_source = KvSource::source;
      else if (s == "reference") r.kv_source = KvSource::reference;
      else if (s == "none") r.kv_source = KvSource::none;
      else fail(ErrorKind::invalid_argument, "unknown kv_source '" + s + "'");
    }
    if (j.contains("kv_layers")) r.kv_layers = j.at("kv_layers").get<std::set<std::size_t>>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::invalid_argument, std::string("edit request: ") + e.what());
  }
  r.validate();
  return r;
}

/// Latent-space operands of one edit.
struct EditInputs {
  LatentGrid source;
  std::optional<LatentGrid> reference;
  std::optional<LatentGrid> reference_in;
  // Precomputed inversions. A bank is reused when its clean-end latent equals
  // the operand bit for bit and its step count and layers match the request.
  // It must have been recorded under the same condition and sampler config.
  std::vector<TrajectoryBank> banks;
};

struct EditOutcome {
  LatentGrid latent;
  std::vector<double> energy_trace;        // one value per guided step, all stages
  std::vector<std::string> stages;         // stage names in execution order
  std::vector<std::size_t> stage_lengths;  // energy-trace entries per stage
  std::vector<RemovalSolution> removals;   // optimizer runs, in stage order
};

/// Sampler hooks for edited sampling: cached K/V injection plus energy
/// guidance against the source and reference trajectories.
class EditHooks final : public SamplerHooks {
 public:
  EditHooks(const ScoreModel& model, const NoiseSchedule& schedule, Condition cond, EnergyKind kind,
            RegionPair region, GuidanceWeights weights, const TrajectoryBank& source_traj,
            const TrajectoryBank& reference_traj, const TrajectoryBank* kv_bank)
      : model_(model),
        schedule_(schedule),
        cond_(std::move(cond)),
        kind_(kind),
        region_(std::move(region)),
        weights_(std::move(weights)),
        source_(source_traj),
        reference_(reference_traj) {
    if (kv_bank) injector_.emplace(*kv_bank);
    if (weights_.enabled()) model_.check_taps(weights_.tap_layers);
  }

  AttentionControl* attention(const StepContext& ctx) override {
    if (!injector_) return nullptr;
    injector_->set_step(ctx.ordinal);
    return &*injector_;
  }

  std::vector<std::size_t> wanted_taps() const override {
    return weights_.enabled() ? weights_.tap_layers : std::vector<std::size_t>{};
  }

  void guide(const StepContext& ctx, const LatentGrid& z, const FeatureTaps& taps, LatentGrid& eps) override {
    if (!weights_.enabled()) return;
    const auto& L = weights_.tap_layers;
    const auto src = model_.predict(source_.latent(ctx.ordinal), ctx.t, cond_, L).taps;
    const auto ref = model_.predict(reference_.latent(ctx.ordinal), ctx.t, cond_, L).taps;
    const auto e = task_energy(kind_, taps, src, ref, region_, weights_);
    require(std::isfinite(e.value), ErrorKind::compute, "non-finite guidance energy at step " + std::to_string(ctx.ordinal));
    trace_.push_back(e.value);
    const LatentGrid g = model_.vjp(z, ctx.t, cond_, e.cotangents, attention(ctx));
    eps = guided_epsilon(eps, g, ctx.t, schedule_, weights_.eta_guidance);
  }

  const std::vector<double>& trace() const { return trace_; }

 private:
  const ScoreModel& model_;
  const NoiseSchedule& schedule_;
  Condition cond_;
  EnergyKind kind_;
  RegionPair region_;
  GuidanceWeights weights_;
  const TrajectoryBank& source_;
  const TrajectoryBank& reference_;
  std::optional<BankInjector> injector_;
  std::vector<double> trace_;
};

namespace detail {

/// Flat (channel, cell) indices of the given cells across all channels.
inline std::vector<std::size_t> channel_cells(const GridShape& g, const std::vector<std::size_t>& cells) {
  std::vector<std::size_t> idx;
  idx.reserve(g.channels * cells.size());
  const std::size_t hw = g.time_len * g.freq_len;
  for (std::size_t ch = 0; ch < g.channels; ++ch)
    for (auto c : cells) idx.push_back(ch * hw + c);
  return idx;
}

inline LatentGrid gather(const LatentGrid& z, const std::vector<std::size_t>& idx) {
  LatentGrid out(GridShape{1, 1, idx.size()});
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = z[idx[i]];
  return out;
}

inline void scatter(LatentGrid& z, const std::vector<std::size_t>& idx, const LatentGrid& v) {
  for (std::size_t i = 0; i < idx.size(); ++i) z[idx[i]] = v[i];
}

}  // namespace detail

/// Runs edits in latent space against one model and schedule.
class Editor {
 public:
  Editor(const ScoreModel& model, NoiseSchedule schedule) : model_(model), schedule_(std::move(schedule)) {}

  const NoiseSchedule& schedule() const { return schedule_; }

  /// Inversion of z_0 that records the trajectory and K/V into a fresh bank.
  std::pair<LatentGrid, TrajectoryBank> invert(const LatentGrid& z0, const EditRequest& req,
                                               const std::vector<TrajectoryBank>& cached = {}) const {
    const std::size_t n = req.sampler.num_inference_steps;
    const std::set<std::size_t> subst(req.kv_layers.begin(), req.kv_layers.end());
    for (const auto& b : cached) {
      if (b.num_steps() == n && b.complete() && b.latents_complete() && b.layers() == model_.attention_layers() &&
          b.substitution() == subst && b.latent(n) == z0) {
        return {b.latent(0), b};
      }
    }
    TrajectoryBank bank(req.sampler.num_inference_steps, model_.attention_layers(), req.kv_layers);
    auto zT = invert_loop(z0, model_, req.condition(), req.sampler, schedule_, &bank);
    return {std::move(zT), std::move(bank)};
  }

  /// SLERP of the edited region toward the aligned reference region; cells
  /// outside the region keep the content latent.
  static LatentGrid region_slerp(const LatentGrid& zc, const LatentGrid& zr, const RegionPair& region, double alpha) {
    zc.check_compatible(zr, "region_slerp");
    const auto p = region.aligned(zc.time_len(), zc.freq_len());
    const auto ic = detail::channel_cells(zc.shape(), p.c), ir = detail::channel_cells(zr.shape(), p.r);
    LatentGrid out = zc;
    detail::scatter(out, ic, morph_add(detail::gather(zc, ic), detail::gather(zr, ir), alpha));
    return out;
  }

  EditOutcome run(const EditRequest& req, const EditInputs& in) const {
    req.validate();
    require(in.source.all_finite(), ErrorKind::invalid_argument, "source latent has non-finite values");
    EditOutcome out;
    switch (req.kind) {
      case EditKind::add:
        out.latent = add_stage(req, in.source, need(in.reference, "reference"), {req.mask_c, req.mask_r}, in.banks, out);
        break;
      case EditKind::remove:
        out.latent = remove_stage(req, in.source, need(in.reference, "reference"), {req.mask_c, req.mask_r}, in.banks, out);
        break;
      case EditKind::replace: {
        const auto mid =
            remove_stage(req, in.source, need(in.reference, "reference"), {req.mask_c, req.mask_r}, in.banks, out);
        out.latent = add_stage(req, mid, need(in.reference_in, "reference_in"),
                               {req.mask_c, req.mask_r_in.value_or(req.mask_r)}, in.banks, out);
        break;
      }
      default: {
        const TFMask moved = apply_mask_transform(req.mask_c, *req.transform);
        const auto mid = remove_stage(req, in.source, in.source, {req.mask_c, req.mask_c}, in.banks, out);
        out.latent = add_stage(req, mid, in.source, {moved, req.mask_c}, in.banks, out);
        break;
      }
    }
    return out;
  }

 private:
  static const LatentGrid& need(const std::optional<LatentGrid>& g, const char* what) {
    require(g.has_value(), ErrorKind::invalid_argument, std::string("edit needs the ") + what + " latent");
    return *g;
  }

  const TrajectoryBank* kv_bank(const EditRequest& req, const TrajectoryBank& src, const TrajectoryBank& ref) const {
    switch (req.kv_source) {
      case KvSource::source: return &src;
      case KvSource::reference: return &ref;
      case KvSource::none: return nullptr;
    }
    return nullptr;
  }

  LatentGrid guided_sample(const EditRequest& req, const LatentGrid& start, EnergyKind kind, const RegionPair& region,
                           const TrajectoryBank& src, const TrajectoryBank& ref, const char* stage,
                           EditOutcome& out) const {
    EditHooks hooks(model_, schedule_, req.condition(), kind, region, req.weights, src, ref, kv_bank(req, src, ref));
    auto z = sample_loop(start, model_, req.condition(), req.sampler, schedule_, &hooks);
    out.stages.emplace_back(stage);
    out.stage_lengths.push_back(hooks.trace().size());
    out.energy_trace.insert(out.energy_trace.end(), hooks.trace().begin(), hooks.trace().end());
    return z;
  }

  LatentGrid add_stage(const EditRequest& req, const LatentGrid& content, const LatentGrid& reference,
                       const RegionPair& region, const std::vector<TrajectoryBank>& cached, EditOutcome& out) const {
    content.check_compatible(reference, "edit add");
    auto [zc, bank_c] = invert(content, req, cached);
    auto [zr, bank_r] = invert(reference, req, cached);
    const LatentGrid zm = region_slerp(zc, zr, region, req.alpha);
    return guided_sample(req, zm, EnergyKind::add, region, bank_c, bank_r, "add", out);
  }

  LatentGrid remove_stage(const EditRequest& req, const LatentGrid& mixture, const LatentGrid& reference,
                          const RegionPair& region, const std::vector<TrajectoryBank>& cached,
                          EditOutcome& out) const {
    mixture.check_compatible(reference, "edit remove");
    auto [zm, bank_m] = invert(mixture, req, cached);
    auto [zr, bank_r] = invert(reference, req, cached);
    const auto p = region.aligned(zm.time_len(), zm.freq_len());
    const auto im = detail::channel_cells(zm.shape(), p.c), ir = detail::channel_cells(zr.shape(), p.r);
    const LatentGrid vm = detail::gather(zm, im);
    auto sol = optimize_removal(vm, detail::gather(zr, ir), vm, req.morph);
    require(!sol.aborted, ErrorKind::compute, "removal optimizer: " + sol.abort_reason);
    LatentGrid start = zm;
    detail::scatter(start, im, sol.z_c_hat);
    out.removals.push_back(std::move(sol));
    return guided_sample(req, start, EnergyKind::remove, region, bank_m, bank_r, "remove", out);
  }

  const ScoreModel& model_;
  NoiseSchedule schedule_;
};

inline std::string energy_trace_csv(const EditOutcome& o) {
  std::ostringstream os;
  os.precision(12);
  os << "stage,step,energy\n";
  std::size_t pos = 0;
  for (std::size_t s = 0; s < o.stages.size(); ++s) {
    for (std::size_t k = 0; k < o.stage_lengths[s]; ++k) os << o.stages[s] << "," << k << "," << o.energy_trace[pos++] << "\n";
  }
  return os.str();
}

}  // namespace morphix
