// Copyright 2026 The Morphix Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <random>
#include <vector>

#include "morphix/attention_cache.hpp"
#include "morphix/schedule.hpp"
#include "morphix/score_model.hpp"

namespace morphix {

/// Where a sampling step sits on the inference ladder.
struct StepContext {
  std::size_t ordinal = 0;  // 0 .. N-1, noisiest first
  std::size_t t = 0;
  std::size_t t_prev = 0;
};

/// Per-step extension points of sample_loop. Hooks must not keep references
/// to the latents they are handed beyond the call.
class SamplerHooks {
 public:
  virtual ~SamplerHooks() = default;
  /// Attention control for every model call at this step, or null.
  virtual AttentionControl* attention(const StepContext&) { return nullptr; }
  /// Feature taps requested from the conditional model call.
  virtual std::vector<std::size_t> wanted_taps() const { return {}; }
  /// Adjusts the CFG-combined epsilon prediction before the update.
  virtual void guide(const StepContext&, const LatentGrid& /*z*/, const FeatureTaps& /*taps*/, LatentGrid& /*eps*/) {}
  /// Sees (and may adjust) the latent before the step runs.
  virtual void before_step(const StepContext&, LatentGrid& /*z*/) {}
  /// Sees the latent produced by the step.
  virtual void after_step(const StepContext&, const LatentGrid& /*z_next*/) {}
};

namespace detail {

inline void check_model_schedule(const ScoreModel& model, const NoiseSchedule& s) {
  if (const auto steps = model.schedule_steps()) {
    require(*steps == s.steps(), ErrorKind::invalid_argument,
            "model built for a " + std::to_string(*steps) + "-step schedule, sampler uses " + std::to_string(s.steps()));
  }
}

inline LatentGrid as_epsilon(const ScoreModel& model, const LatentGrid& pred, const LatentGrid& z, std::size_t t,
                             const NoiseSchedule& s) {
  if (model.kind() == PredictionKind::epsilon) return pred;
  return convert_prediction(pred, model.kind(), TargetKind::epsilon, z, t, s);
}

}  // namespace detail

/// Epsilon-form prediction with classifier-free guidance.
inline LatentGrid guided_prediction(const ScoreModel& model, const LatentGrid& z, std::size_t t, const Condition& cond,
                                    double cfg_scale, const NoiseSchedule& s, AttentionControl* attn,
                                    const std::vector<std::size_t>& taps, FeatureTaps* taps_out) {
  auto p = model.predict(z, t, cond, taps, attn);
  if (taps_out != nullptr) *taps_out = std::move(p.taps);
  LatentGrid eps = detail::as_epsilon(model, p.value, z, t, s);
  if (cfg_scale != 1.0) {
    const auto u = model.predict(z, t, Condition::null(), {}, attn);
    eps = cfg_combine(eps, detail::as_epsilon(model, u.value, z, t, s), cfg_scale);
  }
  return eps;
}

/// Iterated DDIM from z_T down to t = 0 over the uniform inference ladder.
inline LatentGrid sample_loop(const LatentGrid& z_T, const ScoreModel& model, const Condition& cond,
                              const SamplerConfig& cfg, const NoiseSchedule& s, SamplerHooks* hooks = nullptr) {
  cfg.validate(s);
  detail::check_model_schedule(model, s);
  const auto ladder = step_ladder(cfg.num_inference_steps, s);
  const std::size_t N = cfg.num_inference_steps;
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  const std::vector<std::size_t> want = hooks ? hooks->wanted_taps() : std::vector<std::size_t>{};

  LatentGrid z = z_T;
  for (std::size_t k = 0; k < N; ++k) {
    const StepContext ctx{k, ladder[N - k], ladder[N - k - 1]};
    if (hooks) hooks->before_step(ctx, z);
    AttentionControl* attn = hooks ? hooks->attention(ctx) : nullptr;
    FeatureTaps taps;
    LatentGrid eps = guided_prediction(model, z, ctx.t, cond, cfg.cfg_scale, s, attn, want, &taps);
    if (hooks) hooks->guide(ctx, z, taps, eps);
    LatentGrid noise;
    if (cfg.eta > 0.0) {
      noise = LatentGrid(z.shape());
      for (auto& v : noise.storage()) v = n01(rng);
    }
    z = ddim_step(z, eps, PredictionKind::epsilon, ctx.t, ctx.t_prev, s, cfg.eta, cfg.eta > 0.0 ? &noise : nullptr);
    require(z.all_finite(), ErrorKind::compute, "sampling produced non-finite values at step " + std::to_string(k));
    if (hooks) hooks->after_step(ctx, z);
  }
  return z;
}

/// Deterministic inversion from clean z_0 up to t = T. Each step starts from
/// the plain DDIM inversion update and then re-evaluates the prediction at the
/// far end for `inversion_refinements` fixed-point iterations. CFG is not used.
///
/// When a bank is given, it receives the latent entering every sampling
/// ordinal and the K/V of the model evaluated there, so a later sample_loop
/// over the same ladder can look them up by ordinal.
inline LatentGrid invert_loop(const LatentGrid& z_0, const ScoreModel& model, const Condition& cond,
                              const SamplerConfig& cfg, const NoiseSchedule& s, TrajectoryBank* bank = nullptr) {
  cfg.validate(s);
  detail::check_model_schedule(model, s);
  const auto ladder = step_ladder(cfg.num_inference_steps, s);
  const std::size_t N = cfg.num_inference_steps;
  if (bank) {
    require(bank->num_steps() == N, ErrorKind::invalid_argument, "bank step count does not match sampler");
    bank->record_latent(N, z_0);
  }
  std::optional<BankRecorder> recorder;
  if (bank) recorder.emplace(*bank);

  auto eval = [&](const LatentGrid& z, std::size_t t, AttentionControl* attn) {
    return detail::as_epsilon(model, model.predict(z, t, cond, {}, attn).value, z, t, s);
  };

  LatentGrid z = z_0;
  LatentGrid eps = eval(z, ladder[0], nullptr);
  for (std::size_t j = 0; j < N; ++j) {
    const std::size_t t = ladder[j], t_next = ladder[j + 1];
    LatentGrid next = ddim_invert_step(z, eps, t, t_next, s);
    for (std::size_t r = 0; r < cfg.inversion_refinements; ++r) {
      next = ddim_invert_step(z, eval(next, t_next, nullptr), t, t_next, s);
    }
    require(next.all_finite(), ErrorKind::compute, "inversion produced non-finite values at step " + std::to_string(j));
    z = std::move(next);
    const std::size_t ordinal = N - j - 1;
    if (recorder) {
      recorder->set_step(ordinal);
      bank->record_latent(ordinal, z);
    }
    eps = eval(z, t_next, recorder ? &*recorder : nullptr);
  }
  return z;
}

/// Hooks that record a sampling trajectory (latents and K/V) into a bank.
class TrajectoryRecorder final : public SamplerHooks {
 public:
  explicit TrajectoryRecorder(TrajectoryBank& bank) : bank_(bank), recorder_(bank) {}
  AttentionControl* attention(const StepContext& ctx) override {
    recorder_.set_step(ctx.ordinal);
    return &recorder_;
  }
  void before_step(const StepContext& ctx, LatentGrid& z) override { bank_.record_latent(ctx.ordinal, z); }
  void after_step(const StepContext& ctx, const LatentGrid& z) override {
    if (ctx.ordinal + 1 == bank_.num_steps()) bank_.record_latent(bank_.num_steps(), z);
  }

 private:
  TrajectoryBank& bank_;
  BankRecorder recorder_;
};

/// Hooks that substitute cached K/V from a bank during sampling.
class TrajectoryInjector final : public SamplerHooks {
 public:
  explicit TrajectoryInjector(const TrajectoryBank& bank) : injector_(bank) {}
  AttentionControl* attention(const StepContext& ctx) override {
    injector_.set_step(ctx.ordinal);
    return &injector_;
  }

 private:
  BankInjector injector_;
};

}  // namespace morphix
