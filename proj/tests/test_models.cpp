// Copyright 2026 The Morphix Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cstring>
#include <random>

#include "morphix/analytic_model.hpp"
#include "morphix/hash.hpp"
#include "morphix/toy_denoiser.hpp"
#include "support.hpp"

namespace morphix {
namespace {

LatentGrid randn(GridShape shape, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  LatentGrid g(shape);
  for (auto& v : g.storage()) v = scale * n01(rng);
  return g;
}

std::string grid_sha(const LatentGrid& g) {
  std::vector<std::uint8_t> bytes(g.size() * sizeof(double));
  std::memcpy(bytes.data(), g.storage().data(), bytes.size());
  return sha256_hex(bytes);
}

const GridShape kShape{4, 8, 8};

TEST(AnalyticModel, StandardNormalPredictsScaledInput) {
  const auto s = make_schedule(1000, ScheduleShape::linear);
  const AnalyticGaussianModel m(LatentGrid(kShape), 1.0, s);
  const auto z = randn(kShape, 1);
  for (std::size_t t : {1u, 300u, 1000u}) {
    const auto p = m.predict(z, t, Condition::null(), {});
    EXPECT_LT(tu::max_abs_diff(p.value, s.sigma(t) * z), 1e-15);
  }
}

TEST(AnalyticModel, PredictionMatchesPosteriorMean) {
  const auto s = make_schedule(1000, ScheduleShape::cosine);
  const auto mu = randn(kShape, 2);
  const double var = 0.37;
  const AnalyticGaussianModel m(mu, var, s);
  const auto z = randn(kShape, 3);
  const std::size_t t = 420;
  const auto p = m.predict(z, t, Condition::null(), {});
  // E[eps | z] for x0 ~ N(mu, var): cov(eps, z) / var(z) * (z - E z)
  using tu::Big;
  const Big ab = Big(s.alpha_bar(t));
  using boost::multiprecision::sqrt;
  std::vector<Big> ref(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    ref[i] = sqrt(1 - ab) / (ab * Big(var) + 1 - ab) * (Big(z[i]) - sqrt(ab) * Big(mu[i]));
  }
  EXPECT_LT(tu::max_abs_diff(p.value, ref), 1e-13);
}

TEST(AnalyticModel, PredictionIsAffine) {
  const auto s = make_schedule(1000, ScheduleShape::linear);
  const AnalyticGaussianModel m(randn(kShape, 4), 0.5, s);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-2.0, 3.0);
  for (int trial = 0; trial < 50; ++trial) {
    const auto x = randn(kShape, 100 + trial), y = randn(kShape, 200 + trial);
    const double a = u(rng);
    const std::size_t t = 1 + static_cast<std::size_t>(trial) * 19;
    const auto pm = m.predict(a * x + (1.0 - a) * y, t, Condition::null(), {}).value;
    const auto px = m.predict(x, t, Condition::null(), {}).value;
    const auto py = m.predict(y, t, Condition::null(), {}).value;
    EXPECT_LT(tu::max_abs_diff(pm, a * px + (1.0 - a) * py), 1e-9);
  }
}

TEST(AnalyticModel, TapIsIdentityAndVjpSumsCotangents) {
  const auto s = make_schedule(1000, ScheduleShape::linear);
  const AnalyticGaussianModel m(LatentGrid(kShape), 1.0, s);
  EXPECT_EQ(m.tap_layers(), std::vector<std::size_t>{AnalyticGaussianModel::kTapLayer});
  const auto z = randn(kShape, 6);
  const auto p = m.predict(z, 10, Condition::null(), {1});
  ASSERT_EQ(p.taps.count(1), 1u);
  EXPECT_EQ(p.taps.at(1), z);
  const auto ct = randn(kShape, 7);
  EXPECT_EQ(m.vjp(z, 10, Condition::null(), {{1, ct}}), ct);
  EXPECT_THROW(m.predict(z, 10, Condition::null(), {2}), Error);
  EXPECT_THROW(m.vjp(z, 10, Condition::null(), {{2, ct}}), Error);
  EXPECT_THROW(AnalyticGaussianModel(LatentGrid(kShape), -1.0, s), Error);
}

TEST(ToyDenoiser, TapShapesFollowResolutionLadder) {
  const ToyDenoiser m;
  const auto z = randn({4, 16, 8}, 8);
  const auto p = m.predict(z, 500, Condition::label(1), {1, 2, 3});
  EXPECT_EQ(p.value.shape(), z.shape());
  EXPECT_EQ(p.taps.at(1).shape(), (GridShape{32, 4, 2}));
  EXPECT_EQ(p.taps.at(2).shape(), (GridShape{16, 8, 4}));
  EXPECT_EQ(p.taps.at(3).shape(), (GridShape{16, 16, 8}));
  for (std::size_t l : {1u, 2u, 3u}) EXPECT_EQ(m.tap_shape(l, z.shape()), p.taps.at(l).shape());
  EXPECT_TRUE(p.value.all_finite());
}

TEST(ToyDenoiser, RejectsBadInputs) {
  const ToyDenoiser m;
  EXPECT_THROW(m.predict(randn({4, 6, 8}, 1), 10, Condition::null(), {}), Error);
  EXPECT_THROW(m.predict(randn({3, 8, 8}, 1), 10, Condition::null(), {}), Error);
  EXPECT_THROW(m.predict(randn(kShape, 1), 10, Condition::label(5), {}), Error);
  EXPECT_THROW(m.predict(randn(kShape, 1), 10, Condition::null(), {4}), Error);
}

TEST(ToyDenoiser, DeterministicAndConditionSensitive) {
  const ToyDenoiser a, b;
  const auto z = randn(kShape, 9);
  const auto pa = a.predict(z, 333, Condition::label(0), {}).value;
  EXPECT_EQ(pa, b.predict(z, 333, Condition::label(0), {}).value);
  EXPECT_NE(pa, a.predict(z, 333, Condition::label(1), {}).value);
  EXPECT_NE(pa, a.predict(z, 334, Condition::label(0), {}).value);
  ToyDenoiserConfig other;
  other.seed = 43;
  EXPECT_NE(pa, ToyDenoiser(other).predict(z, 333, Condition::label(0), {}).value);
}

TEST(ToyDenoiser, GoldenPrediction) {
  const ToyDenoiser m;
  const auto p = m.predict(randn(kShape, 10), 250, Condition::label(1), {});
  EXPECT_EQ(grid_sha(p.value), "3c45f76e10088b9df54588ee94fd4b8253e1130cac8543c0da0c26a8273f455b");
}

TEST(ToyDenoiser, AttentionRowsSumToOne) {
  const ToyDenoiser m;
  const auto z = randn(kShape, 11);
  for (std::size_t layer : {1u, 2u, 3u}) {
    const auto w = m.attention_weights(z, 500, Condition::null(), layer);
    const std::size_t tokens = kShape.time_len * kShape.freq_len / (layer == 1 ? 16 : layer == 2 ? 4 : 1);
    ASSERT_EQ(w.size(), tokens * tokens) << layer;
    for (std::size_t r = 0; r < tokens; ++r) {
      double sum = 0;
      for (std::size_t c = 0; c < tokens; ++c) {
        EXPECT_GE(w[r * tokens + c], 0.0);
        sum += w[r * tokens + c];
      }
      EXPECT_NEAR(sum, 1.0, 1e-12);
    }
  }
}

TEST(ToyDenoiser, VjpMatchesFiniteDifferences) {
  const ToyDenoiser m;
  const auto z = randn(kShape, 12);
  const std::size_t t = 400;
  const Condition c = Condition::label(0);
  FeatureTaps ct;
  for (std::size_t l : {1u, 2u, 3u}) ct.emplace(l, randn(m.tap_shape(l, kShape), 20 + l));
  const auto g = m.vjp(z, t, c, ct);
  const auto fd = tu::finite_difference(
      [&](const LatentGrid& x) {
        const auto p = m.predict(x, t, c, {1, 2, 3});
        double s = 0;
        for (const auto& [l, cot] : ct) {
          const auto& f = p.taps.at(l);
          for (std::size_t i = 0; i < f.size(); ++i) s += cot[i] * f[i];
        }
        return s;
      },
      z);
  EXPECT_LT(tu::normwise_rel_error(g, fd), 1e-4);
}

TEST(ToyDenoiser, CheckpointRoundTripIsBitExact) {
  ToyDenoiserConfig cfg;
  cfg.kind = PredictionKind::v;
  cfg.seed = 5;
  const ToyDenoiser m(cfg);
  const auto bytes = m.serialize();
  const auto back = ToyDenoiser::deserialize(bytes);
  EXPECT_EQ(back.config(), cfg);
  EXPECT_EQ(back.kind(), PredictionKind::v);
  EXPECT_EQ(back.params(), m.params());
  EXPECT_EQ(back.serialize(), bytes);
  const auto dir = tu::temp_dir("ckpt");
  m.save(dir / "m.mrxm");
  EXPECT_EQ(ToyDenoiser::load(dir / "m.mrxm").serialize(), bytes);
  std::filesystem::remove_all(dir);
}

TEST(ToyDenoiser, CheckpointRejectsCorruption) {
  const auto bytes = ToyDenoiser().serialize();
  auto expect_format = [](std::vector<std::uint8_t> b) {
    try {
      ToyDenoiser::deserialize(b);
      ADD_FAILURE() << "accepted corrupt checkpoint";
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::format) << e.what();
    }
  };
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  expect_format(bad_magic);
  auto bad_version = bytes;
  bad_version[4] = 9;
  expect_format(bad_version);
  auto bad_kind = bytes;
  bad_kind[8] = 7;
  expect_format(bad_kind);
  expect_format(std::vector<std::uint8_t>(bytes.begin(), bytes.end() - 3));
  auto trailing = bytes;
  trailing.push_back(0);
  expect_format(trailing);
}

TEST(ToyDenoiser, ParameterBudget) {
  const ToyDenoiser m;
  EXPECT_GT(m.parameter_count(), 1000u);
  EXPECT_LE(m.parameter_count(), 2'000'000u);
}

TEST(ToyTraining, ZeroStepsLeavesParameters) {
  ToyDenoiser m;
  const auto before = m.params();
  SpectralTrackCorpus corpus({4, 16, 16}, 1);
  TrainConfig cfg;
  cfg.steps = 0;
  const auto r = toy_train(m, [&] { return corpus.next(); }, make_schedule(1000, ScheduleShape::linear), cfg);
  EXPECT_TRUE(r.loss_trace.empty());
  EXPECT_EQ(m.params(), before);
}

TEST(ToyTraining, ShortRunIsDeterministic) {
  auto run = [] {
    ToyDenoiser m;
    SpectralTrackCorpus corpus({4, 8, 8}, 3);
    TrainConfig cfg;
    cfg.steps = 15;
    cfg.seed = 4;
    const auto r = toy_train(m, [&] { return corpus.next(); }, make_schedule(1000, ScheduleShape::linear), cfg);
    return std::make_pair(r.loss_trace, m.serialize());
  };
  const auto a = run(), b = run();
  EXPECT_EQ(a.first.size(), 15u);
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
  EXPECT_NE(a.second, ToyDenoiser().serialize());
}

TEST(ToyTraining, CorpusClassesAreDistinct) {
  SpectralTrackCorpus corpus({4, 16, 16}, 7);
  const auto tones = corpus.make(0), clicks = corpus.make(1);
  // Tones are constant along time, clicks along frequency.
  for (std::size_t f = 0; f < 16; ++f)
    for (std::size_t t = 1; t < 16; ++t) EXPECT_EQ(tones.at(0, t, f), tones.at(0, 0, f));
  for (std::size_t t = 0; t < 16; ++t)
    for (std::size_t f = 1; f < 16; ++f) EXPECT_EQ(clicks.at(0, t, f), clicks.at(0, t, 0));
}

TEST(ToyTraining, SmoothedEndpoints) {
  std::vector<double> trace(300);
  for (std::size_t i = 0; i < 300; ++i) trace[i] = i < 100 ? 2.0 : i >= 200 ? 0.5 : 1.0;
  const auto [first, last] = smoothed_endpoints(trace, 100);
  EXPECT_DOUBLE_EQ(first, 2.0);
  EXPECT_DOUBLE_EQ(last, 0.5);
  EXPECT_THROW(smoothed_endpoints({}), Error);
  EXPECT_EQ(loss_trace_csv({1.5}).substr(0, 5), "step,");
}

}  // namespace
}  // namespace morphix
