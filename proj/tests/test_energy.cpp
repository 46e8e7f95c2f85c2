// Copyright 2026 The Morphix Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <random>

#include "morphix/energy.hpp"
#include "morphix/toy_denoiser.hpp"
#include "support.hpp"

namespace morphix {
namespace {

using tu::Big;

LatentGrid randn(GridShape shape, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  LatentGrid g(shape);
  for (auto& v : g.storage()) v = scale * n01(rng);
  return g;
}

TFMask rect(std::size_t T, std::size_t F, std::size_t t0, std::size_t t1, std::size_t f0, std::size_t f1) {
  TFMask m(T, F, false);
  m.fill_rect(t0, t1, f0, f1);
  return m;
}

CellPairs identity_pairs(std::size_t cells) {
  CellPairs p;
  for (std::size_t i = 0; i < cells; ++i) {
    p.c.push_back(i);
    p.r.push_back(i);
  }
  return p;
}

const GridShape kFeat{6, 4, 4};

TEST(Similarity, Examples) {
  const auto F = randn(kFeat, 1);
  const auto p = identity_pairs(16);
  EXPECT_NEAR(masked_similarity(F, p, F).value, 1.0, 1e-15);
  EXPECT_NEAR(masked_similarity(F, p, -1.0 * F).value, 0.0, 1e-15);
  EXPECT_EQ(masked_similarity(LatentGrid(kFeat), p, F).value, 0.5);
  LatentGrid a(kFeat), b(kFeat);
  a[0] = 1.0;
  b[16] = 1.0;  // same cell, next channel
  EXPECT_NEAR(masked_similarity(a, p, b).value, 0.5, 1e-15);
  EXPECT_NEAR(global_similarity(F, p, F).value, 1.0, 1e-15);
}

TEST(Similarity, OnlyPairedCellsCount) {
  auto a = randn(kFeat, 2), b = a;
  CellPairs p{{0, 5}, {0, 5}};
  for (std::size_t ch = 0; ch < kFeat.channels; ++ch) b[ch * 16 + 7] = -a[ch * 16 + 7];
  EXPECT_NEAR(masked_similarity(a, p, b).value, 1.0, 1e-15);
  const auto g = masked_similarity(a, p, randn(kFeat, 3)).grad;
  for (std::size_t ch = 0; ch < kFeat.channels; ++ch) {
    for (std::size_t cell = 0; cell < 16; ++cell) {
      if (cell != 0 && cell != 5) EXPECT_EQ(g[ch * 16 + cell], 0.0);
    }
  }
}

TEST(Similarity, BoundedUnderFuzz) {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<std::size_t> cell(0, 15), count(1, 16);
  std::uniform_real_distribution<double> scale(-8.0, 8.0);
  for (int i = 0; i < 10000; ++i) {
    const auto a = randn(kFeat, 10000 + i, std::pow(10.0, scale(rng)));
    const auto b = randn(kFeat, 30000 + i, std::pow(10.0, scale(rng)));
    CellPairs p;
    const std::size_t n = count(rng);
    for (std::size_t k = 0; k < n; ++k) {
      p.c.push_back(cell(rng));
      p.r.push_back(cell(rng));
    }
    const double s = masked_similarity(a, p, b).value, g = global_similarity(a, p, b).value;
    ASSERT_GE(s, 0.0);
    ASSERT_LE(s, 1.0);
    ASSERT_GE(g, 0.0);
    ASSERT_LE(g, 1.0);
  }
}

TEST(Similarity, GradientsMatchFiniteDifferences) {
  const auto a = randn(kFeat, 5), b = randn(kFeat, 6);
  CellPairs p{{0, 3, 6, 9, 12}, {15, 1, 2, 8, 4}};
  const auto fm = tu::finite_difference([&](const LatentGrid& x) { return masked_similarity(x, p, b).value; }, a, 1e-5);
  EXPECT_LT(tu::normwise_rel_error(masked_similarity(a, p, b).grad, fm), 1e-6);
  const auto fg = tu::finite_difference([&](const LatentGrid& x) { return global_similarity(x, p, b).value; }, a, 1e-5);
  EXPECT_LT(tu::normwise_rel_error(global_similarity(a, p, b).grad, fg), 1e-6);
}

TEST(Similarity, RejectsBadPairs) {
  const auto a = randn(kFeat, 7);
  EXPECT_THROW(masked_similarity(a, CellPairs{}, a), Error);
  EXPECT_THROW(masked_similarity(a, CellPairs{{16}, {0}}, a), Error);
  EXPECT_THROW(masked_similarity(a, identity_pairs(4), randn({5, 4, 4}, 8)), Error);
}

TEST(Consistency, ClosedForms) {
  const FeatureTaps f{{2, randn({6, 4, 4}, 9)}, {3, randn({6, 8, 8}, 10)}};
  FeatureTaps neg;
  for (const auto& [l, g] : f) neg.emplace(l, -1.0 * g);
  const PairsForLayer all = [](std::size_t H, std::size_t W) { return identity_pairs(H * W); };
  EXPECT_DOUBLE_EQ(consistency_energy(f, f, all, {2, 3}), 0.4);
  EXPECT_DOUBLE_EQ(consistency_energy(f, neg, all, {2, 3}), 2.0);
  EXPECT_DOUBLE_EQ(consistency_term(0.5), 1.0 / 3.0);
}

TEST(Consistency, MatchesHighPrecisionOracle) {
  const FeatureTaps a{{2, randn({6, 4, 4}, 11)}, {3, randn({6, 8, 8}, 12)}};
  const FeatureTaps b{{2, randn({6, 4, 4}, 13)}, {3, randn({6, 8, 8}, 14)}};
  const PairsForLayer all = [](std::size_t H, std::size_t W) { return identity_pairs(H * W); };
  using boost::multiprecision::sqrt;
  Big ref = 0;
  for (std::size_t l : {2u, 3u}) {
    const auto u = tu::to_big(a.at(l)), v = tu::to_big(b.at(l));
    const Big sim = Big("0.5") * tu::big_dot(u, v) / sqrt(tu::big_dot(u, u) * tu::big_dot(v, v)) + Big("0.5");
    ref += 1 / (1 + 4 * sim);
  }
  EXPECT_NEAR(consistency_energy(a, b, all, {2, 3}), static_cast<double>(ref), 1e-14);
}

TEST(Consistency, DecreasesAsFeaturesAlign) {
  const auto target = randn({6, 4, 4}, 15), other = randn({6, 4, 4}, 16);
  const PairsForLayer all = [](std::size_t H, std::size_t W) { return identity_pairs(H * W); };
  double prev = 1e300;
  for (int k = 0; k <= 10; ++k) {
    const double w = k / 10.0;
    const FeatureTaps now{{2, w * target + (1.0 - w) * other}};
    const double e = consistency_energy(now, {{2, target}}, all, {2});
    EXPECT_LT(e, prev);
    prev = e;
  }
  EXPECT_NEAR(prev, 0.2, 1e-12);
}

TEST(Contrast, Examples) {
  const auto F = randn({6, 4, 4}, 17);
  const PairsForLayer all = [](std::size_t H, std::size_t W) { return identity_pairs(H * W); };
  EXPECT_NEAR(contrast_energy({{2, F}}, {{2, F}}, all, {2}), 1.0, 1e-15);
  EXPECT_NEAR(contrast_energy({{2, F}}, {{2, -1.0 * F}}, all, {2}), 0.0, 1e-15);
  EXPECT_NEAR(contrast_energy({{2, F}, {3, F}}, {{2, F}, {3, -1.0 * F}}, all, {2, 3}), 0.5, 1e-15);
  EXPECT_THROW(contrast_energy({{2, F}}, {{2, F}}, all, {}), Error);
  EXPECT_THROW(contrast_energy({{2, F}}, {{2, F}}, all, {3}), Error);
}

struct Scene {
  FeatureTaps src, ref;
  RegionPair region;
};

Scene scene() {
  Scene s;
  s.src = {{2, randn({6, 4, 4}, 18)}, {3, randn({6, 8, 8}, 19)}};
  s.ref = {{2, randn({6, 4, 4}, 20)}, {3, randn({6, 8, 8}, 21)}};
  s.region = {rect(8, 8, 2, 6, 2, 6), rect(8, 8, 0, 4, 4, 8)};
  return s;
}

TEST(TaskEnergy, ClosedFormValues) {
  const auto s = scene();
  GuidanceWeights w;
  const RegionPair same{s.region.mask_c, s.region.mask_c};
  EXPECT_DOUBLE_EQ(task_energy(EnergyKind::add, s.src, s.src, s.src, same, w).value, 0.8);
  w.w_content = 0.0;
  w.w_edit = 0.0;
  const auto none = task_energy(EnergyKind::add, s.src, s.src, s.ref, s.region, w);
  EXPECT_EQ(none.value, 0.0);
  EXPECT_TRUE(none.cotangents.empty());
}

TEST(TaskEnergy, IsWeightedSumOfTerms) {
  const auto s = scene();
  const auto now = FeatureTaps{{2, randn({6, 4, 4}, 22)}, {3, randn({6, 8, 8}, 23)}};
  GuidanceWeights w;
  w.w_content = 0.7;
  w.w_edit = 1.9;
  const PairsForLayer on = [&](std::size_t H, std::size_t W) { return s.region.same_region(H, W, false); };
  const PairsForLayer off = [&](std::size_t H, std::size_t W) { return s.region.same_region(H, W, true); };
  const PairsForLayer al = [&](std::size_t H, std::size_t W) { return s.region.aligned(H, W); };
  const double add = 0.7 * consistency_energy(now, s.src, on, {2, 3}) + 1.9 * consistency_energy(now, s.ref, al, {2, 3});
  const double rem = 0.7 * consistency_energy(now, s.src, off, {2, 3}) + 1.9 * contrast_energy(now, s.ref, al, {2, 3});
  EXPECT_NEAR(task_energy(EnergyKind::add, now, s.src, s.ref, s.region, w).value, add, 1e-14);
  EXPECT_NEAR(task_energy(EnergyKind::remove, now, s.src, s.ref, s.region, w).value, rem, 1e-14);
}

TEST(TaskEnergy, CotangentsMatchFiniteDifferences) {
  const auto s = scene();
  const auto now = FeatureTaps{{2, randn({6, 4, 4}, 24)}, {3, randn({6, 8, 8}, 25)}};
  GuidanceWeights w;
  w.w_content = 0.6;
  for (auto kind : {EnergyKind::add, EnergyKind::remove}) {
    const auto e = task_energy(kind, now, s.src, s.ref, s.region, w);
    for (std::size_t l : {2u, 3u}) {
      const auto fd = tu::finite_difference(
          [&](const LatentGrid& x) {
            auto t = now;
            t.at(l) = x;
            return task_energy(kind, t, s.src, s.ref, s.region, w).value;
          },
          now.at(l), 1e-5);
      EXPECT_LT(tu::normwise_rel_error(e.cotangents.at(l), fd), 1e-6);
    }
  }
}

TEST(TaskEnergy, AddGradientStaysInsideEditedRegion) {
  const auto s = scene();
  const auto now = FeatureTaps{{2, randn({6, 4, 4}, 26)}, {3, randn({6, 8, 8}, 27)}};
  const auto e = task_energy(EnergyKind::add, now, s.src, s.ref, s.region, GuidanceWeights{});
  for (const auto& [l, g] : e.cotangents) {
    const std::size_t H = g.time_len(), W = g.freq_len();
    const TFMask m = mask_downsample(s.region.mask_c, H, W);
    for (std::size_t ch = 0; ch < g.channels(); ++ch)
      for (std::size_t t = 0; t < H; ++t)
        for (std::size_t f = 0; f < W; ++f)
          if (!m.get(t, f)) EXPECT_EQ(g.at(ch, t, f), 0.0);
  }
}

TEST(TaskEnergy, ThroughToyDenoiserMatchesFiniteDifferences) {
  const ToyDenoiser model;
  const GridShape shape{4, 8, 8};
  const std::size_t t = 500;
  const Condition c = Condition::label(0);
  GuidanceWeights w;
  const auto src = model.predict(randn(shape, 28), t, c, {2, 3}).taps;
  const auto ref = model.predict(randn(shape, 29), t, c, {2, 3}).taps;
  const RegionPair region{rect(8, 8, 2, 6, 0, 4), rect(8, 8, 4, 8, 4, 8)};
  const auto z = randn(shape, 30);
  for (auto kind : {EnergyKind::add, EnergyKind::remove}) {
    auto energy = [&](const LatentGrid& x) {
      return task_energy(kind, model.predict(x, t, c, {2, 3}).taps, src, ref, region, w).value;
    };
    const auto e = task_energy(kind, model.predict(z, t, c, {2, 3}).taps, src, ref, region, w);
    const auto g = model.vjp(z, t, c, e.cotangents);
    const auto fd = tu::finite_difference(energy, z);
    EXPECT_LE(tu::normwise_rel_error(g, fd), 1e-2);
  }
}

TEST(GuidedEpsilon, Formula) {
  const auto s = make_schedule(1000, ScheduleShape::linear);
  const auto eps = randn({4, 8, 8}, 31), g = randn({4, 8, 8}, 32);
  EXPECT_EQ(guided_epsilon(eps, g, 300, s, 0.0), eps);
  const auto out = guided_epsilon(eps, g, 300, s, 2.5);
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out[i], eps[i] + 2.5 * s.sigma(300) * g[i], 1e-14);
  EXPECT_THROW(guided_epsilon(eps, randn({4, 4, 8}, 1), 300, s, 1.0), Error);
}

TEST(RegionPair, Counts) {
  const RegionPair r{rect(8, 8, 2, 6, 2, 6), rect(8, 8, 0, 4, 0, 4)};
  const auto on = r.same_region(8, 8, false), off = r.same_region(8, 8, true);
  EXPECT_EQ(on.size(), 16u);
  EXPECT_EQ(off.size(), 48u);
  const auto al = r.aligned(8, 8);
  EXPECT_EQ(al.size(), 16u);
  EXPECT_EQ(al.c.front(), 2u * 8 + 2);
  EXPECT_EQ(al.r.front(), 0u);
  EXPECT_EQ(al.c.back(), 5u * 8 + 5);
  EXPECT_EQ(al.r.back(), 3u * 8 + 3);
  // Reference box half the size: nearest-neighbour, every reference cell used twice per axis.
  const RegionPair half{rect(8, 8, 0, 4, 0, 4), rect(8, 8, 4, 6, 4, 6)};
  const auto h = half.aligned(8, 8);
  EXPECT_EQ(h.size(), 16u);
  std::map<std::size_t, int> uses;
  for (auto c : h.r) ++uses[c];
  EXPECT_EQ(uses.size(), 4u);
  for (const auto& [cell, n] : uses) EXPECT_EQ(n, 4) << cell;
  const RegionPair empty{TFMask(8, 8, false), rect(8, 8, 0, 4, 0, 4)};
  EXPECT_THROW(empty.aligned(8, 8), Error);
  const RegionPair full{TFMask(8, 8, true), TFMask(8, 8, true)};
  EXPECT_THROW(full.same_region(8, 8, true), Error);
}

TEST(GuidanceWeights, JsonAndValidation) {
  const auto w = guidance_weights_from_json({{"w_content", 0.5}, {"eta", 3.0}, {"layers", {3}}});
  EXPECT_EQ(w.w_content, 0.5);
  EXPECT_EQ(w.w_edit, 1.0);
  EXPECT_EQ(w.eta_guidance, 3.0);
  EXPECT_EQ(w.tap_layers, std::vector<std::size_t>{3});
  EXPECT_THROW(guidance_weights_from_json({{"w_edit", -1.0}}), Error);
  EXPECT_THROW(guidance_weights_from_json({{"layers", {2, 2}}}), Error);
  EXPECT_THROW(guidance_weights_from_json({{"eta", "x"}}), Error);
  GuidanceWeights off;
  off.eta_guidance = 0.0;
  EXPECT_FALSE(off.enabled());
}

}  // namespace
}  // namespace morphix
