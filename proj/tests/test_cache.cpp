// Copyright 2026 The Morphix Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <random>

#include "morphix/attention_cache.hpp"
#include "morphix/hash.hpp"
#include "morphix/sampler.hpp"
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

AttentionKV kv(std::size_t tokens, std::size_t dim, float base) {
  AttentionKV a{tokens, dim, std::vector<float>(tokens * dim), std::vector<float>(tokens * dim)};
  for (std::size_t i = 0; i < a.keys.size(); ++i) {
    a.keys[i] = base + static_cast<float>(i);
    a.values[i] = base - static_cast<float>(i);
  }
  return a;
}

const GridShape kShape{4, 8, 8};

TEST(TrajectoryBank, RecordAndComplete) {
  TrajectoryBank b(2, {3, 1, 2});
  EXPECT_EQ(b.layers(), (std::vector<std::size_t>{1, 2, 3}));
  EXPECT_FALSE(b.complete());
  for (std::size_t s = 0; s < 2; ++s)
    for (std::size_t l : {1u, 2u, 3u}) b.record(s, l, kv(4, 2, static_cast<float>(10 * s + l)));
  EXPECT_TRUE(b.complete());
  EXPECT_EQ(b.size(), 6u);
  EXPECT_EQ(*b.find(1, 2), kv(4, 2, 12.0f));
  EXPECT_EQ(b.find(1, 4), nullptr);
}

TEST(TrajectoryBank, RejectsBadRecords) {
  TrajectoryBank b(2, {1, 2});
  b.record(0, 1, kv(4, 2, 0));
  EXPECT_THROW(b.record(0, 1, kv(4, 2, 1)), Error);
  EXPECT_THROW(b.record(2, 1, kv(4, 2, 0)), Error);
  EXPECT_THROW(b.record(0, 3, kv(4, 2, 0)), Error);
  EXPECT_THROW(TrajectoryBank(2, {1, 1}), Error);
  EXPECT_THROW(b.record_latent(3, LatentGrid(kShape)), Error);
  EXPECT_THROW(b.latent(0), Error);
}

TEST(TrajectoryBank, InjectOnlyOnSubstitutionLayers) {
  TrajectoryBank b(1, {1, 2, 3}, {2});
  b.record(0, 1, kv(4, 2, 100));
  b.record(0, 2, kv(4, 2, 200));
  const auto native = kv(4, 2, 0);
  EXPECT_EQ(b.inject(0, 1, native), native);
  EXPECT_EQ(b.inject(0, 2, native), kv(4, 2, 200));
  EXPECT_EQ(b.inject(0, 3, native), native);
  try {
    b.set_substitution({3});
    b.inject(0, 3, native);
    ADD_FAILURE();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::not_found);
  }
  b.set_substitution({2});
  EXPECT_THROW(b.inject(0, 2, kv(8, 2, 0)), Error);
}

TEST(TrajectoryBank, SerializationRoundTrip) {
  TrajectoryBank b(3, {1, 2}, {2});
  for (std::size_t s = 0; s < 3; ++s) {
    b.record(s, 1, kv(4, 3, static_cast<float>(s)));
    b.record(s, 2, kv(16, 3, static_cast<float>(s) + 0.5f));
  }
  for (std::size_t o = 0; o <= 3; ++o) b.record_latent(o, randn(kShape, o));
  const auto bytes = b.serialize();
  const auto back = TrajectoryBank::deserialize(bytes);
  EXPECT_EQ(back, b);
  EXPECT_EQ(back.serialize(), bytes);
  const auto dir = tu::temp_dir("bank");
  b.save(dir / "b.mrxb");
  EXPECT_EQ(TrajectoryBank::load(dir / "b.mrxb"), b);
  std::filesystem::remove_all(dir);

  auto bad = bytes;
  bad[1] = 'Z';
  EXPECT_THROW(TrajectoryBank::deserialize(bad), Error);
  EXPECT_THROW(TrajectoryBank::deserialize(std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + 20)), Error);
}

class SelfSubstitution : public ::testing::TestWithParam<std::size_t> {};

TEST_P(SelfSubstitution, CachedFromSelfIsBitIdentical) {
  const std::size_t n = GetParam();
  const auto s = make_schedule(1000, ScheduleShape::linear);
  const ToyDenoiser m;
  SamplerConfig cfg;
  cfg.num_inference_steps = n;
  const auto zT = randn(kShape, 40);
  const Condition c = Condition::label(1);
  TrajectoryBank bank(n, m.attention_layers());
  TrajectoryRecorder rec(bank);
  const auto plain = sample_loop(zT, m, c, cfg, s, &rec);
  EXPECT_TRUE(bank.complete());
  EXPECT_TRUE(bank.latents_complete());
  EXPECT_EQ(bank.latent(0), zT);
  EXPECT_EQ(bank.latent(n), plain);
  TrajectoryInjector inj(bank);
  const auto cached = sample_loop(zT, m, c, cfg, s, &inj);
  EXPECT_EQ(cached, plain);
}

INSTANTIATE_TEST_SUITE_P(Steps, SelfSubstitution, ::testing::Values(10, 25, 50));

TEST(Injection, ForeignCacheChangesOutputAndKeepsRowsStochastic) {
  const auto s = make_schedule(1000, ScheduleShape::linear);
  const ToyDenoiser m;
  SamplerConfig cfg;
  cfg.num_inference_steps = 5;
  TrajectoryBank bank(5, m.attention_layers());
  TrajectoryRecorder rec(bank);
  const auto other = sample_loop(randn(kShape, 41), m, Condition::label(0), cfg, s, &rec);
  (void)other;
  const auto zT = randn(kShape, 42);
  TrajectoryInjector inj(bank);
  EXPECT_NE(sample_loop(zT, m, Condition::label(0), cfg, s, &inj),
            sample_loop(zT, m, Condition::label(0), cfg, s));

  BankInjector control(bank);
  control.set_step(2);
  for (std::size_t layer : {2u, 3u}) {
    const auto w = m.attention_weights(zT, 600, Condition::null(), layer, &control);
    const std::size_t tokens = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(w.size()))));
    ASSERT_EQ(tokens * tokens, w.size());
    for (std::size_t r = 0; r < tokens; ++r) {
      double sum = 0;
      for (std::size_t k = 0; k < tokens; ++k) sum += w[r * tokens + k];
      EXPECT_NEAR(sum, 1.0, 1e-12);
    }
  }
}

TEST(Injection, InversionRecordsEveryStep) {
  const auto s = make_schedule(1000, ScheduleShape::linear);
  const ToyDenoiser m;
  SamplerConfig cfg;
  cfg.num_inference_steps = 6;
  TrajectoryBank bank(6, m.attention_layers());
  const auto x0 = randn(kShape, 43);
  const auto zT = invert_loop(x0, m, Condition::label(0), cfg, s, &bank);
  EXPECT_TRUE(bank.complete());
  EXPECT_TRUE(bank.latents_complete());
  EXPECT_EQ(bank.latent(0), zT);
  EXPECT_EQ(bank.latent(6), x0);
}

TEST(Injection, GoldenRecordedBank) {
  const auto s = make_schedule(1000, ScheduleShape::linear);
  const ToyDenoiser m;
  SamplerConfig cfg;
  cfg.num_inference_steps = 4;
  TrajectoryBank bank(4, m.attention_layers());
  TrajectoryRecorder rec(bank);
  sample_loop(randn(kShape, 44), m, Condition::label(1), cfg, s, &rec);
  EXPECT_EQ(sha256_hex(bank.serialize()), "ff674f540dbb1fbec3e736a9ced5f6835de56a8bc9b4efe702ee69ec749acdcd");
}

}  // namespace
}  // namespace morphix
