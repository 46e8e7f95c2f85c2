// Copyright 2026 The Morphix Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <atomic>
#include <random>
#include <thread>

#include "morphix/service.hpp"
#include "support.hpp"

namespace morphix {
namespace {

std::vector<std::uint8_t> spg_bytes(std::uint64_t seed) {
  Spectrogram s{16, 65, 32, 128, 8000, {}};
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n01(-2.0f, 1.0f);
  s.values.resize(16 * 65);
  for (auto& v : s.values) v = n01(rng);
  return serialize(s);
}

std::string as_string(const std::vector<std::uint8_t>& b) { return {b.begin(), b.end()}; }

TEST(AssetStore, ContentAddressed) {
  const auto dir = tu::temp_dir("store");
  AssetStore store(dir);
  const auto bytes = spg_bytes(1);
  const auto id = store.put(bytes);
  EXPECT_EQ(id, sha256_hex(bytes));
  EXPECT_EQ(store.put(bytes), id);
  EXPECT_TRUE(store.contains(id));
  EXPECT_EQ(store.get(id), bytes);
  EXPECT_EQ(store.kind(id), AssetKind::spectrogram);
  EXPECT_FALSE(store.contains("../etc/passwd"));
  EXPECT_FALSE(store.contains(std::string(64, 'a')));
  try {
    store.get(std::string(64, 'a'));
    ADD_FAILURE();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::not_found);
  }
  const std::vector<std::uint8_t> junk{'n', 'o', 'p', 'e'};
  EXPECT_THROW(store.put(junk), Error);
  std::filesystem::remove_all(dir);
}

TEST(JobQueue, IdempotentSubmission) {
  std::atomic<int> runs{0};
  JobQueue q(2, [&](const nlohmann::json& r) {
    ++runs;
    return JobQueue::Output{{{"echo", r}}, "stage,step,energy\n"};
  });
  const nlohmann::json a = {{"x", 1}}, b = {{"x", 2}};
  const auto first = q.submit(a, "k1");
  EXPECT_FALSE(first.replayed);
  const auto again = q.submit(a, "k1");
  EXPECT_TRUE(again.replayed);
  EXPECT_EQ(again.job_id, first.job_id);
  try {
    q.submit(b, "k1");
    ADD_FAILURE();
  } catch (const IdempotencyConflict& e) {
    EXPECT_EQ(e.existing_job(), first.job_id);
  }
  const auto unkeyed1 = q.submit(a), unkeyed2 = q.submit(a);
  EXPECT_NE(unkeyed1.job_id, unkeyed2.job_id);
  for (const auto& id : {first.job_id, unkeyed1.job_id, unkeyed2.job_id}) {
    const auto j = q.wait(id, std::chrono::seconds(10));
    ASSERT_TRUE(j);
    EXPECT_EQ(j->state, JobState::done);
    EXPECT_EQ(j->result.at("echo"), a);
  }
  EXPECT_EQ(runs.load(), 3);
  EXPECT_EQ(q.executed(), 3u);
}

TEST(JobQueue, FailuresAreRecorded) {
  JobQueue q(1, [](const nlohmann::json&) -> JobQueue::Output { fail(ErrorKind::compute, "boom"); });
  const auto s = q.submit({{"x", 1}});
  const auto j = q.wait(s.job_id, std::chrono::seconds(10));
  ASSERT_TRUE(j);
  EXPECT_EQ(j->state, JobState::failed);
  EXPECT_NE(j->error.find("boom"), std::string::npos);
  EXPECT_EQ(to_json(*j).at("state"), "failed");
  EXPECT_FALSE(q.get("nope"));
}

class ServiceTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = tu::temp_dir("service");
    AppConfig cfg = app_config_from_json({{"sampler", {{"steps", 8}}}, {"morph", {{"n_iter", 5}}}});
    cfg.service.data_dir = dir_.string();
    cfg.service.workers = 1;
    svc_ = std::make_unique<Service>(cfg);
    port_ = svc_->bind_any_port("127.0.0.1");
    ASSERT_GT(port_, 0);
    thread_ = std::thread([this] { svc_->listen_after_bind(); });
    client_ = std::make_unique<httplib::Client>("127.0.0.1", port_);
    client_->set_read_timeout(60, 0);
    for (int i = 0; i < 100 && !svc_->http().is_running(); ++i)
      std::this_thread::sleep_for(std::chrono::milliseconds(10));
  }

  void TearDown() override {
    svc_->stop();
    thread_.join();
    svc_.reset();
    std::filesystem::remove_all(dir_);
  }

  std::string upload(const std::vector<std::uint8_t>& bytes) {
    auto res = client_->Post("/assets", as_string(bytes), "application/octet-stream");
    EXPECT_TRUE(res);
    EXPECT_EQ(res->status, 201);
    return nlohmann::json::parse(res->body).at("id").get<std::string>();
  }

  nlohmann::json edit_body(const std::string& src, const std::string& ref) {
    EditRequest r;
    r.kind = EditKind::add;
    r.source = src;
    r.reference = ref;
    r.mask_c = TFMask(16, 65, false);
    r.mask_c.fill_rect(4, 12, 8, 24);
    r.mask_r = r.mask_c;
    auto j = to_json(r);
    j.erase("weights");
    j.erase("sampler");
    j.erase("morph");
    j.erase("kv_layers");
    return j;
  }

  nlohmann::json wait_done(const std::string& job) {
    for (int i = 0; i < 600; ++i) {
      auto res = client_->Get("/edits/" + job);
      const auto j = nlohmann::json::parse(res->body);
      if (j.at("state") == "done" || j.at("state") == "failed") return j;
      std::this_thread::sleep_for(std::chrono::milliseconds(50));
    }
    ADD_FAILURE() << "job " << job << " did not finish";
    return {};
  }

  std::filesystem::path dir_;
  std::unique_ptr<Service> svc_;
  int port_ = 0;
  std::thread thread_;
  std::unique_ptr<httplib::Client> client_;
};

TEST_F(ServiceTest, HealthAndAssets) {
  auto h = client_->Get("/health");
  ASSERT_TRUE(h);
  EXPECT_EQ(h->status, 200);
  const auto hj = nlohmann::json::parse(h->body);
  EXPECT_EQ(hj.at("status"), "ok");
  EXPECT_EQ(hj.at("model_sha256").get<std::string>().size(), 64u);

  const auto bytes = spg_bytes(2);
  const auto id = upload(bytes);
  EXPECT_EQ(id, sha256_hex(bytes));
  auto g = client_->Get("/assets/" + id);
  ASSERT_TRUE(g);
  EXPECT_EQ(g->status, 200);
  EXPECT_EQ(g->body, as_string(bytes));
  EXPECT_EQ(g->get_header_value("ETag"), "\"" + id + "\"");
  EXPECT_EQ(g->get_header_value("X-Asset-Kind"), "spectrogram");

  auto png = client_->Get("/assets/" + id + "/render.png");
  ASSERT_TRUE(png);
  EXPECT_EQ(png->status, 200);
  EXPECT_EQ(png->body.substr(1, 3), "PNG");
  auto bad_mask = client_->Get("/assets/" + id + "/render.png?mask=%7B");
  EXPECT_EQ(bad_mask->status, 400);

  EXPECT_EQ(client_->Get("/assets/" + std::string(64, 'b'))->status, 404);
  EXPECT_EQ(client_->Post("/assets", "garbage", "application/octet-stream")->status, 400);
  EXPECT_EQ(client_->Post("/assets", "", "application/octet-stream")->status, 400);
}

TEST_F(ServiceTest, EditLifecycle) {
  const auto src = upload(spg_bytes(3)), ref = upload(spg_bytes(4));
  const auto body = edit_body(src, ref).dump();
  httplib::Headers key{{"Idempotency-Key", "edit-1"}};
  auto r1 = client_->Post("/edits", key, body, "application/json");
  ASSERT_TRUE(r1);
  ASSERT_EQ(r1->status, 202) << r1->body;
  const std::string job = nlohmann::json::parse(r1->body).at("job_id");
  auto r2 = client_->Post("/edits", key, body, "application/json");
  EXPECT_EQ(r2->status, 200);
  EXPECT_EQ(nlohmann::json::parse(r2->body).at("job_id"), job);
  auto other = edit_body(src, ref);
  other["alpha"] = 0.25;
  auto r3 = client_->Post("/edits", key, other.dump(), "application/json");
  EXPECT_EQ(r3->status, 409);

  const auto done = wait_done(job);
  ASSERT_EQ(done.at("state"), "done") << done.dump();
  const auto& result = done.at("result");
  const std::string out = result.at("spectrogram");
  EXPECT_TRUE(svc_->store().contains(out));
  EXPECT_EQ(svc_->store().kind(result.at("latent")), AssetKind::latent);
  EXPECT_EQ(result.at("stages"), nlohmann::json::array({"add"}));
  EXPECT_EQ(result.at("provenance").at("source_sha256"), src);
  EXPECT_GE(done.at("timestamps").at("finished").get<double>(), done.at("timestamps").at("started").get<double>());

  auto trace = client_->Get("/edits/" + job + "/trace");
  ASSERT_EQ(trace->status, 200);
  EXPECT_EQ(trace->body.substr(0, 18), "stage,step,energy\n");
  EXPECT_EQ(std::count(trace->body.begin(), trace->body.end(), '\n'), 9);
  EXPECT_EQ(svc_->jobs().executed(), 1u);

  // The stored result decodes and keeps the source geometry.
  const auto spec = deserialize_spectrogram(svc_->store().get(out));
  EXPECT_EQ(spec.frames, 16u);
  EXPECT_EQ(spec.bins, 65u);
}

TEST_F(ServiceTest, RequestErrors) {
  const auto src = upload(spg_bytes(5));
  EXPECT_EQ(client_->Get("/edits/nope")->status, 404);
  EXPECT_EQ(client_->Get("/edits/nope/trace")->status, 404);
  // Add without a reference.
  auto j = edit_body(src, src);
  j.erase("reference");
  EXPECT_EQ(client_->Post("/edits", j.dump(), "application/json")->status, 400);
  // Unknown operand.
  auto missing = edit_body(src, std::string(64, 'c'));
  EXPECT_EQ(client_->Post("/edits", missing.dump(), "application/json")->status, 404);
  // Operand that is not audio.
  const auto lat = svc_->store().put(serialize(LatentGrid({4, 4, 16}, 0.5)));
  EXPECT_EQ(client_->Post("/edits", edit_body(src, lat).dump(), "application/json")->status, 400);
  EXPECT_EQ(svc_->jobs().executed(), 0u);
}

TEST_F(ServiceTest, MalformedJsonAlwaysRejected) {
  std::mt19937_64 rng(6);
  const std::string alphabet = "{}[]\":,0123456789abcdefkindsourcemask_c \n\\";
  int rejected = 0;
  for (int i = 0; i < 1000; ++i) {
    std::string body;
    const std::size_t len = 1 + rng() % 40;
    for (std::size_t k = 0; k < len; ++k) body += alphabet[rng() % alphabet.size()];
    if (i % 3 == 0) body = "{\"kind\":\"add\"," + body;
    auto res = client_->Post("/edits", body, "application/json");
    ASSERT_TRUE(res);
    rejected += res->status == 400;
  }
  EXPECT_EQ(rejected, 1000);
  EXPECT_EQ(svc_->jobs().executed(), 0u);
  EXPECT_EQ(client_->Get("/health")->status, 200);
}

}  // namespace
}  // namespace morphix
