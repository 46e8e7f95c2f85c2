// Copyright 2026 The Morphix Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <condition_variable>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

// Eigen before httplib: <resolv.h> defines a `res` macro.
#include "morphix/error.hpp"
#include "morphix/hash.hpp"
#include "morphix/pipeline.hpp"
#include "morphix/store.hpp"

#include <httplib.h>

namespace morphix {

enum class JobState { queued, running, done, failed };

inline const char* to_string(JobState s) {
  switch (s) {
    case JobState::queued: return "queued";
    case JobState::running: return "running";
    case JobState::done: return "done";
    case JobState::failed: return "failed";
  }
  return "?";
}

struct Job {
  std::string id;
  nlohmann::json request;
  JobState state = JobState::queued;
  nlohmann::json result;  // set when done
  std::string trace_csv;  // energy trace, set when done
  std::string error;      // set when failed
  double submitted = 0.0, started = 0.0, finished = 0.0;  // unix seconds
};

inline nlohmann::json to_json(const Job& j) {
  nlohmann::json out = {{"id", j.id},
                        {"state", to_string(j.state)},
                        {"request", j.request},
                        {"timestamps", {{"submitted", j.submitted}, {"started", j.started}, {"finished", j.finished}}}};
  if (j.state == JobState::done) out["result"] = j.result;
  if (j.state == JobState::failed) out["error"] = j.error;
  return out;
}

/// Same idempotency key submitted with a different request body.
class IdempotencyConflict : public std::runtime_error {
 public:
  IdempotencyConflict(const std::string& key, std::string existing)
      : std::runtime_error("idempotency key '" + key + "' was used for a different request"),
        existing_(std::move(existing)) {}
  const std::string& existing_job() const { return existing_; }

 private:
  std::string existing_;
};

/// Fixed pool of workers draining a FIFO of edit jobs.
class JobQueue {
 public:
  struct Output {
    nlohmann::json result;
    std::string trace_csv;
  };
  using Runner = std::function<Output(const nlohmann::json& request)>;

  struct Submission {
    std::string job_id;
    bool replayed = false;
  };

  JobQueue(std::size_t workers, Runner run) : run_(std::move(run)) {
    require(workers >= 1, ErrorKind::invalid_argument, "job queue needs at least one worker");
    for (std::size_t i = 0; i < workers; ++i) threads_.emplace_back([this] { work(); });
  }

  ~JobQueue() {
    {
      std::lock_guard lock(mu_);
      stopping_ = true;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
  }

  JobQueue(const JobQueue&) = delete;
  JobQueue& operator=(const JobQueue&) = delete;

  /// A repeated key with an identical request returns the original job.
  Submission submit(const nlohmann::json& request, const std::optional<std::string>& key = std::nullopt) {
    std::lock_guard lock(mu_);
    const std::string body = request.dump();
    if (key) {
      if (auto it = keys_.find(*key); it != keys_.end()) {
        if (jobs_.at(it->second).request.dump() != body) throw IdempotencyConflict(*key, it->second);
        return {it->second, true};
      }
    }
    Job job;
    job.id = sha256_hex(body + "#" + std::to_string(seq_++)).substr(0, 32);
    job.request = request;
    job.submitted = now();
    const std::string id = job.id;
    jobs_.emplace(id, std::move(job));
    if (key) keys_.emplace(*key, id);
    pending_.push_back(id);
    cv_.notify_one();
    return {id, false};
  }

  std::optional<Job> get(const std::string& id) const {
    std::lock_guard lock(mu_);
    auto it = jobs_.find(id);
    if (it == jobs_.end()) return std::nullopt;
    return it->second;
  }

  /// Blocks until the job finishes or the timeout passes.
  std::optional<Job> wait(const std::string& id, std::chrono::milliseconds timeout) const {
    std::unique_lock lock(mu_);
    done_cv_.wait_for(lock, timeout, [&] {
      auto it = jobs_.find(id);
      return it == jobs_.end() || it->second.state == JobState::done || it->second.state == JobState::failed;
    });
    auto it = jobs_.find(id);
    if (it == jobs_.end()) return std::nullopt;
    return it->second;
  }

  std::size_t executed() const {
    std::lock_guard lock(mu_);
    return executed_;
  }

  std::size_t pending() const {
    std::lock_guard lock(mu_);
    return pending_.size();
  }

 private:
  static double now() {
    return std::chrono::duration<double>(std::chrono::system_clock::now().time_since_epoch()).count();
  }

  void work() {
    for (;;) {
      std::string id;
      nlohmann::json request;
      {
        std::unique_lock lock(mu_);
        cv_.wait(lock, [&] { return stopping_ || !pending_.empty(); });
        if (stopping_) return;
        id = pending_.front();
        pending_.pop_front();
        auto& job = jobs_.at(id);
        job.state = JobState::running;
        job.started = now();
        request = job.request;
        ++executed_;
      }
      std::optional<Output> out;
      std::string error;
      try {
        out = run_(request);
      } catch (const std::exception& e) {
        error = e.what();
      } catch (...) {
        error = "unknown error";
      }
      {
        std::lock_guard lock(mu_);
        auto& job = jobs_.at(id);
        job.finished = now();
        if (out) {
          job.result = std::move(out->result);
          job.trace_csv = std::move(out->trace_csv);
          job.state = JobState::done;
        } else {
          job.error = error;
          job.state = JobState::failed;
        }
      }
      done_cv_.notify_all();
    }
  }

  Runner run_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  mutable std::condition_variable done_cv_;
  std::deque<std::string> pending_;
  std::map<std::string, Job> jobs_;
  std::map<std::string, std::string> keys_;
  std::uint64_t seq_ = 0;
  std::size_t executed_ = 0;
  bool stopping_ = false;
  std::vector<std::thread> threads_;
};

/// HTTP front end: asset upload and download, edit jobs, renders.
class Service {
 public:
  explicit Service(AppConfig cfg)
      : cfg_(std::move(cfg)),
        handle_(cfg_.model, cfg_.sampler.schedule),
        store_(cfg_.service.data_dir),
        queue_(cfg_.service.workers, [this](const nlohmann::json& r) { return execute(r); }) {
    routes();
  }

  ~Service() { stop(); }

  httplib::Server& http() { return server_; }
  AssetStore& store() { return store_; }
  JobQueue& jobs() { return queue_; }
  const AppConfig& config() const { return cfg_; }

  /// Binds and serves until stop(); returns false when the bind fails.
  bool listen(const std::string& host, int port) { return server_.listen(host, port); }
  int bind_any_port(const std::string& host) { return server_.bind_to_any_port(host); }
  bool listen_after_bind() { return server_.listen_after_bind(); }
  void stop() { server_.stop(); }

  /// Parses, validates and checks the operands of an edit request body.
  EditRequest parse_request(const std::string& body) const {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(body);
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::invalid_argument, std::string("malformed JSON: ") + e.what());
    }
    EditRequest req = edit_request_from_json(j, request_defaults(cfg_));
    for (const auto* ref : {&req.source, req.reference ? &*req.reference : nullptr,
                            req.reference_in ? &*req.reference_in : nullptr}) {
      if (!ref) continue;
      require(store_.contains(*ref), ErrorKind::not_found, "unknown asset " + *ref);
      const auto k = store_.kind(*ref);
      require(k == AssetKind::spectrogram || k == AssetKind::waveform, ErrorKind::invalid_argument,
              "asset " + *ref + " is " + to_string(k) + ", need audio");
    }
    return req;
  }

  /// Runs one edit request to completion and stores its outputs.
  JobQueue::Output execute(const nlohmann::json& request) {
    const EditRequest req = edit_request_from_json(request, request_defaults(cfg_));
    SpectralEditInputs in;
    in.source = store_.spectrogram(req.source, cfg_.stft);
    if (req.reference) in.reference = store_.spectrogram(*req.reference, cfg_.stft);
    if (req.reference_in) in.reference_in = store_.spectrogram(*req.reference_in, cfg_.stft);
    const auto res = run_spectral_edit(req, in, handle_);
    const std::string spec_id = store_.put(serialize(res.spectrogram), {{"produced_by", res.provenance}});
    const std::string lat_id = store_.put(serialize(res.latent), {{"produced_by", res.provenance}});
    nlohmann::json result = {{"spectrogram", spec_id},
                             {"latent", lat_id},
                             {"stages", res.outcome.stages},
                             {"energy_trace", res.outcome.energy_trace},
                             {"timing_ms", res.seconds * 1e3},
                             {"provenance", res.provenance}};
    return {std::move(result), energy_trace_csv(res.outcome)};
  }

 private:
  static int status_for(ErrorKind k) {
    switch (k) {
      case ErrorKind::not_found: return 404;
      case ErrorKind::compute: return 500;
      default: return 400;
    }
  }

  static void send_json(httplib::Response& res, int status, const nlohmann::json& j) {
    res.status = status;
    res.set_content(j.dump(), "application/json");
  }

  static void send_error(httplib::Response& res, int status, const std::string& msg) {
    send_json(res, status, {{"error", msg}});
  }

  void routes() {
    server_.set_payload_max_length(std::size_t{256} << 20);
    server_.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
      try {
        std::rethrow_exception(ep);
      } catch (const Error& e) {
        send_error(res, status_for(e.kind()), e.what());
      } catch (const std::exception& e) {
        send_error(res, 500, e.what());
      } catch (...) {
        send_error(res, 500, "unknown error");
      }
    });

    server_.Get("/health", [this](const httplib::Request&, httplib::Response& res) {
      send_json(res, 200, {{"status", "ok"}, {"model_sha256", handle_.digest()}, {"pending", queue_.pending()}});
    });

    server_.Post("/assets", [this](const httplib::Request& req, httplib::Response& res) {
      std::string body;
      if (req.is_multipart_form_data()) {
        if (!req.has_file("file")) return send_error(res, 400, "multipart upload needs a 'file' part");
        body = req.get_file_value("file").content;
      } else {
        body = req.body;
      }
      if (body.empty()) return send_error(res, 400, "empty upload");
      const std::span<const std::uint8_t> bytes(reinterpret_cast<const std::uint8_t*>(body.data()), body.size());
      const std::string id = store_.put(bytes);
      send_json(res, 201, {{"id", id}, {"kind", to_string(store_.kind(id))}, {"size", body.size()}});
    });

    server_.Get(R"(/assets/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      const std::string id = req.matches[1];
      if (!store_.contains(id)) return send_error(res, 404, "unknown asset " + id);
      const auto bytes = store_.get(id);
      res.set_header("ETag", "\"" + id + "\"");
      res.set_header("Cache-Control", "public, max-age=31536000, immutable");
      res.set_header("X-Asset-Kind", to_string(store_.kind(id)));
      res.set_content(std::string(bytes.begin(), bytes.end()), "application/octet-stream");
    });

    server_.Get(R"(/assets/([^/]+)/render\.png)", [this](const httplib::Request& req, httplib::Response& res) {
      const std::string id = req.matches[1];
      if (!store_.contains(id)) return send_error(res, 404, "unknown asset " + id);
      const Spectrogram s = store_.spectrogram(id, cfg_.stft);
      std::optional<TFMask> mask;
      if (req.has_param("mask")) {
        nlohmann::json mj;
        try {
          mj = nlohmann::json::parse(req.get_param_value("mask"));
        } catch (const nlohmann::json::exception& e) {
          return send_error(res, 400, std::string("mask: ") + e.what());
        }
        mask = mask_from_json(mj);
      }
      const auto png = render_png(s, mask ? &*mask : nullptr);
      res.set_header("Cache-Control", "public, max-age=31536000, immutable");
      res.set_content(std::string(png.begin(), png.end()), "image/png");
    });

    server_.Post("/edits", [this](const httplib::Request& req, httplib::Response& res) {
      const EditRequest parsed = parse_request(req.body);
      std::optional<std::string> key;
      if (req.has_header("Idempotency-Key")) key = req.get_header_value("Idempotency-Key");
      try {
        const auto sub = queue_.submit(to_json(parsed), key);
        send_json(res, sub.replayed ? 200 : 202, {{"job_id", sub.job_id}, {"replayed", sub.replayed}});
      } catch (const IdempotencyConflict& e) {
        send_json(res, 409, {{"error", e.what()}, {"job_id", e.existing_job()}});
      }
    });

    server_.Get(R"(/edits/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      const auto job = queue_.get(req.matches[1]);
      if (!job) return send_error(res, 404, "unknown job " + std::string(req.matches[1]));
      send_json(res, job->state == JobState::failed ? 500 : 200, to_json(*job));
    });

    server_.Get(R"(/edits/([^/]+)/trace)", [this](const httplib::Request& req, httplib::Response& res) {
      const auto job = queue_.get(req.matches[1]);
      if (!job) return send_error(res, 404, "unknown job " + std::string(req.matches[1]));
      if (job->state == JobState::failed) return send_error(res, 500, job->error);
      if (job->state != JobState::done) return send_error(res, 404, "job " + job->id + " has no trace yet");
      res.set_content(job->trace_csv, "text/csv");
    });
  }

  AppConfig cfg_;
  ModelHandle handle_;
  AssetStore store_;
  httplib::Server server_;
  JobQueue queue_;  // last: workers stop before the rest is torn down
};

}  // namespace morphix
