#pragma once

// Request handling, jobs and event fan-out behind the HTTP/WebSocket server.
// Nothing here knows about sockets; see http_server.hpp for the transport.

#include <condition_variable>
#include <cstdlib>
#include <deque>
#include <filesystem>
#include <fstream>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "landerlab/pipeline.hpp"

namespace landerlab {

constexpr int kEventSchemaVersion = 1;
constexpr const char* kRunDirEnv = "LANDERLAB_RUN_DIR";

struct ServiceConfig {
  std::string run_dir = "landerlab-run";
  std::string host = "127.0.0.1";
  int port = 8080;
  int workers = 2;
  int max_active_sessions = 1;
  std::string clock = "logical";  // logical | wall
  PipelineConfig pipeline;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ServiceConfig, run_dir, host, port, workers, max_active_sessions,
                                                clock, pipeline)

// Reads a JSON config (missing keys keep their defaults); the run directory
// environment variable wins over the file.
inline ServiceConfig load_service_config(const std::string& path = "") {
  ServiceConfig cfg;
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::not_found, "cannot read config " + path);
    try {
      cfg = Json::parse(in).get<ServiceConfig>();
    } catch (const Json::exception& e) {
      throw Error(ErrorCode::invalid_argument, std::string("bad config: ") + e.what());
    }
  }
  if (const char* dir = std::getenv(kRunDirEnv); dir && *dir) cfg.run_dir = dir;
  if (cfg.workers < 1) throw Error(ErrorCode::invalid_argument, "workers must be at least 1");
  if (cfg.clock != "logical" && cfg.clock != "wall") throw Error(ErrorCode::invalid_argument, "clock must be logical or wall");
  return cfg;
}

inline int http_status(ErrorCode c) {
  switch (c) {
    case ErrorCode::invalid_argument: return 400;
    case ErrorCode::not_found: return 404;
    case ErrorCode::conflict: return 409;
    case ErrorCode::usage_error: return 409;
    case ErrorCode::precondition_failed: return 412;
    case ErrorCode::corrupt_data: return 500;
    case ErrorCode::numerical_failure: return 500;
  }
  return 500;
}

struct Response {
  int status = 200;
  std::string content_type = "application/json";
  std::string body;

  bool operator==(const Response&) const = default;
};

inline Response json_response(int status, const Json& j) { return {status, "application/json", j.dump()}; }

inline Response error_response(int status, const std::string& code, const std::string& message) {
  return json_response(status, {{"error", {{"code", code}, {"message", message}}}});
}

inline Response error_response(const Error& e) {
  return error_response(http_status(e.code()), std::string(to_string(e.code())), e.what());
}

// ---------------------------------------------------------------------------

class EventHub {
 public:
  struct Subscriber {
    std::mutex mu;
    std::condition_variable cv;
    std::deque<std::string> queue;
    bool closed = false;

    // Blocks until a message is available or the subscription is closed.
    std::optional<std::string> pop(std::chrono::milliseconds timeout = std::chrono::milliseconds(200)) {
      std::unique_lock lock(mu);
      cv.wait_for(lock, timeout, [&] { return closed || !queue.empty(); });
      if (queue.empty()) return std::nullopt;
      std::string m = std::move(queue.front());
      queue.pop_front();
      return m;
    }
    bool is_closed() {
      std::lock_guard lock(mu);
      return closed && queue.empty();
    }
  };

  std::shared_ptr<Subscriber> subscribe() {
    auto s = std::make_shared<Subscriber>();
    std::lock_guard lock(mu_);
    subs_.push_back(s);
    return s;
  }

  void unsubscribe(const std::shared_ptr<Subscriber>& s) {
    std::lock_guard lock(mu_);
    std::erase(subs_, s);
  }

  // Adds the schema version and a per-hub sequence number.
  void publish(Json event) {
    std::lock_guard lock(mu_);
    event["schema"] = kEventSchemaVersion;
    event["seq"] = seq_++;
    const std::string text = event.dump();
    for (const auto& s : subs_) {
      std::lock_guard l(s->mu);
      if (s->closed) continue;
      s->queue.push_back(text);
      s->cv.notify_one();
    }
  }

  void close_all() {
    std::lock_guard lock(mu_);
    for (const auto& s : subs_) {
      std::lock_guard l(s->mu);
      s->closed = true;
      s->cv.notify_all();
    }
  }

 private:
  std::mutex mu_;
  std::vector<std::shared_ptr<Subscriber>> subs_;
  std::int64_t seq_ = 0;
};

// Runs submitted closures one at a time on a dedicated thread; every write
// to the store goes through here.
class CommandQueue {
 public:
  CommandQueue() : thread_([this] { loop(); }) {}
  ~CommandQueue() {
    {
      std::lock_guard lock(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    thread_.join();
  }
  CommandQueue(const CommandQueue&) = delete;
  CommandQueue& operator=(const CommandQueue&) = delete;

  template <class Fn>
  auto run(Fn&& fn) -> decltype(fn()) {
    using R = decltype(fn());
    if (std::this_thread::get_id() == thread_.get_id()) return fn();
    auto task = std::make_shared<std::packaged_task<R()>>(std::forward<Fn>(fn));
    auto fut = task->get_future();
    {
      std::lock_guard lock(mu_);
      tasks_.emplace_back([task] { (*task)(); });
    }
    cv_.notify_one();
    return fut.get();
  }

 private:
  void loop() {
    for (;;) {
      std::function<void()> t;
      {
        std::unique_lock lock(mu_);
        cv_.wait(lock, [&] { return stop_ || !tasks_.empty(); });
        if (tasks_.empty()) return;
        t = std::move(tasks_.front());
        tasks_.pop_front();
      }
      t();
    }
  }

  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<std::function<void()>> tasks_;
  bool stop_ = false;
  std::thread thread_;
};

// ---------------------------------------------------------------------------

enum class JobStatus { queued, running, done, failed };

inline std::string_view to_string(JobStatus s) {
  switch (s) {
    case JobStatus::queued: return "queued";
    case JobStatus::running: return "running";
    case JobStatus::done: return "done";
    case JobStatus::failed: return "failed";
  }
  return "queued";
}

inline const std::vector<std::string>& job_kinds() {
  static const std::vector<std::string> kinds = {"train_discriminator", "train_primitive", "train_reward",
                                                 "train_final",         "free_episodes",   "evaluate",
                                                 "pipeline",            "baseline"};
  return kinds;
}

struct Job {
  std::string id;
  std::string kind;
  Json params = Json::object();
  JobStatus status = JobStatus::queued;
  std::vector<std::string> history = {"queued"};
  Json last_progress = nullptr;
  long progress_events = 0;
  Json result = nullptr;
  Json error = nullptr;
};

inline void to_json(Json& j, const Job& job) {
  j = {{"id", job.id},
       {"kind", job.kind},
       {"params", job.params},
       {"status", std::string(to_string(job.status))},
       {"history", job.history},
       {"progress", job.last_progress},
       {"progress_events", job.progress_events},
       {"result", job.result},
       {"error", job.error}};
}

// ---------------------------------------------------------------------------

namespace detail {

inline std::string url_decode(const std::string& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '+') {
      out += ' ';
    } else if (s[i] == '%' && i + 2 < s.size() && std::isxdigit(static_cast<unsigned char>(s[i + 1])) &&
               std::isxdigit(static_cast<unsigned char>(s[i + 2]))) {
      out += static_cast<char>(std::stoi(s.substr(i + 1, 2), nullptr, 16));
      i += 2;
    } else {
      out += s[i];
    }
  }
  return out;
}

inline std::vector<std::string> split_path(const std::string& path) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos < path.size()) {
    std::size_t next = path.find('/', pos);
    if (next == std::string::npos) next = path.size();
    if (next > pos) out.push_back(url_decode(path.substr(pos, next - pos)));
    pos = next + 1;
  }
  return out;
}

inline std::map<std::string, std::string> parse_query(const std::string& q) {
  std::map<std::string, std::string> out;
  std::size_t pos = 0;
  while (pos < q.size()) {
    std::size_t amp = q.find('&', pos);
    if (amp == std::string::npos) amp = q.size();
    const std::string kv = q.substr(pos, amp - pos);
    const std::size_t eq = kv.find('=');
    if (!kv.empty()) out[url_decode(kv.substr(0, eq))] = eq == std::string::npos ? "" : url_decode(kv.substr(eq + 1));
    pos = amp + 1;
  }
  return out;
}

template <class T>
T param(const Json& body, const char* key, T fallback) {
  if (!body.contains(key) || body.at(key).is_null()) return fallback;
  try {
    return body.at(key).get<T>();
  } catch (const Json::exception&) {
    throw Error(ErrorCode::invalid_argument, std::string("parameter '") + key + "' has the wrong type");
  }
}

template <class T>
T required(const Json& body, const char* key) {
  if (!body.contains(key) || body.at(key).is_null())
    throw Error(ErrorCode::invalid_argument, std::string("missing parameter '") + key + "'");
  return param<T>(body, key, T{});
}

inline Json episode_json(const EpisodeRecord& e) {
  Json j = episode_header(e);
  j["frames"] = e.frames;
  j["actions"] = e.actions;
  return j;
}

inline Json summary_json(const EpisodeSummary& s) {
  return {{"id", s.id}, {"origin", s.origin}, {"length", s.length}, {"terminal", s.terminal}, {"success", s.success}};
}

inline Json label_set_summary(const LabelSet& ls) {
  return {{"name", ls.name}, {"positives", ls.positives.size()}, {"negatives", ls.negatives.size()}};
}

inline Json session_summary(const DemoSession& s) {
  Json j = {{"session_id", s.id},
            {"status", std::string(to_string(s.status))},
            {"chosen_steps", s.chosen_steps()},
            {"step", s.steps.empty() ? 0 : s.steps.size() - 1}};
  if (!s.episode_id.empty()) j["episode_id"] = s.episode_id;
  return j;
}

}  // namespace detail

class Service {
 public:
  explicit Service(ServiceConfig cfg)
      : cfg_(std::move(cfg)),
        store_(cfg_.run_dir),
        engine_(store_, {cfg_.pipeline.env, cfg_.max_active_sessions},
                cfg_.clock == "wall" ? wall_clock() : logical_clock()) {
    for (int i = 0; i < cfg_.workers; ++i) workers_.emplace_back([this] { worker_loop(); });
  }

  ~Service() { shutdown(); }
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  void shutdown() {
    {
      std::lock_guard lock(jobs_mu_);
      if (stopping_) return;
      stopping_ = true;
    }
    jobs_cv_.notify_all();
    for (auto& t : workers_) t.join();
    workers_.clear();
    events_.close_all();
  }

  const ServiceConfig& config() const { return cfg_; }
  Store& store() { return store_; }
  PrimitiveEngine& engine() { return engine_; }
  EventHub& events() { return events_; }

  // Entry point for every request. `idempotency_key` may be empty; a body
  // field "client_token" is used when it is.
  Response handle(const std::string& method, const std::string& target, const std::string& body = "",
                  std::string idempotency_key = "") {
    try {
      const std::size_t q = target.find('?');
      const std::string path = target.substr(0, q);
      const auto query = q == std::string::npos ? std::map<std::string, std::string>{} : detail::parse_query(target.substr(q + 1));
      const auto parts = detail::split_path(path);
      if (method == "GET") return get(parts, query);
      if (method != "POST") return error_response(405, "method_not_allowed", "method " + method + " not supported");

      Json doc = Json::object();
      if (!body.empty()) {
        try {
          doc = Json::parse(body);
        } catch (const Json::exception&) {
          throw Error(ErrorCode::invalid_argument, "request body is not valid JSON");
        }
        if (!doc.is_object()) throw Error(ErrorCode::invalid_argument, "request body must be a JSON object");
      }
      if (idempotency_key.empty() && doc.contains("client_token")) {
        if (!doc["client_token"].is_string()) throw Error(ErrorCode::invalid_argument, "client_token must be a string");
        idempotency_key = doc["client_token"].get<std::string>();
      }
      doc.erase("client_token");
      const std::string fingerprint = method + " " + path + " " + doc.dump();
      return commands_.run([&]() -> Response {
        if (!idempotency_key.empty()) {
          const auto it = replies_.find(idempotency_key);
          if (it != replies_.end()) {
            if (it->second.first != fingerprint)
              return error_response(409, "conflict", "client token reused for a different request");
            return it->second.second;
          }
        }
        Response r;
        try {
          r = post(parts, doc);
        } catch (const Error& e) {
          r = error_response(e);
        }
        if (!idempotency_key.empty()) replies_[idempotency_key] = {fingerprint, r};
        return r;
      });
    } catch (const Error& e) {
      return error_response(e);
    } catch (const std::exception& e) {
      return error_response(500, "internal", e.what());
    }
  }

  // ---- jobs ----

  std::string submit_job(const std::string& kind, const Json& params) {
    validate_job(kind, params);
    std::lock_guard lock(jobs_mu_);
    if (stopping_) throw Error(ErrorCode::conflict, "service is shutting down");
    Job job;
    char buf[32];
    std::snprintf(buf, sizeof buf, "job-%06zu", jobs_.size() + 1);
    job.id = buf;
    job.kind = kind;
    job.params = params;
    jobs_[job.id] = job;
    queue_.push_back(job.id);
    log_job(job);
    events_.publish({{"type", "job_status"}, {"job_id", job.id}, {"kind", kind}, {"status", "queued"}});
    jobs_cv_.notify_one();
    return job.id;
  }

  Job job(const std::string& id) const {
    std::lock_guard lock(jobs_mu_);
    const auto it = jobs_.find(id);
    if (it == jobs_.end()) throw Error(ErrorCode::not_found, "no job " + id);
    return it->second;
  }

  // Blocks until the job is done or failed.
  Job wait_job(const std::string& id, std::chrono::milliseconds timeout = std::chrono::hours(24)) {
    std::unique_lock lock(jobs_mu_);
    const auto it = jobs_.find(id);
    if (it == jobs_.end()) throw Error(ErrorCode::not_found, "no job " + id);
    jobs_done_cv_.wait_for(lock, timeout, [&] {
      return it->second.status == JobStatus::done || it->second.status == JobStatus::failed;
    });
    return it->second;
  }

  // Runs a job on the calling thread; used by the CLI. Throws on failure.
  Json run_job_inline(const std::string& kind, const Json& params, const PipelineProgress& progress = {}) {
    validate_job(kind, params);
    return execute(kind, params, progress);
  }

  // ---- shared helpers ----

  std::string curve_csv_for(const std::string& policy) const { return curve_csv(stored_curve(store_, policy)); }

  std::optional<Json> report(const std::string& name) const {
    std::lock_guard lock(reports_mu_);
    if (const auto it = reports_.find(name); it != reports_.end()) return it->second;
    if (!store_.run_dir().empty()) {
      const auto path = store_.run_dir() / "reports" / (name + ".json");
      if (std::filesystem::exists(path)) return Json::parse(detail::read_file(path));
    }
    return std::nullopt;
  }

  static std::string report_name(const std::string& kind, std::uint64_t seed) {
    return kind + "-seed-" + std::to_string(seed);
  }

 private:
  // ---- GET ----

  Response get(const std::vector<std::string>& p, const std::map<std::string, std::string>& q) {
    if (p.size() == 1 && p[0] == "episodes") {
      EpisodeFilter f;
      if (q.count("origin")) f.origin = origin_from_string_checked(q.at("origin"));
      if (q.count("source")) f.source = q.at("source");
      if (q.count("tag")) f.tag = q.at("tag");
      if (q.count("success")) {
        if (q.at("success") != "true" && q.at("success") != "false")
          throw Error(ErrorCode::invalid_argument, "success must be true or false");
        f.success = q.at("success") == "true";
      }
      if (q.count("limit")) f.limit = parse_count(q.at("limit"), "limit");
      Json out = Json::array();
      for (const auto& s : store_.query_episodes(f)) out.push_back(detail::summary_json(s));
      return json_response(200, {{"episodes", out}});
    }
    if (p.size() == 2 && p[0] == "episodes") return json_response(200, detail::episode_json(store_.episode(p[1])));
    if (p.size() == 2 && p[0] == "jobs") return json_response(200, job(p[1]));
    if (p.size() == 1 && p[0] == "jobs") {
      std::lock_guard lock(jobs_mu_);
      Json out = Json::array();
      for (const auto& [id, j] : jobs_) out.push_back(j);
      return json_response(200, {{"jobs", out}});
    }
    if (p.size() == 1 && p[0] == "registry") return {200, "application/json", store_.registry_text()};
    if (p.size() == 2 && p[0] == "sessions") return json_response(200, engine_.session(p[1]));
    if (p.size() == 3 && p[0] == "sessions" && p[2] == "branches") {
      const DemoSession s = engine_.session(p[1]);
      const auto branches = engine_.propose_branches(p[1]);
      return json_response(200, {{"session_id", s.id}, {"step", s.steps.size() - 1}, {"branches", branches}});
    }
    if (p.size() == 3 && p[0] == "eval" && p[2] == "curve") {
      const auto curve = stored_curve(store_, p[1]);
      if (q.count("format") && q.at("format") == "json") return json_response(200, {{"policy", p[1]}, {"curve", curve}});
      return {200, "text/csv", curve_csv(curve)};
    }
    if (p.size() == 2 && p[0] == "reports") {
      const auto r = report(p[1]);
      if (!r) throw Error(ErrorCode::not_found, "no report " + p[1]);
      return json_response(200, *r);
    }
    if (p.empty() || (p.size() == 1 && p[0] == "health")) return json_response(200, {{"status", "ok"}});
    throw Error(ErrorCode::not_found, "no such endpoint");
  }

  // ---- POST (runs on the command queue) ----

  Response post(const std::vector<std::string>& p, const Json& body) {
    if (p.size() == 1 && p[0] == "jobs") {
      const std::string kind = detail::required<std::string>(body, "kind");
      const Json params = body.contains("params") ? body.at("params") : Json::object();
      if (!params.is_object()) throw Error(ErrorCode::invalid_argument, "params must be an object");
      return json_response(202, job(submit_job(kind, params)));
    }
    ensure_not_owned();
    if (p.size() == 1 && p[0] == "labelsets") {
      const std::string name = detail::required<std::string>(body, "name");
      if (store_.registry().label_sets.count(name)) throw Error(ErrorCode::conflict, "label set " + name + " exists");
      const LabelSet ls = store_.add_labels(name, {});
      return json_response(201, detail::label_set_summary(ls));
    }
    if (p.size() == 3 && p[0] == "labelsets" && p[2] == "labels") {
      if (!store_.registry().label_sets.count(p[1])) throw Error(ErrorCode::not_found, "no label set " + p[1]);
      const Json labels = body.contains("labels") ? body.at("labels") : Json();
      if (!labels.is_array() || labels.empty()) throw Error(ErrorCode::invalid_argument, "labels must be a non-empty array");
      std::vector<LabelRef> refs;
      for (const auto& l : labels) {
        if (!l.is_object()) throw Error(ErrorCode::invalid_argument, "each label must be an object");
        refs.push_back({detail::required<std::string>(l, "episode_id"), detail::required<int>(l, "frame"),
                        detail::required<bool>(l, "positive")});
      }
      const LabelSet ls = store_.add_labels(p[1], refs);
      events_.publish({{"type", "labels_added"}, {"label_set", p[1]}, {"count", refs.size()}});
      return json_response(200, detail::label_set_summary(ls));
    }
    if (p.size() == 1 && p[0] == "sessions") {
      const auto prims = detail::required<std::vector<std::string>>(body, "primitive_ids");
      const DemoSession s = engine_.start_session(detail::param<std::string>(body, "task_tag", "land"), prims,
                                                  detail::param<std::uint64_t>(body, "seed", 0));
      publish_session(s, "started");
      return json_response(201, detail::session_summary(s));
    }
    if (p.size() == 3 && p[0] == "sessions" && p[2] == "choose") {
      const int branch = detail::required<int>(body, "branch");
      const DemoSession s = engine_.apply_choice(p[1], branch);
      publish_session(s, "chosen");
      return json_response(200, detail::session_summary(s));
    }
    if (p.size() == 3 && p[0] == "sessions" && p[2] == "end") {
      engine_.end_session(p[1]);
      const DemoSession s = engine_.session(p[1]);
      publish_session(s, "ended");
      return json_response(200, detail::session_summary(s));
    }
    throw Error(ErrorCode::not_found, "no such endpoint");
  }

  void publish_session(const DemoSession& s, const std::string& what) {
    Json e = detail::session_summary(s);
    e["type"] = "session_update";
    e["event"] = what;
    events_.publish(e);
  }

  static OriginKind origin_from_string_checked(const std::string& s) {
    try {
      return origin_from_string(s);
    } catch (const Error&) {
      throw Error(ErrorCode::invalid_argument, "unknown origin " + s);
    }
  }

  static std::size_t parse_count(const std::string& s, const char* what) {
    if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos)
      throw Error(ErrorCode::invalid_argument, std::string(what) + " must be a non-negative integer");
    return static_cast<std::size_t>(std::stoull(s));
  }

  // A running pipeline or baseline owns the run directory.
  void ensure_not_owned() const {
    std::lock_guard lock(owner_mu_);
    if (owner_) throw Error(ErrorCode::conflict, "run directory is owned by " + *owner_);
  }

  // ---- job execution ----

  static void validate_job(const std::string& kind, const Json& params) {
    if (std::find(job_kinds().begin(), job_kinds().end(), kind) == job_kinds().end())
      throw Error(ErrorCode::invalid_argument, "unknown job kind " + kind);
    if (!params.is_object()) throw Error(ErrorCode::invalid_argument, "params must be an object");
    const auto need = [&](const char* key) {
      if (!params.contains(key)) throw Error(ErrorCode::invalid_argument, std::string("missing parameter '") + key + "'");
    };
    if (kind == "train_discriminator") need("label_set");
    if (kind == "train_primitive") need("discriminator");
    if (kind == "train_final") need("reward_model");
    if (kind == "free_episodes") need("primitive");
    if (kind == "evaluate") need("policy");
    if (kind == "baseline") {
      need("kind");
      const auto k = detail::param<std::string>(params, "kind", "");
      if (k != "drlhp" && k != "dagger") throw Error(ErrorCode::invalid_argument, "baseline kind must be drlhp or dagger");
    }
  }

  void worker_loop() {
    for (;;) {
      std::string id;
      {
        std::unique_lock lock(jobs_mu_);
        jobs_cv_.wait(lock, [&] { return stopping_ || !queue_.empty(); });
        if (stopping_) return;
        id = queue_.front();
        queue_.pop_front();
      }
      run_job(id);
    }
  }

  void set_status(const std::string& id, JobStatus status, Json result = nullptr, Json error = nullptr) {
    Job snapshot;
    {
      std::lock_guard lock(jobs_mu_);
      Job& j = jobs_.at(id);
      if (static_cast<int>(status) <= static_cast<int>(j.status) || j.status == JobStatus::done ||
          j.status == JobStatus::failed)
        throw Error(ErrorCode::conflict, "job status may only move forward");
      j.status = status;
      j.history.emplace_back(to_string(status));
      if (status == JobStatus::done) j.result = std::move(result);
      if (status == JobStatus::failed) j.error = std::move(error);
      snapshot = j;
    }
    log_job(snapshot);
    Json e = {{"type", "job_status"}, {"job_id", id}, {"kind", snapshot.kind}, {"status", std::string(to_string(status))}};
    if (status == JobStatus::failed) e["error"] = snapshot.error;
    events_.publish(e);
    if (status == JobStatus::done || status == JobStatus::failed) jobs_done_cv_.notify_all();
  }

  void run_job(const std::string& id) {
    const Job j = job(id);
    set_status(id, JobStatus::running);
    const auto progress = [this, id](const Json& ev) {
      Json e = ev;
      e["type"] = ev.value("event", "") == "progress" ? "job_progress" : "job_stage";
      e.erase("event");
      e["job_id"] = id;
      if (e["type"] == "job_progress") {
        std::lock_guard lock(jobs_mu_);
        Job& job = jobs_.at(id);
        job.last_progress = e;
        ++job.progress_events;
      }
      events_.publish(e);
    };
    try {
      Json result = execute(j.kind, j.params, progress);
      set_status(id, JobStatus::done, std::move(result));
    } catch (const Error& e) {
      set_status(id, JobStatus::failed, nullptr, {{"code", std::string(to_string(e.code()))}, {"message", e.what()}});
    } catch (const std::exception& e) {
      set_status(id, JobStatus::failed, nullptr, {{"code", "internal"}, {"message", e.what()}});
    }
  }

  void log_job(const Job& j) {
    if (store_.run_dir().empty()) return;
    commands_.run([&] {
      store_.append_job_log(j.id, {{"status", std::string(to_string(j.status))}, {"kind", j.kind}, {"time_ms", now_ms()}});
    });
  }

  class Ownership {
   public:
    Ownership(Service& s, const std::string& owner) : s_(s) {
      std::lock_guard lock(s_.owner_mu_);
      if (s_.owner_) throw Error(ErrorCode::conflict, "run directory is owned by " + *s_.owner_);
      s_.owner_ = owner;
    }
    ~Ownership() {
      std::lock_guard lock(s_.owner_mu_);
      s_.owner_.reset();
    }

   private:
    Service& s_;
  };

  void save_report(const std::string& name, const Json& report) {
    {
      std::lock_guard lock(reports_mu_);
      reports_[name] = report;
    }
    if (!store_.run_dir().empty())
      commands_.run([&] { detail::write_file_atomic(store_.run_dir() / "reports" / (name + ".json"), report.dump(1) + "\n"); });
  }

  Json execute(const std::string& kind, const Json& params, const PipelineProgress& progress) {
    using detail::param;
    const PipelineConfig& pc = cfg_.pipeline;
    const std::uint64_t seed = param<std::uint64_t>(params, "seed", 0);
    const auto ppo_progress = [&progress](const ProgressEvent& e) {
      if (progress)
        progress({{"event", "progress"},
                  {"env_steps", e.env_steps},
                  {"mean_return", e.mean_return},
                  {"success_rate", e.success_rate},
                  {"entropy", e.entropy}});
    };

    if (kind == "train_discriminator") {
      const std::string set = param<std::string>(params, "label_set", "");
      const std::string name = param<std::string>(params, "name", set);
      const LabelSet ls = store_.with_registry([&](const Registry& r) {
        const auto it = r.label_sets.find(set);
        if (it == r.label_sets.end()) throw Error(ErrorCode::not_found, "no label set " + set);
        return it->second;
      });
      DiscriminatorConfig dc = pc.discriminator;
      dc.seed = seed;
      dc.steps = param<int>(params, "steps", dc.steps);
      Discriminator d = train_discriminator(ls, dc);
      d.label_set = set;
      commands_.run([&] {
        ensure_not_owned();
        store_.put_discriminator(name, d);
      });
      return {{"artifact", "discriminator:" + name}, {"heldout_accuracy", d.heldout_accuracy}};
    }
    if (kind == "train_primitive") {
      const std::string disc = param<std::string>(params, "discriminator", "");
      const std::string id = param<std::string>(params, "primitive_id", disc);
      PPOConfig ppo = pc.primitive_ppo;
      ppo.seed = seed;
      ppo.total_steps = param<long>(params, "total_steps", ppo.total_steps);
      const Discriminator d = store_.with_registry([&](const Registry& r) {
        const auto it = r.discriminators.find(disc);
        if (it == r.discriminators.end()) throw Error(ErrorCode::not_found, "no discriminator " + disc);
        return it->second;
      });
      Primitive p;
      p.id = id;
      p.display_name = param<std::string>(params, "display_name", id);
      p.kind = PrimitiveKind::goal_policy;
      p.horizon = param<int>(params, "horizon", pc.horizon);
      p.provenance = {disc};
      p.policy = train_policy(pc.env, as_reward(d), ppo, ppo_progress);
      commands_.run([&] {
        ensure_not_owned();
        engine_.register_primitive(p);
      });
      return {{"artifact", "primitive:" + id}};
    }
    if (kind == "train_reward") {
      const std::string name = param<std::string>(params, "name", "land");
      std::vector<DemoSession> sessions;
      if (params.contains("sessions")) {
        for (const auto& sid : params.at("sessions").get<std::vector<std::string>>()) sessions.push_back(engine_.session(sid));
      } else {
        for (const auto& s : store_.sessions())
          if (s.status == SessionStatus::ended) sessions.push_back(s);
      }
      const auto comparisons = extract_comparisons(sessions);
      RewardModelConfig rc = pc.reward;
      rc.seed = seed;
      rc.steps = param<int>(params, "steps", rc.steps);
      const RewardModel m = train_reward_model(comparisons, rc, name);
      std::vector<ComparisonRef> refs;
      for (const auto& c : comparisons) refs.push_back(c.ref);
      commands_.run([&] {
        ensure_not_owned();
        store_.put_reward_model(name, {m, refs});
      });
      return {{"artifact", "reward_model:" + name},
              {"comparisons", comparisons.size()},
              {"heldout_accuracy", m.heldout_accuracy}};
    }
    if (kind == "train_final") {
      const std::string rm_name = param<std::string>(params, "reward_model", "");
      const std::string name = param<std::string>(params, "name", "final");
      const RewardModel m = store_.with_registry([&](const Registry& r) {
        const auto it = r.reward_models.find(rm_name);
        if (it == r.reward_models.end()) throw Error(ErrorCode::not_found, "no reward model " + rm_name);
        return it->second.model;
      });
      PPOConfig ppo = pc.final_ppo;
      ppo.seed = seed;
      ppo.total_steps = param<long>(params, "total_steps", ppo.total_steps);
      const Policy pol = train_policy(pc.env, as_reward(m), ppo, ppo_progress);
      commands_.run([&] {
        ensure_not_owned();
        store_.put_policy(name, {"final", pol, {"reward_model:" + rm_name}});
      });
      return {{"artifact", "policy:" + name}};
    }
    if (kind == "free_episodes") {
      const std::string pid = param<std::string>(params, "primitive", "");
      const int n = param<int>(params, "n", 10);
      if (n < 1) throw Error(ErrorCode::invalid_argument, "n must be positive");
      const auto ids = commands_.run([&] {
        ensure_not_owned();
        return engine_.run_free_episodes(pid, n, seed, param<std::string>(params, "tag", ""));
      });
      return {{"episodes", ids}};
    }
    if (kind == "evaluate") {
      const std::string policy = param<std::string>(params, "policy", "");
      const int n = param<int>(params, "n", pc.eval_episodes);
      auto ctl = make_controller(store_, engine_, policy, pc.horizon);
      EvalResult ev = evaluate(pc.env, *ctl, n, derive_seed(seed, 0xE7A1), policy);
      commands_.run([&] {
        ensure_not_owned();
        for (auto& ep : ev.episodes) store_.append_episode(ep);
      });
      return {{"policy", policy},
              {"episodes", n},
              {"success_rate", ev.success_rate},
              {"ground_rate", ev.ground_rate},
              {"mean_terminal_altitude", ev.mean_terminal_altitude},
              {"curve", ev.curve}};
    }
    if (kind == "pipeline") {
      Ownership own(*this, "pipeline");
      const PipelineReport r = run_pipeline(store_, pc, seed, progress);
      const Json j = r;
      save_report(report_name("pipeline", seed), j);
      if (!r.ok) throw Error(ErrorCode::precondition_failed, "pipeline failed in stage " + r.failed_stage + ": " + r.error);
      return j;
    }
    if (kind == "baseline") {
      const std::string which = param<std::string>(params, "kind", "");
      int budget = param<int>(params, "budget", -1);
      if (budget < 0) {
        const auto pr = report(report_name("pipeline", seed));
        if (!pr) throw Error(ErrorCode::precondition_failed, "no pipeline report for seed " + std::to_string(seed) +
                                                                 " to match the feedback budget against");
        budget = (*pr)["budget"]["comparisons"].get<int>();
      }
      Ownership own(*this, "baseline");
      const PipelineReport r = which == "drlhp" ? run_drlhp_baseline(store_, pc, seed, budget, progress)
                                                : run_dagger_baseline(store_, pc, seed, budget, progress);
      const Json j = r;
      save_report(report_name(which, seed), j);
      if (!r.ok) throw Error(ErrorCode::precondition_failed, which + " failed in stage " + r.failed_stage + ": " + r.error);
      return j;
    }
    throw Error(ErrorCode::invalid_argument, "unknown job kind " + kind);
  }

  ServiceConfig cfg_;
  Store store_;
  PrimitiveEngine engine_;
  EventHub events_;
  CommandQueue commands_;
  std::map<std::string, std::pair<std::string, Response>> replies_;  // only touched on the queue

  mutable std::mutex jobs_mu_;
  std::condition_variable jobs_cv_;
  std::condition_variable jobs_done_cv_;
  std::map<std::string, Job> jobs_;
  std::deque<std::string> queue_;
  bool stopping_ = false;
  std::vector<std::thread> workers_;

  mutable std::mutex owner_mu_;
  std::optional<std::string> owner_;
  mutable std::mutex reports_mu_;
  std::map<std::string, Json> reports_;
};

}  // namespace landerlab
