#pragma once

// Run-directory store: append-only episodes (JSON Lines), a hashed registry
// of named artifacts, demonstration sessions and job logs.
//
//   run_dir/episodes/<id>.jsonl
//   run_dir/registry.json
//   run_dir/sessions/<id>.json
//   run_dir/jobs/<id>.log
//
// An empty run_dir keeps everything in memory.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <sstream>
#include <string>
#include <vector>

#include "landerlab/serialization.hpp"

namespace landerlab {

// Behavior that chooses among primitives; what DAgger trains.
struct Selector {
  Params net;  // softmax over primitive_ids
  Normalizer normalizer;
  std::vector<std::string> primitive_ids;

  bool operator==(const Selector&) const = default;
};

inline void to_json(Json& j, const Selector& s) {
  j = {{"net", s.net}, {"normalizer", s.normalizer}, {"primitive_ids", s.primitive_ids}};
}
inline void from_json(const Json& j, Selector& s) {
  s.net = j.at("net").get<Params>();
  s.normalizer = j.at("normalizer").get<Normalizer>();
  s.primitive_ids = j.at("primitive_ids").get<std::vector<std::string>>();
  if (s.net.spec.output_size() != static_cast<int>(s.primitive_ids.size()))
    throw Error(ErrorCode::corrupt_data, "selector width does not match its primitives");
}

struct StoredRewardModel {
  RewardModel model;
  std::vector<ComparisonRef> comparisons;

  bool operator==(const StoredRewardModel&) const = default;
};

inline void to_json(Json& j, const StoredRewardModel& m) {
  j = {{"model", m.model}, {"comparisons", m.comparisons}};
}
inline void from_json(const Json& j, StoredRewardModel& m) {
  m.model = j.at("model").get<RewardModel>();
  m.comparisons = j.at("comparisons").get<std::vector<ComparisonRef>>();
}

// Flat policies that are not primitives: the final policy and baselines.
struct StoredPolicy {
  std::string kind;  // final | drlhp
  Policy policy;
  std::vector<std::string> provenance;

  bool operator==(const StoredPolicy&) const = default;
};

inline void to_json(Json& j, const StoredPolicy& p) {
  j = {{"kind", p.kind}, {"policy", p.policy}, {"provenance", p.provenance}};
}
inline void from_json(const Json& j, StoredPolicy& p) {
  p.kind = j.at("kind").get<std::string>();
  p.policy = j.at("policy").get<Policy>();
  p.provenance = j.at("provenance").get<std::vector<std::string>>();
}

struct Registry {
  static constexpr int kSchemaVersion = 1;

  std::map<std::string, LabelSet> label_sets;
  std::map<std::string, Discriminator> discriminators;
  std::map<std::string, StoredRewardModel> reward_models;
  std::map<std::string, Primitive> primitives;
  std::map<std::string, StoredPolicy> policies;
  std::map<std::string, Selector> selectors;

  bool operator==(const Registry&) const = default;
  bool empty() const {
    return label_sets.empty() && discriminators.empty() && reward_models.empty() && primitives.empty() &&
           policies.empty() && selectors.empty();
  }
};

namespace detail {

template <class Map>
Json hashed_section(const Map& m) {
  Json out = Json::object();
  for (const auto& [k, v] : m) {
    Json content = v;
    out[k] = {{"hash", content_hash(content)}, {"content", content}};
  }
  return out;
}

template <class T>
std::map<std::string, T> read_section(const Json& doc, const char* name) {
  std::map<std::string, T> out;
  if (!doc.contains(name)) return out;
  for (const auto& [k, entry] : doc.at(name).items()) {
    const Json& content = entry.at("content");
    if (content_hash(content) != entry.at("hash").template get<std::string>())
      throw Error(ErrorCode::corrupt_data, std::string("hash mismatch for ") + name + "/" + k);
    out.emplace(k, content.get<T>());
  }
  return out;
}

inline void write_file_atomic(const std::filesystem::path& path, const std::string& data) {
  std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw Error(ErrorCode::precondition_failed, "cannot write " + tmp);
    f << data;
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorCode::not_found, "cannot read " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace detail

inline std::string registry_to_string(const Registry& r) {
  Json doc = {{"schema_version", Registry::kSchemaVersion},
              {"label_sets", detail::hashed_section(r.label_sets)},
              {"discriminators", detail::hashed_section(r.discriminators)},
              {"reward_models", detail::hashed_section(r.reward_models)},
              {"primitives", detail::hashed_section(r.primitives)},
              {"policies", detail::hashed_section(r.policies)},
              {"selectors", detail::hashed_section(r.selectors)}};
  return doc.dump(1) + "\n";
}

inline Registry registry_from_string(const std::string& text) {
  Json doc;
  try {
    doc = Json::parse(text);
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::corrupt_data, std::string("registry is not valid JSON: ") + e.what());
  }
  if (doc.value("schema_version", 0) != Registry::kSchemaVersion)
    throw Error(ErrorCode::corrupt_data, "unsupported registry schema version");
  Registry r;
  try {
    r.label_sets = detail::read_section<LabelSet>(doc, "label_sets");
    r.discriminators = detail::read_section<Discriminator>(doc, "discriminators");
    r.reward_models = detail::read_section<StoredRewardModel>(doc, "reward_models");
    r.primitives = detail::read_section<Primitive>(doc, "primitives");
    r.policies = detail::read_section<StoredPolicy>(doc, "policies");
    r.selectors = detail::read_section<Selector>(doc, "selectors");
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::corrupt_data, std::string("malformed registry entry: ") + e.what());
  }
  return r;
}

// Empty path or missing file gives an empty registry.
inline Registry load_registry(const std::filesystem::path& path) {
  if (path.empty() || !std::filesystem::exists(path)) return {};
  return registry_from_string(detail::read_file(path));
}

struct EpisodeSummary {
  std::string id;
  Origin origin;
  int length = 0;
  TerminalKind terminal = TerminalKind::none;
  bool success = false;
};

struct EpisodeFilter {
  std::optional<OriginKind> origin{};
  std::optional<std::string> source{};
  std::optional<std::string> tag{};
  std::optional<bool> success{};
  std::optional<std::size_t> limit{};
};

struct LabelRef {
  std::string episode_id;
  int frame = 0;
  bool positive = true;
};

class Store {
 public:
  Store() = default;
  explicit Store(std::filesystem::path run_dir) : dir_(std::move(run_dir)) {
    if (dir_.empty()) return;
    for (const char* sub : {"episodes", "sessions", "jobs"}) std::filesystem::create_directories(dir_ / sub);
    load_from_disk();
  }

  const std::filesystem::path& run_dir() const { return dir_; }

  // ---- episodes ----

  // Assigns a sequential id when `e.id` is empty.
  std::string append_episode(EpisodeRecord e) {
    std::unique_lock lock(mu_);
    e.validate();
    if (e.id.empty()) {
      do e.id = next_id("ep", episode_counter_);
      while (episode_index_.count(e.id));
    }
    if (episode_index_.count(e.id)) throw Error(ErrorCode::conflict, "duplicate episode id " + e.id);
    if (!dir_.empty()) detail::write_file_atomic(dir_ / "episodes" / (e.id + ".jsonl"), episode_to_jsonl(e));
    episode_index_[e.id] = episodes_.size();
    episodes_.push_back(std::move(e));
    return episodes_.back().id;
  }

  EpisodeRecord episode(const std::string& id) const {
    std::shared_lock lock(mu_);
    return episodes_.at(index_of(id));
  }

  bool has_episode(const std::string& id) const {
    std::shared_lock lock(mu_);
    return episode_index_.count(id) > 0;
  }

  std::vector<EpisodeSummary> query_episodes(const EpisodeFilter& f = {}) const {
    std::shared_lock lock(mu_);
    std::vector<EpisodeSummary> out;
    for (const auto& e : episodes_) {
      if (f.limit && out.size() >= *f.limit) break;
      if (f.origin && e.origin.kind != *f.origin) continue;
      if (f.source && e.origin.source != *f.source) continue;
      if (f.tag && e.origin.tag != *f.tag) continue;
      if (f.success && e.success != *f.success) continue;
      out.push_back({e.id, e.origin, static_cast<int>(e.actions.size()), e.terminal, e.success});
    }
    return out;
  }

  std::vector<EpisodeRecord> episodes(const EpisodeFilter& f = {}) const {
    std::vector<EpisodeRecord> out;
    for (const auto& s : query_episodes(f)) out.push_back(episode(s.id));
    return out;
  }

  std::size_t episode_count() const {
    std::shared_lock lock(mu_);
    return episodes_.size();
  }

  // ---- labels ----

  LabelSet add_labels(const std::string& label_set, const std::vector<LabelRef>& refs) {
    std::unique_lock lock(mu_);
    if (label_set.empty()) throw Error(ErrorCode::invalid_argument, "label set name is empty");
    LabelSet ls;
    ls.name = label_set;
    if (const auto it = registry_.label_sets.find(label_set); it != registry_.label_sets.end()) ls = it->second;
    std::set<FrameRef> pos(ls.positive_refs.begin(), ls.positive_refs.end());
    std::set<FrameRef> neg(ls.negative_refs.begin(), ls.negative_refs.end());
    // validate the whole batch before applying any of it
    for (const auto& r : refs) {
      const auto it = episode_index_.find(r.episode_id);
      if (it == episode_index_.end()) throw Error(ErrorCode::not_found, "no episode " + r.episode_id);
      const auto& ep = episodes_[it->second];
      if (r.frame < 0 || r.frame >= static_cast<int>(ep.frames.size()))
        throw Error(ErrorCode::not_found, "episode " + r.episode_id + " has no frame " + std::to_string(r.frame));
      const FrameRef fr{r.episode_id, r.frame};
      if ((r.positive ? neg : pos).count(fr))
        throw Error(ErrorCode::conflict, "frame " + r.episode_id + ":" + std::to_string(r.frame) +
                                             " already labeled with the other polarity");
    }
    for (const auto& r : refs) {
      const FrameRef fr{r.episode_id, r.frame};
      auto& same = r.positive ? pos : neg;
      if (!same.insert(fr).second) continue;  // relabeling with the same polarity is a no-op
      const Observation& o = episodes_[episode_index_.at(r.episode_id)].frames[static_cast<std::size_t>(r.frame)];
      (r.positive ? ls.positive_refs : ls.negative_refs).push_back(fr);
      (r.positive ? ls.positives : ls.negatives).push_back(o);
    }
    registry_.label_sets[label_set] = ls;
    persist_registry();
    return ls;
  }

  // ---- registry ----

  Registry registry() const {
    std::shared_lock lock(mu_);
    return registry_;
  }

  // Read access without copying the whole registry.
  template <class Fn>
  auto with_registry(Fn&& fn) const {
    std::shared_lock lock(mu_);
    return fn(static_cast<const Registry&>(registry_));
  }

  // Applies `fn` to a copy of the registry, checks integrity and commits.
  template <class Fn>
  void update_registry(Fn&& fn) {
    std::unique_lock lock(mu_);
    Registry next = registry_;
    fn(next);
    check_integrity_locked(next);
    registry_ = std::move(next);
    persist_registry();
  }

  void put_discriminator(const std::string& name, const Discriminator& d) {
    update_registry([&](Registry& r) { r.discriminators[name] = d; });
  }
  void put_reward_model(const std::string& name, const StoredRewardModel& m) {
    update_registry([&](Registry& r) { r.reward_models[name] = m; });
  }
  void put_policy(const std::string& name, const StoredPolicy& p) {
    update_registry([&](Registry& r) { r.policies[name] = p; });
  }
  void put_selector(const std::string& name, const Selector& s) {
    update_registry([&](Registry& r) { r.selectors[name] = s; });
  }
  void put_label_set(const LabelSet& ls) {
    update_registry([&](Registry& r) { r.label_sets[ls.name] = ls; });
  }

  std::string registry_text() const {
    std::shared_lock lock(mu_);
    return registry_to_string(registry_);
  }

  // ---- sessions ----

  void save_session(const DemoSession& s) {
    std::unique_lock lock(mu_);
    sessions_[s.id] = s;
    if (!dir_.empty()) detail::write_file_atomic(dir_ / "sessions" / (s.id + ".json"), session_text(s));
  }

  std::optional<DemoSession> session(const std::string& id) const {
    std::shared_lock lock(mu_);
    const auto it = sessions_.find(id);
    if (it == sessions_.end()) return std::nullopt;
    return it->second;
  }

  std::vector<DemoSession> sessions() const {
    std::shared_lock lock(mu_);
    std::vector<DemoSession> out;
    for (const auto& [k, v] : sessions_) out.push_back(v);
    return out;
  }

  std::string new_session_id() {
    std::unique_lock lock(mu_);
    std::string id;
    do id = next_id("session", session_counter_);
    while (sessions_.count(id));
    return id;
  }

  static std::string session_text(const DemoSession& s) { return Json(s).dump(1) + "\n"; }

  // ---- job logs ----

  void append_job_log(const std::string& job_id, const Json& line) {
    if (dir_.empty()) return;
    std::unique_lock lock(mu_);
    std::ofstream f(dir_ / "jobs" / (job_id + ".log"), std::ios::app);
    f << line.dump() << "\n";
  }

 private:
  static std::string next_id(const char* prefix, std::size_t& counter) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s-%06zu", prefix, ++counter);
    return buf;
  }

  std::size_t index_of(const std::string& id) const {
    const auto it = episode_index_.find(id);
    if (it == episode_index_.end()) throw Error(ErrorCode::not_found, "no episode " + id);
    return it->second;
  }

  void check_integrity_locked(const Registry& r) const {
    for (const auto& [name, ls] : r.label_sets) {
      if (ls.positive_refs.size() != ls.positives.size() || ls.negative_refs.size() != ls.negatives.size())
        throw Error(ErrorCode::invalid_argument, "label set " + name + " has unreferenced labels");
      std::set<FrameRef> pos(ls.positive_refs.begin(), ls.positive_refs.end());
      for (const auto& ref : ls.negative_refs)
        if (pos.count(ref)) throw Error(ErrorCode::conflict, "label set " + name + " has a polarity conflict");
      for (const auto* refs : {&ls.positive_refs, &ls.negative_refs})
        for (const auto& ref : *refs) {
          const auto it = episode_index_.find(ref.episode_id);
          if (it == episode_index_.end() || ref.frame < 0 ||
              ref.frame >= static_cast<int>(episodes_[it->second].frames.size()))
            throw Error(ErrorCode::not_found, "label set " + name + " references missing frame " + ref.episode_id +
                                                  ":" + std::to_string(ref.frame));
        }
    }
    for (const auto& [name, d] : r.discriminators)
      if (!r.label_sets.count(d.label_set))
        throw Error(ErrorCode::not_found, "discriminator " + name + " references missing label set " + d.label_set);
    for (const auto& [name, m] : r.reward_models)
      for (const auto& c : m.comparisons) check_comparison_locked(name, c);
    for (const auto& [id, p] : r.primitives) {
      if (p.horizon < 1) throw Error(ErrorCode::invalid_argument, "primitive " + id + " has horizon < 1");
      if (p.kind != PrimitiveKind::random && !p.policy)
        throw Error(ErrorCode::invalid_argument, "primitive " + id + " has no policy");
      if (p.kind == PrimitiveKind::goal_policy &&
          (p.provenance.empty() || !r.discriminators.count(p.provenance.front())))
        throw Error(ErrorCode::not_found, "goal primitive " + id + " references no existing discriminator");
      if (p.kind == PrimitiveKind::demo_policy) {
        if (p.provenance.empty()) throw Error(ErrorCode::not_found, "demo primitive " + id + " has no sessions");
        for (const auto& s : p.provenance)
          if (!sessions_.count(s)) throw Error(ErrorCode::not_found, "demo primitive " + id + " references missing session " + s);
      }
    }
    for (const auto& [name, sel] : r.selectors)
      for (const auto& pid : sel.primitive_ids)
        if (!r.primitives.count(pid) && pid != "random")
          throw Error(ErrorCode::not_found, "selector " + name + " references missing primitive " + pid);
  }

  void check_comparison_locked(const std::string& owner, const ComparisonRef& c) const {
    const auto it = sessions_.find(c.session_id);
    if (it == sessions_.end())
      throw Error(ErrorCode::not_found, "reward model " + owner + " references missing session " + c.session_id);
    const auto& steps = it->second.steps;
    if (c.step < 0 || c.step >= static_cast<int>(steps.size()))
      throw Error(ErrorCode::not_found, "reward model " + owner + " references missing step");
    const auto n = static_cast<int>(steps[static_cast<std::size_t>(c.step)].branches.size());
    if (c.preferred < 0 || c.preferred >= n || c.rejected < 0 || c.rejected >= n)
      throw Error(ErrorCode::not_found, "reward model " + owner + " references missing branch");
  }

  void persist_registry() {
    if (!dir_.empty()) detail::write_file_atomic(dir_ / "registry.json", registry_to_string(registry_));
  }

  void load_from_disk() {
    std::vector<std::filesystem::path> files;
    for (const auto& f : std::filesystem::directory_iterator(dir_ / "episodes"))
      if (f.path().extension() == ".jsonl") files.push_back(f.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      EpisodeRecord e = episode_from_jsonl(detail::read_file(f));
      episode_index_[e.id] = episodes_.size();
      episodes_.push_back(std::move(e));
    }
    episode_counter_ = episodes_.size();
    for (const auto& f : std::filesystem::directory_iterator(dir_ / "sessions")) {
      if (f.path().extension() != ".json") continue;
      DemoSession s = Json::parse(detail::read_file(f.path())).get<DemoSession>();
      sessions_[s.id] = std::move(s);
    }
    session_counter_ = sessions_.size();
    registry_ = load_registry(dir_ / "registry.json");
    check_integrity_locked(registry_);
  }

  std::filesystem::path dir_;
  mutable std::shared_mutex mu_;
  std::vector<EpisodeRecord> episodes_;
  std::map<std::string, std::size_t> episode_index_;
  std::map<std::string, DemoSession> sessions_;
  Registry registry_;
  std::size_t episode_counter_ = 0;
  std::size_t session_counter_ = 0;
};

}  // namespace landerlab
