#pragma once

// Primitives as temporally extended actions: one fixed-horizon branch per
// active primitive from the current snapshot, a choice, and the next state.

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "landerlab/oracle.hpp"
#include "landerlab/session_store.hpp"

namespace landerlab {

using Clock = std::function<std::int64_t()>;

// Monotone counter; makes session records independent of wall time.
inline Clock logical_clock() {
  auto t = std::make_shared<std::int64_t>(0);
  return [t] { return (*t)++; };
}

inline Clock wall_clock() {
  return [] { return now_ms(); };
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t branch_seed(std::uint64_t session_seed, std::size_t step, const std::string& primitive_id) {
  return derive_seed(session_seed, static_cast<std::uint64_t>(step), fnv1a(primitive_id));
}

struct EngineConfig {
  EnvConfig env;
  int max_active_sessions = 1;
};

class PrimitiveEngine {
 public:
  PrimitiveEngine(Store& store, EngineConfig cfg = {}, Clock clock = logical_clock())
      : store_(store), cfg_(std::move(cfg)), clock_(std::move(clock)) {}

  const EngineConfig& config() const { return cfg_; }

  // The built-in random primitive is always available and never persisted.
  static Primitive builtin_random() { return random_primitive(15, "random"); }

  std::string register_primitive(const Primitive& p) {
    if (p.id.empty()) throw Error(ErrorCode::invalid_argument, "primitive id is empty");
    if (p.id == "random") throw Error(ErrorCode::conflict, "primitive id 'random' is reserved");
    store_.update_registry([&](Registry& r) {
      if (r.primitives.count(p.id)) throw Error(ErrorCode::conflict, "duplicate primitive id " + p.id);
      r.primitives[p.id] = p;
    });
    return p.id;
  }

  Primitive primitive(const std::string& id) const {
    if (id == "random") return builtin_random();
    return store_.with_registry([&](const Registry& r) {
      const auto it = r.primitives.find(id);
      if (it == r.primitives.end()) throw Error(ErrorCode::not_found, "unknown primitive " + id);
      return it->second;
    });
  }

  DemoSession start_session(const std::string& task_tag, const std::vector<std::string>& primitive_ids,
                            std::uint64_t seed) {
    if (primitive_ids.empty()) throw Error(ErrorCode::invalid_argument, "a session needs at least one primitive");
    for (const auto& id : primitive_ids) primitive(id);
    int active = 0;
    for (const auto& s : store_.sessions()) active += s.status == SessionStatus::active ? 1 : 0;
    if (active >= cfg_.max_active_sessions)
      throw Error(ErrorCode::conflict, "another demonstration session is already active");
    DemoSession s;
    s.id = store_.new_session_id();
    s.task_tag = task_tag;
    s.primitive_ids = primitive_ids;
    s.seed = seed;
    LanderEnv env(cfg_.env);
    env.reset(seed);
    s.steps.push_back(make_step(s, env.snapshot(), 0));
    store_.save_session(s);
    return s;
  }

  DemoSession session(const std::string& id) const {
    auto s = store_.session(id);
    if (!s) throw Error(ErrorCode::not_found, "unknown session " + id);
    return *s;
  }

  // Branches of the current step; computed once when the step is created.
  std::vector<Rollout> propose_branches(const std::string& session_id) const {
    const DemoSession s = session(session_id);
    if (s.status != SessionStatus::active) throw Error(ErrorCode::usage_error, "session " + session_id + " has ended");
    return s.steps.back().branches;
  }

  // Recomputes a branch from its step snapshot without touching the session.
  Rollout replay_branch(const DemoSession& s, std::size_t step, std::size_t branch) const {
    const auto& st = s.steps.at(step);
    const std::string& pid = s.primitive_ids.at(branch);
    return simulate_rollout(cfg_.env, st.state, primitive(pid), branch_seed(s.seed, step, pid));
  }

  DemoSession apply_choice(const std::string& session_id, int branch_index) {
    DemoSession s = session(session_id);
    if (s.status != SessionStatus::active) throw Error(ErrorCode::usage_error, "session " + session_id + " has ended");
    DemoStep& cur = s.steps.back();
    if (cur.chosen) throw Error(ErrorCode::conflict, "step already chosen");
    if (branch_index < 0 || branch_index >= static_cast<int>(cur.branches.size()))
      throw Error(ErrorCode::invalid_argument, "branch index " + std::to_string(branch_index) + " out of range");
    cur.chosen = branch_index;
    const Rollout& picked = cur.branches[static_cast<std::size_t>(branch_index)];
    if (picked.final_state.terminal != TerminalKind::none) {
      seal(s);
    } else {
      const LanderState next = picked.final_state;
      s.steps.push_back(make_step(s, next, s.steps.size()));
      store_.save_session(s);
    }
    return s;
  }

  std::string end_session(const std::string& session_id) {
    DemoSession s = session(session_id);
    if (s.status != SessionStatus::active) throw Error(ErrorCode::usage_error, "session " + session_id + " already ended");
    if (s.chosen_steps() == 0) throw Error(ErrorCode::precondition_failed, "cannot end a session with no chosen steps");
    seal(s);
    return s.episode_id;
  }

  std::vector<std::string> run_free_episodes(const std::string& primitive_id, int n, std::uint64_t seed,
                                             const std::string& tag = "") {
    const Primitive p = primitive(primitive_id);
    PrimitiveController ctl(p);
    std::vector<std::string> ids;
    for (int i = 0; i < n; ++i) {
      EpisodeRecord ep = run_episode(cfg_.env, ctl, derive_seed(seed, 0xF4EEULL, static_cast<std::uint64_t>(i)));
      ep.origin = {primitive_id == "random" ? OriginKind::random : OriginKind::free_run, primitive_id, tag};
      ids.push_back(store_.append_episode(std::move(ep)));
    }
    return ids;
  }

 private:
  DemoStep make_step(const DemoSession& s, const LanderState& state, std::size_t index) const {
    DemoStep st;
    st.state = state;
    st.timestamp = clock_();
    for (const auto& pid : s.primitive_ids)
      st.branches.push_back(simulate_rollout(cfg_.env, state, primitive(pid), branch_seed(s.seed, index, pid)));
    return st;
  }

  // Stores the concatenated chosen rollouts as one episode and ends the session.
  void seal(DemoSession& s) {
    if (!s.steps.empty() && !s.steps.back().chosen) s.steps.pop_back();
    EpisodeRecord ep;
    ep.origin = {OriginKind::demo, s.id, s.task_tag};
    ep.seed = s.seed;
    ep.frames.push_back(observe(s.steps.front().state));
    for (const auto& st : s.steps) {
      const Rollout& r = st.branches[static_cast<std::size_t>(*st.chosen)];
      for (const auto& step : r.steps) {
        ep.actions.push_back(step.action);
        ep.frames.push_back(step.observation);
      }
      ep.terminal = r.final_state.terminal;
      ep.success = r.final_state.success;
    }
    s.episode_id = store_.append_episode(std::move(ep));
    s.status = SessionStatus::ended;
    store_.save_session(s);
  }

  Store& store_;
  EngineConfig cfg_;
  Clock clock_;
};

}  // namespace landerlab
