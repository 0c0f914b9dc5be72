#pragma once

// Value types shared by the store, the primitive engine and the trainers:
// stored episodes, primitives, rollouts and demonstration sessions.

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "landerlab/lander_env.hpp"
#include "landerlab/ppo_trainer.hpp"

namespace landerlab {

enum class OriginKind { random, free_run, demo, eval };

inline std::string_view to_string(OriginKind k) {
  switch (k) {
    case OriginKind::random: return "random";
    case OriginKind::free_run: return "free_run";
    case OriginKind::demo: return "demo";
    case OriginKind::eval: return "eval";
  }
  return "random";
}

inline OriginKind origin_from_string(std::string_view s) {
  if (s == "random") return OriginKind::random;
  if (s == "free_run") return OriginKind::free_run;
  if (s == "demo") return OriginKind::demo;
  if (s == "eval") return OriginKind::eval;
  throw Error(ErrorCode::corrupt_data, "unknown episode origin: " + std::string(s));
}

struct Origin {
  OriginKind kind = OriginKind::random;
  // primitive id for free runs, session id for demos, policy id for evals
  std::string source;
  std::string tag;

  bool operator==(const Origin&) const = default;
};

// frames[i] is the observation after actions[i-1]; frames[0] is the reset
// observation, so frames.size() == actions.size() + 1.
struct EpisodeRecord {
  std::string id;
  Origin origin;
  std::vector<Observation> frames;
  std::vector<int> actions;
  TerminalKind terminal = TerminalKind::none;
  bool success = false;
  std::uint64_t seed = 0;

  bool operator==(const EpisodeRecord&) const = default;

  void validate() const {
    if (frames.size() != actions.size() + 1)
      throw Error(ErrorCode::invalid_argument, "episode frames/actions length mismatch");
    for (const auto& f : frames)
      if (!all_finite(f)) throw Error(ErrorCode::invalid_argument, "episode has non-finite frame");
    for (int a : actions)
      if (a < 0 || a >= kNumActions) throw Error(ErrorCode::invalid_argument, "episode action out of range");
    if (success && terminal != TerminalKind::landed)
      throw Error(ErrorCode::invalid_argument, "episode success without landing");
  }
};

enum class PrimitiveKind { random, goal_policy, demo_policy };

inline std::string_view to_string(PrimitiveKind k) {
  switch (k) {
    case PrimitiveKind::random: return "random";
    case PrimitiveKind::goal_policy: return "goal_policy";
    case PrimitiveKind::demo_policy: return "demo_policy";
  }
  return "random";
}

inline PrimitiveKind primitive_kind_from_string(std::string_view s) {
  if (s == "random") return PrimitiveKind::random;
  if (s == "goal_policy") return PrimitiveKind::goal_policy;
  if (s == "demo_policy") return PrimitiveKind::demo_policy;
  throw Error(ErrorCode::corrupt_data, "unknown primitive kind: " + std::string(s));
}

struct Primitive {
  std::string id;
  std::string display_name;
  PrimitiveKind kind = PrimitiveKind::random;
  std::optional<Policy> policy;
  int horizon = 15;
  // discriminator name for goal policies, session ids for demo policies
  std::vector<std::string> provenance;

  bool operator==(const Primitive&) const = default;

  template <class Engine>
  int act(const Observation& o, Engine& rng) const {
    if (kind == PrimitiveKind::random || !policy)
      return static_cast<int>(unit_uniform(rng) * kNumActions);
    return sample_action(action_probabilities(*policy, o), rng);
  }
};

inline Primitive random_primitive(int horizon = 15, std::string id = "random") {
  Primitive p;
  p.id = std::move(id);
  p.display_name = "random";
  p.kind = PrimitiveKind::random;
  p.horizon = horizon;
  return p;
}

struct RolloutStep {
  Observation observation{};
  int action = 0;
  bool terminal = false;

  bool operator==(const RolloutStep&) const = default;
};

struct Rollout {
  LanderState start;
  std::string primitive_id;
  std::vector<RolloutStep> steps;
  LanderState final_state;
  std::uint64_t branch_seed = 0;

  bool operator==(const Rollout&) const = default;

  TerminalKind terminal() const { return final_state.terminal; }
  const Observation& final_observation() const { return steps.back().observation; }
};

// Runs `prim` for up to its horizon from `start` with a dedicated rng
// seeded by `branch_seed`; stops early on a terminal state.
inline Rollout simulate_rollout(const EnvConfig& env_cfg, const LanderState& start, const Primitive& prim,
                                std::uint64_t branch_seed) {
  LanderEnv env(env_cfg);
  env.restore(start);
  Rollout r;
  r.start = start;
  r.primitive_id = prim.id;
  r.branch_seed = branch_seed;
  SplitMix64 rng{mix64(branch_seed)};
  Observation o = env.observation();
  for (int t = 0; t < prim.horizon && !env.terminal(); ++t) {
    const int a = prim.act(o, rng);
    const StepOutcome out = env.step(a);
    r.steps.push_back({out.observation, a, out.done()});
    o = out.observation;
  }
  r.final_state = env.snapshot();
  return r;
}

enum class SessionStatus { active, ended };

struct DemoStep {
  LanderState state;
  std::vector<Rollout> branches;
  std::optional<int> chosen;
  std::int64_t timestamp = 0;

  bool operator==(const DemoStep&) const = default;
};

struct DemoSession {
  std::string id;
  std::string task_tag;
  std::vector<std::string> primitive_ids;
  std::uint64_t seed = 0;
  std::vector<DemoStep> steps;
  SessionStatus status = SessionStatus::active;
  std::string episode_id;

  bool operator==(const DemoSession&) const = default;

  std::size_t chosen_steps() const {
    std::size_t n = 0;
    for (const auto& s : steps) n += s.chosen ? 1 : 0;
    return n;
  }
};

}  // namespace landerlab
