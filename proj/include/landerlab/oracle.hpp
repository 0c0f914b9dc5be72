#pragma once

// Scripted stand-in for the human designer: frame labeling by predicate,
// branch choice by a greedy score, and the success-rate evaluator.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "landerlab/goal_discriminator.hpp"
#include "landerlab/records.hpp"

namespace landerlab {

struct OraclePredicates {
  double stabilize_theta = 0.15;
  double stabilize_omega = 0.25;
  // "low velocity" is judged against altitude: the allowed speed shrinks
  // linearly towards the ground and is capped at stabilize_speed
  double stabilize_speed = 0.5;
  double stabilize_speed_floor = 0.05;
  double stabilize_speed_slope = 0.4;
  // a stable descent sinks at no less than this fraction of the speed limit
  double stabilize_descent_fraction = 0.3;
  double drift_vx = 0.1;

  double speed_limit(const Observation& o) const {
    return std::min(stabilize_speed, stabilize_speed_floor + stabilize_speed_slope * std::max(0.0, o[obs::y]));
  }
  bool stabilize(const Observation& o) const {
    return std::abs(o[obs::theta]) <= stabilize_theta && std::abs(o[obs::omega]) <= stabilize_omega &&
           speed_of(o) <= speed_limit(o) && o[obs::vy] <= -stabilize_descent_fraction * speed_limit(o);
  }
  bool drift_left(const Observation& o) const { return stabilize(o) && o[obs::vx] < -drift_vx; }
  bool drift_right(const Observation& o) const { return stabilize(o) && o[obs::vx] > drift_vx; }
  static bool engines_off(const Observation& o) {
    return o[obs::main_on] == 0.0 && o[obs::side_on] == 0.0;
  }

  std::function<bool(const Observation&)> by_name(const std::string& name) const {
    if (name == "stabilize") return [this](const Observation& o) { return stabilize(o); };
    if (name == "drift_left") return [this](const Observation& o) { return drift_left(o); };
    if (name == "drift_right") return [this](const Observation& o) { return drift_right(o); };
    if (name == "engines_off" || name == "drop") return [](const Observation& o) { return engines_off(o); };
    throw Error(ErrorCode::invalid_argument, "unknown oracle predicate: " + name);
  }
};

// Lower is better. Evaluated on the final observation of a branch.
struct OracleScore {
  // horizontal distance to the pad center, measured where the lander will
  // be lead_time seconds later at its current drift
  double pad_distance = 2.0;
  double lead_time = 2.0;
  double altitude = 4.0;
  // speed only counts above a safe value that grows with altitude
  double speed = 4.0;
  double safe_speed = 0.05;
  double safe_speed_slope = 0.3;
  double angle = 1.0;
  double drop_bonus = 10.0;
  double drop_altitude = 0.15;
  // a preview that ends in a successful landing
  double landing_bonus = 0.0;
  // A human watching the preview would never pick a crash.
  double crash_penalty = 100.0;
  double pad_half_width = 0.2;

  double operator()(const Observation& o, TerminalKind terminal, bool is_drop, bool success = false) const {
    const double safe = safe_speed + safe_speed_slope * o[obs::y];
    double s = pad_distance * std::abs(o[obs::x] + lead_time * o[obs::vx]) + altitude * o[obs::y] +
               speed * std::max(0.0, speed_of(o) - safe) + angle * std::abs(o[obs::theta]);
    const bool failed = terminal == TerminalKind::crashed || terminal == TerminalKind::out_of_bounds;
    if (failed) s += crash_penalty;
    if (success) s -= landing_bonus;
    if (is_drop && !failed && o[obs::y] < drop_altitude && std::abs(o[obs::x]) <= pad_half_width)
      s -= drop_bonus;
    return s;
  }
};

struct OracleContext {
  std::string drop_primitive_id = "drop";
  OracleScore score;
};

inline double branch_score(const Rollout& r, const OracleContext& ctx) {
  const Observation o = r.steps.empty() ? observe(r.start) : r.final_observation();
  return ctx.score(o, r.terminal(), r.primitive_id == ctx.drop_primitive_id, r.final_state.success);
}

inline int oracle_choose(const std::vector<Rollout>& branches, const OracleContext& ctx = {}) {
  if (branches.empty()) throw Error(ErrorCode::invalid_argument, "oracle_choose needs at least one branch");
  int best = 0;
  double best_score = branch_score(branches[0], ctx);
  for (std::size_t i = 1; i < branches.size(); ++i) {
    const double s = branch_score(branches[i], ctx);
    if (s < best_score) {
      best_score = s;
      best = static_cast<int>(i);
    }
  }
  return best;
}

// Samples n_pos predicate-true and n_neg predicate-false frames uniformly
// without replacement from the pool.
inline LabelSet oracle_label(const std::string& name, const std::function<bool(const Observation&)>& predicate,
                             const std::vector<EpisodeRecord>& pool, int n_pos, int n_neg, std::uint64_t seed) {
  if (n_pos <= 0 || n_neg <= 0)
    throw Error(ErrorCode::invalid_argument, "oracle_label needs positive label counts");
  std::vector<FrameRef> pos, neg;
  for (const auto& ep : pool)
    for (std::size_t f = 0; f < ep.frames.size(); ++f)
      (predicate(ep.frames[f]) ? pos : neg).push_back({ep.id, static_cast<int>(f)});
  if (static_cast<int>(pos.size()) < n_pos)
    throw Error(ErrorCode::precondition_failed,
                "insufficient positive frames for '" + name + "': have " + std::to_string(pos.size()) +
                    ", need " + std::to_string(n_pos));
  if (static_cast<int>(neg.size()) < n_neg)
    throw Error(ErrorCode::precondition_failed,
                "insufficient negative frames for '" + name + "': have " + std::to_string(neg.size()));
  std::mt19937_64 rng(mix64(seed));
  std::shuffle(pos.begin(), pos.end(), rng);
  std::shuffle(neg.begin(), neg.end(), rng);
  pos.resize(static_cast<std::size_t>(n_pos));
  neg.resize(static_cast<std::size_t>(n_neg));
  std::sort(pos.begin(), pos.end());
  std::sort(neg.begin(), neg.end());

  LabelSet ls;
  ls.name = name;
  const auto lookup = [&](const FrameRef& r) -> const Observation& {
    for (const auto& ep : pool)
      if (ep.id == r.episode_id) return ep.frames[static_cast<std::size_t>(r.frame)];
    throw Error(ErrorCode::not_found, "episode " + r.episode_id);
  };
  for (const auto& r : pos) ls.positives.push_back(lookup(r));
  for (const auto& r : neg) ls.negatives.push_back(lookup(r));
  ls.positive_refs = std::move(pos);
  ls.negative_refs = std::move(neg);
  return ls;
}

// Anything that can drive the lander for a whole episode.
class Controller {
 public:
  virtual ~Controller() = default;
  virtual void begin_episode(std::uint64_t seed) = 0;
  virtual int act(const Observation& o) = 0;
};

class PolicyController : public Controller {
 public:
  explicit PolicyController(Policy p) : policy_(std::move(p)) {}
  void begin_episode(std::uint64_t seed) override { rng_ = SplitMix64{mix64(seed)}; }
  int act(const Observation& o) override { return sample_action(action_probabilities(policy_, o), rng_); }

 private:
  Policy policy_;
  SplitMix64 rng_{};
};

class PrimitiveController : public Controller {
 public:
  explicit PrimitiveController(Primitive p) : prim_(std::move(p)) {}
  void begin_episode(std::uint64_t seed) override { rng_ = SplitMix64{mix64(seed)}; }
  int act(const Observation& o) override { return prim_.act(o, rng_); }

 private:
  Primitive prim_;
  SplitMix64 rng_{};
};

class ConstantController : public Controller {
 public:
  explicit ConstantController(int action) : action_(action) {}
  void begin_episode(std::uint64_t) override {}
  int act(const Observation&) override { return action_; }

 private:
  int action_;
};

inline EpisodeRecord run_episode(const EnvConfig& env_cfg, Controller& ctl, std::uint64_t seed) {
  LanderEnv env(env_cfg);
  EpisodeRecord ep;
  ep.seed = seed;
  ep.frames.push_back(env.reset(seed));
  ctl.begin_episode(derive_seed(seed, 0xAC7ULL));
  while (!env.terminal()) {
    const int a = ctl.act(ep.frames.back());
    const StepOutcome out = env.step(a);
    ep.actions.push_back(a);
    ep.frames.push_back(out.observation);
    ep.terminal = out.terminal;
    ep.success = out.success;
  }
  return ep;
}

struct EvalResult {
  double success_rate = 0;
  double ground_rate = 0;  // landed or crashed
  double mean_terminal_altitude = 0;
  std::vector<EpisodeRecord> episodes;
  std::vector<double> curve;  // moving window of ten episodes
};

inline std::vector<double> window_curve(const std::vector<bool>& success, int window = 10) {
  std::vector<double> out;
  int count = 0;
  for (std::size_t i = 0; i < success.size(); ++i) {
    count += success[i] ? 1 : 0;
    if (i >= static_cast<std::size_t>(window)) count -= success[i - static_cast<std::size_t>(window)] ? 1 : 0;
    if (i + 1 >= static_cast<std::size_t>(window)) out.push_back(count / static_cast<double>(window));
  }
  return out;
}

inline EvalResult evaluate(const EnvConfig& env_cfg, Controller& ctl, int n_episodes, std::uint64_t seed,
                           const std::string& policy_id = "") {
  if (n_episodes < 10) throw Error(ErrorCode::invalid_argument, "evaluation needs at least 10 episodes");
  EvalResult r;
  std::vector<bool> flags;
  int ground = 0;
  double alt = 0;
  for (int i = 0; i < n_episodes; ++i) {
    EpisodeRecord ep = run_episode(env_cfg, ctl, derive_seed(seed, 0xE7A1ULL, static_cast<std::uint64_t>(i)));
    ep.origin = {OriginKind::eval, policy_id, "eval"};
    flags.push_back(ep.success);
    ground += (ep.terminal == TerminalKind::landed || ep.terminal == TerminalKind::crashed) ? 1 : 0;
    alt += ep.frames.back()[obs::y];
    r.episodes.push_back(std::move(ep));
  }
  const double n = static_cast<double>(n_episodes);
  r.success_rate = static_cast<double>(std::count(flags.begin(), flags.end(), true)) / n;
  r.ground_rate = ground / n;
  r.mean_terminal_altitude = alt / n;
  r.curve = window_curve(flags);
  return r;
}

}  // namespace landerlab
