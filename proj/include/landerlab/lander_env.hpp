#pragma once

// Deterministic, snapshot-clonable 2D lunar lander with four discrete
// actions. Units: x is normalized so the landing pad spans |x| <= 0.2 and
// the ground is y = 0; y is the altitude of the midpoint between the two
// leg tips.

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <string_view>

#include "landerlab/common.hpp"

namespace landerlab {

enum class Action : int { noop = 0, left_engine = 1, main_engine = 2, right_engine = 3 };

enum class TerminalKind { none, landed, crashed, out_of_bounds, timeout };

inline std::string_view to_string(TerminalKind k) {
  switch (k) {
    case TerminalKind::none: return "none";
    case TerminalKind::landed: return "landed";
    case TerminalKind::crashed: return "crashed";
    case TerminalKind::out_of_bounds: return "out_of_bounds";
    case TerminalKind::timeout: return "timeout";
  }
  return "none";
}

inline TerminalKind terminal_from_string(std::string_view s) {
  if (s == "none") return TerminalKind::none;
  if (s == "landed") return TerminalKind::landed;
  if (s == "crashed") return TerminalKind::crashed;
  if (s == "out_of_bounds") return TerminalKind::out_of_bounds;
  if (s == "timeout") return TerminalKind::timeout;
  throw Error(ErrorCode::corrupt_data, "unknown terminal kind: " + std::string(s));
}

inline int mirror_action(int a) {
  if (a == 1) return 3;
  if (a == 3) return 1;
  return a;
}

// Compact 64-bit state generator so that snapshots stay small values.
struct SplitMix64 {
  using result_type = std::uint64_t;
  std::uint64_t state = 0;
  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }
  result_type operator()() {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }
};

struct EnvConfig {
  double dt = 0.02;
  double gravity = 1.0;
  double main_accel = 2.0;
  double side_angular_accel = 4.0;
  double side_lateral_accel = 0.2;
  double drag = 0.02;
  // Multiplicative engine-strength noise, uniform in [1 - n, 1 + n].
  double thrust_noise = 0.05;

  double leg_half_span = 0.08;
  double contact_tolerance = 0.07;

  int max_steps = 1000;
  double crash_speed = 0.3;
  double crash_angle = 0.4;
  double bound_x = 1.5;
  double bound_y = 2.0;

  double pad_half_width = 0.2;
  double success_speed = 0.1;
  double success_angle = 0.2;

  double init_y = 1.3;
  double init_x = 0.4;
  double init_vx = 0.5;
  double init_vy_min = -0.5;
  double init_theta = 0.3;
  double init_omega = 0.2;
};

struct LanderState {
  double x = 0, y = 0, vx = 0, vy = 0, theta = 0, omega = 0;
  int left_contact = 0, right_contact = 0;
  int last_action = 0;
  int step_count = 0;
  std::uint64_t rng_state = 0;
  TerminalKind terminal = TerminalKind::none;
  bool success = false;

  friend bool operator==(const LanderState&, const LanderState&) = default;
};

struct StepOutcome {
  Observation observation{};
  TerminalKind terminal = TerminalKind::none;
  bool success = false;

  bool done() const { return terminal != TerminalKind::none; }
};

inline Observation observe(const LanderState& s) {
  return {s.x,
          s.y,
          s.vx,
          s.vy,
          s.theta,
          s.omega,
          static_cast<double>(s.left_contact),
          static_cast<double>(s.right_contact),
          s.last_action == 2 ? 1.0 : 0.0,
          (s.last_action == 1 || s.last_action == 3) ? 1.0 : 0.0};
}

inline LanderState mirror(const LanderState& s) {
  LanderState m = s;
  m.x = -s.x;
  m.vx = -s.vx;
  m.theta = -s.theta;
  m.omega = -s.omega;
  m.left_contact = s.right_contact;
  m.right_contact = s.left_contact;
  m.last_action = mirror_action(s.last_action);
  return m;
}

inline Observation mirror(const Observation& o) {
  Observation m = o;
  m[obs::x] = -o[obs::x];
  m[obs::vx] = -o[obs::vx];
  m[obs::theta] = -o[obs::theta];
  m[obs::omega] = -o[obs::omega];
  m[obs::left_contact] = o[obs::right_contact];
  m[obs::right_contact] = o[obs::left_contact];
  return m;
}

class LanderEnv {
 public:
  explicit LanderEnv(EnvConfig cfg = {}) : cfg_(cfg) {}

  const EnvConfig& config() const { return cfg_; }

  Observation reset(std::uint64_t seed) {
    SplitMix64 rng{mix64(seed)};
    LanderState s;
    s.y = cfg_.init_y;
    s.x = uniform(rng, -cfg_.init_x, cfg_.init_x);
    s.vx = uniform(rng, -cfg_.init_vx, cfg_.init_vx);
    s.vy = uniform(rng, cfg_.init_vy_min, 0.0);
    s.theta = uniform(rng, -cfg_.init_theta, cfg_.init_theta);
    s.omega = uniform(rng, -cfg_.init_omega, cfg_.init_omega);
    s.rng_state = rng.state;
    state_ = s;
    update_contacts();
    return observe(state_);
  }

  StepOutcome step(int action) {
    if (state_.terminal != TerminalKind::none)
      throw Error(ErrorCode::usage_error, "step() called on a terminal episode");
    if (action < 0 || action >= kNumActions)
      throw Error(ErrorCode::invalid_argument, "action out of range: " + std::to_string(action));

    LanderState& s = state_;
    SplitMix64 rng{s.rng_state};
    const double strength = 1.0 + cfg_.thrust_noise * (2.0 * unit_uniform(rng) - 1.0);
    s.rng_state = rng.state;

    double ax = -cfg_.drag * s.vx;
    double ay = -cfg_.gravity - cfg_.drag * s.vy;
    double alpha = 0.0;
    switch (action) {
      case 1:
        alpha += cfg_.side_angular_accel * strength;
        ax -= cfg_.side_lateral_accel * strength;
        break;
      case 2:
        ax -= cfg_.main_accel * strength * std::sin(s.theta);
        ay += cfg_.main_accel * strength * std::cos(s.theta);
        break;
      case 3:
        alpha -= cfg_.side_angular_accel * strength;
        ax += cfg_.side_lateral_accel * strength;
        break;
      default:
        break;
    }

    // semi-implicit Euler: velocities first, positions from new velocities
    s.vx += ax * cfg_.dt;
    s.vy += ay * cfg_.dt;
    s.omega += alpha * cfg_.dt;
    s.x += s.vx * cfg_.dt;
    s.y += s.vy * cfg_.dt;
    s.theta += s.omega * cfg_.dt;
    s.last_action = action;
    s.step_count += 1;

    const double lowest = std::min(left_leg_altitude(), right_leg_altitude());
    const bool touched = lowest <= 0.0;
    if (touched) s.y -= lowest;
    update_contacts();
    const double speed = std::hypot(s.vx, s.vy);
    const bool gentle = speed <= cfg_.crash_speed && std::abs(s.theta) <= cfg_.crash_angle;
    if (touched && !gentle) {
      s.terminal = TerminalKind::crashed;
    } else if (gentle && s.left_contact == 1 && s.right_contact == 1) {
      // settling onto both legs within contact tolerance counts as landing
      s.terminal = TerminalKind::landed;
      s.success = std::abs(s.x) <= cfg_.pad_half_width && speed <= cfg_.success_speed &&
                  std::abs(s.theta) <= cfg_.success_angle;
    } else if (touched) {
      s.terminal = TerminalKind::landed;
    } else if (std::abs(s.x) > cfg_.bound_x || s.y > cfg_.bound_y) {
      s.terminal = TerminalKind::out_of_bounds;
    } else if (s.step_count >= cfg_.max_steps) {
      s.terminal = TerminalKind::timeout;
    }
    return {observe(s), s.terminal, s.success};
  }

  LanderState snapshot() const { return state_; }

  void restore(const LanderState& s) {
    validate(s);
    state_ = s;
  }

  Observation observation() const { return observe(state_); }
  bool terminal() const { return state_.terminal != TerminalKind::none; }

  static void validate(const LanderState& s) {
    const double f[] = {s.x, s.y, s.vx, s.vy, s.theta, s.omega};
    for (double v : f)
      if (!std::isfinite(v))
        throw Error(ErrorCode::invalid_argument, "lander state has non-finite field");
    if (s.y < 0.0) throw Error(ErrorCode::invalid_argument, "lander state below ground");
    if ((s.left_contact != 0 && s.left_contact != 1) ||
        (s.right_contact != 0 && s.right_contact != 1))
      throw Error(ErrorCode::invalid_argument, "contact flags must be 0 or 1");
    if (s.last_action < 0 || s.last_action >= kNumActions)
      throw Error(ErrorCode::invalid_argument, "last_action out of range");
    if (s.step_count < 0) throw Error(ErrorCode::invalid_argument, "negative step count");
    if (s.success && s.terminal != TerminalKind::landed)
      throw Error(ErrorCode::invalid_argument, "success without landing");
  }

 private:
  double left_leg_altitude() const {
    return state_.y - cfg_.leg_half_span * std::sin(state_.theta);
  }
  double right_leg_altitude() const {
    return state_.y + cfg_.leg_half_span * std::sin(state_.theta);
  }
  void update_contacts() {
    state_.left_contact = left_leg_altitude() <= cfg_.contact_tolerance ? 1 : 0;
    state_.right_contact = right_leg_altitude() <= cfg_.contact_tolerance ? 1 : 0;
  }

  EnvConfig cfg_;
  LanderState state_{};
};

}  // namespace landerlab
