#include <gtest/gtest.h>

#include "landerlab/oracle.hpp"

using namespace landerlab;

namespace {

std::vector<EpisodeRecord> random_pool(int n, std::uint64_t seed) {
  PrimitiveController ctl(random_primitive());
  std::vector<EpisodeRecord> pool;
  for (int i = 0; i < n; ++i) {
    pool.push_back(run_episode(EnvConfig{}, ctl, derive_seed(seed, static_cast<std::uint64_t>(i))));
    pool.back().id = "ep-" + std::to_string(i + 1);
  }
  return pool;
}

// Labels the left half-plane of x as positive.
LabelSet half_plane(int n, std::uint64_t seed) {
  LabelSet ls;
  ls.name = "left";
  SplitMix64 rng{seed};
  for (int i = 0; i < 2 * n; ++i) {
    Observation o{};
    for (auto& v : o) v = unit_uniform(rng) * 2 - 1;
    (o[obs::x] < 0 ? ls.positives : ls.negatives).push_back(o);
    (o[obs::x] < 0 ? ls.positive_refs : ls.negative_refs).push_back({"ep", i});
  }
  return ls;
}

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an Error";
  return ErrorCode::invalid_argument;
}

}  // namespace

TEST(Discriminator, ZeroDiscriminatorIsExactlyHalf) {
  const Discriminator d = zero_discriminator("z", {8});
  Observation o{};
  o[obs::y] = 1.3;
  EXPECT_EQ(classify(d, o), 0.5);
  const RewardSource r = as_reward(d);
  EXPECT_EQ(r.lower, 0.0);
  EXPECT_EQ(r.upper, 1.0);
}

TEST(Discriminator, LearnsSeparableLabels) {
  DiscriminatorConfig cfg;
  cfg.steps = 1500;
  const Discriminator d = train_discriminator(half_plane(200, 3), cfg);
  EXPECT_GE(d.heldout_accuracy, 0.95);
  Observation left{}, right{};
  left[obs::x] = -0.8;
  right[obs::x] = 0.8;
  EXPECT_GT(classify(d, left), 0.9);
  EXPECT_LT(classify(d, right), 0.1);
}

TEST(Discriminator, OutputsStayInUnitInterval) {
  DiscriminatorConfig cfg;
  cfg.steps = 300;
  const Discriminator d = train_discriminator(half_plane(100, 5), cfg);
  SplitMix64 rng{9};
  for (int i = 0; i < 200; ++i) {
    Observation o{};
    for (auto& v : o) v = (unit_uniform(rng) * 2 - 1) * 50;
    const double p = classify(d, o);
    EXPECT_GE(p, 0.0);
    EXPECT_LE(p, 1.0);
  }
}

TEST(Discriminator, TrainingIsDeterministicInSeed) {
  DiscriminatorConfig cfg;
  cfg.steps = 200;
  cfg.seed = 4;
  const LabelSet ls = half_plane(60, 1);
  EXPECT_EQ(train_discriminator(ls, cfg), train_discriminator(ls, cfg));
  cfg.seed = 5;
  const Discriminator other = train_discriminator(ls, cfg);
  cfg.seed = 4;
  EXPECT_NE(other.params.values, train_discriminator(ls, cfg).params.values);
}

TEST(Discriminator, RejectsTooFewOrDegenerateLabels) {
  DiscriminatorConfig cfg;
  LabelSet tiny = half_plane(10, 2);
  EXPECT_EQ(code_of([&] { train_discriminator(tiny, cfg); }), ErrorCode::precondition_failed);
  LabelSet same;
  same.positives.assign(30, Observation{});
  same.negatives.assign(30, Observation{});
  EXPECT_EQ(code_of([&] { train_discriminator(same, cfg); }), ErrorCode::precondition_failed);
  Observation bad{};
  bad[0] = std::nan("");
  EXPECT_EQ(code_of([&] { classify(zero_discriminator("z", {4}), bad); }), ErrorCode::invalid_argument);
}

TEST(OracleLabel, SamplesMatchPredicateWithoutReplacement) {
  const auto pool = random_pool(20, 11);
  const OraclePredicates pred;
  const auto ls = oracle_label("drop", pred.by_name("drop"), pool, 50, 50, 3);
  ASSERT_EQ(ls.positives.size(), 50u);
  ASSERT_EQ(ls.negatives.size(), 50u);
  for (const auto& o : ls.positives) EXPECT_TRUE(OraclePredicates::engines_off(o));
  for (const auto& o : ls.negatives) EXPECT_FALSE(OraclePredicates::engines_off(o));
  std::set<FrameRef> seen(ls.positive_refs.begin(), ls.positive_refs.end());
  seen.insert(ls.negative_refs.begin(), ls.negative_refs.end());
  EXPECT_EQ(seen.size(), 100u);
  EXPECT_EQ(oracle_label("drop", pred.by_name("drop"), pool, 50, 50, 3), ls);
}

TEST(OracleLabel, InsufficientFramesIsPreconditionFailure) {
  const auto pool = random_pool(2, 1);
  const OraclePredicates pred;
  EXPECT_EQ(code_of([&] { oracle_label("s", pred.by_name("stabilize"), pool, 100000, 1, 0); }),
            ErrorCode::precondition_failed);
  EXPECT_EQ(code_of([&] { oracle_label("s", pred.by_name("stabilize"), pool, 0, 1, 0); }),
            ErrorCode::invalid_argument);
  EXPECT_EQ(code_of([&] { pred.by_name("hover"); }), ErrorCode::invalid_argument);
}

TEST(OraclePredicates, StabilizeBand) {
  const OraclePredicates p;
  Observation o{};
  o[obs::y] = 1.0;
  o[obs::vy] = -0.3;
  EXPECT_TRUE(p.stabilize(o));
  o[obs::vy] = 0.0;  // hovering is not a descent
  EXPECT_FALSE(p.stabilize(o));
  o[obs::vy] = -0.3;
  o[obs::theta] = 0.2;
  EXPECT_FALSE(p.stabilize(o));
  o[obs::theta] = 0;
  o[obs::y] = 0.1;  // same speed is too fast near the ground
  EXPECT_FALSE(p.stabilize(o));
  o[obs::vy] = -0.08;
  EXPECT_TRUE(p.stabilize(o));
  o[obs::vx] = -0.2;
  o[obs::vy] = -0.3;
  o[obs::y] = 1.0;
  EXPECT_TRUE(p.drift_left(o));
  EXPECT_FALSE(p.drift_right(o));
}

TEST(OracleScore, CrashIsNeverPreferred) {
  const OracleScore s;
  Observation high{}, low{};
  high[obs::y] = 1.9;
  high[obs::x] = 1.4;
  high[obs::vy] = -0.5;
  EXPECT_LT(s(high, TerminalKind::none, false), s(low, TerminalKind::crashed, false));
  EXPECT_LT(s(high, TerminalKind::none, false), s(low, TerminalKind::out_of_bounds, false));
}

TEST(OracleScore, LowerAndCenteredIsBetter) {
  const OracleScore s;
  Observation a{}, b{};
  a[obs::y] = 0.5;
  b[obs::y] = 0.8;
  EXPECT_LT(s(a, TerminalKind::none, false), s(b, TerminalKind::none, false));
  b = a;
  b[obs::x] = 0.3;
  EXPECT_LT(s(a, TerminalKind::none, false), s(b, TerminalKind::none, false));
  // drifting back towards the pad counts as centered
  b[obs::vx] = -0.15;
  EXPECT_NEAR(s(a, TerminalKind::none, false), s(b, TerminalKind::none, false), 1e-12);
}

TEST(OracleScore, SpeedOnlyCountsAboveSafeValue) {
  const OracleScore s;
  Observation a{}, b{};
  a[obs::y] = b[obs::y] = 1.0;
  b[obs::vy] = -(s.safe_speed + s.safe_speed_slope * 1.0) * 0.9;
  EXPECT_EQ(s(a, TerminalKind::none, false), s(b, TerminalKind::none, false));
  b[obs::vy] = -1.0;
  EXPECT_GT(s(b, TerminalKind::none, false), s(a, TerminalKind::none, false));
}

TEST(OracleScore, DropBonusOnlyLowOverPadAndAlive) {
  OracleScore s;
  s.drop_bonus = 10;
  Observation o{};
  o[obs::y] = 0.1;
  const double base = s(o, TerminalKind::none, false);
  EXPECT_DOUBLE_EQ(s(o, TerminalKind::none, true), base - 10);
  EXPECT_DOUBLE_EQ(s(o, TerminalKind::landed, true), s(o, TerminalKind::landed, false) - 10);
  EXPECT_DOUBLE_EQ(s(o, TerminalKind::crashed, true), s(o, TerminalKind::crashed, false));
  o[obs::y] = 0.5;
  EXPECT_DOUBLE_EQ(s(o, TerminalKind::none, true), s(o, TerminalKind::none, false));
  o[obs::y] = 0.1;
  o[obs::x] = 0.5;
  EXPECT_DOUBLE_EQ(s(o, TerminalKind::none, true), s(o, TerminalKind::none, false));
}

TEST(OracleScore, LandingBonusRewardsSuccessOnly) {
  OracleScore s;
  s.landing_bonus = 5;
  Observation o{};
  EXPECT_DOUBLE_EQ(s(o, TerminalKind::landed, false, true), s(o, TerminalKind::landed, false, false) - 5);
}

TEST(OracleChoose, PicksLowestScoreFirstOnTies) {
  LanderEnv env;
  env.reset(1);
  const LanderState start = env.snapshot();
  Rollout r1 = simulate_rollout(EnvConfig{}, start, random_primitive(), 1);
  Rollout r2 = r1;
  EXPECT_EQ(oracle_choose({r1, r2}), 0);
  r2.steps.back().observation[obs::y] -= 0.5;
  EXPECT_EQ(oracle_choose({r1, r2}), 1);
  r1.final_state.terminal = TerminalKind::crashed;
  EXPECT_EQ(oracle_choose({r1, r2}), 1);
  EXPECT_EQ(code_of([] { oracle_choose({}); }), ErrorCode::invalid_argument);
}

TEST(Evaluate, WindowCurveAndRates) {
  EXPECT_EQ(window_curve({true, false, true}, 2), (std::vector<double>{0.5, 0.5}));
  const auto curve = window_curve(std::vector<bool>(25, true));
  EXPECT_EQ(curve.size(), 16u);
  ConstantController noop(0);
  const EvalResult r = evaluate(EnvConfig{}, noop, 10, 3, "noop");
  EXPECT_EQ(r.success_rate, 0.0);
  EXPECT_EQ(r.ground_rate, 1.0);
  EXPECT_LT(r.mean_terminal_altitude, 0.1);
  EXPECT_EQ(r.curve, std::vector<double>{0.0});
  EXPECT_EQ(code_of([&] { evaluate(EnvConfig{}, noop, 9, 3); }), ErrorCode::invalid_argument);
}
