#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "landerlab/oracle.hpp"
#include "landerlab/preference_reward.hpp"

using namespace landerlab;

namespace {

Rollout fake_rollout(int len, double y) {
  Rollout r;
  for (int i = 0; i < len; ++i) {
    Observation o{};
    o[obs::y] = y + 0.01 * i;
    r.steps.push_back({o, 0, false});
  }
  return r;
}

DemoSession session_with(int steps, int branches) {
  DemoSession s;
  s.id = "s";
  for (int t = 0; t < steps; ++t) {
    DemoStep st;
    for (int b = 0; b < branches; ++b) st.branches.push_back(fake_rollout(3, b));
    st.chosen = t % branches;
    s.steps.push_back(st);
  }
  return s;
}

// Pairs of 15-step random-primitive rollouts from shared mid-flight states,
// preferred by lower pad distance plus speed at the end.
std::vector<Comparison> scored_comparisons(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Comparison> out;
  const Primitive rnd = random_primitive();
  LanderEnv env;
  while (static_cast<int>(out.size()) < n) {
    env.reset(rng());
    const int warm = static_cast<int>(rng() % 30);
    for (int i = 0; i < warm && !env.terminal(); ++i) env.step(static_cast<int>(rng() % 4));
    if (env.terminal()) continue;
    const LanderState s = env.snapshot();
    Rollout a = simulate_rollout(EnvConfig{}, s, rnd, rng());
    Rollout b = simulate_rollout(EnvConfig{}, s, rnd, rng());
    if (a.steps.size() != 15 || b.steps.size() != 15) continue;
    const auto score = [](const Rollout& r) {
      const Observation& o = r.final_observation();
      return std::hypot(o[obs::x], o[obs::y]) + speed_of(o);
    };
    Comparison c;
    c.ref = {"synthetic", static_cast<int>(out.size()), 0, 1};
    if (score(a) <= score(b)) {
      c.preferred = a;
      c.rejected = b;
    } else {
      c.preferred = b;
      c.rejected = a;
    }
    out.push_back(std::move(c));
  }
  return out;
}

RewardModel random_model(std::uint64_t seed) {
  RewardModel m = zero_reward_model("r", {8, 8});
  m.params = init_params(m.params.spec, seed);
  return m;
}

}  // namespace

TEST(ExtractComparisons, CountsPerChosenStep) {
  EXPECT_EQ(extract_comparisons(session_with(1, 4)).size(), 3u);
  EXPECT_EQ(extract_comparisons(session_with(8, 4)).size(), 24u);
  EXPECT_TRUE(extract_comparisons(session_with(5, 1)).empty());

  DemoSession s = session_with(3, 4);
  s.steps.back().chosen.reset();
  const auto cs = extract_comparisons(s);
  EXPECT_EQ(cs.size(), 6u);
  for (const auto& c : cs) {
    EXPECT_NE(c.ref.preferred, c.ref.rejected);
    EXPECT_EQ(c.preferred, s.steps[static_cast<std::size_t>(c.ref.step)].branches[static_cast<std::size_t>(c.ref.preferred)]);
    EXPECT_EQ(c.rejected, s.steps[static_cast<std::size_t>(c.ref.step)].branches[static_cast<std::size_t>(c.ref.rejected)]);
  }
}

TEST(PreferenceProbability, ZeroModelAndEqualScoresGiveHalf) {
  const RewardModel z = zero_reward_model("z");
  EXPECT_EQ(preference_probability(z, fake_rollout(5, 0.1), fake_rollout(5, 0.9)), 0.5);
  const RewardModel m = random_model(3);
  const Rollout a = fake_rollout(5, 0.4);
  EXPECT_EQ(preference_probability(m, a, a), 0.5);
}

TEST(PreferenceProbability, ExactAntisymmetry) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0, 2);
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const RewardModel m = random_model(seed);
    const Rollout a = fake_rollout(7, u(rng)), b = fake_rollout(7, u(rng));
    EXPECT_EQ(preference_probability(m, a, b), 1.0 - preference_probability(m, b, a));
  }
  // saturated differences stay in [0, 1]
  EXPECT_EQ(bt_probability(-1e6), 0.0);
  EXPECT_EQ(bt_probability(1e6), 1.0);
}

TEST(PreferenceProbability, ShiftInvariance) {
  RewardModel m = random_model(5);
  const Rollout a = fake_rollout(6, 0.2), b = fake_rollout(6, 1.1);
  const double before = preference_probability(m, a, b);
  const int last = m.params.spec.num_layers() - 1;
  m.params.values[static_cast<Eigen::Index>(m.params.spec.bias_offset(last))] += 3.25;
  EXPECT_NEAR(preference_probability(m, a, b), before, 1e-12);
}

TEST(PreferenceProbability, RejectsUnequalLengths) {
  EXPECT_THROW(preference_probability(zero_reward_model("z"), fake_rollout(3, 0), fake_rollout(4, 0)), Error);
}

TEST(RewardModel, TooFewComparisonsRejected) {
  EXPECT_THROW(train_reward_model(scored_comparisons(5, 1), {}), Error);
}

TEST(RewardModel, LearnsOracleScoredPreferences) {
  const auto cs = scored_comparisons(600, 2);
  RewardModelConfig cfg;
  cfg.seed = 4;
  const RewardModel m = train_reward_model(cs, cfg);
  EXPECT_GE(m.heldout_accuracy, 0.8);
  EXPECT_EQ(m.comparisons_used, 600);

  // output normalization over the training frames
  std::vector<Observation> frames;
  for (const auto& c : cs) {
    for (const auto& f : rollout_frames(c.preferred)) frames.push_back(f);
    for (const auto& f : rollout_frames(c.rejected)) frames.push_back(f);
  }
  const Vector r = as_reward(m).batch(to_matrix(frames));
  EXPECT_TRUE(r.allFinite());
  const double mu = r.mean();
  const double sd = std::sqrt((r.array() - mu).square().mean());
  EXPECT_LE(std::abs(mu), 0.05);
  EXPECT_LE(std::abs(sd - 1.0), 0.05);

  for (std::size_t e = 1; e < m.epoch_losses.size(); ++e)
    EXPECT_LE(m.epoch_losses[e], m.epoch_losses[e - 1] + 1e-12) << "epoch " << e;
}

TEST(RewardModel, RandomPreferencesStayNearChance) {
  auto cs = scored_comparisons(2000, 3);
  std::mt19937_64 rng(9);
  for (auto& c : cs)
    if (rng() % 2) std::swap(c.preferred, c.rejected);
  const RewardModel m = train_reward_model(cs, {});
  EXPECT_NEAR(m.heldout_accuracy, 0.5, 0.1);
}

TEST(RewardModel, IdenticalRolloutsAreDegenerateButTrain) {
  std::vector<Comparison> cs;
  for (int i = 0; i < 20; ++i) {
    Comparison c;
    c.ref = {"s", i, 0, 1};
    c.preferred = c.rejected = fake_rollout(15, 0.5);
    cs.push_back(c);
  }
  RewardModelConfig cfg;
  cfg.steps = 50;
  const RewardModel m = train_reward_model(cs, cfg);
  EXPECT_EQ(m.heldout_accuracy, 0.5);
}

TEST(RewardModel, TruncatedRolloutsDroppedUnlessPadded) {
  auto cs = scored_comparisons(12, 6);
  cs[0].rejected.steps.resize(4);
  cs[1].preferred.steps.resize(4);
  cs[1].rejected.steps.resize(4);
  RewardModelConfig cfg;
  cfg.steps = 20;
  cfg.min_comparisons = 10;
  EXPECT_EQ(train_reward_model(cs, cfg).comparisons_dropped, 2);
  cfg.pad_terminal = true;
  EXPECT_EQ(train_reward_model(cs, cfg).comparisons_dropped, 0);
}

TEST(RewardModel, TrainingIsDeterministic) {
  const auto cs = scored_comparisons(40, 8);
  RewardModelConfig cfg;
  cfg.steps = 200;
  EXPECT_EQ(train_reward_model(cs, cfg), train_reward_model(cs, cfg));
}

TEST(RewardModel, BradleyTerryGradientMatchesFiniteDifferences) {
  // Loss over one comparison as a function of the network parameters.
  const RewardModel m0 = random_model(12);
  const Rollout a = fake_rollout(4, 0.3), b = fake_rollout(4, 0.8);
  Matrix x(8, static_cast<Eigen::Index>(kObsDim));
  for (int i = 0; i < 4; ++i) {
    x.row(i) = to_row(a.steps[static_cast<std::size_t>(i)].observation);
    x.row(i + 4) = to_row(b.steps[static_cast<std::size_t>(i)].observation);
  }
  const auto nll = [&](const Params& p) {
    RewardModel m = m0;
    m.params = p;
    return -std::log(preference_probability(m, a, b));
  };
  const Vector z = forward(m0.params, x).col(0);
  const double g = bt_probability(-(z.head(4).sum() - z.tail(4).sum()));
  Loss loss{LossKind::custom, {}, {}, Matrix(8, 1)};
  loss.upstream.topRows(4).setConstant(-g);
  loss.upstream.bottomRows(4).setConstant(g);
  const Vector analytic = backward(m0.params, x, loss);
  for (Eigen::Index i = 0; i < analytic.size(); ++i) {
    Params plus = m0.params, minus = m0.params;
    plus.values[i] += 1e-5;
    minus.values[i] -= 1e-5;
    const double numeric = (nll(plus) - nll(minus)) / 2e-5;
    EXPECT_NEAR(analytic[i], numeric, 1e-4 * std::max({1.0, std::abs(numeric)}));
  }
}
