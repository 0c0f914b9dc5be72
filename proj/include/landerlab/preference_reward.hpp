#pragma once

// Implicit comparisons from demonstration choices and a Bradley-Terry
// per-frame reward model fitted to them.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <tuple>
#include <vector>

#include "landerlab/dense_net.hpp"
#include "landerlab/records.hpp"
#include "landerlab/reward_source.hpp"

namespace landerlab {

// Where a comparison came from; this is what the store persists.
struct ComparisonRef {
  std::string session_id;
  int step = 0;
  int preferred = 0;
  int rejected = 0;

  friend bool operator==(const ComparisonRef&, const ComparisonRef&) = default;
  friend auto operator<=>(const ComparisonRef&, const ComparisonRef&) = default;
};

struct Comparison {
  ComparisonRef ref;
  Rollout preferred;
  Rollout rejected;

  bool operator==(const Comparison&) const = default;
};

// Chosen branch against each other branch, for every chosen step.
inline std::vector<Comparison> extract_comparisons(const DemoSession& s) {
  std::vector<Comparison> out;
  for (std::size_t t = 0; t < s.steps.size(); ++t) {
    const DemoStep& step = s.steps[t];
    if (!step.chosen) continue;
    const int c = *step.chosen;
    for (std::size_t j = 0; j < step.branches.size(); ++j) {
      if (static_cast<int>(j) == c) continue;
      out.push_back({{s.id, static_cast<int>(t), c, static_cast<int>(j)},
                     step.branches[static_cast<std::size_t>(c)],
                     step.branches[j]});
    }
  }
  return out;
}

inline std::vector<Comparison> extract_comparisons(const std::vector<DemoSession>& sessions) {
  std::vector<Comparison> out;
  for (const auto& s : sessions) {
    auto c = extract_comparisons(s);
    out.insert(out.end(), std::make_move_iterator(c.begin()), std::make_move_iterator(c.end()));
  }
  return out;
}

// Observations reached by the rollout's steps.
inline std::vector<Observation> rollout_frames(const Rollout& r) {
  std::vector<Observation> f;
  f.reserve(r.steps.size());
  for (const auto& s : r.steps) f.push_back(s.observation);
  return f;
}

struct RewardModelConfig {
  std::vector<int> hidden = {64, 64};
  int steps = 4000;
  int batch_size = 16;
  double lr = 1e-3;
  double holdout_fraction = 0.1;
  std::uint64_t seed = 0;
  int min_comparisons = 10;
  // Rollouts cut short by a terminal state are dropped unless padded to the
  // horizon by repeating their terminal observation. Timeouts are never
  // padded.
  bool pad_terminal = false;
  int horizon = 15;
  double min_input_scale = 0.0;
};

struct RewardModel {
  std::string name;
  Normalizer normalizer;
  Params params;  // linear scalar head
  double offset = 0;
  double scale = 1;
  double heldout_accuracy = 0;
  int train_steps = 0;
  std::uint64_t seed = 0;
  int comparisons_used = 0;
  int comparisons_dropped = 0;
  // Mean training loss after each accepted epoch. An epoch that would raise
  // it is rolled back and the step size halved.
  std::vector<double> epoch_losses;
  int rejected_epochs = 0;

  bool operator==(const RewardModel&) const = default;
};

inline Vector latent_batch(const RewardModel& m, const Matrix& observations) {
  return forward(m.params, m.normalizer.apply(observations)).col(0);
}

inline double latent(const RewardModel& m, const Observation& o) {
  return latent_batch(m, to_row(o))[0];
}

inline double rollout_score(const RewardModel& m, const Rollout& r) {
  if (r.steps.empty()) return 0.0;
  return latent_batch(m, to_matrix(rollout_frames(r))).sum();
}

// sigma(d) evaluated so that sigma(-d) == 1 - sigma(d) holds exactly.
inline double bt_probability(double d) {
  if (d >= 0) return 1.0 / (1.0 + std::exp(-d));
  return 1.0 - 1.0 / (1.0 + std::exp(d));
}

inline double preference_probability(const RewardModel& m, const Rollout& a, const Rollout& b) {
  if (a.steps.size() != b.steps.size())
    throw Error(ErrorCode::invalid_argument, "preference needs equal-length rollouts");
  return bt_probability(rollout_score(m, a) - rollout_score(m, b));
}

inline RewardModel zero_reward_model(const std::string& name, std::vector<int> hidden = {64, 64}) {
  NetSpec spec;
  spec.layer_sizes.push_back(static_cast<int>(kObsDim));
  for (int h : hidden) spec.layer_sizes.push_back(h);
  spec.layer_sizes.push_back(1);
  spec.head = OutputHead::linear;
  RewardModel m;
  m.name = name;
  m.params = init_params(spec, 0);
  m.params.values.setZero();
  return m;
}

namespace detail {

inline std::vector<Observation> padded_frames(const Rollout& r, int horizon) {
  std::vector<Observation> f = rollout_frames(r);
  if (r.terminal() == TerminalKind::timeout) return f;
  while (!f.empty() && static_cast<int>(f.size()) < horizon) f.push_back(f.back());
  return f;
}

struct FramePair {
  std::vector<Observation> preferred;
  std::vector<Observation> rejected;
};

}  // namespace detail

inline RewardModel train_reward_model(const std::vector<Comparison>& comparisons, const RewardModelConfig& cfg,
                                      const std::string& name = "reward") {
  if (static_cast<int>(comparisons.size()) < cfg.min_comparisons)
    throw Error(ErrorCode::precondition_failed, "too few comparisons: need >= " +
                                                    std::to_string(cfg.min_comparisons) + ", have " +
                                                    std::to_string(comparisons.size()));
  // usable pairs, ordered by reference so the split ignores input order
  std::vector<std::size_t> idx(comparisons.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return comparisons[a].ref < comparisons[b].ref; });
  std::vector<detail::FramePair> pairs;
  int dropped = 0;
  for (std::size_t i : idx) {
    const Comparison& c = comparisons[i];
    detail::FramePair p;
    if (cfg.pad_terminal) {
      p.preferred = detail::padded_frames(c.preferred, cfg.horizon);
      p.rejected = detail::padded_frames(c.rejected, cfg.horizon);
    } else {
      p.preferred = rollout_frames(c.preferred);
      p.rejected = rollout_frames(c.rejected);
    }
    const bool full = static_cast<int>(p.preferred.size()) == cfg.horizon;
    if (p.preferred.empty() || p.preferred.size() != p.rejected.size() || !full) {
      ++dropped;
      continue;
    }
    pairs.push_back(std::move(p));
  }
  if (static_cast<int>(pairs.size()) < cfg.min_comparisons)
    throw Error(ErrorCode::precondition_failed,
                "too few usable comparisons after dropping truncated rollouts: " + std::to_string(pairs.size()));

  std::mt19937_64 rng(mix64(cfg.seed));
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_hold = std::max<std::size_t>(
      1, static_cast<std::size_t>(cfg.holdout_fraction * static_cast<double>(pairs.size())));
  const std::vector<std::size_t> hold(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_hold));
  std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(n_hold), order.end());

  RewardModel m;
  m.name = name;
  m.seed = cfg.seed;
  m.train_steps = cfg.steps;
  m.comparisons_used = static_cast<int>(pairs.size());
  m.comparisons_dropped = dropped;

  std::vector<Observation> train_frames;
  for (auto i : train) {
    train_frames.insert(train_frames.end(), pairs[i].preferred.begin(), pairs[i].preferred.end());
    train_frames.insert(train_frames.end(), pairs[i].rejected.begin(), pairs[i].rejected.end());
  }
  m.normalizer = Normalizer::fit(train_frames, cfg.min_input_scale);

  NetSpec spec;
  spec.layer_sizes.push_back(static_cast<int>(kObsDim));
  for (int h : cfg.hidden) spec.layer_sizes.push_back(h);
  spec.layer_sizes.push_back(1);
  spec.head = OutputHead::linear;
  m.params = init_params(spec, derive_seed(cfg.seed, 2));

  const std::size_t k = pairs.front().preferred.size();
  // Rows [2k*i, 2k*i + k) are preferred frames of pair i, the next k rejected.
  const auto stack = [&](const std::vector<std::size_t>& which) {
    Matrix x(static_cast<Eigen::Index>(2 * k * which.size()), static_cast<Eigen::Index>(kObsDim));
    Eigen::Index r = 0;
    for (auto i : which) {
      for (const auto& o : pairs[i].preferred) x.row(r++) = to_row(o);
      for (const auto& o : pairs[i].rejected) x.row(r++) = to_row(o);
    }
    return m.normalizer.apply(x);
  };
  // differences S_pref - S_rej from per-frame latents laid out as by stack()
  const auto score_diffs = [&](const Vector& z, std::size_t count) {
    Vector d(static_cast<Eigen::Index>(count));
    const auto K = static_cast<Eigen::Index>(k);
    for (Eigen::Index i = 0; i < d.size(); ++i)
      d[i] = z.segment(2 * K * i, K).sum() - z.segment(2 * K * i + K, K).sum();
    return d;
  };
  const auto mean_nll = [&](const Vector& d) {
    double s = 0;
    for (Eigen::Index i = 0; i < d.size(); ++i) s -= std::log(bt_probability(d[i]));
    return s / static_cast<double>(d.size());
  };

  const Matrix x_train = stack(train);
  const std::size_t bs = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), train.size());
  AdamConfig adam{cfg.lr};
  std::vector<std::size_t> epoch_order = train;
  std::size_t cursor = epoch_order.size();
  const auto train_loss = [&] { return mean_nll(score_diffs(forward(m.params, x_train).col(0), train.size())); };
  m.epoch_losses.push_back(train_loss());
  Params epoch_start = m.params;
  for (int step = 1; step <= cfg.steps; ++step) {
    if (cursor + bs > epoch_order.size()) {
      std::shuffle(epoch_order.begin(), epoch_order.end(), rng);
      cursor = 0;
    }
    const std::vector<std::size_t> mb(epoch_order.begin() + static_cast<std::ptrdiff_t>(cursor),
                                      epoch_order.begin() + static_cast<std::ptrdiff_t>(cursor + bs));
    cursor += bs;
    const Matrix xb = stack(mb);
    const Vector z = forward(m.params, xb).col(0);
    const Vector d = score_diffs(z, mb.size());
    // d/dS_pref of -log sigma(d) is -sigma(-d); rejected frames get the opposite sign
    Loss loss;
    loss.kind = LossKind::custom;
    loss.upstream.resize(xb.rows(), 1);
    const auto K = static_cast<Eigen::Index>(k);
    for (Eigen::Index i = 0; i < d.size(); ++i) {
      const double g = bt_probability(-d[i]) / static_cast<double>(mb.size());
      loss.upstream.block(2 * K * i, 0, K, 1).setConstant(-g);
      loss.upstream.block(2 * K * i + K, 0, K, 1).setConstant(g);
    }
    const Vector grad = backward(m.params, xb, loss);
    if (!grad.allFinite()) throw Error(ErrorCode::numerical_failure, "non-finite reward model gradient");
    m.params = adam_step(std::move(m.params), grad, adam, step);
    if (cursor + bs > epoch_order.size() || step == cfg.steps) {
      const double l = train_loss();
      if (l <= m.epoch_losses.back()) {
        m.epoch_losses.push_back(l);
        epoch_start = m.params;
      } else {
        m.params = epoch_start;
        adam.lr *= 0.5;
        ++m.rejected_epochs;
      }
    }
  }

  const Vector z_train = forward(m.params, x_train).col(0);
  m.offset = z_train.mean();
  const double sd = std::sqrt((z_train.array() - m.offset).square().mean());
  m.scale = sd > 1e-12 ? sd : 1.0;

  const Vector dh = score_diffs(forward(m.params, stack(hold)).col(0), hold.size());
  double correct = 0;
  for (Eigen::Index i = 0; i < dh.size(); ++i) correct += dh[i] > 0 ? 1.0 : dh[i] == 0 ? 0.5 : 0.0;
  m.heldout_accuracy = correct / static_cast<double>(dh.size());
  return m;
}

inline RewardSource as_reward(const RewardModel& m) {
  return {"reward_model:" + m.name,
          [m](const Matrix& obs) { return Vector((latent_batch(m, obs).array() - m.offset) / m.scale); }};
}

}  // namespace landerlab
