#pragma once

// Goal-state discriminators: binary classifiers over observations trained
// from labeled frames. Their probability output doubles as an RL reward.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <tuple>
#include <vector>

#include "landerlab/dense_net.hpp"
#include "landerlab/reward_source.hpp"

namespace landerlab {

struct FrameRef {
  std::string episode_id;
  int frame = 0;

  friend bool operator==(const FrameRef&, const FrameRef&) = default;
  friend auto operator<=>(const FrameRef&, const FrameRef&) = default;
};

struct LabelSet {
  std::string name;
  std::vector<Observation> positives;
  std::vector<Observation> negatives;
  std::vector<FrameRef> positive_refs;  // parallel to positives
  std::vector<FrameRef> negative_refs;  // parallel to negatives

  bool operator==(const LabelSet&) const = default;
};

struct DiscriminatorConfig {
  std::vector<int> hidden = {64, 64};
  int steps = 3000;
  int batch_size = 64;
  double lr = 1e-3;
  double holdout_fraction = 0.2;
  std::uint64_t seed = 0;
  int min_per_class = 20;
  // Frozen input normalization; fitted on the labeled frames when absent.
  std::optional<Normalizer> normalizer;
};

struct Discriminator {
  std::string label_set;
  Normalizer normalizer;
  Params params;
  double heldout_accuracy = 0;
  int train_steps = 0;
  std::uint64_t seed = 0;

  bool operator==(const Discriminator&) const = default;
};

inline Vector classify_batch(const Discriminator& d, const Matrix& observations) {
  return forward(d.params, d.normalizer.apply(observations)).col(0);
}

inline double classify(const Discriminator& d, const Observation& o) {
  if (!all_finite(o)) throw Error(ErrorCode::invalid_argument, "non-finite observation");
  return classify_batch(d, to_row(o))[0];
}

inline RewardSource as_reward(const Discriminator& d) {
  return {"discriminator:" + d.label_set,
          [d](const Matrix& m) { return classify_batch(d, m); }, 0.0, 1.0};
}

// Untrained discriminator with all-zero parameters; outputs exactly 0.5.
inline Discriminator zero_discriminator(const std::string& name, std::vector<int> hidden = {64, 64}) {
  NetSpec spec;
  spec.layer_sizes.push_back(static_cast<int>(kObsDim));
  for (int h : hidden) spec.layer_sizes.push_back(h);
  spec.layer_sizes.push_back(1);
  spec.head = OutputHead::sigmoid;
  Params p = init_params(spec, 0);
  p.values.setZero();
  return {name, Normalizer{}, p, 0.0, 0, 0};
}

inline Discriminator train_discriminator(const LabelSet& labels, const DiscriminatorConfig& cfg) {
  const int n_pos = static_cast<int>(labels.positives.size());
  const int n_neg = static_cast<int>(labels.negatives.size());
  if (n_pos < cfg.min_per_class || n_neg < cfg.min_per_class)
    throw Error(ErrorCode::precondition_failed,
                "too few examples: need >= " + std::to_string(cfg.min_per_class) +
                    " positives and negatives, have " + std::to_string(n_pos) + "/" +
                    std::to_string(n_neg));

  std::vector<Observation> all;
  std::vector<double> y;
  std::vector<FrameRef> refs;
  all.reserve(static_cast<std::size_t>(n_pos + n_neg));
  for (int i = 0; i < n_pos; ++i) {
    all.push_back(labels.positives[i]);
    y.push_back(1.0);
    refs.push_back(i < static_cast<int>(labels.positive_refs.size()) ? labels.positive_refs[i]
                                                                     : FrameRef{"", i});
  }
  for (int i = 0; i < n_neg; ++i) {
    all.push_back(labels.negatives[i]);
    y.push_back(0.0);
    refs.push_back(i < static_cast<int>(labels.negative_refs.size()) ? labels.negative_refs[i]
                                                                     : FrameRef{"", -1 - i});
  }
  for (const auto& o : all)
    if (!all_finite(o)) throw Error(ErrorCode::invalid_argument, "non-finite labeled observation");
  if (std::all_of(all.begin(), all.end(), [&](const Observation& o) { return o == all.front(); }))
    throw Error(ErrorCode::precondition_failed, "degenerate label set: all examples identical");

  // Split on a seeded permutation of the (episode, frame) references so the
  // partition does not depend on label insertion order.
  std::vector<std::size_t> order(all.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::tie(refs[a], y[a]) < std::tie(refs[b], y[b]);
  });
  std::mt19937_64 rng(mix64(cfg.seed));
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_hold = static_cast<std::size_t>(cfg.holdout_fraction * static_cast<double>(all.size()));
  std::vector<std::size_t> hold(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_hold));
  std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(n_hold), order.end());

  Discriminator d;
  d.label_set = labels.name;
  d.seed = cfg.seed;
  d.train_steps = cfg.steps;
  d.normalizer = cfg.normalizer ? *cfg.normalizer : Normalizer::fit(all);

  NetSpec spec;
  spec.layer_sizes.push_back(static_cast<int>(kObsDim));
  for (int h : cfg.hidden) spec.layer_sizes.push_back(h);
  spec.layer_sizes.push_back(1);
  spec.head = OutputHead::sigmoid;
  d.params = init_params(spec, derive_seed(cfg.seed, 1));

  const Matrix x_all = d.normalizer.apply(to_matrix(all));
  double pos_train = 0;
  for (auto i : train) pos_train += y[i];
  const double neg_train = static_cast<double>(train.size()) - pos_train;
  // inverse class frequency
  const double w_pos = pos_train > 0 ? 1.0 / pos_train : 0.0;
  const double w_neg = neg_train > 0 ? 1.0 / neg_train : 0.0;

  const int bs = std::min<int>(cfg.batch_size, static_cast<int>(train.size()));
  std::uniform_int_distribution<std::size_t> pick(0, train.size() - 1);
  Matrix xb(bs, static_cast<Eigen::Index>(kObsDim));
  Loss loss;
  loss.kind = LossKind::bce;
  loss.targets.resize(bs, 1);
  loss.weights.resize(bs);
  const AdamConfig adam{cfg.lr};
  for (int step = 1; step <= cfg.steps; ++step) {
    for (int b = 0; b < bs; ++b) {
      const std::size_t i = train[pick(rng)];
      xb.row(b) = x_all.row(static_cast<Eigen::Index>(i));
      loss.targets(b, 0) = y[i];
      loss.weights[b] = y[i] > 0.5 ? w_pos : w_neg;
    }
    if (loss.weights.sum() <= 0) loss.weights.setOnes();
    const Vector g = backward(d.params, xb, loss);
    d.params = adam_step(std::move(d.params), g, adam, step);
  }

  if (!hold.empty()) {
    Matrix xh(static_cast<Eigen::Index>(hold.size()), static_cast<Eigen::Index>(kObsDim));
    for (std::size_t r = 0; r < hold.size(); ++r) xh.row(static_cast<Eigen::Index>(r)) = x_all.row(static_cast<Eigen::Index>(hold[r]));
    const Vector p = forward(d.params, xh).col(0);
    int correct = 0;
    for (std::size_t r = 0; r < hold.size(); ++r)
      correct += ((p[static_cast<Eigen::Index>(r)] > 0.5) == (y[hold[r]] > 0.5)) ? 1 : 0;
    d.heldout_accuracy = static_cast<double>(correct) / static_cast<double>(hold.size());
  }
  return d;
}

}  // namespace landerlab
