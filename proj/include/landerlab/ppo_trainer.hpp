#pragma once

// Clipped-surrogate policy optimization with GAE for the four-action lander,
// trained against an arbitrary learned RewardSource. The environment's own
// termination signal is used only to reset episodes and to decide whether
// values are bootstrapped.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "landerlab/dense_net.hpp"
#include "landerlab/lander_env.hpp"
#include "landerlab/reward_source.hpp"

namespace landerlab {

struct PPOConfig {
  int steps_per_update = 2048;
  int minibatch_size = 256;
  int epochs = 4;
  double clip_eps = 0.2;
  double gamma = 0.995;
  double lambda = 0.95;
  double entropy_coef = 0.01;
  double value_coef = 0.5;
  double lr = 3e-4;
  double max_grad_norm = 0.5;
  long total_steps = 300000;
  std::uint64_t seed = 0;
  std::vector<int> hidden = {64, 64};
  // Terminal states are absorbing. A landing keeps paying the reward of its
  // terminal observation forever; a crash or exit pays the reward source's
  // lower bound when it has one, else its own terminal reward.
  bool absorbing_terminal = false;
  // Episodes used for the running mean return that selects the best policy.
  int return_window = 20;

  void validate() const {
    if (!(gamma > 0 && gamma <= 1)) throw Error(ErrorCode::invalid_argument, "gamma must be in (0,1]");
    if (!(lambda >= 0 && lambda <= 1)) throw Error(ErrorCode::invalid_argument, "lambda must be in [0,1]");
    if (!(clip_eps > 0)) throw Error(ErrorCode::invalid_argument, "clip epsilon must be positive");
    if (steps_per_update < 1 || minibatch_size < 1 || epochs < 1)
      throw Error(ErrorCode::invalid_argument, "batch sizes and epochs must be positive");
    if (absorbing_terminal && gamma >= 1)
      throw Error(ErrorCode::invalid_argument, "absorbing terminals need gamma < 1");
  }
};

// Running per-feature moments merged batch by batch (Chan et al. update).
struct RunningMoments {
  double count = 0;
  Vector mean = Vector::Zero(kObsDim);
  Vector m2 = Vector::Zero(kObsDim);

  void update(const Matrix& batch) {
    if (batch.rows() == 0) return;
    const double nb = static_cast<double>(batch.rows());
    const Vector bmean = batch.colwise().mean().transpose();
    const Vector bm2 = (batch.rowwise() - bmean.transpose()).array().square().colwise().sum().transpose();
    const Vector delta = bmean - mean;
    const double total = count + nb;
    mean += delta * (nb / total);
    m2 += bm2 + delta.cwiseAbs2() * (count * nb / total);
    count = total;
  }

  Normalizer normalizer() const {
    Normalizer n;
    if (count < 2) return n;
    n.mean = mean;
    for (Eigen::Index j = 0; j < mean.size(); ++j) {
      const double sd = std::sqrt(m2[j] / count);
      n.scale[j] = sd > 1e-6 ? sd : 1.0;
    }
    return n;
  }

  bool operator==(const RunningMoments& o) const {
    return count == o.count && mean == o.mean && m2 == o.m2;
  }
};

struct Policy {
  Params policy_net;  // softmax over actions
  Params value_net;   // linear scalar
  RunningMoments moments;
  Normalizer normalizer;  // frozen view of `moments` used for acting
  long adam_t = 0;
  std::uint64_t seed = 0;
  long env_steps = 0;
  std::string reward_id;

  bool operator==(const Policy&) const = default;
};

inline Policy init_policy(const std::vector<int>& hidden, std::uint64_t seed) {
  NetSpec ps, vs;
  ps.layer_sizes.push_back(static_cast<int>(kObsDim));
  for (int h : hidden) ps.layer_sizes.push_back(h);
  vs = ps;
  ps.layer_sizes.push_back(kNumActions);
  ps.head = OutputHead::softmax;
  vs.layer_sizes.push_back(1);
  vs.head = OutputHead::linear;
  Policy p;
  p.policy_net = init_params(ps, derive_seed(seed, 11));
  // small final layer keeps the initial policy close to uniform
  {
    const int L = ps.num_layers() - 1;
    const auto off = static_cast<Eigen::Index>(ps.weight_offset(L));
    const auto len = static_cast<Eigen::Index>(ps.bias_offset(L) - ps.weight_offset(L));
    p.policy_net.values.segment(off, len) *= 0.01;
  }
  p.value_net = init_params(vs, derive_seed(seed, 12));
  p.seed = seed;
  return p;
}

inline Matrix normalize_obs(const Policy& p, const Matrix& raw) {
  return p.normalizer.apply(raw).cwiseMax(-10.0).cwiseMin(10.0);
}

inline Eigen::RowVectorXd action_probabilities(const Policy& p, const Observation& o) {
  return forward(p.policy_net, normalize_obs(p, to_row(o))).row(0);
}

inline double state_value(const Policy& p, const Observation& o) {
  return forward(p.value_net, normalize_obs(p, to_row(o)))(0, 0);
}

template <class Engine>
int sample_action(const Eigen::RowVectorXd& probs, Engine& rng) {
  const double u = unit_uniform(rng);
  double acc = 0;
  for (Eigen::Index a = 0; a < probs.size(); ++a) {
    acc += probs[a];
    if (u < acc) return static_cast<int>(a);
  }
  return static_cast<int>(probs.size()) - 1;
}

// One on-policy batch. `next_observations[t]` is the observation reached by
// transition t (the one its reward is computed from). `tail[t]` holds the
// extra return credited at episode ends: a bootstrapped value at timeouts,
// and the discounted absorbing reward when absorbing terminals are enabled.
struct Batch {
  std::vector<Observation> observations;
  std::vector<Observation> next_observations;
  std::vector<int> actions;
  std::vector<double> logprobs;
  std::vector<double> rewards;
  std::vector<double> tail;
  std::vector<double> values;  // size n + 1; last entry is the bootstrap
  std::vector<std::uint8_t> dones;
  std::vector<TerminalKind> terminals;

  std::size_t size() const { return actions.size(); }
};

struct EpisodeStat {
  double learned_return = 0;
  int length = 0;
  TerminalKind terminal = TerminalKind::none;
  bool success = false;
  double terminal_altitude = 0;
};

// Persistent environment cursor across collect() calls.
class Collector {
 public:
  Collector(EnvConfig env_cfg, std::uint64_t seed) : env_(env_cfg), seed_(seed), rng_(mix64(seed)) {
    obs_ = env_.reset(derive_seed(seed_, 0xE915ULL, episode_index_));
  }

  Batch collect(const Policy& policy, const RewardSource& reward, int n_steps, const PPOConfig& cfg) {
    Batch b;
    b.observations.reserve(static_cast<std::size_t>(n_steps));
    b.next_observations.reserve(static_cast<std::size_t>(n_steps));
    for (int t = 0; t < n_steps; ++t) {
      const Matrix x = normalize_obs(policy, to_row(obs_));
      const Eigen::RowVectorXd probs = forward(policy.policy_net, x).row(0);
      const double value = forward(policy.value_net, x)(0, 0);
      const int a = sample_action(probs, rng_);
      const StepOutcome out = env_.step(a);
      b.observations.push_back(obs_);
      b.next_observations.push_back(out.observation);
      b.actions.push_back(a);
      b.logprobs.push_back(std::log(std::max(probs[a], 1e-300)));
      b.values.push_back(value);
      b.dones.push_back(out.done() ? 1 : 0);
      b.terminals.push_back(out.terminal);
      b.tail.push_back(out.terminal == TerminalKind::timeout ? cfg.gamma * state_value(policy, out.observation) : 0.0);
      ep_len_ += 1;
      if (out.done()) {
        finished_.push_back({0.0, ep_len_, out.terminal, out.success, out.observation[obs::y]});
        pending_.push_back(b.size() - 1);
        ep_len_ = 0;
        ++episode_index_;
        obs_ = env_.reset(derive_seed(seed_, 0xE915ULL, episode_index_));
      } else {
        obs_ = out.observation;
      }
    }
    b.values.push_back(state_value(policy, obs_));

    const Vector r = reward.batch(to_matrix(b.next_observations));
    b.rewards.assign(r.data(), r.data() + r.size());
    if (cfg.absorbing_terminal) {
      for (std::size_t t = 0; t < b.size(); ++t) {
        const auto k = b.terminals[t];
        double r = b.rewards[t];
        if (k == TerminalKind::crashed || k == TerminalKind::out_of_bounds) {
          if (std::isfinite(reward.lower)) r = reward.lower;
        } else if (k != TerminalKind::landed) {
          continue;
        }
        b.tail[t] += cfg.gamma / (1.0 - cfg.gamma) * r;
      }
    }
    // learned returns of episodes that ended inside this batch
    double running = partial_return_;
    std::size_t next_pending = 0;
    const std::size_t first_finished = finished_.size() - pending_.size();
    for (std::size_t t = 0; t < b.size(); ++t) {
      running += b.rewards[t] + b.tail[t];
      if (b.dones[t]) {
        finished_[first_finished + next_pending].learned_return = running;
        ++next_pending;
        running = 0;
      }
    }
    partial_return_ = running;
    pending_.clear();
    return b;
  }

  // Episodes completed since the last call.
  std::vector<EpisodeStat> take_finished() {
    std::vector<EpisodeStat> out;
    out.swap(finished_);
    return out;
  }

 private:
  LanderEnv env_;
  std::uint64_t seed_;
  std::mt19937_64 rng_;
  std::uint64_t episode_index_ = 0;
  Observation obs_{};
  int ep_len_ = 0;
  double partial_return_ = 0;
  std::vector<EpisodeStat> finished_;
  std::vector<std::size_t> pending_;
};

inline Batch collect(const EnvConfig& env_cfg, const Policy& policy, const RewardSource& reward,
                     int n_steps, std::uint64_t seed, const PPOConfig& cfg = {}) {
  if (n_steps < 1) throw Error(ErrorCode::invalid_argument, "n_steps must be >= 1");
  Collector c(env_cfg, seed);
  return c.collect(policy, reward, n_steps, cfg);
}

struct Advantages {
  std::vector<double> advantages;
  std::vector<double> returns;
};

// Backward recursion A_t = delta_t + gamma * lambda * (1 - done_t) * A_{t+1}
// with delta_t = r_t + tail_t + gamma * v_{t+1} * (1 - done_t) - v_t.
inline Advantages gae(const std::vector<double>& rewards, const std::vector<double>& values,
                      const std::vector<std::uint8_t>& dones, double gamma, double lambda,
                      const std::vector<double>& tail = {}) {
  const std::size_t n = rewards.size();
  if (values.size() != n + 1 || dones.size() != n)
    throw Error(ErrorCode::invalid_argument, "gae: values must have one bootstrap entry");
  Advantages out;
  out.advantages.assign(n, 0.0);
  out.returns.assign(n, 0.0);
  double last = 0;
  for (std::size_t i = n; i-- > 0;) {
    const double not_done = dones[i] ? 0.0 : 1.0;
    const double extra = tail.empty() ? 0.0 : tail[i];
    const double delta = rewards[i] + extra + gamma * values[i + 1] * not_done - values[i];
    last = delta + gamma * lambda * not_done * last;
    out.advantages[i] = last;
    out.returns[i] = last + values[i];
  }
  return out;
}

inline Advantages gae(const Batch& b, double gamma, double lambda) {
  return gae(b.rewards, b.values, b.dones, gamma, lambda, b.tail);
}

struct UpdateStats {
  double policy_loss = 0;
  double value_loss = 0;
  double entropy = 0;
  double approx_kl = 0;
  double clip_fraction = 0;
  // ratio statistics of the very first minibatch
  double first_ratio_max_dev = 0;
};

inline double entropy_of(const Eigen::RowVectorXd& p) {
  double h = 0;
  for (Eigen::Index j = 0; j < p.size(); ++j)
    if (p[j] > 0) h -= p[j] * std::log(p[j]);
  return h;
}

// Surrogate objective gradient with respect to the policy logits for one
// minibatch; also returns (policy loss, entropy, kl, clip fraction).
struct SurrogateTerms {
  Matrix dlogits;
  double loss = 0, entropy = 0, kl = 0, clipped = 0, max_ratio_dev = 0;
};

inline SurrogateTerms surrogate_gradient(const Matrix& probs, const std::vector<int>& actions,
                                         const std::vector<double>& old_logprobs,
                                         const std::vector<double>& adv, double clip_eps,
                                         double entropy_coef) {
  const Eigen::Index n = probs.rows();
  SurrogateTerms s;
  s.dlogits.resize(n, probs.cols());
  const double inv_n = 1.0 / static_cast<double>(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto iu = static_cast<std::size_t>(i);
    const int a = actions[iu];
    const Eigen::RowVectorXd p = probs.row(i);
    const double logp = std::log(std::max(p[a], 1e-300));
    const double ratio = std::exp(logp - old_logprobs[iu]);
    const double A = adv[iu];
    const double clipped_ratio = std::clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps);
    const double unclipped = ratio * A, clipped = clipped_ratio * A;
    const bool unclipped_active = unclipped <= clipped;
    const double h = entropy_of(p);
    s.loss -= inv_n * std::min(unclipped, clipped);
    s.entropy += inv_n * h;
    s.kl += inv_n * (old_logprobs[iu] - logp);
    s.clipped += inv_n * (std::abs(ratio - 1.0) > clip_eps ? 1.0 : 0.0);
    s.max_ratio_dev = std::max(s.max_ratio_dev, std::abs(ratio - 1.0));
    const double dsurr_dratio = unclipped_active ? A : 0.0;
    for (Eigen::Index j = 0; j < p.size(); ++j) {
      const double dratio = ratio * ((j == a ? 1.0 : 0.0) - p[j]);
      const double dentropy = p[j] > 0 ? -p[j] * (std::log(p[j]) + h) : 0.0;
      s.dlogits(i, j) = inv_n * (-dsurr_dratio * dratio - entropy_coef * dentropy);
    }
  }
  return s;
}

inline UpdateStats update(Policy& policy, const Batch& batch, const PPOConfig& cfg, std::mt19937_64& rng) {
  const std::size_t n = batch.size();
  Advantages adv = gae(batch, cfg.gamma, cfg.lambda);
  // normalize advantages over the whole update batch
  {
    const double mean = std::accumulate(adv.advantages.begin(), adv.advantages.end(), 0.0) / static_cast<double>(n);
    double var = 0;
    for (double a : adv.advantages) var += (a - mean) * (a - mean);
    const double sd = std::sqrt(var / static_cast<double>(n));
    for (double& a : adv.advantages) a = (a - mean) / (sd + 1e-8);
  }
  const Matrix x_all = normalize_obs(policy, to_matrix(batch.observations));

  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  const std::size_t mb = std::min<std::size_t>(static_cast<std::size_t>(cfg.minibatch_size), n);
  const AdamConfig adam{cfg.lr, 0.9, 0.999, 1e-5};

  UpdateStats stats;
  int count = 0;
  bool first = true;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t start = 0; start + mb <= n; start += mb) {
      const auto m = static_cast<Eigen::Index>(mb);
      Matrix xb(m, static_cast<Eigen::Index>(kObsDim));
      std::vector<int> acts(mb);
      std::vector<double> oldlp(mb), advb(mb);
      Matrix ret(m, 1);
      for (std::size_t k = 0; k < mb; ++k) {
        const std::size_t i = idx[start + k];
        xb.row(static_cast<Eigen::Index>(k)) = x_all.row(static_cast<Eigen::Index>(i));
        acts[k] = batch.actions[i];
        oldlp[k] = batch.logprobs[i];
        advb[k] = adv.advantages[i];
        ret(static_cast<Eigen::Index>(k), 0) = adv.returns[i];
      }

      const ForwardTrace pt = forward_trace(policy.policy_net, xb);
      const SurrogateTerms s =
          surrogate_gradient(pt.output, acts, oldlp, advb, cfg.clip_eps, cfg.entropy_coef);
      const ForwardTrace vt = forward_trace(policy.value_net, xb);
      const Matrix verr = vt.output - ret;
      const double vloss = verr.squaredNorm() / static_cast<double>(mb);
      if (!std::isfinite(s.loss) || !std::isfinite(vloss) || !s.dlogits.allFinite())
        throw Error(ErrorCode::numerical_failure, "non-finite PPO loss; update aborted");

      Vector gp = backprop(policy.policy_net, pt, s.dlogits);
      Vector gv = backprop(policy.value_net, vt, verr * (2.0 * cfg.value_coef / static_cast<double>(mb)));
      clip_norm(gp, cfg.max_grad_norm);
      clip_norm(gv, cfg.max_grad_norm);
      ++policy.adam_t;
      policy.policy_net = adam_step(std::move(policy.policy_net), gp, adam, policy.adam_t);
      policy.value_net = adam_step(std::move(policy.value_net), gv, adam, policy.adam_t);

      if (first) {
        stats.first_ratio_max_dev = s.max_ratio_dev;
        first = false;
      }
      stats.policy_loss += s.loss;
      stats.value_loss += cfg.value_coef * vloss;
      stats.entropy += s.entropy;
      stats.approx_kl += s.kl;
      stats.clip_fraction += s.clipped;
      ++count;
    }
  }
  if (count > 0) {
    stats.policy_loss /= count;
    stats.value_loss /= count;
    stats.entropy /= count;
    stats.approx_kl /= count;
    stats.clip_fraction /= count;
  }
  return stats;
}

struct ProgressEvent {
  long env_steps = 0;
  double mean_return = 0;
  double success_rate = 0;
  double entropy = 0;
  std::int64_t timestamp_ms = 0;
};

using ProgressCallback = std::function<void(const ProgressEvent&)>;

inline std::int64_t now_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(
             std::chrono::system_clock::now().time_since_epoch())
      .count();
}

struct TrainResult {
  Policy policy;        // best by running mean return
  Policy last;          // parameters at the end of training
  double best_running_return = 0;
  std::vector<EpisodeStat> episodes;
};

inline TrainResult train_policy_detailed(const EnvConfig& env_cfg, const RewardSource& reward,
                                         const PPOConfig& cfg, const ProgressCallback& progress = {},
                                         std::optional<Policy> warm_start = std::nullopt) {
  cfg.validate();
  Policy policy = warm_start ? *warm_start : init_policy(cfg.hidden, cfg.seed);
  policy.reward_id = reward.id;
  policy.seed = cfg.seed;
  Collector collector(env_cfg, derive_seed(cfg.seed, 0xC011ULL));
  std::mt19937_64 rng(derive_seed(cfg.seed, 0x5EEDULL));

  TrainResult result;
  std::deque<double> window;
  std::optional<double> best;
  long steps = 0;
  while (steps < cfg.total_steps) {
    const int n = static_cast<int>(std::min<long>(cfg.steps_per_update, cfg.total_steps - steps));
    const Batch batch = collector.collect(policy, reward, n, cfg);
    steps += n;
    const UpdateStats st = update(policy, batch, cfg, rng);
    policy.moments.update(to_matrix(batch.observations));
    policy.normalizer = policy.moments.normalizer();
    policy.env_steps = steps;

    const auto finished = collector.take_finished();
    int successes = 0;
    for (const auto& e : finished) {
      window.push_back(e.learned_return);
      if (static_cast<int>(window.size()) > cfg.return_window) window.pop_front();
      successes += e.success ? 1 : 0;
      result.episodes.push_back(e);
    }
    if (!window.empty()) {
      const double mean = std::accumulate(window.begin(), window.end(), 0.0) / static_cast<double>(window.size());
      if (!best || mean > *best) {
        best = mean;
        result.policy = policy;
      }
      if (progress)
        progress({steps, mean,
                  finished.empty() ? 0.0 : static_cast<double>(successes) / static_cast<double>(finished.size()),
                  st.entropy, now_ms()});
    }
  }
  if (!best) result.policy = policy;
  result.best_running_return = best.value_or(0.0);
  result.last = policy;
  return result;
}

inline Policy train_policy(const EnvConfig& env_cfg, const RewardSource& reward, const PPOConfig& cfg,
                           const ProgressCallback& progress = {}) {
  return train_policy_detailed(env_cfg, reward, cfg, progress).policy;
}

}  // namespace landerlab
