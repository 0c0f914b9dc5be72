#pragma once

// Headless drivers: the four-iteration primitive pipeline, the two baselines
// it is compared against, and evaluation bookkeeping shared with the service.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "landerlab/oracle.hpp"
#include "landerlab/preference_reward.hpp"
#include "landerlab/primitive_engine.hpp"
#include "landerlab/serialization.hpp"
#include "landerlab/session_store.hpp"

namespace landerlab {

// ---------------------------------------------------------------------------
// Configuration

struct RefineConfig {
  // Each round trains discriminator and primitive, runs the primitive, and
  // lets the oracle label frames from those episodes for the next round.
  // The round whose primitive stays in the predicate longest is kept.
  int min_rounds = 2;
  int max_rounds = 6;
  int episodes = 20;
  int labels_per_class = 100;
  // Stop once the discriminator agrees with the oracle on this fraction of
  // the primitive's own frames.
  double agreement = 0.9;
};

struct PipelineConfig {
  EnvConfig env;
  OraclePredicates predicates;
  OracleContext oracle;
  int horizon = 15;
  // random episodes are flown in batches of pool_episodes until the
  // stabilize predicate has labels_per_class positive frames
  int pool_episodes = 50;
  int max_pool_episodes = 500;
  int labels_per_class = 200;
  // floor on the input scale of the discriminator normalizers
  double min_input_scale = 0.3;
  DiscriminatorConfig discriminator;
  PPOConfig primitive_ppo = [] {
    PPOConfig c;
    c.absorbing_terminal = true;
    return c;
  }();
  RefineConfig refine;
  int curriculum_episodes = 50;
  int max_curriculum_episodes = 200;
  int demo_sessions = 8;
  RewardModelConfig reward = [] {
    RewardModelConfig c;
    c.pad_terminal = true;
    c.min_input_scale = 0.3;
    return c;
  }();
  PPOConfig final_ppo = [] {
    PPOConfig c;
    c.total_steps = 1000000;
    c.absorbing_terminal = true;
    return c;
  }();
  int eval_episodes = 100;

  // DRLHP baseline
  int drlhp_rounds = 8;
  int drlhp_episodes_per_round = 10;
  // DAgger baseline
  int dagger_iterations = 5;
  std::vector<int> selector_hidden = {64, 64};
  int selector_steps = 2000;
  int selector_batch = 64;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(EnvConfig, dt, gravity, main_accel, side_angular_accel,
                                                side_lateral_accel, drag, thrust_noise, leg_half_span,
                                                contact_tolerance, max_steps, crash_speed, crash_angle, bound_x,
                                                bound_y, pad_half_width, success_speed, success_angle, init_y,
                                                init_x, init_vx, init_vy_min, init_theta, init_omega)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PPOConfig, steps_per_update, minibatch_size, epochs, clip_eps, gamma,
                                                lambda, entropy_coef, value_coef, lr, max_grad_norm, total_steps,
                                                seed, hidden, absorbing_terminal, return_window)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(OraclePredicates, stabilize_theta, stabilize_omega, stabilize_speed,
                                                stabilize_speed_floor, stabilize_speed_slope, stabilize_descent_fraction, drift_vx)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(OracleScore, pad_distance, lead_time, altitude, speed, safe_speed,
                                                safe_speed_slope, angle, drop_bonus, drop_altitude, landing_bonus, crash_penalty,
                                                pad_half_width)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(OracleContext, drop_primitive_id, score)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DiscriminatorConfig, hidden, steps, batch_size, lr, holdout_fraction,
                                                seed, min_per_class)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(RewardModelConfig, hidden, steps, batch_size, lr, holdout_fraction,
                                                seed, min_comparisons, pad_terminal, horizon,
                                                min_input_scale)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(RefineConfig, min_rounds, max_rounds, episodes, labels_per_class,
                                                agreement)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PipelineConfig, env, predicates, oracle, horizon, pool_episodes, max_pool_episodes,
                                                labels_per_class, min_input_scale, discriminator, primitive_ppo, refine,
                                                curriculum_episodes, max_curriculum_episodes, demo_sessions, reward,
                                                final_ppo, eval_episodes, drlhp_rounds, drlhp_episodes_per_round,
                                                dagger_iterations, selector_hidden, selector_steps, selector_batch)

// ---------------------------------------------------------------------------
// Report

struct StageReport {
  std::string name;
  std::int64_t duration_ms = 0;
  std::vector<std::string> artifacts;
  Json metrics = Json::object();
};

struct PipelineReport {
  std::string kind;  // pipeline | drlhp | dagger
  std::uint64_t seed = 0;
  bool ok = true;
  std::string failed_stage;
  std::string error_code;
  std::string error;
  std::vector<StageReport> stages;
  Json thresholds = Json::object();
  std::string policy_id;
  // feedback units spent
  int comparisons = 0;
  int labels = 0;
  int choices = 0;
  double success_rate = 0;
  double ground_rate = 0;
  double mean_terminal_altitude = 0;
  std::vector<double> curve;

  const StageReport* stage(const std::string& name) const {
    for (const auto& s : stages)
      if (s.name == name) return &s;
    return nullptr;
  }
};

inline void to_json(Json& j, const StageReport& s) {
  j = {{"name", s.name}, {"duration_ms", s.duration_ms}, {"artifacts", s.artifacts}, {"metrics", s.metrics}};
}
inline void from_json(const Json& j, StageReport& s) {
  s.name = j.at("name").get<std::string>();
  s.duration_ms = j.at("duration_ms").get<std::int64_t>();
  s.artifacts = j.at("artifacts").get<std::vector<std::string>>();
  s.metrics = j.at("metrics");
}

inline void to_json(Json& j, const PipelineReport& r) {
  j = {{"kind", r.kind},
       {"seed", r.seed},
       {"ok", r.ok},
       {"failed_stage", r.failed_stage},
       {"error_code", r.error_code},
       {"error", r.error},
       {"stages", r.stages},
       {"thresholds", r.thresholds},
       {"policy_id", r.policy_id},
       {"budget", {{"comparisons", r.comparisons}, {"labels", r.labels}, {"choices", r.choices}}},
       {"eval",
        {{"success_rate", r.success_rate},
         {"ground_rate", r.ground_rate},
         {"mean_terminal_altitude", r.mean_terminal_altitude},
         {"curve", r.curve}}}};
}
inline void from_json(const Json& j, PipelineReport& r) {
  r.kind = j.at("kind").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.ok = j.at("ok").get<bool>();
  r.failed_stage = j.at("failed_stage").get<std::string>();
  r.error_code = j.at("error_code").get<std::string>();
  r.error = j.at("error").get<std::string>();
  r.stages = j.at("stages").get<std::vector<StageReport>>();
  r.thresholds = j.at("thresholds");
  r.policy_id = j.at("policy_id").get<std::string>();
  const Json& b = j.at("budget");
  r.comparisons = b.at("comparisons").get<int>();
  r.labels = b.at("labels").get<int>();
  r.choices = b.at("choices").get<int>();
  const Json& e = j.at("eval");
  r.success_rate = e.at("success_rate").get<double>();
  r.ground_rate = e.at("ground_rate").get<double>();
  r.mean_terminal_altitude = e.at("mean_terminal_altitude").get<double>();
  r.curve = e.at("curve").get<std::vector<double>>();
}

// Progress sink shared by all drivers. Events carry the stage name and a
// cumulative env-step count so that a job's stream is monotone even though
// it trains several policies.
using PipelineProgress = std::function<void(const Json&)>;

// ---------------------------------------------------------------------------
// Controllers over stored artifacts

// Picks a primitive with the selector network every `horizon` steps and
// follows it until the next decision.
class SelectorController : public Controller {
 public:
  SelectorController(Selector s, std::vector<Primitive> prims, int horizon)
      : sel_(std::move(s)), prims_(std::move(prims)), horizon_(horizon) {}

  void begin_episode(std::uint64_t seed) override {
    rng_ = SplitMix64{mix64(seed)};
    t_ = 0;
  }
  int act(const Observation& o) override {
    if (t_ % horizon_ == 0) current_ = choose(o);
    ++t_;
    return prims_[static_cast<std::size_t>(current_)].act(o, rng_);
  }
  int choose(const Observation& o) const {
    const Eigen::RowVectorXd p = forward(sel_.net, sel_.normalizer.apply(to_row(o))).row(0);
    Eigen::Index best = 0;
    p.maxCoeff(&best);
    return static_cast<int>(best);
  }

 private:
  Selector sel_;
  std::vector<Primitive> prims_;
  int horizon_;
  SplitMix64 rng_{};
  int t_ = 0;
  int current_ = 0;
};

inline std::unique_ptr<Controller> make_controller(const Store& store, const PrimitiveEngine& engine,
                                                   const std::string& id, int horizon = 15) {
  const Registry r = store.registry();
  if (const auto it = r.policies.find(id); it != r.policies.end())
    return std::make_unique<PolicyController>(it->second.policy);
  if (const auto it = r.selectors.find(id); it != r.selectors.end()) {
    std::vector<Primitive> prims;
    for (const auto& pid : it->second.primitive_ids) prims.push_back(engine.primitive(pid));
    return std::make_unique<SelectorController>(it->second, std::move(prims), horizon);
  }
  if (id == "random" || r.primitives.count(id)) return std::make_unique<PrimitiveController>(engine.primitive(id));
  throw Error(ErrorCode::not_found, "no policy, selector or primitive named " + id);
}

// Runs and stores `n` evaluation episodes of a stored policy.
inline EvalResult evaluate_stored(Store& store, const PrimitiveEngine& engine, const std::string& id, int n,
                                  std::uint64_t seed) {
  auto ctl = make_controller(store, engine, id);
  EvalResult r = evaluate(engine.config().env, *ctl, n, seed, id);
  for (auto& ep : r.episodes) ep.id = store.append_episode(ep);
  return r;
}

// Window-10 success curve over every stored evaluation episode of `id`, in
// storage order. Both the HTTP endpoint and the CLI export use this.
inline std::vector<double> stored_curve(const Store& store, const std::string& id) {
  EpisodeFilter f;
  f.origin = OriginKind::eval;
  f.source = id;
  std::vector<bool> flags;
  for (const auto& s : store.query_episodes(f)) flags.push_back(s.success);
  if (flags.empty()) throw Error(ErrorCode::not_found, "no evaluation episodes for " + id);
  return window_curve(flags);
}

inline std::string curve_csv(const std::vector<double>& curve, int window = 10) {
  std::ostringstream out;
  out << "episode,window_rate\n";
  char buf[64];
  for (std::size_t i = 0; i < curve.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.1f\n", i + static_cast<std::size_t>(window), curve[i]);
    out << buf;
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Pipeline building blocks

namespace detail {

class StageRunner {
 public:
  StageRunner(PipelineReport& report, PipelineProgress progress) : report_(report), progress_(std::move(progress)) {}

  template <class Fn>
  void operator()(const std::string& name, Fn&& fn) {
    StageReport s;
    s.name = name;
    emit({{"event", "stage_started"}, {"stage", name}});
    const auto t0 = std::chrono::steady_clock::now();
    current_ = name;
    fn(s);
    s.duration_ms =
        std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - t0).count();
    report_.stages.push_back(std::move(s));
    emit({{"event", "stage_done"}, {"stage", name}});
  }

  // PPO progress re-based onto the job-wide step count.
  ProgressCallback ppo_progress() {
    const long base = steps_;
    return [this, base](const ProgressEvent& e) {
      steps_ = base + e.env_steps;
      emit({{"event", "progress"},
            {"stage", current_},
            {"env_steps", steps_},
            {"mean_return", e.mean_return},
            {"success_rate", e.success_rate},
            {"entropy", e.entropy}});
    };
  }

  void emit(Json j) const {
    if (progress_) progress_(j);
  }
  const std::string& current() const { return current_; }

 private:
  PipelineReport& report_;
  PipelineProgress progress_;
  std::string current_;
  long steps_ = 0;
};

template <class Fn>
void run_guarded(PipelineReport& report, const StageRunner& runner, Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    report.ok = false;
    report.failed_stage = runner.current();
    report.error_code = std::string(to_string(e.code()));
    report.error = e.what();
  } catch (const std::exception& e) {
    report.ok = false;
    report.failed_stage = runner.current();
    report.error_code = "internal";
    report.error = e.what();
  }
}

inline std::vector<LabelRef> to_label_refs(const LabelSet& ls) {
  std::vector<LabelRef> out;
  for (const auto& r : ls.positive_refs) out.push_back({r.episode_id, r.frame, true});
  for (const auto& r : ls.negative_refs) out.push_back({r.episode_id, r.frame, false});
  return out;
}

inline std::vector<Observation> all_frames(const std::vector<EpisodeRecord>& eps) {
  std::vector<Observation> out;
  for (const auto& e : eps) out.insert(out.end(), e.frames.begin(), e.frames.end());
  return out;
}

inline std::vector<EpisodeRecord> load(const Store& store, const std::vector<std::string>& ids) {
  std::vector<EpisodeRecord> out;
  for (const auto& id : ids) out.push_back(store.episode(id));
  return out;
}

}  // namespace detail

// Trains a goal-policy primitive on a stored discriminator and registers it.
inline Primitive train_goal_primitive(Store& store, PrimitiveEngine& engine, const std::string& discriminator,
                                      const std::string& primitive_id, const PPOConfig& ppo, int horizon,
                                      const ProgressCallback& progress = {}) {
  const Discriminator d = store.with_registry([&](const Registry& r) {
    const auto it = r.discriminators.find(discriminator);
    if (it == r.discriminators.end()) throw Error(ErrorCode::not_found, "no discriminator " + discriminator);
    return it->second;
  });
  Primitive p;
  p.id = primitive_id;
  p.display_name = primitive_id;
  p.kind = PrimitiveKind::goal_policy;
  p.policy = train_policy(engine.config().env, as_reward(d), ppo, progress);
  p.horizon = horizon;
  p.provenance = {discriminator};
  engine.register_primitive(p);
  return p;
}

struct GoalStageResult {
  Discriminator discriminator;
  Policy policy;
  Json rounds = Json::array();
  int best_round = 0;
  int labels = 0;
};

// Discriminator + primitive for one oracle predicate, with refinement rounds
// over the primitive's own experience. Registers nothing but label sets and
// the discriminator; the caller registers the primitive.
inline GoalStageResult oracle_goal_stage(Store& store, const PipelineConfig& cfg,
                                         const std::string& name, const std::vector<std::string>& pool_ids,
                                         std::uint64_t seed, detail::StageRunner& runner) {
  const auto predicate = cfg.predicates.by_name(name);
  const std::vector<EpisodeRecord> pool = detail::load(store, pool_ids);
  GoalStageResult out;
  const LabelSet initial =
      oracle_label(name, predicate, pool, cfg.labels_per_class, cfg.labels_per_class, derive_seed(seed, fnv1a(name)));
  store.add_labels(name, detail::to_label_refs(initial));
  out.labels += cfg.labels_per_class * 2;

  DiscriminatorConfig dc = cfg.discriminator;
  dc.normalizer = Normalizer::fit(detail::all_frames(pool), cfg.min_input_scale);
  double best_in_band = -1;
  for (int round = 0;; ++round) {
    dc.seed = derive_seed(seed, fnv1a(name), 0xD15C, static_cast<std::uint64_t>(round));
    const LabelSet ls = store.registry().label_sets.at(name);
    Discriminator d = train_discriminator(ls, dc);
    d.label_set = name;

    PPOConfig pc = cfg.primitive_ppo;
    pc.seed = derive_seed(seed, fnv1a(name), 0x990, static_cast<std::uint64_t>(round));
    Policy policy = train_policy(cfg.env, as_reward(d), pc, runner.ppo_progress());

    // the oracle watches the primitive fly
    PolicyController ctl(policy);
    std::vector<EpisodeRecord> fresh;
    for (int i = 0; i < cfg.refine.episodes; ++i) {
      EpisodeRecord ep = run_episode(cfg.env, ctl, derive_seed(seed, fnv1a(name), 0x2EF1, round * 1000 + i));
      ep.origin = {OriginKind::free_run, name, "refine"};
      ep.id = store.append_episode(ep);
      fresh.push_back(std::move(ep));
    }
    int agree = 0, frames = 0, positives = 0;
    for (const auto& e : fresh)
      for (const auto& f : e.frames) {
        const bool truth = predicate(f);
        positives += truth ? 1 : 0;
        agree += truth == (classify(d, f) > 0.5) ? 1 : 0;
        ++frames;
      }
    const double agreement = frames ? static_cast<double>(agree) / frames : 1.0;
    const double in_band = frames ? static_cast<double>(positives) / frames : 0.0;
    out.rounds.push_back({{"round", round},
                          {"labels", ls.positives.size() + ls.negatives.size()},
                          {"heldout_accuracy", d.heldout_accuracy},
                          {"agreement", agreement},
                          {"in_band", in_band}});
    // keep the round whose primitive spent the most time satisfying the predicate
    if (in_band > best_in_band) {
      best_in_band = in_band;
      out.discriminator = d;
      out.policy = std::move(policy);
      out.best_round = round;
    }
    if (round + 1 >= cfg.refine.max_rounds) break;
    if (round + 1 >= cfg.refine.min_rounds && agreement >= cfg.refine.agreement) break;
    // and corrects the discriminator where it disagrees
    const int n_neg = std::min(cfg.refine.labels_per_class, frames - positives);
    const int n_pos = std::min(cfg.refine.labels_per_class, positives);
    if (n_pos <= 0 || n_neg <= 0) break;
    const LabelSet more =
        oracle_label(name, predicate, fresh, n_pos, n_neg, derive_seed(seed, fnv1a(name), 0x1AB, round));
    store.add_labels(name, detail::to_label_refs(more));
    out.labels += n_pos + n_neg;
  }
  store.put_discriminator(name, out.discriminator);
  return out;
}

inline Primitive register_goal_primitive(PrimitiveEngine& engine, const std::string& name, const Policy& policy,
                                         int horizon) {
  Primitive p;
  p.id = name;
  p.display_name = name;
  p.kind = PrimitiveKind::goal_policy;
  p.policy = policy;
  p.horizon = horizon;
  p.provenance = {name};
  engine.register_primitive(p);
  return p;
}

// Drives one demonstration session to its end with the oracle chooser.
inline DemoSession oracle_session(PrimitiveEngine& engine, const std::string& task, const std::vector<std::string>& prims,
                                  std::uint64_t seed, const OracleContext& ctx) {
  DemoSession s = engine.start_session(task, prims, seed);
  while (s.status == SessionStatus::active) s = engine.apply_choice(s.id, oracle_choose(engine.propose_branches(s.id), ctx));
  return s;
}

inline const std::vector<std::string>& pipeline_primitives() {
  static const std::vector<std::string> ids = {"stabilize", "drift_left", "drift_right", "drop"};
  return ids;
}

inline Json thresholds_json(const PipelineConfig& cfg) {
  return {{"predicates", cfg.predicates}, {"oracle", cfg.oracle}, {"refine", cfg.refine}};
}

inline void fill_eval(PipelineReport& report, const EvalResult& ev) {
  report.success_rate = ev.success_rate;
  report.ground_rate = ev.ground_rate;
  report.mean_terminal_altitude = ev.mean_terminal_altitude;
  report.curve = ev.curve;
}

inline std::vector<std::string> collect_random_pool(Store& store, PrimitiveEngine& engine, const PipelineConfig& cfg,
                                                   std::uint64_t seed) {
  const auto predicate = cfg.predicates.by_name("stabilize");
  std::vector<std::string> pool;
  int positives = 0;
  for (std::uint64_t batch = 0; pool.empty() || positives < cfg.labels_per_class; ++batch) {
    if (static_cast<int>(pool.size()) >= cfg.max_pool_episodes)
      throw Error(ErrorCode::precondition_failed, "random pool holds only " + std::to_string(positives) +
                                                      " stabilize frames after " + std::to_string(pool.size()) +
                                                      " episodes");
    const auto ids = engine.run_free_episodes(
        "random", cfg.pool_episodes, batch == 0 ? derive_seed(seed, 0x9001) : derive_seed(seed, 0x9001, batch), "pool");
    for (const auto& e : detail::load(store, ids))
      for (const auto& f : e.frames) positives += predicate(f) ? 1 : 0;
    pool.insert(pool.end(), ids.begin(), ids.end());
  }
  return pool;
}

// ---------------------------------------------------------------------------
// The four-iteration pipeline

inline PipelineReport run_pipeline(Store& store, const PipelineConfig& cfg, std::uint64_t seed,
                                   const PipelineProgress& progress = {}) {
  PipelineReport report;
  report.kind = "pipeline";
  report.seed = seed;
  report.thresholds = thresholds_json(cfg);
  detail::StageRunner stage(report, progress);
  PrimitiveEngine engine(store, {cfg.env, 1});

  detail::run_guarded(report, stage, [&] {
    if (store.episode_count() != 0 || !store.registry().empty())
      throw Error(ErrorCode::precondition_failed, "the pipeline needs a fresh run directory");

    std::vector<std::string> pool;
    stage("random_pool", [&](StageReport& s) {
      pool = collect_random_pool(store, engine, cfg, seed);
      s.artifacts = pool;
      s.metrics["episodes"] = pool.size();
    });

    std::map<std::string, Policy> policies;
    const auto goal_stage = [&](const std::string& name, const std::vector<std::string>& source) {
      stage("goal:" + name, [&](StageReport& s) {
        GoalStageResult g = oracle_goal_stage(store, cfg, name, source, seed, stage);
        register_goal_primitive(engine, name, g.policy, cfg.horizon);
        report.labels += g.labels;
        s.artifacts = {"label_set:" + name, "discriminator:" + name, "primitive:" + name};
        s.metrics["rounds"] = g.rounds;
        s.metrics["best_round"] = g.best_round;
        s.metrics["labels"] = g.labels;
      });
    };
    goal_stage("stabilize", pool);
    goal_stage("drop", pool);

    std::vector<std::string> curriculum;
    stage("curriculum_episodes", [&](StageReport& s) {
      // keep flying the stabilize primitive until both drift directions
      // have enough examples
      const auto enough = [&] {
        const auto eps = detail::load(store, curriculum);
        for (const char* name : {"drift_left", "drift_right"}) {
          const auto pred = cfg.predicates.by_name(name);
          int n = 0;
          for (const auto& e : eps)
            for (const auto& f : e.frames) n += pred(f) ? 1 : 0;
          if (n < cfg.labels_per_class) return false;
        }
        return true;
      };
      std::uint64_t batch = 0;
      while (curriculum.empty() || !enough()) {
        if (static_cast<int>(curriculum.size()) >= cfg.max_curriculum_episodes)
          throw Error(ErrorCode::precondition_failed, "stabilize episodes never drift enough to label both directions");
        const auto ids = engine.run_free_episodes("stabilize", cfg.curriculum_episodes, derive_seed(seed, 0xC022, batch++),
                                                  "curriculum");
        curriculum.insert(curriculum.end(), ids.begin(), ids.end());
      }
      s.artifacts = curriculum;
      s.metrics["episodes"] = curriculum.size();
    });
    std::vector<std::string> drift_pool = pool;
    drift_pool.insert(drift_pool.end(), curriculum.begin(), curriculum.end());
    goal_stage("drift_left", drift_pool);
    goal_stage("drift_right", drift_pool);

    std::vector<DemoSession> sessions;
    stage("demonstrations", [&](StageReport& s) {
      for (int i = 0; i < cfg.demo_sessions; ++i) {
        DemoSession d = oracle_session(engine, "land", pipeline_primitives(), derive_seed(seed, 0xDE30, i), cfg.oracle);
        report.choices += d.chosen_steps();
        s.artifacts.push_back(d.id);
        const EpisodeRecord ep = store.episode(d.episode_id);
        s.metrics["success"].push_back(ep.success);
        s.metrics["steps"].push_back(d.chosen_steps());
        sessions.push_back(std::move(d));
      }
    });

    std::vector<Comparison> comparisons;
    stage("comparisons", [&](StageReport& s) {
      comparisons = extract_comparisons(sessions);
      report.comparisons = static_cast<int>(comparisons.size());
      s.metrics["count"] = comparisons.size();
    });

    RewardModel rm;
    stage("reward_model", [&](StageReport& s) {
      RewardModelConfig rc = cfg.reward;
      rc.seed = derive_seed(seed, 0x2E3A);
      rm = train_reward_model(comparisons, rc, "land");
      std::vector<ComparisonRef> refs;
      for (const auto& c : comparisons) refs.push_back(c.ref);
      store.put_reward_model("land", {rm, refs});
      s.artifacts = {"reward_model:land"};
      s.metrics["heldout_accuracy"] = rm.heldout_accuracy;
      s.metrics["used"] = rm.comparisons_used;
      s.metrics["dropped"] = rm.comparisons_dropped;
    });

    stage("final_policy", [&](StageReport& s) {
      PPOConfig pc = cfg.final_ppo;
      pc.seed = derive_seed(seed, 0xF1A1);
      const Policy p = train_policy(cfg.env, as_reward(rm), pc, stage.ppo_progress());
      store.put_policy("final", {"final", p, {"reward_model:land"}});
      report.policy_id = "final";
      s.artifacts = {"policy:final"};
    });

    stage("evaluation", [&](StageReport& s) {
      const EvalResult ev = evaluate_stored(store, engine, "final", cfg.eval_episodes, derive_seed(seed, 0xE7A1));
      fill_eval(report, ev);
      s.metrics["success_rate"] = ev.success_rate;
      s.metrics["ground_rate"] = ev.ground_rate;
    });
  });
  return report;
}

// ---------------------------------------------------------------------------
// DRLHP baseline: preferences over random segment pairs from recent experience

inline Rollout segment_of(const EpisodeRecord& ep, std::size_t start, int length) {
  Rollout r;
  r.primitive_id = "segment";
  for (int k = 0; k < length; ++k) {
    const std::size_t t = start + static_cast<std::size_t>(k);
    const bool last = t + 1 == ep.actions.size();
    r.steps.push_back({ep.frames[t + 1], ep.actions[t], last && ep.terminal != TerminalKind::none});
  }
  if (start + static_cast<std::size_t>(length) == ep.actions.size()) {
    r.final_state.terminal = ep.terminal;
    r.final_state.success = ep.success;
  }
  return r;
}

inline PipelineReport run_drlhp_baseline(Store& store, const PipelineConfig& cfg, std::uint64_t seed, int budget,
                                         const PipelineProgress& progress = {}) {
  PipelineReport report;
  report.kind = "drlhp";
  report.seed = seed;
  report.thresholds = thresholds_json(cfg);
  detail::StageRunner stage(report, progress);
  PrimitiveEngine engine(store, {cfg.env, 1});

  detail::run_guarded(report, stage, [&] {
    if (budget < 0) throw Error(ErrorCode::invalid_argument, "negative comparison budget");
    const int rounds = std::max(1, cfg.drlhp_rounds);
    std::mt19937_64 rng(derive_seed(seed, 0xD21F));
    std::vector<Comparison> comparisons;
    Policy policy = init_policy(cfg.final_ppo.hidden, derive_seed(seed, 0xF1A1));
    RewardModel rm = zero_reward_model("drlhp", cfg.reward.hidden);
    for (int r = 0; r < rounds; ++r) {
      stage("round:" + std::to_string(r), [&](StageReport& s) {
        // recent experience of the current policy
        PolicyController ctl(policy);
        std::vector<EpisodeRecord> recent;
        for (int i = 0; i < cfg.drlhp_episodes_per_round; ++i) {
          EpisodeRecord ep = run_episode(cfg.env, ctl, derive_seed(seed, 0xD2E0, r * 1000 + i));
          if (static_cast<int>(ep.actions.size()) >= cfg.horizon) recent.push_back(std::move(ep));
        }
        const int quota = budget / rounds + (r < budget % rounds ? 1 : 0);
        for (int q = 0; q < quota && !recent.empty(); ++q) {
          const auto pick = [&] {
            const EpisodeRecord& ep = recent[rng() % recent.size()];
            const std::size_t span = ep.actions.size() - static_cast<std::size_t>(cfg.horizon) + 1;
            return segment_of(ep, rng() % span, cfg.horizon);
          };
          Rollout a = pick(), b = pick();
          const int winner = oracle_choose({a, b}, cfg.oracle);
          Comparison c;
          c.ref = {"drlhp", static_cast<int>(comparisons.size()), winner, 1 - winner};
          c.preferred = winner == 0 ? a : b;
          c.rejected = winner == 0 ? b : a;
          comparisons.push_back(std::move(c));
        }
        report.comparisons = static_cast<int>(comparisons.size());
        if (static_cast<int>(comparisons.size()) >= cfg.reward.min_comparisons) {
          RewardModelConfig rc = cfg.reward;
          rc.seed = derive_seed(seed, 0x2E3A, r);
          rm = train_reward_model(comparisons, rc, "drlhp");
          s.metrics["heldout_accuracy"] = rm.heldout_accuracy;
        }
        PPOConfig pc = cfg.final_ppo;
        pc.seed = derive_seed(seed, 0xF1A1, r);
        pc.total_steps = cfg.final_ppo.total_steps / rounds;
        const TrainResult tr = train_policy_detailed(cfg.env, as_reward(rm), pc, stage.ppo_progress(), policy);
        policy = r + 1 == rounds ? tr.policy : tr.last;
        s.metrics["comparisons"] = comparisons.size();
      });
    }
    stage("final_policy", [&](StageReport& s) {
      store.put_policy("drlhp", {"drlhp", policy, {}});
      report.policy_id = "drlhp";
      s.artifacts = {"policy:drlhp"};
    });
    stage("evaluation", [&](StageReport& s) {
      const EvalResult ev = evaluate_stored(store, engine, "drlhp", cfg.eval_episodes, derive_seed(seed, 0xE7A1));
      fill_eval(report, ev);
      s.metrics["success_rate"] = ev.success_rate;
      s.metrics["mean_terminal_altitude"] = ev.mean_terminal_altitude;
    });
    if (report.comparisons != budget && budget > 0)
      throw Error(ErrorCode::precondition_failed, "comparison budget not matched: used " +
                                                      std::to_string(report.comparisons) + " of " +
                                                      std::to_string(budget));
  });
  return report;
}

// ---------------------------------------------------------------------------
// DAgger baseline in primitive-action space

inline Selector train_selector(const std::vector<Observation>& x, const std::vector<int>& y,
                               const std::vector<std::string>& primitive_ids, const PipelineConfig& cfg,
                               std::uint64_t seed) {
  if (x.empty()) throw Error(ErrorCode::precondition_failed, "no expert labels to imitate");
  std::vector<int> sizes = {static_cast<int>(kObsDim)};
  sizes.insert(sizes.end(), cfg.selector_hidden.begin(), cfg.selector_hidden.end());
  sizes.push_back(static_cast<int>(primitive_ids.size()));
  Selector s;
  s.primitive_ids = primitive_ids;
  s.normalizer = Normalizer::fit(x);
  s.net = init_params(NetSpec{sizes, OutputHead::softmax}, seed);
  const Matrix inputs = s.normalizer.apply(to_matrix(x));
  std::mt19937_64 rng(mix64(seed));
  const int n = static_cast<int>(x.size());
  const int bs = std::min(cfg.selector_batch, n);
  const AdamConfig adam{};
  for (int step = 1; step <= cfg.selector_steps; ++step) {
    Matrix xb(bs, static_cast<Eigen::Index>(kObsDim));
    Loss loss{LossKind::softmax_nll, Matrix(bs, 1), {}, {}};
    for (int i = 0; i < bs; ++i) {
      const auto k = static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(n));
      xb.row(i) = inputs.row(k);
      loss.targets(i, 0) = y[static_cast<std::size_t>(k)];
    }
    s.net = adam_step(std::move(s.net), backward(s.net, xb, loss), adam, step);
  }
  return s;
}

inline PipelineReport run_dagger_baseline(Store& store, const PipelineConfig& cfg, std::uint64_t seed, int budget,
                                          const PipelineProgress& progress = {}) {
  PipelineReport report;
  report.kind = "dagger";
  report.seed = seed;
  report.thresholds = thresholds_json(cfg);
  detail::StageRunner stage(report, progress);
  PrimitiveEngine engine(store, {cfg.env, 1});

  detail::run_guarded(report, stage, [&] {
    const std::vector<std::string>& ids = pipeline_primitives();
    std::vector<Primitive> prims;
    for (const auto& id : ids) prims.push_back(engine.primitive(id));
    if (budget <= 0) throw Error(ErrorCode::invalid_argument, "DAgger needs a positive query budget");
    const int iterations = std::max(1, cfg.dagger_iterations);

    std::vector<Observation> xs;
    std::vector<int> ys;
    std::optional<Selector> selector;
    int episode = 0;
    for (int it = 0; it < iterations; ++it) {
      stage("iteration:" + std::to_string(it), [&](StageReport& s) {
        const int quota = budget / iterations + (it < budget % iterations ? 1 : 0);
        int asked = 0;
        while (asked < quota) {
          // iteration 0 follows the expert; later ones follow the learner
          const std::uint64_t ep_seed = derive_seed(seed, 0xDA66, static_cast<std::uint64_t>(episode++));
          LanderEnv env(cfg.env);
          env.reset(ep_seed);
          for (std::size_t step = 0; !env.terminal() && asked < quota; ++step) {
            const LanderState st = env.snapshot();
            std::vector<Rollout> branches;
            for (const auto& p : prims) branches.push_back(simulate_rollout(cfg.env, st, p, branch_seed(ep_seed, step, p.id)));
            const int expert = oracle_choose(branches, cfg.oracle);
            xs.push_back(observe(st));
            ys.push_back(expert);
            ++asked;
            int follow = expert;
            if (selector) {
              SelectorController probe(*selector, prims, cfg.horizon);
              follow = probe.choose(observe(st));
            }
            env.restore(branches[static_cast<std::size_t>(follow)].final_state);
          }
        }
        report.choices += asked;
        selector = train_selector(xs, ys, ids, cfg, derive_seed(seed, 0x5E1, it));
        s.metrics["dataset"] = xs.size();
      });
    }
    stage("final_policy", [&](StageReport& s) {
      store.put_selector("dagger", *selector);
      report.policy_id = "dagger";
      s.artifacts = {"selector:dagger"};
    });
    stage("evaluation", [&](StageReport& s) {
      const EvalResult ev = evaluate_stored(store, engine, "dagger", cfg.eval_episodes, derive_seed(seed, 0xE7A1));
      fill_eval(report, ev);
      s.metrics["success_rate"] = ev.success_rate;
      s.metrics["ground_rate"] = ev.ground_rate;
    });
  });
  return report;
}

}  // namespace landerlab
