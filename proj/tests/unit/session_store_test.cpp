#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "landerlab/primitive_engine.hpp"
#include "landerlab/serialization.hpp"
#include "landerlab/session_store.hpp"

using namespace landerlab;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    static int n = 0;
    path_ = fs::temp_directory_path() / ("landerlab-store-" + std::to_string(::getpid()) + "-" + std::to_string(n++));
    fs::remove_all(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

EpisodeRecord random_episode(std::uint64_t seed) {
  PrimitiveController ctl(random_primitive());
  return run_episode(EnvConfig{}, ctl, seed);
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

Primitive goal_primitive(const std::string& id, const std::string& discriminator, std::uint64_t seed) {
  Primitive p;
  p.id = id;
  p.display_name = id;
  p.kind = PrimitiveKind::goal_policy;
  p.policy = init_policy({8}, seed);
  p.provenance = {discriminator};
  return p;
}

// Fills a store with one of everything that references something else.
void populate(Store& store) {
  const std::string a = store.append_episode(random_episode(1));
  store.append_episode(random_episode(2));
  store.add_labels("stabilize", {{a, 0, true}, {a, 3, false}, {a, 5, false}});
  Discriminator d = zero_discriminator("stabilize", {4});
  d.label_set = "stabilize";
  store.put_discriminator("stabilize", d);
  PrimitiveEngine engine(store);
  engine.register_primitive(goal_primitive("stab", "stabilize", 3));
  DemoSession s = engine.start_session("land", {"random", "stab"}, 7);
  s = engine.apply_choice(s.id, 1);
  engine.end_session(s.id);
  StoredRewardModel rm{zero_reward_model("land", {4}), {{s.id, 0, 1, 0}}};
  store.put_reward_model("land", rm);
  store.put_policy("final", {"final", init_policy({8}, 4), {"reward_model:land"}});
  Selector sel{init_params(NetSpec{{static_cast<int>(kObsDim), 4, 2}, OutputHead::softmax}, 1), {}, {"random", "stab"}};
  store.put_selector("dagger", sel);
}

}  // namespace

TEST(Serialization, Base64AndSha256KnownAnswers) {
  EXPECT_EQ(sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  for (const std::string s : {"", "f", "fo", "foo", "foob", "fooba", "foobar"}) EXPECT_EQ(base64_decode(base64_encode(s)), s);
  EXPECT_EQ(base64_encode("foobar"), "Zm9vYmFy");
  EXPECT_EQ(base64_encode("fo"), "Zm8=");
  EXPECT_THROW(base64_decode("Zm9=v"), Error);
}

TEST(Serialization, ParamsBlobRoundTripIsBitExact) {
  Params p = init_params(NetSpec{{10, 16, 8, 4}, OutputHead::softmax}, 9);
  p.values[0] = -0.0;
  p.values[1] = 1e-310;
  p.adam_m.setConstant(0.125);
  EXPECT_EQ(params_from_blob(params_to_blob(p)), p);
  std::string blob = params_to_blob(p);
  blob.resize(blob.size() - 3);
  EXPECT_THROW(params_from_blob(blob), Error);
}

TEST(Serialization, EpisodeJsonlRoundTrip) {
  EpisodeRecord e = random_episode(5);
  e.id = "ep-x";
  e.origin = {OriginKind::free_run, "stab", "t"};
  const std::string text = episode_to_jsonl(e);
  EXPECT_EQ(episode_from_jsonl(text), e);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), static_cast<long>(e.frames.size()) + 1);
}

TEST(Serialization, SessionJsonRoundTrip) {
  Store store;
  PrimitiveEngine engine(store);
  DemoSession s = engine.start_session("t", {"random"}, 3);
  s = engine.apply_choice(s.id, 0);
  const Json j = s;
  EXPECT_EQ(j.get<DemoSession>(), s);
  EXPECT_TRUE(j["steps"].back()["chosen"].is_null());
}

TEST(Registry, EmptyOrMissingPathGivesEmptyRegistry) {
  EXPECT_TRUE(load_registry("").empty());
  EXPECT_TRUE(load_registry("/nonexistent/registry.json").empty());
}

TEST(Registry, SaveLoadSaveIsByteIdentical) {
  TempDir dir;
  std::string first;
  {
    Store store(dir.path());
    populate(store);
    first = store.registry_text();
  }
  Store reloaded(dir.path());
  EXPECT_EQ(reloaded.registry_text(), first);
  EXPECT_EQ(registry_to_string(registry_from_string(first)), first);
  EXPECT_EQ(reloaded.episode_count(), 3u);
  EXPECT_EQ(reloaded.sessions().size(), 1u);
}

TEST(Registry, TamperedContentFailsHashCheck) {
  TempDir dir;
  {
    Store store(dir.path());
    populate(store);
  }
  const fs::path file = dir.path() / "registry.json";
  Json doc = Json::parse(std::ifstream(file));
  doc["discriminators"]["stabilize"]["content"]["heldout_accuracy"] = 0.99;
  std::ofstream(file) << doc.dump(1);
  EXPECT_EQ(code_of([&] { Store s(dir.path()); }), ErrorCode::corrupt_data);
}

TEST(Store, LabelValidation) {
  Store store;
  const std::string a = store.append_episode(random_episode(1));
  EXPECT_EQ(code_of([&] { store.add_labels("s", {{"nope", 0, true}}); }), ErrorCode::not_found);
  EXPECT_EQ(code_of([&] { store.add_labels("s", {{a, 100000, true}}); }), ErrorCode::not_found);
  store.add_labels("s", {{a, 2, true}});
  // same polarity again is a no-op
  EXPECT_EQ(store.add_labels("s", {{a, 2, true}}).positives.size(), 1u);
  EXPECT_EQ(code_of([&] { store.add_labels("s", {{a, 3, false}, {a, 2, false}}); }), ErrorCode::conflict);
  // a rejected batch leaves nothing behind
  EXPECT_TRUE(store.registry().label_sets.at("s").negatives.empty());
  EXPECT_EQ(store.registry().label_sets.at("s").positives[0], store.episode(a).frames[2]);
}

TEST(Store, DanglingReferencesRejected) {
  Store store;
  Discriminator d = zero_discriminator("x", {4});
  d.label_set = "missing";
  EXPECT_EQ(code_of([&] { store.put_discriminator("x", d); }), ErrorCode::not_found);
  EXPECT_EQ(code_of([&] { store.put_reward_model("r", {zero_reward_model("r", {4}), {{"session-9", 0, 1, 0}}}); }),
            ErrorCode::not_found);
  PrimitiveEngine engine(store);
  EXPECT_EQ(code_of([&] { engine.register_primitive(goal_primitive("g", "missing", 1)); }), ErrorCode::not_found);
  EXPECT_EQ(code_of([&] { store.put_selector("s", Selector{init_params(NetSpec{{10, 4, 1}, OutputHead::softmax}, 1), {}, {"g"}}); }),
            ErrorCode::not_found);
  EXPECT_TRUE(store.registry().empty());
}

TEST(Store, QueryFiltersAndLimit) {
  Store store;
  PrimitiveEngine engine(store);
  engine.run_free_episodes("random", 6, 11, "pool");
  EpisodeRecord e = random_episode(3);
  e.origin = {OriginKind::eval, "final", "eval"};
  store.append_episode(e);
  EXPECT_EQ(store.query_episodes().size(), 7u);
  EXPECT_EQ(store.query_episodes({.origin = OriginKind::random}).size(), 6u);
  EXPECT_EQ(store.query_episodes({.tag = "eval"}).size(), 1u);
  EXPECT_EQ(store.query_episodes({.source = "random", .limit = 2}).size(), 2u);
  const auto all = store.query_episodes();
  EXPECT_EQ(all.front().id, "ep-000001");
  EXPECT_EQ(all.back().origin.kind, OriginKind::eval);
  EXPECT_EQ(code_of([&] { store.append_episode(store.episode("ep-000001")); }), ErrorCode::conflict);
}

TEST(Engine, BranchesPerPrimitiveAndCached) {
  Store store;
  populate(store);
  PrimitiveEngine engine(store);
  DemoSession s = engine.start_session("t", {"random", "stab", "random"}, 21);
  const auto b1 = engine.propose_branches(s.id);
  ASSERT_EQ(b1.size(), 3u);
  EXPECT_EQ(engine.propose_branches(s.id), b1);
  EXPECT_EQ(b1[0], b1[2]);  // same primitive, same step, same seed
  for (std::size_t i = 0; i < b1.size(); ++i) EXPECT_EQ(engine.replay_branch(s, 0, i), b1[i]);
  EXPECT_EQ(code_of([&] { engine.start_session("t", {"random"}, 1); }), ErrorCode::conflict);
  EXPECT_EQ(code_of([&] { engine.apply_choice(s.id, 3); }), ErrorCode::invalid_argument);
}

TEST(Engine, ChoiceChainsAndPreviewEqualsApplied) {
  Store store;
  PrimitiveEngine engine(store);
  DemoSession s = engine.start_session("t", {"random", "random"}, 5);
  for (int i = 0; i < 5 && s.status == SessionStatus::active; ++i) {
    const auto branches = engine.propose_branches(s.id);
    s = engine.apply_choice(s.id, i % 2);
    const DemoStep& chosen = s.steps[static_cast<std::size_t>(i)];
    EXPECT_EQ(chosen.branches, branches);
    if (s.status == SessionStatus::active) {
      EXPECT_EQ(s.steps.back().state, branches[static_cast<std::size_t>(i % 2)].final_state);
    }
  }
}

TEST(Engine, EndSessionStoresConcatenatedEpisode) {
  Store store;
  PrimitiveEngine engine(store);
  DemoSession s = engine.start_session("land", {"random"}, 8);
  EXPECT_EQ(code_of([&] { engine.end_session(s.id); }), ErrorCode::precondition_failed);
  s = engine.apply_choice(s.id, 0);
  s = engine.apply_choice(s.id, 0);
  const std::string id = engine.end_session(s.id);
  const EpisodeRecord ep = store.episode(id);
  EXPECT_EQ(ep.origin.kind, OriginKind::demo);
  EXPECT_EQ(ep.origin.source, s.id);
  s = engine.session(s.id);
  EXPECT_EQ(s.status, SessionStatus::ended);
  ASSERT_EQ(s.steps.size(), 2u);
  std::size_t n = 0;
  for (const auto& st : s.steps) n += st.branches[0].steps.size();
  EXPECT_EQ(ep.actions.size(), n);
  EXPECT_EQ(ep.frames.back(), s.steps.back().branches[0].final_observation());
  EXPECT_EQ(code_of([&] { engine.end_session(s.id); }), ErrorCode::usage_error);
  EXPECT_EQ(code_of([&] { engine.apply_choice(s.id, 0); }), ErrorCode::usage_error);
}

TEST(Engine, TerminalChoiceEndsSession) {
  Store store;
  PrimitiveEngine engine(store);
  DemoSession s = engine.start_session("land", {"random"}, 2);
  int guard = 0;
  while (s.status == SessionStatus::active && guard++ < 200) s = engine.apply_choice(s.id, 0);
  ASSERT_EQ(s.status, SessionStatus::ended);
  const EpisodeRecord ep = store.episode(s.episode_id);
  EXPECT_NE(ep.terminal, TerminalKind::none);
  EXPECT_EQ(ep.terminal, s.steps.back().branches[0].final_state.terminal);
  for (const auto& st : s.steps) EXPECT_TRUE(st.chosen.has_value());
}

TEST(Engine, FreeEpisodesAreDeterministic) {
  Store a, b;
  PrimitiveEngine ea(a), eb(b);
  ea.run_free_episodes("random", 3, 42);
  eb.run_free_episodes("random", 3, 42);
  EXPECT_EQ(a.episodes(), b.episodes());
  EXPECT_EQ(code_of([&] { ea.run_free_episodes("nope", 1, 1); }), ErrorCode::not_found);
}

TEST(Engine, RegisterPrimitiveErrors) {
  Store store;
  populate(store);
  PrimitiveEngine engine(store);
  EXPECT_EQ(code_of([&] { engine.register_primitive(goal_primitive("", "stabilize", 1)); }), ErrorCode::invalid_argument);
  EXPECT_EQ(code_of([&] { engine.register_primitive(goal_primitive("random", "stabilize", 1)); }), ErrorCode::conflict);
  EXPECT_EQ(code_of([&] { engine.register_primitive(goal_primitive("stab", "stabilize", 1)); }), ErrorCode::conflict);
  Primitive nopolicy = goal_primitive("np", "stabilize", 1);
  nopolicy.policy.reset();
  EXPECT_EQ(code_of([&] { engine.register_primitive(nopolicy); }), ErrorCode::invalid_argument);
}

TEST(Engine, SessionsSurviveReload) {
  TempDir dir;
  std::string id;
  DemoSession before;
  {
    Store store(dir.path());
    PrimitiveEngine engine(store);
    before = engine.start_session("t", {"random"}, 4);
    before = engine.apply_choice(before.id, 0);
  }
  Store store(dir.path());
  PrimitiveEngine engine(store);
  EXPECT_EQ(engine.session(before.id), before);
  EXPECT_EQ(Store::session_text(engine.session(before.id)), Store::session_text(before));
  DemoSession next = engine.apply_choice(before.id, 0);
  EXPECT_EQ(next.steps.size(), before.steps.size() + (next.status == SessionStatus::active ? 1u : 0u));
}
