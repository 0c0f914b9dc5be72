#pragma once

// JSON encodings for every persisted type, the binary parameter blob, and the
// content hash used by the registry.

#include <openssl/evp.h>

#include <array>
#include <cstdint>
#include <cstring>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "landerlab/goal_discriminator.hpp"
#include "landerlab/ppo_trainer.hpp"
#include "landerlab/preference_reward.hpp"
#include "landerlab/records.hpp"

namespace landerlab {

using Json = nlohmann::json;

inline std::string sha256_hex(const std::string& data) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md.data(), &len, EVP_sha256(), nullptr) != 1)
    throw Error(ErrorCode::numerical_failure, "sha256 failed");
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 15]);
  }
  return out;
}

inline std::string base64_encode(const std::string& bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(bytes.data()), static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

inline std::string base64_decode(const std::string& text) {
  if (text.size() % 4 != 0) throw Error(ErrorCode::corrupt_data, "bad base64 length");
  std::string out(3 * text.size() / 4, '\0');
  const int n = EVP_DecodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(text.data()), static_cast<int>(text.size()));
  if (n < 0) throw Error(ErrorCode::corrupt_data, "bad base64 payload");
  std::size_t pad = 0;
  if (!text.empty() && text.back() == '=') ++pad;
  if (text.size() > 1 && text[text.size() - 2] == '=') ++pad;
  out.resize(static_cast<std::size_t>(n) - pad);
  return out;
}

// Canonical digest of a JSON value: compact dump with sorted keys.
inline std::string content_hash(const Json& j) { return sha256_hex(j.dump()); }

namespace blob {

inline void put_u32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_u64(std::string& s, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_f64(std::string& s, double d) {
  std::uint64_t v;
  std::memcpy(&v, &d, 8);
  put_u64(s, v);
}

class Reader {
 public:
  explicit Reader(const std::string& s) : s_(s) {}
  std::uint64_t u(int bytes) {
    if (pos_ + static_cast<std::size_t>(bytes) > s_.size()) throw Error(ErrorCode::corrupt_data, "truncated parameter blob");
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s_[pos_++])) << (8 * i);
    return v;
  }
  double f64() {
    const std::uint64_t v = u(8);
    double d;
    std::memcpy(&d, &v, 8);
    return d;
  }
  bool done() const { return pos_ == s_.size(); }

 private:
  const std::string& s_;
  std::size_t pos_ = 0;
};

}  // namespace blob

// Little-endian layout: "LLP1", u32 head, u32 layer count, u32 sizes...,
// u64 parameter count, then values, Adam first moments, Adam second moments
// as f64 arrays.
inline std::string params_to_blob(const Params& p) {
  std::string s = "LLP1";
  blob::put_u32(s, static_cast<std::uint32_t>(p.spec.head));
  blob::put_u32(s, static_cast<std::uint32_t>(p.spec.layer_sizes.size()));
  for (int v : p.spec.layer_sizes) blob::put_u32(s, static_cast<std::uint32_t>(v));
  blob::put_u64(s, static_cast<std::uint64_t>(p.values.size()));
  for (const Vector* v : {&p.values, &p.adam_m, &p.adam_v})
    for (Eigen::Index i = 0; i < v->size(); ++i) blob::put_f64(s, (*v)[i]);
  return s;
}

inline Params params_from_blob(const std::string& s) {
  if (s.size() < 4 || s.compare(0, 4, "LLP1") != 0) throw Error(ErrorCode::corrupt_data, "bad parameter blob magic");
  const std::string body = s.substr(4);
  blob::Reader r(body);
  Params p;
  const auto head = r.u(4);
  if (head > 2) throw Error(ErrorCode::corrupt_data, "bad output head in blob");
  p.spec.head = static_cast<OutputHead>(head);
  const auto layers = r.u(4);
  if (layers > 64) throw Error(ErrorCode::corrupt_data, "implausible layer count in blob");
  for (std::uint64_t i = 0; i < layers; ++i) p.spec.layer_sizes.push_back(static_cast<int>(r.u(4)));
  try {
    p.spec.validate();
  } catch (const Error& e) {
    throw Error(ErrorCode::corrupt_data, std::string("blob spec: ") + e.what());
  }
  const auto n = r.u(8);
  if (n != p.spec.num_params()) throw Error(ErrorCode::corrupt_data, "blob parameter count mismatch");
  for (Vector* v : {&p.values, &p.adam_m, &p.adam_v}) {
    v->resize(static_cast<Eigen::Index>(n));
    for (Eigen::Index i = 0; i < v->size(); ++i) (*v)[i] = r.f64();
  }
  if (!r.done()) throw Error(ErrorCode::corrupt_data, "trailing bytes in parameter blob");
  return p;
}

inline Json vec_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }
inline Vector json_vec(const Json& j) {
  const auto d = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(d.data(), static_cast<Eigen::Index>(d.size()));
}

inline void to_json(Json& j, const Params& p) { j = base64_encode(params_to_blob(p)); }
inline void from_json(const Json& j, Params& p) { p = params_from_blob(base64_decode(j.get<std::string>())); }

inline void to_json(Json& j, const Normalizer& n) { j = {{"mean", vec_json(n.mean)}, {"scale", vec_json(n.scale)}}; }
inline void from_json(const Json& j, Normalizer& n) {
  n.mean = json_vec(j.at("mean"));
  n.scale = json_vec(j.at("scale"));
  if (n.mean.size() != static_cast<Eigen::Index>(kObsDim) || n.scale.size() != static_cast<Eigen::Index>(kObsDim))
    throw Error(ErrorCode::corrupt_data, "normalizer width mismatch");
}

inline void to_json(Json& j, const TerminalKind& k) { j = std::string(to_string(k)); }
inline void from_json(const Json& j, TerminalKind& k) { k = terminal_from_string(j.get<std::string>()); }

inline void to_json(Json& j, const LanderState& s) {
  j = {{"x", s.x},
       {"y", s.y},
       {"vx", s.vx},
       {"vy", s.vy},
       {"theta", s.theta},
       {"omega", s.omega},
       {"left_contact", s.left_contact},
       {"right_contact", s.right_contact},
       {"last_action", s.last_action},
       {"step_count", s.step_count},
       {"rng_state", s.rng_state},
       {"terminal", s.terminal},
       {"success", s.success}};
}
inline void from_json(const Json& j, LanderState& s) {
  s.x = j.at("x").get<double>();
  s.y = j.at("y").get<double>();
  s.vx = j.at("vx").get<double>();
  s.vy = j.at("vy").get<double>();
  s.theta = j.at("theta").get<double>();
  s.omega = j.at("omega").get<double>();
  s.left_contact = j.at("left_contact").get<int>();
  s.right_contact = j.at("right_contact").get<int>();
  s.last_action = j.at("last_action").get<int>();
  s.step_count = j.at("step_count").get<int>();
  s.rng_state = j.at("rng_state").get<std::uint64_t>();
  s.terminal = j.at("terminal").get<TerminalKind>();
  s.success = j.at("success").get<bool>();
}

inline void to_json(Json& j, const Origin& o) {
  j = {{"kind", std::string(to_string(o.kind))}, {"source", o.source}, {"tag", o.tag}};
}
inline void from_json(const Json& j, Origin& o) {
  o.kind = origin_from_string(j.at("kind").get<std::string>());
  o.source = j.at("source").get<std::string>();
  o.tag = j.at("tag").get<std::string>();
}

inline void to_json(Json& j, const RolloutStep& s) {
  j = {{"obs", s.observation}, {"action", s.action}, {"terminal", s.terminal}};
}
inline void from_json(const Json& j, RolloutStep& s) {
  s.observation = j.at("obs").get<Observation>();
  s.action = j.at("action").get<int>();
  s.terminal = j.at("terminal").get<bool>();
}

inline void to_json(Json& j, const Rollout& r) {
  j = {{"primitive_id", r.primitive_id},
       {"branch_seed", r.branch_seed},
       {"start", r.start},
       {"final", r.final_state},
       {"steps", r.steps}};
}
inline void from_json(const Json& j, Rollout& r) {
  r.primitive_id = j.at("primitive_id").get<std::string>();
  r.branch_seed = j.at("branch_seed").get<std::uint64_t>();
  r.start = j.at("start").get<LanderState>();
  r.final_state = j.at("final").get<LanderState>();
  r.steps = j.at("steps").get<std::vector<RolloutStep>>();
}

inline void to_json(Json& j, const DemoStep& s) {
  j = {{"state", s.state},
       {"branches", s.branches},
       {"chosen", s.chosen ? Json(*s.chosen) : Json(nullptr)},
       {"timestamp", s.timestamp}};
}
inline void from_json(const Json& j, DemoStep& s) {
  s.state = j.at("state").get<LanderState>();
  s.branches = j.at("branches").get<std::vector<Rollout>>();
  s.chosen = j.at("chosen").is_null() ? std::nullopt : std::optional<int>(j.at("chosen").get<int>());
  s.timestamp = j.at("timestamp").get<std::int64_t>();
}

inline std::string_view to_string(SessionStatus s) { return s == SessionStatus::active ? "active" : "ended"; }

inline void to_json(Json& j, const DemoSession& s) {
  j = {{"id", s.id},
       {"task_tag", s.task_tag},
       {"primitive_ids", s.primitive_ids},
       {"seed", s.seed},
       {"status", std::string(to_string(s.status))},
       {"episode_id", s.episode_id},
       {"steps", s.steps}};
}
inline void from_json(const Json& j, DemoSession& s) {
  s.id = j.at("id").get<std::string>();
  s.task_tag = j.at("task_tag").get<std::string>();
  s.primitive_ids = j.at("primitive_ids").get<std::vector<std::string>>();
  s.seed = j.at("seed").get<std::uint64_t>();
  const auto st = j.at("status").get<std::string>();
  if (st != "active" && st != "ended") throw Error(ErrorCode::corrupt_data, "bad session status " + st);
  s.status = st == "active" ? SessionStatus::active : SessionStatus::ended;
  s.episode_id = j.at("episode_id").get<std::string>();
  s.steps = j.at("steps").get<std::vector<DemoStep>>();
}

inline void to_json(Json& j, const FrameRef& r) { j = Json::array({r.episode_id, r.frame}); }
inline void from_json(const Json& j, FrameRef& r) {
  r.episode_id = j.at(0).get<std::string>();
  r.frame = j.at(1).get<int>();
}

inline void to_json(Json& j, const LabelSet& l) {
  Json pos = Json::array(), neg = Json::array();
  for (std::size_t i = 0; i < l.positives.size(); ++i)
    pos.push_back({{"ref", l.positive_refs.at(i)}, {"obs", l.positives[i]}});
  for (std::size_t i = 0; i < l.negatives.size(); ++i)
    neg.push_back({{"ref", l.negative_refs.at(i)}, {"obs", l.negatives[i]}});
  j = {{"name", l.name}, {"positives", pos}, {"negatives", neg}};
}
inline void from_json(const Json& j, LabelSet& l) {
  l = {};
  l.name = j.at("name").get<std::string>();
  for (const auto& e : j.at("positives")) {
    l.positive_refs.push_back(e.at("ref").get<FrameRef>());
    l.positives.push_back(e.at("obs").get<Observation>());
  }
  for (const auto& e : j.at("negatives")) {
    l.negative_refs.push_back(e.at("ref").get<FrameRef>());
    l.negatives.push_back(e.at("obs").get<Observation>());
  }
}

inline void to_json(Json& j, const Discriminator& d) {
  j = {{"label_set", d.label_set},
       {"normalizer", d.normalizer},
       {"params", d.params},
       {"heldout_accuracy", d.heldout_accuracy},
       {"train_steps", d.train_steps},
       {"seed", d.seed}};
}
inline void from_json(const Json& j, Discriminator& d) {
  d.label_set = j.at("label_set").get<std::string>();
  d.normalizer = j.at("normalizer").get<Normalizer>();
  d.params = j.at("params").get<Params>();
  d.heldout_accuracy = j.at("heldout_accuracy").get<double>();
  d.train_steps = j.at("train_steps").get<int>();
  d.seed = j.at("seed").get<std::uint64_t>();
}

inline void to_json(Json& j, const ComparisonRef& r) {
  j = Json::array({r.session_id, r.step, r.preferred, r.rejected});
}
inline void from_json(const Json& j, ComparisonRef& r) {
  r.session_id = j.at(0).get<std::string>();
  r.step = j.at(1).get<int>();
  r.preferred = j.at(2).get<int>();
  r.rejected = j.at(3).get<int>();
}

inline void to_json(Json& j, const RewardModel& m) {
  j = {{"name", m.name},
       {"normalizer", m.normalizer},
       {"params", m.params},
       {"offset", m.offset},
       {"scale", m.scale},
       {"heldout_accuracy", m.heldout_accuracy},
       {"train_steps", m.train_steps},
       {"seed", m.seed},
       {"comparisons_used", m.comparisons_used},
       {"comparisons_dropped", m.comparisons_dropped},
       {"epoch_losses", m.epoch_losses},
       {"rejected_epochs", m.rejected_epochs}};
}
inline void from_json(const Json& j, RewardModel& m) {
  m.name = j.at("name").get<std::string>();
  m.normalizer = j.at("normalizer").get<Normalizer>();
  m.params = j.at("params").get<Params>();
  m.offset = j.at("offset").get<double>();
  m.scale = j.at("scale").get<double>();
  m.heldout_accuracy = j.at("heldout_accuracy").get<double>();
  m.train_steps = j.at("train_steps").get<int>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.comparisons_used = j.at("comparisons_used").get<int>();
  m.comparisons_dropped = j.at("comparisons_dropped").get<int>();
  m.epoch_losses = j.at("epoch_losses").get<std::vector<double>>();
  m.rejected_epochs = j.at("rejected_epochs").get<int>();
}

inline void to_json(Json& j, const RunningMoments& m) {
  j = {{"count", m.count}, {"mean", vec_json(m.mean)}, {"m2", vec_json(m.m2)}};
}
inline void from_json(const Json& j, RunningMoments& m) {
  m.count = j.at("count").get<double>();
  m.mean = json_vec(j.at("mean"));
  m.m2 = json_vec(j.at("m2"));
}

inline void to_json(Json& j, const Policy& p) {
  j = {{"policy_net", p.policy_net},
       {"value_net", p.value_net},
       {"moments", p.moments},
       {"normalizer", p.normalizer},
       {"adam_t", p.adam_t},
       {"seed", p.seed},
       {"env_steps", p.env_steps},
       {"reward_id", p.reward_id}};
}
inline void from_json(const Json& j, Policy& p) {
  p.policy_net = j.at("policy_net").get<Params>();
  p.value_net = j.at("value_net").get<Params>();
  if (p.policy_net.spec.head != OutputHead::softmax || p.policy_net.spec.output_size() != kNumActions ||
      p.policy_net.spec.input_size() != static_cast<int>(kObsDim))
    throw Error(ErrorCode::corrupt_data, "policy net has the wrong shape");
  p.moments = j.at("moments").get<RunningMoments>();
  p.normalizer = j.at("normalizer").get<Normalizer>();
  p.adam_t = j.at("adam_t").get<long>();
  p.seed = j.at("seed").get<std::uint64_t>();
  p.env_steps = j.at("env_steps").get<long>();
  p.reward_id = j.at("reward_id").get<std::string>();
}

inline void to_json(Json& j, const Primitive& p) {
  j = {{"id", p.id},
       {"display_name", p.display_name},
       {"kind", std::string(to_string(p.kind))},
       {"horizon", p.horizon},
       {"provenance", p.provenance},
       {"policy", p.policy ? Json(*p.policy) : Json(nullptr)}};
}
inline void from_json(const Json& j, Primitive& p) {
  p.id = j.at("id").get<std::string>();
  p.display_name = j.at("display_name").get<std::string>();
  p.kind = primitive_kind_from_string(j.at("kind").get<std::string>());
  p.horizon = j.at("horizon").get<int>();
  p.provenance = j.at("provenance").get<std::vector<std::string>>();
  p.policy = j.at("policy").is_null() ? std::nullopt : std::optional<Policy>(j.at("policy").get<Policy>());
}

inline Json episode_header(const EpisodeRecord& e) {
  return {{"id", e.id},
          {"origin", e.origin},
          {"terminal", e.terminal},
          {"success", e.success},
          {"seed", e.seed},
          {"length", e.actions.size()}};
}

// JSON Lines: a header line, then one line per frame carrying the action
// taken from that frame (null on the last one).
inline std::string episode_to_jsonl(const EpisodeRecord& e) {
  std::string out = episode_header(e).dump() + "\n";
  for (std::size_t t = 0; t < e.frames.size(); ++t) {
    const Json line = {{"t", t}, {"obs", e.frames[t]}, {"action", t < e.actions.size() ? Json(e.actions[t]) : Json(nullptr)}};
    out += line.dump() + "\n";
  }
  return out;
}

inline EpisodeRecord episode_from_jsonl(const std::string& text) {
  EpisodeRecord e;
  std::size_t pos = 0;
  bool header = true;
  std::size_t length = 0;
  while (pos < text.size()) {
    std::size_t nl = text.find('\n', pos);
    if (nl == std::string::npos) nl = text.size();
    const std::string line = text.substr(pos, nl - pos);
    pos = nl + 1;
    if (line.empty()) continue;
    const Json j = Json::parse(line);
    if (header) {
      e.id = j.at("id").get<std::string>();
      e.origin = j.at("origin").get<Origin>();
      e.terminal = j.at("terminal").get<TerminalKind>();
      e.success = j.at("success").get<bool>();
      e.seed = j.at("seed").get<std::uint64_t>();
      length = j.at("length").get<std::size_t>();
      header = false;
      continue;
    }
    if (j.at("t").get<std::size_t>() != e.frames.size()) throw Error(ErrorCode::corrupt_data, "episode frames out of order");
    e.frames.push_back(j.at("obs").get<Observation>());
    if (!j.at("action").is_null()) e.actions.push_back(j.at("action").get<int>());
  }
  if (header || e.actions.size() != length) throw Error(ErrorCode::corrupt_data, "episode file incomplete");
  e.validate();
  return e;
}

}  // namespace landerlab
