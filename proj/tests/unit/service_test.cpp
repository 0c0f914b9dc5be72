#include <gtest/gtest.h>

#include <filesystem>

#include "landerlab/http_server.hpp"
#include "landerlab/service.hpp"
// after Eigen: resolv.h defines a _res macro
#include "httplib.h"

using namespace landerlab;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    static int n = 0;
    path_ = fs::temp_directory_path() / ("landerlab-svc-" + std::to_string(::getpid()) + "-" + std::to_string(n++));
    fs::remove_all(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  std::string str() const { return path_.string(); }

 private:
  fs::path path_;
};

ServiceConfig config(const TempDir& dir) {
  ServiceConfig cfg;
  cfg.run_dir = dir.str();
  cfg.workers = 1;
  return cfg;
}

Json body_of(const Response& r) { return Json::parse(r.body); }

std::string error_code(const Response& r) { return body_of(r)["error"]["code"].get<std::string>(); }

// One scripted client session; every request goes through `call`.
using Call = std::function<Response(const std::string&, const std::string&, const std::string&)>;

std::vector<Response> script(const Call& call) {
  std::vector<Response> out;
  out.push_back(call("POST", "/sessions", R"({"primitive_ids":["random","random"],"seed":3})"));
  out.push_back(call("GET", "/sessions/session-000001/branches", ""));
  out.push_back(call("POST", "/sessions/session-000001/choose", R"({"branch":1})"));
  out.push_back(call("POST", "/sessions/session-000001/choose", R"({"branch":0})"));
  out.push_back(call("POST", "/sessions/session-000001/end", ""));
  out.push_back(call("GET", "/sessions/session-000001", ""));
  out.push_back(call("POST", "/labelsets", R"({"name":"s"})"));
  out.push_back(call("POST", "/labelsets/s/labels", R"({"labels":[{"episode_id":"ep-000001","frame":0,"positive":true}]})"));
  out.push_back(call("GET", "/episodes?origin=demo", ""));
  out.push_back(call("GET", "/episodes/ep-000001", ""));
  out.push_back(call("GET", "/registry", ""));
  out.push_back(call("POST", "/sessions/session-000001/choose", R"({"branch":0})"));
  out.push_back(call("GET", "/episodes?limit=x", ""));
  return out;
}

}  // namespace

TEST(Service, HealthAndUnknownRoutes) {
  TempDir dir;
  Service svc(config(dir));
  EXPECT_EQ(svc.handle("GET", "/health").status, 200);
  EXPECT_EQ(svc.handle("GET", "/nope").status, 404);
  EXPECT_EQ(svc.handle("POST", "/nope", "{}").status, 404);
  EXPECT_EQ(svc.handle("DELETE", "/sessions").status, 405);
  const Response bad = svc.handle("POST", "/sessions", "{not json");
  EXPECT_EQ(bad.status, 400);
  EXPECT_EQ(error_code(bad), "invalid_argument");
  EXPECT_EQ(svc.handle("POST", "/sessions", "[1]").status, 400);
  EXPECT_EQ(svc.handle("GET", "/episodes?success=maybe").status, 400);
  EXPECT_EQ(svc.handle("GET", "/episodes?origin=alien").status, 400);
  EXPECT_EQ(svc.handle("GET", "/episodes/ep-999999").status, 404);
}

TEST(Service, SessionLifecycleAndErrorMapping) {
  TempDir dir;
  Service svc(config(dir));
  const Response start = svc.handle("POST", "/sessions", R"({"primitive_ids":["random"],"seed":1})");
  ASSERT_EQ(start.status, 201);
  const std::string id = body_of(start)["session_id"];
  EXPECT_EQ(svc.handle("POST", "/sessions", R"({"primitive_ids":["random"],"seed":2})").status, 409);
  EXPECT_EQ(svc.handle("POST", "/sessions/" + id + "/end").status, 412);
  EXPECT_EQ(svc.handle("POST", "/sessions/" + id + "/choose", R"({"branch":7})").status, 400);
  EXPECT_EQ(svc.handle("POST", "/sessions/" + id + "/choose", R"({"branch":"a"})").status, 400);
  const Response branches = svc.handle("GET", "/sessions/" + id + "/branches");
  ASSERT_EQ(branches.status, 200);
  EXPECT_EQ(body_of(branches)["branches"].size(), 1u);
  EXPECT_EQ(svc.handle("POST", "/sessions/" + id + "/choose", R"({"branch":0})").status, 200);
  EXPECT_EQ(svc.handle("POST", "/sessions/" + id + "/end").status, 200);
  const Response again = svc.handle("POST", "/sessions/" + id + "/choose", R"({"branch":0})");
  EXPECT_EQ(again.status, 409);
  EXPECT_EQ(error_code(again), "usage_error");
  EXPECT_EQ(svc.handle("GET", "/sessions/" + id + "/branches").status, 409);
  EXPECT_EQ(svc.handle("POST", "/sessions", R"({"primitive_ids":["ghost"]})").status, 404);
  EXPECT_EQ(svc.handle("POST", "/sessions", R"({"primitive_ids":[]})").status, 400);
}

TEST(Service, LabelSets) {
  TempDir dir;
  Service svc(config(dir));
  svc.engine().run_free_episodes("random", 1, 5);
  EXPECT_EQ(svc.handle("POST", "/labelsets", R"({"name":"a"})").status, 201);
  EXPECT_EQ(svc.handle("POST", "/labelsets", R"({"name":"a"})").status, 409);
  EXPECT_EQ(svc.handle("POST", "/labelsets", "{}").status, 400);
  EXPECT_EQ(svc.handle("POST", "/labelsets/b/labels", R"({"labels":[]})").status, 404);
  EXPECT_EQ(svc.handle("POST", "/labelsets/a/labels", R"({"labels":[]})").status, 400);
  const Response dangling =
      svc.handle("POST", "/labelsets/a/labels", R"({"labels":[{"episode_id":"ep-000009","frame":0,"positive":true}]})");
  EXPECT_EQ(dangling.status, 404);
  const Response ok = svc.handle(
      "POST", "/labelsets/a/labels",
      R"({"labels":[{"episode_id":"ep-000001","frame":0,"positive":true},{"episode_id":"ep-000001","frame":2,"positive":false}]})");
  ASSERT_EQ(ok.status, 200);
  EXPECT_EQ(svc.store().registry().label_sets.at("a").positives.size(), 1u);
  EXPECT_EQ(svc.store().registry().label_sets.at("a").negatives.size(), 1u);
}

TEST(Service, IdempotentCommandsReplayTheFirstReply) {
  TempDir dir;
  Service svc(config(dir));
  const std::string body = R"({"primitive_ids":["random"],"seed":4})";
  const Response a = svc.handle("POST", "/sessions", body, "key-1");
  const Response b = svc.handle("POST", "/sessions", body, "key-1");
  EXPECT_EQ(a, b);
  EXPECT_EQ(svc.store().sessions().size(), 1u);
  const Response c = svc.handle("POST", "/sessions", R"({"primitive_ids":["random"],"seed":5})", "key-1");
  EXPECT_EQ(c.status, 409);
  // a body token behaves like the header and is not part of the fingerprint
  const std::string id = body_of(a)["session_id"];
  const Response d = svc.handle("POST", "/sessions/" + id + "/choose", R"({"branch":0,"client_token":"t"})");
  const Response e = svc.handle("POST", "/sessions/" + id + "/choose", R"({"client_token":"t","branch":0})");
  EXPECT_EQ(d, e);
  EXPECT_EQ(svc.engine().session(id).chosen_steps(), 1u);
  // errors are replayed too
  const Response f = svc.handle("POST", "/sessions/" + id + "/choose", R"({"branch":9})", "key-2");
  EXPECT_EQ(svc.handle("POST", "/sessions/" + id + "/choose", R"({"branch":9})", "key-2"), f);
}

TEST(Service, JobsRunAndReportStatus) {
  TempDir dir;
  Service svc(config(dir));
  const Response sub = svc.handle("POST", "/jobs", R"({"kind":"free_episodes","params":{"primitive":"random","n":3,"seed":2}})");
  ASSERT_EQ(sub.status, 202);
  const std::string id = body_of(sub)["id"];
  const Job j = svc.wait_job(id);
  EXPECT_EQ(j.status, JobStatus::done);
  EXPECT_EQ(j.result["episodes"].size(), 3u);
  const Json got = body_of(svc.handle("GET", "/jobs/" + id));
  EXPECT_EQ(got["status"], "done");
  EXPECT_EQ(body_of(svc.handle("GET", "/episodes?origin=random"))["episodes"].size(), 3u);

  const std::string ev = body_of(svc.handle("POST", "/jobs", R"({"kind":"evaluate","params":{"policy":"random","n":10}})"))["id"];
  EXPECT_EQ(svc.wait_job(ev).status, JobStatus::done);
  const Response csv = svc.handle("GET", "/eval/random/curve");
  EXPECT_EQ(csv.content_type, "text/csv");
  EXPECT_EQ(csv.body.rfind("episode,window_rate\n10,", 0), 0u);
  EXPECT_EQ(body_of(svc.handle("GET", "/eval/random/curve?format=json"))["curve"].size(), 1u);
  EXPECT_EQ(svc.handle("GET", "/eval/ghost/curve").status, 404);

  const std::string bad = body_of(svc.handle("POST", "/jobs", R"({"kind":"free_episodes","params":{"primitive":"ghost"}})"))["id"];
  const Job failed = svc.wait_job(bad);
  EXPECT_EQ(failed.status, JobStatus::failed);
  EXPECT_EQ(failed.error["code"], "not_found");

  EXPECT_EQ(svc.handle("POST", "/jobs", R"({"kind":"dance"})").status, 400);
  EXPECT_EQ(svc.handle("POST", "/jobs", R"({"kind":"evaluate","params":{}})").status, 400);
  EXPECT_EQ(svc.handle("POST", "/jobs", R"({"kind":"baseline","params":{"kind":"ppo"}})").status, 400);
  EXPECT_EQ(svc.handle("GET", "/jobs/job-999999").status, 404);
  EXPECT_EQ(body_of(svc.handle("GET", "/jobs"))["jobs"].size(), 3u);
}

TEST(Service, BaselineWithoutPipelineReportNeedsBudget) {
  TempDir dir;
  Service svc(config(dir));
  const std::string id = body_of(svc.handle("POST", "/jobs", R"({"kind":"baseline","params":{"kind":"drlhp","seed":1}})"))["id"];
  const Job j = svc.wait_job(id);
  EXPECT_EQ(j.status, JobStatus::failed);
  EXPECT_EQ(j.error["code"], "precondition_failed");
  EXPECT_EQ(svc.handle("GET", "/reports/pipeline-seed-1").status, 404);
}

TEST(Service, JobStatusOnlyMovesForward) {
  TempDir dir;
  Service svc(config(dir));
  auto sub = svc.events().subscribe();
  const std::string id = body_of(svc.handle("POST", "/jobs", R"({"kind":"free_episodes","params":{"primitive":"random","n":1}})"))["id"];
  svc.wait_job(id);
  std::vector<std::string> seen;
  while (seen.size() < 3) {
    const auto msg = sub->pop();
    if (!msg) continue;
    const Json e = Json::parse(*msg);
    if (e["type"] == "job_status") seen.push_back(e["status"]);
  }
  EXPECT_EQ(seen, (std::vector<std::string>{"queued", "running", "done"}));
  EXPECT_EQ(svc.job(id).history, (std::vector<std::string>{"queued", "running", "done"}));
  svc.events().unsubscribe(sub);
}

TEST(Service, ConfigLoading) {
  TempDir dir;
  fs::create_directories(dir.str());
  const std::string path = dir.str() + "/cfg.json";
  std::ofstream(path) << R"({"port": 9001, "pipeline": {"horizon": 20}})";
  const ServiceConfig cfg = load_service_config(path);
  EXPECT_EQ(cfg.port, 9001);
  EXPECT_EQ(cfg.pipeline.horizon, 20);
  EXPECT_EQ(cfg.workers, ServiceConfig{}.workers);
  std::ofstream(path) << R"({"clock": "sundial"})";
  EXPECT_THROW(load_service_config(path), Error);
  EXPECT_THROW(load_service_config(dir.str() + "/missing.json"), Error);
}

TEST(Http, RoutesMatchInProcessByteForByte) {
  TempDir a, b;
  Service direct(config(a));
  Service remote(config(b));
  HttpServer server(remote, "127.0.0.1", 0);
  server.start();
  httplib::Client client("127.0.0.1", server.port());

  const auto in_process = script([&](const std::string& m, const std::string& t, const std::string& body) {
    return direct.handle(m, t, body);
  });
  const auto over_http = script([&](const std::string& m, const std::string& t, const std::string& body) -> Response {
    const auto res = m == "GET" ? client.Get(t) : client.Post(t, body, "application/json");
    if (!res) return {0, "", "transport error"};
    return {res->status, res->get_header_value("Content-Type"), res->body};
  });
  ASSERT_EQ(in_process.size(), over_http.size());
  for (std::size_t i = 0; i < in_process.size(); ++i) EXPECT_EQ(over_http[i], in_process[i]) << "request " << i;
  EXPECT_EQ(over_http.back().status, 400);
  EXPECT_EQ(direct.store().registry_text(), remote.store().registry_text());

  // the header key is honoured like the body token
  httplib::Headers h{{"Idempotency-Key", "k"}};
  const auto r1 = client.Post("/labelsets", h, R"({"name":"z"})", "application/json");
  const auto r2 = client.Post("/labelsets", h, R"({"name":"z"})", "application/json");
  ASSERT_TRUE(r1 && r2);
  EXPECT_EQ(r1->status, 201);
  EXPECT_EQ(r2->status, 201);
  server.stop();
}

TEST(WebSocket, StreamsHelloAndSessionEvents) {
  namespace beast = boost::beast;
  namespace websocket = beast::websocket;
  TempDir dir;
  Service svc(config(dir));
  HttpServer server(svc, "127.0.0.1", 0);
  server.start();

  boost::asio::io_context ioc;
  websocket::stream<boost::asio::ip::tcp::socket> ws(ioc);
  ws.next_layer().connect({boost::asio::ip::make_address("127.0.0.1"), static_cast<unsigned short>(server.port())});
  ws.handshake("127.0.0.1", "/ws");
  beast::flat_buffer buf;
  ws.read(buf);
  const Json hello = Json::parse(beast::buffers_to_string(buf.data()));
  EXPECT_EQ(hello["type"], "hello");
  EXPECT_EQ(hello["schema"], kEventSchemaVersion);

  ASSERT_EQ(svc.handle("POST", "/sessions", R"({"primitive_ids":["random"],"seed":1})").status, 201);
  buf.clear();
  ws.read(buf);
  const Json e = Json::parse(beast::buffers_to_string(buf.data()));
  EXPECT_EQ(e["type"], "session_update");
  EXPECT_EQ(e["event"], "started");
  EXPECT_EQ(e["schema"], kEventSchemaVersion);
  server.stop();
}
