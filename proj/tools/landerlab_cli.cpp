#include <csignal>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "landerlab/http_server.hpp"
#include "landerlab/service.hpp"

using namespace landerlab;

namespace {

struct Options {
  std::string config;
  std::string run_dir;
  std::string host;
  int port = -1;
  int workers = 0;
  int max_active_sessions = 0;
  std::string clock;
};

ServiceConfig resolve(const Options& o) {
  ServiceConfig cfg = load_service_config(o.config);
  if (!o.run_dir.empty()) cfg.run_dir = o.run_dir;
  if (!o.host.empty()) cfg.host = o.host;
  if (o.port >= 0) cfg.port = o.port;
  if (o.workers > 0) cfg.workers = o.workers;
  if (o.max_active_sessions > 0) cfg.max_active_sessions = o.max_active_sessions;
  if (!o.clock.empty()) cfg.clock = o.clock;
  return cfg;
}

void write_output(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::invalid_argument, "cannot write " + path);
  out << text;
}

PipelineProgress stage_printer() {
  return [](const Json& e) {
    if (e.value("event", "") == "stage_started") std::cerr << "stage " << e["stage"].get<std::string>() << "\n";
  };
}

int serve(const ServiceConfig& cfg) {
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);
  Service service(cfg);
  HttpServer server(service, cfg.host, cfg.port);
  server.start();
  std::cerr << "listening on " << cfg.host << ":" << server.port() << " (run dir " << cfg.run_dir << ")\n";
  int sig = 0;
  sigwait(&set, &sig);
  server.stop();
  service.shutdown();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"landerlab: goal primitives, demonstrations and preference rewards for a 2-D lander"};
  app.require_subcommand(1);
  Options opt;
  app.add_option("--config", opt.config, "JSON config file");
  app.add_option("--run-dir", opt.run_dir, std::string("run directory (overrides config and ") + kRunDirEnv + ")");

  auto* serve_cmd = app.add_subcommand("serve", "run the HTTP + WebSocket service");
  serve_cmd->add_option("--host", opt.host);
  serve_cmd->add_option("--port", opt.port);
  serve_cmd->add_option("--workers", opt.workers);
  serve_cmd->add_option("--max-active-sessions", opt.max_active_sessions);
  serve_cmd->add_option("--clock", opt.clock)->check(CLI::IsMember({"logical", "wall"}));

  std::uint64_t seed = 0;
  auto* pipeline_cmd = app.add_subcommand("pipeline", "run the full oracle-driven pipeline");
  pipeline_cmd->add_option("--seed", seed)->required();

  std::string baseline_kind;
  int budget = -1;
  auto* baseline_cmd = app.add_subcommand("baseline", "run a comparison baseline");
  baseline_cmd->add_option("--kind", baseline_kind)->required()->check(CLI::IsMember({"drlhp", "dagger"}));
  baseline_cmd->add_option("--seed", seed)->required();
  baseline_cmd->add_option("--budget", budget, "feedback budget (default: the pipeline report's comparison count)");

  std::string policy;
  int n = 100;
  auto* evaluate_cmd = app.add_subcommand("evaluate", "evaluate a stored policy, selector or primitive");
  evaluate_cmd->add_option("--policy", policy)->required();
  evaluate_cmd->add_option("-n", n, "episodes")->check(CLI::Range(10, 1000000));
  evaluate_cmd->add_option("--seed", seed);

  std::string what, out_path, report_kind = "pipeline";
  auto* export_cmd = app.add_subcommand("export", "export an evaluation curve (CSV) or a report (JSON)");
  export_cmd->add_option("--what", what)->required()->check(CLI::IsMember({"curve", "report"}));
  export_cmd->add_option("--policy", policy, "policy for --what curve")->default_val("final");
  export_cmd->add_option("--kind", report_kind, "report kind for --what report");
  export_cmd->add_option("--seed", seed);
  export_cmd->add_option("--out", out_path, "output file (default stdout)");

  CLI11_PARSE(app, argc, argv);

  try {
    ServiceConfig cfg = resolve(opt);
    if (*serve_cmd) return serve(cfg);
    cfg.workers = 1;
    Service service(cfg);
    if (*pipeline_cmd) {
      const Json r = service.run_job_inline("pipeline", {{"seed", seed}}, stage_printer());
      std::cout << "success_rate " << r["eval"]["success_rate"] << "\nreport "
                << (std::filesystem::path(cfg.run_dir) / "reports" / (Service::report_name("pipeline", seed) + ".json")).string()
                << "\n";
      return 0;
    }
    if (*baseline_cmd) {
      Json params = {{"kind", baseline_kind}, {"seed", seed}};
      if (budget >= 0) params["budget"] = budget;
      const Json r = service.run_job_inline("baseline", params, stage_printer());
      std::cout << "success_rate " << r["eval"]["success_rate"] << "\nground_rate " << r["eval"]["ground_rate"]
                << "\nmean_terminal_altitude " << r["eval"]["mean_terminal_altitude"] << "\n";
      return 0;
    }
    if (*evaluate_cmd) {
      const Json r = service.run_job_inline("evaluate", {{"policy", policy}, {"n", n}, {"seed", seed}});
      std::cout << "success_rate " << r["success_rate"] << "\nground_rate " << r["ground_rate"] << "\n";
      return 0;
    }
    if (*export_cmd) {
      if (what == "curve") {
        write_output(out_path, service.curve_csv_for(policy));
      } else {
        const auto r = service.report(Service::report_name(report_kind, seed));
        if (!r) throw Error(ErrorCode::not_found, "no " + report_kind + " report for seed " + std::to_string(seed));
        write_output(out_path, r->dump(1) + "\n");
      }
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << to_string(e.code()) << ": " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
