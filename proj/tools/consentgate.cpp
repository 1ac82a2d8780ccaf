// consentgate: operator CLI for the consent service.

#include <CLI11.hpp>

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <memory>
#include <mutex>
#include <thread>

#include "consentgate/harness.hpp"
#include "consentgate/http_api.hpp"
#include "consentgate/http_server.hpp"
#include "consentgate/service.hpp"

namespace fs = std::filesystem;
using namespace consentgate;

namespace {

constexpr int kExitError = 1;
constexpr int kExitAssertion = 2;

std::string config_path(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("CONSENTGATE_CONFIG"); env && *env) return env;
  throw Error(ErrorCode::InvalidArgument, "no config: pass --config or set CONSENTGATE_CONFIG");
}

// One service instance over the configured data_dir, with a clock matching
// the configured mode.
struct Runtime {
  explicit Runtime(const std::string& path) : config(ServiceConfig::load(path)) {
    if (config.clock_mode == ClockMode::simulated) {
      clock = std::make_unique<SimulatedClock>(config.simulated_start);
    } else {
      clock = std::make_unique<SystemClock>();
    }
    service = std::make_unique<Service>(config, *clock, hub, mail);
  }

  ServiceConfig config;
  std::unique_ptr<Clock> clock;
  ChannelHub hub;
  SimulatedMailSink mail;
  std::unique_ptr<Service> service;
};

std::pair<std::string, int> split_address(const std::string& address) {
  const auto colon = address.rfind(':');
  if (colon == std::string::npos) throw Error(ErrorCode::InvalidArgument, "listen_address needs host:port");
  return {address.substr(0, colon), std::stoi(address.substr(colon + 1))};
}

int serve(const std::string& cfg) {
  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);

  Runtime rt(config_path(cfg));
  ApiRouter router(*rt.service);
  HttpServer server(router);
  const auto [host, port] = split_address(rt.config.listen_address);
  const int bound = server.bind(host, port);
  if (bound < 0) throw Error(ErrorCode::InvalidArgument, "cannot bind " + rt.config.listen_address);
  std::cerr << "consentgate listening on " << host << ":" << bound << " (data_dir "
            << (rt.config.data_dir.empty() ? "<memory>" : rt.config.data_dir) << ")\n";

  std::mutex mu;
  std::condition_variable cv;
  bool stopping = false;
  std::thread ticker([&] {
    std::unique_lock lock(mu);
    while (!cv.wait_for(lock, std::chrono::seconds(1), [&] { return stopping; })) {
      try {
        rt.service->tick();
      } catch (const std::exception& e) {
        std::cerr << "tick: " << e.what() << "\n";
      }
    }
  });
  std::thread waiter([&] {
    int sig = 0;
    sigwait(&signals, &sig);
    server.stop();
  });
  waiter.detach();

  server.listen();
  {
    std::lock_guard lock(mu);
    stopping = true;
  }
  cv.notify_all();
  ticker.join();
  rt.service->checkpoint();
  std::cerr << "consentgate stopped\n";
  return 0;
}

std::string resolve_fixture(const std::string& fixture) {
  if (fs::is_directory(fixture)) return fixture;
  const auto named = harness::default_fixture_root() + "/" + fixture;
  if (fs::is_directory(named)) return named;
  throw Error(ErrorCode::NotFound, "no fixture directory " + fixture);
}

int seed(const std::string& cfg, const std::string& fixture) {
  Runtime rt(config_path(cfg));
  rt.service->seed(resolve_fixture(fixture));
  std::cout << "seeded " << rt.service->policy().registry().patient_ids().size() << " patients, "
            << rt.service->records().section_count() << " record sections\n";
  return 0;
}

int scenario_list(const std::string& dir) {
  for (const auto& name : harness::list_scenarios(dir)) {
    const auto s = harness::load_scenario(dir, name);
    std::cout << name << "  " << s.description << "\n";
  }
  return 0;
}

int scenario_run(const std::string& dir, const std::vector<std::string>& names, bool all) {
  std::vector<std::string> todo = all ? harness::list_scenarios(dir) : names;
  if (todo.empty()) throw Error(ErrorCode::InvalidArgument, "name a scenario or pass --all");
  bool ok = true;
  for (const auto& name : todo) {
    const auto result = harness::run_scenario(harness::load_scenario(dir, name));
    std::cout << (result.passed ? "PASS " : "FAIL ") << name << "\n";
    for (const auto& n : result.notes) std::cout << "  " << n << "\n";
    if (!result.passed) {
      std::cout << "  " << result.diff << "\n";
      ok = false;
    }
  }
  return ok ? 0 : kExitAssertion;
}

int audit_tail(const std::string& cfg, const std::string& patient, bool follow) {
  Runtime rt(config_path(cfg));
  std::uint64_t last = 0;
  auto print_new = [&](const std::vector<AuditEvent>& events) {
    for (const auto& e : events) {
      if (e.patient_id == patient && e.seq > last) std::cout << serialize_audit_line(e) << "\n";
      last = std::max(last, e.seq);
    }
    std::cout.flush();
  };
  print_new(rt.service->audit().patient_view(patient));
  last = rt.service->audit().last_seq();
  if (!follow || rt.config.data_dir.empty()) return 0;
  const auto path = (fs::path(rt.config.data_dir) / "audit.jsonl").string();
  for (;;) {
    std::this_thread::sleep_for(std::chrono::seconds(1));
    print_new(AuditLog::load_file(path));
  }
}

int tick(const std::string& cfg) {
  Runtime rt(config_path(cfg));
  const auto changed = rt.service->tick();
  std::cout << changed << " cases changed, " << rt.service->orchestrator().pending_audit()
            << " audit writes pending\n";
  return 0;
}

int checkpoint(const std::string& cfg) {
  Runtime rt(config_path(cfg));
  if (!rt.service->checkpoint()) throw Error(ErrorCode::StorageFailure, "checkpoint not written");
  std::cout << "checkpoint at seq " << rt.service->audit().last_seq() << "\n";
  return 0;
}

int approvers(const std::string& cfg) {
  Runtime rt(config_path(cfg));
  for (const auto& id : rt.service->policy().list_approvers()) std::cout << id << "\n";
  return 0;
}

int channels(const std::string& cfg, const std::string& patient) {
  Runtime rt(config_path(cfg));
  if (!rt.service->policy().registry().has_patient(patient)) throw Error(ErrorCode::UnknownPatient, patient);
  int n = 0;
  for (const auto& t : rt.service->orchestrator().effective_targets(patient, rt.clock->now())) {
    std::cout << ++n << "  " << t.party_id << " (" << to_string(t.kind) << ")  " << t.device.device_id << "  "
              << to_string(t.device.kind) << "\n";
  }
  return 0;
}

int grant_check(const std::string& cfg, const std::string& grant, const std::string& patient,
                const std::string& section, const std::string& action) {
  Runtime rt(config_path(cfg));
  const bool ok = rt.service->orchestrator().check_grant(grant, patient,
                                                         parse_enum_or_throw<RecordSection>(section),
                                                         parse_enum_or_throw<Action>(action),
                                                         rt.clock->now());
  std::cout << (ok ? "permit" : "deny") << "\n";
  return ok ? 0 : kExitAssertion;
}

int records_export(const std::string& cfg) {
  Runtime rt(config_path(cfg));
  std::cout << rt.service->records().export_snapshot().dump() << "\n";
  return 0;
}

int fuzz(std::uint64_t seed, std::size_t n, double failure_rate) {
  harness::FuzzOptions o;
  o.seed = seed;
  o.n_requests = n;
  o.channel_failure_rate = failure_rate;
  const auto report = harness::fuzz_campaign(o);
  std::cout << report.to_json().dump(2) << "\n";
  return report.ok() ? 0 : kExitAssertion;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"consentgate: patient consent gateway for health record access"};
  app.require_subcommand(1);
  std::string cfg;
  app.add_option("-c,--config", cfg, "Service config (JSON); defaults to $CONSENTGATE_CONFIG");

  auto* serve_cmd = app.add_subcommand("serve", "Run the HTTP service");

  std::string fixture;
  auto* seed_cmd = app.add_subcommand("seed", "Load registry, patients and records from a fixture");
  seed_cmd->add_option("--fixture", fixture, "Fixture directory or name under data/fixtures")->required();

  std::string scenario_dir = harness::default_scenario_dir();
  auto* scenario_cmd = app.add_subcommand("scenario", "Scripted scenarios");
  scenario_cmd->require_subcommand(1);
  scenario_cmd->add_option("--dir", scenario_dir, "Scenario directory");
  auto* run_cmd = scenario_cmd->add_subcommand("run", "Run scenarios and diff their traces");
  std::vector<std::string> names;
  bool all = false;
  run_cmd->add_option("names", names, "Scenario names");
  run_cmd->add_flag("--all", all, "Run every scenario in the directory");
  auto* list_cmd = scenario_cmd->add_subcommand("list", "List scenarios");

  auto* audit_cmd = app.add_subcommand("audit", "Audit trail");
  audit_cmd->require_subcommand(1);
  auto* tail_cmd = audit_cmd->add_subcommand("tail", "Print a patient's audit events");
  std::string patient;
  bool follow = false;
  tail_cmd->add_option("--patient", patient, "Patient id")->required();
  tail_cmd->add_flag("-f,--follow", follow, "Keep printing new events");

  auto* tick_cmd = app.add_subcommand("tick", "Fire due deadlines and send queued mail once");
  auto* checkpoint_cmd = app.add_subcommand("checkpoint", "Write checkpoint.json");
  auto* approvers_cmd = app.add_subcommand("approvers", "List manager (approver) accounts");

  auto* channels_cmd = app.add_subcommand("channels", "Show a patient's effective channel order now");
  channels_cmd->add_option("--patient", patient, "Patient id")->required();

  auto* grant_cmd = app.add_subcommand("grant", "Grant tools");
  grant_cmd->require_subcommand(1);
  auto* check_cmd = grant_cmd->add_subcommand("check", "Evaluate a grant against one section and action");
  std::string grant_id;
  std::string section;
  std::string action = "read";
  check_cmd->add_option("--grant", grant_id, "Grant id")->required();
  check_cmd->add_option("--patient", patient, "Patient id")->required();
  check_cmd->add_option("--section", section, "Record section")->required();
  check_cmd->add_option("--action", action, "read or write");

  auto* records_cmd = app.add_subcommand("records", "Record store tools");
  records_cmd->require_subcommand(1);
  auto* export_cmd = records_cmd->add_subcommand("export", "Print every stored section as a JSON snapshot");

  std::uint64_t fuzz_seed = 0;
  std::size_t fuzz_n = 1000;
  double failure_rate = 0.0;
  auto* fuzz_cmd = app.add_subcommand("fuzz", "Run a randomised campaign and the invariant sweep");
  fuzz_cmd->add_option("--seed", fuzz_seed, "Campaign seed");
  fuzz_cmd->add_option("-n,--requests", fuzz_n, "Number of requests");
  fuzz_cmd->add_option("--channel-failure-rate", failure_rate, "Probability a dispatch fails")
      ->check(CLI::Range(0.0, 1.0));

  CLI11_PARSE(app, argc, argv);

  try {
    if (*serve_cmd) return serve(cfg);
    if (*seed_cmd) return seed(cfg, fixture);
    if (*run_cmd) return scenario_run(scenario_dir, names, all);
    if (*list_cmd) return scenario_list(scenario_dir);
    if (*tail_cmd) return audit_tail(cfg, patient, follow);
    if (*tick_cmd) return tick(cfg);
    if (*checkpoint_cmd) return checkpoint(cfg);
    if (*approvers_cmd) return approvers(cfg);
    if (*channels_cmd) return channels(cfg, patient);
    if (*check_cmd) return grant_check(cfg, grant_id, patient, section, action);
    if (*export_cmd) return records_export(cfg);
    if (*fuzz_cmd) return fuzz(fuzz_seed, fuzz_n, failure_rate);
  } catch (const std::exception& e) {
    std::cerr << "consentgate: " << e.what() << "\n";
    return kExitError;
  }
  return kExitError;
}
