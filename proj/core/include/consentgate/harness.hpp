#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "consentgate/http_api.hpp"
#include "consentgate/service.hpp"

namespace consentgate::harness {

/// A simulated deployment: one service plus the clock, devices and mail
/// server around it. The clock, hub and mail sink outlive restarts, the way
/// real phones and real time would.
class World {
 public:
  struct Options {
    std::string data_dir;  // empty: in-memory, restart() unavailable
    EpochMs start = 1'735'689'600'000;
    int hash_iterations = 1000;
    std::string operator_token = "harness-operator";
    OrchestratorConfig orchestrator;
    bool fsync = false;
  };

  explicit World(Options options);
  ~World();

  SimulatedClock& clock() { return clock_; }
  ChannelHub& hub() { return hub_; }
  SimulatedMailSink& mail() { return mail_; }
  Service& service() { return *service_; }
  ApiRouter& router() { return *router_; }
  const Options& options() const { return options_; }

  /// Seeds from a fixture directory and remembers its passwords for login().
  void seed(const std::string& fixture_dir);
  /// Drops the service and loads a new one from data_dir.
  void restart();

  /// Logs in through the API with the fixture password unless one is given.
  /// A successful login's ticket is attached to the actor's later calls.
  ApiResponse login(const std::string& actor, const std::optional<std::string>& password = {});
  std::optional<std::string> ticket(const std::string& actor) const;

  /// Sends one API call, attaching the actor's ticket and, if asked, the
  /// operator token.
  ApiResponse call(const std::string& method, const std::string& path, const Json& body = nullptr,
                   const std::string& actor = {}, bool as_operator = false,
                   const std::map<std::string, std::string>& query = {});

  /// What the device would answer with for the latest prompt it received
  /// about `request_id`. Throws NotFound if nothing reached the device.
  ResponseProof proof_for(const std::string& party, const std::string& device_id,
                          const std::string& request_id, Decision decision) const;

  /// Advances the simulated clock and runs the service's periodic work.
  void advance(DurationMs ms);

 private:
  ServiceConfig make_config() const;

  Options options_;
  SimulatedClock clock_;
  ChannelHub hub_;
  SimulatedMailSink mail_;
  std::unique_ptr<Service> service_;
  std::unique_ptr<ApiRouter> router_;
  std::map<std::string, std::string> passwords_;
  std::map<std::string, std::string> tickets_;
};

// ---------------------------------------------------------------------------
// Scripted scenarios
// ---------------------------------------------------------------------------

struct Scenario {
  std::string name;
  std::string description;
  std::vector<std::string> covers;
  std::string fixture = "default";
  Json steps = Json::array();
  Json expect = Json::object();

  static Scenario from_json(const Json& j);
  static Scenario load(const std::string& path);
};

/// Names of the *.json files in a scenario directory, sorted.
std::vector<std::string> list_scenarios(const std::string& dir);
Scenario load_scenario(const std::string& dir, const std::string& name);
std::string default_scenario_dir();
std::string default_fixture_root();

struct ScenarioResult {
  std::string name;
  bool passed = false;
  /// Index of the first divergent step; equal to the step count when only the
  /// final expectations diverged.
  std::optional<std::size_t> failed_step;
  std::string diff;
  std::vector<std::string> notes;
  /// Terminal state per request alias, for restart comparisons.
  std::map<std::string, std::string> states;
};

struct RunOptions {
  std::string data_dir;  // required for restarts
  std::set<std::size_t> restart_after;  // step indices
  std::string fixture_root;  // default_fixture_root() when empty
};

/// Executes a scenario step by step and stops at the first divergence.
class ScenarioRunner {
 public:
  ScenarioRunner(Scenario scenario, RunOptions options = {});
  ~ScenarioRunner();

  std::size_t step_count() const { return scenario_.steps.size(); }
  /// Returns an empty string on success, else the divergence.
  std::string run_step(std::size_t index);
  /// Checks the final expectations. Returns an empty string on success.
  std::string check_final();
  ScenarioResult run();

  World& world() { return *world_; }
  const std::map<std::string, std::string>& vars() const { return vars_; }

 private:
  Json substitute(const Json& j) const;
  std::string subst(const std::string& s) const;
  std::string check_response(const Json& step, const ApiResponse& res);

  Scenario scenario_;
  RunOptions options_;
  std::unique_ptr<World> world_;
  std::map<std::string, std::string> vars_;
  std::uint64_t baseline_seq_ = 0;
  std::vector<std::string> notes_;
};

ScenarioResult run_scenario(const Scenario& scenario, const RunOptions& options = {});

/// Recursive subset match: every key of `expected` must be present and equal
/// in `actual`; arrays must match element-wise with equal length. Returns an
/// empty string on a match, else a path and both values.
std::string json_subset_diff(const Json& expected, const Json& actual, const std::string& path = "");

// ---------------------------------------------------------------------------
// Randomised campaigns
// ---------------------------------------------------------------------------

struct FuzzOptions {
  std::uint64_t seed = 0;
  std::size_t n_requests = 1000;
  double channel_failure_rate = 0.0;
  double breakglass_rate = 0.05;
  std::size_t patients = 24;
  std::size_t providers = 16;
};

struct FuzzReport {
  std::uint64_t seed = 0;
  std::size_t requests = 0;
  std::vector<std::string> violations;
  std::map<std::string, std::size_t> terminal_counts;
  std::map<std::string, std::size_t> grant_counts;
  std::string audit_digest;  // SHA-256 over the serialized audit log
  std::vector<std::string> audit_lines;
  /// Requests that passed the ACL, were not usual-provider reads and never
  /// went through break-glass.
  std::vector<std::string> consent_path_requests;
  std::map<std::string, std::string> final_states;  // request id -> state

  bool ok() const { return violations.empty(); }
  Json to_json() const;
};

FuzzReport fuzz_campaign(const FuzzOptions& options);

/// The global invariant sweep run after every scenario and campaign. Returns
/// one message per violation.
std::vector<std::string> invariant_sweep(Service& service);

}  // namespace consentgate::harness
