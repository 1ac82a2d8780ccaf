#pragma once

#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "consentgate/audit.hpp"
#include "consentgate/channels.hpp"
#include "consentgate/clock.hpp"
#include "consentgate/orchestrator.hpp"
#include "consentgate/policy.hpp"
#include "consentgate/record_store.hpp"

namespace consentgate {

enum class ClockMode { real, simulated };

template <>
struct EnumNames<ClockMode> {
  static constexpr std::array<std::string_view, 2> names{"real", "simulated"};
};

struct ServiceConfig {
  std::string listen_address = "127.0.0.1:8080";
  std::string data_dir;  // empty: nothing is persisted
  OrchestratorConfig orchestrator;
  std::string policy_fixture_path;
  ClockMode clock_mode = ClockMode::real;
  bool harness_mode = false;
  std::string operator_token;
  PolicyConfig policy;
  bool fsync = true;
  EpochMs simulated_start = 1'735'689'600'000;  // 2025-01-01T00:00:00Z

  /// Throws InvalidArgument (simulated clock outside harness mode, bad timings).
  void validate() const;
  /// Reads a JSON config file. Relative paths resolve against its directory.
  static ServiceConfig load(const std::string& path);
};

void to_json(Json& j, const ServiceConfig& c);
void from_json(const Json& j, ServiceConfig& c);

/// Directory holding acl.v1.json, fixtures/ and scenarios/. Honours
/// CONSENTGATE_DATA_ROOT, else the location the package was built or
/// installed with.
std::string default_data_root();

/// The assembled service: policy engine, orchestrator, record store and audit
/// log sharing one clock, one channel hub and one mail sink. Those three are
/// supplied by the caller so a harness can keep them alive across restarts.
///
/// data_dir layout:
///   audit.jsonl        source of truth for cases, grants, delegations, devices
///   registry.json      principals and patients (devices come from the log)
///   secrets.json       ticket digests, passcodes, enrollment keys, mail queue
///   records.jsonl      section document journal
///   checkpoint.json    optional snapshot of the replayed state
///   outbox.jsonl, mail_outbox.jsonl   simulated transports
class Service {
 public:
  /// Loads state from config.data_dir. Throws CorruptLog when the audit log is
  /// unreadable; a bad checkpoint is ignored in favour of a full replay.
  Service(ServiceConfig config, const Clock& clock, ChannelHub& hub, MailSink& mail);
  ~Service();

  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  const ServiceConfig& config() const { return config_; }
  const Clock& clock() const { return clock_; }
  ChannelHub& hub() { return hub_; }
  MailSink& mail() { return mail_; }
  AuditLog& audit() { return *audit_; }
  PolicyEngine& policy() { return *policy_; }
  ConsentOrchestrator& orchestrator() { return *orchestrator_; }
  RecordStore& records() { return *records_; }

  /// Loads registry.json, patients.json and optional records.json from a
  /// fixture directory. Throws DuplicateUser and friends unchanged.
  void seed(const std::string& fixture_dir);
  void seed_json(const Json& registry, const Json& patients, const std::optional<Json>& records);

  /// Links a device and hands a push enrollment key to the simulated device.
  std::optional<std::vector<std::uint8_t>> link_device(const std::string& patient_id,
                                                       const Device& device,
                                                       const std::string& actor);

  /// Deadlines, pending break-glass audit writes and the mail queue.
  std::size_t tick();

  /// Writes checkpoint.json. Returns false if nothing could be written.
  bool checkpoint();

  /// Events folded in at startup after the checkpoint (or all of them).
  std::size_t replayed_events() const { return replayed_; }
  bool loaded_from_checkpoint() const { return from_checkpoint_; }

  /// SHA-256 over the canonical JSON of cases, grants, delegations, devices,
  /// mail notices and records.
  std::string state_digest() const;

 private:
  std::string path(const char* name) const;
  void build();
  void load();
  void save_registry();
  void save_secrets();

  ServiceConfig config_;
  const Clock& clock_;
  ChannelHub& hub_;
  MailSink& mail_;

  std::unique_ptr<AuditLog> audit_;
  std::unique_ptr<PolicyEngine> policy_;
  std::unique_ptr<ConsentOrchestrator> orchestrator_;
  std::unique_ptr<RecordStore> records_;

  std::mutex persist_mu_;
  std::size_t replayed_ = 0;
  bool from_checkpoint_ = false;
  bool loading_ = false;
};

}  // namespace consentgate
