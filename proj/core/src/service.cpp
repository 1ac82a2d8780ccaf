#include "consentgate/service.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "consentgate/crypto.hpp"
#include "consentgate/error.hpp"

#ifndef CONSENTGATE_DEFAULT_DATA_ROOT
#define CONSENTGATE_DEFAULT_DATA_ROOT "data"
#endif

namespace fs = std::filesystem;

namespace consentgate {

std::string default_data_root() {
  if (const char* env = std::getenv("CONSENTGATE_DATA_ROOT"); env && *env) return env;
  return CONSENTGATE_DEFAULT_DATA_ROOT;
}

// --- configuration --------------------------------------------------------

void ServiceConfig::validate() const {
  if (clock_mode == ClockMode::simulated && !harness_mode) {
    throw Error(ErrorCode::InvalidArgument, "simulated clock requires harness_mode");
  }
  if (policy.ticket_ttl_ms <= 0 || policy.hash_iterations < 1) {
    throw Error(ErrorCode::InvalidArgument, "ticket_ttl_ms and hash_iterations must be > 0");
  }
  orchestrator.validate();
}

void to_json(Json& j, const ServiceConfig& c) {
  j = Json{{"listen_address", c.listen_address},
           {"data_dir", c.data_dir},
           {"orchestrator", c.orchestrator},
           {"policy_fixture_path", c.policy_fixture_path},
           {"clock_mode", c.clock_mode},
           {"harness_mode", c.harness_mode},
           {"operator_token", c.operator_token},
           {"ticket_ttl_ms", c.policy.ticket_ttl_ms},
           {"hash_iterations", c.policy.hash_iterations},
           {"fsync", c.fsync},
           {"simulated_start", format_iso8601(c.simulated_start)}};
}

void from_json(const Json& j, ServiceConfig& c) {
  c.listen_address = j.value("listen_address", c.listen_address);
  c.data_dir = j.value("data_dir", c.data_dir);
  if (j.contains("orchestrator")) from_json(j.at("orchestrator"), c.orchestrator);
  c.policy_fixture_path = j.value("policy_fixture_path", c.policy_fixture_path);
  if (j.contains("clock_mode")) c.clock_mode = j.at("clock_mode").get<ClockMode>();
  c.harness_mode = j.value("harness_mode", c.harness_mode);
  c.operator_token = j.value("operator_token", c.operator_token);
  c.policy.ticket_ttl_ms = j.value("ticket_ttl_ms", c.policy.ticket_ttl_ms);
  c.policy.hash_iterations = j.value("hash_iterations", c.policy.hash_iterations);
  c.fsync = j.value("fsync", c.fsync);
  if (j.contains("simulated_start")) {
    c.simulated_start = parse_iso8601(j.at("simulated_start").get<std::string>());
  }
}

ServiceConfig ServiceConfig::load(const std::string& path) {
  ServiceConfig c;
  try {
    from_json(Json::parse(read_file(path)), c);
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::InvalidArgument, path + ": " + e.what());
  }
  const fs::path base = fs::absolute(path).parent_path();
  auto resolve = [&](std::string& p) {
    if (!p.empty() && fs::path(p).is_relative()) p = (base / p).lexically_normal().string();
  };
  resolve(c.data_dir);
  resolve(c.policy_fixture_path);
  if (c.policy_fixture_path.empty()) c.policy_fixture_path = default_data_root() + "/acl.v1.json";
  c.validate();
  return c;
}

// --- lifecycle ------------------------------------------------------------

Service::Service(ServiceConfig config, const Clock& clock, ChannelHub& hub, MailSink& mail)
    : config_(std::move(config)), clock_(clock), hub_(hub), mail_(mail) {
  if (config_.policy_fixture_path.empty()) {
    config_.policy_fixture_path = default_data_root() + "/acl.v1.json";
  }
  config_.validate();
  load();
}

Service::~Service() = default;

std::string Service::path(const char* name) const { return (fs::path(config_.data_dir) / name).string(); }

void Service::build() {
  std::unique_ptr<AuditSink> sink;
  if (config_.data_dir.empty()) {
    sink = std::make_unique<MemoryAuditSink>();
  } else {
    sink = std::make_unique<FileAuditSink>(path("audit.jsonl"), config_.fsync);
  }
  records_.reset();
  orchestrator_.reset();
  policy_.reset();
  audit_ = std::make_unique<AuditLog>(std::move(sink));
  policy_ = std::make_unique<PolicyEngine>(AclTable::load(config_.policy_fixture_path), clock_,
                                           *audit_, config_.policy);
  orchestrator_ = std::make_unique<ConsentOrchestrator>(*policy_, *audit_, hub_, clock_,
                                                        config_.orchestrator);
  records_ = std::make_unique<RecordStore>(*orchestrator_, *audit_);
}

namespace {

// A crash mid-append can leave a final line without its newline. It is not
// part of the log; cut it off so the next append starts on a clean line.
void drop_torn_tail(const std::string& file) {
  if (!fs::exists(file)) return;
  const std::string text = read_file(file);
  if (text.empty() || text.back() == '\n') return;
  const auto nl = text.rfind('\n');
  fs::resize_file(file, nl == std::string::npos ? 0 : nl + 1);
}

Json strip_devices(Json registry) {
  for (auto& p : registry.at("patients")) p["devices"] = Json::array();
  return registry;
}

}  // namespace

void Service::load() {
  loading_ = true;
  std::vector<AuditEvent> events;
  if (!config_.data_dir.empty()) {
    fs::create_directories(config_.data_dir);
    drop_torn_tail(path("audit.jsonl"));
    drop_torn_tail(path("records.jsonl"));
    if (fs::exists(path("audit.jsonl"))) events = AuditLog::load_file(path("audit.jsonl"));
  }

  auto load_static = [&] {
    build();
    if (config_.data_dir.empty()) return;
    if (fs::exists(path("registry.json"))) {
      policy_->registry().from_json(strip_devices(Json::parse(read_file(path("registry.json")))));
    }
    if (fs::exists(path("secrets.json"))) {
      const auto s = Json::parse(read_file(path("secrets.json")));
      policy_->tickets().from_json(s.at("tickets"));
      orchestrator_->passcodes().from_json(s.at("passcodes"));
      orchestrator_->enrollment_keys().from_json(s.at("enrollment_keys"));
      orchestrator_->verifier().from_json(s.at("consumed_proofs"));
      orchestrator_->emails().from_json(s.at("mail_queue"));
    }
  };

  auto replay = [&](std::uint64_t after) {
    std::size_t n = 0;
    for (const auto& e : events) {
      if (e.seq <= after) continue;
      try {
        orchestrator_->apply(e);
      } catch (const Error& err) {
        if (err.code() == ErrorCode::CorruptLog) throw;
        throw Error(ErrorCode::CorruptLog, "replay of seq " + std::to_string(e.seq) + ": " + err.what());
      }
      ++n;
    }
    return n;
  };

  const std::uint64_t last = events.empty() ? 0 : events.back().seq;
  load_static();
  from_checkpoint_ = false;
  replayed_ = 0;
  bool done = false;
  if (!config_.data_dir.empty() && fs::exists(path("checkpoint.json"))) {
    try {
      Json wrapper;
      try {
        wrapper = Json::parse(read_file(path("checkpoint.json")));
      } catch (const Json::exception& e) {
        throw Error(ErrorCode::CorruptCheckpoint, e.what());
      }
      if (!wrapper.is_object() || !wrapper.contains("body") || !wrapper.contains("digest") ||
          crypto::sha256_hex(wrapper.at("body").dump()) != wrapper.at("digest")) {
        throw Error(ErrorCode::CorruptCheckpoint, "digest mismatch");
      }
      const auto& body = wrapper.at("body");
      if (!body.contains("seq") || body.at("seq").get<std::uint64_t>() > last) {
        throw Error(ErrorCode::CorruptCheckpoint, "checkpoint is ahead of the audit log");
      }
      const auto seq = orchestrator_->restore_checkpoint(body);
      replayed_ = replay(seq);
      from_checkpoint_ = true;
      done = true;
    } catch (const Error& e) {
      if (e.code() != ErrorCode::CorruptCheckpoint && e.code() != ErrorCode::CorruptLog) throw;
      load_static();
    }
  }
  if (!done) replayed_ = replay(0);

  audit_->restore(events);
  if (!config_.data_dir.empty()) {
    records_->load_journal(path("records.jsonl"), events);
    records_->set_journal_path(path("records.jsonl"));
    hub_.set_outbox_path(path("outbox.jsonl"));
    if (auto* sim = dynamic_cast<SimulatedMailSink*>(&mail_)) sim->set_outbox_path(path("mail_outbox.jsonl"));
    policy_->on_registry_changed([this] { save_registry(); });
    policy_->on_tickets_changed([this] { save_secrets(); });
    orchestrator_->on_secrets_changed([this] { save_secrets(); });
  }
  loading_ = false;
}

void Service::save_registry() {
  if (config_.data_dir.empty() || loading_) return;
  std::lock_guard lock(persist_mu_);
  write_file_atomic(path("registry.json"), strip_devices(policy_->registry().to_json()).dump(2));
}

void Service::save_secrets() {
  if (config_.data_dir.empty() || loading_) return;
  std::lock_guard lock(persist_mu_);
  Json s{{"tickets", policy_->tickets().to_json()},
         {"passcodes", orchestrator_->passcodes().to_json()},
         {"enrollment_keys", orchestrator_->enrollment_keys().to_json()},
         {"consumed_proofs", orchestrator_->verifier().to_json()},
         {"mail_queue", orchestrator_->emails().to_json()}};
  write_file_atomic(path("secrets.json"), s.dump());
}

// --- seeding --------------------------------------------------------------

void Service::seed(const std::string& fixture_dir) {
  const fs::path dir(fixture_dir);
  const auto registry = Json::parse(read_file((dir / "registry.json").string()));
  const auto patients = Json::parse(read_file((dir / "patients.json").string()));
  std::optional<Json> records;
  if (fs::exists(dir / "records.json")) records = Json::parse(read_file((dir / "records.json").string()));
  seed_json(registry, patients, records);
}

void Service::seed_json(const Json& registry, const Json& patients,
                        const std::optional<Json>& records) {
  struct PendingPatient {
    Patient patient;
    std::vector<Device> devices;
  };
  std::vector<PendingPatient> added;
  for (const auto& item : patients.at("patients")) {
    Patient p;
    p.patient_id = item.at("patient_id").get<std::string>();
    p.display_name = item.value("display_name", p.patient_id);
    p.email = item.value("email", std::string());
    if (item.contains("nominee") && !item.at("nominee").is_null()) {
      p.nominee = item.at("nominee").get<std::string>();
    }
    auto devices = item.value("devices", std::vector<Device>{});
    policy_->registry().add_patient(p, item.value("password", std::string()));
    added.push_back({p, std::move(devices)});
  }
  for (const auto& a : added) {
    if (a.patient.nominee && !policy_->registry().has_patient(*a.patient.nominee)) {
      throw Error(ErrorCode::UnknownPatient, "nominee " + *a.patient.nominee);
    }
  }
  save_registry();

  std::vector<Json> principals(registry.at("principals").begin(), registry.at("principals").end());
  std::stable_sort(principals.begin(), principals.end(), [](const Json& a, const Json& b) {
    return a.value("usertype", std::string("normal")) == "manager" &&
           b.value("usertype", std::string("normal")) != "manager";
  });
  for (const auto& item : principals) {
    RegistrationRecord rec;
    rec.principal.principal_id = item.at("principal_id").get<std::string>();
    rec.principal.display_name = item.value("display_name", rec.principal.principal_id);
    rec.principal.role = item.at("role").get<PrincipalRole>();
    rec.principal.linked_patients = item.value("linked_patients", std::set<std::string>{});
    rec.usertype = item.contains("usertype") ? item.at("usertype").get<UserType>() : UserType::normal;
    if (item.contains("linked_approver") && !item.at("linked_approver").is_null()) {
      rec.linked_approver = item.at("linked_approver").get<std::string>();
    }
    policy_->register_user(rec, item.value("password", std::string()));
  }

  for (const auto& a : added) {
    for (const auto& d : a.devices) link_device(a.patient.patient_id, d, "seed");
  }
  if (records) records_->import_snapshot(*records, clock_.now());
}

std::optional<std::vector<std::uint8_t>> Service::link_device(const std::string& patient_id,
                                                              const Device& device,
                                                              const std::string& actor) {
  auto key = orchestrator_->link_device(patient_id, device, actor);
  if (key) hub_.enroll(patient_id, device.device_id, *key);
  return key;
}

// --- periodic work --------------------------------------------------------

std::size_t Service::tick() {
  orchestrator_->flush_pending_audit();
  const auto changed = orchestrator_->process_deadlines(clock_.now());
  orchestrator_->pump_email(mail_);
  return changed;
}

bool Service::checkpoint() {
  if (config_.data_dir.empty()) return false;
  const auto body = orchestrator_->checkpoint_json();
  if (!body) return false;
  const Json wrapper{{"digest", crypto::sha256_hex(body->dump())}, {"body", *body}};
  write_file_atomic(path("checkpoint.json"), wrapper.dump());
  return true;
}

std::string Service::state_digest() const {
  Json devices = Json::object();
  for (const auto& pid : policy_->registry().patient_ids()) {
    devices[pid] = policy_->registry().patient(pid)->devices;
  }
  Json notices = Json::array();
  for (const auto& n : orchestrator_->emails().notices()) notices.push_back(n);
  const Json state{{"cases", orchestrator_->cases()},
                   {"grants", orchestrator_->grants()},
                   {"delegations", orchestrator_->delegations()},
                   {"devices", devices},
                   {"notices", notices},
                   {"records", records_->export_snapshot()},
                   {"last_seq", audit_->last_seq()}};
  return crypto::sha256_hex(state.dump());
}

}  // namespace consentgate
