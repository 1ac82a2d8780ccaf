#include "consentgate/policy.hpp"

#include <algorithm>

#include "consentgate/error.hpp"

namespace consentgate {

// --- ACL -------------------------------------------------------------------

AclTable::AclTable(std::string version, const std::map<Key, Verdict>& entries)
    : version_(std::move(version)) {
  for (const auto& [key, verdict] : entries) {
    const auto& [role, section, action] = key;
    permits_[index(role, section, action)] = verdict == Verdict::permit;
  }
}

std::size_t AclTable::index(PrincipalRole role, RecordSection section, Action action) noexcept {
  return (static_cast<std::size_t>(role) * enum_count<RecordSection>() +
          static_cast<std::size_t>(section)) *
             enum_count<Action>() +
         static_cast<std::size_t>(action);
}

Verdict AclTable::lookup(PrincipalRole role, RecordSection section, Action action) const noexcept {
  return permits_[index(role, section, action)] ? Verdict::permit : Verdict::deny;
}

AclTable AclTable::from_json(const Json& j) {
  try {
    if (j.value("default", "deny") != "deny") {
      throw Error(ErrorCode::InvalidArgument, "ACL default must be deny");
    }
    std::map<Key, Verdict> entries;
    for (const auto& [role_name, sections] : j.at("rules").items()) {
      if (role_name.starts_with('_')) continue;
      const auto role = parse_enum_or_throw<PrincipalRole>(role_name);
      for (const auto& [section_name, actions] : sections.items()) {
        if (section_name.starts_with('_')) continue;
        const auto section = parse_enum_or_throw<RecordSection>(section_name);
        for (const auto& [action_name, verdict] : actions.items()) {
          if (action_name.starts_with('_')) continue;
          entries[{role, section, parse_enum_or_throw<Action>(action_name)}] =
              parse_enum_or_throw<Verdict>(verdict.get<std::string>());
        }
      }
    }
    return AclTable(j.at("version").get<std::string>(), entries);
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    throw Error(ErrorCode::InvalidArgument, std::string("bad ACL fixture: ") + e.what());
  }
}

AclTable AclTable::load(const std::string& path) {
  return from_json(Json::parse(read_file(path)));
}

AclDecision acl_check(PrincipalRole role, const SectionSet& sections, Action action,
                      const AclTable& table) {
  for (auto section : sections) {  // ascending enum order
    if (table.lookup(role, section, action) == Verdict::deny) return {false, section};
  }
  return {true, std::nullopt};
}

// --- registry --------------------------------------------------------------

std::string Registry::register_user(const RegistrationRecord& record, std::string_view password) {
  const auto& p = record.principal;
  if (p.principal_id.empty()) throw Error(ErrorCode::EmptyCredential, "user name");
  if (password.empty()) throw Error(ErrorCode::EmptyCredential, "password");
  if (p.role == PrincipalRole::usual_gp) {
    throw Error(ErrorCode::InvalidArgument,
                "usual_gp is derived from the patient link table and cannot be registered");
  }
  if (record.usertype == UserType::normal && (!record.linked_approver || record.linked_approver->empty())) {
    throw Error(ErrorCode::MissingApprover, p.principal_id);
  }
  // Hash outside the lock; it is the slow part.
  const std::string hash = hasher_.hash(password);

  std::unique_lock lock(mu_);
  if (principals_.contains(p.principal_id) || patients_.contains(p.principal_id)) {
    throw Error(ErrorCode::DuplicateUser, p.principal_id);
  }
  if (record.usertype == UserType::normal) {
    const auto it = principals_.find(*record.linked_approver);
    if (it == principals_.end() || it->second.usertype != UserType::manager) {
      throw Error(ErrorCode::MissingApprover, "no manager named " + *record.linked_approver);
    }
  }
  Entry entry{p, record.usertype,
              record.usertype == UserType::normal ? record.linked_approver : std::nullopt};
  entry.principal.credential_hash = hash;
  principals_.emplace(p.principal_id, std::move(entry));
  return p.principal_id;
}

void Registry::add_patient(Patient patient, std::string_view password) {
  if (patient.patient_id.empty()) throw Error(ErrorCode::InvalidArgument, "empty patient id");
  std::sort(patient.devices.begin(), patient.devices.end(),
            [](const Device& a, const Device& b) { return a.priority < b.priority; });
  for (std::size_t i = 1; i < patient.devices.size(); ++i) {
    if (patient.devices[i].priority == patient.devices[i - 1].priority) {
      throw Error(ErrorCode::DuplicatePriority, patient.patient_id);
    }
  }
  if (!password.empty()) patient.credential_hash = hasher_.hash(password);
  std::unique_lock lock(mu_);
  if (patients_.contains(patient.patient_id) || principals_.contains(patient.patient_id)) {
    throw Error(ErrorCode::DuplicateUser, patient.patient_id);
  }
  patients_.emplace(patient.patient_id, std::move(patient));
}

std::optional<Principal> Registry::principal(const std::string& id) const {
  std::shared_lock lock(mu_);
  const auto it = principals_.find(id);
  if (it == principals_.end()) return std::nullopt;
  return it->second.principal;
}

std::optional<Patient> Registry::patient(const std::string& id) const {
  std::shared_lock lock(mu_);
  const auto it = patients_.find(id);
  if (it == patients_.end()) return std::nullopt;
  return it->second;
}

bool Registry::has_patient(const std::string& id) const {
  std::shared_lock lock(mu_);
  return patients_.contains(id);
}

std::optional<UserType> Registry::usertype(const std::string& id) const {
  std::shared_lock lock(mu_);
  const auto it = principals_.find(id);
  if (it == principals_.end()) return std::nullopt;
  return it->second.usertype;
}

std::optional<std::string> Registry::approver_of(const std::string& id) const {
  std::shared_lock lock(mu_);
  const auto it = principals_.find(id);
  if (it == principals_.end()) return std::nullopt;
  return it->second.approver;
}

std::vector<std::string> Registry::patient_ids() const {
  std::shared_lock lock(mu_);
  std::vector<std::string> out;
  for (const auto& [id, p] : patients_) out.push_back(id);
  return out;
}

bool Registry::is_usual_provider(const std::string& requester, const std::string& patient) const {
  std::shared_lock lock(mu_);
  const auto it = principals_.find(requester);
  if (it == principals_.end()) throw Error(ErrorCode::UnknownPrincipal, requester);
  if (!patients_.contains(patient)) throw Error(ErrorCode::UnknownPatient, patient);
  const auto& p = it->second.principal;
  return p.role == PrincipalRole::gp && p.linked_patients.contains(patient);
}

PrincipalRole Registry::effective_role(const std::string& requester,
                                       const std::string& patient) const {
  if (is_usual_provider(requester, patient)) return PrincipalRole::usual_gp;
  std::shared_lock lock(mu_);
  return principals_.at(requester).principal.role;
}

std::vector<std::string> Registry::list_approvers() const {
  std::shared_lock lock(mu_);
  std::vector<std::string> out;
  for (const auto& [id, entry] : principals_) {  // std::map: already sorted
    if (entry.usertype == UserType::manager) out.push_back(id);
  }
  return out;
}

std::vector<std::pair<std::string, std::string>> Registry::link_table() const {
  std::shared_lock lock(mu_);
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& [id, entry] : principals_) {
    for (const auto& patient : entry.principal.linked_patients) out.emplace_back(id, patient);
  }
  return out;
}

std::optional<std::string> Registry::credential_hash(const std::string& subject) const {
  std::shared_lock lock(mu_);
  if (const auto it = principals_.find(subject); it != principals_.end()) {
    return it->second.principal.credential_hash;
  }
  if (const auto it = patients_.find(subject);
      it != patients_.end() && !it->second.credential_hash.empty()) {
    return it->second.credential_hash;
  }
  return std::nullopt;
}

void Registry::set_devices(const std::string& patient_id, std::vector<Device> devices) {
  std::sort(devices.begin(), devices.end(),
            [](const Device& a, const Device& b) { return a.priority < b.priority; });
  std::unique_lock lock(mu_);
  auto it = patients_.find(patient_id);
  if (it == patients_.end()) throw Error(ErrorCode::UnknownPatient, patient_id);
  it->second.devices = std::move(devices);
}

Json Registry::to_json() const {
  std::shared_lock lock(mu_);
  Json principals = Json::array();
  for (const auto& [id, entry] : principals_) {
    Json j = entry.principal;
    j["usertype"] = entry.usertype;
    if (entry.approver) j["linked_approver"] = *entry.approver;
    principals.push_back(std::move(j));
  }
  Json patients = Json::array();
  for (const auto& [id, p] : patients_) patients.push_back(p);
  return Json{{"version", 1}, {"principals", principals}, {"patients", patients}};
}

void Registry::from_json(const Json& j) {
  std::unique_lock lock(mu_);
  principals_.clear();
  patients_.clear();
  for (const auto& item : j.at("principals")) {
    Entry entry;
    entry.principal = item.get<Principal>();
    entry.usertype = item.at("usertype").get<UserType>();
    if (item.contains("linked_approver")) entry.approver = item.at("linked_approver").get<std::string>();
    principals_.emplace(entry.principal.principal_id, std::move(entry));
  }
  for (const auto& item : j.at("patients")) {
    auto p = item.get<Patient>();
    patients_.emplace(p.patient_id, std::move(p));
  }
}

// --- tickets ---------------------------------------------------------------

AuthTicket TicketStore::issue(const std::string& subject, EpochMs now, DurationMs ttl) {
  AuthTicket ticket{crypto::to_hex(crypto::random_bytes(16)), subject, now, now + ttl};
  std::lock_guard lock(mu_);
  by_digest_[crypto::sha256_hex(ticket.ticket_id)] = {subject, now, now + ttl};
  return ticket;
}

std::string TicketStore::verify(const std::string& ticket_id, EpochMs now) const {
  const auto digest = crypto::sha256_hex(ticket_id);
  std::lock_guard lock(mu_);
  const auto it = by_digest_.find(digest);
  if (it == by_digest_.end()) throw Error(ErrorCode::UnknownTicket);
  if (now >= it->second.expires_at) throw Error(ErrorCode::ExpiredTicket);
  return it->second.subject;
}

std::size_t TicketStore::size() const {
  std::lock_guard lock(mu_);
  return by_digest_.size();
}

Json TicketStore::to_json() const {
  std::lock_guard lock(mu_);
  Json out = Json::object();
  for (const auto& [digest, e] : by_digest_) {
    out[digest] = {{"subject", e.subject}, {"issued_at", e.issued_at}, {"expires_at", e.expires_at}};
  }
  return out;
}

void TicketStore::from_json(const Json& j) {
  std::lock_guard lock(mu_);
  by_digest_.clear();
  for (const auto& [digest, e] : j.items()) {
    by_digest_[digest] = {e.at("subject").get<std::string>(), e.at("issued_at").get<EpochMs>(),
                          e.at("expires_at").get<EpochMs>()};
  }
}

// --- engine ----------------------------------------------------------------

PolicyEngine::PolicyEngine(AclTable acl, const Clock& clock, AuditLog& audit, PolicyConfig config)
    : acl_(std::move(acl)),
      clock_(clock),
      audit_(audit),
      config_(config),
      registry_(crypto::CredentialHasher(config.hash_iterations)),
      dummy_hash_(registry_.hasher().hash("unused")) {}

AuthTicket PolicyEngine::authenticate(const std::string& principal_id,
                                      const std::string& credential) {
  if (principal_id.empty()) throw Error(ErrorCode::EmptyCredential, "Enter user name");
  if (credential.empty()) throw Error(ErrorCode::EmptyCredential, "Enter Password");

  const EpochMs now = clock_.now();
  const auto stored = registry_.credential_hash(principal_id);
  // Unknown users still pay for one hash so timing does not reveal them.
  const bool ok = registry_.hasher().verify(credential, stored.value_or(dummy_hash_)) && stored;

  const auto principal = registry_.principal(principal_id);
  AuditEvent ev;
  ev.at = now;
  ev.patient_id = registry_.has_patient(principal_id) ? principal_id : "";
  ev.actor_id = principal_id;
  ev.actor_role = principal ? std::string(to_string(principal->role))
                            : (ev.patient_id.empty() ? "unknown" : "patient");
  ev.kind = ok ? AuditKind::auth_ok : AuditKind::auth_fail;
  ev.detail = {{"stage", "login"}};
  audit_.append(std::move(ev));

  if (!ok) throw Error(ErrorCode::BadCredentials);
  auto ticket = tickets_.issue(principal_id, now, config_.ticket_ttl_ms);
  if (tickets_changed_) tickets_changed_();
  return ticket;
}

std::string PolicyEngine::verify_ticket(const std::string& ticket_id, EpochMs now) const {
  return tickets_.verify(ticket_id, now);
}

AclDecision PolicyEngine::acl_check(PrincipalRole role, const SectionSet& sections,
                                    Action action) const {
  return consentgate::acl_check(role, sections, action, acl_);
}

std::string PolicyEngine::register_user(const RegistrationRecord& record,
                                        std::string_view password) {
  auto id = registry_.register_user(record, password);
  if (registry_changed_) registry_changed_();
  return id;
}

std::vector<std::string> PolicyEngine::list_approvers() const { return registry_.list_approvers(); }

}  // namespace consentgate
