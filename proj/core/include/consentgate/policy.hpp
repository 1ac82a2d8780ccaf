#pragma once

#include <array>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <tuple>
#include <unordered_map>
#include <utility>
#include <vector>

#include "consentgate/audit.hpp"
#include "consentgate/clock.hpp"
#include "consentgate/codec.hpp"
#include "consentgate/crypto.hpp"
#include "consentgate/domain.hpp"

namespace consentgate {

// ---------------------------------------------------------------------------
// ACL
// ---------------------------------------------------------------------------

enum class Verdict { permit, deny };

template <>
struct EnumNames<Verdict> {
  static constexpr std::array<std::string_view, 2> names{"permit", "deny"};
};

/// role x section x action -> verdict, deny by default. Immutable after
/// construction; a changed policy is a new table with a new version string.
class AclTable {
 public:
  using Key = std::tuple<PrincipalRole, RecordSection, Action>;

  AclTable() = default;
  AclTable(std::string version, const std::map<Key, Verdict>& entries);

  /// Parses the acl.v1.json layout: {"version", "default":"deny",
  /// "rules": {role: {section: {action: verdict}}}}. Keys starting with '_'
  /// are commentary and ignored.
  static AclTable from_json(const Json& j);
  static AclTable load(const std::string& path);

  Verdict lookup(PrincipalRole role, RecordSection section, Action action) const noexcept;
  const std::string& version() const noexcept { return version_; }

 private:
  static constexpr std::size_t kSize =
      enum_count<PrincipalRole>() * enum_count<RecordSection>() * enum_count<Action>();
  static std::size_t index(PrincipalRole role, RecordSection section, Action action) noexcept;

  std::string version_ = "empty";
  std::array<bool, kSize> permits_{};
};

struct AclDecision {
  bool permitted = false;
  std::optional<RecordSection> violating;  // smallest denied section in enum order

  bool operator==(const AclDecision&) const = default;
};

/// Permit iff every requested section is permitted for (role, action).
AclDecision acl_check(PrincipalRole role, const SectionSet& sections, Action action,
                      const AclTable& table);

// ---------------------------------------------------------------------------
// Registry
// ---------------------------------------------------------------------------

/// Principals, patients and the two link tables: provider -> usual patients
/// and normal user -> approving manager.
class Registry {
 public:
  explicit Registry(crypto::CredentialHasher hasher = crypto::CredentialHasher{})
      : hasher_(std::move(hasher)) {}

  Registry(const Registry&) = delete;
  Registry& operator=(const Registry&) = delete;

  /// Throws DuplicateUser, MissingApprover, EmptyCredential, InvalidArgument.
  std::string register_user(const RegistrationRecord& record, std::string_view password);

  /// Adds a patient party. `password` may be empty (no console login).
  void add_patient(Patient patient, std::string_view password = {});

  std::optional<Principal> principal(const std::string& id) const;
  std::optional<Patient> patient(const std::string& id) const;
  bool has_patient(const std::string& id) const;
  std::optional<UserType> usertype(const std::string& id) const;
  std::optional<std::string> approver_of(const std::string& id) const;
  std::vector<std::string> patient_ids() const;

  /// Throws UnknownPrincipal / UnknownPatient.
  bool is_usual_provider(const std::string& requester, const std::string& patient) const;

  /// The role the ACL sees: usual_gp for a linked GP, the stored role otherwise.
  PrincipalRole effective_role(const std::string& requester, const std::string& patient) const;

  /// Manager-type principals, sorted by id.
  std::vector<std::string> list_approvers() const;

  /// (principal, patient) pairs of the usual-provider link table.
  std::vector<std::pair<std::string, std::string>> link_table() const;

  /// Credential hash of a principal or patient login, if any.
  std::optional<std::string> credential_hash(const std::string& subject) const;

  void set_devices(const std::string& patient_id, std::vector<Device> devices);

  Json to_json() const;
  void from_json(const Json& j);

  const crypto::CredentialHasher& hasher() const { return hasher_; }

 private:
  struct Entry {
    Principal principal;
    UserType usertype = UserType::normal;
    std::optional<std::string> approver;
  };

  mutable std::shared_mutex mu_;
  crypto::CredentialHasher hasher_;
  std::map<std::string, Entry> principals_;
  std::map<std::string, Patient> patients_;
};

// ---------------------------------------------------------------------------
// Tickets
// ---------------------------------------------------------------------------

struct AuthTicket {
  std::string ticket_id;
  std::string principal_id;
  EpochMs issued_at = 0;
  EpochMs expires_at = 0;
};

/// Issued tickets are stored only as SHA-256 digests of their id.
class TicketStore {
 public:
  AuthTicket issue(const std::string& subject, EpochMs now, DurationMs ttl);

  /// Valid iff known and now < expires_at. Throws UnknownTicket / ExpiredTicket.
  std::string verify(const std::string& ticket_id, EpochMs now) const;

  std::size_t size() const;
  Json to_json() const;
  void from_json(const Json& j);

 private:
  struct Entry {
    std::string subject;
    EpochMs issued_at = 0;
    EpochMs expires_at = 0;
  };
  mutable std::mutex mu_;
  std::unordered_map<std::string, Entry> by_digest_;
};

// ---------------------------------------------------------------------------
// Authentication + ACL server
// ---------------------------------------------------------------------------

struct PolicyConfig {
  DurationMs ticket_ttl_ms = 8 * 3600 * 1000;
  int hash_iterations = 10000;
};

class PolicyEngine {
 public:
  PolicyEngine(AclTable acl, const Clock& clock, AuditLog& audit, PolicyConfig config = {});

  /// Throws EmptyCredential or BadCredentials (same error for unknown user and
  /// wrong password). Records auth_ok / auth_fail.
  AuthTicket authenticate(const std::string& principal_id, const std::string& credential);

  /// Returns the ticket's subject. Throws UnknownTicket / ExpiredTicket.
  std::string verify_ticket(const std::string& ticket_id, EpochMs now) const;

  AclDecision acl_check(PrincipalRole role, const SectionSet& sections, Action action) const;

  std::string register_user(const RegistrationRecord& record, std::string_view password);
  std::vector<std::string> list_approvers() const;

  Registry& registry() { return registry_; }
  const Registry& registry() const { return registry_; }
  TicketStore& tickets() { return tickets_; }
  const AclTable& acl() const { return acl_; }
  const PolicyConfig& config() const { return config_; }

  void on_registry_changed(std::function<void()> cb) { registry_changed_ = std::move(cb); }
  void on_tickets_changed(std::function<void()> cb) { tickets_changed_ = std::move(cb); }

 private:
  AclTable acl_;
  const Clock& clock_;
  AuditLog& audit_;
  PolicyConfig config_;
  Registry registry_;
  TicketStore tickets_;
  std::string dummy_hash_;
  std::function<void()> registry_changed_;
  std::function<void()> tickets_changed_;
};

}  // namespace consentgate
