#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include "consentgate/audit.hpp"
#include "consentgate/channels.hpp"
#include "consentgate/clock.hpp"
#include "consentgate/domain.hpp"
#include "consentgate/policy.hpp"
#include "consentgate/record_store.hpp"

namespace consentgate {

struct OrchestratorConfig {
  std::map<DeviceKind, DurationMs> channel_timeout_ms{
      {DeviceKind::smartphone_push, 120'000}, {DeviceKind::sms, 120'000},
      {DeviceKind::voice_call, 60'000},       {DeviceKind::landline_voice, 60'000},
      {DeviceKind::hardware_token, 120'000}};
  DurationMs overall_deadline_ms = 900'000;
  DurationMs consented_grant_ttl_ms = 3'600'000;
  static constexpr DurationMs emergency_grant_ttl_ms = kEmergencyGrantTtlMs;
  int max_channel_attempts = 5;
  DurationMs passcode_ttl_ms = 300'000;

  DurationMs channel_timeout(DeviceKind kind) const;
  /// Throws InvalidArgument unless every tunable value is > 0.
  void validate() const;
};

void to_json(Json& j, const OrchestratorConfig& c);
/// Missing keys keep their defaults. An emergency TTL in the input is rejected.
void from_json(const Json& j, OrchestratorConfig& c);

enum class TargetKind { patient, nominee, delegate };
enum class DispatchOutcome { delivered, failed, no_channel };

template <>
struct EnumNames<TargetKind> {
  static constexpr std::array<std::string_view, 3> names{"patient", "nominee", "delegate"};
};
template <>
struct EnumNames<DispatchOutcome> {
  static constexpr std::array<std::string_view, 3> names{"delivered", "failed", "no_channel"};
};

struct ChannelTarget {
  std::string party_id;
  TargetKind kind = TargetKind::patient;
  Device device;

  bool operator==(const ChannelTarget&) const = default;
};

struct DispatchAttempt {
  int attempt = 0;
  std::string target;
  TargetKind target_kind = TargetKind::patient;
  std::string device_id;
  DeviceKind device_kind = DeviceKind::smartphone_push;
  DispatchOutcome outcome = DispatchOutcome::no_channel;
  EpochMs at = 0;

  bool operator==(const DispatchAttempt&) const = default;
};

/// A case plus everything the orchestrator tracks beside the state machine.
struct CaseSnapshot {
  ConsentCase c;
  std::optional<PrincipalRole> requester_role;  // empty when authentication failed
  std::vector<DispatchAttempt> attempts;
  std::optional<EpochMs> channel_deadline;
  std::optional<DecisionRecord> decision;
  std::optional<std::string> grant_id;
  std::optional<std::string> breakglass_justification;

  bool operator==(const CaseSnapshot&) const = default;
};

void to_json(Json& j, const DispatchAttempt& a);
void from_json(const Json& j, DispatchAttempt& a);
void to_json(Json& j, const CaseSnapshot& s);
void from_json(const Json& j, CaseSnapshot& s);

struct SubmitParams {
  std::string ticket_id;
  std::string patient_id;
  SectionSet sections;
  Action action = Action::read;
  AccessPurpose purpose = AccessPurpose::consultation;
  bool declared_emergency = false;
  std::optional<std::string> justification;
};

struct PendingItem {
  std::string request_id;
  std::string requester_id;
  std::string requester_name;
  PrincipalRole requester_role = PrincipalRole::gp;
  AccessPurpose purpose = AccessPurpose::consultation;
  SectionSet sections;
  Action action = Action::read;
  ConsentState state = ConsentState::AwaitingPatient;
  EpochMs deadline = 0;
  DurationMs remaining_ms = 0;
};

void to_json(Json& j, const PendingItem& p);

/// The consent control system. Every mutation is written to the audit log
/// first and then folded into memory by apply(), the same function used for
/// crash replay. The one exception is break-glass, which applies first and
/// retries the audit write from a pending queue.
class ConsentOrchestrator final : public GrantAuthority {
 public:
  ConsentOrchestrator(PolicyEngine& policy, AuditLog& audit, ChannelHub& hub, const Clock& clock,
                      OrchestratorConfig config = {});
  ~ConsentOrchestrator() override;

  ConsentOrchestrator(const ConsentOrchestrator&) = delete;
  ConsentOrchestrator& operator=(const ConsentOrchestrator&) = delete;

  // --- request lifecycle -------------------------------------------------

  /// Ticket failures and ACL denials produce audited RejectedAuth/RejectedAcl
  /// cases. Throws UnknownPatient (no case), MalformedEmergency, InvalidArgument.
  /// A declared emergency takes the break-glass path.
  CaseSnapshot submit_access_request(const SubmitParams& params);

  /// attempt_no-th entry of the patient's effective device list at `now`.
  /// Throws NoChannelAvailable, UnknownPatient, InvalidArgument.
  ChannelTarget select_channel(const std::string& patient_id, int attempt_no, EpochMs now) const;
  std::vector<ChannelTarget> effective_targets(const std::string& patient_id, EpochMs now) const;

  /// Throws UnknownRequest, UnauthorizedResponder, BadProof.
  CaseSnapshot record_decision(const std::string& request_id, const std::string& responder_id,
                               Decision decision, const ResponseProof& proof);

  /// Throws UnknownRequest.
  CaseSnapshot handle_deadline(const std::string& request_id, EpochMs now);
  /// Runs handle_deadline over every waiting case. Returns how many changed.
  std::size_t process_deadlines(EpochMs now);

  /// Emergency access on an existing case. Throws EmptyJustification,
  /// RejectedAuth, UnknownRequest, NotRequester, InvalidTransition.
  Grant break_glass(const std::string& ticket_id, const std::string& request_id,
                    const std::string& justification);

  // --- delegation and devices ------------------------------------------

  /// Throws UnknownPatient, InvalidWindow, DelegateWithoutDevice, InvalidArgument.
  Delegation create_delegation(const std::string& patient_id, const std::string& delegate_ref,
                               EpochMs window_start, EpochMs window_end,
                               const std::string& actor);
  /// Throws UnknownDelegation.
  void revoke_delegation(const std::string& delegation_id, const std::string& actor);

  /// Returns the enrollment key for push devices (handed to the device once).
  std::optional<std::vector<std::uint8_t>> link_device(const std::string& patient_id,
                                                       const Device& device,
                                                       const std::string& actor);
  void unlink_device(const std::string& patient_id, const std::string& device_id,
                     const std::string& actor);

  // --- grants ------------------------------------------------------------

  /// Permit iff the grant exists, now < expires_at, the scope covers
  /// (patient, section, action) and, when given, the presenter is the holder.
  /// Always audited; an audit failure denies.
  bool check_grant(const std::string& grant_id, const std::string& patient_id,
                   RecordSection section, Action action, EpochMs now,
                   const std::optional<std::string>& presenter = std::nullopt) override;
  std::optional<Grant> find_grant(const std::string& grant_id) const override;
  std::string holder_role(const std::string& principal_id) const override;

  std::size_t pump_email(MailSink& sink);

  // --- queries -----------------------------------------------------------

  std::optional<CaseSnapshot> get_case(const std::string& request_id) const;
  std::vector<CaseSnapshot> cases() const;
  std::vector<Grant> grants() const;
  std::vector<Delegation> delegations() const;
  std::vector<PendingItem> pending_for(const std::string& patient_id, EpochMs now) const;
  EmailQueue& emails() { return emails_; }
  const EmailQueue& emails() const { return emails_; }
  PasscodeBook& passcodes() { return passcodes_; }
  EnrollmentKeys& enrollment_keys() { return keys_; }
  ProofVerifier& verifier() { return verifier_; }
  const OrchestratorConfig& config() const { return config_; }

  /// Number of break-glass audit events still waiting for a durable write.
  std::size_t pending_audit() const;
  /// Retries pending break-glass audit writes. Returns how many remain.
  std::size_t flush_pending_audit();

  // --- persistence -------------------------------------------------------

  /// Folds one persisted event into memory.
  void apply(const AuditEvent& event);

  /// Dynamic state as of `audit.last_seq()`. Returns nullopt while
  /// break-glass events are still pending.
  std::optional<Json> checkpoint_json();
  /// Returns the seq the checkpoint covers. Throws CorruptCheckpoint.
  std::uint64_t restore_checkpoint(const Json& j);

  /// Fired after passcodes, keys, consumed proofs or the mail queue change.
  void on_secrets_changed(std::function<void()> cb);

 private:
  struct CaseSlot {
    std::mutex op_mu;
    bool live = false;
    CaseSnapshot rec;
  };
  using GrantMap = std::map<std::string, Grant>;

  CaseSlot* slot(const std::string& request_id) const;
  CaseSlot& reserve_slot(const std::string& request_id);
  std::string next_id(const char* prefix, std::uint64_t& counter);
  void note_id(const std::string& id, std::uint64_t& counter);

  AuditEvent make_event(AuditKind kind, const std::string& patient_id, const std::string& actor,
                        const std::string& role, EpochMs at,
                        const std::optional<std::string>& request_id = std::nullopt) const;
  void commit(AuditEvent event);
  void commit_breakglass(std::vector<AuditEvent> events);

  void dispatch_round(CaseSlot& s, EpochMs now, bool first);
  void apply_timeout(CaseSlot& s, EpochMs now, const std::string& reason);
  Grant run_breakglass(CaseSlot& s, const std::string& requester, const std::string& justification,
                       EpochMs now);
  Grant make_grant(const AccessRequest& req, GrantKind kind, EpochMs now);
  std::map<std::string, std::string> grant_detail(const Grant& g) const;

  void apply_locked(const AuditEvent& e);
  void push_history(CaseSnapshot& rec, ConsentEvent ev, EpochMs at, const std::string& actor);
  void insert_grant(const Grant& g);

  PolicyEngine& policy_;
  AuditLog& audit_;
  ChannelHub& hub_;
  const Clock& clock_;
  OrchestratorConfig config_;

  PasscodeBook passcodes_;
  EnrollmentKeys keys_;
  ProofVerifier verifier_;
  EmailQueue emails_;

  // Held shared by every mutating operation, exclusively by checkpoint_json.
  mutable std::shared_mutex quiesce_mu_;
  // Guards slots_, delegations_ and the id counters. Lock order: case op_mu,
  // then state_mu_.
  mutable std::shared_mutex state_mu_;
  std::map<std::string, std::unique_ptr<CaseSlot>> slots_;
  std::map<std::string, Delegation> delegations_;
  std::uint64_t request_counter_ = 0;
  std::uint64_t grant_counter_ = 0;
  std::uint64_t delegation_counter_ = 0;
  std::uint64_t notice_counter_ = 0;

  std::mutex devices_mu_;
  std::mutex grants_write_mu_;
  std::shared_ptr<const GrantMap> grants_;

  mutable std::mutex pending_mu_;
  std::deque<AuditEvent> pending_;

  std::function<void()> secrets_changed_;
};

}  // namespace consentgate
