#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "consentgate/error.hpp"

namespace consentgate {

/// Milliseconds since the Unix epoch, UTC.
using EpochMs = std::int64_t;
using DurationMs = std::int64_t;

inline constexpr DurationMs kEmergencyGrantTtlMs = 432'000'000;  // five days

// ---------------------------------------------------------------------------
// Closed enumerations. Each has a name table used for the wire format; the
// order of the table is the enum order, which is also the "smallest first"
// order used wherever a deterministic pick is needed.
// ---------------------------------------------------------------------------

enum class PrincipalRole {
  usual_gp,
  gp,
  medical_specialist,
  allied_health,
  pharmacist,
  radiology_technician,
  health_insurer,
  system_operator,
};

enum class DeviceKind { smartphone_push, sms, voice_call, landline_voice, hardware_token };

enum class RecordSection {
  demographics,
  medical_history,
  mental_health,
  medications,
  pathology_results,
  radiology_results,
  documents,
};

enum class Action { read, write };

enum class AccessPurpose {
  monitor_health_conditions,
  review_health_information,
  review_path_rad_results,
  remind_and_recall,
  scan_and_store_results,
  target_high_risk_patient,
  consultation,
  emergency_treatment,
};

enum class RequestCategory { normal, special };

enum class ConsentState {
  Created,
  Authenticated,
  AclPassed,
  AutoApproved,
  AwaitingPatient,
  AwaitingDelegate,
  Approved,
  Denied,
  TimedOut,
  EmergencyGranted,
  RejectedAuth,
  RejectedAcl,
};

enum class ConsentEvent {
  AuthOk,
  AuthFail,
  AclOk,
  AclFail,
  UsualProviderDetected,
  DispatchedToPatient,
  PatientApproved,
  PatientDenied,
  DelegateEscalation,
  DelegateApproved,
  DelegateDenied,
  Timeout,
  BreakGlassInvoked,
};

enum class GrantKind { consented, auto_usual_provider, emergency };

enum class Decision { approve, deny };

enum class ResponderKind { patient, delegate };

enum class UserType { normal, manager };

template <typename E>
struct EnumNames;

template <>
struct EnumNames<PrincipalRole> {
  static constexpr std::array<std::string_view, 8> names{
      "usual_gp",   "gp",          "medical_specialist",   "allied_health",
      "pharmacist", "radiology_technician", "health_insurer", "system_operator"};
};
template <>
struct EnumNames<DeviceKind> {
  static constexpr std::array<std::string_view, 5> names{
      "smartphone_push", "sms", "voice_call", "landline_voice", "hardware_token"};
};
template <>
struct EnumNames<RecordSection> {
  static constexpr std::array<std::string_view, 7> names{
      "demographics",      "medical_history",   "mental_health", "medications",
      "pathology_results", "radiology_results", "documents"};
};
template <>
struct EnumNames<Action> {
  static constexpr std::array<std::string_view, 2> names{"read", "write"};
};
template <>
struct EnumNames<AccessPurpose> {
  static constexpr std::array<std::string_view, 8> names{
      "monitor_health_conditions", "review_health_information", "review_path_rad_results",
      "remind_and_recall",         "scan_and_store_results",    "target_high_risk_patient",
      "consultation",              "emergency_treatment"};
};
template <>
struct EnumNames<RequestCategory> {
  static constexpr std::array<std::string_view, 2> names{"normal", "special"};
};
template <>
struct EnumNames<ConsentState> {
  static constexpr std::array<std::string_view, 12> names{
      "Created",          "Authenticated", "AclPassed", "AutoApproved",
      "AwaitingPatient",  "AwaitingDelegate", "Approved", "Denied",
      "TimedOut",         "EmergencyGranted", "RejectedAuth", "RejectedAcl"};
};
template <>
struct EnumNames<ConsentEvent> {
  static constexpr std::array<std::string_view, 13> names{
      "AuthOk",           "AuthFail",        "AclOk",           "AclFail",
      "UsualProviderDetected", "DispatchedToPatient", "PatientApproved", "PatientDenied",
      "DelegateEscalation", "DelegateApproved", "DelegateDenied", "Timeout",
      "BreakGlassInvoked"};
};
template <>
struct EnumNames<GrantKind> {
  static constexpr std::array<std::string_view, 3> names{"consented", "auto_usual_provider",
                                                         "emergency"};
};
template <>
struct EnumNames<Decision> {
  static constexpr std::array<std::string_view, 2> names{"approve", "deny"};
};
template <>
struct EnumNames<ResponderKind> {
  static constexpr std::array<std::string_view, 2> names{"patient", "delegate"};
};
template <>
struct EnumNames<UserType> {
  static constexpr std::array<std::string_view, 2> names{"normal", "manager"};
};

template <typename E>
constexpr std::size_t enum_count() {
  return EnumNames<E>::names.size();
}

template <typename E>
constexpr std::string_view to_string(E value) {
  return EnumNames<E>::names[static_cast<std::size_t>(value)];
}

template <typename E>
std::optional<E> parse_enum(std::string_view text) {
  const auto& names = EnumNames<E>::names;
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i] == text) return static_cast<E>(i);
  }
  return std::nullopt;
}

/// Parses or throws Error(InvalidArgument) naming the bad value.
template <typename E>
E parse_enum_or_throw(std::string_view text) {
  if (auto v = parse_enum<E>(text)) return *v;
  throw Error(ErrorCode::InvalidArgument, "unrecognised value '" + std::string(text) + "'");
}

template <typename E>
std::vector<E> all_values() {
  std::vector<E> out;
  out.reserve(enum_count<E>());
  for (std::size_t i = 0; i < enum_count<E>(); ++i) out.push_back(static_cast<E>(i));
  return out;
}

using SectionSet = std::set<RecordSection>;

std::string join_sections(const SectionSet& sections);
SectionSet parse_sections(std::string_view comma_separated);

// ---------------------------------------------------------------------------
// Value types
// ---------------------------------------------------------------------------

struct Device {
  std::string device_id;
  DeviceKind kind = DeviceKind::smartphone_push;
  std::string address;
  int priority = 1;

  bool operator==(const Device&) const = default;
};

struct Principal {
  std::string principal_id;
  std::string display_name;
  PrincipalRole role = PrincipalRole::gp;
  std::string credential_hash;
  std::set<std::string> linked_patients;

  bool operator==(const Principal&) const = default;
};

struct Patient {
  std::string patient_id;
  std::string display_name;
  std::vector<Device> devices;  // kept sorted by priority
  std::optional<std::string> nominee;
  std::string email;
  std::string credential_hash;  // empty when the patient has no console login

  bool operator==(const Patient&) const = default;
};

struct AccessRequest {
  std::string request_id;
  std::string requester;
  std::string patient;
  SectionSet sections;
  Action action = Action::read;
  AccessPurpose purpose = AccessPurpose::consultation;
  RequestCategory category = RequestCategory::normal;
  std::optional<std::string> justification;
  EpochMs submitted_at = 0;

  bool operator==(const AccessRequest&) const = default;
};

struct HistoryEntry {
  ConsentEvent event;
  EpochMs at = 0;
  std::string actor;

  bool operator==(const HistoryEntry&) const = default;
};

struct ConsentCase {
  AccessRequest request;
  ConsentState state = ConsentState::Created;
  std::vector<HistoryEntry> history;
  std::optional<std::string> active_channel;
  std::optional<EpochMs> deadline;

  bool operator==(const ConsentCase&) const = default;
};

struct GrantScope {
  std::string patient_id;
  SectionSet sections;
  Action action = Action::read;

  bool operator==(const GrantScope&) const = default;
};

struct Grant {
  std::string grant_id;
  std::string request_id;
  std::string holder;  // requester the capability was issued to
  GrantScope scope;
  EpochMs issued_at = 0;
  EpochMs expires_at = 0;
  GrantKind kind = GrantKind::consented;

  bool operator==(const Grant&) const = default;
};

struct Delegation {
  std::string delegation_id;
  std::string delegator;
  std::string delegate;
  EpochMs window_start = 0;
  EpochMs window_end = 0;
  bool revoked = false;

  bool covers(EpochMs now) const { return !revoked && window_start <= now && now < window_end; }
  bool operator==(const Delegation&) const = default;
};

struct DecisionRecord {
  std::string request_id;
  std::string responder_id;
  ResponderKind responder_kind = ResponderKind::patient;
  Decision decision = Decision::deny;
  DeviceKind channel = DeviceKind::smartphone_push;
  EpochMs decided_at = 0;

  bool operator==(const DecisionRecord&) const = default;
};

struct RegistrationRecord {
  Principal principal;
  UserType usertype = UserType::normal;
  std::optional<std::string> linked_approver;
};

// ---------------------------------------------------------------------------
// Request categorisation
// ---------------------------------------------------------------------------

/// Life-threatening requests are special; everything else is normal. Throws
/// MalformedEmergency when an emergency is declared without the emergency
/// purpose or without a justification.
RequestCategory classify(AccessPurpose purpose, bool declared_emergency,
                         const std::optional<std::string>& justification);

}  // namespace consentgate
