#include "consentgate/domain.hpp"

#include "consentgate/error.hpp"

namespace consentgate {

std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::InvalidTransition: return "InvalidTransition";
    case ErrorCode::MalformedEmergency: return "MalformedEmergency";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::UnknownPrincipal: return "UnknownPrincipal";
    case ErrorCode::UnknownPatient: return "UnknownPatient";
    case ErrorCode::BadCredentials: return "BadCredentials";
    case ErrorCode::EmptyCredential: return "EmptyCredential";
    case ErrorCode::UnknownTicket: return "UnknownTicket";
    case ErrorCode::ExpiredTicket: return "ExpiredTicket";
    case ErrorCode::DuplicateUser: return "DuplicateUser";
    case ErrorCode::MissingApprover: return "MissingApprover";
    case ErrorCode::AclDenied: return "AclDenied";
    case ErrorCode::NoChannelAvailable: return "NoChannelAvailable";
    case ErrorCode::TransportUnavailable: return "TransportUnavailable";
    case ErrorCode::UnknownRequest: return "UnknownRequest";
    case ErrorCode::UnauthorizedResponder: return "UnauthorizedResponder";
    case ErrorCode::BadProof: return "BadProof";
    case ErrorCode::EmptyJustification: return "EmptyJustification";
    case ErrorCode::NotRequester: return "NotRequester";
    case ErrorCode::RejectedAuth: return "RejectedAuth";
    case ErrorCode::RejectedAcl: return "RejectedAcl";
    case ErrorCode::InvalidWindow: return "InvalidWindow";
    case ErrorCode::DelegateWithoutDevice: return "DelegateWithoutDevice";
    case ErrorCode::UnknownDelegation: return "UnknownDelegation";
    case ErrorCode::DuplicatePriority: return "DuplicatePriority";
    case ErrorCode::DuplicateDevice: return "DuplicateDevice";
    case ErrorCode::UnknownDevice: return "UnknownDevice";
    case ErrorCode::StorageFailure: return "StorageFailure";
    case ErrorCode::NonEmergencyGrant: return "NonEmergencyGrant";
    case ErrorCode::GrantDenied: return "GrantDenied";
    case ErrorCode::SectionEmpty: return "SectionEmpty";
    case ErrorCode::CorruptCheckpoint: return "CorruptCheckpoint";
    case ErrorCode::CorruptLog: return "CorruptLog";
    case ErrorCode::Forbidden: return "Forbidden";
    case ErrorCode::NotFound: return "NotFound";
  }
  return "Unknown";
}

std::string join_sections(const SectionSet& sections) {
  std::string out;
  for (auto s : sections) {
    if (!out.empty()) out += ',';
    out += to_string(s);
  }
  return out;
}

SectionSet parse_sections(std::string_view text) {
  SectionSet out;
  while (!text.empty()) {
    const auto comma = text.find(',');
    const auto token = text.substr(0, comma);
    if (!token.empty()) out.insert(parse_enum_or_throw<RecordSection>(token));
    if (comma == std::string_view::npos) break;
    text.remove_prefix(comma + 1);
  }
  return out;
}

RequestCategory classify(AccessPurpose purpose, bool declared_emergency,
                         const std::optional<std::string>& justification) {
  if (!declared_emergency) return RequestCategory::normal;
  if (purpose != AccessPurpose::emergency_treatment) {
    throw Error(ErrorCode::MalformedEmergency, "emergency declared for a non-emergency purpose");
  }
  if (!justification || justification->empty()) {
    throw Error(ErrorCode::MalformedEmergency, "emergency declared without justification");
  }
  return RequestCategory::special;
}

}  // namespace consentgate
