#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace consentgate {

/// Machine-readable failure codes shared by every module and mirrored on the wire.
enum class ErrorCode {
  InvalidTransition,
  MalformedEmergency,
  InvalidArgument,
  UnknownPrincipal,
  UnknownPatient,
  BadCredentials,
  EmptyCredential,
  UnknownTicket,
  ExpiredTicket,
  DuplicateUser,
  MissingApprover,
  AclDenied,
  NoChannelAvailable,
  TransportUnavailable,
  UnknownRequest,
  UnauthorizedResponder,
  BadProof,
  EmptyJustification,
  NotRequester,
  RejectedAuth,
  RejectedAcl,
  InvalidWindow,
  DelegateWithoutDevice,
  UnknownDelegation,
  DuplicatePriority,
  DuplicateDevice,
  UnknownDevice,
  StorageFailure,
  NonEmergencyGrant,
  GrantDenied,
  SectionEmpty,
  CorruptCheckpoint,
  CorruptLog,
  Forbidden,
  NotFound,
};

std::string_view to_string(ErrorCode code) noexcept;

class Error : public std::runtime_error {
 public:
  explicit Error(ErrorCode code, const std::string& detail = {})
      : std::runtime_error(detail.empty() ? std::string(to_string(code))
                                          : std::string(to_string(code)) + ": " + detail),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace consentgate
