#include "consentgate/state_machine.hpp"

#include <string>

#include "consentgate/error.hpp"

namespace consentgate {

bool is_terminal(ConsentState state) noexcept {
  switch (state) {
    case ConsentState::AutoApproved:
    case ConsentState::Approved:
    case ConsentState::Denied:
    case ConsentState::TimedOut:
    case ConsentState::EmergencyGranted:
    case ConsentState::RejectedAuth:
    case ConsentState::RejectedAcl:
      return true;
    default:
      return false;
  }
}

std::optional<ConsentState> transition(ConsentState state, ConsentEvent event) noexcept {
  using S = ConsentState;
  using E = ConsentEvent;

  // Break-glass is accepted from any live post-ACL state.
  if (event == E::BreakGlassInvoked &&
      (state == S::AclPassed || state == S::AwaitingPatient || state == S::AwaitingDelegate)) {
    return S::EmergencyGranted;
  }

  switch (state) {
    case S::Created:
      if (event == E::AuthOk) return S::Authenticated;
      if (event == E::AuthFail) return S::RejectedAuth;
      break;
    case S::Authenticated:
      if (event == E::AclOk) return S::AclPassed;
      if (event == E::AclFail) return S::RejectedAcl;
      break;
    case S::AclPassed:
      if (event == E::UsualProviderDetected) return S::AutoApproved;
      if (event == E::DispatchedToPatient) return S::AwaitingPatient;
      break;
    case S::AwaitingPatient:
      if (event == E::PatientApproved) return S::Approved;
      if (event == E::PatientDenied) return S::Denied;
      if (event == E::Timeout) return S::TimedOut;
      if (event == E::DelegateEscalation) return S::AwaitingDelegate;
      break;
    case S::AwaitingDelegate:
      if (event == E::DelegateApproved) return S::Approved;
      if (event == E::DelegateDenied) return S::Denied;
      if (event == E::Timeout) return S::TimedOut;
      break;
    default:
      break;
  }
  return std::nullopt;
}

ConsentState transition_or_throw(ConsentState state, ConsentEvent event) {
  if (auto next = transition(state, event)) return *next;
  throw Error(ErrorCode::InvalidTransition,
              std::string(to_string(state)) + " x " + std::string(to_string(event)));
}

ConsentState fold_history(std::span<const HistoryEntry> history) {
  ConsentState state = ConsentState::Created;
  for (const auto& entry : history) state = transition_or_throw(state, entry.event);
  return state;
}

}  // namespace consentgate
