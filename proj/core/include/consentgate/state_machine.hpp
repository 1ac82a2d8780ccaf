#pragma once

#include <optional>
#include <span>

#include "consentgate/domain.hpp"

namespace consentgate {

bool is_terminal(ConsentState state) noexcept;

/// The consent workflow's transition table. Returns nullopt for every pair not
/// in the table; callers treat that as a protocol violation.
std::optional<ConsentState> transition(ConsentState state, ConsentEvent event) noexcept;

/// Same as transition() but throws Error(InvalidTransition).
ConsentState transition_or_throw(ConsentState state, ConsentEvent event);

/// Folds the transition function over a history starting from Created. Throws
/// Error(InvalidTransition) if any step is not in the table.
ConsentState fold_history(std::span<const HistoryEntry> history);

}  // namespace consentgate
