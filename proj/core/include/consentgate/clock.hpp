#pragma once

#include <atomic>
#include <string>
#include <string_view>

#include "consentgate/domain.hpp"

namespace consentgate {

class Clock {
 public:
  virtual ~Clock() = default;
  virtual EpochMs now() const = 0;
};

class SystemClock final : public Clock {
 public:
  EpochMs now() const override;
};

/// Time only moves when advance() or set() is called. Used by the scenario
/// harness and by every timing-sensitive test.
class SimulatedClock final : public Clock {
 public:
  explicit SimulatedClock(EpochMs start = 0) : now_(start) {}

  EpochMs now() const override { return now_.load(std::memory_order_acquire); }
  void advance(DurationMs delta) { now_.fetch_add(delta, std::memory_order_acq_rel); }
  void set(EpochMs t) { now_.store(t, std::memory_order_release); }

 private:
  std::atomic<EpochMs> now_;
};

/// "2025-01-01T00:00:00.000Z"
std::string format_iso8601(EpochMs t);

/// Accepts "YYYY-MM-DDTHH:MM:SS[.fff]Z". Throws Error(InvalidArgument).
EpochMs parse_iso8601(std::string_view text);

}  // namespace consentgate
