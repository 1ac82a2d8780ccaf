#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "consentgate/codec.hpp"
#include "consentgate/domain.hpp"

namespace consentgate {

enum class ProofKind { push_signed, sms_reply_code, voice_keypress, otp_code };

template <>
struct EnumNames<ProofKind> {
  static constexpr std::array<std::string_view, 4> names{"push_signed", "sms_reply_code",
                                                         "voice_keypress", "otp_code"};
};

/// What the patient's device shows. Metadata only, never record content.
struct ConsentPrompt {
  std::string request_id;
  std::string patient_display;
  std::string requester_display;
  AccessPurpose purpose = AccessPurpose::consultation;
  SectionSet sections;
  Action action = Action::read;
  EpochMs expires_at = 0;

  bool operator==(const ConsentPrompt&) const = default;
};

void to_json(Json& j, const ConsentPrompt& p);

struct ResponseProof {
  ProofKind kind = ProofKind::push_signed;
  std::string payload;
  std::string device_id;
};

void to_json(Json& j, const ResponseProof& p);
void from_json(const Json& j, ResponseProof& p);

struct Passcode {
  std::string code;  // six decimal digits
  std::string request_id;
  EpochMs issued_at = 0;
  DurationMs ttl_ms = 0;
  bool consumed = false;
};

struct DeliveryReceipt {
  bool delivered = false;
  EpochMs at = 0;
};

/// The proof a device of this kind answers with.
ProofKind proof_kind_for(DeviceKind kind) noexcept;

/// Every kind except smartphone push answers with a one-time code.
bool uses_passcode(DeviceKind kind) noexcept;

// ---------------------------------------------------------------------------
// Device linking rules
// ---------------------------------------------------------------------------

/// Returns the device list with `device` added in priority order. Throws
/// DuplicatePriority, DuplicateDevice or InvalidArgument.
std::vector<Device> with_device_linked(const std::vector<Device>& devices, const Device& device);

/// Throws UnknownDevice.
std::vector<Device> without_device(const std::vector<Device>& devices, const std::string& device_id);

// ---------------------------------------------------------------------------
// One-time passcodes
// ---------------------------------------------------------------------------

/// One live code per request. Issue and verify are linearizable: under any
/// number of concurrent verifiers a code is accepted at most once.
class PasscodeBook {
 public:
  explicit PasscodeBook(DurationMs ttl_ms = 300'000) : ttl_ms_(ttl_ms) {}

  Passcode issue_passcode(const std::string& request_id, EpochMs now);

  /// True iff the code matches, now < issued_at + ttl and it was not consumed.
  /// Success consumes the code. Never distinguishes the failure reason.
  bool verify_passcode(const std::string& request_id, std::string_view code, EpochMs now);

  Json to_json() const;
  void from_json(const Json& j);
  void on_change(std::function<void()> cb) { changed_ = std::move(cb); }

 private:
  mutable std::mutex mu_;
  DurationMs ttl_ms_;
  std::map<std::string, Passcode> live_;
  std::function<void()> changed_;
};

// ---------------------------------------------------------------------------
// Enrollment keys and proofs
// ---------------------------------------------------------------------------

class EnrollmentKeys {
 public:
  std::vector<std::uint8_t> generate(const std::string& owner, const std::string& device_id);
  std::optional<std::vector<std::uint8_t>> find(const std::string& owner,
                                                const std::string& device_id) const;
  void erase(const std::string& owner, const std::string& device_id);

  Json to_json() const;
  void from_json(const Json& j);
  void on_change(std::function<void()> cb) { changed_ = std::move(cb); }

 private:
  mutable std::mutex mu_;
  std::map<std::pair<std::string, std::string>, std::vector<std::uint8_t>> keys_;
  std::function<void()> changed_;
};

/// Device-side helper: the payload a push app sends back, "<decision>.<hex mac>"
/// where the MAC covers request id, device id and decision.
std::string sign_push_response(const std::vector<std::uint8_t>& key, std::string_view request_id,
                               std::string_view device_id, Decision decision);

class ProofVerifier {
 public:
  ProofVerifier(PasscodeBook& passcodes, EnrollmentKeys& keys) : passcodes_(passcodes), keys_(keys) {}

  /// Push proofs are checked against the device's enrollment key and must sign
  /// `decision`; code-based proofs go through the passcode book. Every proof is
  /// accepted at most once for the lifetime of the store.
  bool verify_proof(const ResponseProof& proof, const std::string& request_id,
                    const std::string& owner, Decision decision, EpochMs now);

  Json to_json() const;
  void from_json(const Json& j);
  void on_change(std::function<void()> cb) { changed_ = std::move(cb); }

 private:
  PasscodeBook& passcodes_;
  EnrollmentKeys& keys_;
  mutable std::mutex mu_;
  std::set<std::string> consumed_;
  std::function<void()> changed_;
};

// ---------------------------------------------------------------------------
// Transports
// ---------------------------------------------------------------------------

class Transport {
 public:
  virtual ~Transport() = default;
  /// Returns false when the message could not be handed over.
  virtual bool deliver(const ConsentPrompt& prompt, const Device& device) = 0;
};

/// In-process stand-in for a push/SMS/voice gateway with scripted failures.
class SimulatedTransport final : public Transport {
 public:
  bool deliver(const ConsentPrompt& prompt, const Device& device) override;

  void set_failure_rate(double rate, std::uint64_t seed);
  void fail_next(int n);
  void set_down(bool down);
  std::size_t delivered_count() const;

 private:
  mutable std::mutex mu_;
  double failure_rate_ = 0.0;
  std::mt19937_64 rng_{0};
  int fail_next_ = 0;
  bool down_ = false;
  std::size_t delivered_ = 0;
};

struct OutboxEntry {
  std::string request_id;
  std::string device_id;
  DeviceKind kind = DeviceKind::smartphone_push;
  int attempt = 0;
  EpochMs sent_at = 0;

  bool operator==(const OutboxEntry&) const = default;
};

void to_json(Json& j, const OutboxEntry& e);
void from_json(const Json& j, OutboxEntry& e);

/// What a simulated device received.
struct InboxMessage {
  ConsentPrompt prompt;
  std::string owner;
  std::string device_id;
  DeviceKind kind = DeviceKind::smartphone_push;
  std::optional<std::string> passcode;
  int attempt = 0;
  EpochMs at = 0;
};

/// Routes prompts to the transport bound to each device kind and keeps the
/// simulated world observable: the outbox (one entry per delivery, optionally
/// mirrored to outbox.jsonl) and per-device inboxes with enrolled keys.
class ChannelHub {
 public:
  ChannelHub();

  /// Throws Error(TransportUnavailable) when the transport fails.
  DeliveryReceipt dispatch(const ConsentPrompt& prompt, const std::string& owner,
                           const Device& device, int attempt,
                           const std::optional<std::string>& passcode, EpochMs now);

  void set_transport(DeviceKind kind, std::shared_ptr<Transport> transport);
  /// The built-in simulated transport for a kind.
  SimulatedTransport& simulated(DeviceKind kind);

  void set_outbox_path(std::string path);
  std::vector<OutboxEntry> outbox() const;
  std::vector<InboxMessage> inbox(const std::string& owner, const std::string& device_id) const;
  std::optional<InboxMessage> latest(const std::string& owner, const std::string& device_id,
                                     const std::string& request_id) const;
  /// Serialized prompts of every delivered message, for leakage scans.
  std::vector<std::string> serialized_prompts() const;

  /// Provisioning: the device learns its enrollment key.
  void enroll(const std::string& owner, const std::string& device_id, std::vector<std::uint8_t> key);
  std::optional<std::vector<std::uint8_t>> device_key(const std::string& owner,
                                                      const std::string& device_id) const;

 private:
  mutable std::mutex mu_;
  std::map<DeviceKind, std::shared_ptr<SimulatedTransport>> simulated_;
  std::map<DeviceKind, std::shared_ptr<Transport>> transports_;
  std::string outbox_path_;
  std::vector<OutboxEntry> outbox_;
  std::map<std::pair<std::string, std::string>, std::vector<InboxMessage>> inboxes_;
  std::map<std::pair<std::string, std::string>, std::vector<std::uint8_t>> device_keys_;
};

}  // namespace consentgate
