#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "consentgate/codec.hpp"
#include "consentgate/domain.hpp"

namespace consentgate {

enum class AuditKind {
  auth_ok,
  auth_fail,
  acl_pass,
  acl_fail,
  dispatched,
  decision,
  duplicate_decision,
  timeout,
  grant_issued,
  grant_checked,
  break_glass,
  email_queued,
  email_sent,
  delegation_created,
  delegation_revoked,
  device_linked,
  device_unlinked,
  record_read,
  record_written,
};

template <>
struct EnumNames<AuditKind> {
  static constexpr std::array<std::string_view, 19> names{
      "auth_ok",          "auth_fail",          "acl_pass",        "acl_fail",
      "dispatched",       "decision",           "duplicate_decision", "timeout",
      "grant_issued",     "grant_checked",      "break_glass",     "email_queued",
      "email_sent",       "delegation_created", "delegation_revoked", "device_linked",
      "device_unlinked",  "record_read",        "record_written"};
};

/// One line of the patient-visible trail. Immutable once appended.
struct AuditEvent {
  std::uint64_t seq = 0;
  EpochMs at = 0;
  std::string patient_id;  // empty for events not tied to a patient (logins)
  std::string actor_id;
  std::string actor_role;
  AuditKind kind = AuditKind::auth_ok;
  std::optional<std::string> request_id;
  std::map<std::string, std::string> detail;

  bool operator==(const AuditEvent&) const = default;
};

inline constexpr int kAuditSchemaVersion = 1;

/// Canonical single-line JSON (no trailing newline). Byte-stable: equal events
/// always serialize to identical bytes.
std::string serialize_audit_line(const AuditEvent& event);

/// Throws Error(CorruptLog).
AuditEvent parse_audit_line(std::string_view line);

class AuditSink {
 public:
  virtual ~AuditSink() = default;
  /// Must not return until the line is durable. Throws Error(StorageFailure).
  virtual void write_line(const std::string& line) = 0;
};

class MemoryAuditSink final : public AuditSink {
 public:
  void write_line(const std::string& line) override;

  /// Subsequent writes throw StorageFailure while set.
  void set_failing(bool failing);
  /// The next `n` writes throw StorageFailure.
  void fail_next(int n);
  std::vector<std::string> lines() const;

 private:
  mutable std::mutex mu_;
  std::vector<std::string> lines_;
  bool failing_ = false;
  int fail_next_ = 0;
};

/// Appends to audit.jsonl. With `sync` set every line is fdatasync'ed before
/// write_line returns.
class FileAuditSink final : public AuditSink {
 public:
  FileAuditSink(const std::string& path, bool sync);
  ~FileAuditSink() override;
  FileAuditSink(const FileAuditSink&) = delete;
  FileAuditSink& operator=(const FileAuditSink&) = delete;

  void write_line(const std::string& line) override;

 private:
  int fd_ = -1;
  bool sync_;
  std::string path_;
};

struct AuditFilter {
  std::set<AuditKind> kinds;  // empty = all kinds
  std::optional<EpochMs> from;  // inclusive
  std::optional<EpochMs> to;    // exclusive
};

class AuditLog {
 public:
  explicit AuditLog(std::unique_ptr<AuditSink> sink);

  /// Assigns the next seq and persists the event before returning it.
  std::uint64_t append(AuditEvent event);

  /// All events for one patient, ascending seq, including rejected attempts.
  std::vector<AuditEvent> patient_view(const std::string& patient_id,
                                       const AuditFilter& filter = {}) const;

  std::vector<AuditEvent> events() const;
  std::vector<AuditEvent> events_after(std::uint64_t seq) const;
  std::vector<AuditEvent> events_for_request(const std::string& request_id) const;
  std::uint64_t last_seq() const;

  /// Installs an already-persisted history (from load_file) without writing it.
  void restore(std::vector<AuditEvent> events);

  /// Reads audit.jsonl. A final line without a newline is a torn write from an
  /// interrupted append and is dropped; any other defect throws CorruptLog.
  static std::vector<AuditEvent> load_file(const std::string& path);

  AuditSink& sink() { return *sink_; }

 private:
  mutable std::shared_mutex mu_;
  std::unique_ptr<AuditSink> sink_;
  std::vector<AuditEvent> events_;
  std::unordered_map<std::string, std::vector<std::size_t>> by_patient_;
  std::unordered_map<std::string, std::vector<std::size_t>> by_request_;
};

// ---------------------------------------------------------------------------
// Break-glass e-mail notices
// ---------------------------------------------------------------------------

struct EmailNotice {
  std::string notice_id;
  std::string grant_id;
  std::string request_id;
  std::string patient_id;
  std::string patient_email;
  std::string subject;
  std::string body;
  EpochMs queued_at = 0;
  std::optional<EpochMs> sent_at;
  int attempts = 0;

  bool operator==(const EmailNotice&) const = default;
};

void to_json(Json& j, const EmailNotice& n);
void from_json(const Json& j, EmailNotice& n);

class MailSink {
 public:
  virtual ~MailSink() = default;
  /// Returns false when the message could not be delivered.
  virtual bool send(const EmailNotice& notice) = 0;
};

/// Simulated mail server: remembers delivered notices and, when given a path,
/// appends them to mail_outbox.jsonl.
class SimulatedMailSink final : public MailSink {
 public:
  explicit SimulatedMailSink(std::string outbox_path = {}) : path_(std::move(outbox_path)) {}

  bool send(const EmailNotice& notice) override;

  void set_outbox_path(std::string path);
  /// The next `n` sends fail.
  void fail_next(int n);
  std::vector<EmailNotice> delivered() const;

 private:
  mutable std::mutex mu_;
  std::string path_;
  int fail_next_ = 0;
  std::vector<EmailNotice> delivered_;
};

class EmailQueue {
 public:
  explicit EmailQueue(int max_attempts = 50) : max_attempts_(max_attempts) {}

  /// Builds and stores the notice for an emergency grant. Throws
  /// Error(NonEmergencyGrant) for any other grant kind.
  EmailNotice queue_breakglass_notice(const Grant& grant, const AccessRequest& request,
                                      const Patient& patient, const std::string& requester_label,
                                      EpochMs now, const std::string& notice_id);

  /// Tries every unsent notice once. Each successful delivery gets an
  /// email_sent audit event. Returns the number sent.
  std::size_t pump(EpochMs now, MailSink& sink, AuditLog& audit);

  /// Replay hooks.
  void restore(const EmailNotice& notice);
  void mark_sent(const std::string& notice_id, EpochMs at, int attempts);

  std::vector<EmailNotice> notices() const;
  std::optional<EmailNotice> find_by_grant(const std::string& grant_id) const;

  Json to_json() const;
  void from_json(const Json& j);

 private:
  mutable std::mutex mu_;
  int max_attempts_;
  std::map<std::string, EmailNotice> notices_;
};

}  // namespace consentgate
