#pragma once

#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <utility>
#include <vector>

#include "consentgate/audit.hpp"
#include "consentgate/codec.hpp"
#include "consentgate/domain.hpp"

namespace consentgate {

/// Whoever can say yes or no to a grant. The orchestrator is the only
/// production implementation.
class GrantAuthority {
 public:
  virtual ~GrantAuthority() = default;
  virtual bool check_grant(const std::string& grant_id, const std::string& patient_id,
                           RecordSection section, Action action, EpochMs now,
                           const std::optional<std::string>& presenter) = 0;
  virtual std::optional<Grant> find_grant(const std::string& grant_id) const = 0;
  /// Role label written to the audit trail for a grant holder.
  virtual std::string holder_role(const std::string& principal_id) const = 0;
};

struct SectionDocument {
  std::string patient_id;
  RecordSection section = RecordSection::demographics;
  std::string body;  // opaque bytes
  int version = 0;
  EpochMs updated_at = 0;
  std::string updated_by;

  bool operator==(const SectionDocument&) const = default;
};

void to_json(Json& j, const SectionDocument& d);
void from_json(const Json& j, SectionDocument& d);

/// Per-patient, per-section opaque documents. Every read and write goes
/// through GrantAuthority::check_grant. Versions are journalled to
/// records.jsonl and only count once their record_written event is in the
/// audit log.
class RecordStore {
 public:
  RecordStore(GrantAuthority& authority, AuditLog& audit) : authority_(authority), audit_(audit) {}

  /// Throws GrantDenied, SectionEmpty, StorageFailure.
  SectionDocument read_section(const std::string& grant_id, const std::string& patient_id,
                               RecordSection section, EpochMs now,
                               const std::optional<std::string>& presenter = std::nullopt);

  /// Returns the new version. Throws GrantDenied, StorageFailure.
  int write_section(const std::string& grant_id, const std::string& patient_id,
                    RecordSection section, std::string body, EpochMs now,
                    const std::optional<std::string>& presenter = std::nullopt);

  /// Operator seeding: installs version 1 of an empty section.
  void seed_section(const std::string& patient_id, RecordSection section, std::string body,
                    EpochMs now);

  /// {"records":[{patient_id, section, body_b64, version, updated_at, updated_by}]}
  Json export_snapshot() const;
  void import_snapshot(const Json& j, EpochMs now);

  /// Later writes append to this journal.
  void set_journal_path(std::string path);
  /// Rebuilds the store from a journal, keeping only seeded versions and
  /// versions confirmed by a record_written event.
  void load_journal(const std::string& path, const std::vector<AuditEvent>& events);

  std::size_t section_count() const;

 private:
  using Key = std::pair<std::string, RecordSection>;

  std::mutex& key_mutex(const Key& key);
  void journal(const SectionDocument& doc, bool seeded);

  GrantAuthority& authority_;
  AuditLog& audit_;
  mutable std::shared_mutex mu_;
  std::map<Key, SectionDocument> docs_;
  std::mutex locks_mu_;
  std::map<Key, std::unique_ptr<std::mutex>> key_locks_;
  std::mutex journal_mu_;
  std::string journal_path_;
};

}  // namespace consentgate
