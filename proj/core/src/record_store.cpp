#include "consentgate/record_store.hpp"

#include <fstream>
#include <set>
#include <sstream>
#include <tuple>

#include "consentgate/crypto.hpp"
#include "consentgate/error.hpp"

namespace consentgate {

void to_json(Json& j, const SectionDocument& d) {
  j = Json{{"patient_id", d.patient_id},
           {"section", d.section},
           {"body_b64", crypto::base64_encode(d.body)},
           {"version", d.version},
           {"updated_at", format_iso8601(d.updated_at)},
           {"updated_by", d.updated_by}};
}

void from_json(const Json& j, SectionDocument& d) {
  d.patient_id = j.at("patient_id").get<std::string>();
  d.section = j.at("section").get<RecordSection>();
  d.body = crypto::base64_decode(j.at("body_b64").get<std::string>());
  d.version = j.value("version", 1);
  d.updated_at = j.contains("updated_at") ? parse_iso8601(j.at("updated_at").get<std::string>()) : 0;
  d.updated_by = j.value("updated_by", std::string("seed"));
}

std::mutex& RecordStore::key_mutex(const Key& key) {
  std::lock_guard lock(locks_mu_);
  auto& m = key_locks_[key];
  if (!m) m = std::make_unique<std::mutex>();
  return *m;
}

void RecordStore::journal(const SectionDocument& doc, bool seeded) {
  std::lock_guard lock(journal_mu_);
  if (journal_path_.empty()) return;
  Json line = doc;
  line["seeded"] = seeded;
  std::ofstream out(journal_path_, std::ios::app | std::ios::binary);
  out << line.dump() << '\n';
  out.flush();
  if (!out) throw Error(ErrorCode::StorageFailure, "cannot append to " + journal_path_);
}

SectionDocument RecordStore::read_section(const std::string& grant_id,
                                          const std::string& patient_id, RecordSection section,
                                          EpochMs now,
                                          const std::optional<std::string>& presenter) {
  if (!authority_.check_grant(grant_id, patient_id, section, Action::read, now, presenter)) {
    throw Error(ErrorCode::GrantDenied, grant_id);
  }
  std::optional<SectionDocument> doc;
  {
    std::shared_lock lock(mu_);
    const auto it = docs_.find({patient_id, section});
    if (it != docs_.end()) doc = it->second;
  }
  if (!doc) throw Error(ErrorCode::SectionEmpty, std::string(to_string(section)));

  const auto grant = authority_.find_grant(grant_id);
  AuditEvent ev;
  ev.at = now;
  ev.patient_id = patient_id;
  ev.actor_id = grant->holder;
  ev.actor_role = authority_.holder_role(grant->holder);
  ev.kind = AuditKind::record_read;
  ev.request_id = grant->request_id;
  ev.detail = {{"grant_id", grant_id},
               {"section", std::string(to_string(section))},
               {"version", std::to_string(doc->version)}};
  audit_.append(std::move(ev));
  return *doc;
}

int RecordStore::write_section(const std::string& grant_id, const std::string& patient_id,
                               RecordSection section, std::string body, EpochMs now,
                               const std::optional<std::string>& presenter) {
  const Key key{patient_id, section};
  std::lock_guard key_lock(key_mutex(key));
  if (!authority_.check_grant(grant_id, patient_id, section, Action::write, now, presenter)) {
    throw Error(ErrorCode::GrantDenied, grant_id);
  }
  const auto grant = authority_.find_grant(grant_id);

  int version = 1;
  {
    std::shared_lock lock(mu_);
    const auto it = docs_.find(key);
    if (it != docs_.end()) version = it->second.version + 1;
  }
  SectionDocument doc{patient_id, section, std::move(body), version, now, grant->holder};
  journal(doc, false);

  AuditEvent ev;
  ev.at = now;
  ev.patient_id = patient_id;
  ev.actor_id = grant->holder;
  ev.actor_role = authority_.holder_role(grant->holder);
  ev.kind = AuditKind::record_written;
  ev.request_id = grant->request_id;
  ev.detail = {{"grant_id", grant_id},
               {"section", std::string(to_string(section))},
               {"version", std::to_string(version)},
               {"updated_by", grant->holder},
               {"bytes", std::to_string(doc.body.size())}};
  audit_.append(std::move(ev));

  std::unique_lock lock(mu_);
  docs_[key] = std::move(doc);
  return version;
}

void RecordStore::seed_section(const std::string& patient_id, RecordSection section,
                               std::string body, EpochMs now) {
  const Key key{patient_id, section};
  std::lock_guard key_lock(key_mutex(key));
  {
    std::shared_lock lock(mu_);
    if (docs_.contains(key)) {
      throw Error(ErrorCode::InvalidArgument, "section already seeded: " + patient_id + "/" +
                                                  std::string(to_string(section)));
    }
  }
  SectionDocument doc{patient_id, section, std::move(body), 1, now, "seed"};
  journal(doc, true);
  std::unique_lock lock(mu_);
  docs_[key] = std::move(doc);
}

Json RecordStore::export_snapshot() const {
  std::shared_lock lock(mu_);
  Json records = Json::array();
  for (const auto& [key, doc] : docs_) records.push_back(doc);
  return Json{{"records", records}};
}

void RecordStore::import_snapshot(const Json& j, EpochMs now) {
  for (const auto& item : j.at("records")) {
    auto doc = item.get<SectionDocument>();
    seed_section(doc.patient_id, doc.section, std::move(doc.body), now);
  }
}

void RecordStore::set_journal_path(std::string path) {
  std::lock_guard lock(journal_mu_);
  journal_path_ = std::move(path);
}

void RecordStore::load_journal(const std::string& path, const std::vector<AuditEvent>& events) {
  std::set<std::tuple<std::string, RecordSection, int>> confirmed;
  for (const auto& e : events) {
    if (e.kind != AuditKind::record_written) continue;
    const auto sec = parse_enum<RecordSection>(e.detail.at("section"));
    if (!sec) throw Error(ErrorCode::CorruptLog, "record_written with bad section");
    confirmed.emplace(e.patient_id, *sec, std::stoi(e.detail.at("version")));
  }

  std::ifstream in(path, std::ios::binary);
  std::map<Key, SectionDocument> docs;
  if (in) {
    std::stringstream buf;
    buf << in.rdbuf();
    const std::string text = buf.str();
    std::size_t pos = 0;
    while (pos < text.size()) {
      const auto nl = text.find('\n', pos);
      if (nl == std::string::npos) break;  // torn final line
      const std::string line = text.substr(pos, nl - pos);
      pos = nl + 1;
      if (line.empty()) continue;
      SectionDocument doc;
      bool seeded = false;
      try {
        const auto j = Json::parse(line);
        doc = j.get<SectionDocument>();
        seeded = j.value("seeded", false);
      } catch (const std::exception& ex) {
        throw Error(ErrorCode::CorruptLog, path + ": " + ex.what());
      }
      if (!seeded && !confirmed.contains({doc.patient_id, doc.section, doc.version})) continue;
      const Key key{doc.patient_id, doc.section};
      auto it = docs.find(key);
      if (it == docs.end() || it->second.version <= doc.version) docs[key] = std::move(doc);
    }
  }
  std::unique_lock lock(mu_);
  docs_ = std::move(docs);
}

std::size_t RecordStore::section_count() const {
  std::shared_lock lock(mu_);
  return docs_.size();
}

}  // namespace consentgate
