#include "consentgate/audit.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <fstream>

#include "consentgate/clock.hpp"
#include "consentgate/error.hpp"

namespace consentgate {

std::string serialize_audit_line(const AuditEvent& event) {
  Json j{{"v", kAuditSchemaVersion},
         {"seq", event.seq},
         {"at", format_iso8601(event.at)},
         {"patient_id", event.patient_id},
         {"actor_id", event.actor_id},
         {"actor_role", event.actor_role},
         {"kind", std::string(to_string(event.kind))},
         {"detail", event.detail}};
  if (event.request_id) j["request_id"] = *event.request_id;
  return j.dump();
}

AuditEvent parse_audit_line(std::string_view line) {
  try {
    const auto j = Json::parse(line);
    if (j.at("v").get<int>() != kAuditSchemaVersion) {
      throw Error(ErrorCode::CorruptLog, "unsupported audit schema version");
    }
    AuditEvent ev;
    ev.seq = j.at("seq").get<std::uint64_t>();
    ev.at = parse_iso8601(j.at("at").get<std::string>());
    ev.patient_id = j.at("patient_id").get<std::string>();
    ev.actor_id = j.at("actor_id").get<std::string>();
    ev.actor_role = j.at("actor_role").get<std::string>();
    const auto kind = parse_enum<AuditKind>(j.at("kind").get<std::string>());
    if (!kind) throw Error(ErrorCode::CorruptLog, "unknown audit kind");
    ev.kind = *kind;
    if (j.contains("request_id")) ev.request_id = j.at("request_id").get<std::string>();
    ev.detail = j.at("detail").get<std::map<std::string, std::string>>();
    return ev;
  } catch (const Error& e) {
    if (e.code() == ErrorCode::CorruptLog) throw;
    throw Error(ErrorCode::CorruptLog, e.what());
  } catch (const std::exception& e) {
    throw Error(ErrorCode::CorruptLog, e.what());
  }
}

// --- sinks -----------------------------------------------------------------

void MemoryAuditSink::write_line(const std::string& line) {
  std::lock_guard lock(mu_);
  if (failing_) throw Error(ErrorCode::StorageFailure, "memory sink set to fail");
  if (fail_next_ > 0) {
    --fail_next_;
    throw Error(ErrorCode::StorageFailure, "memory sink injected failure");
  }
  lines_.push_back(line);
}

void MemoryAuditSink::set_failing(bool failing) {
  std::lock_guard lock(mu_);
  failing_ = failing;
}

void MemoryAuditSink::fail_next(int n) {
  std::lock_guard lock(mu_);
  fail_next_ = n;
}

std::vector<std::string> MemoryAuditSink::lines() const {
  std::lock_guard lock(mu_);
  return lines_;
}

FileAuditSink::FileAuditSink(const std::string& path, bool sync) : sync_(sync), path_(path) {
  fd_ = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0600);
  if (fd_ < 0) throw Error(ErrorCode::StorageFailure, "cannot open " + path);
}

FileAuditSink::~FileAuditSink() {
  if (fd_ >= 0) ::close(fd_);
}

void FileAuditSink::write_line(const std::string& line) {
  const std::string buf = line + "\n";
  std::size_t off = 0;
  while (off < buf.size()) {
    const auto n = ::write(fd_, buf.data() + off, buf.size() - off);
    if (n < 0) throw Error(ErrorCode::StorageFailure, "write failed for " + path_);
    off += static_cast<std::size_t>(n);
  }
  if (sync_ && ::fdatasync(fd_) != 0) throw Error(ErrorCode::StorageFailure, "fdatasync failed");
}

// --- log -------------------------------------------------------------------

AuditLog::AuditLog(std::unique_ptr<AuditSink> sink) : sink_(std::move(sink)) {
  if (!sink_) sink_ = std::make_unique<MemoryAuditSink>();
}

std::uint64_t AuditLog::append(AuditEvent event) {
  std::unique_lock lock(mu_);
  event.seq = events_.empty() ? 1 : events_.back().seq + 1;
  sink_->write_line(serialize_audit_line(event));  // throws before anything is recorded
  const std::size_t index = events_.size();
  if (!event.patient_id.empty()) by_patient_[event.patient_id].push_back(index);
  if (event.request_id) by_request_[*event.request_id].push_back(index);
  events_.push_back(std::move(event));
  return events_.back().seq;
}

std::vector<AuditEvent> AuditLog::patient_view(const std::string& patient_id,
                                               const AuditFilter& filter) const {
  std::shared_lock lock(mu_);
  std::vector<AuditEvent> out;
  const auto it = by_patient_.find(patient_id);
  if (it == by_patient_.end()) return out;
  for (auto index : it->second) {
    const auto& ev = events_[index];
    if (!filter.kinds.empty() && !filter.kinds.contains(ev.kind)) continue;
    if (filter.from && ev.at < *filter.from) continue;
    if (filter.to && ev.at >= *filter.to) continue;
    out.push_back(ev);
  }
  return out;
}

std::vector<AuditEvent> AuditLog::events() const {
  std::shared_lock lock(mu_);
  return events_;
}

std::vector<AuditEvent> AuditLog::events_after(std::uint64_t seq) const {
  std::shared_lock lock(mu_);
  std::vector<AuditEvent> out;
  for (const auto& ev : events_) {
    if (ev.seq > seq) out.push_back(ev);
  }
  return out;
}

std::vector<AuditEvent> AuditLog::events_for_request(const std::string& request_id) const {
  std::shared_lock lock(mu_);
  std::vector<AuditEvent> out;
  const auto it = by_request_.find(request_id);
  if (it == by_request_.end()) return out;
  for (auto index : it->second) out.push_back(events_[index]);
  return out;
}

std::uint64_t AuditLog::last_seq() const {
  std::shared_lock lock(mu_);
  return events_.empty() ? 0 : events_.back().seq;
}

void AuditLog::restore(std::vector<AuditEvent> events) {
  std::unique_lock lock(mu_);
  events_.clear();
  by_patient_.clear();
  by_request_.clear();
  std::uint64_t expected = 1;
  for (auto& ev : events) {
    if (ev.seq != expected++) throw Error(ErrorCode::CorruptLog, "seq gap in audit log");
    const std::size_t index = events_.size();
    if (!ev.patient_id.empty()) by_patient_[ev.patient_id].push_back(index);
    if (ev.request_id) by_request_[*ev.request_id].push_back(index);
    events_.push_back(std::move(ev));
  }
}

std::vector<AuditEvent> AuditLog::load_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::vector<AuditEvent> out;
  if (!in) return out;
  std::string contents((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::size_t pos = 0;
  std::uint64_t expected = 1;
  while (pos < contents.size()) {
    const auto nl = contents.find('\n', pos);
    if (nl == std::string::npos) break;  // torn final write
    const std::string_view line(contents.data() + pos, nl - pos);
    auto ev = parse_audit_line(line);
    if (ev.seq != expected++) throw Error(ErrorCode::CorruptLog, "seq gap in " + path);
    out.push_back(std::move(ev));
    pos = nl + 1;
  }
  return out;
}

// --- e-mail ----------------------------------------------------------------

void to_json(Json& j, const EmailNotice& n) {
  j = Json{{"notice_id", n.notice_id},
           {"grant_id", n.grant_id},
           {"request_id", n.request_id},
           {"patient_id", n.patient_id},
           {"patient_email", n.patient_email},
           {"subject", n.subject},
           {"body", n.body},
           {"queued_at", format_iso8601(n.queued_at)},
           {"attempts", n.attempts}};
  if (n.sent_at) j["sent_at"] = format_iso8601(*n.sent_at);
}

void from_json(const Json& j, EmailNotice& n) {
  n.notice_id = j.at("notice_id").get<std::string>();
  n.grant_id = j.at("grant_id").get<std::string>();
  n.request_id = j.at("request_id").get<std::string>();
  n.patient_id = j.at("patient_id").get<std::string>();
  n.patient_email = j.at("patient_email").get<std::string>();
  n.subject = j.at("subject").get<std::string>();
  n.body = j.at("body").get<std::string>();
  n.queued_at = parse_iso8601(j.at("queued_at").get<std::string>());
  n.attempts = j.value("attempts", 0);
  n.sent_at.reset();
  if (j.contains("sent_at")) n.sent_at = parse_iso8601(j.at("sent_at").get<std::string>());
}

bool SimulatedMailSink::send(const EmailNotice& notice) {
  std::lock_guard lock(mu_);
  if (fail_next_ > 0) {
    --fail_next_;
    return false;
  }
  if (!path_.empty()) {
    std::ofstream out(path_, std::ios::app | std::ios::binary);
    if (!out) return false;
    out << Json(notice).dump() << '\n';
    out.flush();
    if (!out) return false;
  }
  delivered_.push_back(notice);
  return true;
}

void SimulatedMailSink::set_outbox_path(std::string path) {
  std::lock_guard lock(mu_);
  path_ = std::move(path);
}

void SimulatedMailSink::fail_next(int n) {
  std::lock_guard lock(mu_);
  fail_next_ = n;
}

std::vector<EmailNotice> SimulatedMailSink::delivered() const {
  std::lock_guard lock(mu_);
  return delivered_;
}

EmailNotice EmailQueue::queue_breakglass_notice(const Grant& grant, const AccessRequest& request,
                                                const Patient& patient,
                                                const std::string& requester_label, EpochMs now,
                                                const std::string& notice_id) {
  if (grant.kind != GrantKind::emergency) {
    throw Error(ErrorCode::NonEmergencyGrant, grant.grant_id);
  }
  EmailNotice notice;
  notice.notice_id = notice_id;
  notice.grant_id = grant.grant_id;
  notice.request_id = request.request_id;
  notice.patient_id = patient.patient_id;
  notice.patient_email = patient.email;
  notice.subject = "Emergency access to your health record";
  notice.body = "An emergency access to your health record was opened without your approval.\n"
                "Requester: " + requester_label + "\n" +
                "Sections: " + join_sections(grant.scope.sections) + "\n" +
                "Action: " + std::string(to_string(grant.scope.action)) + "\n" +
                "Justification: " + request.justification.value_or("") + "\n" +
                "Issued at: " + format_iso8601(grant.issued_at) + "\n" +
                "Expires at: " + format_iso8601(grant.expires_at) + "\n" +
                "Grant: " + grant.grant_id + "\n" +
                "The requester is accountable for this access.\n";
  notice.queued_at = now;
  restore(notice);
  return notice;
}

std::size_t EmailQueue::pump(EpochMs now, MailSink& sink, AuditLog& audit) {
  std::vector<EmailNotice> pending;
  {
    std::lock_guard lock(mu_);
    for (const auto& [id, n] : notices_) {
      if (!n.sent_at && n.attempts < max_attempts_) pending.push_back(n);
    }
  }
  std::size_t sent = 0;
  for (auto& notice : pending) {
    ++notice.attempts;
    const bool ok = sink.send(notice);
    if (ok) {
      notice.sent_at = now;
      AuditEvent ev;
      ev.at = now;
      ev.patient_id = notice.patient_id;
      ev.actor_id = "system";
      ev.actor_role = "mailer";
      ev.kind = AuditKind::email_sent;
      ev.request_id = notice.request_id;
      ev.detail = {{"notice_id", notice.notice_id},
                   {"attempts", std::to_string(notice.attempts)},
                   {"to", notice.patient_email}};
      audit.append(std::move(ev));
      ++sent;
    }
    std::lock_guard lock(mu_);
    notices_[notice.notice_id] = notice;
  }
  return sent;
}

void EmailQueue::restore(const EmailNotice& notice) {
  std::lock_guard lock(mu_);
  notices_.try_emplace(notice.notice_id, notice);
}

void EmailQueue::mark_sent(const std::string& notice_id, EpochMs at, int attempts) {
  std::lock_guard lock(mu_);
  auto it = notices_.find(notice_id);
  if (it == notices_.end()) return;
  it->second.sent_at = at;
  it->second.attempts = attempts;
}

std::vector<EmailNotice> EmailQueue::notices() const {
  std::lock_guard lock(mu_);
  std::vector<EmailNotice> out;
  for (const auto& [id, n] : notices_) out.push_back(n);
  return out;
}

std::optional<EmailNotice> EmailQueue::find_by_grant(const std::string& grant_id) const {
  std::lock_guard lock(mu_);
  for (const auto& [id, n] : notices_) {
    if (n.grant_id == grant_id) return n;
  }
  return std::nullopt;
}

Json EmailQueue::to_json() const {
  std::lock_guard lock(mu_);
  Json arr = Json::array();
  for (const auto& [id, n] : notices_) arr.push_back(n);
  return arr;
}

void EmailQueue::from_json(const Json& j) {
  std::lock_guard lock(mu_);
  notices_.clear();
  for (const auto& item : j) {
    auto n = item.get<EmailNotice>();
    notices_.emplace(n.notice_id, std::move(n));
  }
}

}  // namespace consentgate
