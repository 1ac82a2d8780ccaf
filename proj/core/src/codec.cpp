#include "consentgate/codec.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cstdio>
#include <fstream>
#include <sstream>

#include "consentgate/error.hpp"

namespace consentgate {

namespace {

EpochMs time_field(const Json& j, const char* key) { return parse_iso8601(j.at(key).get<std::string>()); }

}  // namespace

Json sections_to_json(const SectionSet& sections) {
  Json arr = Json::array();
  for (auto s : sections) arr.push_back(std::string(to_string(s)));
  return arr;
}

SectionSet sections_from_json(const Json& j) {
  SectionSet out;
  for (const auto& s : j) out.insert(parse_enum_or_throw<RecordSection>(s.get<std::string>()));
  return out;
}

void to_json(Json& j, const Device& d) {
  j = Json{{"device_id", d.device_id}, {"kind", d.kind}, {"address", d.address},
           {"priority", d.priority}};
}

void from_json(const Json& j, Device& d) {
  d.device_id = j.at("device_id").get<std::string>();
  d.kind = j.at("kind").get<DeviceKind>();
  d.address = j.value("address", "");
  d.priority = j.at("priority").get<int>();
}

void to_json(Json& j, const Principal& p) {
  j = Json{{"principal_id", p.principal_id},
           {"display_name", p.display_name},
           {"role", p.role},
           {"credential_hash", p.credential_hash},
           {"linked_patients", p.linked_patients}};
}

void from_json(const Json& j, Principal& p) {
  p.principal_id = j.at("principal_id").get<std::string>();
  p.display_name = j.value("display_name", "");
  p.role = j.at("role").get<PrincipalRole>();
  p.credential_hash = j.value("credential_hash", "");
  p.linked_patients = j.value("linked_patients", std::set<std::string>{});
}

void to_json(Json& j, const Patient& p) {
  j = Json{{"patient_id", p.patient_id},
           {"display_name", p.display_name},
           {"devices", p.devices},
           {"email", p.email}};
  if (p.nominee) j["nominee"] = *p.nominee;
  if (!p.credential_hash.empty()) j["credential_hash"] = p.credential_hash;
}

void from_json(const Json& j, Patient& p) {
  p.patient_id = j.at("patient_id").get<std::string>();
  p.display_name = j.value("display_name", "");
  p.devices = j.value("devices", std::vector<Device>{});
  p.email = j.value("email", "");
  p.nominee.reset();
  if (j.contains("nominee") && !j.at("nominee").is_null()) p.nominee = j.at("nominee").get<std::string>();
  p.credential_hash = j.value("credential_hash", "");
}

void to_json(Json& j, const AccessRequest& r) {
  j = Json{{"request_id", r.request_id},       {"requester", r.requester},
           {"patient", r.patient},             {"sections", sections_to_json(r.sections)},
           {"action", r.action},               {"purpose", r.purpose},
           {"category", r.category},           {"submitted_at", format_iso8601(r.submitted_at)}};
  if (r.justification) j["justification"] = *r.justification;
}

void from_json(const Json& j, AccessRequest& r) {
  r.request_id = j.at("request_id").get<std::string>();
  r.requester = j.at("requester").get<std::string>();
  r.patient = j.at("patient").get<std::string>();
  r.sections = sections_from_json(j.at("sections"));
  r.action = j.at("action").get<Action>();
  r.purpose = j.at("purpose").get<AccessPurpose>();
  r.category = j.at("category").get<RequestCategory>();
  r.justification.reset();
  if (j.contains("justification")) r.justification = j.at("justification").get<std::string>();
  r.submitted_at = time_field(j, "submitted_at");
}

void to_json(Json& j, const HistoryEntry& h) {
  j = Json{{"event", h.event}, {"at", format_iso8601(h.at)}, {"actor", h.actor}};
}

void from_json(const Json& j, HistoryEntry& h) {
  h.event = j.at("event").get<ConsentEvent>();
  h.at = time_field(j, "at");
  h.actor = j.value("actor", "");
}

void to_json(Json& j, const ConsentCase& c) {
  j = Json{{"request", c.request}, {"state", c.state}, {"history", c.history}};
  if (c.active_channel) j["active_channel"] = *c.active_channel;
  if (c.deadline) j["deadline"] = format_iso8601(*c.deadline);
}

void from_json(const Json& j, ConsentCase& c) {
  c.request = j.at("request").get<AccessRequest>();
  c.state = j.at("state").get<ConsentState>();
  c.history = j.at("history").get<std::vector<HistoryEntry>>();
  c.active_channel.reset();
  c.deadline.reset();
  if (j.contains("active_channel")) c.active_channel = j.at("active_channel").get<std::string>();
  if (j.contains("deadline")) c.deadline = time_field(j, "deadline");
}

void to_json(Json& j, const Grant& g) {
  j = Json{{"grant_id", g.grant_id},
           {"request_id", g.request_id},
           {"holder", g.holder},
           {"scope",
            {{"patient_id", g.scope.patient_id},
             {"sections", sections_to_json(g.scope.sections)},
             {"action", g.scope.action}}},
           {"issued_at", format_iso8601(g.issued_at)},
           {"expires_at", format_iso8601(g.expires_at)},
           {"kind", g.kind}};
}

void from_json(const Json& j, Grant& g) {
  g.grant_id = j.at("grant_id").get<std::string>();
  g.request_id = j.at("request_id").get<std::string>();
  g.holder = j.value("holder", "");
  const auto& scope = j.at("scope");
  g.scope.patient_id = scope.at("patient_id").get<std::string>();
  g.scope.sections = sections_from_json(scope.at("sections"));
  g.scope.action = scope.at("action").get<Action>();
  g.issued_at = time_field(j, "issued_at");
  g.expires_at = time_field(j, "expires_at");
  g.kind = j.at("kind").get<GrantKind>();
}

void to_json(Json& j, const Delegation& d) {
  j = Json{{"delegation_id", d.delegation_id},
           {"delegator", d.delegator},
           {"delegate", d.delegate},
           {"window_start", format_iso8601(d.window_start)},
           {"window_end", format_iso8601(d.window_end)},
           {"revoked", d.revoked}};
}

void from_json(const Json& j, Delegation& d) {
  d.delegation_id = j.at("delegation_id").get<std::string>();
  d.delegator = j.at("delegator").get<std::string>();
  d.delegate = j.at("delegate").get<std::string>();
  d.window_start = time_field(j, "window_start");
  d.window_end = time_field(j, "window_end");
  d.revoked = j.value("revoked", false);
}

void to_json(Json& j, const DecisionRecord& d) {
  j = Json{{"request_id", d.request_id},
           {"responder_id", d.responder_id},
           {"responder_kind", d.responder_kind},
           {"decision", d.decision},
           {"channel", d.channel},
           {"decided_at", format_iso8601(d.decided_at)}};
}

void from_json(const Json& j, DecisionRecord& d) {
  d.request_id = j.at("request_id").get<std::string>();
  d.responder_id = j.at("responder_id").get<std::string>();
  d.responder_kind = j.at("responder_kind").get<ResponderKind>();
  d.decision = j.at("decision").get<Decision>();
  d.channel = j.at("channel").get<DeviceKind>();
  d.decided_at = time_field(j, "decided_at");
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::NotFound, "cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const std::string& path, const std::string& contents) {
  const std::string tmp = path + ".tmp";
  const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0600);
  if (fd < 0) throw Error(ErrorCode::StorageFailure, "cannot open " + tmp);
  std::size_t off = 0;
  while (off < contents.size()) {
    const auto n = ::write(fd, contents.data() + off, contents.size() - off);
    if (n < 0) {
      ::close(fd);
      throw Error(ErrorCode::StorageFailure, "write failed for " + tmp);
    }
    off += static_cast<std::size_t>(n);
  }
  ::fdatasync(fd);
  ::close(fd);
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    throw Error(ErrorCode::StorageFailure, "rename failed for " + path);
  }
}

}  // namespace consentgate
