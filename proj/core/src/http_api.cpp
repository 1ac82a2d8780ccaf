#include "consentgate/http_api.hpp"

#include <sstream>

#include "consentgate/crypto.hpp"

namespace consentgate {

int http_status(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::UnknownTicket:
    case ErrorCode::ExpiredTicket:
    case ErrorCode::BadCredentials:
    case ErrorCode::RejectedAuth:
      return 401;
    case ErrorCode::AclDenied:
    case ErrorCode::RejectedAcl:
    case ErrorCode::UnauthorizedResponder:
    case ErrorCode::BadProof:
    case ErrorCode::GrantDenied:
    case ErrorCode::Forbidden:
    case ErrorCode::NotRequester:
      return 403;
    case ErrorCode::UnknownPrincipal:
    case ErrorCode::UnknownPatient:
    case ErrorCode::UnknownRequest:
    case ErrorCode::UnknownDelegation:
    case ErrorCode::UnknownDevice:
    case ErrorCode::SectionEmpty:
    case ErrorCode::NotFound:
      return 404;
    case ErrorCode::DuplicateUser:
    case ErrorCode::DuplicatePriority:
    case ErrorCode::DuplicateDevice:
    case ErrorCode::InvalidTransition:
      return 409;
    case ErrorCode::MalformedEmergency:
    case ErrorCode::InvalidArgument:
    case ErrorCode::EmptyCredential:
    case ErrorCode::MissingApprover:
    case ErrorCode::EmptyJustification:
    case ErrorCode::InvalidWindow:
    case ErrorCode::DelegateWithoutDevice:
    case ErrorCode::NonEmergencyGrant:
      return 422;
    case ErrorCode::NoChannelAvailable:
    case ErrorCode::TransportUnavailable:
    case ErrorCode::StorageFailure:
      return 503;
    case ErrorCode::CorruptCheckpoint:
    case ErrorCode::CorruptLog:
      return 500;
  }
  return 500;
}

const std::vector<RouteInfo>& ApiRouter::routes() {
  static const std::vector<RouteInfo> table{
      {"POST", "/v1/auth/login"},
      {"POST", "/v1/users"},
      {"POST", "/v1/requests"},
      {"POST", "/v1/requests/{id}/decision"},
      {"POST", "/v1/requests/{id}/break-glass"},
      {"GET", "/v1/requests/{id}"},
      {"POST", "/v1/patients/{id}/devices"},
      {"DELETE", "/v1/patients/{id}/devices/{device_id}"},
      {"POST", "/v1/patients/{id}/delegations"},
      {"DELETE", "/v1/delegations/{id}"},
      {"GET", "/v1/patients/{id}/audit"},
      {"GET", "/v1/patients/{id}/pending"},
      {"GET", "/v1/records/{patient}/{section}"},
      {"PUT", "/v1/records/{patient}/{section}"},
  };
  return table;
}

namespace {

ApiResponse error_response(ErrorCode code, const std::string& message) {
  return {http_status(code), Json{{"error", std::string(to_string(code))}, {"message", message}}};
}

std::vector<std::string> split_path(const std::string& path) {
  std::vector<std::string> out;
  std::string part;
  std::istringstream in(path);
  while (std::getline(in, part, '/')) {
    if (!part.empty()) out.push_back(part);
  }
  return out;
}

bool match(const std::string& pattern, const std::vector<std::string>& segs,
           std::map<std::string, std::string>& params) {
  const auto pat = split_path(pattern);
  if (pat.size() != segs.size()) return false;
  std::map<std::string, std::string> out;
  for (std::size_t i = 0; i < pat.size(); ++i) {
    if (pat[i].front() == '{') {
      out[pat[i].substr(1, pat[i].size() - 2)] = segs[i];
    } else if (pat[i] != segs[i]) {
      return false;
    }
  }
  params = std::move(out);
  return true;
}

Json parse_body(const ApiRequest& req) {
  if (req.body.empty()) return Json::object();
  try {
    auto j = Json::parse(req.body);
    if (!j.is_object()) throw Error(ErrorCode::InvalidArgument, "body must be a JSON object");
    return j;
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::InvalidArgument, std::string("malformed JSON: ") + e.what());
  }
}

std::string header(const ApiRequest& req, const std::string& name) {
  const auto it = req.headers.find(name);
  return it == req.headers.end() ? std::string() : it->second;
}

std::string bearer(const ApiRequest& req) {
  const std::string h = header(req, "authorization");
  const std::string prefix = "Bearer ";
  return h.rfind(prefix, 0) == 0 ? h.substr(prefix.size()) : std::string();
}

Json case_json(const CaseSnapshot& s, ConsentOrchestrator& orch) {
  Json j = s;
  j["request_id"] = s.c.request.request_id;
  if (s.grant_id) {
    if (const auto g = orch.find_grant(*s.grant_id)) j["grant"] = *g;
  }
  return j;
}

template <typename T>
T field(const Json& body, const char* key) {
  if (!body.contains(key)) throw Error(ErrorCode::InvalidArgument, std::string("missing field ") + key);
  return body.at(key).get<T>();
}

}  // namespace

ApiResponse ApiRouter::handle(const ApiRequest& req) {
  auto& orch = service_.orchestrator();
  auto& policy = service_.policy();
  const EpochMs now = service_.clock().now();

  auto is_operator = [&] {
    const auto& token = service_.config().operator_token;
    const std::string given = header(req, "x-operator-token");
    return !token.empty() && !given.empty() && crypto::constant_time_equal(token, given);
  };
  auto subject = [&] { return policy.verify_ticket(bearer(req), now); };
  auto require_patient_or_operator = [&](const std::string& patient_id) {
    if (is_operator()) return std::string("operator");
    const auto who = subject();
    if (who != patient_id) throw Error(ErrorCode::Forbidden, "not the patient");
    return who;
  };

  const auto segs = split_path(req.path);
  std::map<std::string, std::string> p;
  auto route = [&](const char* method, const char* pattern) {
    return req.method == method && match(pattern, segs, p);
  };

  try {
    if (route("POST", "/v1/auth/login")) {
      const auto body = parse_body(req);
      const auto ticket = policy.authenticate(body.value("principal_id", std::string()),
                                              body.value("password", std::string()));
      return {200, Json{{"ticket", ticket.ticket_id},
                        {"principal_id", ticket.principal_id},
                        {"issued_at", format_iso8601(ticket.issued_at)},
                        {"expires_at", format_iso8601(ticket.expires_at)}}};
    }

    if (route("POST", "/v1/users")) {
      if (!is_operator()) throw Error(ErrorCode::Forbidden, "operator token required");
      const auto body = parse_body(req);
      RegistrationRecord rec;
      rec.principal.principal_id = field<std::string>(body, "principal_id");
      rec.principal.display_name = body.value("display_name", rec.principal.principal_id);
      rec.principal.role = field<PrincipalRole>(body, "role");
      rec.principal.linked_patients = body.value("linked_patients", std::set<std::string>{});
      rec.usertype = body.contains("usertype") ? body.at("usertype").get<UserType>() : UserType::normal;
      if (body.contains("linked_approver") && !body.at("linked_approver").is_null()) {
        rec.linked_approver = body.at("linked_approver").get<std::string>();
      }
      const auto id = policy.register_user(rec, body.value("password", std::string()));
      return {201, Json{{"principal_id", id}, {"message", "User created successfully"}}};
    }

    if (route("POST", "/v1/requests")) {
      const auto body = parse_body(req);
      SubmitParams sp;
      sp.ticket_id = bearer(req);
      sp.patient_id = field<std::string>(body, "patient_id");
      sp.sections = sections_from_json(field<Json>(body, "sections"));
      sp.action = field<Action>(body, "action");
      sp.purpose = field<AccessPurpose>(body, "purpose");
      sp.declared_emergency = body.value("declared_emergency", false);
      if (body.contains("justification") && !body.at("justification").is_null()) {
        sp.justification = body.at("justification").get<std::string>();
      }
      const auto s = orch.submit_access_request(sp);
      Json out = case_json(s, orch);
      if (s.c.state == ConsentState::RejectedAuth) {
        out["error"] = "RejectedAuth";
        return {401, out};
      }
      if (s.c.state == ConsentState::RejectedAcl) {
        out["error"] = "RejectedAcl";
        return {403, out};
      }
      return {200, out};
    }

    if (route("POST", "/v1/requests/{id}/decision")) {
      const auto body = parse_body(req);
      const auto s = orch.record_decision(p["id"], field<std::string>(body, "responder_id"),
                                          field<Decision>(body, "decision"),
                                          field<ResponseProof>(body, "proof"));
      return {200, case_json(s, orch)};
    }

    if (route("POST", "/v1/requests/{id}/break-glass")) {
      const auto body = parse_body(req);
      const auto g = orch.break_glass(bearer(req), p["id"], body.value("justification", std::string()));
      Json out = case_json(*orch.get_case(p["id"]), orch);
      out["grant"] = g;
      return {200, out};
    }

    if (route("GET", "/v1/requests/{id}")) {
      const auto s = orch.get_case(p["id"]);
      if (!s) throw Error(ErrorCode::UnknownRequest, p["id"]);
      if (!is_operator()) {
        const auto who = subject();
        if (who != s->c.request.requester && who != s->c.request.patient) {
          throw Error(ErrorCode::Forbidden, "not a party to this request");
        }
      }
      return {200, case_json(*s, orch)};
    }

    if (route("POST", "/v1/patients/{id}/devices")) {
      const auto actor = require_patient_or_operator(p["id"]);
      const auto device = parse_body(req).get<Device>();
      const auto key = service_.link_device(p["id"], device, actor);
      Json out{{"patient_id", p["id"]}, {"device", device}};
      if (key) out["enrollment_key"] = crypto::to_hex(*key);
      return {201, out};
    }

    if (route("DELETE", "/v1/patients/{id}/devices/{device_id}")) {
      const auto actor = require_patient_or_operator(p["id"]);
      orch.unlink_device(p["id"], p["device_id"], actor);
      return {200, Json{{"patient_id", p["id"]}, {"device_id", p["device_id"]}, {"unlinked", true}}};
    }

    if (route("POST", "/v1/patients/{id}/delegations")) {
      const auto actor = require_patient_or_operator(p["id"]);
      const auto body = parse_body(req);
      const auto d = orch.create_delegation(p["id"], field<std::string>(body, "delegate"),
                                            parse_iso8601(field<std::string>(body, "window_start")),
                                            parse_iso8601(field<std::string>(body, "window_end")), actor);
      return {201, Json(d)};
    }

    if (route("DELETE", "/v1/delegations/{id}")) {
      std::optional<Delegation> d;
      for (const auto& x : orch.delegations()) {
        if (x.delegation_id == p["id"]) d = x;
      }
      if (!d) throw Error(ErrorCode::UnknownDelegation, p["id"]);
      const auto actor = require_patient_or_operator(d->delegator);
      orch.revoke_delegation(p["id"], actor);
      return {200, Json{{"delegation_id", p["id"]}, {"revoked", true}}};
    }

    if (route("GET", "/v1/patients/{id}/audit")) {
      require_patient_or_operator(p["id"]);
      AuditFilter filter;
      if (const auto it = req.query.find("kinds"); it != req.query.end() && !it->second.empty()) {
        std::istringstream in(it->second);
        std::string k;
        while (std::getline(in, k, ',')) filter.kinds.insert(parse_enum_or_throw<AuditKind>(k));
      }
      if (const auto it = req.query.find("from"); it != req.query.end()) filter.from = parse_iso8601(it->second);
      if (const auto it = req.query.find("to"); it != req.query.end()) filter.to = parse_iso8601(it->second);
      Json events = Json::array();
      for (const auto& e : service_.audit().patient_view(p["id"], filter)) {
        events.push_back(Json::parse(serialize_audit_line(e)));
      }
      const auto count = events.size();
      return {200, Json{{"patient_id", p["id"]}, {"events", std::move(events)}, {"count", count}}};
    }

    if (route("GET", "/v1/patients/{id}/pending")) {
      require_patient_or_operator(p["id"]);
      if (!policy.registry().has_patient(p["id"])) throw Error(ErrorCode::UnknownPatient, p["id"]);
      return {200, Json{{"patient_id", p["id"]}, {"pending", orch.pending_for(p["id"], now)}}};
    }

    if (route("GET", "/v1/records/{patient}/{section}")) {
      const auto who = subject();
      std::string grant_id = header(req, "x-grant-id");
      if (const auto it = req.query.find("grant_id"); it != req.query.end()) grant_id = it->second;
      const auto doc = service_.records().read_section(
          grant_id, p["patient"], parse_enum_or_throw<RecordSection>(p["section"]), now, who);
      return {200, Json(doc)};
    }

    if (route("PUT", "/v1/records/{patient}/{section}")) {
      const auto who = subject();
      const auto body = parse_body(req);
      std::string content;
      if (body.contains("body_b64")) {
        content = crypto::base64_decode(body.at("body_b64").get<std::string>());
      } else {
        content = field<std::string>(body, "body");
      }
      const auto version = service_.records().write_section(
          field<std::string>(body, "grant_id"), p["patient"],
          parse_enum_or_throw<RecordSection>(p["section"]), std::move(content), now, who);
      return {200, Json{{"patient_id", p["patient"]}, {"section", p["section"]}, {"version", version}}};
    }

    for (const auto& r : routes()) {
      if (match(r.pattern, segs, p)) {
        return {405, Json{{"error", "MethodNotAllowed"}, {"message", req.method + " " + req.path}}};
      }
    }
    return error_response(ErrorCode::NotFound, "no route for " + req.method + " " + req.path);
  } catch (const Error& e) {
    return error_response(e.code(), e.what());
  } catch (const Json::exception& e) {
    return error_response(ErrorCode::InvalidArgument, e.what());
  }
}

}  // namespace consentgate
