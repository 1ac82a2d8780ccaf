#include "consentgate/orchestrator.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>

#include "consentgate/error.hpp"
#include "consentgate/state_machine.hpp"

namespace consentgate {

namespace {

constexpr const char* kSystem = "system";

std::string iso(EpochMs t) { return format_iso8601(t); }

const std::string& need(const AuditEvent& e, const char* key) {
  const auto it = e.detail.find(key);
  if (it == e.detail.end()) {
    throw Error(ErrorCode::CorruptLog, "event " + std::to_string(e.seq) + " lacks " + key);
  }
  return it->second;
}

std::optional<std::string> opt(const AuditEvent& e, const char* key) {
  const auto it = e.detail.find(key);
  if (it == e.detail.end()) return std::nullopt;
  return it->second;
}

template <typename E>
E need_enum(const AuditEvent& e, const char* key) {
  const auto v = parse_enum<E>(need(e, key));
  if (!v) throw Error(ErrorCode::CorruptLog, std::string("bad ") + key + " in event " + std::to_string(e.seq));
  return *v;
}

bool is_blank(const std::optional<std::string>& s) {
  return !s || std::all_of(s->begin(), s->end(), [](unsigned char c) { return std::isspace(c); });
}

bool awaiting(ConsentState s) {
  return s == ConsentState::AwaitingPatient || s == ConsentState::AwaitingDelegate;
}

int next_attempt_no(const CaseSnapshot& rec) {
  int n = 0;
  for (const auto& a : rec.attempts) {
    if (a.outcome != DispatchOutcome::no_channel) ++n;
  }
  return n + 1;
}

}  // namespace

// --- configuration --------------------------------------------------------

DurationMs OrchestratorConfig::channel_timeout(DeviceKind kind) const {
  const auto it = channel_timeout_ms.find(kind);
  return it == channel_timeout_ms.end() ? 120'000 : it->second;
}

void OrchestratorConfig::validate() const {
  for (const auto& [kind, ms] : channel_timeout_ms) {
    if (ms <= 0) throw Error(ErrorCode::InvalidArgument, "channel_timeout_ms must be > 0");
  }
  if (overall_deadline_ms <= 0 || consented_grant_ttl_ms <= 0 || max_channel_attempts <= 0 ||
      passcode_ttl_ms <= 0) {
    throw Error(ErrorCode::InvalidArgument, "orchestrator timings must be > 0");
  }
}

void to_json(Json& j, const OrchestratorConfig& c) {
  Json timeouts = Json::object();
  for (const auto& [kind, ms] : c.channel_timeout_ms) timeouts[std::string(to_string(kind))] = ms;
  j = Json{{"channel_timeout_ms", timeouts},
           {"overall_deadline_ms", c.overall_deadline_ms},
           {"consented_grant_ttl_ms", c.consented_grant_ttl_ms},
           {"emergency_grant_ttl_ms", OrchestratorConfig::emergency_grant_ttl_ms},
           {"max_channel_attempts", c.max_channel_attempts},
           {"passcode_ttl_ms", c.passcode_ttl_ms}};
}

void from_json(const Json& j, OrchestratorConfig& c) {
  if (j.contains("emergency_grant_ttl_ms") &&
      j.at("emergency_grant_ttl_ms").get<DurationMs>() != OrchestratorConfig::emergency_grant_ttl_ms) {
    throw Error(ErrorCode::InvalidArgument, "emergency_grant_ttl_ms is fixed at 432000000");
  }
  if (j.contains("channel_timeout_ms")) {
    for (const auto& [kind, ms] : j.at("channel_timeout_ms").items()) {
      c.channel_timeout_ms[parse_enum_or_throw<DeviceKind>(kind)] = ms.get<DurationMs>();
    }
  }
  c.overall_deadline_ms = j.value("overall_deadline_ms", c.overall_deadline_ms);
  c.consented_grant_ttl_ms = j.value("consented_grant_ttl_ms", c.consented_grant_ttl_ms);
  c.max_channel_attempts = j.value("max_channel_attempts", c.max_channel_attempts);
  c.passcode_ttl_ms = j.value("passcode_ttl_ms", c.passcode_ttl_ms);
  c.validate();
}

// --- JSON views -----------------------------------------------------------

void to_json(Json& j, const DispatchAttempt& a) {
  j = Json{{"attempt", a.attempt},         {"target", a.target},
           {"target_kind", a.target_kind}, {"device_id", a.device_id},
           {"device_kind", a.device_kind}, {"outcome", a.outcome},
           {"at", iso(a.at)}};
}

void from_json(const Json& j, DispatchAttempt& a) {
  a.attempt = j.at("attempt").get<int>();
  a.target = j.at("target").get<std::string>();
  a.target_kind = j.at("target_kind").get<TargetKind>();
  a.device_id = j.at("device_id").get<std::string>();
  a.device_kind = j.at("device_kind").get<DeviceKind>();
  a.outcome = j.at("outcome").get<DispatchOutcome>();
  a.at = parse_iso8601(j.at("at").get<std::string>());
}

void to_json(Json& j, const CaseSnapshot& s) {
  j = s.c;
  j["requester_role"] = s.requester_role ? Json(*s.requester_role) : Json(nullptr);
  j["attempts"] = s.attempts;
  j["channel_deadline"] = s.channel_deadline ? Json(iso(*s.channel_deadline)) : Json(nullptr);
  j["decision"] = s.decision ? Json(*s.decision) : Json(nullptr);
  j["grant_id"] = s.grant_id ? Json(*s.grant_id) : Json(nullptr);
  j["breakglass_justification"] =
      s.breakglass_justification ? Json(*s.breakglass_justification) : Json(nullptr);
}

void from_json(const Json& j, CaseSnapshot& s) {
  s.c = j.get<ConsentCase>();
  s.requester_role.reset();
  if (!j.at("requester_role").is_null()) s.requester_role = j.at("requester_role").get<PrincipalRole>();
  s.attempts = j.at("attempts").get<std::vector<DispatchAttempt>>();
  s.channel_deadline.reset();
  if (!j.at("channel_deadline").is_null()) {
    s.channel_deadline = parse_iso8601(j.at("channel_deadline").get<std::string>());
  }
  s.decision.reset();
  if (!j.at("decision").is_null()) s.decision = j.at("decision").get<DecisionRecord>();
  s.grant_id.reset();
  if (!j.at("grant_id").is_null()) s.grant_id = j.at("grant_id").get<std::string>();
  s.breakglass_justification.reset();
  if (!j.at("breakglass_justification").is_null()) {
    s.breakglass_justification = j.at("breakglass_justification").get<std::string>();
  }
}

void to_json(Json& j, const PendingItem& p) {
  j = Json{{"request_id", p.request_id},
           {"requester", {{"id", p.requester_id}, {"name", p.requester_name}, {"role", p.requester_role}}},
           {"purpose", p.purpose},
           {"sections", sections_to_json(p.sections)},
           {"action", p.action},
           {"state", p.state},
           {"deadline", iso(p.deadline)},
           {"remaining_ms", p.remaining_ms}};
}

// --- construction ---------------------------------------------------------

ConsentOrchestrator::ConsentOrchestrator(PolicyEngine& policy, AuditLog& audit, ChannelHub& hub,
                                         const Clock& clock, OrchestratorConfig config)
    : policy_(policy),
      audit_(audit),
      hub_(hub),
      clock_(clock),
      config_(std::move(config)),
      passcodes_(config_.passcode_ttl_ms),
      verifier_(passcodes_, keys_),
      grants_(std::make_shared<const GrantMap>()) {
  config_.validate();
  auto notify = [this] {
    if (secrets_changed_) secrets_changed_();
  };
  passcodes_.on_change(notify);
  keys_.on_change(notify);
  verifier_.on_change(notify);
}

ConsentOrchestrator::~ConsentOrchestrator() = default;

void ConsentOrchestrator::on_secrets_changed(std::function<void()> cb) {
  secrets_changed_ = std::move(cb);
}

ConsentOrchestrator::CaseSlot* ConsentOrchestrator::slot(const std::string& request_id) const {
  std::shared_lock lock(state_mu_);
  const auto it = slots_.find(request_id);
  if (it == slots_.end() || !it->second->live) return nullptr;
  return it->second.get();
}

ConsentOrchestrator::CaseSlot& ConsentOrchestrator::reserve_slot(const std::string& request_id) {
  std::unique_lock lock(state_mu_);
  auto& s = slots_[request_id];
  if (!s) s = std::make_unique<CaseSlot>();
  return *s;
}

std::string ConsentOrchestrator::next_id(const char* prefix, std::uint64_t& counter) {
  std::unique_lock lock(state_mu_);
  char buf[48];
  std::snprintf(buf, sizeof buf, "%s-%06llu", prefix, static_cast<unsigned long long>(++counter));
  return buf;
}

void ConsentOrchestrator::note_id(const std::string& id, std::uint64_t& counter) {
  const auto dash = id.rfind('-');
  if (dash == std::string::npos) return;
  try {
    counter = std::max<std::uint64_t>(counter, std::stoull(id.substr(dash + 1)));
  } catch (const std::exception&) {
  }
}

AuditEvent ConsentOrchestrator::make_event(AuditKind kind, const std::string& patient_id,
                                           const std::string& actor, const std::string& role,
                                           EpochMs at,
                                           const std::optional<std::string>& request_id) const {
  AuditEvent e;
  e.kind = kind;
  e.patient_id = patient_id;
  e.actor_id = actor;
  e.actor_role = role;
  e.at = at;
  e.request_id = request_id;
  return e;
}

void ConsentOrchestrator::commit(AuditEvent event) {
  flush_pending_audit();
  audit_.append(event);
  apply(event);
}

void ConsentOrchestrator::commit_breakglass(std::vector<AuditEvent> events) {
  for (const auto& e : events) apply(e);
  {
    std::lock_guard lock(pending_mu_);
    for (auto& e : events) pending_.push_back(std::move(e));
  }
  flush_pending_audit();
}

std::size_t ConsentOrchestrator::flush_pending_audit() {
  std::lock_guard lock(pending_mu_);
  while (!pending_.empty()) {
    try {
      audit_.append(pending_.front());
    } catch (const Error& e) {
      if (e.code() != ErrorCode::StorageFailure) throw;
      break;
    }
    pending_.pop_front();
  }
  return pending_.size();
}

std::size_t ConsentOrchestrator::pending_audit() const {
  std::lock_guard lock(pending_mu_);
  return pending_.size();
}

std::string ConsentOrchestrator::holder_role(const std::string& principal_id) const {
  if (const auto p = policy_.registry().principal(principal_id)) return std::string(to_string(p->role));
  if (policy_.registry().has_patient(principal_id)) return "patient";
  return "unknown";
}

// --- channel selection ----------------------------------------------------

std::vector<ChannelTarget> ConsentOrchestrator::effective_targets(const std::string& patient_id,
                                                                  EpochMs now) const {
  const auto patient = policy_.registry().patient(patient_id);
  if (!patient) throw Error(ErrorCode::UnknownPatient, patient_id);

  std::vector<ChannelTarget> out;
  if (!patient->devices.empty()) {
    for (const auto& d : patient->devices) out.push_back({patient_id, TargetKind::patient, d});
  } else if (patient->nominee) {
    if (const auto nominee = policy_.registry().patient(*patient->nominee)) {
      for (const auto& d : nominee->devices) out.push_back({nominee->patient_id, TargetKind::nominee, d});
    }
  }

  std::vector<Delegation> active;
  {
    std::shared_lock lock(state_mu_);
    for (const auto& [id, d] : delegations_) {
      if (d.delegator == patient_id && d.covers(now)) active.push_back(d);
    }
  }
  for (const auto& d : active) {
    if (const auto delegate = policy_.registry().patient(d.delegate)) {
      for (const auto& dev : delegate->devices) {
        out.push_back({delegate->patient_id, TargetKind::delegate, dev});
      }
    }
  }
  return out;
}

ChannelTarget ConsentOrchestrator::select_channel(const std::string& patient_id, int attempt_no,
                                                  EpochMs now) const {
  if (attempt_no < 1) throw Error(ErrorCode::InvalidArgument, "attempt_no must be >= 1");
  const auto targets = effective_targets(patient_id, now);
  if (static_cast<std::size_t>(attempt_no) > targets.size()) {
    throw Error(ErrorCode::NoChannelAvailable,
                patient_id + " has " + std::to_string(targets.size()) + " channel(s)");
  }
  return targets[static_cast<std::size_t>(attempt_no - 1)];
}

// --- submission -----------------------------------------------------------

CaseSnapshot ConsentOrchestrator::submit_access_request(const SubmitParams& params) {
  std::shared_lock quiesce(quiesce_mu_);
  const EpochMs now = clock_.now();
  if (params.sections.empty()) throw Error(ErrorCode::InvalidArgument, "sections must not be empty");
  const auto patient = policy_.registry().patient(params.patient_id);
  if (!patient) throw Error(ErrorCode::UnknownPatient, params.patient_id);
  const RequestCategory category =
      classify(params.purpose, params.declared_emergency, params.justification);

  std::optional<std::string> subject;
  std::string auth_error;
  try {
    subject = policy_.verify_ticket(params.ticket_id, now);
    if (!policy_.registry().principal(*subject)) {
      auth_error = "NotAProvider";
    }
  } catch (const Error& e) {
    auth_error = std::string(to_string(e.code()));
  }

  const std::string id = next_id("req", request_counter_);
  CaseSlot& s = reserve_slot(id);
  std::lock_guard op(s.op_mu);

  std::map<std::string, std::string> base{{"stage", "request"},
                                          {"purpose", std::string(to_string(params.purpose))},
                                          {"sections", join_sections(params.sections)},
                                          {"action", std::string(to_string(params.action))},
                                          {"category", std::string(to_string(category))}};
  if (params.justification && !params.justification->empty()) {
    base["justification"] = *params.justification;
  }

  if (!auth_error.empty()) {
    auto ev = make_event(AuditKind::auth_fail, params.patient_id, subject.value_or("unknown"),
                         "unknown", now, id);
    ev.detail = base;
    ev.detail["reason"] = auth_error;
    commit(std::move(ev));
    return s.rec;
  }

  const PrincipalRole role = policy_.registry().effective_role(*subject, params.patient_id);
  const std::string role_name(to_string(role));
  auto ok = make_event(AuditKind::auth_ok, params.patient_id, *subject, role_name, now, id);
  ok.detail = base;
  commit(std::move(ok));

  const auto acl = policy_.acl_check(role, params.sections, params.action);
  if (!acl.permitted) {
    auto ev = make_event(AuditKind::acl_fail, params.patient_id, *subject, role_name, now, id);
    ev.detail = {{"role", role_name}, {"violating", std::string(to_string(*acl.violating))}};
    commit(std::move(ev));
    return s.rec;
  }
  auto pass = make_event(AuditKind::acl_pass, params.patient_id, *subject, role_name, now, id);
  pass.detail = {{"role", role_name}};
  commit(std::move(pass));

  if (category == RequestCategory::special) {
    run_breakglass(s, *subject, *params.justification, now);
    return s.rec;
  }

  if (role == PrincipalRole::usual_gp) {
    const Grant g = make_grant(s.rec.c.request, GrantKind::auto_usual_provider, now);
    auto ev = make_event(AuditKind::grant_issued, params.patient_id, *subject, role_name, now, id);
    ev.detail = grant_detail(g);
    commit(std::move(ev));
    return s.rec;
  }

  dispatch_round(s, now, true);
  return s.rec;
}

Grant ConsentOrchestrator::make_grant(const AccessRequest& req, GrantKind kind, EpochMs now) {
  Grant g;
  g.grant_id = next_id("gr", grant_counter_);
  g.request_id = req.request_id;
  g.holder = req.requester;
  g.scope = {req.patient, req.sections, req.action};
  g.issued_at = now;
  g.kind = kind;
  g.expires_at = now + (kind == GrantKind::emergency ? OrchestratorConfig::emergency_grant_ttl_ms
                                                     : config_.consented_grant_ttl_ms);
  return g;
}

std::map<std::string, std::string> ConsentOrchestrator::grant_detail(const Grant& g) const {
  return {{"grant_id", g.grant_id},
          {"kind", std::string(to_string(g.kind))},
          {"holder", g.holder},
          {"sections", join_sections(g.scope.sections)},
          {"action", std::string(to_string(g.scope.action))},
          {"issued_at", iso(g.issued_at)},
          {"expires_at", iso(g.expires_at)}};
}

// --- dispatch -------------------------------------------------------------

void ConsentOrchestrator::dispatch_round(CaseSlot& s, EpochMs now, bool first) {
  const AccessRequest& req = s.rec.c.request;
  const auto patient = policy_.registry().patient(req.patient);
  const auto requester = policy_.registry().principal(req.requester);
  const EpochMs deadline = first ? now + config_.overall_deadline_ms : s.rec.c.deadline.value_or(now);

  bool delivered = false;
  bool tried = false;
  while (!delivered) {
    const int attempt = next_attempt_no(s.rec);
    if (attempt > config_.max_channel_attempts) break;
    std::optional<ChannelTarget> target;
    try {
      target = select_channel(req.patient, attempt, now);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::NoChannelAvailable) throw;
      break;
    }
    tried = true;

    ConsentPrompt prompt{req.request_id,
                         patient ? patient->display_name : req.patient,
                         requester ? requester->display_name : req.requester,
                         req.purpose,
                         req.sections,
                         req.action,
                         deadline};
    std::optional<std::string> code;
    if (uses_passcode(target->device.kind)) code = passcodes_.issue_passcode(req.request_id, now).code;

    DispatchOutcome outcome = DispatchOutcome::delivered;
    try {
      hub_.dispatch(prompt, target->party_id, target->device, attempt, code, now);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::TransportUnavailable) throw;
      outcome = DispatchOutcome::failed;
    }
    delivered = outcome == DispatchOutcome::delivered;
    const EpochMs channel_deadline =
        delivered ? std::min(now + config_.channel_timeout(target->device.kind), deadline) : now;

    auto ev = make_event(AuditKind::dispatched, req.patient, kSystem, "control_system", now,
                         req.request_id);
    ev.detail = {{"target", target->party_id},
                 {"target_kind", std::string(to_string(target->kind))},
                 {"device_id", target->device.device_id},
                 {"device_kind", std::string(to_string(target->device.kind))},
                 {"attempt", std::to_string(attempt)},
                 {"outcome", std::string(to_string(outcome))},
                 {"channel_deadline", iso(channel_deadline)},
                 {"deadline", iso(deadline)}};
    commit(std::move(ev));
  }

  if (first && !tried) {
    auto ev = make_event(AuditKind::dispatched, req.patient, kSystem, "control_system", now,
                         req.request_id);
    ev.detail = {{"target", req.patient},
                 {"target_kind", "patient"},
                 {"device_id", ""},
                 {"device_kind", ""},
                 {"attempt", "0"},
                 {"outcome", "no_channel"},
                 {"channel_deadline", iso(now)},
                 {"deadline", iso(deadline)}};
    commit(std::move(ev));
  }
  if (!first && !delivered) apply_timeout(s, now, "channels_exhausted");
}

void ConsentOrchestrator::apply_timeout(CaseSlot& s, EpochMs now, const std::string& reason) {
  auto ev = make_event(AuditKind::timeout, s.rec.c.request.patient, kSystem, "control_system", now,
                       s.rec.c.request.request_id);
  ev.detail = {{"reason", reason}};
  commit(std::move(ev));
}

CaseSnapshot ConsentOrchestrator::handle_deadline(const std::string& request_id, EpochMs now) {
  std::shared_lock quiesce(quiesce_mu_);
  CaseSlot* s = slot(request_id);
  if (!s) throw Error(ErrorCode::UnknownRequest, request_id);
  std::lock_guard op(s->op_mu);
  const auto& rec = s->rec;
  if (!awaiting(rec.c.state)) return rec;
  if (rec.c.deadline && now >= *rec.c.deadline) {
    apply_timeout(*s, now, "deadline");
  } else if (rec.channel_deadline && now >= *rec.channel_deadline) {
    dispatch_round(*s, now, false);
  }
  return s->rec;
}

std::size_t ConsentOrchestrator::process_deadlines(EpochMs now) {
  std::vector<std::pair<std::string, ConsentCase>> due;
  {
    std::shared_lock lock(state_mu_);
    for (const auto& [id, s] : slots_) {
      if (!s->live || !awaiting(s->rec.c.state)) continue;
      const bool overall = s->rec.c.deadline && now >= *s->rec.c.deadline;
      const bool channel = s->rec.channel_deadline && now >= *s->rec.channel_deadline;
      if (overall || channel) due.emplace_back(id, s->rec.c);
    }
  }
  std::size_t changed = 0;
  for (const auto& [id, before] : due) {
    if (handle_deadline(id, now).c != before) ++changed;
  }
  return changed;
}

// --- decisions ------------------------------------------------------------

CaseSnapshot ConsentOrchestrator::record_decision(const std::string& request_id,
                                                  const std::string& responder_id,
                                                  Decision decision, const ResponseProof& proof) {
  std::shared_lock quiesce(quiesce_mu_);
  CaseSlot* s = slot(request_id);
  if (!s) throw Error(ErrorCode::UnknownRequest, request_id);
  std::lock_guard op(s->op_mu);
  const EpochMs now = clock_.now();
  const auto& rec = s->rec;
  const AccessRequest& req = rec.c.request;

  const auto hit = std::find_if(rec.attempts.begin(), rec.attempts.end(), [&](const DispatchAttempt& a) {
    return a.outcome == DispatchOutcome::delivered && a.target == responder_id &&
           a.device_id == proof.device_id;
  });
  if (hit == rec.attempts.end()) throw Error(ErrorCode::UnauthorizedResponder, responder_id);

  if (hit->target_kind == TargetKind::delegate) {
    bool in_window = false;
    std::shared_lock lock(state_mu_);
    for (const auto& [id, d] : delegations_) {
      if (d.delegator == req.patient && d.delegate == responder_id && d.covers(now)) in_window = true;
    }
    if (!in_window) throw Error(ErrorCode::UnauthorizedResponder, responder_id + " outside delegation");
  } else if (hit->target_kind == TargetKind::nominee) {
    const auto patient = policy_.registry().patient(req.patient);
    if (!patient || patient->nominee != responder_id) {
      throw Error(ErrorCode::UnauthorizedResponder, responder_id + " is no longer the nominee");
    }
  }

  const ResponderKind kind =
      hit->target_kind == TargetKind::patient ? ResponderKind::patient : ResponderKind::delegate;
  const std::string role = kind == ResponderKind::patient ? "patient" : "delegate";

  if (!awaiting(rec.c.state)) {
    auto ev = make_event(AuditKind::duplicate_decision, req.patient, responder_id, role, now, request_id);
    ev.detail = {{"decision", std::string(to_string(decision))},
                 {"state", std::string(to_string(rec.c.state))}};
    commit(std::move(ev));
    return s->rec;
  }

  if (proof.kind != proof_kind_for(hit->device_kind) ||
      !verifier_.verify_proof(proof, request_id, responder_id, decision, now)) {
    throw Error(ErrorCode::BadProof);
  }

  auto ev = make_event(AuditKind::decision, req.patient, responder_id, role, now, request_id);
  ev.detail = {{"decision", std::string(to_string(decision))},
               {"responder_kind", std::string(to_string(kind))},
               {"channel", std::string(to_string(hit->device_kind))},
               {"device_id", hit->device_id}};
  commit(std::move(ev));

  if (decision == Decision::approve) {
    const Grant g = make_grant(req, GrantKind::consented, now);
    auto ge = make_event(AuditKind::grant_issued, req.patient, req.requester,
                         rec.requester_role ? std::string(to_string(*rec.requester_role)) : "unknown",
                         now, request_id);
    ge.detail = grant_detail(g);
    commit(std::move(ge));
  }
  return s->rec;
}

// --- break-glass ----------------------------------------------------------

Grant ConsentOrchestrator::run_breakglass(CaseSlot& s, const std::string& requester,
                                          const std::string& justification, EpochMs now) {
  const AccessRequest& req = s.rec.c.request;
  const std::string role =
      s.rec.requester_role ? std::string(to_string(*s.rec.requester_role)) : "unknown";
  const Grant g = make_grant(req, GrantKind::emergency, now);
  const std::string notice_id = next_id("ntc", notice_counter_);
  const auto patient = policy_.registry().patient(req.patient);

  auto bg = make_event(AuditKind::break_glass, req.patient, requester, role, now, req.request_id);
  bg.detail = {{"justification", justification},
               {"responsible", requester},
               {"category", "special"}};
  auto ge = make_event(AuditKind::grant_issued, req.patient, requester, role, now, req.request_id);
  ge.detail = grant_detail(g);
  auto mail = make_event(AuditKind::email_queued, req.patient, kSystem, "mailer", now, req.request_id);
  mail.detail = {{"notice_id", notice_id},
                 {"grant_id", g.grant_id},
                 {"to", patient ? patient->email : ""}};
  commit_breakglass({std::move(bg), std::move(ge), std::move(mail)});
  if (secrets_changed_) secrets_changed_();
  return g;
}

Grant ConsentOrchestrator::break_glass(const std::string& ticket_id, const std::string& request_id,
                                       const std::string& justification) {
  std::shared_lock quiesce(quiesce_mu_);
  if (is_blank(justification)) throw Error(ErrorCode::EmptyJustification);
  const EpochMs now = clock_.now();
  CaseSlot* s = slot(request_id);
  if (!s) throw Error(ErrorCode::UnknownRequest, request_id);
  std::lock_guard op(s->op_mu);
  const AccessRequest& req = s->rec.c.request;

  std::string subject;
  try {
    subject = policy_.verify_ticket(ticket_id, now);
  } catch (const Error& e) {
    auto ev = make_event(AuditKind::auth_fail, req.patient, "unknown", "unknown", now, request_id);
    ev.detail = {{"stage", "break_glass"}, {"reason", std::string(to_string(e.code()))}};
    commit(std::move(ev));
    throw Error(ErrorCode::RejectedAuth, std::string(to_string(e.code())));
  }
  if (subject != req.requester) throw Error(ErrorCode::NotRequester, subject);

  const auto state = s->rec.c.state;
  if (state != ConsentState::AclPassed && !awaiting(state)) {
    throw Error(ErrorCode::InvalidTransition,
                std::string(to_string(state)) + " x BreakGlassInvoked");
  }
  return run_breakglass(*s, subject, justification, now);
}

// --- delegations and devices ----------------------------------------------

Delegation ConsentOrchestrator::create_delegation(const std::string& patient_id,
                                                  const std::string& delegate_ref,
                                                  EpochMs window_start, EpochMs window_end,
                                                  const std::string& actor) {
  std::shared_lock quiesce(quiesce_mu_);
  if (!policy_.registry().has_patient(patient_id)) throw Error(ErrorCode::UnknownPatient, patient_id);
  if (window_start >= window_end) throw Error(ErrorCode::InvalidWindow);
  if (delegate_ref == patient_id) throw Error(ErrorCode::InvalidArgument, "cannot delegate to self");
  const auto delegate = policy_.registry().patient(delegate_ref);
  if (!delegate || delegate->devices.empty()) {
    throw Error(ErrorCode::DelegateWithoutDevice, delegate_ref);
  }

  Delegation d{next_id("dlg", delegation_counter_), patient_id, delegate_ref, window_start, window_end,
               false};
  auto ev = make_event(AuditKind::delegation_created, patient_id, actor,
                       actor == patient_id ? "patient" : "operator", clock_.now());
  ev.detail = {{"delegation_id", d.delegation_id},
               {"delegate", d.delegate},
               {"window_start", iso(d.window_start)},
               {"window_end", iso(d.window_end)}};
  commit(std::move(ev));
  return d;
}

void ConsentOrchestrator::revoke_delegation(const std::string& delegation_id,
                                            const std::string& actor) {
  std::shared_lock quiesce(quiesce_mu_);
  std::optional<Delegation> d;
  {
    std::shared_lock lock(state_mu_);
    const auto it = delegations_.find(delegation_id);
    if (it != delegations_.end()) d = it->second;
  }
  if (!d) throw Error(ErrorCode::UnknownDelegation, delegation_id);
  if (d->revoked) return;
  auto ev = make_event(AuditKind::delegation_revoked, d->delegator, actor,
                       actor == d->delegator ? "patient" : "operator", clock_.now());
  ev.detail = {{"delegation_id", delegation_id}};
  commit(std::move(ev));
}

std::optional<std::vector<std::uint8_t>> ConsentOrchestrator::link_device(
    const std::string& patient_id, const Device& device, const std::string& actor) {
  std::shared_lock quiesce(quiesce_mu_);
  std::lock_guard devices(devices_mu_);
  const auto patient = policy_.registry().patient(patient_id);
  if (!patient) throw Error(ErrorCode::UnknownPatient, patient_id);
  with_device_linked(patient->devices, device);

  std::optional<std::vector<std::uint8_t>> key;
  if (device.kind == DeviceKind::smartphone_push) key = keys_.generate(patient_id, device.device_id);

  auto ev = make_event(AuditKind::device_linked, patient_id, actor,
                       actor == patient_id ? "patient" : "operator", clock_.now());
  ev.detail = {{"device_id", device.device_id},
               {"kind", std::string(to_string(device.kind))},
               {"address", device.address},
               {"priority", std::to_string(device.priority)}};
  commit(std::move(ev));
  return key;
}

void ConsentOrchestrator::unlink_device(const std::string& patient_id, const std::string& device_id,
                                        const std::string& actor) {
  std::shared_lock quiesce(quiesce_mu_);
  std::lock_guard devices(devices_mu_);
  const auto patient = policy_.registry().patient(patient_id);
  if (!patient) throw Error(ErrorCode::UnknownPatient, patient_id);
  without_device(patient->devices, device_id);

  auto ev = make_event(AuditKind::device_unlinked, patient_id, actor,
                       actor == patient_id ? "patient" : "operator", clock_.now());
  ev.detail = {{"device_id", device_id}};
  commit(std::move(ev));
  keys_.erase(patient_id, device_id);
}

// --- grants ---------------------------------------------------------------

bool ConsentOrchestrator::check_grant(const std::string& grant_id, const std::string& patient_id,
                                      RecordSection section, Action action, EpochMs now,
                                      const std::optional<std::string>& presenter) {
  std::shared_lock quiesce(quiesce_mu_);
  const auto snapshot = std::atomic_load(&grants_);
  const auto it = snapshot->find(grant_id);
  const Grant* g = it == snapshot->end() ? nullptr : &it->second;
  const bool permit = g && now < g->expires_at && g->scope.patient_id == patient_id &&
                      g->scope.sections.contains(section) && g->scope.action == action &&
                      (!presenter || *presenter == g->holder);

  const std::string actor = presenter.value_or(g ? g->holder : "unknown");
  auto ev = make_event(AuditKind::grant_checked, patient_id, actor, holder_role(actor), now,
                       g ? std::optional<std::string>(g->request_id) : std::nullopt);
  ev.detail = {{"grant_id", grant_id},
               {"section", std::string(to_string(section))},
               {"action", std::string(to_string(action))},
               {"verdict", permit ? "permit" : "deny"}};
  try {
    audit_.append(std::move(ev));
  } catch (const Error&) {
    return false;
  }
  return permit;
}

std::optional<Grant> ConsentOrchestrator::find_grant(const std::string& grant_id) const {
  const auto snapshot = std::atomic_load(&grants_);
  const auto it = snapshot->find(grant_id);
  if (it == snapshot->end()) return std::nullopt;
  return it->second;
}

void ConsentOrchestrator::insert_grant(const Grant& g) {
  std::lock_guard lock(grants_write_mu_);
  auto next = std::make_shared<GrantMap>(*std::atomic_load(&grants_));
  (*next)[g.grant_id] = g;
  std::atomic_store(&grants_, std::shared_ptr<const GrantMap>(std::move(next)));
}

std::size_t ConsentOrchestrator::pump_email(MailSink& sink) {
  std::shared_lock quiesce(quiesce_mu_);
  bool unsent = false;
  for (const auto& n : emails_.notices()) unsent = unsent || !n.sent_at;
  const auto sent = emails_.pump(clock_.now(), sink, audit_);
  if (unsent && secrets_changed_) secrets_changed_();
  return sent;
}

// --- queries --------------------------------------------------------------

std::optional<CaseSnapshot> ConsentOrchestrator::get_case(const std::string& request_id) const {
  std::shared_lock lock(state_mu_);
  const auto it = slots_.find(request_id);
  if (it == slots_.end() || !it->second->live) return std::nullopt;
  return it->second->rec;
}

std::vector<CaseSnapshot> ConsentOrchestrator::cases() const {
  std::shared_lock lock(state_mu_);
  std::vector<CaseSnapshot> out;
  for (const auto& [id, s] : slots_) {
    if (s->live) out.push_back(s->rec);
  }
  return out;
}

std::vector<Grant> ConsentOrchestrator::grants() const {
  const auto snapshot = std::atomic_load(&grants_);
  std::vector<Grant> out;
  for (const auto& [id, g] : *snapshot) out.push_back(g);
  return out;
}

std::vector<Delegation> ConsentOrchestrator::delegations() const {
  std::shared_lock lock(state_mu_);
  std::vector<Delegation> out;
  for (const auto& [id, d] : delegations_) out.push_back(d);
  return out;
}

std::vector<PendingItem> ConsentOrchestrator::pending_for(const std::string& patient_id,
                                                          EpochMs now) const {
  std::vector<PendingItem> out;
  for (const auto& rec : cases()) {
    const auto& req = rec.c.request;
    if (req.patient != patient_id || !awaiting(rec.c.state)) continue;
    PendingItem p;
    p.request_id = req.request_id;
    p.requester_id = req.requester;
    const auto principal = policy_.registry().principal(req.requester);
    p.requester_name = principal ? principal->display_name : req.requester;
    p.requester_role = rec.requester_role.value_or(PrincipalRole::gp);
    p.purpose = req.purpose;
    p.sections = req.sections;
    p.action = req.action;
    p.state = rec.c.state;
    p.deadline = rec.c.deadline.value_or(now);
    p.remaining_ms = std::max<DurationMs>(0, p.deadline - now);
    out.push_back(std::move(p));
  }
  return out;
}

// --- replay ---------------------------------------------------------------

void ConsentOrchestrator::push_history(CaseSnapshot& rec, ConsentEvent ev, EpochMs at,
                                       const std::string& actor) {
  rec.c.state = transition_or_throw(rec.c.state, ev);
  rec.c.history.push_back({ev, at, actor});
}

void ConsentOrchestrator::apply(const AuditEvent& event) {
  std::unique_lock lock(state_mu_);
  apply_locked(event);
}

void ConsentOrchestrator::apply_locked(const AuditEvent& e) {
  auto case_of = [&]() -> CaseSnapshot& {
    if (!e.request_id) throw Error(ErrorCode::CorruptLog, "event " + std::to_string(e.seq) + " lacks request_id");
    const auto it = slots_.find(*e.request_id);
    if (it == slots_.end() || !it->second->live) {
      throw Error(ErrorCode::CorruptLog, "event " + std::to_string(e.seq) + " for unknown " + *e.request_id);
    }
    return it->second->rec;
  };

  switch (e.kind) {
    case AuditKind::auth_ok:
    case AuditKind::auth_fail: {
      if (!e.request_id || opt(e, "stage") != "request") return;
      auto& s = slots_[*e.request_id];
      if (!s) s = std::make_unique<CaseSlot>();
      CaseSnapshot rec;
      AccessRequest& req = rec.c.request;
      req.request_id = *e.request_id;
      req.requester = e.actor_id;
      req.patient = e.patient_id;
      req.sections = parse_sections(need(e, "sections"));
      req.action = need_enum<Action>(e, "action");
      req.purpose = need_enum<AccessPurpose>(e, "purpose");
      req.category = need_enum<RequestCategory>(e, "category");
      req.justification = opt(e, "justification");
      req.submitted_at = e.at;
      rec.requester_role = parse_enum<PrincipalRole>(e.actor_role);
      push_history(rec, e.kind == AuditKind::auth_ok ? ConsentEvent::AuthOk : ConsentEvent::AuthFail,
                   e.at, e.actor_id);
      s->rec = std::move(rec);
      s->live = true;
      note_id(*e.request_id, request_counter_);
      return;
    }
    case AuditKind::acl_pass:
    case AuditKind::acl_fail: {
      auto& rec = case_of();
      push_history(rec, e.kind == AuditKind::acl_pass ? ConsentEvent::AclOk : ConsentEvent::AclFail,
                   e.at, e.actor_id);
      return;
    }
    case AuditKind::grant_issued: {
      auto& rec = case_of();
      Grant g;
      g.grant_id = need(e, "grant_id");
      g.request_id = *e.request_id;
      g.holder = need(e, "holder");
      g.scope = {e.patient_id, parse_sections(need(e, "sections")), need_enum<Action>(e, "action")};
      g.issued_at = parse_iso8601(need(e, "issued_at"));
      g.expires_at = parse_iso8601(need(e, "expires_at"));
      g.kind = need_enum<GrantKind>(e, "kind");
      if (g.kind == GrantKind::auto_usual_provider) {
        push_history(rec, ConsentEvent::UsualProviderDetected, e.at, e.actor_id);
      }
      rec.grant_id = g.grant_id;
      insert_grant(g);
      note_id(g.grant_id, grant_counter_);
      return;
    }
    case AuditKind::dispatched: {
      auto& rec = case_of();
      DispatchAttempt a;
      a.attempt = std::stoi(need(e, "attempt"));
      a.target = need(e, "target");
      a.target_kind = need_enum<TargetKind>(e, "target_kind");
      a.device_id = need(e, "device_id");
      a.outcome = need_enum<DispatchOutcome>(e, "outcome");
      if (a.outcome != DispatchOutcome::no_channel) a.device_kind = need_enum<DeviceKind>(e, "device_kind");
      a.at = e.at;
      rec.attempts.push_back(a);
      rec.channel_deadline = parse_iso8601(need(e, "channel_deadline"));
      if (rec.c.state == ConsentState::AclPassed) {
        push_history(rec, ConsentEvent::DispatchedToPatient, e.at, a.target);
        rec.c.deadline = parse_iso8601(need(e, "deadline"));
      }
      if (a.outcome == DispatchOutcome::delivered) {
        rec.c.active_channel = a.device_id;
        if (a.target_kind != TargetKind::patient && rec.c.state == ConsentState::AwaitingPatient) {
          push_history(rec, ConsentEvent::DelegateEscalation, e.at, a.target);
        }
      }
      return;
    }
    case AuditKind::decision: {
      auto& rec = case_of();
      DecisionRecord d;
      d.request_id = *e.request_id;
      d.responder_id = e.actor_id;
      d.responder_kind = need_enum<ResponderKind>(e, "responder_kind");
      d.decision = need_enum<Decision>(e, "decision");
      d.channel = need_enum<DeviceKind>(e, "channel");
      d.decided_at = e.at;
      const bool approve = d.decision == Decision::approve;
      ConsentEvent ev;
      if (rec.c.state == ConsentState::AwaitingDelegate) {
        ev = approve ? ConsentEvent::DelegateApproved : ConsentEvent::DelegateDenied;
      } else {
        ev = approve ? ConsentEvent::PatientApproved : ConsentEvent::PatientDenied;
      }
      push_history(rec, ev, e.at, e.actor_id);
      rec.decision = d;
      return;
    }
    case AuditKind::timeout:
      push_history(case_of(), ConsentEvent::Timeout, e.at, e.actor_id);
      return;
    case AuditKind::break_glass: {
      auto& rec = case_of();
      push_history(rec, ConsentEvent::BreakGlassInvoked, e.at, e.actor_id);
      rec.breakglass_justification = need(e, "justification");
      return;
    }
    case AuditKind::email_queued: {
      auto& rec = case_of();
      const std::string notice_id = need(e, "notice_id");
      note_id(notice_id, notice_counter_);
      const std::string grant_id = need(e, "grant_id");
      if (emails_.find_by_grant(grant_id)) return;
      const auto snapshot = std::atomic_load(&grants_);
      const auto git = snapshot->find(grant_id);
      const auto patient = policy_.registry().patient(e.patient_id);
      if (git == snapshot->end() || !patient) {
        throw Error(ErrorCode::CorruptLog, "email_queued for unknown grant " + grant_id);
      }
      AccessRequest req = rec.c.request;
      req.justification = rec.breakglass_justification;
      const auto principal = policy_.registry().principal(req.requester);
      const std::string label =
          principal ? principal->display_name + " (" + req.requester + ", " +
                          std::string(to_string(principal->role)) + ")"
                    : req.requester;
      emails_.queue_breakglass_notice(git->second, req, *patient, label, e.at, notice_id);
      return;
    }
    case AuditKind::email_sent:
      emails_.mark_sent(need(e, "notice_id"), e.at, std::stoi(need(e, "attempts")));
      return;
    case AuditKind::delegation_created: {
      Delegation d{need(e, "delegation_id"), e.patient_id, need(e, "delegate"),
                   parse_iso8601(need(e, "window_start")), parse_iso8601(need(e, "window_end")), false};
      note_id(d.delegation_id, delegation_counter_);
      delegations_[d.delegation_id] = std::move(d);
      return;
    }
    case AuditKind::delegation_revoked: {
      const auto it = delegations_.find(need(e, "delegation_id"));
      if (it != delegations_.end()) it->second.revoked = true;
      return;
    }
    case AuditKind::device_linked:
    case AuditKind::device_unlinked: {
      const auto patient = policy_.registry().patient(e.patient_id);
      if (!patient) throw Error(ErrorCode::CorruptLog, "device event for unknown " + e.patient_id);
      const std::string device_id = need(e, "device_id");
      auto devices = patient->devices;
      std::erase_if(devices, [&](const Device& d) { return d.device_id == device_id; });
      if (e.kind == AuditKind::device_linked) {
        devices.push_back({device_id, need_enum<DeviceKind>(e, "kind"), need(e, "address"),
                           std::stoi(need(e, "priority"))});
      }
      policy_.registry().set_devices(e.patient_id, std::move(devices));
      return;
    }
    case AuditKind::duplicate_decision:
    case AuditKind::grant_checked:
    case AuditKind::record_read:
    case AuditKind::record_written:
      return;
  }
}

// --- checkpoint -----------------------------------------------------------

std::optional<Json> ConsentOrchestrator::checkpoint_json() {
  std::unique_lock quiesce(quiesce_mu_);
  if (flush_pending_audit() != 0) return std::nullopt;
  const std::uint64_t seq = audit_.last_seq();

  std::shared_lock lock(state_mu_);
  Json cases = Json::array();
  for (const auto& [id, s] : slots_) {
    if (s->live) cases.push_back(s->rec);
  }
  Json delegations = Json::array();
  for (const auto& [id, d] : delegations_) delegations.push_back(d);
  Json grants = Json::array();
  for (const auto& [id, g] : *std::atomic_load(&grants_)) grants.push_back(g);
  Json devices = Json::object();
  for (const auto& pid : policy_.registry().patient_ids()) {
    devices[pid] = policy_.registry().patient(pid)->devices;
  }
  return Json{{"v", 1},
              {"seq", seq},
              {"counters",
               {{"request", request_counter_},
                {"grant", grant_counter_},
                {"delegation", delegation_counter_},
                {"notice", notice_counter_}}},
              {"cases", cases},
              {"grants", grants},
              {"delegations", delegations},
              {"devices", devices}};
}

std::uint64_t ConsentOrchestrator::restore_checkpoint(const Json& j) {
  std::map<std::string, std::unique_ptr<CaseSlot>> slots;
  std::map<std::string, Delegation> delegations;
  auto grants = std::make_shared<GrantMap>();
  std::map<std::string, std::vector<Device>> devices;
  std::uint64_t seq = 0;
  std::uint64_t counters[4] = {0, 0, 0, 0};
  try {
    if (j.at("v").get<int>() != 1) throw Error(ErrorCode::CorruptCheckpoint, "unsupported version");
    seq = j.at("seq").get<std::uint64_t>();
    const auto& c = j.at("counters");
    counters[0] = c.at("request").get<std::uint64_t>();
    counters[1] = c.at("grant").get<std::uint64_t>();
    counters[2] = c.at("delegation").get<std::uint64_t>();
    counters[3] = c.at("notice").get<std::uint64_t>();
    for (const auto& item : j.at("cases")) {
      auto rec = item.get<CaseSnapshot>();
      if (fold_history(rec.c.history) != rec.c.state) {
        throw Error(ErrorCode::CorruptCheckpoint, "state/history mismatch in " + rec.c.request.request_id);
      }
      auto s = std::make_unique<CaseSlot>();
      s->live = true;
      s->rec = std::move(rec);
      slots.emplace(s->rec.c.request.request_id, std::move(s));
    }
    for (const auto& item : j.at("grants")) {
      auto g = item.get<Grant>();
      (*grants)[g.grant_id] = g;
    }
    for (const auto& item : j.at("delegations")) {
      auto d = item.get<Delegation>();
      delegations[d.delegation_id] = d;
    }
    for (const auto& [pid, list] : j.at("devices").items()) {
      if (!policy_.registry().has_patient(pid)) {
        throw Error(ErrorCode::CorruptCheckpoint, "devices for unknown patient " + pid);
      }
      devices[pid] = list.get<std::vector<Device>>();
    }
  } catch (const Error& e) {
    if (e.code() == ErrorCode::CorruptCheckpoint) throw;
    throw Error(ErrorCode::CorruptCheckpoint, e.what());
  } catch (const std::exception& e) {
    throw Error(ErrorCode::CorruptCheckpoint, e.what());
  }

  std::unique_lock lock(state_mu_);
  slots_ = std::move(slots);
  delegations_ = std::move(delegations);
  request_counter_ = counters[0];
  grant_counter_ = counters[1];
  delegation_counter_ = counters[2];
  notice_counter_ = counters[3];
  {
    std::lock_guard g(grants_write_mu_);
    std::atomic_store(&grants_, std::shared_ptr<const GrantMap>(std::move(grants)));
  }
  for (auto& [pid, list] : devices) policy_.registry().set_devices(pid, std::move(list));
  return seq;
}

}  // namespace consentgate
