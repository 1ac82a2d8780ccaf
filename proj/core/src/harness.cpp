#include "consentgate/harness.hpp"

#include <algorithm>
#include <filesystem>
#include <random>
#include <sstream>

#include "consentgate/crypto.hpp"
#include "consentgate/state_machine.hpp"

namespace fs = std::filesystem;

namespace consentgate::harness {

// ===========================================================================
// World
// ===========================================================================

World::World(Options options) : options_(std::move(options)), clock_(options_.start) {
  service_ = std::make_unique<Service>(make_config(), clock_, hub_, mail_);
  router_ = std::make_unique<ApiRouter>(*service_);
}

World::~World() = default;

ServiceConfig World::make_config() const {
  ServiceConfig c;
  c.data_dir = options_.data_dir;
  c.orchestrator = options_.orchestrator;
  c.clock_mode = ClockMode::simulated;
  c.harness_mode = true;
  c.operator_token = options_.operator_token;
  c.policy.hash_iterations = options_.hash_iterations;
  c.fsync = options_.fsync;
  c.simulated_start = options_.start;
  return c;
}

void World::seed(const std::string& fixture_dir) {
  service_->seed(fixture_dir);
  const auto registry = Json::parse(read_file(fixture_dir + "/registry.json"));
  for (const auto& p : registry.at("principals")) {
    passwords_[p.at("principal_id").get<std::string>()] = p.value("password", "");
  }
  const auto patients = Json::parse(read_file(fixture_dir + "/patients.json"));
  for (const auto& p : patients.at("patients")) {
    passwords_[p.at("patient_id").get<std::string>()] = p.value("password", "");
  }
}

void World::restart() {
  if (options_.data_dir.empty()) throw Error(ErrorCode::InvalidArgument, "restart needs a data_dir");
  router_.reset();
  service_.reset();
  service_ = std::make_unique<Service>(make_config(), clock_, hub_, mail_);
  router_ = std::make_unique<ApiRouter>(*service_);
}

ApiResponse World::login(const std::string& actor, const std::optional<std::string>& password) {
  std::string pw;
  if (password) {
    pw = *password;
  } else if (const auto it = passwords_.find(actor); it != passwords_.end()) {
    pw = it->second;
  }
  auto res = call("POST", "/v1/auth/login", Json{{"principal_id", actor}, {"password", pw}});
  if (res.status == 200) tickets_[actor] = res.body.at("ticket").get<std::string>();
  return res;
}

std::optional<std::string> World::ticket(const std::string& actor) const {
  const auto it = tickets_.find(actor);
  if (it == tickets_.end()) return std::nullopt;
  return it->second;
}

ApiResponse World::call(const std::string& method, const std::string& path, const Json& body,
                        const std::string& actor, bool as_operator,
                        const std::map<std::string, std::string>& query) {
  ApiRequest req;
  req.method = method;
  req.path = path;
  req.query = query;
  if (!body.is_null()) req.body = body.dump();
  if (!actor.empty()) {
    if (const auto t = ticket(actor)) req.headers["authorization"] = "Bearer " + *t;
  }
  if (as_operator) req.headers["x-operator-token"] = options_.operator_token;
  return router_->handle(req);
}

ResponseProof World::proof_for(const std::string& party, const std::string& device_id,
                               const std::string& request_id, Decision decision) const {
  const auto msg = hub_.latest(party, device_id, request_id);
  if (!msg) throw Error(ErrorCode::NotFound, "no prompt on " + party + "/" + device_id);
  ResponseProof proof;
  proof.kind = proof_kind_for(msg->kind);
  proof.device_id = device_id;
  if (msg->kind == DeviceKind::smartphone_push) {
    const auto key = hub_.device_key(party, device_id);
    if (!key) throw Error(ErrorCode::NotFound, "device not enrolled: " + device_id);
    proof.payload = sign_push_response(*key, request_id, device_id, decision);
  } else {
    proof.payload = msg->passcode.value_or("");
  }
  return proof;
}

void World::advance(DurationMs ms) {
  clock_.advance(ms);
  service_->tick();
}

// ===========================================================================
// Scenario files
// ===========================================================================

Scenario Scenario::from_json(const Json& j) {
  Scenario s;
  s.name = j.at("name").get<std::string>();
  s.description = j.value("description", "");
  s.covers = j.value("covers", std::vector<std::string>{});
  s.fixture = j.value("fixture", s.fixture);
  s.steps = j.value("steps", Json::array());
  s.expect = j.value("expect", Json::object());
  return s;
}

Scenario Scenario::load(const std::string& path) {
  try {
    return from_json(Json::parse(read_file(path)));
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::InvalidArgument, path + ": " + e.what());
  }
}

std::vector<std::string> list_scenarios(const std::string& dir) {
  std::vector<std::string> names;
  if (!fs::is_directory(dir)) return names;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.path().extension() == ".json") names.push_back(entry.path().stem().string());
  }
  std::sort(names.begin(), names.end());
  return names;
}

Scenario load_scenario(const std::string& dir, const std::string& name) {
  const auto path = fs::path(dir) / (name + ".json");
  if (!fs::exists(path)) throw Error(ErrorCode::NotFound, "no scenario named " + name);
  return Scenario::load(path.string());
}

std::string default_scenario_dir() { return default_data_root() + "/scenarios"; }
std::string default_fixture_root() { return default_data_root() + "/fixtures"; }

std::string json_subset_diff(const Json& expected, const Json& actual, const std::string& path) {
  const std::string where = path.empty() ? "/" : path;
  if (expected.is_object()) {
    if (!actual.is_object()) return where + ": expected an object, got " + actual.dump();
    for (const auto& [k, v] : expected.items()) {
      if (!actual.contains(k)) return path + "/" + k + ": missing, expected " + v.dump();
      auto d = json_subset_diff(v, actual.at(k), path + "/" + k);
      if (!d.empty()) return d;
    }
    return {};
  }
  if (expected.is_array()) {
    if (!actual.is_array()) return where + ": expected an array, got " + actual.dump();
    if (expected.size() != actual.size()) {
      return where + ": expected " + std::to_string(expected.size()) + " items, got " +
             std::to_string(actual.size()) + " " + actual.dump();
    }
    for (std::size_t i = 0; i < expected.size(); ++i) {
      auto d = json_subset_diff(expected[i], actual[i], path + "/" + std::to_string(i));
      if (!d.empty()) return d;
    }
    return {};
  }
  if (expected != actual) return where + ": expected " + expected.dump() + ", got " + actual.dump();
  return {};
}

// ===========================================================================
// Runner
// ===========================================================================

namespace {

std::string describe(const Json& step) {
  const auto op = step.value("do", std::string("?"));
  if (op == "call") return "call " + step.value("method", "") + " " + step.value("path", "");
  if (op == "login") return "login " + step.value("actor", "");
  if (op == "respond") {
    return "respond " + step.value("party", "") + " via " + step.value("device", "") + " " +
           step.value("decision", "");
  }
  if (op == "advance") return "advance " + std::to_string(step.value("ms", 0)) + " ms";
  return op;
}

std::string format_ttl(DurationMs ms) {
  constexpr DurationMs day = 86'400'000;
  constexpr DurationMs hour = 3'600'000;
  std::string human;
  if (ms % day == 0) {
    human = std::to_string(ms / day) + (ms == day ? " day" : " days");
  } else if (ms % hour == 0) {
    human = std::to_string(ms / hour) + (ms == hour ? " hour" : " hours");
  } else {
    human = std::to_string(ms) + " ms";
  }
  return human + " (" + std::to_string(ms) + " ms)";
}

template <typename T>
std::string list_str(const std::vector<T>& items) {
  std::string out = "[";
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += ", ";
    out += items[i];
  }
  return out + "]";
}

std::string sequence_diff(const std::string& label, const std::vector<std::string>& expected,
                          const std::vector<std::string>& actual) {
  const std::size_t n = std::max(expected.size(), actual.size());
  for (std::size_t i = 0; i < n; ++i) {
    const std::string e = i < expected.size() ? expected[i] : "<end>";
    const std::string a = i < actual.size() ? actual[i] : "<end>";
    if (e != a) {
      return label + "[" + std::to_string(i) + "]: expected " + e + ", got " + a +
             "\n  expected " + list_str(expected) + "\n  actual   " + list_str(actual);
    }
  }
  return {};
}

}  // namespace

ScenarioRunner::ScenarioRunner(Scenario scenario, RunOptions options)
    : scenario_(std::move(scenario)), options_(std::move(options)) {
  World::Options wo;
  wo.data_dir = options_.data_dir;
  world_ = std::make_unique<World>(wo);
  const auto root = options_.fixture_root.empty() ? default_fixture_root() : options_.fixture_root;
  world_->seed(root + "/" + scenario_.fixture);
  baseline_seq_ = world_->service().audit().last_seq();
}

ScenarioRunner::~ScenarioRunner() = default;

std::string ScenarioRunner::subst(const std::string& s) const {
  std::string out;
  std::size_t i = 0;
  while (i < s.size()) {
    const auto open = s.find("${", i);
    if (open == std::string::npos) {
      out += s.substr(i);
      break;
    }
    const auto close = s.find('}', open);
    if (close == std::string::npos) {
      out += s.substr(i);
      break;
    }
    out += s.substr(i, open - i);
    const auto key = s.substr(open + 2, close - open - 2);
    const auto it = vars_.find(key);
    if (it == vars_.end()) throw Error(ErrorCode::InvalidArgument, "unbound variable ${" + key + "}");
    out += it->second;
    i = close + 1;
  }
  return out;
}

Json ScenarioRunner::substitute(const Json& j) const {
  if (j.is_string()) return subst(j.get<std::string>());
  if (j.is_array()) {
    Json out = Json::array();
    for (const auto& x : j) out.push_back(substitute(x));
    return out;
  }
  if (j.is_object()) {
    Json out = Json::object();
    for (const auto& [k, v] : j.items()) out[subst(k)] = substitute(v);
    return out;
  }
  return j;
}

std::string ScenarioRunner::check_response(const Json& step, const ApiResponse& res) {
  const int want = step.value("status", 200);
  if (res.status != want) {
    return "status expected " + std::to_string(want) + ", got " + std::to_string(res.status) + " " +
           res.body.dump();
  }
  if (step.contains("expect")) {
    auto d = json_subset_diff(substitute(step.at("expect")), res.body);
    if (!d.empty()) return "response " + d;
  }
  if (step.contains("save")) {
    for (const auto& [var, ptr] : step.at("save").items()) {
      const Json::json_pointer jp(ptr.get<std::string>());
      if (!res.body.contains(jp)) return "response has nothing at " + ptr.get<std::string>();
      const auto& v = res.body.at(jp);
      vars_[var] = v.is_string() ? v.get<std::string>() : v.dump();
    }
  }
  return {};
}

std::string ScenarioRunner::run_step(std::size_t index) {
  const Json& raw = scenario_.steps.at(index);
  try {
    const Json step = raw;
    const auto op = step.at("do").get<std::string>();
    World& w = *world_;

    if (op == "login") {
      std::optional<std::string> pw;
      if (step.contains("password")) pw = step.at("password").get<std::string>();
      return check_response(step, w.login(step.at("actor").get<std::string>(), pw));
    }
    if (op == "call") {
      std::map<std::string, std::string> query;
      if (step.contains("query")) {
        const Json q = substitute(step.at("query"));
        for (const auto& [k, v] : q.items()) query[k] = v.get<std::string>();
      }
      const auto res = w.call(step.at("method").get<std::string>(), subst(step.at("path").get<std::string>()),
                              step.contains("body") ? substitute(step.at("body")) : Json(nullptr),
                              step.value("actor", ""), step.value("operator", false), query);
      return check_response(step, res);
    }
    if (op == "respond") {
      const auto party = step.at("party").get<std::string>();
      const auto device = step.at("device").get<std::string>();
      const auto request = subst(step.at("request").get<std::string>());
      const auto decision = parse_enum_or_throw<Decision>(step.at("decision").get<std::string>());
      ResponseProof proof;
      if (step.value("no_prompt", false)) {
        proof.kind = ProofKind::otp_code;
        proof.device_id = device;
        proof.payload = "000000";
      } else {
        proof = w.proof_for(party, device, request, decision);
      }
      if (step.value("tamper", false) && !proof.payload.empty()) proof.payload.back() ^= 0x01;
      const Json body{{"responder_id", step.value("responder", party)},
                      {"decision", std::string(to_string(decision))},
                      {"proof", proof}};
      return check_response(step, w.call("POST", "/v1/requests/" + request + "/decision", body));
    }
    if (op == "advance") {
      w.advance(step.at("ms").get<DurationMs>());
      return {};
    }
    if (op == "tick") {
      w.service().tick();
      return {};
    }
    if (op == "transport") {
      auto& t = w.hub().simulated(parse_enum_or_throw<DeviceKind>(step.at("kind").get<std::string>()));
      if (step.contains("fail_next")) t.fail_next(step.at("fail_next").get<int>());
      if (step.contains("down")) t.set_down(step.at("down").get<bool>());
      return {};
    }
    if (op == "mail") {
      if (step.contains("fail_next")) w.mail().fail_next(step.at("fail_next").get<int>());
      return {};
    }
    return "unknown step kind '" + op + "'";
  } catch (const std::exception& e) {
    return std::string("threw ") + e.what();
  }
}

std::string ScenarioRunner::check_final() {
  const Json expect = substitute(scenario_.expect);
  Service& svc = world_->service();
  auto& orch = svc.orchestrator();

  if (expect.contains("cases")) {
    for (const auto& [id, want] : expect.at("cases").items()) {
      const auto c = orch.get_case(id);
      if (!c) return "case " + id + ": not found";
      if (want.contains("state")) {
        const std::string got(to_string(c->c.state));
        if (got != want.at("state").get<std::string>()) {
          return "case " + id + ": state expected " + want.at("state").get<std::string>() + ", got " + got;
        }
      }
      if (want.contains("history")) {
        std::vector<std::string> got;
        for (const auto& h : c->c.history) got.emplace_back(to_string(h.event));
        auto d = sequence_diff("case " + id + " history", want.at("history").get<std::vector<std::string>>(), got);
        if (!d.empty()) return d;
      }
      Json rest = want;
      rest.erase("state");
      rest.erase("history");
      auto d = json_subset_diff(rest, Json(*c), "/cases/" + id);
      if (!d.empty()) return d;
    }
  }

  if (expect.contains("grants")) {
    const auto grants = orch.grants();
    for (const auto& [id, want] : expect.at("grants").items()) {
      std::vector<Grant> mine;
      for (const auto& g : grants) {
        if (g.request_id == id) mine.push_back(g);
      }
      if (want.is_null()) {
        if (!mine.empty()) return "grants for " + id + ": expected none, got " + mine.front().grant_id;
        continue;
      }
      if (mine.size() != 1) return "grants for " + id + ": expected one, got " + std::to_string(mine.size());
      const Grant& g = mine.front();
      if (want.contains("kind") && want.at("kind").get<std::string>() != to_string(g.kind)) {
        return "grant " + g.grant_id + ": kind expected " + want.at("kind").get<std::string>() + ", got " +
               std::string(to_string(g.kind));
      }
      if (want.contains("ttl_ms") && want.at("ttl_ms").get<DurationMs>() != g.expires_at - g.issued_at) {
        return "grant " + g.grant_id + ": ttl expected " + want.at("ttl_ms").dump() + ", got " +
               std::to_string(g.expires_at - g.issued_at);
      }
      Json rest = want;
      rest.erase("kind");
      rest.erase("ttl_ms");
      auto d = json_subset_diff(rest, Json(g), "/grants/" + g.grant_id);
      if (!d.empty()) return d;
    }
  }

  if (expect.contains("trace")) {
    for (const auto& [patient, want] : expect.at("trace").items()) {
      std::vector<std::string> got;
      for (const auto& e : svc.audit().patient_view(patient)) {
        if (e.seq > baseline_seq_) got.emplace_back(to_string(e.kind));
      }
      auto d = sequence_diff("trace " + patient, want.get<std::vector<std::string>>(), got);
      if (!d.empty()) return d;
    }
  }

  if (expect.contains("outbox")) {
    Json got = Json::array();
    for (const auto& o : world_->hub().outbox()) {
      got.push_back(Json{{"request_id", o.request_id}, {"device_id", o.device_id}});
    }
    auto d = json_subset_diff(expect.at("outbox"), got, "/outbox");
    if (!d.empty()) return d;
  }

  if (expect.contains("mail")) {
    const auto notices = orch.emails().notices();
    const auto& want = expect.at("mail");
    if (want.size() != notices.size()) {
      return "mail: expected " + std::to_string(want.size()) + " notices, got " + std::to_string(notices.size());
    }
    for (std::size_t i = 0; i < notices.size(); ++i) {
      const auto& n = notices[i];
      const auto& w = want[i];
      for (const auto& needle : w.value("contains", std::vector<std::string>{})) {
        if (n.body.find(needle) == std::string::npos) {
          return "mail " + n.notice_id + ": body lacks '" + needle + "'";
        }
      }
      if (w.contains("sent") && w.at("sent").get<bool>() != n.sent_at.has_value()) {
        return "mail " + n.notice_id + ": sent expected " + w.at("sent").dump();
      }
      Json rest = w;
      rest.erase("contains");
      rest.erase("sent");
      auto d = json_subset_diff(rest, Json(n), "/mail/" + n.notice_id);
      if (!d.empty()) return d;
    }
  }

  const auto violations = invariant_sweep(svc);
  if (!violations.empty()) return "invariant: " + violations.front();
  return {};
}

ScenarioResult ScenarioRunner::run() {
  ScenarioResult r;
  r.name = scenario_.name;
  for (std::size_t i = 0; i < step_count(); ++i) {
    auto d = run_step(i);
    if (!d.empty()) {
      r.failed_step = i;
      r.diff = "step " + std::to_string(i) + " (" + describe(scenario_.steps.at(i)) + "): " + d;
      return r;
    }
    if (options_.restart_after.count(i)) world_->restart();
  }
  auto d = check_final();
  if (!d.empty()) {
    r.failed_step = step_count();
    r.diff = "final: " + d;
    return r;
  }
  auto& orch = world_->service().orchestrator();
  for (const auto& c : orch.cases()) {
    r.states[c.c.request.request_id] = std::string(to_string(c.c.state));
  }
  for (const auto& g : orch.grants()) {
    r.notes.push_back(g.request_id + ": grant " + g.grant_id + " " + std::string(to_string(g.kind)) +
                      " TTL = " + format_ttl(g.expires_at - g.issued_at));
  }
  for (const auto& n : orch.emails().notices()) {
    r.notes.push_back(n.request_id + ": notice " + n.notice_id + " to " + n.patient_email +
                      (n.sent_at ? " sent" : " queued"));
  }
  r.passed = true;
  return r;
}

ScenarioResult run_scenario(const Scenario& scenario, const RunOptions& options) {
  ScenarioRunner runner(scenario, options);
  return runner.run();
}

// ===========================================================================
// Invariant sweep
// ===========================================================================

std::vector<std::string> invariant_sweep(Service& service) {
  std::vector<std::string> v;
  auto& orch = service.orchestrator();
  const auto events = service.audit().events();
  const auto cases = orch.cases();
  const auto grants = orch.grants();
  const auto notices = orch.emails().notices();

  for (std::size_t i = 0; i < events.size(); ++i) {
    if (events[i].seq != i + 1) {
      v.push_back("audit seq gap at index " + std::to_string(i) + ": " + std::to_string(events[i].seq));
      break;
    }
  }

  std::map<std::string, std::vector<const AuditEvent*>> by_request;
  for (const auto& e : events) {
    if (e.request_id) by_request[*e.request_id].push_back(&e);
  }
  auto count_kind = [&](const std::string& rid, AuditKind kind, auto pred) {
    std::size_t n = 0;
    for (const auto* e : by_request[rid]) {
      if (e->kind == kind && pred(*e)) ++n;
    }
    return n;
  };
  auto any = [](const AuditEvent&) { return true; };

  std::map<std::string, const CaseSnapshot*> case_by_id;
  for (const auto& c : cases) case_by_id[c.c.request.request_id] = &c;
  std::map<std::string, std::vector<const Grant*>> grants_by_request;
  for (const auto& g : grants) grants_by_request[g.request_id].push_back(&g);

  for (const auto& c : cases) {
    const auto& rid = c.c.request.request_id;
    try {
      if (fold_history(c.c.history) != c.c.state) v.push_back(rid + ": state differs from history fold");
    } catch (const Error& e) {
      v.push_back(rid + ": history does not fold: " + e.what());
    }
    for (std::size_t i = 1; i < c.c.history.size(); ++i) {
      if (c.c.history[i].at < c.c.history[i - 1].at) v.push_back(rid + ": history goes back in time");
    }

    int dispatched_at = -1;
    for (std::size_t i = 0; i < c.c.history.size(); ++i) {
      const auto ev = c.c.history[i].event;
      if (ev == ConsentEvent::DispatchedToPatient && dispatched_at < 0) dispatched_at = static_cast<int>(i);
      const bool answer = ev == ConsentEvent::PatientApproved || ev == ConsentEvent::PatientDenied ||
                          ev == ConsentEvent::DelegateApproved || ev == ConsentEvent::DelegateDenied;
      if (answer && dispatched_at < 0) v.push_back(rid + ": decision before any notification");
    }
    std::uint64_t first_dispatch = 0;
    for (const auto* e : by_request[rid]) {
      if (e->kind == AuditKind::dispatched && first_dispatch == 0) first_dispatch = e->seq;
      if (e->kind == AuditKind::decision && (first_dispatch == 0 || e->seq < first_dispatch)) {
        v.push_back(rid + ": decision event precedes dispatch");
      }
    }

    const auto state = c.c.state;
    const auto& mine = grants_by_request[rid];
    if (mine.size() > 1) v.push_back(rid + ": more than one grant");
    const bool failed = state == ConsentState::Denied || state == ConsentState::TimedOut ||
                        state == ConsentState::RejectedAuth || state == ConsentState::RejectedAcl;
    if (failed && !mine.empty()) v.push_back(rid + ": grant exists in state " + std::string(to_string(state)));
    const bool granted = state == ConsentState::Approved || state == ConsentState::AutoApproved ||
                         state == ConsentState::EmergencyGranted;
    if (granted && mine.empty()) v.push_back(rid + ": " + std::string(to_string(state)) + " without a grant");
    if (state == ConsentState::RejectedAcl && count_kind(rid, AuditKind::dispatched, any) > 0) {
      v.push_back(rid + ": patient notified about an ACL-denied request");
    }
    if ((failed || state == ConsentState::RejectedAcl) &&
        service.audit().patient_view(c.c.request.patient).empty()) {
      v.push_back(rid + ": denial left no patient-visible event");
    }
    if (state == ConsentState::TimedOut && count_kind(rid, AuditKind::timeout, any) != 1) {
      v.push_back(rid + ": TimedOut without exactly one timeout event");
    }
  }

  for (const auto& g : grants) {
    const auto& rid = g.request_id;
    const auto cit = case_by_id.find(rid);
    if (cit == case_by_id.end()) {
      v.push_back(g.grant_id + ": no case " + rid);
      continue;
    }
    const CaseSnapshot& c = *cit->second;
    const auto by_grant = [&](const AuditEvent& e) {
      const auto it = e.detail.find("grant_id");
      return it != e.detail.end() && it->second == g.grant_id;
    };
    if (count_kind(rid, AuditKind::grant_issued, by_grant) != 1) {
      v.push_back(g.grant_id + ": not exactly one grant_issued event");
    }
    if (!std::includes(c.c.request.sections.begin(), c.c.request.sections.end(), g.scope.sections.begin(),
                       g.scope.sections.end())) {
      v.push_back(g.grant_id + ": scope exceeds the request");
    }
    if (g.holder != c.c.request.requester) v.push_back(g.grant_id + ": holder is not the requester");

    switch (g.kind) {
      case GrantKind::consented: {
        const auto approvals = count_kind(rid, AuditKind::decision, [](const AuditEvent& e) {
          const auto it = e.detail.find("decision");
          return it != e.detail.end() && it->second == "approve";
        });
        if (approvals != 1 || !c.decision || c.decision->decision != Decision::approve) {
          v.push_back(g.grant_id + ": consented grant without exactly one approval");
        }
        if (c.c.state != ConsentState::Approved) v.push_back(g.grant_id + ": consented grant on a non-approved case");
        if (g.expires_at - g.issued_at != orch.config().consented_grant_ttl_ms) {
          v.push_back(g.grant_id + ": consented TTL differs from configuration");
        }
        break;
      }
      case GrantKind::auto_usual_provider: {
        bool usual = false;
        try {
          usual = service.policy().registry().is_usual_provider(c.c.request.requester, c.c.request.patient);
        } catch (const Error&) {
        }
        if (!usual) v.push_back(g.grant_id + ": auto grant for a non-usual provider");
        if (c.c.state != ConsentState::AutoApproved) v.push_back(g.grant_id + ": auto grant on a non-auto case");
        break;
      }
      case GrantKind::emergency: {
        if (count_kind(rid, AuditKind::break_glass, any) != 1) {
          v.push_back(g.grant_id + ": emergency grant without exactly one break_glass event");
        }
        if (count_kind(rid, AuditKind::email_queued, by_grant) != 1) {
          v.push_back(g.grant_id + ": emergency grant without exactly one queued email");
        }
        const auto n = std::count_if(notices.begin(), notices.end(),
                                     [&](const EmailNotice& x) { return x.grant_id == g.grant_id; });
        if (n != 1) v.push_back(g.grant_id + ": emergency grant without exactly one notice");
        if (g.expires_at - g.issued_at != kEmergencyGrantTtlMs) {
          v.push_back(g.grant_id + ": emergency TTL is " + std::to_string(g.expires_at - g.issued_at));
        }
        if (c.c.state != ConsentState::EmergencyGranted) {
          v.push_back(g.grant_id + ": emergency grant on a case in " + std::string(to_string(c.c.state)));
        }
        break;
      }
    }
  }

  for (const auto& [rid, list] : by_request) {
    std::size_t bg = 0;
    std::size_t mail = 0;
    for (const auto* e : list) {
      if (e->kind == AuditKind::break_glass) ++bg;
      if (e->kind == AuditKind::email_queued) ++mail;
    }
    if (bg != mail) v.push_back(rid + ": break_glass events without matching email_queued");
  }
  return v;
}

// ===========================================================================
// Fuzz campaign
// ===========================================================================

namespace {

class Fuzzer {
 public:
  explicit Fuzzer(const FuzzOptions& o) : o_(o), rng_(o.seed) {
    World::Options wo;
    wo.hash_iterations = 1;
    world_ = std::make_unique<World>(wo);
  }

  FuzzReport run() {
    populate();
    for (auto kind : all_values<DeviceKind>()) {
      world_->hub().simulated(kind).set_failure_rate(o_.channel_failure_rate,
                                                     o_.seed * 31 + static_cast<std::uint64_t>(kind));
    }
    for (std::size_t i = 0; i < o_.n_requests; ++i) {
      submit();
      const int extra = pick(0, 3);
      for (int k = 0; k < extra; ++k) act();
    }
    drain();
    return report();
  }

 private:
  int pick(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng_); }
  bool chance(double p) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng_) < p; }
  template <typename T>
  const T& choose(const std::vector<T>& v) {
    return v[static_cast<std::size_t>(pick(0, static_cast<int>(v.size()) - 1))];
  }
  Service& svc() { return world_->service(); }
  ConsentOrchestrator& orch() { return svc().orchestrator(); }
  EpochMs now() { return world_->clock().now(); }

  void violation(const std::string& what) { violations_.push_back(what); }

  void populate() {
    const std::vector<DeviceKind> kinds = all_values<DeviceKind>();
    Json patients = Json::array();
    std::vector<std::string> with_devices;
    for (std::size_t i = 0; i < o_.patients; ++i) {
      const std::string id = "fp-" + std::to_string(i);
      patient_ids_.push_back(id);
      Json devices = Json::array();
      const int n = pick(0, 3);
      for (int d = 0; d < n; ++d) {
        devices.push_back(Json{{"device_id", id + "-d" + std::to_string(d)},
                               {"kind", choose(kinds)},
                               {"address", "sim"},
                               {"priority", d + 1}});
      }
      if (n > 0) with_devices.push_back(id);
      patients.push_back(Json{{"patient_id", id}, {"email", id + "@example.org"}, {"devices", devices}});
    }
    for (auto& p : patients) {
      if (p.at("devices").empty() && !with_devices.empty() && chance(0.6)) p["nominee"] = choose(with_devices);
    }
    with_devices_ = with_devices;

    const std::vector<PrincipalRole> roles{PrincipalRole::gp,          PrincipalRole::medical_specialist,
                                           PrincipalRole::allied_health, PrincipalRole::pharmacist,
                                           PrincipalRole::radiology_technician, PrincipalRole::health_insurer,
                                           PrincipalRole::system_operator};
    Json principals = Json::array();
    principals.push_back(Json{{"principal_id", "fz-manager"},
                              {"role", "system_operator"},
                              {"usertype", "manager"},
                              {"password", "pw"}});
    for (std::size_t i = 0; i < o_.providers; ++i) {
      const std::string id = "fz-" + std::to_string(i);
      const auto role = i % 3 == 0 ? PrincipalRole::gp : choose(roles);
      std::vector<std::string> links;
      if (role == PrincipalRole::gp) {
        for (const auto& p : patient_ids_) {
          if (chance(0.2)) links.push_back(p);
        }
      }
      principals.push_back(Json{{"principal_id", id},
                                {"role", role},
                                {"usertype", "normal"},
                                {"linked_approver", "fz-manager"},
                                {"linked_patients", links},
                                {"password", "pw-" + id}});
      provider_ids_.push_back(id);
    }
    svc().seed_json(Json{{"principals", principals}}, Json{{"patients", patients}}, std::nullopt);

    for (const auto& p : patient_ids_) {
      for (auto s : all_values<RecordSection>()) {
        if (chance(0.5)) svc().records().seed_section(p, s, "body of " + p, now());
      }
    }
  }

  std::string ticket_for(const std::string& provider) {
    auto it = tickets_.find(provider);
    if (it == tickets_.end() || now() >= it->second.expires_at) {
      if (it != tickets_.end() && chance(0.1)) return it->second.ticket_id;  // stale on purpose
      const auto t = svc().policy().authenticate(provider, "pw-" + provider);
      tickets_[provider] = t;
      return t.ticket_id;
    }
    return it->second.ticket_id;
  }

  void submit() {
    SubmitParams sp;
    const auto provider = choose(provider_ids_);
    sp.ticket_id = chance(0.03) ? "not-a-ticket-" + std::to_string(pick(0, 1 << 30)) : ticket_for(provider);
    sp.patient_id = choose(patient_ids_);
    sp.action = chance(0.8) ? Action::read : Action::write;
    // Bias toward sections the role may touch so most requests reach consent.
    std::vector<RecordSection> sections = all_values<RecordSection>();
    if (chance(0.7)) {
      const auto role = svc().policy().registry().principal(provider)->role;
      std::vector<RecordSection> permitted;
      for (auto s : sections) {
        if (svc().policy().acl().lookup(role, s, sp.action) == Verdict::permit) permitted.push_back(s);
      }
      if (!permitted.empty()) sections = permitted;
    }
    const int ns = pick(1, 3);
    for (int i = 0; i < ns; ++i) sp.sections.insert(choose(sections));
    const auto purposes = all_values<AccessPurpose>();
    sp.purpose = choose(purposes);
    if (chance(o_.breakglass_rate / 2)) {
      sp.purpose = AccessPurpose::emergency_treatment;
      sp.declared_emergency = true;
      sp.justification = "collapsed in waiting room";
    }
    ++requests_;
    try {
      const auto c = orch().submit_access_request(sp);
      request_ids_.push_back(c.c.request.request_id);
      owners_[c.c.request.request_id] = provider;
    } catch (const Error& e) {
      if (e.code() != ErrorCode::MalformedEmergency) violation(std::string("submit threw ") + e.what());
    }
  }

  std::vector<std::string> open_cases() {
    std::vector<std::string> out;
    for (const auto& c : orch().cases()) {
      if (!is_terminal(c.c.state)) out.push_back(c.c.request.request_id);
    }
    return out;
  }

  void act() {
    const int r = pick(0, 99);
    if (r < 45) {
      respond(false);
    } else if (r < 75) {
      world_->clock().advance(pick(0, 150'000));
      svc().tick();
    } else if (r < 75 + static_cast<int>(o_.breakglass_rate * 100)) {
      breakglass();
    } else if (r < 88) {
      respond(true);
    } else if (r < 95) {
      read_with_grant();
    } else {
      delegation();
    }
  }

  void respond(bool any_case) {
    std::vector<std::string> pool = any_case ? request_ids_ : open_cases();
    if (pool.empty()) return;
    const auto rid = choose(pool);
    const auto c = orch().get_case(rid);
    if (!c) return;
    std::optional<DispatchAttempt> last;
    for (const auto& a : c->attempts) {
      if (a.outcome == DispatchOutcome::delivered) last = a;
    }
    if (!last) return;
    const Decision decision = chance(0.7) ? Decision::approve : Decision::deny;
    ResponseProof proof;
    try {
      proof = world_->proof_for(last->target, last->device_id, rid, decision);
    } catch (const Error&) {
      return;
    }
    const int mode = pick(0, 19);
    std::string responder = last->target;
    if (mode == 0) proof.payload.back() ^= 0x01;
    if (mode == 1) responder = choose(patient_ids_);
    try {
      orch().record_decision(rid, responder, decision, proof);
    } catch (const Error& e) {
      const auto code = e.code();
      if (code != ErrorCode::BadProof && code != ErrorCode::UnauthorizedResponder) {
        violation(std::string("record_decision threw ") + e.what());
      }
    }
  }

  void breakglass() {
    const auto pool = open_cases();
    if (pool.empty()) return;
    const auto rid = choose(pool);
    const auto owner = owners_.find(rid);
    if (owner == owners_.end()) return;
    try {
      orch().break_glass(ticket_for(owner->second), rid, chance(0.1) ? "" : "deteriorating rapidly");
    } catch (const Error& e) {
      const auto code = e.code();
      if (code != ErrorCode::EmptyJustification && code != ErrorCode::InvalidTransition &&
          code != ErrorCode::RejectedAuth) {
        violation(std::string("break_glass threw ") + e.what());
      }
    }
  }

  void read_with_grant() {
    const auto grants = orch().grants();
    if (grants.empty()) return;
    const auto& g = choose(grants);
    const auto sections = all_values<RecordSection>();
    const auto section = choose(sections);
    const bool allowed = now() < g.expires_at && g.scope.sections.count(section) && g.scope.action == Action::read;
    try {
      svc().records().read_section(g.grant_id, g.scope.patient_id, section, now(), g.holder);
      if (!allowed) violation(g.grant_id + ": read outside scope was permitted");
    } catch (const Error& e) {
      if (e.code() == ErrorCode::GrantDenied && allowed) violation(g.grant_id + ": in-scope read denied");
      if (e.code() != ErrorCode::GrantDenied && e.code() != ErrorCode::SectionEmpty) {
        violation(std::string("read_section threw ") + e.what());
      }
    }
  }

  void delegation() {
    if (!delegations_.empty() && chance(0.4)) {
      const auto id = choose(delegations_);
      orch().revoke_delegation(id, "fuzz");
      return;
    }
    if (with_devices_.empty()) return;
    const auto patient = choose(patient_ids_);
    const auto delegate = choose(with_devices_);
    if (delegate == patient) return;
    const EpochMs start = now() - pick(0, 600'000);
    const EpochMs end = now() + pick(1, 86'400'000);
    const auto d = orch().create_delegation(patient, delegate, start, end, patient);
    delegations_.push_back(d.delegation_id);
  }

  void drain() {
    for (int i = 0; i < 10 && !open_cases().empty(); ++i) {
      world_->clock().advance(orch().config().overall_deadline_ms);
      svc().tick();
    }
    svc().tick();
  }

  FuzzReport report() {
    FuzzReport r;
    r.seed = o_.seed;
    r.requests = requests_;
    r.violations = violations_;
    for (auto& v : invariant_sweep(svc())) r.violations.push_back(std::move(v));
    for (const auto& c : orch().cases()) {
      const auto& rid = c.c.request.request_id;
      const std::string state(to_string(c.c.state));
      ++r.terminal_counts[state];
      r.final_states[rid] = state;
      bool acl_ok = false;
      bool usual = false;
      bool bg = false;
      for (const auto& h : c.c.history) {
        acl_ok |= h.event == ConsentEvent::AclOk;
        usual |= h.event == ConsentEvent::UsualProviderDetected;
        bg |= h.event == ConsentEvent::BreakGlassInvoked;
      }
      if (!is_terminal(c.c.state)) r.violations.push_back(rid + ": still open after drain");
      if (acl_ok && !usual && !bg) r.consent_path_requests.push_back(rid);
    }
    for (const auto& g : orch().grants()) ++r.grant_counts[std::string(to_string(g.kind))];
    std::string all;
    for (const auto& e : svc().audit().events()) {
      r.audit_lines.push_back(serialize_audit_line(e));
      all += r.audit_lines.back();
      all += '\n';
    }
    r.audit_digest = crypto::sha256_hex(all);
    return r;
  }

  FuzzOptions o_;
  std::mt19937_64 rng_;
  std::unique_ptr<World> world_;
  std::vector<std::string> patient_ids_;
  std::vector<std::string> with_devices_;
  std::vector<std::string> provider_ids_;
  std::vector<std::string> request_ids_;
  std::vector<std::string> delegations_;
  std::map<std::string, std::string> owners_;
  std::map<std::string, AuthTicket> tickets_;
  std::vector<std::string> violations_;
  std::size_t requests_ = 0;
};

}  // namespace

Json FuzzReport::to_json() const {
  return Json{{"seed", seed},
              {"requests", requests},
              {"violations", violations},
              {"terminal_counts", terminal_counts},
              {"grant_counts", grant_counts},
              {"audit_events", audit_lines.size()},
              {"audit_digest", audit_digest}};
}

FuzzReport fuzz_campaign(const FuzzOptions& options) {
  Fuzzer f(options);
  return f.run();
}

}  // namespace consentgate::harness
