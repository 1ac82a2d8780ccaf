#include <gtest/gtest.h>

#include <random>

#include "consentgate/orchestrator.hpp"
#include "race.hpp"
#include "test_support.hpp"

namespace consentgate {
namespace {

constexpr DurationMs kDay = 86'400'000;

class OrchestratorTest : public ::testing::Test {
 protected:
  void SetUp() override { w_ = test::seeded_world(); }
  Service& svc() { return w_->service(); }
  ConsentOrchestrator& orch() { return svc().orchestrator(); }
  EpochMs now() { return w_->clock().now(); }
  std::string ticket(const std::string& who) { return test::ticket_for(*w_, who); }

  CaseSnapshot submit(const std::string& who, const std::string& patient, SectionSet sections,
                      Action action = Action::read) {
    auto p = test::read_request(ticket(who), patient, std::move(sections));
    p.action = action;
    return orch().submit_access_request(p);
  }

  CaseSnapshot emergency(const std::string& who, const std::string& patient, SectionSet sections,
                         const std::string& why = "unconscious after collision") {
    auto p = test::read_request(ticket(who), patient, std::move(sections), AccessPurpose::emergency_treatment);
    p.declared_emergency = true;
    p.justification = why;
    return orch().submit_access_request(p);
  }

  std::size_t count(const std::string& rid, AuditKind kind) {
    std::size_t n = 0;
    for (const auto& e : svc().audit().events_for_request(rid)) n += e.kind == kind;
    return n;
  }

  static ErrorCode code_of(const std::function<void()>& f) {
    try {
      f();
    } catch (const Error& e) {
      return e.code();
    }
    ADD_FAILURE() << "no error thrown";
    return ErrorCode::NotFound;
  }

  std::unique_ptr<harness::World> w_;
};

// --- submit -------------------------------------------------------------------

TEST_F(OrchestratorTest, UsualGpIsAutoApproved) {
  const auto s = submit("dr-usual", "pt-alice", {RecordSection::medications});
  EXPECT_EQ(s.c.state, ConsentState::AutoApproved);
  const auto g = orch().find_grant(*s.grant_id);
  ASSERT_TRUE(g);
  EXPECT_EQ(g->kind, GrantKind::auto_usual_provider);
  EXPECT_EQ(g->holder, "dr-usual");
  EXPECT_TRUE(w_->hub().outbox().empty());
}

TEST_F(OrchestratorTest, PharmacistPromptsPriorityOneDevice) {
  const auto s = submit("pharm-jones", "pt-alice", {RecordSection::medications});
  EXPECT_EQ(s.c.state, ConsentState::AwaitingPatient);
  ASSERT_EQ(w_->hub().outbox().size(), 1u);
  EXPECT_EQ(w_->hub().outbox()[0].device_id, "alice-phone");
  EXPECT_EQ(s.c.deadline, now() + orch().config().overall_deadline_ms);
  EXPECT_EQ(s.c.active_channel, "alice-phone");
}

TEST_F(OrchestratorTest, ExpiredTicketRejectedWithoutNotification) {
  const auto t = ticket("pharm-jones");
  w_->clock().advance(svc().policy().config().ticket_ttl_ms);
  const auto s = orch().submit_access_request(test::read_request(t, "pt-alice", {RecordSection::medications}));
  EXPECT_EQ(s.c.state, ConsentState::RejectedAuth);
  EXPECT_TRUE(w_->hub().outbox().empty());
  EXPECT_GE(count(s.c.request.request_id, AuditKind::auth_fail), 1u);
  EXPECT_FALSE(svc().audit().patient_view("pt-alice").empty());
}

TEST_F(OrchestratorTest, AclDenialNeverBothersThePatient) {
  const auto s = submit("rad-tech", "pt-alice", {RecordSection::mental_health});
  EXPECT_EQ(s.c.state, ConsentState::RejectedAcl);
  EXPECT_TRUE(w_->hub().outbox().empty());
  EXPECT_EQ(count(s.c.request.request_id, AuditKind::acl_fail), 1u);
  EXPECT_EQ(count(s.c.request.request_id, AuditKind::dispatched), 0u);
}

TEST_F(OrchestratorTest, UnknownPatientCreatesNoCase) {
  const auto before = orch().cases().size();
  EXPECT_EQ(code_of([&] { submit("pharm-jones", "pt-nobody", {RecordSection::medications}); }),
            ErrorCode::UnknownPatient);
  EXPECT_EQ(orch().cases().size(), before);
}

TEST_F(OrchestratorTest, MalformedInputRejected) {
  EXPECT_EQ(code_of([&] { submit("pharm-jones", "pt-alice", {}); }), ErrorCode::InvalidArgument);
  EXPECT_EQ(code_of([&] { emergency("pharm-jones", "pt-alice", {RecordSection::medications}, ""); }),
            ErrorCode::MalformedEmergency);
}

TEST_F(OrchestratorTest, RequestIdsAreNeverReused) {
  std::set<std::string> ids;
  for (int i = 0; i < 20; ++i) ids.insert(submit("pharm-jones", "pt-alice", {RecordSection::medications}).c.request.request_id);
  EXPECT_EQ(ids.size(), 20u);
}

// --- select_channel -----------------------------------------------------------

TEST_F(OrchestratorTest, SecondAttemptUsesSecondDevice) {
  const auto t = orch().select_channel("pt-alice", 2, now());
  EXPECT_EQ(t.device.kind, DeviceKind::sms);
  EXPECT_EQ(t.kind, TargetKind::patient);
}

TEST_F(OrchestratorTest, DevicelessPatientRoutesToNominee) {
  const auto t = orch().select_channel("pt-bob", 1, now());
  EXPECT_EQ(t.party_id, "pt-carol");
  EXPECT_EQ(t.kind, TargetKind::nominee);
  EXPECT_EQ(t.device.kind, DeviceKind::landline_voice);
}

TEST_F(OrchestratorTest, ExhaustedListHasNoChannel) {
  EXPECT_EQ(code_of([&] { orch().select_channel("pt-dave", 2, now()); }), ErrorCode::NoChannelAvailable);
  EXPECT_EQ(code_of([&] { orch().select_channel("pt-dave", 0, now()); }), ErrorCode::InvalidArgument);
}

TEST_F(OrchestratorTest, DelegateDevicesFollowPatientDevices) {
  orch().create_delegation("pt-dave", "pt-carol", now(), now() + 14 * kDay, "pt-dave");
  const auto targets = orch().effective_targets("pt-dave", now());
  ASSERT_EQ(targets.size(), 2u);
  EXPECT_EQ(targets[0].party_id, "pt-dave");
  EXPECT_EQ(targets[1].party_id, "pt-carol");
  EXPECT_EQ(targets[1].kind, TargetKind::delegate);
  EXPECT_EQ(orch().effective_targets("pt-dave", now() + 14 * kDay).size(), 1u);
}

// --- record_decision ------------------------------------------------------------

TEST_F(OrchestratorTest, ApprovalIssuesExactlyScopedGrant) {
  const SectionSet sections{RecordSection::medications, RecordSection::demographics};
  const auto s = test::consented(*w_, "pharm-jones", "pt-alice", sections);
  EXPECT_EQ(s.c.state, ConsentState::Approved);
  const auto g = *orch().find_grant(*s.grant_id);
  EXPECT_EQ(g.kind, GrantKind::consented);
  EXPECT_EQ(g.scope, (GrantScope{"pt-alice", sections, Action::read}));
  EXPECT_EQ(g.expires_at - g.issued_at, orch().config().consented_grant_ttl_ms);
  ASSERT_TRUE(s.decision);
  EXPECT_EQ(s.decision->responder_kind, ResponderKind::patient);
  EXPECT_EQ(s.decision->channel, DeviceKind::smartphone_push);
}

TEST_F(OrchestratorTest, DenialIssuesNoGrant) {
  const auto s = submit("pharm-jones", "pt-alice", {RecordSection::medications});
  const auto rid = s.c.request.request_id;
  const auto after =
      orch().record_decision(rid, "pt-alice", Decision::deny, w_->proof_for("pt-alice", "alice-phone", rid, Decision::deny));
  EXPECT_EQ(after.c.state, ConsentState::Denied);
  EXPECT_FALSE(after.grant_id);
  EXPECT_EQ(count(rid, AuditKind::grant_issued), 0u);
}

TEST_F(OrchestratorTest, SecondDecisionIsAuditedOnly) {
  const auto s = test::consented(*w_, "pharm-jones", "pt-alice", {RecordSection::medications});
  const auto rid = s.c.request.request_id;
  const auto again = orch().record_decision(rid, "pt-alice", Decision::deny,
                                            w_->proof_for("pt-alice", "alice-phone", rid, Decision::deny));
  EXPECT_EQ(again.c.state, ConsentState::Approved);
  EXPECT_EQ(again.grant_id, s.grant_id);
  EXPECT_EQ(count(rid, AuditKind::duplicate_decision), 1u);
  EXPECT_EQ(count(rid, AuditKind::decision), 1u);
}

TEST_F(OrchestratorTest, WrongResponderOrProofRejected) {
  const auto s = submit("pharm-jones", "pt-alice", {RecordSection::medications});
  const auto rid = s.c.request.request_id;
  const auto proof = w_->proof_for("pt-alice", "alice-phone", rid, Decision::approve);
  EXPECT_EQ(code_of([&] { orch().record_decision(rid, "pt-dave", Decision::approve, proof); }),
            ErrorCode::UnauthorizedResponder);
  EXPECT_EQ(code_of([&] { orch().record_decision(rid, "pt-alice", Decision::deny, proof); }), ErrorCode::BadProof);
  EXPECT_EQ(code_of([&] { orch().record_decision("req-999999", "pt-alice", Decision::approve, proof); }),
            ErrorCode::UnknownRequest);
  EXPECT_EQ(orch().get_case(rid)->c.state, ConsentState::AwaitingPatient);
  EXPECT_EQ(orch().record_decision(rid, "pt-alice", Decision::approve, proof).c.state, ConsentState::Approved);
}

// A delegate's answer counts only while now is inside [window_start, window_end).
TEST(DelegateWindow, BoundarySweep) {
  for (const DurationMs offset : {-60'000, -2, -1, 0, 1, 2, 60'000}) {
    auto w = test::seeded_world();
    auto& orch = w->service().orchestrator();
    const EpochMs t0 = w->clock().now();
    // Escalation to the delegate happens once dave's push times out.
    const EpochMs escalation = t0 + orch.config().channel_timeout(DeviceKind::smartphone_push);
    const EpochMs window_end = escalation + 100'000;
    orch.create_delegation("pt-dave", "pt-carol", t0, window_end, "pt-dave");

    const auto s = orch.submit_access_request(
        test::read_request(test::ticket_for(*w, "pharm-jones"), "pt-dave", {RecordSection::medications}));
    const auto rid = s.c.request.request_id;
    w->advance(escalation - t0);
    ASSERT_EQ(orch.get_case(rid)->c.state, ConsentState::AwaitingDelegate);
    const auto proof = w->proof_for("pt-carol", "carol-landline", rid, Decision::approve);

    w->clock().set(window_end + offset);
    const bool inside = window_end + offset < window_end;
    try {
      const auto after = orch.record_decision(rid, "pt-carol", Decision::approve, proof);
      EXPECT_TRUE(inside) << "accepted at offset " << offset;
      EXPECT_EQ(after.c.state, ConsentState::Approved);
      EXPECT_EQ(after.decision->responder_kind, ResponderKind::delegate);
    } catch (const Error& e) {
      EXPECT_FALSE(inside) << "rejected at offset " << offset << ": " << e.what();
      EXPECT_EQ(e.code(), ErrorCode::UnauthorizedResponder);
    }
  }
}

// --- deadlines -----------------------------------------------------------------

TEST_F(OrchestratorTest, UnansweredPushFallsBackToSms) {
  const auto s = submit("pharm-jones", "pt-alice", {RecordSection::medications});
  const auto rid = s.c.request.request_id;
  w_->clock().advance(orch().config().channel_timeout(DeviceKind::smartphone_push));
  const auto after = orch().handle_deadline(rid, now());
  EXPECT_EQ(after.c.state, ConsentState::AwaitingPatient);
  EXPECT_EQ(after.c.active_channel, "alice-sms");
  ASSERT_EQ(w_->hub().outbox().size(), 2u);
  EXPECT_EQ(w_->hub().outbox()[1].device_id, "alice-sms");
  EXPECT_EQ(w_->hub().outbox()[1].attempt, 2);
}

TEST_F(OrchestratorTest, ExhaustedChannelsTimeOutWithoutGrant) {
  const auto s = submit("pharm-jones", "pt-dave", {RecordSection::medications});
  const auto rid = s.c.request.request_id;
  w_->advance(orch().config().channel_timeout(DeviceKind::smartphone_push));
  const auto after = *orch().get_case(rid);
  EXPECT_EQ(after.c.state, ConsentState::TimedOut);
  EXPECT_FALSE(after.grant_id);
  for (const auto& g : orch().grants()) EXPECT_NE(g.request_id, rid);
  EXPECT_EQ(count(rid, AuditKind::timeout), 1u);
}

TEST_F(OrchestratorTest, DevicelessPatientWithoutNomineeDeadlineDenies) {
  Patient lone;
  lone.patient_id = "pt-lone";
  lone.email = "lone@example.org";
  svc().policy().registry().add_patient(lone);
  const auto s = submit("pharm-jones", "pt-lone", {RecordSection::medications});
  EXPECT_EQ(s.c.state, ConsentState::AwaitingPatient);
  EXPECT_TRUE(w_->hub().outbox().empty());
  w_->advance(orch().config().overall_deadline_ms);
  EXPECT_EQ(orch().get_case(s.c.request.request_id)->c.state, ConsentState::TimedOut);
}

TEST_F(OrchestratorTest, DeadlineBeforeDueChangesNothing) {
  const auto s = submit("pharm-jones", "pt-alice", {RecordSection::medications});
  const auto after = orch().handle_deadline(s.c.request.request_id, now() + 1);
  EXPECT_EQ(after, *orch().get_case(s.c.request.request_id));
  EXPECT_EQ(after.c.state, ConsentState::AwaitingPatient);
  EXPECT_EQ(code_of([&] { orch().handle_deadline("req-424242", now()); }), ErrorCode::UnknownRequest);
}

TEST(DecisionDeadlineRace, ExactlyOneOutcome) {
  auto w = test::seeded_world();
  int approved = 0, timed_out = 0;
  for (int i = 0; i < 200; ++i) {
    const auto r = test::decision_deadline_race(*w);
    ASSERT_TRUE(r.single_terminal()) << "iteration " << i << " state " << to_string(r.state);
    (r.state == ConsentState::Approved ? approved : timed_out)++;
  }
  EXPECT_EQ(approved + timed_out, 200);
  EXPECT_TRUE(harness::invariant_sweep(w->service()).empty());
}

// --- break-glass ---------------------------------------------------------------

TEST_F(OrchestratorTest, EmergencyGrantLastsExactlyFiveDays) {
  const auto s = emergency("spec-cardio", "pt-grace", {RecordSection::medical_history, RecordSection::medications});
  EXPECT_EQ(s.c.state, ConsentState::EmergencyGranted);
  const auto g = *orch().find_grant(*s.grant_id);
  EXPECT_EQ(g.kind, GrantKind::emergency);
  EXPECT_EQ(g.expires_at - g.issued_at, 432'000'000);
  const auto rid = s.c.request.request_id;
  EXPECT_EQ(count(rid, AuditKind::break_glass), 1u);
  EXPECT_EQ(count(rid, AuditKind::email_queued), 1u);
  EXPECT_TRUE(orch().emails().find_by_grant(g.grant_id));
  EXPECT_EQ(s.c.request.category, RequestCategory::special);
}

TEST_F(OrchestratorTest, BreakGlassOnOpenCase) {
  const auto s = submit("spec-cardio", "pt-alice", {RecordSection::medical_history});
  const auto rid = s.c.request.request_id;
  EXPECT_EQ(code_of([&] { orch().break_glass(ticket("spec-cardio"), rid, "   "); }), ErrorCode::EmptyJustification);
  EXPECT_EQ(code_of([&] { orch().break_glass(ticket("pharm-jones"), rid, "x"); }), ErrorCode::NotRequester);
  EXPECT_EQ(code_of([&] { orch().break_glass("bogus", rid, "x"); }), ErrorCode::RejectedAuth);
  const auto g = orch().break_glass(ticket("spec-cardio"), rid, "collapsed in waiting room");
  EXPECT_EQ(g.expires_at - g.issued_at, kEmergencyGrantTtlMs);
  EXPECT_EQ(orch().get_case(rid)->c.state, ConsentState::EmergencyGranted);
  EXPECT_EQ(orch().get_case(rid)->breakglass_justification, "collapsed in waiting room");
  EXPECT_EQ(code_of([&] { orch().break_glass(ticket("spec-cardio"), rid, "again"); }),
            ErrorCode::InvalidTransition);
}

TEST_F(OrchestratorTest, BreakGlassStillRespectsAcl) {
  const auto s = emergency("rad-tech", "pt-alice", {RecordSection::mental_health});
  EXPECT_EQ(s.c.state, ConsentState::RejectedAcl);
  EXPECT_FALSE(s.grant_id);
  EXPECT_TRUE(orch().emails().notices().empty());
}

TEST_F(OrchestratorTest, EmailPumpDeliversNotice) {
  const auto s = emergency("spec-cardio", "pt-grace", {RecordSection::medical_history});
  EXPECT_EQ(orch().pump_email(w_->mail()), 1u);
  ASSERT_EQ(w_->mail().delivered().size(), 1u);
  EXPECT_EQ(w_->mail().delivered()[0].patient_email, "grace@example.org");
  EXPECT_EQ(count(s.c.request.request_id, AuditKind::email_sent), 1u);
}

// --- storage failures ----------------------------------------------------------

TEST_F(OrchestratorTest, StorageFailureFailsClosed) {
  auto& sink = dynamic_cast<MemoryAuditSink&>(svc().audit().sink());
  const auto s = submit("pharm-jones", "pt-alice", {RecordSection::medications});
  const auto rid = s.c.request.request_id;
  const auto proof = w_->proof_for("pt-alice", "alice-phone", rid, Decision::approve);
  sink.set_failing(true);
  EXPECT_EQ(code_of([&] { orch().record_decision(rid, "pt-alice", Decision::approve, proof); }),
            ErrorCode::StorageFailure);
  EXPECT_EQ(orch().get_case(rid)->c.state, ConsentState::AwaitingPatient);
  EXPECT_FALSE(orch().get_case(rid)->grant_id);
  sink.set_failing(false);
  const auto grant = test::consented(*w_, "pharm-jones", "pt-alice", {RecordSection::medications}).grant_id;
  sink.set_failing(true);
  EXPECT_FALSE(orch().check_grant(*grant, "pt-alice", RecordSection::medications, Action::read, now()));
}

TEST_F(OrchestratorTest, BreakGlassProceedsDuringStorageOutage) {
  auto& sink = dynamic_cast<MemoryAuditSink&>(svc().audit().sink());
  const auto s = submit("spec-cardio", "pt-grace", {RecordSection::medical_history});
  const auto t = ticket("spec-cardio");
  const auto seq = svc().audit().last_seq();
  sink.set_failing(true);
  const auto g = orch().break_glass(t, s.c.request.request_id, "arrest");
  EXPECT_EQ(g.kind, GrantKind::emergency);
  EXPECT_EQ(orch().pending_audit(), 3u);
  EXPECT_EQ(svc().audit().last_seq(), seq);
  EXPECT_EQ(orch().flush_pending_audit(), 3u);
  sink.set_failing(false);
  EXPECT_EQ(orch().flush_pending_audit(), 0u);
  std::vector<AuditKind> kinds;
  for (const auto& e : svc().audit().events_after(seq)) kinds.push_back(e.kind);
  EXPECT_EQ(kinds, (std::vector<AuditKind>{AuditKind::break_glass, AuditKind::grant_issued, AuditKind::email_queued}));
}

// --- delegations ------------------------------------------------------------------

TEST_F(OrchestratorTest, DelegationValidation) {
  const auto d = orch().create_delegation("pt-dave", "pt-carol", now(), now() + 14 * kDay, "pt-dave");
  EXPECT_TRUE(d.covers(now()));
  EXPECT_TRUE(d.covers(now() + 14 * kDay - 1));
  EXPECT_FALSE(d.covers(now() + 14 * kDay));
  EXPECT_EQ(code_of([&] { orch().create_delegation("pt-dave", "pt-carol", now(), now(), "pt-dave"); }),
            ErrorCode::InvalidWindow);
  EXPECT_EQ(code_of([&] { orch().create_delegation("pt-dave", "pt-bob", now(), now() + 1, "pt-dave"); }),
            ErrorCode::DelegateWithoutDevice);
  EXPECT_EQ(code_of([&] { orch().create_delegation("pt-nobody", "pt-carol", now(), now() + 1, "op"); }),
            ErrorCode::UnknownPatient);
  EXPECT_EQ(code_of([&] { orch().revoke_delegation("dlg-999999", "op"); }), ErrorCode::UnknownDelegation);
}

TEST_F(OrchestratorTest, RevokedDelegateCannotAnswer) {
  const auto d = orch().create_delegation("pt-dave", "pt-carol", now(), now() + 14 * kDay, "pt-dave");
  const auto s = submit("pharm-jones", "pt-dave", {RecordSection::medications});
  const auto rid = s.c.request.request_id;
  w_->advance(orch().config().channel_timeout(DeviceKind::smartphone_push));
  ASSERT_EQ(orch().get_case(rid)->c.state, ConsentState::AwaitingDelegate);
  const auto proof = w_->proof_for("pt-carol", "carol-landline", rid, Decision::approve);
  orch().revoke_delegation(d.delegation_id, "pt-dave");
  EXPECT_EQ(code_of([&] { orch().record_decision(rid, "pt-carol", Decision::approve, proof); }),
            ErrorCode::UnauthorizedResponder);
  EXPECT_EQ(orch().get_case(rid)->c.state, ConsentState::AwaitingDelegate);
}

// --- check_grant ------------------------------------------------------------------

TEST_F(OrchestratorTest, GrantLatticeMatchesScope) {
  const SectionSet scope{RecordSection::medications, RecordSection::medical_history};
  const auto s = test::consented(*w_, "spec-cardio", "pt-alice", scope);
  std::size_t probes = 0;
  for (auto section : all_values<RecordSection>()) {
    for (auto action : all_values<Action>()) {
      const bool expected = scope.count(section) && action == Action::read;
      EXPECT_EQ(orch().check_grant(*s.grant_id, "pt-alice", section, action, now()), expected);
      ++probes;
    }
  }
  EXPECT_EQ(probes, 14u);
  EXPECT_FALSE(orch().check_grant(*s.grant_id, "pt-dave", RecordSection::medications, Action::read, now()));
  EXPECT_FALSE(orch().check_grant("gr-missing", "pt-alice", RecordSection::medications, Action::read, now()));
}

TEST_F(OrchestratorTest, RandomProbesMatchMembershipOracle) {
  std::mt19937_64 rng(11);
  for (int round = 0; round < 20; ++round) {
    SectionSet scope;
    for (auto sec : {RecordSection::demographics, RecordSection::medical_history, RecordSection::medications}) {
      if (rng() % 2) scope.insert(sec);
    }
    if (scope.empty()) scope.insert(RecordSection::medications);
    const auto s = test::consented(*w_, "pharm-jones", "pt-alice", scope);
    for (int i = 0; i < 20; ++i) {
      const auto sec = static_cast<RecordSection>(rng() % enum_count<RecordSection>());
      const auto act = static_cast<Action>(rng() % 2);
      EXPECT_EQ(orch().check_grant(*s.grant_id, "pt-alice", sec, act, now()),
                scope.count(sec) == 1 && act == Action::read);
    }
  }
}

TEST_F(OrchestratorTest, EmergencyGrantBoundaryIsExclusive) {
  const auto s = emergency("spec-cardio", "pt-grace", {RecordSection::medical_history});
  const auto g = *orch().find_grant(*s.grant_id);
  EXPECT_TRUE(orch().check_grant(g.grant_id, "pt-grace", RecordSection::medical_history, Action::read,
                                 g.issued_at + 432'000'000 - 1));
  EXPECT_FALSE(orch().check_grant(g.grant_id, "pt-grace", RecordSection::medical_history, Action::read,
                                  g.issued_at + 432'000'000));
}

TEST_F(OrchestratorTest, EveryCheckIsAudited) {
  const auto s = test::consented(*w_, "pharm-jones", "pt-alice", {RecordSection::medications});
  const auto before = count(s.c.request.request_id, AuditKind::grant_checked);
  orch().check_grant(*s.grant_id, "pt-alice", RecordSection::medications, Action::read, now());
  orch().check_grant(*s.grant_id, "pt-alice", RecordSection::mental_health, Action::read, now());
  EXPECT_EQ(count(s.c.request.request_id, AuditKind::grant_checked), before + 2);
}

// --- config ------------------------------------------------------------------------

TEST(OrchestratorConfigTest, EmergencyTtlIsNotTunable) {
  OrchestratorConfig c;
  EXPECT_THROW(from_json(Json{{"emergency_grant_ttl_ms", 1000}}, c), Error);
  from_json(Json{{"overall_deadline_ms", 5000}}, c);
  EXPECT_EQ(c.overall_deadline_ms, 5000);
  EXPECT_EQ(c.consented_grant_ttl_ms, 3'600'000);
  c.max_channel_attempts = 0;
  EXPECT_THROW(c.validate(), Error);
}

TEST_F(OrchestratorTest, PendingListsOpenCasesOnly) {
  const auto open = submit("pharm-jones", "pt-alice", {RecordSection::medications});
  test::consented(*w_, "pharm-jones", "pt-alice", {RecordSection::demographics});
  const auto pending = orch().pending_for("pt-alice", now());
  ASSERT_EQ(pending.size(), 1u);
  EXPECT_EQ(pending[0].request_id, open.c.request.request_id);
  EXPECT_EQ(pending[0].requester_role, PrincipalRole::pharmacist);
  EXPECT_EQ(pending[0].remaining_ms, orch().config().overall_deadline_ms);
}

}  // namespace
}  // namespace consentgate
