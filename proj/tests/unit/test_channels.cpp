#include <gtest/gtest.h>

#include <atomic>
#include <cmath>
#include <random>
#include <set>
#include <thread>

#include "consentgate/channels.hpp"
#include "consentgate/crypto.hpp"
#include "test_support.hpp"

namespace consentgate {
namespace {

ConsentPrompt prompt_for(const std::string& rid) {
  ConsentPrompt p;
  p.request_id = rid;
  p.patient_display = "Alice";
  p.requester_display = "Dr X (pharmacist)";
  p.sections = {RecordSection::medications};
  p.expires_at = 1000;
  return p;
}

Device device(const std::string& id, DeviceKind kind, int priority) { return {id, kind, "addr-" + id, priority}; }

// --- dispatch ---------------------------------------------------------------

TEST(Dispatch, PushDeliveredToOutbox) {
  ChannelHub hub;
  const auto r = hub.dispatch(prompt_for("req-1"), "pt", device("ph", DeviceKind::smartphone_push, 1), 1,
                              std::nullopt, 42);
  EXPECT_TRUE(r.delivered);
  ASSERT_EQ(hub.outbox().size(), 1u);
  EXPECT_EQ(hub.outbox()[0], (OutboxEntry{"req-1", "ph", DeviceKind::smartphone_push, 1, 42}));
  EXPECT_TRUE(hub.latest("pt", "ph", "req-1").has_value());
}

TEST(Dispatch, FailingTransportThrows) {
  ChannelHub hub;
  hub.simulated(DeviceKind::sms).fail_next(1);
  try {
    hub.dispatch(prompt_for("req-1"), "pt", device("s", DeviceKind::sms, 1), 1, "123456", 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::TransportUnavailable);
  }
  EXPECT_TRUE(hub.outbox().empty());
  hub.dispatch(prompt_for("req-1"), "pt", device("s", DeviceKind::sms, 1), 2, "123456", 0);
  EXPECT_EQ(hub.outbox().size(), 1u);
}

TEST(Dispatch, HundredDispatchesHundredDistinctEntries) {
  test::TempDir dir;
  ChannelHub hub;
  hub.set_outbox_path(dir.file("outbox.jsonl"));
  const std::vector<Device> devices{device("a", DeviceKind::smartphone_push, 1), device("b", DeviceKind::sms, 2),
                                    device("c", DeviceKind::landline_voice, 3)};
  for (int i = 0; i < 100; ++i) {
    hub.dispatch(prompt_for("req-" + std::to_string(i / 3)), "pt", devices[i % 3], i % 3 + 1, std::nullopt, i);
  }
  const auto out = hub.outbox();
  ASSERT_EQ(out.size(), 100u);
  std::set<std::tuple<std::string, std::string, int>> keys;
  for (const auto& e : out) keys.emplace(e.request_id, e.device_id, e.attempt);
  EXPECT_EQ(keys.size(), 100u);

  const auto text = read_file(dir.file("outbox.jsonl"));
  std::size_t lines = 0;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) {
    const auto j = Json::parse(line);
    for (const char* k : {"request_id", "device_id", "kind", "attempt", "sent_at"}) EXPECT_TRUE(j.contains(k)) << k;
    EXPECT_EQ(j.get<OutboxEntry>(), out[lines]);
    ++lines;
  }
  EXPECT_EQ(lines, 100u);
}

TEST(Dispatch, FailureRateIsSeededAndBounded) {
  SimulatedTransport t;
  t.set_failure_rate(1.0, 3);
  for (int i = 0; i < 20; ++i) EXPECT_FALSE(t.deliver(prompt_for("r"), device("x", DeviceKind::sms, 1)));
  t.set_failure_rate(0.0, 3);
  EXPECT_TRUE(t.deliver(prompt_for("r"), device("x", DeviceKind::sms, 1)));
  t.set_down(true);
  EXPECT_FALSE(t.deliver(prompt_for("r"), device("x", DeviceKind::sms, 1)));
}

// --- passcodes -------------------------------------------------------------

TEST(Passcode, SingleUse) {
  PasscodeBook book;
  const auto p = book.issue_passcode("r1", 0);
  EXPECT_EQ(p.code.size(), 6u);
  EXPECT_TRUE(std::all_of(p.code.begin(), p.code.end(), [](char c) { return c >= '0' && c <= '9'; }));
  EXPECT_EQ(p.ttl_ms, 300'000);
  EXPECT_TRUE(book.verify_passcode("r1", p.code, 1));
  EXPECT_FALSE(book.verify_passcode("r1", p.code, 2));
}

TEST(Passcode, ExpiryBoundaryIsExclusive) {
  PasscodeBook book;
  const auto p = book.issue_passcode("r1", 1000);
  EXPECT_FALSE(book.verify_passcode("r1", p.code, 1000 + p.ttl_ms));
  const auto q = book.issue_passcode("r2", 1000);
  EXPECT_TRUE(book.verify_passcode("r2", q.code, 1000 + q.ttl_ms - 1));
}

TEST(Passcode, UniformFailures) {
  PasscodeBook book;
  const auto p = book.issue_passcode("r1", 0);
  const std::string wrong = p.code == "000000" ? "000001" : "000000";
  EXPECT_FALSE(book.verify_passcode("r1", wrong, 1));
  EXPECT_FALSE(book.verify_passcode("unknown", p.code, 1));
  EXPECT_FALSE(book.verify_passcode("r1", "", 1));
  EXPECT_TRUE(book.verify_passcode("r1", p.code, 1));  // a miss does not burn the code
}

TEST(Passcode, ReissueReplacesLiveCode) {
  PasscodeBook book;
  const auto a = book.issue_passcode("r1", 0);
  auto b = book.issue_passcode("r1", 10);
  while (b.code == a.code) b = book.issue_passcode("r1", 10);
  EXPECT_FALSE(book.verify_passcode("r1", a.code, 11));
  EXPECT_TRUE(book.verify_passcode("r1", b.code, 11));
}

TEST(Passcode, LeadingDigitUniform) {
  PasscodeBook book;
  constexpr int n = 100'000;
  std::array<int, 10> counts{};
  for (int i = 0; i < n; ++i) counts[book.issue_passcode("r" + std::to_string(i), 0).code[0] - '0']++;
  const double expected = n / 10.0;
  const double sigma = std::sqrt(n * 0.1 * 0.9);
  double chi2 = 0;
  for (int c : counts) {
    chi2 += (c - expected) * (c - expected) / expected;
    EXPECT_LT(std::abs(c - expected), 4 * sigma);
  }
  // 9 degrees of freedom, p = 0.001.
  EXPECT_LT(chi2, 27.88);
}

TEST(Passcode, ConcurrentVerifyAcceptsOnce) {
  for (int round = 0; round < 200; ++round) {
    PasscodeBook book;
    const auto p = book.issue_passcode("r", 0);
    std::atomic<int> ok{0};
    std::vector<std::thread> threads;
    for (int t = 0; t < 8; ++t) {
      threads.emplace_back([&] {
        if (book.verify_passcode("r", p.code, 1)) ok++;
      });
    }
    for (auto& t : threads) t.join();
    ASSERT_EQ(ok.load(), 1) << "round " << round;
  }
}

TEST(Passcode, PersistRoundTrip) {
  PasscodeBook book;
  const auto p = book.issue_passcode("r", 0);
  PasscodeBook copy;
  copy.from_json(book.to_json());
  EXPECT_TRUE(copy.verify_passcode("r", p.code, 1));
}

// --- proofs -----------------------------------------------------------------

class ProofTest : public ::testing::Test {
 protected:
  ProofTest() : verifier_(book_, keys_) { key_ = keys_.generate("pt", "ph"); }

  ResponseProof push(const std::string& rid, Decision d) {
    return {ProofKind::push_signed, sign_push_response(key_, rid, "ph", d), "ph"};
  }

  PasscodeBook book_;
  EnrollmentKeys keys_;
  ProofVerifier verifier_;
  std::vector<std::uint8_t> key_;
};

TEST_F(ProofTest, ValidPushConfirmsOnce) {
  const auto p = push("r1", Decision::approve);
  EXPECT_TRUE(verifier_.verify_proof(p, "r1", "pt", Decision::approve, 0));
  EXPECT_FALSE(verifier_.verify_proof(p, "r1", "pt", Decision::approve, 0));
}

TEST_F(ProofTest, PushSignsTheDecision) {
  EXPECT_FALSE(verifier_.verify_proof(push("r1", Decision::approve), "r1", "pt", Decision::deny, 0));
  EXPECT_FALSE(verifier_.verify_proof(push("r1", Decision::approve), "r1", "someone-else", Decision::approve, 0));
}

TEST_F(ProofTest, ReplayAcrossRequestsFails) {
  int rejected = 0;
  for (int i = 0; i < 100; ++i) {
    const auto a = "req-a-" + std::to_string(i);
    const auto b = "req-b-" + std::to_string(i);
    const auto proof = push(a, Decision::approve);
    if (!verifier_.verify_proof(proof, b, "pt", Decision::approve, 0)) ++rejected;
    EXPECT_TRUE(verifier_.verify_proof(proof, a, "pt", Decision::approve, 0));
  }
  EXPECT_EQ(rejected, 100);

  int code_rejected = 0;
  for (int i = 0; i < 100; ++i) {
    const auto a = "code-a-" + std::to_string(i);
    const auto b = "code-b-" + std::to_string(i);
    const auto pa = book_.issue_passcode(a, 0);
    auto pb = book_.issue_passcode(b, 0);
    while (pb.code == pa.code) pb = book_.issue_passcode(b, 0);
    if (!verifier_.verify_proof({ProofKind::sms_reply_code, pa.code, "sms"}, b, "pt", Decision::approve, 1)) {
      ++code_rejected;
    }
  }
  EXPECT_EQ(code_rejected, 100);
}

TEST_F(ProofTest, BitFlipFuzz) {
  std::mt19937_64 rng(2024);
  int rejected = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto rid = "req-" + std::to_string(i);
    ResponseProof proof;
    if (i % 2 == 0) {
      proof = push(rid, Decision::approve);
    } else {
      proof = {ProofKind::otp_code, book_.issue_passcode(rid, 0).code, "tok"};
    }
    ResponseProof bad = proof;
    const auto byte = rng() % bad.payload.size();
    bad.payload[byte] = static_cast<char>(bad.payload[byte] ^ (1 << (rng() % 8)));
    if (!verifier_.verify_proof(bad, rid, "pt", Decision::approve, 1)) ++rejected;
    // The untampered proof still works, so the rejection came from the flip.
    EXPECT_TRUE(verifier_.verify_proof(proof, rid, "pt", Decision::approve, 1)) << i;
  }
  EXPECT_EQ(rejected, 1000);
}

TEST_F(ProofTest, ConsumedSetSurvivesPersistence) {
  const auto p = push("r1", Decision::approve);
  EXPECT_TRUE(verifier_.verify_proof(p, "r1", "pt", Decision::approve, 0));
  PasscodeBook book2;
  EnrollmentKeys keys2;
  keys2.from_json(keys_.to_json());
  ProofVerifier v2(book2, keys2);
  v2.from_json(verifier_.to_json());
  EXPECT_FALSE(v2.verify_proof(p, "r1", "pt", Decision::approve, 0));
}

TEST(ProofKinds, PerDevice) {
  EXPECT_EQ(proof_kind_for(DeviceKind::smartphone_push), ProofKind::push_signed);
  EXPECT_EQ(proof_kind_for(DeviceKind::sms), ProofKind::sms_reply_code);
  EXPECT_EQ(proof_kind_for(DeviceKind::voice_call), ProofKind::voice_keypress);
  EXPECT_EQ(proof_kind_for(DeviceKind::landline_voice), ProofKind::voice_keypress);
  EXPECT_EQ(proof_kind_for(DeviceKind::hardware_token), ProofKind::otp_code);
  for (auto k : all_values<DeviceKind>()) EXPECT_EQ(uses_passcode(k), k != DeviceKind::smartphone_push);
}

// --- device linking -----------------------------------------------------------

TEST(LinkDevice, PhoneThenLandlineOrder) {
  auto w = test::seeded_world();
  auto& orch = w->service().orchestrator();
  w->service().link_device("pt-bob", device("bob-landline", DeviceKind::landline_voice, 2), "operator");
  w->service().link_device("pt-bob", device("bob-phone", DeviceKind::smartphone_push, 1), "operator");
  const auto targets = orch.effective_targets("pt-bob", w->clock().now());
  ASSERT_EQ(targets.size(), 2u);
  EXPECT_EQ(targets[0].device.kind, DeviceKind::smartphone_push);
  EXPECT_EQ(targets[1].device.kind, DeviceKind::landline_voice);
  EXPECT_TRUE(w->hub().device_key("pt-bob", "bob-phone").has_value());
  EXPECT_FALSE(w->hub().device_key("pt-bob", "bob-landline").has_value());
}

TEST(LinkDevice, DuplicatePriorityRejected) {
  const std::vector<Device> one{device("a", DeviceKind::smartphone_push, 1)};
  try {
    with_device_linked(one, device("b", DeviceKind::sms, 1));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DuplicatePriority);
  }
  EXPECT_THROW(with_device_linked(one, device("a", DeviceKind::sms, 2)), Error);
  EXPECT_THROW(with_device_linked(one, device("c", DeviceKind::sms, 0)), Error);
  try {
    without_device(one, "zzz");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::UnknownDevice);
  }
}

TEST(LinkDevice, LandlineAndTokenBothUsable) {
  auto w = test::seeded_world();
  auto& svc = w->service();
  svc.link_device("pt-bob", device("bob-landline", DeviceKind::landline_voice, 1), "operator");
  svc.link_device("pt-bob", device("bob-token", DeviceKind::hardware_token, 2), "operator");
  auto& orch = svc.orchestrator();
  const auto ticket = test::ticket_for(*w, "pharm-jones");

  // First request: landline answers with a keypress code.
  auto a = orch.submit_access_request(test::read_request(ticket, "pt-bob", {RecordSection::medications}));
  ASSERT_EQ(a.c.state, ConsentState::AwaitingPatient);
  EXPECT_EQ(a.c.active_channel, "bob-landline");
  auto proof = w->proof_for("pt-bob", "bob-landline", a.c.request.request_id, Decision::approve);
  EXPECT_EQ(proof.kind, ProofKind::voice_keypress);
  EXPECT_EQ(orch.record_decision(a.c.request.request_id, "pt-bob", Decision::approve, proof).c.state,
            ConsentState::Approved);

  // Second request: landline down, token answers with an OTP.
  w->hub().simulated(DeviceKind::landline_voice).fail_next(1);
  auto b = orch.submit_access_request(test::read_request(ticket, "pt-bob", {RecordSection::medications}));
  ASSERT_EQ(b.c.state, ConsentState::AwaitingPatient);
  EXPECT_EQ(b.c.active_channel, "bob-token");
  proof = w->proof_for("pt-bob", "bob-token", b.c.request.request_id, Decision::approve);
  EXPECT_EQ(proof.kind, ProofKind::otp_code);
  EXPECT_EQ(orch.record_decision(b.c.request.request_id, "pt-bob", Decision::approve, proof).c.state,
            ConsentState::Approved);
}

TEST(LinkDevice, FailedTransportFallsBackToNextDevice) {
  auto w = test::seeded_world();
  w->hub().simulated(DeviceKind::smartphone_push).fail_next(1);
  const auto ticket = test::ticket_for(*w, "pharm-jones");
  const auto s = w->service().orchestrator().submit_access_request(
      test::read_request(ticket, "pt-alice", {RecordSection::medications}));
  EXPECT_EQ(s.c.state, ConsentState::AwaitingPatient);
  ASSERT_EQ(w->hub().outbox().size(), 1u);
  EXPECT_EQ(w->hub().outbox()[0].device_id, "alice-sms");
  ASSERT_GE(s.attempts.size(), 2u);
  EXPECT_EQ(s.attempts[0].outcome, DispatchOutcome::failed);
  EXPECT_EQ(s.attempts[1].outcome, DispatchOutcome::delivered);
}

TEST(Prompts, NoClinicalContentLeaks) {
  auto w = test::seeded_world();
  auto& svc = w->service();
  const std::string sentinel = "SENTINEL-CLINICAL-4c1d";
  for (const auto& pt : svc.policy().registry().patient_ids()) {
    svc.records().seed_section(pt, RecordSection::documents, sentinel + " " + pt, w->clock().now());
  }
  std::vector<std::string> bodies{sentinel};
  for (const auto& r : svc.records().export_snapshot().at("records")) {
    bodies.push_back(crypto::base64_decode(r.at("body_b64").get<std::string>()));
  }
  const auto ticket = test::ticket_for(*w, "spec-cardio");
  for (const auto& pt : svc.policy().registry().patient_ids()) {
    svc.orchestrator().submit_access_request(
        test::read_request(ticket, pt, {RecordSection::documents, RecordSection::medical_history}));
  }
  w->advance(200'000);
  const auto prompts = w->hub().serialized_prompts();
  ASSERT_FALSE(prompts.empty());
  for (const auto& p : prompts) {
    for (const auto& b : bodies) EXPECT_EQ(p.find(b), std::string::npos) << p;
    const auto j = Json::parse(p);
    for (const auto& [k, v] : j.items()) {
      EXPECT_TRUE(k == "request_id" || k == "patient_display" || k == "requester_display" || k == "purpose" ||
                  k == "sections" || k == "action" || k == "expires_at")
          << "unexpected prompt field " << k;
    }
  }
  for (const auto& e : w->hub().outbox()) {
    const auto line = Json(e).dump();
    for (const auto& b : bodies) EXPECT_EQ(line.find(b), std::string::npos);
  }
}

}  // namespace
}  // namespace consentgate
