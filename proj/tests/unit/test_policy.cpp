#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <set>
#include <unordered_set>

#include "consentgate/policy.hpp"
#include "test_support.hpp"

namespace consentgate {
namespace {

constexpr DurationMs kTtl = 8 * 3600 * 1000;

class PolicyTest : public ::testing::Test {
 protected:
  PolicyTest()
      : clock_(1'735'689'600'000),
        audit_(std::make_unique<MemoryAuditSink>()),
        engine_(AclTable::load(test::data_root() + "/acl.v1.json"), clock_, audit_,
                PolicyConfig{kTtl, 1}) {
    RegistrationRecord mgr;
    mgr.principal = {"mgr", "Manager", PrincipalRole::system_operator, "", {}};
    mgr.usertype = UserType::manager;
    engine_.register_user(mgr, "mgr-pass");
  }

  std::string add_normal(const std::string& id, PrincipalRole role, const std::string& pw) {
    RegistrationRecord r;
    r.principal = {id, id, role, "", {}};
    r.linked_approver = "mgr";
    return engine_.register_user(r, pw);
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

  SimulatedClock clock_;
  AuditLog audit_;
  PolicyEngine engine_;
};

// --- authenticate / verify_ticket -------------------------------------------

TEST_F(PolicyTest, TicketCarriesConfiguredTtl) {
  add_normal("u1", PrincipalRole::gp, "secret");
  const auto t = engine_.authenticate("u1", "secret");
  EXPECT_EQ(t.expires_at - t.issued_at, kTtl);
  EXPECT_EQ(t.principal_id, "u1");
  EXPECT_GE(t.ticket_id.size(), 32u);  // 128 bits, hex
  const auto last = audit_.events().back();
  EXPECT_EQ(last.kind, AuditKind::auth_ok);
  EXPECT_EQ(last.actor_id, "u1");
}

TEST_F(PolicyTest, EmptyCredentialRejected) {
  add_normal("u1", PrincipalRole::gp, "secret");
  EXPECT_EQ(code_of([&] { engine_.authenticate("u1", ""); }), ErrorCode::EmptyCredential);
  EXPECT_EQ(code_of([&] { engine_.authenticate("", "secret"); }), ErrorCode::EmptyCredential);
}

TEST_F(PolicyTest, WrongThenRightPassword) {
  add_normal("u1", PrincipalRole::gp, "secret");
  EXPECT_EQ(code_of([&] { engine_.authenticate("u1", "wrong"); }), ErrorCode::BadCredentials);
  EXPECT_EQ(audit_.events().back().kind, AuditKind::auth_fail);
  const auto a = engine_.authenticate("u1", "secret");
  const auto b = engine_.authenticate("u1", "secret");
  EXPECT_NE(a.ticket_id, b.ticket_id);
}

TEST_F(PolicyTest, UnknownUserGetsSameErrorAsWrongPassword) {
  add_normal("u1", PrincipalRole::gp, "secret");
  const auto unknown = [&] {
    try {
      engine_.authenticate("ghost", "secret");
    } catch (const Error& e) {
      return std::string(e.what());
    }
    return std::string();
  }();
  const auto wrong = [&] {
    try {
      engine_.authenticate("u1", "nope");
    } catch (const Error& e) {
      return std::string(e.what());
    }
    return std::string();
  }();
  EXPECT_EQ(unknown, wrong);
  EXPECT_EQ(unknown, "BadCredentials");
}

TEST_F(PolicyTest, VerifyTicketBoundaryIsExclusive) {
  add_normal("u1", PrincipalRole::gp, "secret");
  const auto t = engine_.authenticate("u1", "secret");
  EXPECT_EQ(engine_.verify_ticket(t.ticket_id, t.issued_at), "u1");
  EXPECT_EQ(engine_.verify_ticket(t.ticket_id, t.expires_at - 1), "u1");
  EXPECT_EQ(code_of([&] { engine_.verify_ticket(t.ticket_id, t.expires_at); }), ErrorCode::ExpiredTicket);
}

TEST_F(PolicyTest, RandomUnknownTicketsAllRejected) {
  add_normal("u1", PrincipalRole::gp, "secret");
  engine_.authenticate("u1", "secret");
  for (int i = 0; i < 1000; ++i) {
    const auto id = crypto::to_hex(crypto::random_bytes(16));
    EXPECT_EQ(code_of([&] { engine_.verify_ticket(id, clock_.now()); }), ErrorCode::UnknownTicket);
  }
}

TEST(TicketStore, NoCollisionsOverHundredThousand) {
  TicketStore store;
  std::unordered_set<std::string> ids;
  for (int i = 0; i < 100'000; ++i) ids.insert(store.issue("p", 0, 1000).ticket_id);
  EXPECT_EQ(ids.size(), 100'000u);
  EXPECT_EQ(store.size(), 100'000u);
}

TEST(TicketStore, PersistsDigestsOnly) {
  TicketStore store;
  const auto t = store.issue("p", 0, 1000);
  const auto dumped = store.to_json().dump();
  EXPECT_EQ(dumped.find(t.ticket_id), std::string::npos);
  TicketStore reloaded;
  reloaded.from_json(store.to_json());
  EXPECT_EQ(reloaded.verify(t.ticket_id, 10), "p");
}

// --- ACL -----------------------------------------------------------------

// Independent reading of the policy fixture: permit iff the JSON says so.
bool fixture_permits(const Json& fixture, PrincipalRole role, RecordSection s, Action a) {
  const auto& rules = fixture.at("rules");
  const auto r = std::string(to_string(role));
  if (!rules.contains(r)) return false;
  const auto sec = std::string(to_string(s));
  if (!rules.at(r).contains(sec)) return false;
  const auto act = std::string(to_string(a));
  return rules.at(r).at(sec).value(act, "deny") == "permit";
}

class AclTest : public ::testing::Test {
 protected:
  void SetUp() override {
    fixture_ = Json::parse(read_file(test::data_root() + "/acl.v1.json"));
    table_ = AclTable::from_json(fixture_);
  }
  Json fixture_;
  AclTable table_;
};

TEST_F(AclTest, PaperDenials) {
  EXPECT_EQ(acl_check(PrincipalRole::radiology_technician, {RecordSection::mental_health}, Action::read, table_),
            (AclDecision{false, RecordSection::mental_health}));
  EXPECT_EQ(acl_check(PrincipalRole::health_insurer, {RecordSection::medical_history}, Action::write, table_),
            (AclDecision{false, RecordSection::medical_history}));
}

TEST_F(AclTest, GpReadsMedicationsAndHistory) {
  EXPECT_TRUE(acl_check(PrincipalRole::gp, {RecordSection::medications, RecordSection::medical_history},
                        Action::read, table_)
                  .permitted);
}

TEST_F(AclTest, BruteForceMatchesFixture) {
  EXPECT_EQ(table_.version(), "acl.v1");
  std::size_t n = 0;
  for (auto role : all_values<PrincipalRole>()) {
    for (auto s : all_values<RecordSection>()) {
      for (auto a : all_values<Action>()) {
        const bool expect = fixture_permits(fixture_, role, s, a);
        EXPECT_EQ(table_.lookup(role, s, a) == Verdict::permit, expect);
        const auto d = acl_check(role, {s}, a, table_);
        EXPECT_EQ(d.permitted, expect);
        if (!expect) {
          EXPECT_EQ(d.violating, s);
        }
        ++n;
      }
    }
  }
  EXPECT_EQ(n, 8u * 7u * 2u);
}

TEST_F(AclTest, ViolatingSectionIsSmallestDenied) {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 2000; ++i) {
    const auto role = static_cast<PrincipalRole>(rng() % enum_count<PrincipalRole>());
    const auto action = static_cast<Action>(rng() % 2);
    SectionSet s;
    for (auto sec : all_values<RecordSection>()) {
      if (rng() % 2) s.insert(sec);
    }
    if (s.empty()) continue;
    const auto d = acl_check(role, s, action, table_);
    std::optional<RecordSection> first_denied;
    for (auto sec : s) {
      if (!fixture_permits(fixture_, role, sec, action)) {
        first_denied = sec;
        break;
      }
    }
    EXPECT_EQ(d.permitted, !first_denied.has_value());
    EXPECT_EQ(d.violating, first_denied);
  }
}

TEST_F(AclTest, MonotoneOverRandomSubsets) {
  std::mt19937_64 rng(1234);
  for (int i = 0; i < 10'000; ++i) {
    const auto role = static_cast<PrincipalRole>(rng() % enum_count<PrincipalRole>());
    const auto action = static_cast<Action>(rng() % 2);
    SectionSet s1, s2;
    for (auto sec : all_values<RecordSection>()) {
      const auto r = rng() % 4;
      if (r == 1) s1.insert(sec);
      if (r == 2) s2.insert(sec);
      if (r == 3) {
        s1.insert(sec);
        s2.insert(sec);
      }
    }
    if (s1.empty()) continue;
    SectionSet u = s1;
    u.insert(s2.begin(), s2.end());
    if (acl_check(role, u, action, table_).permitted) {
      ASSERT_TRUE(acl_check(role, s1, action, table_).permitted);
    }
  }
}

TEST(AclTable, UnknownRoleOrVerdictRejected) {
  EXPECT_THROW(AclTable::from_json(Json::parse(R"({"version":"x","default":"deny","rules":{"wizard":{}}})")),
               Error);
  EXPECT_THROW(AclTable::from_json(Json::parse(
                   R"({"version":"x","default":"deny","rules":{"gp":{"documents":{"read":"maybe"}}}})")),
               Error);
}

// --- registration ----------------------------------------------------------

TEST_F(PolicyTest, RegisterNormalUserLinksApprover) {
  EXPECT_EQ(add_normal("nurse", PrincipalRole::allied_health, "pw"), "nurse");
  EXPECT_EQ(engine_.registry().approver_of("nurse"), "mgr");
  EXPECT_EQ(engine_.registry().usertype("nurse"), UserType::normal);
}

TEST_F(PolicyTest, DuplicateUserRejected) {
  add_normal("nurse", PrincipalRole::allied_health, "pw");
  EXPECT_EQ(code_of([&] { add_normal("nurse", PrincipalRole::gp, "pw2"); }), ErrorCode::DuplicateUser);
}

TEST_F(PolicyTest, NormalUserNeedsApprover) {
  RegistrationRecord r;
  r.principal = {"lonely", "Lonely", PrincipalRole::gp, "", {}};
  EXPECT_EQ(code_of([&] { engine_.register_user(r, "pw"); }), ErrorCode::MissingApprover);
  r.linked_approver = "not-a-manager";
  EXPECT_EQ(code_of([&] { engine_.register_user(r, "pw"); }), ErrorCode::MissingApprover);
}

TEST_F(PolicyTest, ListApproversSorted) {
  RegistrationRecord m2;
  m2.principal = {"m2", "M2", PrincipalRole::system_operator, "", {}};
  m2.usertype = UserType::manager;
  engine_.register_user(m2, "pw");
  RegistrationRecord m1 = m2;
  m1.principal.principal_id = "m1";
  engine_.register_user(m1, "pw");
  EXPECT_EQ(engine_.list_approvers(), (std::vector<std::string>{"m1", "m2", "mgr"}));
}

TEST(Registry, EmptyHasNoApprovers) {
  Registry r(crypto::CredentialHasher(1));
  EXPECT_TRUE(r.list_approvers().empty());
}

TEST(Registry, RandomInsertsListExactlyTheManagers) {
  std::mt19937_64 rng(99);
  for (int round = 0; round < 20; ++round) {
    Registry r(crypto::CredentialHasher(1));
    RegistrationRecord root;
    root.principal = {"root", "root", PrincipalRole::system_operator, "", {}};
    root.usertype = UserType::manager;
    r.register_user(root, "pw");
    std::vector<std::string> managers{"root"};
    const int n = 1 + static_cast<int>(rng() % 40);
    for (int i = 0; i < n; ++i) {
      RegistrationRecord rec;
      rec.principal = {"u" + std::to_string(rng() % 1000000) + "-" + std::to_string(i), "", PrincipalRole::gp, "", {}};
      if (rng() % 3 == 0) {
        rec.usertype = UserType::manager;
        rec.principal.role = PrincipalRole::system_operator;
        managers.push_back(rec.principal.principal_id);
      } else {
        rec.linked_approver = "root";
      }
      r.register_user(rec, "pw");
    }
    std::sort(managers.begin(), managers.end());
    EXPECT_EQ(r.list_approvers(), managers);
  }
}

TEST_F(PolicyTest, SentinelPasswordNeverStoredOrLogged) {
  const std::string sentinel = "SENTINEL-pw-7f3a9c";
  add_normal("spy", PrincipalRole::gp, sentinel);
  engine_.authenticate("spy", sentinel);
  EXPECT_THROW(engine_.authenticate("spy", sentinel + "x"), Error);
  Patient pt;
  pt.patient_id = "pt-s";
  engine_.registry().add_patient(pt, sentinel);
  engine_.authenticate("pt-s", sentinel);

  std::string everything = engine_.registry().to_json().dump() + engine_.tickets().to_json().dump();
  for (const auto& e : audit_.events()) everything += serialize_audit_line(e);
  EXPECT_EQ(everything.find(sentinel), std::string::npos);
  EXPECT_EQ(engine_.registry().credential_hash("spy")->find(sentinel), std::string::npos);
}

TEST(CredentialHasher, SaltedAndVerifiable) {
  crypto::CredentialHasher h(10);
  const auto a = h.hash("pw");
  const auto b = h.hash("pw");
  EXPECT_NE(a, b);
  EXPECT_TRUE(h.verify("pw", a));
  EXPECT_FALSE(h.verify("pW", a));
  EXPECT_FALSE(h.verify("pw", "garbage"));
}

TEST(RegistryPersistence, RoundTrip) {
  auto w = test::seeded_world();
  const auto& reg = w->service().policy().registry();
  Registry copy(crypto::CredentialHasher(1));
  copy.from_json(reg.to_json());
  EXPECT_EQ(copy.to_json(), reg.to_json());
  EXPECT_EQ(copy.link_table(), reg.link_table());
}

}  // namespace
}  // namespace consentgate
