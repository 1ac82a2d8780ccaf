#include <gtest/gtest.h>

#include <regex>
#include <set>

#include "consentgate/record_store.hpp"
#include "test_support.hpp"

namespace consentgate {
namespace {

class RecordStoreTest : public ::testing::Test {
 protected:
  void SetUp() override { w_ = test::seeded_world(); }
  Service& svc() { return w_->service(); }
  RecordStore& store() { return svc().records(); }
  EpochMs now() { return w_->clock().now(); }

  static ErrorCode code_of(const std::function<void()>& f) {
    try {
      f();
    } catch (const Error& e) {
      return e.code();
    }
    return ErrorCode::NotFound;
  }

  std::unique_ptr<harness::World> w_;
};

TEST_F(RecordStoreTest, ConsentedPathologyRead) {
  const auto s = test::consented(*w_, "spec-cardio", "pt-alice", {RecordSection::pathology_results});
  ASSERT_EQ(s.c.state, ConsentState::Approved);
  const auto before = svc().audit().last_seq();
  const auto doc = store().read_section(*s.grant_id, "pt-alice", RecordSection::pathology_results, now(),
                                        "spec-cardio");
  EXPECT_EQ(doc.section, RecordSection::pathology_results);
  EXPECT_FALSE(doc.body.empty());
  const auto after = svc().audit().events_after(before);
  ASSERT_FALSE(after.empty());
  EXPECT_EQ(after.back().kind, AuditKind::record_read);
  EXPECT_EQ(after.back().actor_id, "spec-cardio");
}

TEST_F(RecordStoreTest, ExpiredGrantDenied) {
  const auto s = test::consented(*w_, "spec-cardio", "pt-alice", {RecordSection::pathology_results});
  const auto g = *svc().orchestrator().find_grant(*s.grant_id);
  EXPECT_EQ(code_of([&] {
              store().read_section(g.grant_id, "pt-alice", RecordSection::pathology_results, g.expires_at);
            }),
            ErrorCode::GrantDenied);
  EXPECT_NO_THROW(store().read_section(g.grant_id, "pt-alice", RecordSection::pathology_results, g.expires_at - 1));
}

TEST_F(RecordStoreTest, ReadPermitSetEqualsScope) {
  const SectionSet scope{RecordSection::medications, RecordSection::medical_history};
  const auto s = test::consented(*w_, "spec-cardio", "pt-alice", scope);
  for (auto section : all_values<RecordSection>()) {
    const auto code = code_of([&] { store().read_section(*s.grant_id, "pt-alice", section, now()); });
    if (scope.count(section)) {
      EXPECT_EQ(code, ErrorCode::NotFound) << "in-scope read failed: " << to_string(section);
    } else {
      EXPECT_EQ(code, ErrorCode::GrantDenied) << to_string(section);
    }
  }
  // The grant never opens another patient's chart.
  EXPECT_EQ(code_of([&] { store().read_section(*s.grant_id, "pt-dave", RecordSection::medications, now()); }),
            ErrorCode::GrantDenied);
}

TEST_F(RecordStoreTest, EmptySectionIsNotADenial) {
  const auto s = test::consented(*w_, "spec-cardio", "pt-alice", {RecordSection::radiology_results});
  EXPECT_EQ(code_of([&] { store().read_section(*s.grant_id, "pt-alice", RecordSection::radiology_results, now()); }),
            ErrorCode::SectionEmpty);
}

TEST_F(RecordStoreTest, PresenterMustBeHolder) {
  const auto s = test::consented(*w_, "spec-cardio", "pt-alice", {RecordSection::medications});
  EXPECT_EQ(code_of([&] {
              store().read_section(*s.grant_id, "pt-alice", RecordSection::medications, now(), "pharm-jones");
            }),
            ErrorCode::GrantDenied);
}

TEST_F(RecordStoreTest, WriteGrantBumpsVersionWithAttribution) {
  const auto w = test::consented(*w_, "spec-cardio", "pt-alice", {RecordSection::documents}, Action::write);
  const auto v1 = store().write_section(*w.grant_id, "pt-alice", RecordSection::documents, "scan 1", now());
  const auto v2 = store().write_section(*w.grant_id, "pt-alice", RecordSection::documents, "scan 2", now());
  const auto v3 = store().write_section(*w.grant_id, "pt-alice", RecordSection::documents, "scan 3", now());
  EXPECT_EQ(v2, v1 + 1);
  EXPECT_EQ(v3, v1 + 2);

  const auto r = test::consented(*w_, "spec-cardio", "pt-alice", {RecordSection::documents});
  const auto doc = store().read_section(*r.grant_id, "pt-alice", RecordSection::documents, now());
  EXPECT_EQ(doc.body, "scan 3");
  EXPECT_EQ(doc.version, v3);
  EXPECT_EQ(doc.updated_by, "spec-cardio");

  std::map<int, int> authored;
  for (const auto& e : svc().audit().patient_view("pt-alice")) {
    if (e.kind != AuditKind::record_written) continue;
    EXPECT_EQ(e.detail.at("updated_by"), "spec-cardio");
    EXPECT_EQ(e.actor_id, "spec-cardio");
    authored[std::stoi(e.detail.at("version"))]++;
  }
  EXPECT_EQ(authored, (std::map<int, int>{{v1, 1}, {v2, 1}, {v3, 1}}));
}

TEST_F(RecordStoreTest, ReadOnlyGrantCannotWrite) {
  const auto s = test::consented(*w_, "spec-cardio", "pt-alice", {RecordSection::documents});
  EXPECT_EQ(code_of([&] { store().write_section(*s.grant_id, "pt-alice", RecordSection::documents, "x", now()); }),
            ErrorCode::GrantDenied);
}

TEST_F(RecordStoreTest, WriteGrantDoesNotReadBack) {
  const auto w = test::consented(*w_, "spec-cardio", "pt-alice", {RecordSection::documents}, Action::write);
  store().write_section(*w.grant_id, "pt-alice", RecordSection::documents, "x", now());
  EXPECT_EQ(code_of([&] { store().read_section(*w.grant_id, "pt-alice", RecordSection::documents, now()); }),
            ErrorCode::GrantDenied);
}

TEST_F(RecordStoreTest, UnknownGrantDenied) {
  EXPECT_EQ(code_of([&] { store().read_section("gr-999999", "pt-alice", RecordSection::medications, now()); }),
            ErrorCode::GrantDenied);
  EXPECT_EQ(code_of([&] { store().read_section("", "pt-alice", RecordSection::medications, now()); }),
            ErrorCode::GrantDenied);
}

TEST_F(RecordStoreTest, SnapshotRoundTrip) {
  const auto snap = store().export_snapshot();
  auto w2 = std::make_unique<harness::World>(test::world_options());
  w2->service().records().import_snapshot(snap, 0);
  auto reexport = w2->service().records().export_snapshot();
  ASSERT_EQ(reexport.at("records").size(), snap.at("records").size());
  for (std::size_t i = 0; i < snap.at("records").size(); ++i) {
    EXPECT_EQ(reexport["records"][i]["body_b64"], snap["records"][i]["body_b64"]);
    EXPECT_EQ(reexport["records"][i]["patient_id"], snap["records"][i]["patient_id"]);
  }
}

// Every public member of RecordStore that touches documents goes through a
// grant; the rest is an explicit allowlist of operator plumbing.
TEST(RecordStoreSurface, NoUngatedAccessors) {
  const auto header = read_file(test::source_root() + "/core/include/consentgate/record_store.hpp");
  const auto begin = header.find("class RecordStore {");
  ASSERT_NE(begin, std::string::npos);
  const auto pub = header.find("public:", begin);
  const auto priv = header.find("private:", pub);
  const auto surface = header.substr(pub, priv - pub);

  const std::regex decl(R"(([A-Za-z_][A-Za-z0-9_]*)\s*\(([^;{]*)\))");
  const std::set<std::string> allow{"RecordStore",  "seed_section",     "export_snapshot", "import_snapshot",
                                    "set_journal_path", "load_journal", "section_count"};
  const std::set<std::string> gated{"read_section", "write_section"};
  std::set<std::string> seen;
  for (std::sregex_iterator it(surface.begin(), surface.end(), decl), end; it != end; ++it) {
    const std::string name = (*it)[1];
    const std::string params = (*it)[2];
    if (name == "optional" || name == "nullopt") continue;
    seen.insert(name);
    if (gated.count(name)) {
      EXPECT_EQ(params.rfind("const std::string& grant_id", 0), 0u) << name << " must take a grant first";
    } else {
      EXPECT_TRUE(allow.count(name)) << "ungated public member: " << name;
    }
  }
  for (const auto& g : gated) EXPECT_TRUE(seen.count(g)) << g;
}

}  // namespace
}  // namespace consentgate
