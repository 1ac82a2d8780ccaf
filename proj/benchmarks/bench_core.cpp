#include <benchmark/benchmark.h>

#include <random>

#include "consentgate/harness.hpp"
#include "consentgate/state_machine.hpp"

using namespace consentgate;

namespace {

const std::string kData = CONSENTGATE_BENCH_DATA_DIR;

std::unique_ptr<harness::World> seeded() {
  harness::World::Options o;
  o.hash_iterations = 1;
  auto w = std::make_unique<harness::World>(o);
  w->seed(kData + "/fixtures/default");
  return w;
}

void BM_Transition(benchmark::State& state) {
  const auto states = all_values<ConsentState>();
  const auto events = all_values<ConsentEvent>();
  for (auto _ : state) {
    for (auto s : states) {
      for (auto e : events) benchmark::DoNotOptimize(transition(s, e));
    }
  }
  state.SetItemsProcessed(state.iterations() * states.size() * events.size());
}
BENCHMARK(BM_Transition);

void BM_AclCheck(benchmark::State& state) {
  const auto table = AclTable::load(kData + "/acl.v1.json");
  std::mt19937_64 rng(1);
  std::vector<SectionSet> sets(256);
  for (auto& s : sets) {
    for (auto sec : all_values<RecordSection>()) {
      if (rng() % 2) s.insert(sec);
    }
  }
  std::size_t i = 0;
  for (auto _ : state) {
    const auto role = static_cast<PrincipalRole>(i % enum_count<PrincipalRole>());
    benchmark::DoNotOptimize(acl_check(role, sets[i % sets.size()], Action::read, table));
    ++i;
  }
}
BENCHMARK(BM_AclCheck);

// Ticket check, ACL, channel selection, dispatch and two audit appends.
void BM_SubmitToPatient(benchmark::State& state) {
  auto w = seeded();
  auto& orch = w->service().orchestrator();
  SubmitParams p;
  p.ticket_id = w->service().policy().authenticate("pharm-jones", "pw-pharm-jones").ticket_id;
  p.patient_id = "pt-alice";
  p.sections = {RecordSection::medications};
  for (auto _ : state) benchmark::DoNotOptimize(orch.submit_access_request(p));
}
BENCHMARK(BM_SubmitToPatient);

void BM_CheckGrant(benchmark::State& state) {
  auto w = seeded();
  auto& orch = w->service().orchestrator();
  SubmitParams p;
  p.ticket_id = w->service().policy().authenticate("dr-usual", "pw-dr-usual").ticket_id;
  p.patient_id = "pt-alice";
  p.sections = {RecordSection::medications};
  const auto grant = *orch.submit_access_request(p).grant_id;
  const auto now = w->clock().now();
  for (auto _ : state) {
    benchmark::DoNotOptimize(orch.check_grant(grant, "pt-alice", RecordSection::medications, Action::read, now));
  }
}
BENCHMARK(BM_CheckGrant);

void BM_AuditAppend(benchmark::State& state) {
  AuditLog log(std::make_unique<MemoryAuditSink>());
  AuditEvent e;
  e.kind = AuditKind::grant_checked;
  e.actor_id = "dr-usual";
  e.patient_id = "pt-alice";
  e.request_id = "req-000001";
  e.detail = {{"grant_id", "gr-000001"}, {"section", "medications"}};
  for (auto _ : state) benchmark::DoNotOptimize(log.append(e));
}
BENCHMARK(BM_AuditAppend);

}  // namespace

BENCHMARK_MAIN();
