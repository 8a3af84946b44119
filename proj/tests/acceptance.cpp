// Acceptance run. Prints one PASS/FAIL line per criterion.
//
// Exit status is 1 when any criterion fails, except the AC3 speedup clause on
// hosts with fewer than 4 hardware threads: that clause cannot be met there and
// is reported as FAIL without failing the run.

#include <chrono>
#include <cstdio>
#include <functional>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <thread>

#include "sevlab/block_mover.hpp"
#include "sevlab/recovery.hpp"
#include "sevlab/scenarios.hpp"
#include "support.hpp"

using namespace sevlab;
using namespace sevlab::testing;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Verdict {
  bool pass = false;
  std::string detail;
  bool waived = false;  // failed, but does not fail the run
};

int failures = 0;

void report(int id, const std::function<Verdict()>& check) {
  const auto t0 = Clock::now();
  Verdict v;
  try {
    v = check();
  } catch (const std::exception& e) {
    v = {false, std::string("exception: ") + e.what()};
  }
  std::printf("AC%d %s (%.2fs) %s\n", id, v.pass ? "PASS" : "FAIL", seconds_since(t0), v.detail.c_str());
  std::fflush(stdout);
  if (!v.pass && !v.waived) ++failures;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Machine probe_machine(TweakTable t, CipherMode mode, std::uint64_t seed) {
  MachineConfig c;
  c.table = std::move(t);
  c.mode = mode;
  c.key_seed = seed;
  Machine m(std::move(c));
  m.map_gpa(1, 1);
  return m;
}

// 8 MiB of seeded random bytes on scattered frames, plus one destination page.
constexpr PhysAddr kImageGpa = 0x100000;
constexpr std::size_t kImageSize = 8u << 20;
constexpr PhysAddr kDestGpa = 0x10000;
constexpr std::uint64_t kDestFrame = 0x9A5C3;

struct CorpusWorld {
  std::unique_ptr<Machine> machine;
  std::shared_ptr<const Corpus> corpus;

  CorpusWorld(TweakTable t, std::uint64_t seed) {
    MachineConfig c;
    c.table = std::move(t);
    c.key_seed = seed;
    machine = std::make_unique<Machine>(std::move(c));
    std::mt19937_64 rng(seed);
    Bytes image(kImageSize);
    for (auto& b : image) b = static_cast<std::uint8_t>(rng());
    for (std::uint64_t k = 0; k < kImageSize / kPageSize; ++k)
      machine->map_gpa(page_of(kImageGpa) + k, 0x400000 + k * 37 + (rng() & 31));
    machine->map_gpa(page_of(kDestGpa), kDestFrame);
    machine->load_guest_image(kImageGpa, image);
    Corpus cp = build_corpus_from_guest(*machine, image, kImageGpa);
    capture_ciphertext(*machine, cp);
    corpus = std::make_shared<const Corpus>(std::move(cp));
  }
};

std::vector<ByteConstraint> random_pair(std::mt19937_64& rng) {
  return {{0, static_cast<std::uint8_t>(rng())}, {1, static_cast<std::uint8_t>(rng())}};
}

ScenarioReport scenario(const std::string& name, const std::function<void(ScenarioConfig&)>& tweak = {}) {
  ScenarioConfig c;
  c.name = name;
  if (tweak) tweak(c);
  EventLog log(nullptr, false);
  return run_scenario(c, log);
}

Verdict ac1() {
  const auto t0 = Clock::now();
  const TweakTable t = make_tweak_table(table_spec::PaperDefault{});
  std::mt19937_64 rng(1001);
  const CipherKey key{random_block(rng), 1};
  const PhysAddr mask = ((1ULL << t.address_width) - 1) & ~0xFULL;
  std::size_t bad = 0;
  for (CipherMode mode : {CipherMode::XE, CipherMode::XEX}) {
    for (int i = 0; i < 10000; ++i) {
      const Block m = random_block(rng);
      const PhysAddr p = rng() & mask;
      const Block c = encrypt_block(key, mode, t, m, p);
      bad += c != reference_encrypt(key.key, mode, t, m, p) || decrypt_block(key, mode, t, c, p) != m;
    }
    for (int i = 0; i < 10000; ++i) {
      const Block m = random_block(rng);
      const PhysAddr p = rng() & mask, q = rng() & mask;
      const Block d = xor_of(naive_tweak(t.constants, p), naive_tweak(t.constants, q));
      const Block c = encrypt_block(key, mode, t, m, p);
      const Block moved = mode == CipherMode::XE ? c : xor_of(c, d);
      bad += decrypt_block(key, mode, t, moved, q) != xor_of(m, d);
    }
  }
  const double s = seconds_since(t0);
  return {bad == 0 && s < 5.0, fmt("40000 checks, %zu mismatches, %.2fs (limit 5s)", bad, s)};
}

Verdict ac2() {
  Machine m = probe_machine(make_tweak_table(table_spec::PaperDefault{1, 20}), CipherMode::XE, 77);
  const auto t0 = Clock::now();
  const TableRecovery r = recover_table(m, CipherMode::XE, 0x1000, 1);
  const double s = seconds_since(t0);
  const std::string t4 = to_hex(r.table.constant(4), true), t5 = to_hex(r.table.constant(5), true),
                    t6 = to_hex(r.table.constant(6), true);
  const bool fixed_low = t4 == "82 25 38 38 82 25 38 38 82 25 38 38 82 25 38 38" &&
                         t5 == "ec 09 07 9c ec 09 07 9c ec 09 07 9c ec 09 07 9c" &&
                         t6 == "40 00 00 18 40 00 00 18 40 00 00 18 40 00 00 18";
  const bool all = !r.inconsistent && r.unrecoverable.empty() && r.table.constants == m.table().constants;
  return {fixed_low && all && s < 1.0, fmt("t4=%s t5=%s t6=%s all_constants=%s %.3fs (limit 1s)", t4.substr(0, 11).c_str(),
                                        t5.substr(0, 11).c_str(), t6.substr(0, 11).c_str(), all ? "exact" : "wrong", s)};
}

Verdict ac3() {
  const TweakTable truth = make_tweak_table(table_spec::Seeded{8, 4, 0, 20, 16});
  Machine a = probe_machine(truth, CipherMode::XEX, 78);
  Machine b = probe_machine(truth, CipherMode::XEX, 78);
  auto t0 = Clock::now();
  const TableRecovery one = recover_table(a, CipherMode::XEX, 0x1000, 3, 16, 1);
  const double single = seconds_since(t0);
  t0 = Clock::now();
  const TableRecovery four = recover_table(b, CipherMode::XEX, 0x1000, 3, 16, 4);
  const double parallel = seconds_since(t0);
  const bool exact = one.unrecoverable.empty() && one.table.constants == truth.constants &&
                     four.unrecoverable.empty() && four.table.constants == truth.constants;
  const double speedup = single / parallel;
  const unsigned hw = std::thread::hardware_concurrency();
  Verdict v;
  v.pass = exact && single < 30.0 && speedup >= 2.0;
  v.detail = fmt("16 constants %s; single job %.2fs (limit 30s); 4 partitions %.2fs; speedup %.2fx (need 2x); %u hw threads",
                 exact ? "exact" : "wrong", single, parallel, speedup, hw);
  v.waived = !v.pass && exact && single < 30.0 && hw < 4;
  if (v.waived) v.detail += "; speedup unattainable on this host";
  return v;
}

Verdict ac4() {
  CorpusWorld w(make_tweak_table(table_spec::PaperDefault{21}), 21);
  InjectionSearcher s(w.corpus, w.machine->table());
  std::mt19937_64 rng(404);
  int found = 0, sound = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto cs = random_pair(rng);
    const PhysAddr dest = kDestGpa + 16 * (rng() % 256);
    const InjectionResult r = s.find(cs, dest, FrameChoice::fixed(kDestFrame));
    if (!r.found()) continue;
    ++found;
    apply_solution(*w.machine, w.machine->table(), *r.solution);
    const ReadResult back = w.machine->vm_read(dest, 16);
    sound += back.ok() && back.data[0] == cs[0].value && back.data[1] == cs[1].value;
  }
  return {found >= 990 && sound == found, fmt("found %d/1000, sound %d/%d", found, sound, found)};
}

// Regression pin for the default seed with 1000 blocks.
constexpr std::uint64_t kPinnedOracle16Syncs = 129039;

Verdict ac5() {
  const ScenarioReport r = scenario("oracle16", [](ScenarioConfig& c) { c.count = 1000; });
  const auto& j = r.results;
  if (r.outcome != Outcome::Success) return {false, "outcome " + std::string(to_string(r.outcome)) + ": " + r.reason};
  const std::uint64_t verified = j["verified"], violations = j["chain_violations"], syncs = j["oracle16_syncs"];
  const bool ok = verified == 1000 && violations == 0 && syncs == kPinnedOracle16Syncs && r.sync_per_block;
  return {ok, fmt("verified %llu/1000, chain violations %llu, sync_per_block %.3f (pinned %.3f)",
                  static_cast<unsigned long long>(verified), static_cast<unsigned long long>(violations),
                  r.sync_per_block.value_or(0), kPinnedOracle16Syncs / 1000.0)};
}

Verdict ac6() {
  const ScenarioReport r = scenario("cpuid-oracle", [](ScenarioConfig& c) { c.count = 1000; });
  if (r.outcome != Outcome::Success) return {false, "outcome " + std::string(to_string(r.outcome)) + ": " + r.reason};
  const std::uint64_t exits = r.results["oracle_exits"], verified = r.results["verified"];
  const bool ok = verified == 1000 && exits >= 1000 && exits - 1000 <= 4;
  return {ok, fmt("%llu exits for 1000 blocks (overhead %lld), verified %llu", static_cast<unsigned long long>(exits),
                  static_cast<long long>(exits) - 1000, static_cast<unsigned long long>(verified))};
}

Verdict ac7() {
  ScenarioConfig c;
  c.name = "decrypt";
  c.target_len = 4096;
  EventLog log(nullptr, false);
  ScenarioReport rep;
  const Bytes got = scenario_decrypt(c, log, rep);
  // Independent view: the secrets the guest was built with.
  const World w = make_world(c, GuestProgram::Idle, c.machine.seed, c.text_size);
  const std::size_t off = c.target - w.guest.layout.secrets;
  const Bytes want(w.guest.secrets.begin() + off, w.guest.secrets.begin() + off + 4096);
  std::size_t diff = 0;
  for (std::size_t i = 0; i < std::min(got.size(), want.size()); ++i) diff += got[i] != want[i];
  return {got.size() == 4096 && diff == 0, fmt("%zu bytes read, %zu differ from the guest's content", got.size(), diff)};
}

Verdict ac8() {
  const auto t0 = Clock::now();
  std::ostringstream notes;
  bool ok = true;
  auto expect = [&](const ScenarioReport& r, Outcome want, const char* label) {
    const bool hit = r.outcome == want;
    ok &= hit;
    notes << label << "=" << to_string(r.outcome) << (hit ? "" : "(!)") << " ";
  };
  for (const char* name : {"patch-return", "oracle16", "decrypt"})
    expect(scenario(name, [](ScenarioConfig& c) { c.machine.flags.rmp_ownership = true; }), Outcome::Blocked,
           (std::string("rmp:") + name).c_str());
  auto no_intercept = [](ScenarioConfig& c) { c.machine.flags.interception_enabled = false; };
  expect(scenario("cpuid-oracle", no_intercept), Outcome::Blocked, "nointercept:cpuid-oracle");
  const ScenarioReport pf = scenario("oracle16", no_intercept);
  expect(pf, Outcome::Success, "nointercept:oracle16");
  notes << "driver=" << (pf.results.contains("driver") ? pf.results["driver"].get<std::string>() : "?") << " ";

  // Full-entropy tweaks: recovery runs out of reach.
  MachineSettings fe;
  fe.table = TableKind::FullEntropy;
  fe.n = 20;
  Machine m = probe_machine(make_table(fe, 31), CipherMode::XEX, 31);
  const TableRecovery rec = recover_table(m, CipherMode::XEX, 0x1000, 31, 16, 1);
  const bool recovery_failed = !rec.unrecoverable.empty();
  ok &= recovery_failed;
  notes << "fullentropy:recover " << rec.unrecoverable.size() << " unrecoverable ";

  // Solutions from an earlier boot's table applied to the current one.
  fe.n = kDefaultAddressWidth;
  CorpusWorld w(make_table(fe, 41), 41);
  InjectionSearcher s(w.corpus, make_table(fe, 40));
  const TweakTable stale = make_table(fe, 40);
  std::mt19937_64 rng(808);
  int applied = 0, mismatched = 0, attempts = 0;
  while (applied < 1000 && attempts < 2000) {
    ++attempts;
    const auto cs = random_pair(rng);
    const PhysAddr dest = kDestGpa + 16 * (rng() % 256);
    const InjectionResult r = s.find(cs, dest, FrameChoice::fixed(kDestFrame));
    if (!r.found()) continue;
    ++applied;
    apply_solution(*w.machine, stale, *r.solution);
    const Block seen = w.machine->guest_block_plaintext(dest);
    mismatched += seen[0] != cs[0].value || seen[1] != cs[1].value;
  }
  ok &= applied == 1000 && mismatched >= 999;
  notes << "fullentropy:stale " << mismatched << "/" << applied << " mismatched";

  const double secs = seconds_since(t0);
  ok &= secs < 120.0;
  return {ok, notes.str() + fmt("; %.1fs (limit 120s)", secs)};
}

std::string suite_reports() {
  std::string out;
  for (const auto& name : scenario_names()) out += scenario(name).to_json().dump() + "\n";
  return out;
}

Verdict ac9() {
  const std::string a = suite_reports();
  const std::string b = suite_reports();
  return {a == b, fmt("%zu scenarios, %zu report bytes, %s", scenario_names().size(), a.size(),
                      a == b ? "identical" : "differ")};
}

}  // namespace

int main() {
  report(1, ac1);
  report(2, ac2);
  report(3, ac3);
  report(4, ac4);
  report(5, ac5);
  report(6, ac6);
  report(7, ac7);
  report(8, ac8);
  report(9, ac9);
  return failures ? 1 : 0;
}
