#pragma once

// End-to-end attack scenarios against the bundled guest. Each run builds its
// own machine from a config, drives the attack, and verifies the outcome
// against ground truth the simulation holds (keys, vCPU registers).

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sevlab/guest.hpp"
#include "sevlab/session.hpp"

namespace sevlab {

// ---------------------------------------------------------------------------
// Configuration

enum class TableKind : std::uint8_t { Paper, Seeded, FullEntropy };

inline const char* to_string(TableKind k) {
  switch (k) {
    case TableKind::Paper: return "paper";
    case TableKind::Seeded: return "seeded";
    case TableKind::FullEntropy: return "full-entropy";
  }
  return "?";
}

inline TableKind parse_table_kind(const std::string& s) {
  if (s == "paper") return TableKind::Paper;
  if (s == "seeded") return TableKind::Seeded;
  if (s == "full-entropy") return TableKind::FullEntropy;
  throw ValidationError("unknown table kind '" + s + "'");
}

struct MachineSettings {
  unsigned n = kDefaultAddressWidth;
  CipherMode mode = CipherMode::XEX;
  TableKind table = TableKind::Paper;
  unsigned periodicity = 4;
  unsigned rank = kDefaultIndependentRank;
  unsigned unit_bits = 32;
  MachineFlags flags;
  std::uint64_t seed = 1;
};

inline TweakTable make_table(const MachineSettings& s, std::uint64_t seed) {
  switch (s.table) {
    case TableKind::Paper: return make_tweak_table(table_spec::PaperDefault{seed, s.n, s.rank});
    case TableKind::Seeded: return make_tweak_table(table_spec::Seeded{seed, s.periodicity, s.rank, s.n, s.unit_bits});
    case TableKind::FullEntropy: return make_tweak_table(table_spec::Seeded{seed, 16, 0, s.n, 32});
  }
  throw ValidationError("unknown table kind");
}

inline TweakTable make_table(const MachineSettings& s) { return make_table(s, s.seed); }

/// Which tweak table the attacker works with. Full-entropy tables are drawn
/// fresh per boot, so the attacker can only hold one from an earlier boot.
enum class AttackerTable : std::uint8_t { Auto, Known, Stale };

inline AttackerTable parse_attacker_table(const std::string& s) {
  if (s == "auto") return AttackerTable::Auto;
  if (s == "known") return AttackerTable::Known;
  if (s == "stale") return AttackerTable::Stale;
  throw ValidationError("unknown attacker table '" + s + "'");
}

inline const std::vector<std::string>& scenario_names() {
  static const std::vector<std::string> names = {"patch-return", "cpuid-oracle", "stack-detect", "oracle4", "oracle16", "decrypt"};
  return names;
}

struct ScenarioConfig {
  MachineSettings machine;
  std::string name;
  std::uint64_t count = 100;  // values or blocks, scenario dependent
  DriverKind driver = DriverKind::Auto;
  bool pagefault_sync = true;  // whether the page-fault driver is usable at all
  bool shift_runs = false;
  AttackerTable attacker = AttackerTable::Auto;
  std::size_t text_size = 8u << 20;
  std::optional<Bytes> text_image;  // replaces the generated text when set
  PhysAddr text_base = GuestLayout{}.text;
  unsigned trials = 20;
  std::size_t patch_text_size = 256u << 10;
  bool control = false;  // patch-return without injection
  PhysAddr target = GuestLayout{}.secrets;
  std::size_t target_len = kPageSize;
  std::optional<PhysAddr> stack_pointer;
  std::optional<std::vector<Block>> plaintexts;  // cpuid-oracle / oracle16 inputs
  std::optional<std::string> snapshot;  // machine memory replayed over the base-seed world
};

// ---------------------------------------------------------------------------
// Reports

enum class Outcome : std::uint8_t { Success, Blocked, Failed };

inline const char* to_string(Outcome o) {
  switch (o) {
    case Outcome::Success: return "success";
    case Outcome::Blocked: return "blocked";
    case Outcome::Failed: return "failed";
  }
  return "?";
}

struct ScenarioReport {
  std::string scenario;
  Outcome outcome = Outcome::Failed;
  std::string reason;
  Metrics metrics;
  std::optional<double> sync_per_block;
  std::vector<Step> steps;
  nlohmann::ordered_json results = nlohmann::ordered_json::object();

  int exit_code() const {
    switch (outcome) {
      case Outcome::Success: return 0;
      case Outcome::Blocked: return 4;
      case Outcome::Failed: return 5;
    }
    return 5;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["scenario"] = scenario;
    j["outcome"] = to_string(outcome);
    if (outcome != Outcome::Success) j["reason"] = reason;
    auto& m = j["metrics"];
    m["vm_exits"] = metrics.vm_exits;
    m["page_faults"] = metrics.page_faults;
    m["blocks_moved"] = metrics.blocks_moved;
    m["sync_per_block"] = sync_per_block ? nlohmann::ordered_json(*sync_per_block) : nlohmann::ordered_json();
    j["steps"] = nlohmann::ordered_json::array();
    for (const auto& s : steps) j["steps"].push_back({{"step", s.index}, {"kind", s.kind}, {"detail", s.detail}});
    j["results"] = results;
    return j;
  }
};

inline Metrics& operator+=(Metrics& a, const Metrics& b) {
  a.vm_exits += b.vm_exits;
  a.page_faults += b.page_faults;
  a.blocks_moved += b.blocks_moved;
  return a;
}

// ---------------------------------------------------------------------------
// Worlds

struct World {
  std::unique_ptr<Machine> machine;
  VMState vm;
  Guest guest;
};

inline World make_world(const ScenarioConfig& cfg, GuestProgram program, std::uint64_t seed, std::size_t text_size) {
  World w;
  MachineConfig mc;
  mc.table = make_table(cfg.machine, seed);
  mc.mode = cfg.machine.mode;
  mc.flags = cfg.machine.flags;
  mc.key_seed = seed;
  w.machine = std::make_unique<Machine>(std::move(mc));
  GuestConfig gc;
  gc.seed = seed;
  gc.program = program;
  gc.text_size = text_size;
  gc.stack_pointer = cfg.stack_pointer;
  gc.text_base = cfg.text_base;
  gc.text_image = cfg.text_image;
  w.guest = install_guest(*w.machine, w.vm, gc);
  if (cfg.snapshot && seed == cfg.machine.seed) {
    std::istringstream is(*cfg.snapshot);
    w.machine->load_snapshot(is);
  }
  return w;
}

inline TweakTable attacker_table(const ScenarioConfig& cfg, const Machine& m, std::uint64_t seed) {
  AttackerTable a = cfg.attacker;
  if (a == AttackerTable::Auto) a = cfg.machine.table == TableKind::FullEntropy ? AttackerTable::Stale : AttackerTable::Known;
  if (a == AttackerTable::Known) return m.table();
  return make_table(cfg.machine, seed ^ 0x57A1E0B007ULL);
}

inline std::vector<Block> random_blocks(std::uint64_t seed, std::uint64_t count) {
  std::mt19937_64 rng(seed ^ 0xB10C5ULL);
  std::vector<Block> out;
  out.reserve(count);
  for (std::uint64_t k = 0; k < count; ++k) out.push_back(Block::from_halves(rng(), rng()));
  return out;
}

namespace scenario_detail {

inline DriverKind pick_driver(const ScenarioConfig& cfg) {
  DriverKind d = cfg.driver;
  if (d == DriverKind::Auto)
    d = cfg.machine.flags.interception_enabled || !cfg.pagefault_sync ? DriverKind::Intercept : DriverKind::PageFault;
  if (d == DriverKind::PageFault && !cfg.pagefault_sync) throw InterceptionDisabled("page-fault sync is unavailable");
  return d;
}

/// A session-based scenario: idle guest, gadget loop, stack located.
struct SessionRun {
  World world;
  std::unique_ptr<Hypervisor> hv;
  std::unique_ptr<OracleSession> session;

  SessionRun(const ScenarioConfig& cfg, EventLog& log, bool trace) {
    world = make_world(cfg, GuestProgram::Idle, cfg.machine.seed, cfg.text_size);
    hv = std::make_unique<Hypervisor>(*world.machine, world.vm, world.guest,
                                      attacker_table(cfg, *world.machine, cfg.machine.seed), log);
    SessionOptions so;
    so.driver = pick_driver(cfg);
    so.shift_runs = cfg.shift_runs;
    so.record_trace = trace;
    session = std::make_unique<OracleSession>(*hv, so);
  }
};

}  // namespace scenario_detail

// ---------------------------------------------------------------------------
// Scenarios. Each fills `report` and throws on blocked/failed; run_scenario
// maps exceptions to outcomes.

/// RET injected at the start of the boot randomizer, timed by write faults
/// on the stage-2 page and then the boot data page.
inline void scenario_patch_return(const ScenarioConfig& cfg, EventLog& log, ScenarioReport& report) {
  std::vector<PhysAddr> bases;
  PhysAddr fallback = 0;
  for (unsigned t = 0; t < cfg.trials; ++t) {
    const std::uint64_t seed = cfg.machine.seed + t;
    World w = make_world(cfg, GuestProgram::Boot, seed, std::min(cfg.patch_text_size, cfg.text_size));
    Hypervisor hv(*w.machine, w.vm, w.guest, attacker_table(cfg, *w.machine, seed), log);
    const GuestLayout& l = w.guest.layout;
    fallback = l.kernel_fallback;
    if (!cfg.control) {
      hv.set_write(l.stage2, false);
      ExitEvent ev = hv.run();
      if (ev.kind != ExitKind::Fault || page_base(ev.fault.gpa) != l.stage2) throw AttackFailure("stage-2 copy not observed");
      hv.set_write(l.stage2, true);
      hv.set_write(l.data, false);
      ev = hv.run();
      if (ev.kind != ExitKind::Fault || page_base(ev.fault.gpa) != l.data) throw AttackFailure("end of stage-2 copy not observed");
      hv.place({l.randomize, constraints_at(0, encode(ins::ret())), BlockRole::Jmp});
      hv.set_write(l.data, true);
      if (t == 0) log.milestone("inject", "ret placed at " + hex_addr(l.randomize) + " after the stage-2 copy");
    }
    ExitEvent ev = hv.run();
    while (ev.kind != ExitKind::Halt) ev = hv.run();
    bases.push_back(page_base(w.vm.ip));
    report.metrics += w.machine->metrics();
  }
  const bool all_fixed = std::all_of(bases.begin(), bases.end(), [&](PhysAddr b) { return b == fallback; });
  const std::set<PhysAddr> distinct(bases.begin(), bases.end());
  auto& r = report.results;
  r["trials"] = bases.size();
  r["fallback_base"] = hex_addr(fallback);
  r["bases"] = nlohmann::ordered_json::array();
  for (auto b : bases) r["bases"].push_back(hex_addr(b));
  r["distinct_bases"] = distinct.size();
  r["fixed_base"] = all_fixed;
  log.milestone("bases", std::to_string(distinct.size()) + " distinct load bases over " + std::to_string(bases.size()) + " boots");
  if (cfg.control) {
    if (distinct.size() < 2) throw AttackFailure("control runs show no randomization");
  } else if (!all_fixed) {
    throw AttackFailure("kernel left the fallback base in some boots");
  }
}

/// GHCB-fed cpuid loop: one exit per 16-byte block.
inline std::vector<Block> scenario_cpuid_oracle(const ScenarioConfig& cfg, EventLog& log, ScenarioReport& report) {
  const std::vector<Block> plains = cfg.plaintexts ? *cfg.plaintexts : random_blocks(cfg.machine.seed, cfg.count);
  if (!cfg.machine.flags.interception_enabled) throw InterceptionDisabled("cpuid exits are not intercepted");
  World w = make_world(cfg, GuestProgram::Cpuid, cfg.machine.seed, cfg.text_size);
  Machine& m = *w.machine;
  std::vector<Block> out;
  std::uint64_t oracle_exits = 0;
  auto finish = [&] {
    report.metrics = m.metrics();
    report.results["blocks"] = plains.size();
    report.results["oracle_exits"] = oracle_exits;
  };
  if (plains.empty()) {
    finish();
    return out;
  }
  Hypervisor hv(m, w.vm, w.guest, attacker_table(cfg, m, cfg.machine.seed), log);
  const GuestLayout& l = w.guest.layout;
  const PhysAddr buf = hv.hpa(l.cpuid_buffer());
  hv.searcher();
  const std::uint64_t exits0 = m.metrics().vm_exits;
  ExitEvent ev = hv.run();
  if (ev.kind != ExitKind::Sync) throw AttackFailure("guest did not reach its cpuid");
  // Loop the routine back onto its cpuid.
  const auto back = static_cast<std::int32_t>(l.cpuid_code) - static_cast<std::int32_t>(l.cpuid_code + kBlockSize + 2);
  hv.place({l.cpuid_code + kBlockSize, LoopLayout::jmp_block(back), BlockRole::Jmp});
  log.milestone("loop", "jmp placed behind the store sequence");
  std::size_t verified = 0;
  for (const Block& p : plains) {
    GhcbOverride regs;
    regs[0] = p.lo();
    regs[1] = p.hi();
    ev = hv.run(regs);
    if (ev.kind != ExitKind::Sync) throw AttackFailure("oracle loop left the cpuid");
    const Block c = m.hv_read_block(buf);
    out.push_back(c);
    verified += m.decrypt_for(Machine::kVm, c, buf) == p;
  }
  oracle_exits = m.metrics().vm_exits - exits0;
  finish();
  report.sync_per_block = static_cast<double>(oracle_exits) / static_cast<double>(plains.size());
  report.results["verified"] = verified;
  log.milestone("oracle", std::to_string(plains.size()) + " blocks in " + std::to_string(oracle_exits) + " exits");
  if (verified != plains.size()) throw AttackFailure("ciphertexts failed verification");
  return out;
}

inline void stack_results(const StackLocation& st, const VMState& vm, nlohmann::ordered_json& r) {
  r["stack_gpa"] = hex_addr(st.gpa);
  r["stack_hpa"] = hex_addr(st.hpa);
  r["stack_offset"] = st.offset;
  r["true_stack_gpa"] = hex_addr(vm.regs[kStackReg]);
  r["initially_aligned"] = st.initially_aligned;
  r["pop_adjusted"] = st.pop_adjusted;
  r["page_diff"] = st.used_diff;
}

inline StackLocation scenario_stack_detect(const ScenarioConfig& cfg, EventLog& log, ScenarioReport& report) {
  scenario_detail::SessionRun run(cfg, log, false);
  StackLocation st;
  try {
    st = run.session->detect_stack();
  } catch (...) {
    report.metrics = run.world.machine->metrics();
    throw;
  }
  report.metrics = run.world.machine->metrics();
  stack_results(st, run.world.vm, report.results);
  if (st.gpa != run.world.vm.regs[kStackReg] || st.hpa != run.world.machine->translate_or_throw(st.gpa - kBlockSize) + kBlockSize)
    throw AttackFailure("detected stack differs from the guest's");
  return st;
}

inline void scenario_oracle4(const ScenarioConfig& cfg, EventLog& log, ScenarioReport& report) {
  scenario_detail::SessionRun run(cfg, log, false);
  Machine& m = *run.world.machine;
  std::mt19937_64 rng(cfg.machine.seed ^ 0x04AC1EULL);
  std::size_t verified = 0;
  std::uint64_t syncs = 0;
  try {
    run.session->detect_stack();
    const std::uint64_t before = run.session->syncs();
    for (std::uint64_t k = 0; k < cfg.count; ++k) {
      const auto v = static_cast<std::uint32_t>(rng());
      const OracleBlock ob = run.session->oracle4(v);
      const Block p = m.decrypt_for(Machine::kVm, ob.cipher, ob.hpa);
      verified += p == Block::from_halves(v, v);
    }
    syncs = run.session->syncs() - before;
  } catch (...) {
    report.metrics = m.metrics();
    throw;
  }
  report.metrics = m.metrics();
  if (cfg.count) report.sync_per_block = static_cast<double>(syncs) / static_cast<double>(cfg.count);
  report.results["values"] = cfg.count;
  report.results["verified"] = verified;
  log.milestone("oracle4", std::to_string(verified) + "/" + std::to_string(cfg.count) + " values verified");
  if (verified != cfg.count) throw AttackFailure("4-byte oracle output failed verification");
}

inline std::vector<Block> scenario_oracle16(const ScenarioConfig& cfg, EventLog& log, ScenarioReport& report) {
  scenario_detail::SessionRun run(cfg, log, true);
  Machine& m = *run.world.machine;
  const std::vector<Block> plains = cfg.plaintexts ? *cfg.plaintexts : random_blocks(cfg.machine.seed, cfg.count);
  std::vector<Block> out;
  std::size_t verified = 0;
  try {
    run.session->widen();
    for (const Block& p : plains) {
      const OracleBlock ob = run.session->oracle16(p);
      out.push_back(ob.cipher);
      verified += m.decrypt_for(Machine::kVm, ob.cipher, ob.hpa) == p;
    }
  } catch (...) {
    report.metrics = m.metrics();
    throw;
  }
  const std::size_t violations = run.session->chain_violations_seen();
  report.metrics = m.metrics();
  if (!plains.empty())
    report.sync_per_block = static_cast<double>(run.session->oracle16_syncs()) / static_cast<double>(plains.size());
  auto& r = report.results;
  r["blocks"] = plains.size();
  r["verified"] = verified;
  r["oracle16_syncs"] = run.session->oracle16_syncs();
  r["bootstrap_syncs"] = run.session->syncs() - run.session->oracle16_syncs();
  r["shift_runs"] = cfg.shift_runs;
  r["chain_violations"] = violations;
  r["traced_instructions"] = run.session->traced_instructions();
  r["driver"] = to_string(run.session->driver().kind());
  log.milestone("oracle16", std::to_string(verified) + "/" + std::to_string(plains.size()) + " blocks verified");
  if (verified != plains.size()) throw AttackFailure("16-byte oracle output failed verification");
  if (violations) throw AttackFailure("uncontrolled bytes executed inside the gadget loop");
  return out;
}

inline Bytes scenario_decrypt(const ScenarioConfig& cfg, EventLog& log, ScenarioReport& report) {
  scenario_detail::SessionRun run(cfg, log, false);
  Machine& m = *run.world.machine;
  Bytes plain;
  try {
    plain = run.session->decrypt(cfg.target, cfg.target_len);
  } catch (...) {
    report.metrics = m.metrics();
    throw;
  }
  report.metrics = m.metrics();
  Bytes truth;
  truth.reserve(cfg.target_len);
  for (PhysAddr a = cfg.target; a < cfg.target + cfg.target_len; ++a) truth.push_back(m.guest_block_plaintext(a)[a % kBlockSize]);
  auto& r = report.results;
  r["target"] = hex_addr(cfg.target);
  r["length"] = cfg.target_len;
  r["matches_guest_view"] = plain == truth;
  r["head_hex"] = to_hex(std::span<const std::uint8_t>(plain.data(), std::min<std::size_t>(plain.size(), 32)));
  if (plain != truth) throw AttackFailure("decrypted bytes differ from the guest's view");
  return plain;
}

/// Replayable form of a block move.
inline nlohmann::ordered_json solution_to_json(const MoveSolution& s, const TweakTable& table) {
  nlohmann::ordered_json j;
  j["q"] = hex_addr(s.q);
  j["p"] = hex_addr(s.p);
  j["delta_hex"] = to_hex(tweak_delta(table, s.q, s.p));
  j["r_hex"] = to_hex(s.r);
  return j;
}

/// Runs a scenario by name and maps the way it ended to an outcome.
inline ScenarioReport run_scenario(const ScenarioConfig& cfg, EventLog& log) {
  if (std::find(scenario_names().begin(), scenario_names().end(), cfg.name) == scenario_names().end())
    throw ValidationError("unknown scenario '" + cfg.name + "'");
  ScenarioReport report;
  report.scenario = cfg.name;
  try {
    if (cfg.name == "patch-return") scenario_patch_return(cfg, log, report);
    else if (cfg.name == "cpuid-oracle") scenario_cpuid_oracle(cfg, log, report);
    else if (cfg.name == "stack-detect") scenario_stack_detect(cfg, log, report);
    else if (cfg.name == "oracle4") scenario_oracle4(cfg, log, report);
    else if (cfg.name == "oracle16") scenario_oracle16(cfg, log, report);
    else scenario_decrypt(cfg, log, report);
    report.outcome = Outcome::Success;
  } catch (const OwnershipViolation& e) {
    report.outcome = Outcome::Blocked;
    report.reason = "ownership";
    log.milestone("blocked", e.what());
  } catch (const InterceptionDisabled& e) {
    report.outcome = Outcome::Blocked;
    report.reason = "no-interception";
    log.milestone("blocked", e.what());
  } catch (const Error& e) {
    report.outcome = Outcome::Failed;
    report.reason = e.what();
    log.milestone("failed", e.what());
  }
  report.steps = log.steps();
  return report;
}

}  // namespace sevlab
