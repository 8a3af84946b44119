// sevlab: command-line front end for the simulator.
//
//   sevlab recover  [--mode xe|xex] [--n N] [--table KIND] [--jobs J]
//   sevlab scenario NAME [--count N] [--rmp] [--no-interception] ...
//   sevlab snapshot save OUT | snapshot load IN [--out FILE]
//   sevlab corpus IMAGE [--load-base ADDR] [--find OFF:HEX,... --dest GPA]
//   sevlab selftest
//
// Exit codes: 0 ok, 1 usage, 2 unrecoverable, 3 inconsistent, 4 blocked, 5 failed.

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "sevlab/aes128.hpp"
#include "sevlab/config.hpp"
#include "sevlab/recovery.hpp"
#include "sevlab/scenarios.hpp"

using namespace sevlab;
using json = nlohmann::ordered_json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitUnrecoverable = 2;
constexpr int kExitInconsistent = 3;
constexpr int kExitFailed = 5;

Bytes read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ValidationError("cannot read '" + path + "'");
  return Bytes(std::istreambuf_iterator<char>(f), {});
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ValidationError("cannot write '" + path + "'");
  f << text;
}

std::string iso_now() {
  const std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

/// Prints a report and writes it to the configured path.
void emit(const RunConfig& cfg, json j, std::chrono::steady_clock::time_point t0) {
  if (cfg.output.timestamps) {
    j["generated_at"] = iso_now();
    j["elapsed_ms"] = std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - t0).count();
  }
  const std::string text = j.dump(2) + "\n";
  std::cout << text;
  if (!cfg.output.report_path.empty()) write_text(cfg.output.report_path, text);
}

MachineConfig machine_config(const RunConfig& cfg) {
  MachineConfig mc;
  mc.table = make_table(cfg.machine());
  mc.mode = cfg.machine().mode;
  mc.flags = cfg.machine().flags;
  mc.key_seed = cfg.machine().seed;
  return mc;
}

int cmd_recover(const RunConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  Machine m(machine_config(cfg));
  m.map_gpa(page_of(cfg.recover.probe_gpa), page_of(cfg.recover.probe_gpa));
  const TableRecovery r =
      recover_table(m, cfg.machine().mode, cfg.recover.probe_gpa, cfg.machine().seed, cfg.recover.unit_bits, cfg.recover.jobs);
  json j;
  j["command"] = "recover";
  j["mode"] = to_string(cfg.machine().mode);
  j["n"] = m.table().address_width;
  j["constants"] = json::array();
  bool all_match = true;
  for (unsigned b = kFirstTweakBit; b < m.table().address_width; ++b) {
    json c;
    c["bit"] = b;
    const auto it = r.provenance.find(b);
    const Provenance prov = it == r.provenance.end() ? Provenance::Unrecoverable : it->second;
    c["provenance"] = to_string(prov);
    if (prov != Provenance::Unrecoverable) {
      const Block& got = r.table.constants[b - kFirstTweakBit];
      c["hex"] = to_hex(got, true);
      c["matches_machine"] = got == m.table().constant(b);
      all_match = all_match && got == m.table().constant(b);
    }
    j["constants"].push_back(c);
  }
  j["unrecoverable"] = r.unrecoverable;
  j["inconsistent"] = r.inconsistent;
  if (!r.message.empty()) j["message"] = r.message;
  int code = kExitOk;
  if (r.inconsistent || !all_match) code = kExitInconsistent;
  else if (!r.unrecoverable.empty()) code = kExitUnrecoverable;
  j["match"] = code == kExitOk;
  j["exit_code"] = code;
  emit(cfg, j, t0);
  if (code == kExitOk) std::cerr << serialize_table(r.table);
  else if (!r.message.empty()) std::cerr << "recover: " << r.message << "\n";
  return code;
}

int cmd_scenario(RunConfig cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  if (!cfg.corpus_path.empty()) cfg.scenario.text_image = read_file(cfg.corpus_path);
  std::ofstream events;
  if (!cfg.output.events_path.empty()) {
    events.open(cfg.output.events_path, std::ios::binary);
    if (!events) throw ValidationError("cannot write '" + cfg.output.events_path + "'");
  }
  EventLog log(events.is_open() ? &events : nullptr, cfg.output.timestamps);
  const ScenarioReport report = run_scenario(cfg.scenario, log);
  emit(cfg, report.to_json(), t0);
  return report.exit_code();
}

GuestProgram parse_program(const std::string& s) {
  if (s == "idle") return GuestProgram::Idle;
  if (s == "boot") return GuestProgram::Boot;
  if (s == "cpuid") return GuestProgram::Cpuid;
  throw ValidationError("unknown guest program '" + s + "'");
}

int cmd_snapshot_save(const RunConfig& cfg, const std::string& program, const std::string& out) {
  World w = make_world(cfg.scenario, parse_program(program), cfg.machine().seed, cfg.scenario.text_size);
  std::ofstream f(out, std::ios::binary);
  if (!f) throw ValidationError("cannot write '" + out + "'");
  w.machine->save_snapshot(f);
  std::cout << json{{"command", "snapshot-save"}, {"path", out}, {"frames", w.machine->frame_count()}}.dump(2) << "\n";
  return kExitOk;
}

int cmd_snapshot_load(const RunConfig& cfg, const std::string& in, const std::string& out) {
  Machine m(machine_config(cfg));
  std::ifstream f(in, std::ios::binary);
  if (!f) throw ValidationError("cannot read '" + in + "'");
  m.load_snapshot(f);
  if (!out.empty()) {
    std::ofstream o(out, std::ios::binary);
    if (!o) throw ValidationError("cannot write '" + out + "'");
    m.save_snapshot(o);
  }
  std::cout << json{{"command", "snapshot-load"}, {"path", in}, {"frames", m.frame_count()}}.dump(2) << "\n";
  return kExitOk;
}

/// "0:c3,1:90" -> constraints
std::vector<ByteConstraint> parse_constraints(const std::string& spec) {
  std::vector<ByteConstraint> out;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw ValidationError("constraint '" + item + "' is not OFFSET:HEXBYTE");
    const Bytes v = bytes_from_hex(item.substr(colon + 1));
    if (v.size() != 1) throw ValidationError("constraint '" + item + "' needs exactly one byte");
    out.push_back({static_cast<std::uint8_t>(std::stoul(item.substr(0, colon), nullptr, 0)), v[0]});
  }
  return out;
}

int cmd_corpus(const RunConfig& cfg, const std::string& image_path, const std::string& find, std::uint64_t dest,
               const std::string& out) {
  const auto t0 = std::chrono::steady_clock::now();
  const Bytes image = read_file(image_path);
  const PhysAddr base = cfg.scenario.text_base;
  const Corpus corpus = build_corpus(image, base);
  json j;
  j["command"] = "corpus";
  j["image"] = image_path;
  j["bytes"] = image.size();
  j["load_base"] = hex_addr(base);
  j["entries"] = corpus.size();
  int code = kExitOk;
  if (!find.empty()) {
    const TweakTable table = make_table(cfg.machine());
    const auto cs = parse_constraints(find);
    const auto res = find_injection(corpus, cs, dest, FrameChoice::fixed(page_of(dest)), table);
    j["search"] = {{"status", to_string(res.status)}, {"entries_scanned", res.entries_scanned}};
    if (res.found()) {
      const json sol = solution_to_json(*res.solution, table);
      j["solution"] = sol;
      if (!out.empty()) write_text(out, json::array({sol}).dump(2) + "\n");
    } else {
      code = kExitFailed;
    }
  }
  emit(cfg, j, t0);
  return code;
}

int cmd_selftest(const RunConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  json j;
  j["command"] = "selftest";
  bool ok = true;
  auto check = [&](const std::string& name, bool pass) {
    j["checks"][name] = pass;
    ok = ok && pass;
  };
  {
    const Aes128 aes(block_from_hex("000102030405060708090a0b0c0d0e0f"));
    check("aes_vector", aes.encrypt(block_from_hex("00112233445566778899aabbccddeeff")) ==
                            block_from_hex("69c4e0d86a7b0430d8cdb78070b4c55a"));
  }
  {
    const TweakTable t = make_tweak_table(table_spec::PaperDefault{cfg.machine().seed});
    check("table_t4", t.constant(4) == Block::repeat_unit(0x38382582));
  }
  {
    ScenarioConfig sc = cfg.scenario;
    sc.name = "oracle16";
    sc.count = 4;
    EventLog log;
    check("oracle16", run_scenario(sc, log).outcome == Outcome::Success);
  }
  j["ok"] = ok;
  emit(cfg, j, t0);
  return ok ? kExitOk : kExitFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Memory-encryption attack simulator"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  bool no_timestamps = false;
  std::string events_path, report_path;
  app.add_option("--config", config_path, "key=value config file");
  app.add_option("--set", sets, "override a config key (key=value)");
  app.add_option("--seed", seed, "seed for every randomized choice");
  app.add_flag("--no-timestamps", no_timestamps, "omit wall-clock fields from reports and events");
  app.add_option("--events", events_path, "write JSON-lines events here");
  app.add_option("--report", report_path, "write the JSON report here");

  // Flags shared by the machine-building verbs.
  std::optional<std::string> mode, table, driver, attacker;
  std::optional<unsigned> n, jobs, unit_bits;
  std::optional<std::uint64_t> count;
  bool rmp = false, no_interception = false, no_sev_es = false, no_pf_sync = false, shift_runs = false;
  auto machine_flags = [&](CLI::App* c) {
    c->add_option("--mode", mode, "xe | xex");
    c->add_option("--n", n, "physical address width");
    c->add_option("--table", table, "paper | seeded | full-entropy");
    c->add_flag("--rmp", rmp, "enable the page ownership table");
    c->add_flag("--no-interception", no_interception, "sync instructions run without exits");
    c->add_flag("--no-sev-es", no_sev_es, "unmasked fault addresses, full register exposure");
  };

  auto* recover = app.add_subcommand("recover", "recover the tweak constants");
  machine_flags(recover);
  recover->add_option("--jobs", jobs, "search partitions");
  recover->add_option("--unit-bits", unit_bits, "brute-force width per 4-byte unit");

  std::string scenario_name, snapshot_path;
  auto* scenario = app.add_subcommand("scenario", "run an attack scenario");
  machine_flags(scenario);
  scenario->add_option("name", scenario_name, "patch-return | cpuid-oracle | stack-detect | oracle4 | oracle16 | decrypt")->required();
  scenario->add_option("--count", count, "values or blocks to produce");
  scenario->add_option("--driver", driver, "auto | intercept | pagefault");
  scenario->add_option("--attacker", attacker, "auto | known | stale");
  scenario->add_flag("--no-pagefault-sync", no_pf_sync, "the page-fault driver is unavailable");
  scenario->add_flag("--shift-runs", shift_runs, "use multi-bit shifts for runs of zeros");
  scenario->add_option("--snapshot", snapshot_path, "replay machine memory from a snapshot");

  auto* snapshot = app.add_subcommand("snapshot", "save or load machine snapshots");
  snapshot->require_subcommand(1);
  snapshot->fallthrough();
  std::string snap_out, snap_in, snap_copy, program = "idle";
  auto* snap_save = snapshot->add_subcommand("save", "build the guest machine and save it");
  machine_flags(snap_save);
  snap_save->add_option("out", snap_out)->required();
  snap_save->add_option("--program", program, "idle | boot | cpuid");
  auto* snap_load = snapshot->add_subcommand("load", "load a snapshot (optionally re-save it)");
  machine_flags(snap_load);
  snap_load->add_option("in", snap_in)->required();
  snap_load->add_option("--out", snap_copy);

  std::string image_path, find_spec, solutions_out;
  std::optional<std::uint64_t> load_base;
  std::uint64_t dest = 0;
  auto* corpus = app.add_subcommand("corpus", "build a corpus from a binary image");
  corpus->add_option("image", image_path)->required();
  corpus->add_option("--load-base", load_base, "guest-physical load address");
  corpus->add_option("--find", find_spec, "constraints OFF:HEX[,OFF:HEX...]");
  corpus->add_option("--dest", dest, "destination address for --find");
  corpus->add_option("--out", solutions_out, "write found solutions as JSON");

  auto* selftest = app.add_subcommand("selftest", "quick internal consistency checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    RunConfig cfg;
    if (!config_path.empty()) load_config_file(config_path, cfg);
    if (const char* env = std::getenv("SEVLAB_SEED")) apply_config_key(cfg, "machine.seed", env);
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ValidationError("--set expects key=value, got '" + s + "'");
      apply_config_key(cfg, s.substr(0, eq), s.substr(eq + 1));
    }
    if (seed) cfg.machine().seed = *seed;
    if (no_timestamps) cfg.output.timestamps = false;
    if (!events_path.empty()) cfg.output.events_path = events_path;
    if (!report_path.empty()) cfg.output.report_path = report_path;
    if (mode) apply_config_key(cfg, "machine.mode", *mode);
    if (n) cfg.machine().n = *n;
    if (table) apply_config_key(cfg, "machine.table", *table);
    if (rmp) cfg.machine().flags.rmp_ownership = true;
    if (no_interception) cfg.machine().flags.interception_enabled = false;
    if (no_sev_es) cfg.machine().flags.sev_es = false;
    if (jobs) cfg.recover.jobs = *jobs;
    if (unit_bits) cfg.recover.unit_bits = *unit_bits;
    if (count) cfg.scenario.count = *count;
    if (driver) apply_config_key(cfg, "scenario.driver", *driver);
    if (attacker) apply_config_key(cfg, "scenario.attacker", *attacker);
    if (no_pf_sync) cfg.scenario.pagefault_sync = false;
    if (shift_runs) cfg.scenario.shift_runs = true;
    if (load_base) cfg.scenario.text_base = *load_base;

    if (*recover) return cmd_recover(cfg);
    if (*scenario) {
      cfg.scenario.name = scenario_name;
      const auto& names = scenario_names();
      if (std::find(names.begin(), names.end(), scenario_name) == names.end()) {
        std::cerr << "sevlab: unknown scenario '" << scenario_name << "'\n";
        return kExitUsage;
      }
      if (!snapshot_path.empty()) {
        const Bytes raw = read_file(snapshot_path);
        cfg.scenario.snapshot = std::string(raw.begin(), raw.end());
      }
      return cmd_scenario(cfg);
    }
    if (*snap_save) return cmd_snapshot_save(cfg, program, snap_out);
    if (*snap_load) return cmd_snapshot_load(cfg, snap_in, snap_copy);
    if (*corpus) return cmd_corpus(cfg, image_path, find_spec, dest, solutions_out);
    if (*selftest) return cmd_selftest(cfg);
  } catch (const ValidationError& e) {
    std::cerr << "sevlab: " << e.what() << "\n";
    return kExitUsage;
  } catch (const FormatError& e) {
    std::cerr << "sevlab: " << e.what() << "\n";
    return kExitFailed;
  } catch (const std::exception& e) {
    std::cerr << "sevlab: " << e.what() << "\n";
    return kExitFailed;
  }
  return kExitUsage;
}
