#pragma once

// Flat key=value run configuration. Lines are `key = value`; `#` starts a
// comment. Unknown keys are rejected.

#include <cstdint>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <optional>
#include <sstream>
#include <string>

#include "sevlab/errors.hpp"
#include "sevlab/scenarios.hpp"

namespace sevlab {

struct RecoverSettings {
  unsigned jobs = 1;
  unsigned unit_bits = 16;  // search width per periodic unit
  PhysAddr probe_gpa = 0x1000;
};

struct OutputSettings {
  std::string events_path;
  std::string report_path;
  bool timestamps = true;
};

struct RunConfig {
  ScenarioConfig scenario;  // also carries the machine settings
  RecoverSettings recover;
  OutputSettings output;
  std::string corpus_path;

  MachineSettings& machine() { return scenario.machine; }
  const MachineSettings& machine() const { return scenario.machine; }
};

namespace config_detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::uint64_t to_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const std::uint64_t x = std::stoull(v, &used, 0);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ValidationError("config key '" + key + "': expected an integer, got '" + v + "'");
  }
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw ValidationError("config key '" + key + "': expected a boolean, got '" + v + "'");
}

}  // namespace config_detail

/// Applies one key. Throws ValidationError for unknown keys or bad values.
inline void apply_config_key(RunConfig& c, const std::string& key, const std::string& value) {
  using namespace config_detail;
  using Setter = std::function<void(RunConfig&, const std::string&)>;
  auto u = [&](const std::string& v) { return to_u64(key, v); };
  auto b = [&](const std::string& v) { return to_bool(key, v); };
  const std::map<std::string, Setter> setters = {
      {"machine.n", [&](RunConfig& r, const std::string& v) { r.machine().n = static_cast<unsigned>(u(v)); }},
      {"machine.mode", [&](RunConfig& r, const std::string& v) { r.machine().mode = parse_mode(v); }},
      {"machine.table", [&](RunConfig& r, const std::string& v) { r.machine().table = parse_table_kind(v); }},
      {"machine.periodicity", [&](RunConfig& r, const std::string& v) { r.machine().periodicity = static_cast<unsigned>(u(v)); }},
      {"machine.rank", [&](RunConfig& r, const std::string& v) { r.machine().rank = static_cast<unsigned>(u(v)); }},
      {"machine.unit_bits", [&](RunConfig& r, const std::string& v) { r.machine().unit_bits = static_cast<unsigned>(u(v)); }},
      {"machine.sev_es", [&](RunConfig& r, const std::string& v) { r.machine().flags.sev_es = b(v); }},
      {"machine.rmp", [&](RunConfig& r, const std::string& v) { r.machine().flags.rmp_ownership = b(v); }},
      {"machine.interception", [&](RunConfig& r, const std::string& v) { r.machine().flags.interception_enabled = b(v); }},
      {"machine.seed", [&](RunConfig& r, const std::string& v) { r.machine().seed = u(v); }},
      {"corpus.path", [&](RunConfig& r, const std::string& v) { r.corpus_path = v; }},
      {"corpus.load_base", [&](RunConfig& r, const std::string& v) { r.scenario.text_base = u(v); }},
      {"scenario.name", [&](RunConfig& r, const std::string& v) { r.scenario.name = v; }},
      {"scenario.count", [&](RunConfig& r, const std::string& v) { r.scenario.count = u(v); }},
      {"scenario.driver", [&](RunConfig& r, const std::string& v) { r.scenario.driver = parse_driver(v); }},
      {"scenario.pagefault_sync", [&](RunConfig& r, const std::string& v) { r.scenario.pagefault_sync = b(v); }},
      {"scenario.shift_runs", [&](RunConfig& r, const std::string& v) { r.scenario.shift_runs = b(v); }},
      {"scenario.attacker", [&](RunConfig& r, const std::string& v) { r.scenario.attacker = parse_attacker_table(v); }},
      {"scenario.text_size", [&](RunConfig& r, const std::string& v) { r.scenario.text_size = u(v); }},
      {"scenario.trials", [&](RunConfig& r, const std::string& v) { r.scenario.trials = static_cast<unsigned>(u(v)); }},
      {"scenario.control", [&](RunConfig& r, const std::string& v) { r.scenario.control = b(v); }},
      {"scenario.target", [&](RunConfig& r, const std::string& v) { r.scenario.target = u(v); }},
      {"scenario.target_len", [&](RunConfig& r, const std::string& v) { r.scenario.target_len = u(v); }},
      {"scenario.stack_pointer", [&](RunConfig& r, const std::string& v) { r.scenario.stack_pointer = u(v); }},
      {"recover.jobs", [&](RunConfig& r, const std::string& v) { r.recover.jobs = static_cast<unsigned>(u(v)); }},
      {"recover.unit_bits", [&](RunConfig& r, const std::string& v) { r.recover.unit_bits = static_cast<unsigned>(u(v)); }},
      {"recover.probe_gpa", [&](RunConfig& r, const std::string& v) { r.recover.probe_gpa = u(v); }},
      {"output.events", [&](RunConfig& r, const std::string& v) { r.output.events_path = v; }},
      {"output.report", [&](RunConfig& r, const std::string& v) { r.output.report_path = v; }},
      {"output.timestamps", [&](RunConfig& r, const std::string& v) { r.output.timestamps = b(v); }},
  };
  auto it = setters.find(key);
  if (it == setters.end()) throw ValidationError("unknown config key '" + key + "'");
  it->second(c, value);
}

inline void parse_config(std::istream& is, RunConfig& c) {
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    line = config_detail::trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ValidationError("config line " + std::to_string(lineno) + ": expected key = value");
    apply_config_key(c, config_detail::trim(line.substr(0, eq)), config_detail::trim(line.substr(eq + 1)));
  }
}

inline RunConfig parse_config_text(const std::string& text) {
  RunConfig c;
  std::istringstream is(text);
  parse_config(is, c);
  return c;
}

inline void load_config_file(const std::string& path, RunConfig& c) {
  std::ifstream f(path);
  if (!f) throw ValidationError("cannot read config file '" + path + "'");
  parse_config(f, c);
}

}  // namespace sevlab
