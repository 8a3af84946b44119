#pragma once

// Tweak-constant recovery using hypervisor capabilities plus one cooperative
// guest read primitive.

#include <algorithm>
#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "sevlab/cipher.hpp"
#include "sevlab/errors.hpp"
#include "sevlab/gf2.hpp"
#include "sevlab/machine.hpp"
#include "sevlab/tweak.hpp"

namespace sevlab {

/// Known plaintext m whose ciphertext Enc(m, p) is resident at host address p.
struct PlaintextProbe {
  Block m;
  PhysAddr p = 0;
};

/// Has the guest write m at gpa and returns the matching probe.
inline PlaintextProbe place_probe(Machine& machine, PhysAddr gpa, const Block& m) {
  require_block_aligned(gpa);
  if (auto f = machine.vm_write(gpa, m.bytes)) throw FaultError(f->gpa);
  return {m, machine.translate_or_throw(gpa)};
}

/// The cooperative element: a diagnostic guest routine that reports the
/// plaintext it reads from the block backed by a given host address.
class CooperativeReader {
 public:
  explicit CooperativeReader(const Machine& m) : m_(m) {}
  Block observe(PhysAddr hpa) const { return m_.private_view(hpa); }

 private:
  const Machine& m_;
};

enum class Provenance : std::uint8_t { ReadOff, Solved, BruteForced, Unrecoverable };

inline const char* to_string(Provenance p) {
  switch (p) {
    case Provenance::ReadOff: return "read-off";
    case Provenance::Solved: return "solved";
    case Provenance::BruteForced: return "brute-forced";
    case Provenance::Unrecoverable: return "unrecoverable";
  }
  return "?";
}

struct XeRecovery {
  std::map<unsigned, Block> constants;  // address bit -> t_bit
  std::map<unsigned, Provenance> provenance;
  std::vector<unsigned> unrecoverable;
  unsigned rank = 0;
  std::size_t observations = 0;

  bool complete() const { return unrecoverable.empty(); }
};

namespace recovery_detail {

inline std::uint64_t unknown_mask(const TweakTable& t, PhysAddr delta) {
  std::uint64_t mask = delta >> kFirstTweakBit;
  const unsigned count = t.address_width - kFirstTweakBit;
  if (count < 64) mask &= (1ULL << count) - 1;
  return mask;
}

/// Writes raw ciphertext to a scratch host block, creating the frame when it
/// does not exist. Returns the previous contents for restoration.
inline std::optional<Block> stage(Machine& m, PhysAddr q, const Block& c) {
  std::optional<Block> old;
  if (m.has_frame(page_of(q))) old = m.hv_read_block(q);
  else m.add_frame(page_of(q), kHypervisor);
  m.hv_write_block(q, c);
  return old;
}

}  // namespace recovery_detail

/// Linear recovery for XE. Without explicit destinations each target bit i is
/// probed at q = p ^ 2^i and read off directly; a pairwise row per neighbouring
/// target pair is added so a wrong mode assumption surfaces as inconsistency.
/// With explicit destinations the rows go through full elimination.
inline XeRecovery recover_xe_constants(Machine& machine, const PlaintextProbe& probe, std::vector<unsigned> targets,
                                       const std::vector<PhysAddr>& destinations = {}) {
  using namespace recovery_detail;
  const TweakTable& shape = machine.table();
  require_block_aligned(probe.p);
  std::sort(targets.begin(), targets.end());
  targets.erase(std::unique(targets.begin(), targets.end()), targets.end());
  for (unsigned b : targets)
    if (b < kFirstTweakBit || b >= shape.address_width) throw AddressRangeError("target bit outside 4..n-1");

  std::vector<PhysAddr> qs = destinations;
  const bool identity = qs.empty();
  if (identity) {
    for (unsigned b : targets) qs.push_back(probe.p ^ (1ULL << b));
    for (std::size_t k = 0; k + 1 < targets.size(); ++k)
      qs.push_back(probe.p ^ (1ULL << targets[k]) ^ (1ULL << targets[k + 1]));
  }

  const Block c = machine.hv_read_block(probe.p);
  CooperativeReader reader(machine);
  Gf2System sys;
  sys.unknowns = shape.address_width - kFirstTweakBit;
  for (PhysAddr q : qs) {
    require_block_aligned(q);
    if (!address_in_range(shape, q)) throw AddressRangeError("destination beyond 2^n");
    if (q == probe.p) continue;
    const auto old = stage(machine, q, c);
    const Block seen = reader.observe(q);
    if (old) machine.hv_write_block(q, *old);
    sys.rows.push_back({unknown_mask(shape, probe.p ^ q), seen ^ probe.m});
  }

  XeRecovery out;
  out.observations = sys.rows.size();
  const Gf2Solution sol = solve_gf2(sys);  // throws InconsistentSystem
  out.rank = sol.rank;
  for (unsigned b : targets) {
    const unsigned u = b - kFirstTweakBit;
    if (sol.values[u]) {
      out.constants[b] = *sol.values[u];
      out.provenance[b] = identity ? Provenance::ReadOff : Provenance::Solved;
    } else {
      out.provenance[b] = Provenance::Unrecoverable;
      out.unrecoverable.push_back(b);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// XEX guess-and-check

struct XexSearch {
  unsigned unit_bits = 16;       // candidates are 4-byte units below 2^unit_bits
  std::uint64_t begin = 0;       // candidate range [begin, end); end == 0 means 2^unit_bits
  std::uint64_t end = 0;
};

enum class SearchStatus : std::uint8_t { Found, NotFound, Ambiguous };

inline const char* to_string(SearchStatus s) {
  switch (s) {
    case SearchStatus::Found: return "found";
    case SearchStatus::NotFound: return "not-found";
    case SearchStatus::Ambiguous: return "ambiguous";
  }
  return "?";
}

struct XexResult {
  SearchStatus status = SearchStatus::NotFound;
  std::vector<std::uint32_t> matches;
  std::uint64_t candidates_tried = 0;
  std::optional<Block> constant() const {
    if (status != SearchStatus::Found) return std::nullopt;
    return Block::repeat_unit(matches.front());
  }
};

/// Exhaustive search for the periodic unit of t_bit. Partition k scans its own
/// slice of the candidate range using probes[k] and the scratch block
/// probes[k].p ^ 2^bit, so partitions never share memory and may run on
/// separate threads (threads == true).
inline XexResult recover_xex_constant(Machine& machine, const std::vector<PlaintextProbe>& probes, unsigned bit,
                                      const XexSearch& search, bool threads = true) {
  using namespace recovery_detail;
  const TweakTable& shape = machine.table();
  if (probes.empty()) throw ValidationError("at least one probe is required");
  if (bit < kFirstTweakBit || bit >= shape.address_width) throw AddressRangeError("target bit outside 4..n-1");
  if (search.unit_bits == 0 || search.unit_bits > 32) throw ValidationError("unit_bits must lie in 1..32");
  const std::uint64_t limit = 1ULL << search.unit_bits;
  const std::uint64_t end = search.end == 0 ? limit : std::min(search.end, limit);
  const std::uint64_t begin = std::min(search.begin, end);

  // Scratch blocks must be pairwise distinct and distinct from every probe.
  std::vector<PhysAddr> scratch;
  for (const auto& pr : probes) {
    require_block_aligned(pr.p);
    scratch.push_back(pr.p ^ (1ULL << bit));
  }
  {
    std::vector<PhysAddr> all = scratch;
    for (const auto& pr : probes) all.push_back(pr.p);
    std::sort(all.begin(), all.end());
    if (std::adjacent_find(all.begin(), all.end()) != all.end())
      throw ValidationError("probe and scratch blocks of the partitions overlap");
  }
  std::vector<std::optional<Block>> saved(probes.size());
  std::vector<Block> source(probes.size());
  for (std::size_t k = 0; k < probes.size(); ++k) {
    if (!address_in_range(shape, scratch[k])) throw AddressRangeError("scratch block beyond 2^n");
    source[k] = machine.hv_read_block(probes[k].p);
    saved[k] = stage(machine, scratch[k], source[k]);
  }

  const std::size_t parts = probes.size();
  const std::uint64_t span = end - begin;
  std::vector<std::vector<std::uint32_t>> found(parts);
  std::vector<std::uint64_t> tried(parts, 0);
  auto worker = [&](std::size_t k) {
    const std::uint64_t lo = begin + span * k / parts;
    const std::uint64_t hi = begin + span * (k + 1) / parts;
    CooperativeReader reader(machine);
    for (std::uint64_t g = lo; g < hi; ++g) {
      const Block guess = Block::repeat_unit(static_cast<std::uint32_t>(g));
      machine.hv_write_block(scratch[k], source[k] ^ guess);
      if (reader.observe(scratch[k]) == (probes[k].m ^ guess)) found[k].push_back(static_cast<std::uint32_t>(g));
      ++tried[k];
    }
  };
  if (threads && parts > 1) {
    std::vector<std::thread> pool;
    for (std::size_t k = 0; k < parts; ++k) pool.emplace_back(worker, k);
    for (auto& t : pool) t.join();
  } else {
    for (std::size_t k = 0; k < parts; ++k) worker(k);
  }

  XexResult out;
  for (std::size_t k = 0; k < parts; ++k) {
    out.matches.insert(out.matches.end(), found[k].begin(), found[k].end());
    out.candidates_tried += tried[k];
  }
  std::sort(out.matches.begin(), out.matches.end());
  // Re-verify each match once on partition 0's scratch block.
  std::erase_if(out.matches, [&](std::uint32_t g) {
    const Block guess = Block::repeat_unit(g);
    machine.hv_write_block(scratch[0], source[0] ^ guess);
    return CooperativeReader(machine).observe(scratch[0]) != (probes[0].m ^ guess);
  });
  for (std::size_t k = 0; k < parts; ++k) {
    if (saved[k]) machine.hv_write_block(scratch[k], *saved[k]);
  }
  out.status = out.matches.empty() ? SearchStatus::NotFound
               : out.matches.size() == 1 ? SearchStatus::Found
                                         : SearchStatus::Ambiguous;
  return out;
}

// ---------------------------------------------------------------------------
// Delta cache

/// T(p) for a working set of frames; in-page offsets use a 256-entry table.
class DeltaIndex {
 public:
  DeltaIndex() = default;

  DeltaIndex(const TweakTable& table, const std::vector<std::uint64_t>& frames) : table_(table) {
    for (unsigned k = 0; k < kBlocksPerPage; ++k) offset_[k] = tweak_value(table, static_cast<PhysAddr>(k) << 4);
    for (auto f : frames) frame_[f] = tweak_value(table, f << kPageShift);
  }

  Block tweak(PhysAddr p) const {
    const Block& off = offset_[(p >> 4) & (kBlocksPerPage - 1)];
    auto it = frame_.find(page_of(p));
    if (it != frame_.end()) return it->second ^ off;
    return tweak_value(table_, page_base(p)) ^ off;
  }

  Block delta(PhysAddr p, PhysAddr q) const { return tweak(p) ^ tweak(q); }

  std::size_t frames() const { return frame_.size(); }

 private:
  TweakTable table_;
  std::array<Block, kBlocksPerPage> offset_{};
  std::unordered_map<std::uint64_t, Block> frame_;
};

inline DeltaIndex precompute_tweak_deltas(const TweakTable& table, const std::vector<std::uint64_t>& frames) {
  return DeltaIndex(table, frames);
}

// ---------------------------------------------------------------------------
// Whole-table driver used by the CLI

struct TableRecovery {
  TweakTable table;  // unrecovered constants left zero
  std::map<unsigned, Provenance> provenance;
  std::vector<unsigned> unrecoverable;
  bool inconsistent = false;
  std::string message;
};

/// Recovers every constant t_4..t_{n-1}. XE uses the linear path; XEX uses
/// guess-and-check with `partitions` probes placed by the cooperative guest.
inline TableRecovery recover_table(Machine& machine, CipherMode assumed_mode, PhysAddr probe_gpa, std::uint64_t seed,
                                   unsigned unit_bits = 16, unsigned partitions = 1) {
  const TweakTable& shape = machine.table();
  TableRecovery out;
  out.table.address_width = shape.address_width;
  out.table.periodicity = 4;
  out.table.constants.assign(shape.address_width - kFirstTweakBit, Block{});
  std::mt19937_64 rng(seed ^ 0x9E3779B97F4A7C15ULL);
  std::vector<unsigned> targets;
  for (unsigned b = kFirstTweakBit; b < shape.address_width; ++b) targets.push_back(b);

  if (assumed_mode == CipherMode::XE) {
    const Block m = Block::from_halves(rng(), rng());
    const PlaintextProbe probe = place_probe(machine, probe_gpa, m);
    try {
      const XeRecovery r = recover_xe_constants(machine, probe, targets);
      for (const auto& [b, v] : r.constants) out.table.constants[b - kFirstTweakBit] = v;
      out.provenance = r.provenance;
      out.unrecoverable = r.unrecoverable;
    } catch (const InconsistentSystem& e) {
      out.inconsistent = true;
      out.message = std::string(e.what()) + "; the machine does not behave like XE";
    }
  } else {
    if (partitions == 0) partitions = 1;
    if (partitions > 64) throw ValidationError("at most 64 partitions");
    std::vector<PlaintextProbe> probes;
    // Block indices of even parity differ in at least two bits, so a single-bit
    // flip of one probe never lands on another.
    for (std::uint64_t idx = 0; probes.size() < partitions; ++idx) {
      if (std::popcount(idx) % 2) continue;
      const Block m = Block::from_halves(rng(), rng());
      probes.push_back(place_probe(machine, probe_gpa + 16 * idx, m));
    }
    for (unsigned b : targets) {
      const XexResult r = recover_xex_constant(machine, probes, b, XexSearch{unit_bits, 0, 0}, partitions > 1);
      if (r.status == SearchStatus::Found) {
        out.table.constants[b - kFirstTweakBit] = *r.constant();
        out.provenance[b] = Provenance::BruteForced;
      } else {
        out.provenance[b] = Provenance::Unrecoverable;
        out.unrecoverable.push_back(b);
        if (out.message.empty())
          out.message = std::string("bit ") + std::to_string(b) + ": " + to_string(r.status) + " in a " +
                        std::to_string(unit_bits) + "-bit periodic search";
      }
    }
  }
  out.table.independent_rank = static_cast<unsigned>(gf2_rank(out.table.constants));
  return out;
}

}  // namespace sevlab
