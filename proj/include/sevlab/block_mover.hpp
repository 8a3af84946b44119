#pragma once

// Ciphertext relocation and the known-plaintext search that turns it into an
// injection primitive.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "sevlab/cipher.hpp"
#include "sevlab/errors.hpp"
#include "sevlab/gf2.hpp"
#include "sevlab/machine.hpp"
#include "sevlab/recovery.hpp"
#include "sevlab/tweak.hpp"

namespace sevlab {

struct ByteConstraint {
  std::uint8_t offset = 0;
  std::uint8_t value = 0;
  friend bool operator==(const ByteConstraint&, const ByteConstraint&) = default;
};

/// Constraints placing bytes at consecutive offsets starting at `offset`.
inline std::vector<ByteConstraint> constraints_at(unsigned offset, std::span<const std::uint8_t> bytes) {
  std::vector<ByteConstraint> out;
  for (std::size_t k = 0; k < bytes.size(); ++k)
    out.push_back({static_cast<std::uint8_t>(offset + k), bytes[k]});
  return out;
}

/// Ciphertext that decrypts at `to` like c did at `from`, up to the tweak
/// difference: raw copy under XE, copy XOR T(from) XOR T(to) under XEX.
inline Block relocated_cipher(CipherMode mode, const TweakTable& table, const Block& c, PhysAddr from, PhysAddr to) {
  require_block_aligned(from);
  require_block_aligned(to);
  return mode == CipherMode::XEX ? c ^ tweak_delta(table, from, to) : c;
}

/// `table` is the attacker's belief about the tweak constants.
inline void relocate_ciphertext(Machine& machine, const TweakTable& table, PhysAddr from, PhysAddr to) {
  const Block c = relocated_cipher(machine.mode(), table, machine.hv_read_block(from), from, to);
  machine.hv_write_block(to, c);
  ++machine.metrics().blocks_moved;
}

// ---------------------------------------------------------------------------
// Corpus

struct CorpusEntry {
  Block m;
  PhysAddr q = 0;  // host address holding Enc(m, q)
};

struct Corpus {
  std::vector<CorpusEntry> entries;
  std::vector<Block> cipher;  // ciphertext observed at capture time, parallel to entries when captured

  std::size_t size() const { return entries.size(); }
  bool captured() const { return cipher.size() == entries.size(); }
};

/// One entry per 16-byte block; a trailing partial block is zero padded.
inline Corpus build_corpus(std::span<const std::uint8_t> image, PhysAddr load_base) {
  require_block_aligned(load_base);
  Corpus c;
  c.entries.reserve((image.size() + kBlockSize - 1) / kBlockSize);
  for (std::size_t off = 0; off < image.size(); off += kBlockSize) {
    CorpusEntry e;
    e.q = load_base + off;
    std::copy_n(image.begin() + static_cast<std::ptrdiff_t>(off), std::min(kBlockSize, image.size() - off), e.m.bytes.begin());
    c.entries.push_back(e);
  }
  return c;
}

/// Corpus for an image the guest holds at load_gpa; host addresses follow the NPT.
inline Corpus build_corpus_from_guest(const Machine& machine, std::span<const std::uint8_t> image, PhysAddr load_gpa) {
  Corpus c = build_corpus(image, load_gpa);
  for (auto& e : c.entries) e.q = machine.translate_or_throw(e.q);
  return c;
}

/// Records the resident ciphertext of every entry so stale entries are detectable.
inline void capture_ciphertext(const Machine& machine, Corpus& corpus) {
  corpus.cipher.resize(corpus.entries.size());
  for (std::size_t k = 0; k < corpus.entries.size(); ++k) corpus.cipher[k] = machine.hv_read_block(corpus.entries[k].q);
}

// ---------------------------------------------------------------------------
// Search

/// Host frames the hypervisor may back the destination page with:
/// base_frame XOR any combination of free_mask bits (frame-number bits).
struct FrameChoice {
  std::uint64_t base_frame = 0;
  std::uint64_t free_mask = 0;
  std::function<bool(std::uint64_t)> usable;  // optional filter on candidate frames

  static FrameChoice fixed(std::uint64_t frame) { return {frame, 0, {}}; }
};

struct MoveSolution {
  std::size_t entry = 0;
  PhysAddr q = 0;
  Block m_prime;
  PhysAddr dest_gpa = 0;
  PhysAddr p = 0;  // destination host address, possibly in a remapped frame
  bool remap = false;
  Block r;         // predicted guest-visible plaintext at dest
  Block source_cipher;
};

enum class InjectionStatus : std::uint8_t { Found, NotFound, OverConstrained };

inline const char* to_string(InjectionStatus s) {
  switch (s) {
    case InjectionStatus::Found: return "found";
    case InjectionStatus::NotFound: return "not-found";
    case InjectionStatus::OverConstrained: return "over-constrained";
  }
  return "?";
}

struct InjectionResult {
  InjectionStatus status = InjectionStatus::NotFound;
  std::optional<MoveSolution> solution;
  std::uint64_t entries_scanned = 0;
  std::uint64_t deltas_unreachable = 0;

  bool found() const { return status == InjectionStatus::Found; }
};

/// Bytes the periodic tweak delta can steer independently per block.
inline unsigned controllable_bytes(const TweakTable& table) { return table.periodicity == 4 ? 4 : kBlockSize; }

/// Constraint search over a captured corpus. Each entry is reduced to
/// z = m' XOR T(q); a destination p then shows z XOR T(p). Fixed-frame queries
/// go through a hash index on the lowest two constrained offsets; remap
/// queries test, per entry, whether the needed delta lies in the span of the
/// frame-bit constants.
class InjectionSearcher {
 public:
  InjectionSearcher(std::shared_ptr<const Corpus> corpus, TweakTable table)
      : corpus_(std::move(corpus)), table_(std::move(table)) {
    std::vector<std::uint64_t> frames;
    for (const auto& e : corpus_->entries) frames.push_back(page_of(e.q));
    std::sort(frames.begin(), frames.end());
    frames.erase(std::unique(frames.begin(), frames.end()), frames.end());
    deltas_ = DeltaIndex(table_, frames);
    z_.reserve(corpus_->size());
    for (const auto& e : corpus_->entries) z_.push_back(e.m ^ deltas_.tweak(e.q));
  }

  const TweakTable& table() const { return table_; }
  const Corpus& corpus() const { return *corpus_; }

  /// Marks a host block as consumed (overwritten by an injection).
  void exclude(PhysAddr hpa) { excluded_.insert(block_floor(hpa)); }
  void exclude_range(PhysAddr hpa, std::size_t len) {
    for (PhysAddr a = block_floor(hpa); a < hpa + len; a += kBlockSize) exclude(a);
  }

  InjectionResult find(std::span<const ByteConstraint> constraints, PhysAddr dest_gpa, const FrameChoice& frames) const {
    require_block_aligned(dest_gpa);
    if (constraints.empty()) throw ValidationError("at least one byte constraint is required");
    std::uint32_t seen = 0;
    for (const auto& c : constraints) {
      if (c.offset >= kBlockSize) throw ValidationError("constraint offset outside 0..15");
      if (seen & (1U << c.offset)) throw ValidationError("duplicate constraint offset");
      seen |= 1U << c.offset;
    }
    InjectionResult res;
    if (constraints.size() > controllable_bytes(table_)) {
      res.status = InjectionStatus::OverConstrained;
      return res;
    }
    std::vector<ByteConstraint> cs(constraints.begin(), constraints.end());
    std::sort(cs.begin(), cs.end(), [](auto& a, auto& b) { return a.offset < b.offset; });

    const PhysAddr base_p = (frames.base_frame << kPageShift) | page_offset(dest_gpa);
    if (!address_in_range(table_, base_p)) throw AddressRangeError("destination frame beyond 2^n");
    const Block t_base = tweak_value(table_, base_p);
    Block want{}, mask{};
    for (const auto& c : cs) {
      want[c.offset] = c.value ^ t_base[c.offset];
      mask[c.offset] = 0xFF;
    }

    auto emit = [&](std::size_t k, std::uint64_t frame, bool remap) {
      const auto& e = corpus_->entries[k];
      MoveSolution s;
      s.entry = k;
      s.q = e.q;
      s.m_prime = e.m;
      s.dest_gpa = dest_gpa;
      s.p = (frame << kPageShift) | page_offset(dest_gpa);
      s.remap = remap;
      s.r = z_[k] ^ tweak_value(table_, s.p);
      s.source_cipher = corpus_->captured() ? corpus_->cipher[k] : Block{};
      res.status = InjectionStatus::Found;
      res.solution = s;
    };
    auto usable_entry = [&](std::size_t k) { return excluded_.empty() || !excluded_.count(corpus_->entries[k].q); };

    if (frames.free_mask == 0) {
      const auto& idx = index_for(cs.front().offset, cs.size() > 1 ? cs[1].offset : cs.front().offset);
      const std::uint16_t key = key_of(want, cs.front().offset, cs.size() > 1 ? cs[1].offset : cs.front().offset);
      auto it = idx.find(key);
      if (it == idx.end()) return res;
      for (std::size_t k : it->second) {
        ++res.entries_scanned;
        if (!usable_entry(k)) continue;
        if (((z_[k] ^ want) & mask).is_zero()) {
          emit(k, frames.base_frame, false);
          return res;
        }
      }
      return res;
    }

    // Remap path: need sum of chosen frame-bit constants == (z ^ want) on the masked bytes.
    Gf2Span span;
    std::vector<unsigned> bits;
    for (unsigned k = 0; k < 64; ++k) {
      if (!((frames.free_mask >> k) & 1)) continue;
      const unsigned addr_bit = k + kPageShift;
      if (addr_bit >= table_.address_width) throw AddressRangeError("free frame bit beyond the address width");
      span.add(table_.constant(addr_bit) & mask, 1ULL << k);
    }
    for (std::size_t k = 0; k < z_.size(); ++k) {
      ++res.entries_scanned;
      if (!usable_entry(k)) continue;
      const auto tag = span.express((z_[k] ^ want) & mask);
      if (!tag) {
        ++res.deltas_unreachable;
        continue;
      }
      const std::uint64_t frame = frames.base_frame ^ *tag;
      if (frames.usable && !frames.usable(frame)) continue;
      emit(k, frame, frame != frames.base_frame);
      return res;
    }
    return res;
  }

 private:
  using Index = std::unordered_map<std::uint16_t, std::vector<std::uint32_t>>;

  static std::uint16_t key_of(const Block& b, unsigned o1, unsigned o2) {
    return static_cast<std::uint16_t>(b[o1] << 8 | b[o2]);
  }

  const Index& index_for(unsigned o1, unsigned o2) const {
    std::lock_guard<std::mutex> lock(*mu_);
    auto& slot = indices_[o1 * kBlockSize + o2];
    if (!slot) {
      slot = std::make_unique<Index>();
      for (std::size_t k = 0; k < z_.size(); ++k) (*slot)[key_of(z_[k], o1, o2)].push_back(static_cast<std::uint32_t>(k));
    }
    return *slot;
  }

  std::shared_ptr<const Corpus> corpus_;
  TweakTable table_;
  DeltaIndex deltas_;
  std::vector<Block> z_;
  std::unordered_set<PhysAddr> excluded_;
  mutable std::unique_ptr<std::mutex> mu_ = std::make_unique<std::mutex>();
  mutable std::map<unsigned, std::unique_ptr<Index>> indices_;
};

/// One-shot form of InjectionSearcher::find.
inline InjectionResult find_injection(const Corpus& corpus, std::span<const ByteConstraint> constraints, PhysAddr dest_gpa,
                                      const FrameChoice& frames, const TweakTable& table) {
  InjectionSearcher s(std::make_shared<const Corpus>(corpus), table);
  return s.find(constraints, dest_gpa, frames);
}

/// Performs the move a solution describes: remaps the destination page when
/// the solution picked another frame, then relocates the source block.
inline void apply_solution(Machine& machine, const TweakTable& table, const MoveSolution& s) {
  const Block current = machine.hv_read_block(s.q);
  if (current != s.source_cipher) throw StaleSolution("source block no longer holds the captured ciphertext");
  const std::uint64_t gpa_frame = page_of(s.dest_gpa);
  const std::uint64_t want_frame = page_of(s.p);
  if (machine.npt_entry(gpa_frame).hpa_frame != want_frame) {
    if (!s.remap) throw StaleSolution("destination mapping changed since the solution was computed");
    if (!machine.has_frame(want_frame)) machine.add_frame(want_frame, kHypervisor);
    machine.remap_gpa(gpa_frame, want_frame);
  }
  machine.hv_write_block(s.p, relocated_cipher(machine.mode(), table, current, s.q, s.p));
  ++machine.metrics().blocks_moved;
}

}  // namespace sevlab
