#pragma once

// Linear algebra over GF(2): elimination with 128-bit right-hand sides, rank of
// block sets, and span membership with combination tracking.

#include <bit>
#include <cstdint>
#include <optional>
#include <vector>

#include "sevlab/block.hpp"
#include "sevlab/errors.hpp"

namespace sevlab {

/// One equation: XOR of the unknowns selected by coeff_mask equals rhs.
struct Gf2Row {
  std::uint64_t coeff_mask = 0;
  Block rhs{};
};

struct Gf2System {
  unsigned unknowns = 0;  // at most 64
  std::vector<Gf2Row> rows;
};

/// pivot = rhs XOR (sum of the free unknowns in free_mask)
struct AffineRelation {
  unsigned pivot = 0;
  std::uint64_t free_mask = 0;
  Block rhs{};
};

struct Gf2Solution {
  unsigned rank = 0;
  std::vector<std::optional<Block>> values;  // determined unknowns
  std::vector<unsigned> free_unknowns;       // empty iff the solution is unique
  std::vector<AffineRelation> relations;     // pivots that depend on free unknowns

  bool unique() const { return free_unknowns.empty(); }
};

/// Gaussian elimination over GF(2), treating each 128-bit rhs as 128 parallel
/// right-hand sides. Throws InconsistentSystem when some row reduces to 0 = c, c != 0.
inline Gf2Solution solve_gf2(const Gf2System& system) {
  const unsigned n = system.unknowns;
  if (n > 64) throw ValidationError("solve_gf2 supports at most 64 unknowns");
  const std::uint64_t all = n == 64 ? ~0ULL : ((1ULL << n) - 1);

  std::vector<Gf2Row> rows = system.rows;
  for (auto& r : rows)
    if (r.coeff_mask & ~all) throw ValidationError("coefficient selects an unknown outside the system");

  std::vector<int> pivot_row(n, -1);
  std::size_t next = 0;
  for (unsigned col = 0; col < n && next < rows.size(); ++col) {
    const std::uint64_t bit = 1ULL << col;
    std::size_t sel = next;
    while (sel < rows.size() && !(rows[sel].coeff_mask & bit)) ++sel;
    if (sel == rows.size()) continue;
    std::swap(rows[sel], rows[next]);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (r != next && (rows[r].coeff_mask & bit)) {
        rows[r].coeff_mask ^= rows[next].coeff_mask;
        rows[r].rhs ^= rows[next].rhs;
      }
    }
    pivot_row[col] = static_cast<int>(next);
    ++next;
  }
  for (std::size_t r = next; r < rows.size(); ++r)
    if (!rows[r].rhs.is_zero()) throw InconsistentSystem("linear system has no solution (row " + std::to_string(r) + " reduces to 0 = c)");

  Gf2Solution sol;
  sol.rank = static_cast<unsigned>(next);
  sol.values.assign(n, std::nullopt);
  std::uint64_t free_mask = 0;
  for (unsigned col = 0; col < n; ++col)
    if (pivot_row[col] < 0) {
      sol.free_unknowns.push_back(col);
      free_mask |= 1ULL << col;
    }
  for (unsigned col = 0; col < n; ++col) {
    if (pivot_row[col] < 0) continue;
    const auto& row = rows[static_cast<std::size_t>(pivot_row[col])];
    const std::uint64_t deps = row.coeff_mask & free_mask;
    if (deps == 0) sol.values[col] = row.rhs;
    else sol.relations.push_back({col, deps, row.rhs});
  }
  return sol;
}

/// Incrementally built basis of 128-bit vectors; each basis vector remembers
/// which generators (bit positions of a 64-bit tag) combine into it.
class Gf2Span {
 public:
  /// Returns true when v was independent of the vectors added so far.
  bool add(const Block& v, std::uint64_t tag) {
    auto r = reduce_full(v, tag);
    if (r.first.is_zero()) return false;
    basis_.push_back({r.first, r.second, lowest_bit(r.first)});
    return true;
  }

  std::size_t rank() const { return basis_.size(); }

  /// If target lies in the span, returns the tag combination producing it.
  std::optional<std::uint64_t> express(const Block& target) const {
    auto r = reduce_full(target, 0);
    if (!r.first.is_zero()) return std::nullopt;
    return r.second;
  }

  bool contains(const Block& target) const { return express(target).has_value(); }

 private:
  struct Entry {
    Block v;
    std::uint64_t tag;
    unsigned pivot;
  };

  static unsigned lowest_bit(const Block& b) {
    for (unsigned i = 0; i < kBlockSize; ++i)
      if (b.bytes[i]) return i * 8 + static_cast<unsigned>(std::countr_zero(static_cast<unsigned>(b.bytes[i])));
    return 128;
  }

  std::pair<Block, std::uint64_t> reduce_full(Block v, std::uint64_t tag) const {
    // Basis vectors are kept in insertion order; each was reduced against all
    // earlier ones, so a single forward pass suffices.
    for (const auto& e : basis_) {
      if (v.bit(e.pivot)) {
        v ^= e.v;
        tag ^= e.tag;
      }
    }
    return {v, tag};
  }

  std::vector<Entry> basis_;
};

inline std::size_t gf2_rank(const std::vector<Block>& vectors) {
  Gf2Span span;
  for (const auto& v : vectors) span.add(v, 0);
  return span.rank();
}

}  // namespace sevlab
