#pragma once

// Address-derived tweak values: T(p) is the XOR of the constants t_i selected
// by bits 4..n-1 of the physical address p.

#include <algorithm>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "sevlab/block.hpp"
#include "sevlab/errors.hpp"
#include "sevlab/gf2.hpp"

namespace sevlab {

inline constexpr unsigned kFirstTweakBit = 4;
inline constexpr unsigned kDefaultAddressWidth = 48;
inline constexpr unsigned kDefaultIndependentRank = 28;

/// Constants measured on an Epyc 7251 for address bits 4, 5 and 6.
inline const std::vector<Block>& default_low_constants() {
  static const std::vector<Block> k = {
      block_from_hex("82 25 38 38 82 25 38 38 82 25 38 38 82 25 38 38"),
      block_from_hex("ec 09 07 9c ec 09 07 9c ec 09 07 9c ec 09 07 9c"),
      block_from_hex("40 00 00 18 40 00 00 18 40 00 00 18 40 00 00 18"),
  };
  return k;
}

inline bool has_period4(const Block& b) {
  for (std::size_t j = 4; j < kBlockSize; ++j)
    if (b[j] != b[j % 4]) return false;
  return true;
}

struct TweakTable {
  std::vector<Block> constants;  // constants[k] is t_{k+4}
  unsigned address_width = kDefaultAddressWidth;
  unsigned periodicity = 4;  // 4 or 16
  unsigned independent_rank = kDefaultIndependentRank;

  const Block& constant(unsigned bit) const { return constants.at(bit - kFirstTweakBit); }

  /// Throws ValidationError when any structural invariant is violated.
  void validate() const {
    if (address_width <= kFirstTweakBit || address_width > 64)
      throw ValidationError("address width must lie in 5..64");
    if (periodicity != 4 && periodicity != 16) throw ValidationError("periodicity must be 4 or 16");
    if (constants.size() != address_width - kFirstTweakBit)
      throw ValidationError("expected " + std::to_string(address_width - kFirstTweakBit) + " constants, got " +
                            std::to_string(constants.size()));
    if (periodicity == 4)
      for (std::size_t i = 0; i < constants.size(); ++i)
        if (!has_period4(constants[i]))
          throw ValidationError("constant t_" + std::to_string(i + kFirstTweakBit) + " is not 4-byte periodic");
  }

  friend bool operator==(const TweakTable&, const TweakTable&) = default;
};

inline bool address_in_range(const TweakTable& table, PhysAddr p) {
  return table.address_width >= 64 || (p >> table.address_width) == 0;
}

/// T(p). Bits 0..3 of p are ignored, so p need not be block aligned.
inline Block tweak_value(const TweakTable& table, PhysAddr p) {
  if (!address_in_range(table, p)) throw AddressRangeError("address exceeds 2^n for the tweak table");
  Block t{};
  std::uint64_t bits = p >> kFirstTweakBit;
  while (bits) {
    const unsigned i = static_cast<unsigned>(std::countr_zero(bits));
    t ^= table.constants[i];
    bits &= bits - 1;
  }
  return t;
}

/// T(p) XOR T(q) == T(p XOR q).
inline Block tweak_delta(const TweakTable& table, PhysAddr p, PhysAddr q) { return tweak_value(table, p ^ q); }

// ---------------------------------------------------------------------------
// Table generation

namespace table_spec {

/// Fixed published values for t_4..t_6, the rest drawn from seed with periodicity 4 and
/// the constant set clamped to `rank` independent members.
struct PaperDefault {
  std::uint64_t seed = 0;
  unsigned address_width = kDefaultAddressWidth;
  unsigned rank = kDefaultIndependentRank;
};

/// rank == 0 means full rank. unit_bits < 32 leaves the high bits of each
/// 4-byte unit zero (toy entropy for brute-force experiments).
struct Seeded {
  std::uint64_t seed = 0;
  unsigned periodicity = 4;
  unsigned rank = 0;
  unsigned address_width = kDefaultAddressWidth;
  unsigned unit_bits = 32;
};

struct Explicit {
  std::vector<Block> constants;
  unsigned address_width = kDefaultAddressWidth;
  unsigned periodicity = 4;
};

}  // namespace table_spec

using TableSpec = std::variant<table_spec::PaperDefault, table_spec::Seeded, table_spec::Explicit>;

namespace tweak_detail {

inline Block random_constant(std::mt19937_64& rng, unsigned periodicity, unsigned unit_bits) {
  if (periodicity == 4) {
    std::uint64_t u = rng();
    if (unit_bits < 32) u &= (1ULL << unit_bits) - 1;
    return Block::repeat_unit(static_cast<std::uint32_t>(u));
  }
  return Block::from_halves(rng(), rng());
}

inline TweakTable generate(std::uint64_t seed, unsigned n, unsigned periodicity, unsigned rank, unsigned unit_bits,
                           const std::vector<Block>& fixed) {
  if (n <= kFirstTweakBit || n > 64) throw ValidationError("address width must lie in 5..64");
  if (periodicity != 4 && periodicity != 16) throw ValidationError("periodicity must be 4 or 16");
  if (unit_bits == 0 || unit_bits > 32) throw ValidationError("unit_bits must lie in 1..32");
  const unsigned count = n - kFirstTweakBit;
  if (fixed.size() > count) throw ValidationError("address width too small for the fixed constants");
  const unsigned capacity = periodicity == 4 ? unit_bits : 128;
  if (rank == 0) rank = count;
  rank = std::min({rank, count, capacity});
  if (rank < fixed.size()) throw ValidationError("rank smaller than the number of fixed constants");

  std::mt19937_64 rng(seed ^ 0x5E71AB5EEDULL);
  Gf2Span span;
  std::vector<Block> basis;
  for (const auto& f : fixed) {
    if (!span.add(f, 0)) throw ValidationError("fixed constants are linearly dependent");
    basis.push_back(f);
  }
  while (basis.size() < rank) {
    Block c = random_constant(rng, periodicity, unit_bits);
    if (span.add(c, 0)) basis.push_back(c);
  }
  std::vector<Block> rest(basis.begin() + static_cast<std::ptrdiff_t>(fixed.size()), basis.end());
  while (fixed.size() + rest.size() < count) {
    Block combo{};
    std::uint64_t pick = 0;
    while (pick == 0) pick = rng() & (rank >= 64 ? ~0ULL : ((1ULL << rank) - 1));
    for (unsigned k = 0; k < rank; ++k)
      if ((pick >> k) & 1) combo ^= basis[k];
    rest.push_back(combo);
  }
  // Fisher-Yates with raw engine output keeps the result identical across standard libraries.
  for (std::size_t i = rest.size(); i > 1; --i) std::swap(rest[i - 1], rest[rng() % i]);

  TweakTable t;
  t.address_width = n;
  t.periodicity = periodicity;
  t.independent_rank = rank;
  t.constants = fixed;
  t.constants.insert(t.constants.end(), rest.begin(), rest.end());
  t.validate();
  return t;
}

}  // namespace tweak_detail

inline TweakTable make_tweak_table(const TableSpec& spec) {
  return std::visit(
      [](const auto& s) -> TweakTable {
        using S = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<S, table_spec::PaperDefault>) {
          return tweak_detail::generate(s.seed, s.address_width, 4, s.rank, 32, default_low_constants());
        } else if constexpr (std::is_same_v<S, table_spec::Seeded>) {
          return tweak_detail::generate(s.seed, s.address_width, s.periodicity, s.rank, s.unit_bits, {});
        } else {
          TweakTable t;
          t.constants = s.constants;
          t.address_width = s.address_width;
          t.periodicity = s.periodicity;
          t.validate();
          t.independent_rank = static_cast<unsigned>(gf2_rank(t.constants));
          return t;
        }
      },
      spec);
}

// ---------------------------------------------------------------------------
// Text form: "n=48\nperiodicity=4\nrank=28\nt4=<hex>\n..." (one constant per line)

inline std::string serialize_table(const TweakTable& table) {
  std::ostringstream os;
  os << "n=" << table.address_width << "\n"
     << "periodicity=" << table.periodicity << "\n"
     << "rank=" << table.independent_rank << "\n";
  for (std::size_t i = 0; i < table.constants.size(); ++i)
    os << "t" << (i + kFirstTweakBit) << "=" << to_hex(table.constants[i]) << "\n";
  return os.str();
}

inline TweakTable parse_table(const std::string& text) {
  TweakTable t;
  t.constants.clear();
  std::istringstream is(text);
  std::string line;
  bool have_rank = false;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("table line without '=': " + line);
    const std::string key = line.substr(0, eq);
    const std::string val = line.substr(eq + 1);
    try {
      if (key == "n") {
        t.address_width = static_cast<unsigned>(std::stoul(val));
      } else if (key == "periodicity") {
        t.periodicity = static_cast<unsigned>(std::stoul(val));
      } else if (key == "rank") {
        t.independent_rank = static_cast<unsigned>(std::stoul(val));
        have_rank = true;
      } else if (key.size() > 1 && key[0] == 't') {
        const auto idx = std::stoul(key.substr(1));
        if (idx != t.constants.size() + kFirstTweakBit) throw FormatError("constants out of order at " + key);
        t.constants.push_back(block_from_hex(val));
      } else {
        throw FormatError("unknown table key: " + key);
      }
    } catch (const std::invalid_argument&) {
      throw FormatError("malformed table value for " + key);
    } catch (const std::out_of_range&) {
      throw FormatError("table value out of range for " + key);
    }
  }
  t.validate();
  const auto rank = static_cast<unsigned>(gf2_rank(t.constants));
  if (have_rank && rank != t.independent_rank)
    throw ValidationError("declared rank " + std::to_string(t.independent_rank) + " but constants have rank " +
                          std::to_string(rank));
  t.independent_rank = rank;
  return t;
}

}  // namespace sevlab
