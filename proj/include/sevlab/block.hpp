#pragma once

#include <array>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace sevlab {

using Bytes = std::vector<std::uint8_t>;

// Physical addresses. Guest-physical and host-physical share a representation;
// names carry the distinction (gpa / hpa).
using PhysAddr = std::uint64_t;

inline constexpr std::size_t kBlockSize = 16;
inline constexpr std::size_t kPageSize = 4096;
inline constexpr std::size_t kBlocksPerPage = kPageSize / kBlockSize;
inline constexpr unsigned kPageShift = 12;

constexpr std::uint64_t page_of(PhysAddr a) { return a >> kPageShift; }
constexpr PhysAddr page_base(PhysAddr a) { return a & ~static_cast<PhysAddr>(kPageSize - 1); }
constexpr std::uint64_t page_offset(PhysAddr a) { return a & (kPageSize - 1); }
constexpr bool block_aligned(PhysAddr a) { return (a & (kBlockSize - 1)) == 0; }
constexpr PhysAddr block_floor(PhysAddr a) { return a & ~static_cast<PhysAddr>(kBlockSize - 1); }

/// A 16-byte cipher block. Also used for 128-bit tweak values.
struct Block {
  std::array<std::uint8_t, kBlockSize> bytes{};

  constexpr std::uint8_t& operator[](std::size_t i) { return bytes[i]; }
  constexpr std::uint8_t operator[](std::size_t i) const { return bytes[i]; }

  constexpr Block& operator^=(const Block& o) {
    for (std::size_t i = 0; i < kBlockSize; ++i) bytes[i] ^= o.bytes[i];
    return *this;
  }
  friend constexpr Block operator^(Block a, const Block& b) { return a ^= b; }
  constexpr Block& operator&=(const Block& o) {
    for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] &= o.bytes[i];
    return *this;
  }
  friend constexpr Block operator&(Block a, const Block& b) { return a &= b; }
  friend constexpr bool operator==(const Block&, const Block&) = default;

  constexpr bool is_zero() const {
    for (auto b : bytes)
      if (b) return false;
    return true;
  }

  // Little-endian 64-bit halves (bytes 0..7 and 8..15).
  constexpr std::uint64_t lo() const { return load_le64(0); }
  constexpr std::uint64_t hi() const { return load_le64(8); }

  static constexpr Block from_halves(std::uint64_t lo, std::uint64_t hi) {
    Block b;
    for (int i = 0; i < 8; ++i) {
      b.bytes[i] = static_cast<std::uint8_t>(lo >> (8 * i));
      b.bytes[8 + i] = static_cast<std::uint8_t>(hi >> (8 * i));
    }
    return b;
  }

  /// Repeats a 4-byte unit (little-endian u32) across the block.
  static constexpr Block repeat_unit(std::uint32_t unit) {
    Block b;
    for (std::size_t i = 0; i < kBlockSize; ++i) b.bytes[i] = static_cast<std::uint8_t>(unit >> (8 * (i % 4)));
    return b;
  }

  /// First four bytes as a little-endian u32.
  constexpr std::uint32_t unit() const {
    return static_cast<std::uint32_t>(bytes[0]) | static_cast<std::uint32_t>(bytes[1]) << 8 |
           static_cast<std::uint32_t>(bytes[2]) << 16 | static_cast<std::uint32_t>(bytes[3]) << 24;
  }

  constexpr int popcount() const {
    int n = 0;
    for (auto b : bytes) n += std::popcount(static_cast<unsigned>(b));
    return n;
  }

  constexpr bool bit(unsigned i) const { return (bytes[i / 8] >> (i % 8)) & 1U; }
  constexpr void flip_bit(unsigned i) { bytes[i / 8] ^= static_cast<std::uint8_t>(1U << (i % 8)); }

  static Block from_span(std::span<const std::uint8_t> s) {
    if (s.size() != kBlockSize) throw std::invalid_argument("block must be 16 bytes");
    Block b;
    for (std::size_t i = 0; i < kBlockSize; ++i) b.bytes[i] = s[i];
    return b;
  }

 private:
  constexpr std::uint64_t load_le64(std::size_t off) const {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | bytes[off + static_cast<std::size_t>(i)];
    return v;
  }
};

inline std::string to_hex(std::span<const std::uint8_t> data, bool spaced = false) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out;
  out.reserve(data.size() * 3);
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (spaced && i) out.push_back(' ');
    out.push_back(kDigits[data[i] >> 4]);
    out.push_back(kDigits[data[i] & 0xF]);
  }
  return out;
}

inline std::string to_hex(const Block& b, bool spaced = false) { return to_hex(std::span<const std::uint8_t>(b.bytes), spaced); }

inline Bytes bytes_from_hex(std::string_view hex) {
  Bytes out;
  int nibble = -1;
  for (char c : hex) {
    int v;
    if (c >= '0' && c <= '9') v = c - '0';
    else if (c >= 'a' && c <= 'f') v = c - 'a' + 10;
    else if (c >= 'A' && c <= 'F') v = c - 'A' + 10;
    else if (c == ' ' || c == ':' || c == '_') continue;
    else throw std::invalid_argument("bad hex digit in '" + std::string(hex) + "'");
    if (nibble < 0) {
      nibble = v;
    } else {
      out.push_back(static_cast<std::uint8_t>(nibble << 4 | v));
      nibble = -1;
    }
  }
  if (nibble >= 0) throw std::invalid_argument("odd number of hex digits");
  return out;
}

inline Block block_from_hex(std::string_view hex) { return Block::from_span(bytes_from_hex(hex)); }

}  // namespace sevlab
