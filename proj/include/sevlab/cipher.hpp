#pragma once

#include <concepts>
#include <cstdint>
#include <string>
#include <string_view>

#include "sevlab/aes128.hpp"
#include "sevlab/block.hpp"
#include "sevlab/errors.hpp"
#include "sevlab/tweak.hpp"

namespace sevlab {

enum class CipherMode : std::uint8_t { XE = 0, XEX = 1 };

inline std::string_view to_string(CipherMode m) { return m == CipherMode::XE ? "xe" : "xex"; }

inline CipherMode parse_mode(std::string_view s) {
  if (s == "xe" || s == "XE") return CipherMode::XE;
  if (s == "xex" || s == "XEX") return CipherMode::XEX;
  throw ValidationError("unknown cipher mode: " + std::string(s));
}

/// Key owner: the hypervisor or a VM id.
using OwnerId = std::uint32_t;
inline constexpr OwnerId kHypervisor = 0;

struct CipherKey {
  Block key{};
  OwnerId owner = kHypervisor;
};

/// Any keyed 128-bit permutation with an inverse.
template <class P>
concept BlockPermutation = requires(const P& p, const Block& b) {
  { p.encrypt(b) } -> std::convertible_to<Block>;
  { p.decrypt(b) } -> std::convertible_to<Block>;
};

inline void require_block_aligned(PhysAddr p) {
  if (!block_aligned(p)) throw AlignmentError("address is not 16-byte aligned");
}

/// XE: E(m ^ T(p)).  XEX: E(m ^ T(p)) ^ T(p).
template <BlockPermutation P>
Block encrypt_block(const P& perm, CipherMode mode, const TweakTable& table, const Block& m, PhysAddr p) {
  require_block_aligned(p);
  const Block t = tweak_value(table, p);
  Block c = perm.encrypt(m ^ t);
  if (mode == CipherMode::XEX) c ^= t;
  return c;
}

template <BlockPermutation P>
Block decrypt_block(const P& perm, CipherMode mode, const TweakTable& table, const Block& c, PhysAddr p) {
  require_block_aligned(p);
  const Block t = tweak_value(table, p);
  return perm.decrypt(mode == CipherMode::XEX ? c ^ t : c) ^ t;
}

inline Block encrypt_block(const CipherKey& key, CipherMode mode, const TweakTable& table, const Block& m, PhysAddr p) {
  return encrypt_block(Aes128(key.key), mode, table, m, p);
}

inline Block decrypt_block(const CipherKey& key, CipherMode mode, const TweakTable& table, const Block& c, PhysAddr p) {
  return decrypt_block(Aes128(key.key), mode, table, c, p);
}

}  // namespace sevlab
