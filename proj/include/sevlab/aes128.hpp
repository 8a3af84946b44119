#pragma once

// AES-128 block permutation (FIPS-197), table driven. Tables are generated at
// compile time from the field arithmetic rather than pasted in.

#include <array>
#include <cstdint>

#include "sevlab/block.hpp"

namespace sevlab {

namespace aes_detail {

constexpr std::uint8_t xtime(std::uint8_t x) {
  return static_cast<std::uint8_t>((x << 1) ^ ((x & 0x80) ? 0x1B : 0x00));
}

constexpr std::uint8_t gmul(std::uint8_t a, std::uint8_t b) {
  std::uint8_t r = 0;
  while (b) {
    if (b & 1) r ^= a;
    a = xtime(a);
    b >>= 1;
  }
  return r;
}

constexpr std::uint8_t rotl8(std::uint8_t x, int s) {
  return static_cast<std::uint8_t>((x << s) | (x >> (8 - s)));
}

constexpr std::array<std::uint8_t, 256> make_sbox() {
  std::array<std::uint8_t, 256> s{};
  // Walk the multiplicative group with generator 3; its inverse walks with 0xf6.
  std::uint8_t p = 1, q = 1;
  do {
    p = static_cast<std::uint8_t>(p ^ (p << 1) ^ ((p & 0x80) ? 0x1B : 0));
    q ^= static_cast<std::uint8_t>(q << 1);
    q ^= static_cast<std::uint8_t>(q << 2);
    q ^= static_cast<std::uint8_t>(q << 4);
    if (q & 0x80) q ^= 0x09;
    const std::uint8_t x = static_cast<std::uint8_t>(q ^ rotl8(q, 1) ^ rotl8(q, 2) ^ rotl8(q, 3) ^ rotl8(q, 4));
    s[p] = static_cast<std::uint8_t>(x ^ 0x63);
  } while (p != 1);
  s[0] = 0x63;
  return s;
}

constexpr std::array<std::uint8_t, 256> invert(const std::array<std::uint8_t, 256>& s) {
  std::array<std::uint8_t, 256> inv{};
  for (int i = 0; i < 256; ++i) inv[s[i]] = static_cast<std::uint8_t>(i);
  return inv;
}

inline constexpr auto kSbox = make_sbox();
inline constexpr auto kInvSbox = invert(kSbox);

constexpr std::uint32_t word(std::uint8_t a, std::uint8_t b, std::uint8_t c, std::uint8_t d) {
  return static_cast<std::uint32_t>(a) << 24 | static_cast<std::uint32_t>(b) << 16 |
         static_cast<std::uint32_t>(c) << 8 | d;
}

constexpr std::uint32_t ror8(std::uint32_t x) { return (x >> 8) | (x << 24); }

struct Tables {
  std::array<std::array<std::uint32_t, 256>, 4> te{};
  std::array<std::array<std::uint32_t, 256>, 4> td{};
};

constexpr Tables make_tables() {
  Tables t{};
  for (int i = 0; i < 256; ++i) {
    const std::uint8_t s = kSbox[i];
    const std::uint8_t si = kInvSbox[i];
    std::uint32_t e = word(gmul(s, 2), s, s, gmul(s, 3));
    std::uint32_t d = word(gmul(si, 14), gmul(si, 9), gmul(si, 13), gmul(si, 11));
    for (int r = 0; r < 4; ++r) {
      t.te[r][i] = e;
      t.td[r][i] = d;
      e = ror8(e);
      d = ror8(d);
    }
  }
  return t;
}

inline constexpr Tables kTables = make_tables();

constexpr std::uint32_t load_be(const std::uint8_t* p) { return word(p[0], p[1], p[2], p[3]); }

constexpr void store_be(std::uint8_t* p, std::uint32_t v) {
  p[0] = static_cast<std::uint8_t>(v >> 24);
  p[1] = static_cast<std::uint8_t>(v >> 16);
  p[2] = static_cast<std::uint8_t>(v >> 8);
  p[3] = static_cast<std::uint8_t>(v);
}

}  // namespace aes_detail

/// Keyed AES-128 permutation with expanded encryption and decryption schedules.
class Aes128 {
 public:
  Aes128() : Aes128(Block{}) {}

  explicit Aes128(const Block& key) {
    using namespace aes_detail;
    std::uint32_t* w = enc_.data();
    for (int i = 0; i < 4; ++i) w[i] = load_be(&key.bytes[4 * i]);
    std::uint8_t rcon = 1;
    for (int i = 4; i < 44; ++i) {
      std::uint32_t t = w[i - 1];
      if (i % 4 == 0) {
        t = (t << 8) | (t >> 24);
        t = word(kSbox[t >> 24], kSbox[(t >> 16) & 0xFF], kSbox[(t >> 8) & 0xFF], kSbox[t & 0xFF]);
        t ^= static_cast<std::uint32_t>(rcon) << 24;
        rcon = xtime(rcon);
      }
      w[i] = w[i - 4] ^ t;
    }
    // Equivalent inverse cipher: reversed round keys, InvMixColumns on rounds 1..9.
    for (int r = 0; r <= 10; ++r)
      for (int c = 0; c < 4; ++c) dec_[4 * r + c] = enc_[4 * (10 - r) + c];
    for (int i = 4; i < 40; ++i) {
      const std::uint32_t v = dec_[i];
      dec_[i] = kTables.td[0][kSbox[v >> 24]] ^ kTables.td[1][kSbox[(v >> 16) & 0xFF]] ^
                kTables.td[2][kSbox[(v >> 8) & 0xFF]] ^ kTables.td[3][kSbox[v & 0xFF]];
    }
  }

  Block encrypt(const Block& in) const {
    using namespace aes_detail;
    const auto& te = kTables.te;
    const std::uint32_t* rk = enc_.data();
    std::uint32_t s0 = load_be(&in.bytes[0]) ^ rk[0];
    std::uint32_t s1 = load_be(&in.bytes[4]) ^ rk[1];
    std::uint32_t s2 = load_be(&in.bytes[8]) ^ rk[2];
    std::uint32_t s3 = load_be(&in.bytes[12]) ^ rk[3];
    for (int r = 1; r < 10; ++r) {
      rk += 4;
      const std::uint32_t t0 = te[0][s0 >> 24] ^ te[1][(s1 >> 16) & 0xFF] ^ te[2][(s2 >> 8) & 0xFF] ^ te[3][s3 & 0xFF] ^ rk[0];
      const std::uint32_t t1 = te[0][s1 >> 24] ^ te[1][(s2 >> 16) & 0xFF] ^ te[2][(s3 >> 8) & 0xFF] ^ te[3][s0 & 0xFF] ^ rk[1];
      const std::uint32_t t2 = te[0][s2 >> 24] ^ te[1][(s3 >> 16) & 0xFF] ^ te[2][(s0 >> 8) & 0xFF] ^ te[3][s1 & 0xFF] ^ rk[2];
      const std::uint32_t t3 = te[0][s3 >> 24] ^ te[1][(s0 >> 16) & 0xFF] ^ te[2][(s1 >> 8) & 0xFF] ^ te[3][s2 & 0xFF] ^ rk[3];
      s0 = t0;
      s1 = t1;
      s2 = t2;
      s3 = t3;
    }
    rk += 4;
    Block out;
    store_be(&out.bytes[0], word(kSbox[s0 >> 24], kSbox[(s1 >> 16) & 0xFF], kSbox[(s2 >> 8) & 0xFF], kSbox[s3 & 0xFF]) ^ rk[0]);
    store_be(&out.bytes[4], word(kSbox[s1 >> 24], kSbox[(s2 >> 16) & 0xFF], kSbox[(s3 >> 8) & 0xFF], kSbox[s0 & 0xFF]) ^ rk[1]);
    store_be(&out.bytes[8], word(kSbox[s2 >> 24], kSbox[(s3 >> 16) & 0xFF], kSbox[(s0 >> 8) & 0xFF], kSbox[s1 & 0xFF]) ^ rk[2]);
    store_be(&out.bytes[12], word(kSbox[s3 >> 24], kSbox[(s0 >> 16) & 0xFF], kSbox[(s1 >> 8) & 0xFF], kSbox[s2 & 0xFF]) ^ rk[3]);
    return out;
  }

  Block decrypt(const Block& in) const {
    using namespace aes_detail;
    const auto& td = kTables.td;
    const std::uint32_t* rk = dec_.data();
    std::uint32_t s0 = load_be(&in.bytes[0]) ^ rk[0];
    std::uint32_t s1 = load_be(&in.bytes[4]) ^ rk[1];
    std::uint32_t s2 = load_be(&in.bytes[8]) ^ rk[2];
    std::uint32_t s3 = load_be(&in.bytes[12]) ^ rk[3];
    for (int r = 1; r < 10; ++r) {
      rk += 4;
      const std::uint32_t t0 = td[0][s0 >> 24] ^ td[1][(s3 >> 16) & 0xFF] ^ td[2][(s2 >> 8) & 0xFF] ^ td[3][s1 & 0xFF] ^ rk[0];
      const std::uint32_t t1 = td[0][s1 >> 24] ^ td[1][(s0 >> 16) & 0xFF] ^ td[2][(s3 >> 8) & 0xFF] ^ td[3][s2 & 0xFF] ^ rk[1];
      const std::uint32_t t2 = td[0][s2 >> 24] ^ td[1][(s1 >> 16) & 0xFF] ^ td[2][(s0 >> 8) & 0xFF] ^ td[3][s3 & 0xFF] ^ rk[2];
      const std::uint32_t t3 = td[0][s3 >> 24] ^ td[1][(s2 >> 16) & 0xFF] ^ td[2][(s1 >> 8) & 0xFF] ^ td[3][s0 & 0xFF] ^ rk[3];
      s0 = t0;
      s1 = t1;
      s2 = t2;
      s3 = t3;
    }
    rk += 4;
    Block out;
    store_be(&out.bytes[0], word(kInvSbox[s0 >> 24], kInvSbox[(s3 >> 16) & 0xFF], kInvSbox[(s2 >> 8) & 0xFF], kInvSbox[s1 & 0xFF]) ^ rk[0]);
    store_be(&out.bytes[4], word(kInvSbox[s1 >> 24], kInvSbox[(s0 >> 16) & 0xFF], kInvSbox[(s3 >> 8) & 0xFF], kInvSbox[s2 & 0xFF]) ^ rk[1]);
    store_be(&out.bytes[8], word(kInvSbox[s2 >> 24], kInvSbox[(s1 >> 16) & 0xFF], kInvSbox[(s0 >> 8) & 0xFF], kInvSbox[s3 & 0xFF]) ^ rk[2]);
    store_be(&out.bytes[12], word(kInvSbox[s3 >> 24], kInvSbox[(s2 >> 16) & 0xFF], kInvSbox[(s1 >> 8) & 0xFF], kInvSbox[s0 & 0xFF]) ^ rk[3]);
    return out;
  }

 private:
  std::array<std::uint32_t, 44> enc_{};
  std::array<std::uint32_t, 44> dec_{};
};

}  // namespace sevlab
