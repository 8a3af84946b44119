#pragma once

// Reference values computed outside the library under test.

#include <openssl/evp.h>

#include <array>
#include <cstdint>
#include <random>
#include <stdexcept>

#include "sevlab/block.hpp"
#include "sevlab/cipher.hpp"
#include "sevlab/tweak.hpp"

namespace sevlab::testing {

inline Block openssl_aes(const Block& key, const Block& in, bool encrypt) {
  EVP_CIPHER_CTX* ctx = EVP_CIPHER_CTX_new();
  if (!ctx) throw std::runtime_error("EVP_CIPHER_CTX_new");
  Block out;
  int len = 0;
  const bool ok = EVP_CipherInit_ex(ctx, EVP_aes_128_ecb(), nullptr, key.bytes.data(), nullptr, encrypt ? 1 : 0) == 1 &&
                  EVP_CIPHER_CTX_set_padding(ctx, 0) == 1 &&
                  EVP_CipherUpdate(ctx, out.bytes.data(), &len, in.bytes.data(), 16) == 1 && len == 16;
  EVP_CIPHER_CTX_free(ctx);
  if (!ok) throw std::runtime_error("openssl aes failed");
  return out;
}

/// T(p) summed bit by bit straight from the constant list.
inline Block naive_tweak(const std::vector<Block>& constants, PhysAddr p) {
  Block t{};
  for (std::size_t i = 0; i < constants.size(); ++i)
    if ((p >> (i + 4)) & 1)
      for (int k = 0; k < 16; ++k) t.bytes[k] ^= constants[i].bytes[k];
  return t;
}

inline Block random_block(std::mt19937_64& rng) {
  Block b;
  for (auto& x : b.bytes) x = static_cast<std::uint8_t>(rng());
  return b;
}

inline Block xor_of(Block a, const Block& b) {
  for (int k = 0; k < 16; ++k) a.bytes[k] ^= b.bytes[k];
  return a;
}

// Ciphertext for m at p per the mode definitions, built on OpenSSL.
inline Block reference_encrypt(const Block& key, CipherMode mode, const TweakTable& t, const Block& m, PhysAddr p) {
  const Block tw = naive_tweak(t.constants, p);
  Block c = openssl_aes(key, xor_of(m, tw), true);
  return mode == CipherMode::XEX ? xor_of(c, tw) : c;
}

}  // namespace sevlab::testing
