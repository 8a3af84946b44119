#include <gtest/gtest.h>

#include <random>

#include "sevlab/aes128.hpp"
#include "sevlab/block_mover.hpp"
#include "sevlab/cipher.hpp"
#include "sevlab/gf2.hpp"
#include "sevlab/tweak.hpp"
#include "support.hpp"

using namespace sevlab;
using namespace sevlab::testing;

TEST(Block, HexRoundTrip) {
  const Block b = block_from_hex("00 11 22 33 44 55 66 77 88 99 aa bb cc dd ee ff");
  EXPECT_EQ(to_hex(b), "00112233445566778899aabbccddeeff");
  EXPECT_EQ(block_from_hex(to_hex(b, true)), b);
  EXPECT_EQ(b[15], 0xff);
}

TEST(Block, RepeatUnitIsLittleEndian) {
  EXPECT_EQ(Block::repeat_unit(0x38382582), block_from_hex("82253838822538388225383882253838"));
}

TEST(Aes128, Fips197Vector) {
  const Block key = block_from_hex("000102030405060708090a0b0c0d0e0f");
  const Block pt = block_from_hex("00112233445566778899aabbccddeeff");
  const Aes128 aes(key);
  EXPECT_EQ(to_hex(aes.encrypt(pt)), "69c4e0d86a7b0430d8cdb78070b4c55a");
  EXPECT_EQ(aes.decrypt(aes.encrypt(pt)), pt);
}

TEST(Aes128, AgreesWithOpenSsl) {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 500; ++i) {
    const Block key = random_block(rng), m = random_block(rng);
    const Aes128 aes(key);
    ASSERT_EQ(aes.encrypt(m), openssl_aes(key, m, true));
    ASSERT_EQ(aes.decrypt(m), openssl_aes(key, m, false));
  }
}

TEST(Tweak, DefaultTableCarriesFixedLowConstants) {
  const TweakTable t = make_tweak_table(table_spec::PaperDefault{});
  EXPECT_EQ(to_hex(t.constant(4), true), "82 25 38 38 82 25 38 38 82 25 38 38 82 25 38 38");
  EXPECT_EQ(to_hex(t.constant(5), true), "ec 09 07 9c ec 09 07 9c ec 09 07 9c ec 09 07 9c");
  EXPECT_EQ(to_hex(t.constant(6), true), "40 00 00 18 40 00 00 18 40 00 00 18 40 00 00 18");
  EXPECT_EQ(t.constants.size(), 44u);
  EXPECT_EQ(gf2_rank(t.constants), 28u);
  for (const auto& c : t.constants) EXPECT_TRUE(has_period4(c));
}

TEST(Tweak, SeededTablesRespectShape) {
  const TweakTable full = make_tweak_table(table_spec::Seeded{3, 16, 0, 48, 32});
  EXPECT_EQ(gf2_rank(full.constants), 44u);
  EXPECT_FALSE(has_period4(full.constant(4)));
  const TweakTable toy = make_tweak_table(table_spec::Seeded{3, 4, 0, 20, 16});
  for (const auto& c : toy.constants) EXPECT_LT(c.unit(), 1u << 16);
  EXPECT_NE(make_tweak_table(table_spec::Seeded{4}), make_tweak_table(table_spec::Seeded{5}));
  EXPECT_EQ(make_tweak_table(table_spec::Seeded{4}), make_tweak_table(table_spec::Seeded{4}));
}

TEST(Tweak, ValueMatchesBitwiseSum) {
  const TweakTable t = make_tweak_table(table_spec::PaperDefault{9});
  std::mt19937_64 rng(1);
  for (int i = 0; i < 1000; ++i) {
    const PhysAddr p = rng() & ((1ULL << 48) - 1) & ~0xFULL;
    const PhysAddr q = rng() & ((1ULL << 48) - 1) & ~0xFULL;
    ASSERT_EQ(tweak_value(t, p), naive_tweak(t.constants, p));
    ASSERT_EQ(tweak_delta(t, p, q), xor_of(naive_tweak(t.constants, p), naive_tweak(t.constants, q)));
  }
  EXPECT_TRUE(tweak_value(t, 0xF).is_zero());
}

TEST(Tweak, SerializeRoundTrip) {
  const TweakTable t = make_tweak_table(table_spec::PaperDefault{2, 24});
  EXPECT_EQ(parse_table(serialize_table(t)), t);
  EXPECT_THROW(parse_table("n=8\nperiodicity=4\nrank=4\nt4=00\n"), Error);
}

TEST(Tweak, RejectsBrokenTables) {
  TweakTable t = make_tweak_table(table_spec::PaperDefault{});
  t.constants.pop_back();
  EXPECT_THROW(t.validate(), ValidationError);
  TweakTable u = make_tweak_table(table_spec::PaperDefault{});
  u.constants[3][5] ^= 1;
  EXPECT_THROW(u.validate(), ValidationError);
}

namespace {

class CipherModes : public ::testing::TestWithParam<CipherMode> {};

}  // namespace

TEST_P(CipherModes, MatchesReferenceAndRoundTrips) {
  const CipherMode mode = GetParam();
  const TweakTable t = make_tweak_table(table_spec::PaperDefault{});
  std::mt19937_64 rng(11);
  const CipherKey key{random_block(rng), 1};
  for (int i = 0; i < 2000; ++i) {
    const Block m = random_block(rng);
    const PhysAddr p = rng() & ((1ULL << 48) - 1) & ~0xFULL;
    const Block c = encrypt_block(key, mode, t, m, p);
    ASSERT_EQ(c, reference_encrypt(key.key, mode, t, m, p));
    ASSERT_EQ(decrypt_block(key, mode, t, c, p), m);
  }
}

TEST_P(CipherModes, RelocationLaw) {
  const CipherMode mode = GetParam();
  const TweakTable t = make_tweak_table(table_spec::PaperDefault{});
  std::mt19937_64 rng(12);
  const CipherKey key{random_block(rng), 1};
  for (int i = 0; i < 2000; ++i) {
    const Block m = random_block(rng);
    const PhysAddr p = rng() & ((1ULL << 48) - 1) & ~0xFULL;
    const PhysAddr q = rng() & ((1ULL << 48) - 1) & ~0xFULL;
    const Block c = encrypt_block(key, mode, t, m, p);
    const Block seen = decrypt_block(key, mode, t, relocated_cipher(mode, t, c, p, q), q);
    const Block d = xor_of(naive_tweak(t.constants, p), naive_tweak(t.constants, q));
    // XE leaves the tweak difference on the plaintext; XEX's extra XOR leaves it too.
    ASSERT_EQ(seen, xor_of(m, d));
    if (mode == CipherMode::XE) {
      ASSERT_EQ(decrypt_block(key, mode, t, c, q), xor_of(m, d));
    }
  }
}

INSTANTIATE_TEST_SUITE_P(Both, CipherModes, ::testing::Values(CipherMode::XE, CipherMode::XEX),
                         [](const auto& info) { return std::string(to_string(info.param)); });

TEST(Cipher, RejectsMisalignedAddress) {
  const TweakTable t = make_tweak_table(table_spec::PaperDefault{});
  EXPECT_THROW(encrypt_block(CipherKey{}, CipherMode::XE, t, Block{}, 0x1008), AlignmentError);
}

TEST(Cipher, ModeNames) {
  EXPECT_EQ(parse_mode("xe"), CipherMode::XE);
  EXPECT_EQ(parse_mode("xex"), CipherMode::XEX);
  EXPECT_THROW(parse_mode("xts"), ValidationError);
}

TEST(Gf2, SolvesRandomFullRankSystems) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const unsigned n = 1 + rng() % 40;
    std::vector<Block> x(n);
    for (auto& v : x) v = random_block(rng);
    Gf2System sys{n, {}};
    for (unsigned k = 0; k < n; ++k) sys.rows.push_back({1ULL << k, x[k]});
    for (int extra = 0; extra < 10; ++extra) {
      const std::uint64_t mask = rng() & ((n == 64 ? 0 : (1ULL << n)) - 1);
      Block rhs{};
      for (unsigned k = 0; k < n; ++k)
        if ((mask >> k) & 1) rhs ^= x[k];
      sys.rows.push_back({mask, rhs});
    }
    std::shuffle(sys.rows.begin(), sys.rows.end(), rng);
    const Gf2Solution s = solve_gf2(sys);
    ASSERT_TRUE(s.unique());
    ASSERT_EQ(s.rank, n);
    for (unsigned k = 0; k < n; ++k) ASSERT_EQ(*s.values[k], x[k]);
  }
}

TEST(Gf2, ReportsFreeUnknownsAndInconsistency) {
  const Block a = Block::repeat_unit(1), b = Block::repeat_unit(2);
  Gf2System under{3, {{0b011, a}, {0b100, b}}};
  const Gf2Solution s = solve_gf2(under);
  EXPECT_FALSE(s.unique());
  EXPECT_EQ(s.rank, 2u);
  EXPECT_EQ(*s.values[2], b);
  EXPECT_FALSE(s.values[0].has_value() && s.values[1].has_value());

  Gf2System bad{2, {{0b01, a}, {0b10, b}, {0b11, a}}};
  EXPECT_THROW(solve_gf2(bad), InconsistentSystem);
}

TEST(Gf2, SpanExpressesCombinations) {
  Gf2Span span;
  const Block u = Block::repeat_unit(0x11), v = Block::repeat_unit(0x2200), w = Block::repeat_unit(0x11 ^ 0x2200);
  EXPECT_TRUE(span.add(u, 1));
  EXPECT_TRUE(span.add(v, 2));
  EXPECT_FALSE(span.add(w, 4));
  EXPECT_EQ(span.express(w), 3u);
  EXPECT_FALSE(span.express(Block::repeat_unit(0x40000)).has_value());
}
