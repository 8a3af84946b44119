#include <gtest/gtest.h>

#include <random>

#include "sevlab/recovery.hpp"
#include "support.hpp"

using namespace sevlab;
using namespace sevlab::testing;

namespace {

Machine machine_with(TweakTable t, CipherMode mode) {
  MachineConfig c;
  c.table = std::move(t);
  c.mode = mode;
  c.key_seed = 77;
  Machine m(std::move(c));
  m.map_gpa(1, 1);
  return m;
}

}  // namespace

TEST(XeRecovery, ReadsOffFixedLowConstantsAtN20) {
  Machine m = machine_with(make_tweak_table(table_spec::PaperDefault{1, 20}), CipherMode::XE);
  const TableRecovery r = recover_table(m, CipherMode::XE, 0x1000, 1);
  ASSERT_FALSE(r.inconsistent) << r.message;
  EXPECT_TRUE(r.unrecoverable.empty());
  EXPECT_EQ(to_hex(r.table.constant(4), true), "82 25 38 38 82 25 38 38 82 25 38 38 82 25 38 38");
  EXPECT_EQ(to_hex(r.table.constant(5), true), "ec 09 07 9c ec 09 07 9c ec 09 07 9c ec 09 07 9c");
  EXPECT_EQ(to_hex(r.table.constant(6), true), "40 00 00 18 40 00 00 18 40 00 00 18 40 00 00 18");
  EXPECT_EQ(r.table.constants, m.table().constants);
  EXPECT_EQ(r.provenance.at(7), Provenance::ReadOff);
}

TEST(XeRecovery, FullWidthDefaultMachine) {
  Machine m = machine_with(make_tweak_table(table_spec::PaperDefault{5}), CipherMode::XE);
  const TableRecovery r = recover_table(m, CipherMode::XE, 0x1000, 2);
  EXPECT_EQ(r.table.constants, m.table().constants);
  EXPECT_EQ(r.table.independent_rank, 28u);
}

TEST(XeRecovery, EliminationOverRandomDestinations) {
  Machine m = machine_with(make_tweak_table(table_spec::PaperDefault{3, 20}), CipherMode::XE);
  const PlaintextProbe probe = place_probe(m, 0x1000, Block::repeat_unit(0x5EED));
  std::mt19937_64 rng(4);
  std::vector<PhysAddr> dests;
  for (int k = 0; k < 40; ++k) dests.push_back(rng() & 0xFFFF0);
  const XeRecovery r = recover_xe_constants(m, probe, {4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15}, dests);
  ASSERT_TRUE(r.complete());
  for (const auto& [bit, v] : r.constants) {
    EXPECT_EQ(v, m.table().constant(bit)) << bit;
    EXPECT_EQ(r.provenance.at(bit), Provenance::Solved);
  }
}

TEST(XeRecovery, DetectsWrongModeAssumption) {
  Machine m = machine_with(make_tweak_table(table_spec::PaperDefault{1, 20}), CipherMode::XEX);
  const TableRecovery r = recover_table(m, CipherMode::XE, 0x1000, 1);
  EXPECT_TRUE(r.inconsistent);
}

TEST(XexRecovery, ToyUnitsRecoveredExactly) {
  Machine m = machine_with(make_tweak_table(table_spec::Seeded{8, 4, 0, 20, 16}), CipherMode::XEX);
  const TableRecovery r = recover_table(m, CipherMode::XEX, 0x1000, 3, 16, 1);
  EXPECT_TRUE(r.unrecoverable.empty()) << r.message;
  EXPECT_EQ(r.table.constants, m.table().constants);
  EXPECT_EQ(r.provenance.at(4), Provenance::BruteForced);
}

TEST(XexRecovery, PartitionsAgreeWithSingleJob) {
  Machine a = machine_with(make_tweak_table(table_spec::Seeded{9, 4, 0, 16, 16}), CipherMode::XEX);
  Machine b = machine_with(make_tweak_table(table_spec::Seeded{9, 4, 0, 16, 16}), CipherMode::XEX);
  const TableRecovery one = recover_table(a, CipherMode::XEX, 0x1000, 3, 16, 1);
  const TableRecovery four = recover_table(b, CipherMode::XEX, 0x1000, 3, 16, 4);
  EXPECT_EQ(one.table.constants, a.table().constants);
  EXPECT_EQ(four.table.constants, one.table.constants);
}

TEST(XexRecovery, SearchCountsAndRangeSlices) {
  Machine m = machine_with(make_tweak_table(table_spec::Seeded{10, 4, 0, 16, 12}), CipherMode::XEX);
  const std::vector<PlaintextProbe> probes = {place_probe(m, 0x1000, Block::repeat_unit(1))};
  const std::uint32_t truth = m.table().constant(6).unit();
  const XexResult hit = recover_xex_constant(m, probes, 6, XexSearch{12, 0, 0}, false);
  EXPECT_EQ(hit.status, SearchStatus::Found);
  EXPECT_EQ(hit.matches.front(), truth);
  EXPECT_EQ(hit.candidates_tried, 1u << 12);
  const XexResult miss = recover_xex_constant(m, probes, 6, XexSearch{12, truth + 1, 0}, false);
  EXPECT_EQ(miss.status, SearchStatus::NotFound);
  // The probe block is restored afterwards.
  EXPECT_EQ(m.guest_block_plaintext(0x1000), Block::repeat_unit(1));
}

TEST(XexRecovery, FullEntropyConstantsAreOutOfReach) {
  Machine m = machine_with(make_tweak_table(table_spec::Seeded{11, 16, 0, 20, 32}), CipherMode::XEX);
  const TableRecovery r = recover_table(m, CipherMode::XEX, 0x1000, 3, 16, 1);
  EXPECT_EQ(r.unrecoverable.size(), 16u);
  EXPECT_FALSE(r.message.empty());
}

TEST(DeltaIndex, MatchesTweakValue) {
  const TweakTable t = make_tweak_table(table_spec::PaperDefault{12});
  std::vector<std::uint64_t> frames = {0x10, 0x1234, 0xABCDE};
  const DeltaIndex idx = precompute_tweak_deltas(t, frames);
  std::mt19937_64 rng(1);
  for (int i = 0; i < 300; ++i) {
    const PhysAddr p = (frames[i % 3] << 12) | ((rng() & 0xFF) << 4);
    const PhysAddr q = (frames[(i + 1) % 3] << 12) | ((rng() & 0xFF) << 4);
    ASSERT_EQ(idx.tweak(p), naive_tweak(t.constants, p));
    ASSERT_EQ(idx.delta(p, q), xor_of(naive_tweak(t.constants, p), naive_tweak(t.constants, q)));
  }
}
