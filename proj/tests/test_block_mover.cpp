#include <gtest/gtest.h>

#include <memory>
#include <random>

#include "sevlab/block_mover.hpp"
#include "support.hpp"

using namespace sevlab;
using namespace sevlab::testing;

namespace {

constexpr PhysAddr kImageGpa = 0x100000;
constexpr std::size_t kImageSize = 8u << 20;
constexpr PhysAddr kDestGpa = 0x10000;

// A guest holding an 8 MiB random image at kImageGpa, backed by scattered host
// frames, plus one empty destination page.
struct World {
  std::unique_ptr<Machine> machine;
  Bytes image;
  std::shared_ptr<const Corpus> corpus;

  explicit World(TweakTable t, std::uint64_t seed = 21) {
    MachineConfig c;
    c.table = std::move(t);
    c.mode = CipherMode::XEX;
    c.key_seed = seed;
    machine = std::make_unique<Machine>(std::move(c));
    std::mt19937_64 rng(seed);
    image.resize(kImageSize);
    for (auto& b : image) b = static_cast<std::uint8_t>(rng());
    for (std::uint64_t k = 0; k < kImageSize / kPageSize; ++k)
      machine->map_gpa(page_of(kImageGpa) + k, 0x400000 + k * 37 + (rng() & 31));
    machine->map_gpa(page_of(kDestGpa), 0x9A5C3);
    machine->load_guest_image(kImageGpa, image);
    Corpus cp = build_corpus_from_guest(*machine, image, kImageGpa);
    capture_ciphertext(*machine, cp);
    corpus = std::make_shared<const Corpus>(std::move(cp));
  }
};

World& default_world() {
  static World w(make_tweak_table(table_spec::PaperDefault{21}));
  return w;
}

std::vector<ByteConstraint> random_pair(std::mt19937_64& rng) {
  return {{0, static_cast<std::uint8_t>(rng())}, {1, static_cast<std::uint8_t>(rng())}};
}

}  // namespace

TEST(BlockMover, ConstraintsAtConsecutiveOffsets) {
  const std::uint8_t v[3] = {0xEB, 0x1C, 0x90};
  const auto cs = constraints_at(14, v);
  ASSERT_EQ(cs.size(), 3u);
  EXPECT_EQ(cs[2], (ByteConstraint{16, 0x90}));
}

TEST(BlockMover, RelocateMovesPlaintextUpToTweakDelta) {
  MachineConfig c;
  c.key_seed = 3;
  Machine m(std::move(c));
  m.map_gpa(1, 0x10);
  m.map_gpa(2, 0x22);
  const Block msg = Block::repeat_unit(0x0BADF00D);
  m.load_guest_image(0x1040, msg.bytes);
  relocate_ciphertext(m, m.table(), 0x10040, 0x22080);
  const Block d = xor_of(naive_tweak(m.table().constants, 0x10040), naive_tweak(m.table().constants, 0x22080));
  EXPECT_EQ(m.guest_block_plaintext(0x2080), xor_of(msg, d));
  EXPECT_EQ(m.metrics().blocks_moved, 1u);
}

TEST(BlockMover, CorpusFromImageCountsBlocks) {
  const Bytes img(8u << 20, 0x11);
  EXPECT_EQ(build_corpus(img, 0x100000).size(), 524288u);
  const Bytes odd(40, 0x22);
  const Corpus c = build_corpus(odd, 0x2000);
  ASSERT_EQ(c.size(), 3u);
  EXPECT_EQ(c.entries[2].q, 0x2020u);
  EXPECT_EQ(c.entries[2].m[8], 0);
}

// 1,000 random 2-byte targets at offsets 0 and 1 against the 8 MiB corpus.
TEST(BlockMover, TwoByteInjectionIsReliableAndSound) {
  World& w = default_world();
  InjectionSearcher s(w.corpus, w.machine->table());
  std::mt19937_64 rng(99);
  int found = 0, sound = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto cs = random_pair(rng);
    const PhysAddr dest = kDestGpa + 16 * (rng() % 256);
    const InjectionResult r = s.find(cs, dest, FrameChoice::fixed(w.machine->npt_entry(page_of(dest)).hpa_frame));
    if (!r.found()) continue;
    ++found;
    apply_solution(*w.machine, w.machine->table(), *r.solution);
    const ReadResult back = w.machine->vm_read(dest, 16);
    ASSERT_TRUE(back.ok());
    sound += back.data[0] == cs[0].value && back.data[1] == cs[1].value && Block::from_span(back.data) == r.solution->r;
  }
  EXPECT_GE(found, 990);
  EXPECT_EQ(sound, found);
}

TEST(BlockMover, PeriodicTableLimitsControllableBytes) {
  World& w = default_world();
  InjectionSearcher s(w.corpus, w.machine->table());
  std::vector<ByteConstraint> five;
  for (std::uint8_t k = 0; k < 5; ++k) five.push_back({k, k});
  EXPECT_EQ(s.find(five, kDestGpa, FrameChoice::fixed(0x9A5C3)).status, InjectionStatus::OverConstrained);
  const std::vector<ByteConstraint> dup = {{3, 1}, {3, 2}};
  EXPECT_THROW(s.find(dup, kDestGpa, FrameChoice::fixed(0x9A5C3)), ValidationError);
}

TEST(BlockMover, RemapWidensTheSearch) {
  World& w = default_world();
  InjectionSearcher s(w.corpus, w.machine->table());
  std::mt19937_64 rng(5);
  int fixed = 0, remapped = 0;
  for (int trial = 0; trial < 40; ++trial) {
    std::vector<ByteConstraint> cs;
    for (std::uint8_t k = 0; k < 4; ++k) cs.push_back({k, static_cast<std::uint8_t>(rng())});
    fixed += s.find(cs, kDestGpa, FrameChoice::fixed(0x9A5C3)).found();
    FrameChoice fc{0x9A5C3, 0xFFFF, [](std::uint64_t f) { return f < 0x400000; }};
    const InjectionResult r = s.find(cs, kDestGpa, fc);
    if (!r.found()) continue;
    ++remapped;
    const Block predicted = xor_of(r.solution->m_prime,
                                   xor_of(naive_tweak(w.machine->table().constants, r.solution->q),
                                          naive_tweak(w.machine->table().constants, r.solution->p)));
    EXPECT_EQ(predicted, r.solution->r);
    for (const auto& c : cs) EXPECT_EQ(r.solution->r[c.offset], c.value);
  }
  EXPECT_GT(remapped, fixed);
  EXPECT_GE(remapped, 36);
}

TEST(BlockMover, RemapSolutionsApplyAndVerify) {
  World w(make_tweak_table(table_spec::PaperDefault{4}), 4);
  InjectionSearcher s(w.corpus, w.machine->table());
  std::mt19937_64 rng(6);
  int applied = 0;
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<ByteConstraint> cs;
    for (std::uint8_t k = 8; k < 11; ++k) cs.push_back({k, static_cast<std::uint8_t>(rng())});
    FrameChoice fc{0x9A5C3, 0xFF00, [](std::uint64_t f) { return f < 0x400000; }};
    const InjectionResult r = s.find(cs, kDestGpa, fc);
    if (!r.found()) continue;
    apply_solution(*w.machine, w.machine->table(), *r.solution);
    EXPECT_EQ(w.machine->translate(kDestGpa), r.solution->p);
    EXPECT_EQ(w.machine->guest_block_plaintext(kDestGpa), r.solution->r);
    ++applied;
  }
  EXPECT_GT(applied, 5);
}

TEST(BlockMover, ExcludedAndStaleSourcesAreNotUsed) {
  World& w = default_world();
  InjectionSearcher s(w.corpus, w.machine->table());
  const std::vector<ByteConstraint> cs = {{0, 0x31}, {1, 0xF6}};
  const auto first = s.find(cs, kDestGpa, FrameChoice::fixed(0x9A5C3));
  ASSERT_TRUE(first.found());
  s.exclude(first.solution->q);
  const auto second = s.find(cs, kDestGpa, FrameChoice::fixed(0x9A5C3));
  if (second.found()) {
    EXPECT_NE(second.solution->q, first.solution->q);
  }

  MoveSolution stale = *first.solution;
  stale.source_cipher[0] ^= 1;
  EXPECT_THROW(apply_solution(*w.machine, w.machine->table(), stale), StaleSolution);
}

TEST(BlockMover, OwnershipBlocksTheMove) {
  World& w = default_world();
  InjectionSearcher s(w.corpus, w.machine->table());
  const std::vector<ByteConstraint> cs = {{0, 0xC3}};
  const auto r = s.find(cs, kDestGpa, FrameChoice::fixed(0x9A5C3));
  ASSERT_TRUE(r.found());
  w.machine->flags().rmp_ownership = true;
  EXPECT_THROW(apply_solution(*w.machine, w.machine->table(), *r.solution), OwnershipViolation);
  w.machine->flags().rmp_ownership = false;
}

// Full-entropy tweaks redrawn per boot: solutions computed from an earlier
// boot's table land as garbage.
TEST(BlockMover, StaleTableSolutionsMismatchUnderFullEntropy) {
  const TweakTable truth = make_tweak_table(table_spec::Seeded{31, 16, 0, 48, 32});
  const TweakTable stale = make_tweak_table(table_spec::Seeded{32, 16, 0, 48, 32});
  World w(truth, 31);
  InjectionSearcher s(w.corpus, stale);
  std::mt19937_64 rng(7);
  int applied = 0, mismatched = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto cs = random_pair(rng);
    const PhysAddr dest = kDestGpa + 16 * (rng() % 256);
    const InjectionResult r = s.find(cs, dest, FrameChoice::fixed(0x9A5C3));
    if (!r.found()) continue;
    ++applied;
    apply_solution(*w.machine, stale, *r.solution);
    const Block seen = w.machine->guest_block_plaintext(dest);
    mismatched += seen[0] != cs[0].value || seen[1] != cs[1].value;
  }
  EXPECT_GE(applied, 990);
  EXPECT_GE(mismatched, applied - 1);
}
