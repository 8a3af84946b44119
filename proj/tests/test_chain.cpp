#include <gtest/gtest.h>

#include <random>

#include "sevlab/chain.hpp"
#include "sevlab/vm.hpp"

using namespace sevlab;

namespace {

// Guest with four pages of random code bytes at 0x10000 and a stack page.
struct Bench {
  Machine m{MachineConfig{}};
  VMState vm;

  explicit Bench(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (std::uint64_t k = 0; k < 4; ++k) m.map_gpa(0x10 + k, 0x300 + k);
    m.map_gpa(0x20, 0x320);
    Bytes junk(4 * kPageSize);
    for (auto& b : junk) b = static_cast<std::uint8_t>(rng());
    m.load_guest_image(0x10000, junk);
    m.load_guest_image(0x20000, Bytes(kPageSize, 0));
    vm.regs[kStackReg] = 0x21000;
    vm.record_trace = true;
  }

  // Writes the constrained bytes only; everything else stays random.
  void place(const std::vector<PlanBlock>& blocks) {
    for (const auto& b : blocks)
      for (const auto& c : b.constraints) m.load_guest_image(b.dest + c.offset, std::span(&c.value, 1));
  }

  // Return address for the final RET: a HALT outside the chain area.
  void push_halt_return() {
    const std::uint8_t hlt = 0xF4;
    m.load_guest_image(0x20800, std::span(&hlt, 1));
    const std::uint64_t ret = 0x20800;
    vm.regs[kStackReg] -= 8;
    Bytes le(8);
    for (int i = 0; i < 8; ++i) le[i] = static_cast<std::uint8_t>(ret >> (8 * i));
    m.load_guest_image(vm.regs[kStackReg], le);
  }
};

std::vector<Instr> listing(const std::string& s) { return parse_listing(s); }

}  // namespace

TEST(Chain, SingleReturnNeedsOneBlock) {
  const auto plan = compile_chain(listing("ret"), 2, 0x10000);
  ASSERT_EQ(plan.blocks.size(), 1u);
  EXPECT_EQ(plan.blocks[0].constraints, (std::vector<ByteConstraint>{{0, 0xC3}}));
}

TEST(Chain, Width2LayoutAlternatesJumpsAndWindows) {
  const auto plan = compile_chain(listing("xor r6, r6\ninc r6\nshl1 r6\nret"), 2, 0x10000);
  // jmp, X, jmp, X, jmp, X, then RET at the fall-through block.
  ASSERT_EQ(plan.blocks.size(), 7u);
  EXPECT_EQ(plan.blocks[0].role, BlockRole::Jmp);
  EXPECT_EQ(plan.blocks[1].role, BlockRole::Payload);
  EXPECT_EQ(plan.blocks[1].constraints[0].offset, 14);
  EXPECT_EQ(plan.blocks[6].dest, 0x10060u);
  for (const auto& b : plan.blocks) EXPECT_LE(b.constraints.size(), 4u);
}

TEST(Chain, Width2PayloadExecutesSafely) {
  Bench b(1);
  const auto plan = compile_chain(listing("xor r6, r6\ninc r6\nshl1 r6\nret"), 2, 0x10000);
  b.place(plan.blocks);
  b.push_halt_return();
  b.vm.ip = plan.entry;
  const ExitEvent e = run_until_exit(b.m, b.vm);
  ASSERT_EQ(e.kind, ExitKind::Halt);
  EXPECT_EQ(e.halt_reason, HaltReason::Hlt);
  EXPECT_EQ(b.vm.regs[6], 2u);
  EXPECT_EQ(chain_violations(b.vm.trace, plan.controlled_addresses(), 0x10000, 0x14000), 0u);
}

TEST(Chain, Width4PayloadExecutesSafely) {
  Bench b(2);
  const auto plan = compile_chain(listing("xorq r6, r6\nincq r6\nshlk r6, 33\npush r6\npop r3\nhalt"), 4, 0x10100);
  b.place(plan.blocks);
  b.vm.ip = plan.entry;
  const ExitEvent e = run_until_exit(b.m, b.vm);
  ASSERT_EQ(e.halt_reason, HaltReason::Hlt);
  EXPECT_EQ(b.vm.regs[3], 1ULL << 33);
  EXPECT_EQ(chain_violations(b.vm.trace, plan.controlled_addresses(), 0x10000, 0x14000), 0u);
}

TEST(Chain, RejectsImpossiblePayloads) {
  EXPECT_THROW(compile_chain(listing("shlk r6, 3"), 2, 0x10000), EncodingError);
  EXPECT_THROW(compile_chain(listing("ret\ninc r1"), 2, 0x10000), EncodingError);
  EXPECT_THROW(compile_chain(listing("ret"), 3, 0x10000), ValidationError);
  EXPECT_THROW(compile_chain(listing("ret"), 2, 0x10008), AlignmentError);
}

TEST(Chain, ViolationCheckerCatchesUncontrolledBytes) {
  std::vector<TraceEntry> trace = {{0x10000, 2, Op::Jmp}, {0x1001E, 2, Op::Inc}, {0x30000, 1, Op::Nop}};
  std::set<PhysAddr> ok = {0x10000, 0x10001, 0x1001E};
  EXPECT_EQ(chain_violations(trace, ok, 0x10000, 0x11000), 1u);
  ok.insert(0x1001F);
  EXPECT_EQ(chain_violations(trace, ok, 0x10000, 0x11000), 0u);
}

TEST(LoopLayout, InterceptLoopCyclesThroughSync) {
  Bench b(3);
  LoopLayout loop{0x10FF0, true, 2};
  b.place(loop.fixed_blocks());
  b.place(loop.window_blocks(0, Bytes{0xFF, 0xC6}));  // inc r6
  b.place(loop.window_blocks(1, Bytes{0xD1, 0xE6}));  // shl1 r6
  b.vm.ip = loop.b0;
  for (int k = 0; k < 3; ++k) ASSERT_EQ(run_until_exit(b.m, b.vm).kind, ExitKind::Sync);
  // Rounds after the first: inc, shl.
  EXPECT_EQ(b.vm.regs[6], 6u);
  EXPECT_EQ(chain_violations(b.vm.trace, loop.controlled_addresses(), 0x10000, 0x14000), 0u);
  EXPECT_EQ(loop.page_one(), 0x10000u);
  EXPECT_EQ(loop.page_two(), 0x11000u);
}

TEST(LoopLayout, PageFaultLoopPingPongs) {
  Bench b(4);
  LoopLayout loop{0x10FF0, false, 4};
  b.place(loop.fixed_blocks());
  b.place(loop.window_blocks(0, Bytes{0x48, 0xFF, 0xC6, 0x90}));  // incq r6
  b.place(loop.window_blocks(1, Bytes{0x90, 0x90, 0x90, 0x90}));
  b.m.set_npt_perms(0x11, Perms{true, true, false});
  b.vm.ip = loop.b0;
  for (int k = 0; k < 4; ++k) {
    ExitEvent e = run_until_exit(b.m, b.vm);
    ASSERT_EQ(e.kind, ExitKind::Fault);
    ASSERT_EQ(e.fault.access, AccessKind::Fetch);
    const bool on_two = e.fault.gpa == 0x11000;
    b.m.set_npt_perms(0x11, on_two ? Perms::all() : Perms{true, true, false});
    b.m.set_npt_perms(0x10, on_two ? Perms{true, true, false} : Perms::all());
  }
  EXPECT_EQ(b.vm.regs[6], 2u);
  EXPECT_EQ(chain_violations(b.vm.trace, loop.controlled_addresses(), 0x10000, 0x14000), 0u);
}

TEST(LoopLayout, WindowOverflowRejected) {
  LoopLayout loop{0x10FF0, true, 2};
  EXPECT_THROW(loop.window_blocks(0, Bytes{1, 2, 3}), EncodingError);
}
