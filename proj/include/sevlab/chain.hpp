#pragma once

// Gadget chains: payload windows linked by short jumps so that uncontrolled
// bytes are never fetched.
//
// Width 2:  [jmp +28 @0] -> next block [payload @14..15] -> next block [jmp @0] ...
// Width 4:  [jmp +28 @0] -> X [payload 0..1 @14..15] Y [payload 2..3 @0..1, jmp +26 @2..3] -> X' ...
//
// X blocks carry two controlled bytes and come from the block mover; Y blocks
// carry four and come from the 4-byte oracle.

#include <algorithm>
#include <cstdint>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "sevlab/block_mover.hpp"
#include "sevlab/errors.hpp"
#include "sevlab/isa.hpp"
#include "sevlab/vm.hpp"

namespace sevlab {

enum class BlockRole : std::uint8_t { Jmp, Payload, PayloadJmp };

inline const char* to_string(BlockRole r) {
  switch (r) {
    case BlockRole::Jmp: return "jmp";
    case BlockRole::Payload: return "payload";
    case BlockRole::PayloadJmp: return "payload+jmp";
  }
  return "?";
}

struct PlanBlock {
  PhysAddr dest = 0;
  std::vector<ByteConstraint> constraints;
  BlockRole role = BlockRole::Jmp;
};

struct BlockPlan {
  std::vector<PlanBlock> blocks;
  PhysAddr entry = 0;
  PhysAddr exit = 0;  // where execution continues after the last payload window

  bool empty() const { return blocks.empty(); }

  std::set<PhysAddr> controlled_addresses() const {
    std::set<PhysAddr> out;
    for (const auto& b : blocks)
      for (const auto& c : b.constraints) out.insert(b.dest + c.offset);
    return out;
  }
};

inline constexpr std::uint8_t kJmpOp = 0xEB;
inline constexpr std::uint8_t kNop = 0x90;
inline constexpr std::int8_t kJmpToNextWindow = 28;   // from @0..1 to next block @14
inline constexpr std::int8_t kJmpFromYToNextX = 26;   // from @2..3 to next block @14

namespace chain_detail {

inline bool is_terminal(Op op) { return op == Op::Ret || op == Op::Halt || op == Op::Jmp; }

/// Greedy packing of instructions into windows of at most `width` bytes.
inline std::vector<Bytes> pack(std::span<const Instr> payload, unsigned width, bool& terminal_last) {
  std::vector<Bytes> windows;
  Bytes cur;
  terminal_last = false;
  for (std::size_t k = 0; k < payload.size(); ++k) {
    const Instr& in = payload[k];
    const unsigned w = instr_width(in);
    if (w > width)
      throw EncodingError("instruction '" + to_string(in) + "' is " + std::to_string(w) + " bytes; window holds " +
                          std::to_string(width));
    const bool last = k + 1 == payload.size();
    if ((is_jump(in.op) || in.op == Op::Ret || in.op == Op::Halt) && !last)
      throw EncodingError("control transfer '" + to_string(in) + "' must be the last payload instruction");
    if (last && is_terminal(in.op) && w <= 2) {
      if (!cur.empty()) windows.push_back(cur);
      windows.push_back(encode(in));
      terminal_last = true;
      return windows;
    }
    if (cur.size() + w > width) {
      windows.push_back(cur);
      cur.clear();
    }
    encode(in, cur);
  }
  if (!cur.empty()) windows.push_back(cur);
  return windows;
}

inline void pad(Bytes& w, unsigned width) {
  while (w.size() < width) w.push_back(kNop);
}

}  // namespace chain_detail

/// Lays out payload starting at the block-aligned entry `start`. A final
/// ret/halt/jmp of at most two bytes occupies the closing jump window instead
/// of a payload window.
inline BlockPlan compile_chain(std::span<const Instr> payload, unsigned width, PhysAddr start) {
  using namespace chain_detail;
  require_block_aligned(start);
  if (width != 2 && width != 4) throw ValidationError("payload width must be 2 or 4");
  BlockPlan plan;
  plan.entry = start;
  plan.exit = start;
  if (payload.empty()) return plan;
  bool terminal_last = false;
  std::vector<Bytes> windows = pack(payload, width, terminal_last);
  Bytes terminal;
  if (terminal_last) {
    terminal = windows.back();
    windows.pop_back();
  }

  PhysAddr cur = start;
  if (!windows.empty()) {
    plan.blocks.push_back({cur, constraints_at(0, std::array<std::uint8_t, 2>{kJmpOp, kJmpToNextWindow}), BlockRole::Jmp});
    cur += kBlockSize;
    for (std::size_t k = 0; k < windows.size(); ++k) {
      Bytes w = windows[k];
      pad(w, width);
      plan.blocks.push_back({cur, constraints_at(14, std::span<const std::uint8_t>(w.data(), 2)), BlockRole::Payload});
      cur += kBlockSize;
      if (width == 2) {
        if (k + 1 < windows.size()) {
          plan.blocks.push_back(
              {cur, constraints_at(0, std::array<std::uint8_t, 2>{kJmpOp, kJmpToNextWindow}), BlockRole::Jmp});
          cur += kBlockSize;
        }
      } else {
        const std::array<std::uint8_t, 4> y{w[2], w[3], kJmpOp, kJmpFromYToNextX};
        plan.blocks.push_back({cur, constraints_at(0, y), BlockRole::PayloadJmp});
        cur += kBlockSize;
      }
    }
    // Width 2 falls through into the next block's offset 0; width 4's last Y
    // jumps to the next block's offset 14.
    plan.exit = width == 2 ? cur : cur + 14;
  }
  if (!terminal.empty()) {
    const unsigned off = static_cast<unsigned>(plan.exit - block_floor(plan.exit));
    plan.blocks.push_back({block_floor(plan.exit), constraints_at(off, terminal), BlockRole::Jmp});
  }
  return plan;
}

// ---------------------------------------------------------------------------
// Looping layout used by the oracles

/// A hook block b0 followed by windows; the last window jumps back to b0.
/// With a sync window (intercept driver) the windows are SYNC, A, B; without
/// (page-fault driver) they are A, B and b0 must be the last block of its page.
struct LoopLayout {
  PhysAddr b0 = 0;
  bool sync_window = true;
  unsigned width = 2;  // of the A and B windows; the sync window is always 2

  unsigned windows() const { return sync_window ? 3 : 2; }
  unsigned first_payload() const { return sync_window ? 1 : 0; }
  PhysAddr x(unsigned w) const { return b0 + kBlockSize * (1 + 2 * w); }
  PhysAddr j(unsigned w) const { return x(w) + kBlockSize; }
  PhysAddr end() const { return j(windows() - 1) + kBlockSize; }
  PhysAddr page_one() const { return page_base(b0); }
  PhysAddr page_two() const { return page_base(x(0)); }

  std::int32_t back_disp() const {
    const PhysAddr last = j(windows() - 1);
    const PhysAddr next_ip = last + (width == 4 ? 4 : 2);
    return static_cast<std::int32_t>(b0) - static_cast<std::int32_t>(next_ip);
  }

  static std::vector<ByteConstraint> jmp_block(std::int32_t disp, unsigned at = 0) {
    if (disp < -128 || disp > 127) throw EncodingError("loop jump out of rel8 range");
    return constraints_at(at, std::array<std::uint8_t, 2>{kJmpOp, static_cast<std::uint8_t>(static_cast<std::int8_t>(disp))});
  }

  /// Blocks of the skeleton whose contents never change: b0 and the sync window.
  std::vector<PlanBlock> fixed_blocks() const {
    std::vector<PlanBlock> out;
    out.push_back({b0, jmp_block(kJmpToNextWindow), BlockRole::Jmp});
    if (sync_window) {
      out.push_back({x(0), constraints_at(14, encode(ins::sync())), BlockRole::Payload});
      out.push_back({j(0), jmp_block(kJmpToNextWindow), BlockRole::Jmp});
    }
    return out;
  }

  /// Blocks for payload window w (index among A=0, B=1) holding `bytes`.
  std::vector<PlanBlock> window_blocks(unsigned which, Bytes bytes) const {
    chain_detail::pad(bytes, width);
    if (bytes.size() != width) throw EncodingError("window content exceeds the window width");
    const unsigned w = first_payload() + which;
    const bool last = w + 1 == windows();
    std::vector<PlanBlock> out;
    out.push_back({x(w), constraints_at(14, std::span<const std::uint8_t>(bytes.data(), 2)), BlockRole::Payload});
    if (width == 2) {
      out.push_back({j(w), jmp_block(last ? back_disp() : kJmpToNextWindow), BlockRole::Jmp});
    } else {
      auto c = constraints_at(0, std::span<const std::uint8_t>(bytes.data() + 2, 2));
      for (auto jc : jmp_block(last ? back_disp() : kJmpFromYToNextX, 2)) c.push_back(jc);
      out.push_back({j(w), c, BlockRole::PayloadJmp});
    }
    return out;
  }

  /// All controllable byte addresses of the loop at the current width.
  std::set<PhysAddr> controlled_addresses() const {
    std::set<PhysAddr> out;
    auto add = [&](const std::vector<PlanBlock>& bs) {
      for (const auto& b : bs)
        for (const auto& c : b.constraints) out.insert(b.dest + c.offset);
    };
    add(fixed_blocks());
    add(window_blocks(0, Bytes(width, kNop)));
    add(window_blocks(1, Bytes(width, kNop)));
    return out;
  }
};

/// Chain safety: every instruction byte fetched inside [lo, hi) must be a
/// controlled byte. Returns the number of violating instructions.
inline std::size_t chain_violations(const std::vector<TraceEntry>& trace, const std::set<PhysAddr>& controlled,
                                    PhysAddr lo, PhysAddr hi) {
  std::size_t bad = 0;
  for (const auto& t : trace) {
    bool inside = false, ok = true;
    for (unsigned k = 0; k < t.len; ++k) {
      const PhysAddr a = t.ip + k;
      if (a < lo || a >= hi) continue;
      inside = true;
      if (!controlled.count(a)) ok = false;
    }
    if (inside && !ok) ++bad;
  }
  return bad;
}

}  // namespace sevlab
