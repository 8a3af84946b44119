#pragma once

// Guest interpreter. Every guest memory access goes through the machine, so
// permission faults and tweak-dependent decryption apply to code and data alike.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "sevlab/errors.hpp"
#include "sevlab/isa.hpp"
#include "sevlab/machine.hpp"

namespace sevlab {

enum class ExitKind : std::uint8_t { Fault, Sync, Halt };
enum class HaltReason : std::uint8_t { Hlt, DecodeFault, StepLimit };
enum class SyncFlavor : std::uint8_t { Cpuid, Rdtsc };

inline const char* to_string(ExitKind k) {
  switch (k) {
    case ExitKind::Fault: return "fault";
    case ExitKind::Sync: return "sync";
    case ExitKind::Halt: return "halt";
  }
  return "?";
}

inline const char* to_string(HaltReason r) {
  switch (r) {
    case HaltReason::Hlt: return "hlt";
    case HaltReason::DecodeFault: return "decode_fault";
    case HaltReason::StepLimit: return "step_limit";
  }
  return "?";
}

struct ExitEvent {
  ExitKind kind = ExitKind::Halt;
  FaultInfo fault;                  // Fault
  std::vector<std::uint64_t> ghcb;  // Sync, cpuid flavor: r0..r3 (all eight without sev_es)
  std::uint64_t counter = 0;        // Sync, rdtsc flavor
  HaltReason halt_reason = HaltReason::Hlt;
  std::uint64_t step_index = 0;     // instructions retired when the exit happened
};

struct TraceEntry {
  PhysAddr ip = 0;
  std::uint8_t len = 0;
  Op op = Op::Nop;
};

struct VMState {
  std::array<std::uint64_t, kNumRegs> regs{};
  PhysAddr ip = 0;
  bool running = true;
  bool zf = false;
  std::uint64_t steps = 0;
  std::optional<ExitKind> last_exit;
  bool record_trace = false;
  std::vector<TraceEntry> trace;
};

struct VmOptions {
  std::uint64_t max_steps = 1ULL << 22;  // per run_until_exit call
  SyncFlavor sync_flavor = SyncFlavor::Cpuid;
};

/// Registers the hypervisor may place in the GHCB before resuming.
using GhcbOverride = std::array<std::optional<std::uint64_t>, 4>;

// Values a natively executed SYNC leaves in r0..r3 when it is not intercepted.
inline constexpr std::array<std::uint64_t, 4> kNativeCpuid = {0x0000000D, 0x68747541, 0x444D4163, 0x69746E65};

namespace vm_detail {

inline std::uint64_t le64(std::span<const std::uint8_t> b) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = v << 8 | b[static_cast<std::size_t>(i)];
  return v;
}

inline std::array<std::uint8_t, 8> le_bytes(std::uint64_t v) {
  std::array<std::uint8_t, 8> out{};
  for (int i = 0; i < 8; ++i) out[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(v >> (8 * i));
  return out;
}

class Fetcher {
 public:
  Fetcher(Machine& m, PhysAddr ip) : m_(m), ip_(ip) {}

  std::optional<std::uint8_t> byte(unsigned k, std::optional<FaultInfo>& fault) {
    const PhysAddr a = ip_ + k;
    if (!(have_ && a >= base_ && a < base_ + buf_.size())) {
      auto r = m_.vm_read(a, kBlockSize - (a - block_floor(a)), AccessKind::Fetch);
      if (!r.ok()) {
        fault = r.fault;
        return std::nullopt;
      }
      buf_ = std::move(r.data);
      base_ = a;
      have_ = true;
    }
    return buf_[a - base_];
  }

 private:
  Machine& m_;
  PhysAddr ip_;
  bool have_ = false;
  PhysAddr base_ = 0;
  Bytes buf_;
};

}  // namespace vm_detail

/// Runs until the next exit and returns it. Each returned event counts as one
/// VM exit in the machine metrics.
inline ExitEvent run_until_exit(Machine& machine, VMState& vm, const VmOptions& opt = {}) {
  using namespace vm_detail;
  if (!vm.running) throw ValidationError("guest is not running");
  auto finish = [&](ExitEvent e) {
    e.step_index = vm.steps;
    vm.last_exit = e.kind;
    ++machine.metrics().vm_exits;
    return e;
  };
  auto halt = [&](HaltReason why) {
    vm.running = false;
    ExitEvent e;
    e.kind = ExitKind::Halt;
    e.halt_reason = why;
    return finish(e);
  };
  auto fault_exit = [&](const FaultInfo& f) {
    ExitEvent e;
    e.kind = ExitKind::Fault;
    e.fault = f;
    return finish(e);
  };
  auto& r = vm.regs;

  for (std::uint64_t executed = 0;; ++executed) {
    if (executed >= opt.max_steps) return halt(HaltReason::StepLimit);

    Fetcher fetch(machine, vm.ip);
    std::optional<FaultInfo> fault;
    std::array<std::uint8_t, 4> raw{};
    auto b0 = fetch.byte(0, fault);
    if (!b0) return fault_exit(*fault);
    raw[0] = *b0;
    unsigned len = length_from_prefix(raw[0]);
    if (len == 0) return halt(HaltReason::DecodeFault);
    if (len >= 2) {
      auto b1 = fetch.byte(1, fault);
      if (!b1) return fault_exit(*fault);
      raw[1] = *b1;
      len = length_from_prefix(raw[0], raw[1]);
      if (len == 0) return halt(HaltReason::DecodeFault);
    }
    for (unsigned k = 2; k < len; ++k) {
      auto bk = fetch.byte(k, fault);
      if (!bk) return fault_exit(*fault);
      raw[k] = *bk;
    }
    const auto decoded = decode(std::span<const std::uint8_t>(raw.data(), len));
    if (!decoded) return halt(HaltReason::DecodeFault);
    const Instr in = *decoded;
    const PhysAddr next = vm.ip + len;
    auto retire = [&](PhysAddr new_ip) {
      if (vm.record_trace) vm.trace.push_back({vm.ip, static_cast<std::uint8_t>(len), in.op});
      vm.ip = new_ip;
      ++vm.steps;
    };
    auto set32 = [&](unsigned reg, std::uint64_t v) {
      r[reg] = v & 0xFFFFFFFFULL;
      vm.zf = r[reg] == 0;
    };
    auto set64 = [&](unsigned reg, std::uint64_t v) {
      r[reg] = v;
      vm.zf = v == 0;
    };
    auto mem_read8 = [&](PhysAddr a, std::uint64_t& out) -> std::optional<FaultInfo> {
      auto res = machine.vm_read(a, 8, AccessKind::Read);
      if (!res.ok()) return res.fault;
      out = le64(res.data);
      return std::nullopt;
    };
    auto mem_write8 = [&](PhysAddr a, std::uint64_t v) {
      const auto b = le_bytes(v);
      return machine.vm_write(a, b);
    };

    switch (in.op) {
      case Op::Nop: retire(next); break;
      case Op::Halt:
        retire(vm.ip);
        return halt(HaltReason::Hlt);
      case Op::Xor: set32(in.a, r[in.a] ^ r[in.b]); retire(next); break;
      case Op::Inc: set32(in.a, r[in.a] + 1); retire(next); break;
      case Op::Dec: set32(in.a, r[in.a] - 1); retire(next); break;
      case Op::Shl1: set32(in.a, r[in.a] << 1); retire(next); break;
      case Op::XorQ: set64(in.a, r[in.a] ^ r[in.b]); retire(next); break;
      case Op::IncQ: set64(in.a, r[in.a] + 1); retire(next); break;
      case Op::DecQ: set64(in.a, r[in.a] - 1); retire(next); break;
      case Op::Shl1Q: set64(in.a, r[in.a] << 1); retire(next); break;
      case Op::ShlK: set64(in.a, r[in.a] << in.imm); retire(next); break;
      case Op::AddQ: set64(in.a, r[in.a] + static_cast<std::uint64_t>(static_cast<std::int64_t>(in.imm))); retire(next); break;
      case Op::Push: {
        const PhysAddr a = r[kStackReg] - 8;
        if (auto f = mem_write8(a, r[in.a])) return fault_exit(*f);
        r[kStackReg] = a;
        retire(next);
        break;
      }
      case Op::Pop: {
        std::uint64_t v = 0;
        if (auto f = mem_read8(r[kStackReg], v)) return fault_exit(*f);
        r[kStackReg] += 8;
        r[in.a] = v;
        retire(next);
        break;
      }
      case Op::Jmp: retire(next + static_cast<std::int64_t>(in.imm)); break;
      case Op::Jnz: retire(vm.zf ? next : next + static_cast<std::int64_t>(in.imm)); break;
      case Op::Call: {
        const PhysAddr a = r[kStackReg] - 8;
        if (auto f = mem_write8(a, next)) return fault_exit(*f);
        r[kStackReg] = a;
        retire(next + static_cast<std::int64_t>(in.imm));
        break;
      }
      case Op::Ret: {
        std::uint64_t v = 0;
        if (auto f = mem_read8(r[kStackReg], v)) return fault_exit(*f);
        r[kStackReg] += 8;
        retire(v);
        break;
      }
      case Op::Store:
        if (auto f = mem_write8(static_cast<PhysAddr>(in.imm), r[in.a])) return fault_exit(*f);
        retire(next);
        break;
      case Op::Load: {
        std::uint64_t v = 0;
        if (auto f = mem_read8(static_cast<PhysAddr>(in.imm), v)) return fault_exit(*f);
        r[in.a] = v;
        retire(next);
        break;
      }
      case Op::MovqLoad: {
        std::uint64_t v = 0;
        if (auto f = mem_read8(r[in.b], v)) return fault_exit(*f);
        r[in.a] = v;
        retire(next);
        break;
      }
      case Op::MovqStore:
        if (auto f = mem_write8(r[in.a], r[in.b])) return fault_exit(*f);
        retire(next);
        break;
      case Op::SetC: {
        const std::uint64_t frame = page_of(r[in.a]);
        if (!machine.is_mapped(frame)) return fault_exit(FaultInfo{machine.flags().sev_es ? page_base(r[in.a]) : r[in.a], AccessKind::Write});
        machine.guest_set_shared(Caller::Guest, frame, in.imm != 0);
        retire(next);
        break;
      }
      case Op::Sync: {
        if (!machine.flags().interception_enabled) {
          if (opt.sync_flavor == SyncFlavor::Cpuid) {
            for (unsigned k = 0; k < 4; ++k) r[k] = kNativeCpuid[k];
          } else {
            r[0] = vm.steps & 0xFFFFFFFFULL;
            r[2] = vm.steps >> 32;
          }
          retire(next);
          break;
        }
        retire(next);
        ExitEvent e;
        e.kind = ExitKind::Sync;
        if (opt.sync_flavor == SyncFlavor::Cpuid) {
          const unsigned exposed = machine.flags().sev_es ? 4 : kNumRegs;
          e.ghcb.assign(r.begin(), r.begin() + exposed);
        } else {
          e.counter = vm.steps;
        }
        return finish(e);
      }
    }
  }
}

/// Resumes after an exit, optionally installing r0..r3 through the GHCB.
inline void hv_resume(Machine& machine, VMState& vm, const GhcbOverride& override_regs = {}) {
  bool any = false;
  for (const auto& v : override_regs) any = any || v.has_value();
  if (!any) return;
  if (!machine.flags().interception_enabled)
    throw InterceptionDisabled("register override rejected: instruction interception is disabled");
  if (vm.last_exit != ExitKind::Sync) throw ValidationError("register override requires a preceding sync exit");
  for (unsigned k = 0; k < 4; ++k)
    if (override_regs[k]) vm.regs[k] = *override_regs[k];
}

}  // namespace sevlab
