#pragma once

// The bundled guest: a flat memory layout, a pseudo-random "kernel text" that
// serves as the attacker's known plaintext, and three small programs (an idle
// loop, a two-stage boot with address randomization, and a cpuid-and-store
// routine).

#include <algorithm>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "sevlab/block.hpp"
#include "sevlab/chain.hpp"
#include "sevlab/errors.hpp"
#include "sevlab/isa.hpp"
#include "sevlab/machine.hpp"
#include "sevlab/vm.hpp"

namespace sevlab {

/// Guest-physical layout. Everything below 64 KiB is reachable by the
/// absolute load/store forms.
struct GuestLayout {
  PhysAddr stage1 = 0x1000;
  PhysAddr stage2 = 0x2000;
  PhysAddr randomize = 0x2040;
  PhysAddr data = 0x3000;
  PhysAddr cpuid_code = 0x4000;
  PhysAddr scratch = 0x5000;
  PhysAddr secrets = 0x6000;
  PhysAddr stack_lo = 0x8000;
  unsigned stack_pages = 8;
  PhysAddr kernel_fallback = 0x10000;
  unsigned kernel_slots = 64;  // one page each, fallback included
  PhysAddr text = 0x100000;
  std::size_t text_size = 8u << 20;

  // Data slots (all in the data page).
  PhysAddr slot_s2_src() const { return data + 0x00; }
  PhysAddr slot_s2_dst() const { return data + 0x08; }
  PhysAddr slot_s2_qwords() const { return data + 0x10; }
  PhysAddr slot_s2_done() const { return data + 0x18; }
  PhysAddr slot_fallback() const { return data + 0x20; }
  PhysAddr slot_random() const { return data + 0x28; }
  PhysAddr slot_base() const { return data + 0x30; }
  PhysAddr slot_k_src() const { return data + 0x38; }
  PhysAddr slot_k_qwords() const { return data + 0x40; }
  PhysAddr cpuid_buffer() const { return data + 0x80; }
  PhysAddr copy_args() const { return data + 0x100; }   // [src, dst] [count, 0]
  PhysAddr copy_done() const { return data + 0x120; }

  // Known code inside the text image.
  PhysAddr hook() const { return text + 0x1000 - kBlockSize; }  // idle loop, last block of text page 0
  PhysAddr stage2_image() const { return text + 0x3000; }
  PhysAddr kernel_image() const { return text + 0x4000; }
  std::size_t stage2_bytes() const { return 256; }
  std::size_t kernel_bytes() const { return 128; }
};

enum class GuestProgram : std::uint8_t { Idle, Boot, Cpuid };

struct GuestConfig {
  std::uint64_t seed = 1;
  GuestProgram program = GuestProgram::Idle;
  std::size_t text_size = 8u << 20;
  std::optional<PhysAddr> stack_pointer;  // initial r7; random when unset
  PhysAddr text_base = GuestLayout{}.text;
  std::optional<Bytes> text_image;  // used instead of generated text; padded to whole pages
};

struct Guest {
  GuestLayout layout;
  Bytes text;  // plaintext of the text region (public kernel image)
  Bytes secrets;
  std::uint64_t host_frame_offset = 0;
  PhysAddr random_base = 0;  // what the boot randomizer will pick
};

namespace guest_detail {

inline Bytes qword(std::uint64_t v) {
  Bytes b(8);
  for (int i = 0; i < 8; ++i) b[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(v >> (8 * i));
  return b;
}

inline Bytes program(const std::string& listing) {
  const auto ins = parse_listing(listing);
  return assemble(ins);
}

inline std::string hex16(PhysAddr a) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "0x%04llx", static_cast<unsigned long long>(a));
  return buf;
}

}  // namespace guest_detail

/// Stage 1 copies stage 2 into place, flags completion, and enters it.
inline Bytes boot_stage1(const GuestLayout& l) {
  using guest_detail::hex16;
  return guest_detail::program(
      "  load r5, " + hex16(l.slot_s2_src()) + "\n"
      "  load r6, " + hex16(l.slot_s2_dst()) + "\n"
      "  load r1, " + hex16(l.slot_s2_qwords()) + "\n"
      "copy:\n"
      "  movq r0, [r5]\n"
      "  movq [r6], r0\n"
      "  add r5, 8\n"
      "  add r6, 8\n"
      "  dec r1\n"
      "  jnz copy\n"
      "  store r1, " + hex16(l.slot_s2_done()) + "\n"
      "  load r0, " + hex16(l.slot_s2_dst()) + "\n"
      "  push r0\n"
      "  ret\n");
}

/// Stage 2: pick a base (fallback unless the randomizer overrides it), copy
/// the kernel there and jump to it. The randomizer starts its own block.
inline Bytes boot_stage2(const GuestLayout& l) {
  using guest_detail::hex16;
  const std::string head =
      "  load r0, " + hex16(l.slot_fallback()) + "\n"
      "  call randomize\n"
      "  store r0, " + hex16(l.slot_base()) + "\n"
      "  load r6, " + hex16(l.slot_base()) + "\n"
      "  load r5, " + hex16(l.slot_k_src()) + "\n"
      "  load r1, " + hex16(l.slot_k_qwords()) + "\n"
      "copy:\n"
      "  movq r2, [r5]\n"
      "  movq [r6], r2\n"
      "  add r5, 8\n"
      "  add r6, 8\n"
      "  dec r1\n"
      "  jnz copy\n"
      "  load r0, " + hex16(l.slot_base()) + "\n"
      "  push r0\n"
      "  ret\n";
  const std::string tail = "randomize:\n  load r0, " + hex16(l.slot_random()) + "\n  ret\n";
  const std::size_t used = guest_detail::program(head + tail).size() - guest_detail::program(tail).size();
  const std::size_t rnd_off = l.randomize - l.stage2;
  if (used > rnd_off) throw EncodingError("stage 2 overruns the randomizer slot");
  std::string pad;
  for (std::size_t k = used; k < rnd_off; ++k) pad += "  nop\n";
  return guest_detail::program(head + pad + tail);
}

/// The loaded kernel: records where it runs from, then halts.
inline Bytes kernel_body() { return guest_detail::program("  nop\n  nop\n  halt\n"); }

/// sync; store r0; store r1; padding up to the next 16-byte boundary, then halt.
inline Bytes cpuid_routine(const GuestLayout& l) {
  using guest_detail::hex16;
  Bytes b = guest_detail::program("  sync\n  store r0, " + hex16(l.cpuid_buffer()) + "\n  store r1, " +
                                  hex16(l.cpuid_buffer() + 8) + "\n");
  b.resize(kBlockSize, kNop);
  const Bytes tail = guest_detail::program("  halt\n");
  b.insert(b.end(), tail.begin(), tail.end());
  return b;
}

/// Idle loop at the hook block: inc r1; jmp back.
inline Bytes idle_routine() { return guest_detail::program("idle:\n  inc r1\n  jmp idle\n"); }

inline std::uint64_t host_offset_for(const Machine& m, std::uint64_t seed, std::uint64_t guest_frames) {
  const unsigned frame_bits = m.table().address_width - kPageShift;
  std::mt19937_64 rng(seed ^ 0xA11CE5EEDULL);
  if (frame_bits <= 1) return 0;
  const std::uint64_t limit = (1ULL << frame_bits) - guest_frames;
  if (limit <= 1) return 0;
  // Upper half of the host address space, frame granular.
  return (limit / 2) + rng() % (limit / 2);
}

/// Maps guest memory, loads images and programs, and sets the initial vCPU state.
inline Guest install_guest(Machine& machine, VMState& vm, const GuestConfig& cfg) {
  using guest_detail::qword;
  Guest g;
  g.layout.text = cfg.text_base;
  g.layout.text_size = cfg.text_size;
  if (cfg.text_image)
    g.layout.text_size = std::max<std::size_t>(0x5000, (cfg.text_image->size() + kPageSize - 1) / kPageSize * kPageSize);
  const GuestLayout& l = g.layout;
  if (l.text_size < 0x5000 || l.text_size % kPageSize) throw ValidationError("text size must be a page multiple of at least 20 KiB");
  if (l.text % kPageSize || l.text < l.kernel_fallback + l.kernel_slots * kPageSize)
    throw ValidationError("text base must be page aligned and above the kernel slots");
  std::mt19937_64 rng(cfg.seed ^ 0x6E5751ULL);

  const std::uint64_t guest_frames = page_of(l.text + l.text_size);
  g.host_frame_offset = host_offset_for(machine, cfg.seed, guest_frames);
  auto map_range = [&](PhysAddr gpa, std::size_t bytes) {
    for (PhysAddr a = gpa; a < gpa + bytes; a += kPageSize) machine.map_gpa(page_of(a), page_of(a) + g.host_frame_offset);
  };
  map_range(l.stage1, l.secrets + kPageSize - l.stage1);
  map_range(l.stack_lo, l.stack_pages * kPageSize);
  map_range(l.kernel_fallback, l.kernel_slots * kPageSize);
  map_range(l.text, l.text_size);

  // Text: pseudo-random bytes with the known routines embedded.
  g.text.resize(l.text_size);
  for (std::size_t k = 0; k < g.text.size(); k += 8) {
    const std::uint64_t v = rng();
    for (std::size_t j = 0; j < 8; ++j) g.text[k + j] = static_cast<std::uint8_t>(v >> (8 * j));
  }
  if (cfg.text_image) std::copy(cfg.text_image->begin(), cfg.text_image->end(), g.text.begin());
  auto embed = [&](PhysAddr gpa, const Bytes& code) {
    std::copy(code.begin(), code.end(), g.text.begin() + static_cast<std::ptrdiff_t>(gpa - l.text));
  };
  embed(l.hook(), idle_routine());
  Bytes s2 = boot_stage2(l);
  s2.resize(l.stage2_bytes(), kNop);
  embed(l.stage2_image(), s2);
  Bytes kern = kernel_body();
  kern.resize(l.kernel_bytes(), kNop);
  embed(l.kernel_image(), kern);
  machine.load_guest_image(l.text, g.text);

  // Low memory.
  Bytes s1 = boot_stage1(l);
  machine.load_guest_image(l.stage1, s1);
  machine.load_guest_image(l.cpuid_code, cpuid_routine(l));
  const std::uint64_t slot = 1 + rng() % (l.kernel_slots - 1);
  g.random_base = l.kernel_fallback + slot * kPageSize;
  auto put = [&](PhysAddr a, std::uint64_t v) { machine.load_guest_image(a, qword(v)); };
  put(l.slot_s2_src(), l.stage2_image());
  put(l.slot_s2_dst(), l.stage2);
  put(l.slot_s2_qwords(), l.stage2_bytes() / 8);
  put(l.slot_s2_done(), 0);
  put(l.slot_fallback(), l.kernel_fallback);
  put(l.slot_random(), g.random_base);
  put(l.slot_base(), 0);
  put(l.slot_k_src(), l.kernel_image());
  put(l.slot_k_qwords(), l.kernel_bytes() / 8);
  g.secrets.resize(kPageSize);
  for (auto& b : g.secrets) b = static_cast<std::uint8_t>(rng());
  machine.load_guest_image(l.secrets, g.secrets);

  vm = VMState{};
  for (auto& r : vm.regs) r = rng() & 0xFFFFFFFFULL;
  if (cfg.stack_pointer) {
    vm.regs[kStackReg] = *cfg.stack_pointer;
  } else {
    const PhysAddr page = l.stack_lo + (1 + rng() % (l.stack_pages - 1)) * kPageSize;
    vm.regs[kStackReg] = page + 64 + 8 * (rng() % ((kPageSize - 128) / 8));
  }
  switch (cfg.program) {
    case GuestProgram::Idle: vm.ip = l.hook(); break;
    case GuestProgram::Boot: vm.ip = l.stage1; break;
    case GuestProgram::Cpuid: vm.ip = l.cpuid_code; break;
  }
  return g;
}

}  // namespace sevlab
