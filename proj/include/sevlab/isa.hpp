#pragma once

// Guest mini-ISA. Widths follow the x86 instructions the gadgets stand in for.
//
//   nop          90                 ret          C3
//   halt         F4                 push r       50+r
//   pop r        58+r
//   xor d, s     31 C0|s<<3|d       inc r        FF C0+r
//   dec r        FF C8+r            shl1 r       D1 E0+r
//   jmp d8       EB d8              jnz d8       75 d8
//   call d8      E8 d8              sync         0F A2
//   xorq/incq/decq/shl1q            48 + the 32-bit form
//   movq d, [s]  48 8B d<<3|s       movq [d], s  48 89 s<<3|d
//   setc f, r    0F 01 D0|f<<3|r    (f=1 shared, f=0 private; page of address in r)
//   shlk r, k    48 C1 E0+r k       add r, k     48 83 C0+r k (signed k)
//   store r, a   A3 r lo hi         load r, a    A1 r lo hi   (8 bytes at gpa a < 64K)
//
// 32-bit forms zero the upper half of the destination. Relative displacements
// count from the end of the instruction.

#include <array>
#include <cctype>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "sevlab/block.hpp"
#include "sevlab/errors.hpp"

namespace sevlab {

enum class Op : std::uint8_t {
  Nop, Ret, Halt, Push, Pop,
  Xor, Inc, Dec, Shl1,
  XorQ, IncQ, DecQ, Shl1Q,
  Jmp, Jnz, Call, Sync,
  MovqLoad, MovqStore, SetC, ShlK, AddQ, Store, Load,
};

inline constexpr unsigned kNumRegs = 8;
inline constexpr unsigned kStackReg = 7;
inline constexpr unsigned kRsi = 6;
inline constexpr unsigned kRdi = 5;

struct Instr {
  Op op = Op::Nop;
  std::uint8_t a = 0;  // destination / sole register
  std::uint8_t b = 0;  // source register
  std::int32_t imm = 0;

  friend bool operator==(const Instr&, const Instr&) = default;
};

namespace ins {
inline Instr nop() { return {Op::Nop}; }
inline Instr ret() { return {Op::Ret}; }
inline Instr halt() { return {Op::Halt}; }
inline Instr push(unsigned r) { return {Op::Push, static_cast<std::uint8_t>(r)}; }
inline Instr pop(unsigned r) { return {Op::Pop, static_cast<std::uint8_t>(r)}; }
inline Instr xor_rr(unsigned d, unsigned s) { return {Op::Xor, static_cast<std::uint8_t>(d), static_cast<std::uint8_t>(s)}; }
inline Instr inc(unsigned r) { return {Op::Inc, static_cast<std::uint8_t>(r)}; }
inline Instr dec(unsigned r) { return {Op::Dec, static_cast<std::uint8_t>(r)}; }
inline Instr shl1(unsigned r) { return {Op::Shl1, static_cast<std::uint8_t>(r)}; }
inline Instr xorq(unsigned d, unsigned s) { return {Op::XorQ, static_cast<std::uint8_t>(d), static_cast<std::uint8_t>(s)}; }
inline Instr incq(unsigned r) { return {Op::IncQ, static_cast<std::uint8_t>(r)}; }
inline Instr decq(unsigned r) { return {Op::DecQ, static_cast<std::uint8_t>(r)}; }
inline Instr shl1q(unsigned r) { return {Op::Shl1Q, static_cast<std::uint8_t>(r)}; }
inline Instr jmp(int d) { return {Op::Jmp, 0, 0, d}; }
inline Instr jnz(int d) { return {Op::Jnz, 0, 0, d}; }
inline Instr call(int d) { return {Op::Call, 0, 0, d}; }
inline Instr sync() { return {Op::Sync}; }
inline Instr movq_load(unsigned d, unsigned s) { return {Op::MovqLoad, static_cast<std::uint8_t>(d), static_cast<std::uint8_t>(s)}; }
inline Instr movq_store(unsigned d, unsigned s) { return {Op::MovqStore, static_cast<std::uint8_t>(d), static_cast<std::uint8_t>(s)}; }
inline Instr setc(bool shared, unsigned r) { return {Op::SetC, static_cast<std::uint8_t>(r), 0, shared ? 1 : 0}; }
inline Instr shlk(unsigned r, int k) { return {Op::ShlK, static_cast<std::uint8_t>(r), 0, k}; }
inline Instr addq(unsigned r, int k) { return {Op::AddQ, static_cast<std::uint8_t>(r), 0, k}; }
inline Instr store(unsigned r, std::uint32_t gpa) { return {Op::Store, static_cast<std::uint8_t>(r), 0, static_cast<std::int32_t>(gpa)}; }
inline Instr load(unsigned r, std::uint32_t gpa) { return {Op::Load, static_cast<std::uint8_t>(r), 0, static_cast<std::int32_t>(gpa)}; }
}  // namespace ins

inline unsigned instr_width(Op op) {
  switch (op) {
    case Op::Nop: case Op::Ret: case Op::Halt: case Op::Push: case Op::Pop:
      return 1;
    case Op::Xor: case Op::Inc: case Op::Dec: case Op::Shl1:
    case Op::Jmp: case Op::Jnz: case Op::Call: case Op::Sync:
      return 2;
    case Op::XorQ: case Op::IncQ: case Op::DecQ: case Op::Shl1Q:
    case Op::MovqLoad: case Op::MovqStore: case Op::SetC:
      return 3;
    case Op::ShlK: case Op::AddQ: case Op::Store: case Op::Load:
      return 4;
  }
  return 0;
}

inline unsigned instr_width(const Instr& i) { return instr_width(i.op); }

inline bool is_jump(Op op) { return op == Op::Jmp || op == Op::Jnz || op == Op::Call; }

/// Appends the encoding of i to out.
inline void encode(const Instr& i, Bytes& out) {
  auto reg = [&](unsigned r) -> std::uint8_t {
    if (r >= kNumRegs) throw EncodingError("register out of range");
    return static_cast<std::uint8_t>(r);
  };
  auto rel8 = [&](std::int32_t d) -> std::uint8_t {
    if (d < -128 || d > 127) throw EncodingError("jump displacement " + std::to_string(d) + " outside rel8");
    return static_cast<std::uint8_t>(static_cast<std::int8_t>(d));
  };
  auto imm8u = [&](std::int32_t k) -> std::uint8_t {
    if (k < 0 || k > 63) throw EncodingError("shift count outside 0..63");
    return static_cast<std::uint8_t>(k);
  };
  auto imm8s = [&](std::int32_t k) -> std::uint8_t {
    if (k < -128 || k > 127) throw EncodingError("immediate outside imm8");
    return static_cast<std::uint8_t>(static_cast<std::int8_t>(k));
  };
  auto abs16 = [&](std::int32_t a) {
    if (a < 0 || a > 0xFFFF) throw EncodingError("absolute address outside 16 bits");
    out.push_back(static_cast<std::uint8_t>(a & 0xFF));
    out.push_back(static_cast<std::uint8_t>(a >> 8));
  };
  const bool wide = i.op == Op::XorQ || i.op == Op::IncQ || i.op == Op::DecQ || i.op == Op::Shl1Q ||
                    i.op == Op::MovqLoad || i.op == Op::MovqStore || i.op == Op::ShlK || i.op == Op::AddQ;
  if (wide) out.push_back(0x48);
  switch (i.op) {
    case Op::Nop: out.push_back(0x90); break;
    case Op::Ret: out.push_back(0xC3); break;
    case Op::Halt: out.push_back(0xF4); break;
    case Op::Push: out.push_back(static_cast<std::uint8_t>(0x50 + reg(i.a))); break;
    case Op::Pop: out.push_back(static_cast<std::uint8_t>(0x58 + reg(i.a))); break;
    case Op::Xor: case Op::XorQ:
      out.push_back(0x31);
      out.push_back(static_cast<std::uint8_t>(0xC0 | reg(i.b) << 3 | reg(i.a)));
      break;
    case Op::Inc: case Op::IncQ:
      out.push_back(0xFF);
      out.push_back(static_cast<std::uint8_t>(0xC0 + reg(i.a)));
      break;
    case Op::Dec: case Op::DecQ:
      out.push_back(0xFF);
      out.push_back(static_cast<std::uint8_t>(0xC8 + reg(i.a)));
      break;
    case Op::Shl1: case Op::Shl1Q:
      out.push_back(0xD1);
      out.push_back(static_cast<std::uint8_t>(0xE0 + reg(i.a)));
      break;
    case Op::Jmp: out.push_back(0xEB); out.push_back(rel8(i.imm)); break;
    case Op::Jnz: out.push_back(0x75); out.push_back(rel8(i.imm)); break;
    case Op::Call: out.push_back(0xE8); out.push_back(rel8(i.imm)); break;
    case Op::Sync: out.push_back(0x0F); out.push_back(0xA2); break;
    case Op::MovqLoad:
      out.push_back(0x8B);
      out.push_back(static_cast<std::uint8_t>(reg(i.a) << 3 | reg(i.b)));
      break;
    case Op::MovqStore:
      out.push_back(0x89);
      out.push_back(static_cast<std::uint8_t>(reg(i.b) << 3 | reg(i.a)));
      break;
    case Op::SetC:
      if (i.imm != 0 && i.imm != 1) throw EncodingError("setc flag must be 0 or 1");
      out.push_back(0x0F);
      out.push_back(0x01);
      out.push_back(static_cast<std::uint8_t>(0xD0 | i.imm << 3 | reg(i.a)));
      break;
    case Op::ShlK:
      out.push_back(0xC1);
      out.push_back(static_cast<std::uint8_t>(0xE0 + reg(i.a)));
      out.push_back(imm8u(i.imm));
      break;
    case Op::AddQ:
      out.push_back(0x83);
      out.push_back(static_cast<std::uint8_t>(0xC0 + reg(i.a)));
      out.push_back(imm8s(i.imm));
      break;
    case Op::Store:
      out.push_back(0xA3);
      out.push_back(reg(i.a));
      abs16(i.imm);
      break;
    case Op::Load:
      out.push_back(0xA1);
      out.push_back(reg(i.a));
      abs16(i.imm);
      break;
  }
}

inline Bytes encode(const Instr& i) {
  Bytes out;
  encode(i, out);
  return out;
}

inline Bytes assemble(std::span<const Instr> listing) {
  Bytes out;
  for (const auto& i : listing) encode(i, out);
  return out;
}

/// Width implied by the first one or two bytes; 0 when the opcode is invalid.
/// For the 0x48 prefix the second byte is needed (pass -1 if not yet known;
/// the result is then 2, meaning "fetch one more").
inline unsigned length_from_prefix(std::uint8_t b0, int b1 = -1) {
  if (b0 == 0x90 || b0 == 0xC3 || b0 == 0xF4 || (b0 >= 0x50 && b0 <= 0x5F)) return 1;
  switch (b0) {
    case 0x31: case 0xFF: case 0xD1: case 0xEB: case 0x75: case 0xE8:
      return 2;
    case 0x0F:
      if (b1 < 0) return 2;
      return b1 == 0xA2 ? 2 : b1 == 0x01 ? 3 : 0;
    case 0xA1: case 0xA3:
      return 4;
    case 0x48:
      if (b1 < 0) return 2;
      switch (b1) {
        case 0x31: case 0xFF: case 0xD1: case 0x8B: case 0x89: return 3;
        case 0xC1: case 0x83: return 4;
        default: return 0;
      }
    default:
      return 0;
  }
}

/// Decodes one instruction from the front of bytes; nullopt when invalid or
/// truncated.
inline std::optional<Instr> decode(std::span<const std::uint8_t> bytes) {
  if (bytes.empty()) return std::nullopt;
  const std::uint8_t b0 = bytes[0];
  const unsigned len = length_from_prefix(b0, bytes.size() > 1 ? bytes[1] : -1);
  if (len == 0 || bytes.size() < len) return std::nullopt;
  if (b0 == 0x90) return ins::nop();
  if (b0 == 0xC3) return ins::ret();
  if (b0 == 0xF4) return ins::halt();
  if (b0 >= 0x50 && b0 <= 0x57) return ins::push(b0 - 0x50);
  if (b0 >= 0x58 && b0 <= 0x5F) return ins::pop(b0 - 0x58);
  const bool wide = b0 == 0x48;
  const std::span<const std::uint8_t> r = wide ? bytes.subspan(1) : bytes;
  const std::uint8_t op = r[0];
  const std::uint8_t m = r.size() > 1 ? r[1] : 0;
  auto pick = [&](Op narrow, Op w) { return wide ? w : narrow; };
  switch (op) {
    case 0x31:
      if ((m & 0xC0) != 0xC0) return std::nullopt;
      return Instr{pick(Op::Xor, Op::XorQ), static_cast<std::uint8_t>(m & 7), static_cast<std::uint8_t>((m >> 3) & 7)};
    case 0xFF:
      if (m >= 0xC0 && m <= 0xC7) return Instr{pick(Op::Inc, Op::IncQ), static_cast<std::uint8_t>(m - 0xC0)};
      if (m >= 0xC8 && m <= 0xCF) return Instr{pick(Op::Dec, Op::DecQ), static_cast<std::uint8_t>(m - 0xC8)};
      return std::nullopt;
    case 0xD1:
      if (m < 0xE0 || m > 0xE7) return std::nullopt;
      return Instr{pick(Op::Shl1, Op::Shl1Q), static_cast<std::uint8_t>(m - 0xE0)};
    default:
      break;
  }
  if (wide) {
    switch (op) {
      case 0x8B:
        if (m & 0xC0) return std::nullopt;
        return ins::movq_load((m >> 3) & 7, m & 7);
      case 0x89:
        if (m & 0xC0) return std::nullopt;
        return ins::movq_store(m & 7, (m >> 3) & 7);
      case 0xC1:
        if (m < 0xE0 || m > 0xE7 || r[2] > 63) return std::nullopt;
        return ins::shlk(m - 0xE0, r[2]);
      case 0x83:
        if (m < 0xC0 || m > 0xC7) return std::nullopt;
        return ins::addq(m - 0xC0, static_cast<std::int8_t>(r[2]));
      default:
        return std::nullopt;
    }
  }
  const std::int8_t d8 = static_cast<std::int8_t>(m);
  switch (op) {
    case 0xEB: return ins::jmp(d8);
    case 0x75: return ins::jnz(d8);
    case 0xE8: return ins::call(d8);
    case 0x0F:
      if (m == 0xA2) return ins::sync();
      if ((r[2] & 0xF0) != 0xD0) return std::nullopt;
      return ins::setc((r[2] >> 3) & 1, r[2] & 7);
    case 0xA3: case 0xA1: {
      if (m >= kNumRegs) return std::nullopt;
      const std::uint32_t a = static_cast<std::uint32_t>(r[2]) | static_cast<std::uint32_t>(r[3]) << 8;
      return op == 0xA3 ? ins::store(m, a) : ins::load(m, a);
    }
    default:
      return std::nullopt;
  }
}

// ---------------------------------------------------------------------------
// Text form

inline const char* mnemonic(Op op) {
  switch (op) {
    case Op::Nop: return "nop";
    case Op::Ret: return "ret";
    case Op::Halt: return "halt";
    case Op::Push: return "push";
    case Op::Pop: return "pop";
    case Op::Xor: return "xor";
    case Op::Inc: return "inc";
    case Op::Dec: return "dec";
    case Op::Shl1: return "shl1";
    case Op::XorQ: return "xorq";
    case Op::IncQ: return "incq";
    case Op::DecQ: return "decq";
    case Op::Shl1Q: return "shl1q";
    case Op::Jmp: return "jmp";
    case Op::Jnz: return "jnz";
    case Op::Call: return "call";
    case Op::Sync: return "sync";
    case Op::MovqLoad: case Op::MovqStore: return "movq";
    case Op::SetC: return "setc";
    case Op::ShlK: return "shlk";
    case Op::AddQ: return "add";
    case Op::Store: return "store";
    case Op::Load: return "load";
  }
  return "?";
}

inline std::string to_string(const Instr& i) {
  const std::string m = mnemonic(i.op);
  auto r = [](unsigned x) { return "r" + std::to_string(x); };
  switch (i.op) {
    case Op::Nop: case Op::Ret: case Op::Halt: case Op::Sync:
      return m;
    case Op::Push: case Op::Pop: case Op::Inc: case Op::Dec: case Op::Shl1:
    case Op::IncQ: case Op::DecQ: case Op::Shl1Q:
      return m + " " + r(i.a);
    case Op::Xor: case Op::XorQ:
      return m + " " + r(i.a) + ", " + r(i.b);
    case Op::Jmp: case Op::Jnz: case Op::Call:
      return m + " " + std::to_string(i.imm);
    case Op::MovqLoad: return m + " " + r(i.a) + ", [" + r(i.b) + "]";
    case Op::MovqStore: return m + " [" + r(i.a) + "], " + r(i.b);
    case Op::SetC: return m + (i.imm ? " shared, " : " private, ") + r(i.a);
    case Op::ShlK: case Op::AddQ: return m + " " + r(i.a) + ", " + std::to_string(i.imm);
    case Op::Store: case Op::Load: {
      char buf[16];
      std::snprintf(buf, sizeof buf, "0x%04x", static_cast<unsigned>(i.imm));
      return m + " " + r(i.a) + ", " + buf;
    }
  }
  return m;
}

namespace asm_detail {

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_operands(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!trim(cur).empty()) out.push_back(trim(cur));
  return out;
}

inline unsigned parse_reg(const std::string& s, int line) {
  if (s.size() == 2 && (s[0] == 'r' || s[0] == 'R') && s[1] >= '0' && s[1] < '0' + static_cast<int>(kNumRegs))
    return static_cast<unsigned>(s[1] - '0');
  throw EncodingError("line " + std::to_string(line) + ": bad register '" + s + "'");
}

inline std::optional<long> parse_int(const std::string& s) {
  try {
    std::size_t pos = 0;
    const long v = std::stol(s, &pos, 0);
    if (pos != s.size()) return std::nullopt;
    return v;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

}  // namespace asm_detail

/// Parses one instruction per line; `;` starts a comment, `name:` defines a
/// label usable as a jump target.
inline std::vector<Instr> parse_listing(const std::string& text) {
  using namespace asm_detail;
  struct Pending {
    Instr in;
    std::string label;
    int line;
  };
  std::vector<Pending> out;
  std::map<std::string, std::size_t> labels;  // label -> index of next instruction
  std::istringstream is(text);
  std::string raw;
  int lineno = 0;
  while (std::getline(is, raw)) {
    ++lineno;
    std::string line = trim(raw.substr(0, raw.find(';')));
    while (!line.empty()) {
      const auto colon = line.find(':');
      const auto space = line.find_first_of(" \t");
      if (colon == std::string::npos || (space != std::string::npos && space < colon)) break;
      labels[trim(line.substr(0, colon))] = out.size();
      line = trim(line.substr(colon + 1));
    }
    if (line.empty()) continue;
    const auto sp = line.find_first_of(" \t");
    std::string mn = line.substr(0, sp);
    for (auto& c : mn) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    const auto ops = split_operands(sp == std::string::npos ? "" : line.substr(sp + 1));
    auto need = [&](std::size_t n) {
      if (ops.size() != n)
        throw EncodingError("line " + std::to_string(lineno) + ": '" + mn + "' takes " + std::to_string(n) + " operand(s)");
    };
    auto num = [&](const std::string& s) {
      auto v = parse_int(s);
      if (!v) throw EncodingError("line " + std::to_string(lineno) + ": bad number '" + s + "'");
      return static_cast<std::int32_t>(*v);
    };
    Pending p{{}, {}, lineno};
    if (mn == "nop" || mn == "ret" || mn == "halt" || mn == "sync") {
      need(0);
      p.in = mn == "nop" ? ins::nop() : mn == "ret" ? ins::ret() : mn == "halt" ? ins::halt() : ins::sync();
    } else if (mn == "push" || mn == "pop" || mn == "inc" || mn == "dec" || mn == "shl1" || mn == "incq" ||
               mn == "decq" || mn == "shl1q") {
      need(1);
      const unsigned r = parse_reg(ops[0], lineno);
      if (mn == "push") p.in = ins::push(r);
      else if (mn == "pop") p.in = ins::pop(r);
      else if (mn == "inc") p.in = ins::inc(r);
      else if (mn == "dec") p.in = ins::dec(r);
      else if (mn == "shl1") p.in = ins::shl1(r);
      else if (mn == "incq") p.in = ins::incq(r);
      else if (mn == "decq") p.in = ins::decq(r);
      else p.in = ins::shl1q(r);
    } else if (mn == "xor" || mn == "xorq") {
      need(2);
      const unsigned d = parse_reg(ops[0], lineno), s = parse_reg(ops[1], lineno);
      p.in = mn == "xor" ? ins::xor_rr(d, s) : ins::xorq(d, s);
    } else if (mn == "jmp" || mn == "jnz" || mn == "call") {
      need(1);
      p.in = mn == "jmp" ? ins::jmp(0) : mn == "jnz" ? ins::jnz(0) : ins::call(0);
      if (auto v = parse_int(ops[0])) p.in.imm = static_cast<std::int32_t>(*v);
      else p.label = ops[0];
    } else if (mn == "movq") {
      need(2);
      if (!ops[1].empty() && ops[1].front() == '[') {
        p.in = ins::movq_load(parse_reg(ops[0], lineno), parse_reg(trim(ops[1].substr(1, ops[1].size() - 2)), lineno));
      } else if (!ops[0].empty() && ops[0].front() == '[') {
        p.in = ins::movq_store(parse_reg(trim(ops[0].substr(1, ops[0].size() - 2)), lineno), parse_reg(ops[1], lineno));
      } else {
        throw EncodingError("line " + std::to_string(lineno) + ": movq needs one memory operand");
      }
    } else if (mn == "setc") {
      need(2);
      if (ops[0] != "shared" && ops[0] != "private")
        throw EncodingError("line " + std::to_string(lineno) + ": setc takes shared|private");
      p.in = ins::setc(ops[0] == "shared", parse_reg(ops[1], lineno));
    } else if (mn == "shlk" || mn == "add" || mn == "store" || mn == "load") {
      need(2);
      const unsigned r = parse_reg(ops[0], lineno);
      const std::int32_t v = num(ops[1]);
      if (mn == "shlk") p.in = ins::shlk(r, v);
      else if (mn == "add") p.in = ins::addq(r, v);
      else if (mn == "store") p.in = ins::store(r, static_cast<std::uint32_t>(v));
      else p.in = ins::load(r, static_cast<std::uint32_t>(v));
    } else {
      throw EncodingError("line " + std::to_string(lineno) + ": unknown mnemonic '" + mn + "'");
    }
    out.push_back(p);
  }
  std::vector<std::size_t> offset(out.size() + 1, 0);
  for (std::size_t k = 0; k < out.size(); ++k) offset[k + 1] = offset[k] + instr_width(out[k].in);
  std::vector<Instr> result;
  for (std::size_t k = 0; k < out.size(); ++k) {
    Instr in = out[k].in;
    if (!out[k].label.empty()) {
      auto it = labels.find(out[k].label);
      if (it == labels.end()) throw EncodingError("line " + std::to_string(out[k].line) + ": unknown label '" + out[k].label + "'");
      in.imm = static_cast<std::int32_t>(offset[it->second]) - static_cast<std::int32_t>(offset[k + 1]);
    }
    Bytes probe;
    encode(in, probe);  // range checks with line context
    result.push_back(in);
  }
  return result;
}

inline std::string format_listing(std::span<const Instr> listing) {
  std::string out;
  for (const auto& i : listing) out += to_string(i) + "\n";
  return out;
}

}  // namespace sevlab
