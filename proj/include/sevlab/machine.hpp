#pragma once

// The encrypted machine: host frames holding ciphertext at rest, a nested page
// table owned by the hypervisor, guest C-bit attributes, and mitigation flags.

#include <array>
#include <cstdint>
#include <cstring>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "sevlab/aes128.hpp"
#include "sevlab/block.hpp"
#include "sevlab/cipher.hpp"
#include "sevlab/errors.hpp"
#include "sevlab/tweak.hpp"

namespace sevlab {

struct Perms {
  bool read = true;
  bool write = true;
  bool execute = true;

  static constexpr Perms all() { return {}; }
  friend bool operator==(const Perms&, const Perms&) = default;
};

struct NptEntry {
  std::uint64_t hpa_frame = 0;
  Perms perms;
  OwnerId owner = kHypervisor;  // consulted only under rmp_ownership
};

enum class AccessKind : std::uint8_t { Read, Write, Fetch };

inline const char* to_string(AccessKind k) {
  switch (k) {
    case AccessKind::Read: return "read";
    case AccessKind::Write: return "write";
    case AccessKind::Fetch: return "execute";
  }
  return "?";
}

/// What the hypervisor learns from a nested page fault.
struct FaultInfo {
  PhysAddr gpa = 0;  // page aligned when sev_es is on
  AccessKind access = AccessKind::Read;
  friend bool operator==(const FaultInfo&, const FaultInfo&) = default;
};

struct MachineFlags {
  bool sev_es = true;
  bool rmp_ownership = false;
  bool interception_enabled = true;
  friend bool operator==(const MachineFlags&, const MachineFlags&) = default;
};

struct Metrics {
  std::uint64_t vm_exits = 0;
  std::uint64_t page_faults = 0;
  std::uint64_t blocks_moved = 0;
  friend bool operator==(const Metrics&, const Metrics&) = default;
};

enum class Caller : std::uint8_t { Guest, Hypervisor };

struct ReadResult {
  Bytes data;
  std::optional<FaultInfo> fault;
  bool ok() const { return !fault.has_value(); }
};

struct MachineConfig {
  TweakTable table = make_tweak_table(table_spec::PaperDefault{});
  CipherMode mode = CipherMode::XEX;
  MachineFlags flags;
  std::uint64_t key_seed = 1;
};

inline constexpr char kSnapshotMagic[8] = {'S', 'E', 'V', 'L', 'A', 'B', '0', '1'};

class Machine {
 public:
  static constexpr OwnerId kVm = 1;

  explicit Machine(MachineConfig cfg) : table_(std::move(cfg.table)), mode_(cfg.mode), flags_(cfg.flags) {
    table_.validate();
    std::mt19937_64 rng(cfg.key_seed ^ 0xC0FFEE5EEDULL);
    Block hv = Block::from_halves(rng(), rng());
    Block vm = Block::from_halves(rng(), rng());
    while (vm == hv) vm = Block::from_halves(rng(), rng());
    hv_key_ = {hv, kHypervisor};
    vm_key_ = {vm, kVm};
    hv_aes_ = Aes128(hv);
    vm_aes_ = Aes128(vm);
  }

  const TweakTable& table() const { return table_; }
  CipherMode mode() const { return mode_; }
  const MachineFlags& flags() const { return flags_; }
  MachineFlags& flags() { return flags_; }
  const Metrics& metrics() const { return metrics_; }
  Metrics& metrics() { return metrics_; }

  // Keys never leave the simulation; attack code must not use these. They exist
  // for ground-truth verification in tests and reports.
  const CipherKey& vm_key_for_verification() const { return vm_key_; }
  const CipherKey& hv_key() const { return hv_key_; }

  // ---- host memory -------------------------------------------------------

  std::uint64_t max_frame() const {
    const unsigned n = table_.address_width;
    return n >= 64 ? (~0ULL >> kPageShift) : ((1ULL << (n - kPageShift)) - 1);
  }

  void add_frame(std::uint64_t hpa_frame, OwnerId owner = kHypervisor) {
    if (hpa_frame > max_frame()) throw AddressRangeError("host frame beyond the physical address width");
    auto [it, inserted] = frames_.try_emplace(hpa_frame);
    if (inserted) it->second.owner = owner;
  }

  bool has_frame(std::uint64_t hpa_frame) const { return frames_.count(hpa_frame) != 0; }
  std::size_t frame_count() const { return frames_.size(); }

  OwnerId frame_owner(std::uint64_t hpa_frame) const {
    auto it = frames_.find(hpa_frame);
    if (it == frames_.end()) throw FaultError(hpa_frame << kPageShift);
    return it->second.owner;
  }

  std::vector<std::uint64_t> frames() const {
    std::vector<std::uint64_t> out;
    out.reserve(frames_.size());
    for (const auto& [f, _] : frames_) out.push_back(f);
    return out;
  }

  /// Raw stored bytes; no decryption.
  Bytes hv_read_phys(PhysAddr hpa, std::size_t len) const {
    Bytes out(len);
    for (std::size_t done = 0; done < len;) {
      const PhysAddr a = hpa + done;
      const auto& f = frame_at(a);
      const std::size_t off = page_offset(a);
      const std::size_t n = std::min(len - done, kPageSize - off);
      std::memcpy(out.data() + done, f.data.data() + off, n);
      done += n;
    }
    return out;
  }

  /// Stores raw bytes; no re-encryption. Rejected as a whole under RMP when any
  /// touched frame is VM-owned.
  void hv_write_phys(PhysAddr hpa, std::span<const std::uint8_t> bytes) {
    for (std::size_t done = 0; done < bytes.size();) {
      const PhysAddr a = hpa + done;
      const auto& f = frame_at(a);
      if (flags_.rmp_ownership && f.owner != kHypervisor)
        throw OwnershipViolation("hypervisor write to a VM-owned page blocked by the ownership table");
      done += std::min(bytes.size() - done, kPageSize - page_offset(a));
    }
    for (std::size_t done = 0; done < bytes.size();) {
      const PhysAddr a = hpa + done;
      auto& f = frame_at(a);
      const std::size_t off = page_offset(a);
      const std::size_t n = std::min(bytes.size() - done, kPageSize - off);
      std::memcpy(f.data.data() + off, bytes.data() + done, n);
      done += n;
    }
  }

  Block hv_read_block(PhysAddr hpa) const {
    require_block_aligned(hpa);
    const auto& f = frame_at(hpa);
    Block b;
    std::memcpy(b.bytes.data(), f.data.data() + page_offset(hpa), kBlockSize);
    return b;
  }

  void hv_write_block(PhysAddr hpa, const Block& c) {
    require_block_aligned(hpa);
    hv_write_phys(hpa, c.bytes);
  }

  /// Hypervisor-side decryption of a block under its own key (shared pages).
  Block hv_decrypt_own(PhysAddr hpa) const { return decrypt_block(hv_aes_, mode_, table_, hv_read_block(hpa), hpa); }

  /// The plaintext a private guest read of the block backed by hpa would yield.
  /// Used by the cooperative diagnostic reader during table recovery and by
  /// ground-truth checks; attack paths never call it.
  Block private_view(PhysAddr hpa) const { return decrypt_block(vm_aes_, mode_, table_, hv_read_block(hpa), hpa); }

  Block encrypt_for(OwnerId owner, const Block& m, PhysAddr hpa) const {
    return encrypt_block(aes_for(owner), mode_, table_, m, hpa);
  }
  Block decrypt_for(OwnerId owner, const Block& c, PhysAddr hpa) const {
    return decrypt_block(aes_for(owner), mode_, table_, c, hpa);
  }

  // ---- nested paging -----------------------------------------------------

  /// Maps a guest frame, creating the host frame (VM-owned) when absent.
  void map_gpa(std::uint64_t gpa_frame, std::uint64_t hpa_frame, Perms perms = Perms::all()) {
    add_frame(hpa_frame, kVm);
    npt_[gpa_frame] = NptEntry{hpa_frame, perms, frames_.at(hpa_frame).owner};
  }

  bool is_mapped(std::uint64_t gpa_frame) const { return npt_.count(gpa_frame) != 0; }

  const NptEntry& npt_entry(std::uint64_t gpa_frame) const {
    auto it = npt_.find(gpa_frame);
    if (it == npt_.end()) throw FaultError(gpa_frame << kPageShift);
    return it->second;
  }

  std::vector<std::uint64_t> mapped_gpa_frames() const {
    std::vector<std::uint64_t> out;
    for (const auto& [g, _] : npt_) out.push_back(g);
    return out;
  }

  std::optional<PhysAddr> translate(PhysAddr gpa) const {
    auto it = npt_.find(page_of(gpa));
    if (it == npt_.end()) return std::nullopt;
    return (it->second.hpa_frame << kPageShift) | page_offset(gpa);
  }

  PhysAddr translate_or_throw(PhysAddr gpa) const {
    auto h = translate(gpa);
    if (!h) throw FaultError(gpa);
    return *h;
  }

  void set_npt_perms(std::uint64_t gpa_frame, Perms perms) {
    auto it = npt_.find(gpa_frame);
    if (it == npt_.end()) throw FaultError(gpa_frame << kPageShift);
    it->second.perms = perms;
  }

  void set_all_npt_perms(Perms perms) {
    for (auto& [_, e] : npt_) e.perms = perms;
  }

  /// Points a guest frame at a different host frame. Stored ciphertext is not
  /// touched, so existing data now decrypts under the new address tweak.
  void remap_gpa(std::uint64_t gpa_frame, std::uint64_t new_hpa_frame) {
    auto it = npt_.find(gpa_frame);
    if (it == npt_.end()) throw FaultError(gpa_frame << kPageShift);
    if (!has_frame(new_hpa_frame)) throw FaultError(new_hpa_frame << kPageShift);
    if (flags_.rmp_ownership && (it->second.owner != kHypervisor || frames_.at(new_hpa_frame).owner != kHypervisor))
      throw OwnershipViolation("remap of a validated VM page blocked by the ownership table");
    it->second.hpa_frame = new_hpa_frame;
  }

  /// C-bit change. Only the guest may call this; contents are not converted.
  void guest_set_shared(Caller caller, std::uint64_t gpa_frame, bool shared) {
    if (caller != Caller::Guest) throw PermissionError("guest page attributes are not accessible to the hypervisor");
    if (!is_mapped(gpa_frame)) throw FaultError(gpa_frame << kPageShift);
    shared_[gpa_frame] = shared;
  }

  bool is_shared(std::uint64_t gpa_frame) const {
    auto it = shared_.find(gpa_frame);
    return it != shared_.end() && it->second;
  }

  // ---- guest accesses ----------------------------------------------------

  /// Guest read or instruction fetch of len bytes at gpa.
  ReadResult vm_read(PhysAddr gpa, std::size_t len, AccessKind kind = AccessKind::Read) {
    ReadResult r;
    if (auto f = check_access(gpa, len, kind)) {
      r.fault = f;
      return r;
    }
    r.data.resize(len);
    for_each_block(gpa, len, [&](PhysAddr block_gpa, std::size_t lo, std::size_t n, std::size_t done) {
      const Block m = decrypt_guest_block(block_gpa);
      std::memcpy(r.data.data() + done, m.bytes.data() + lo, n);
    });
    return r;
  }

  /// Guest write; sub-block writes read-modify-write the containing block.
  std::optional<FaultInfo> vm_write(PhysAddr gpa, std::span<const std::uint8_t> bytes) {
    if (auto f = check_access(gpa, bytes.size(), AccessKind::Write)) return f;
    store_guest(gpa, bytes);
    return std::nullopt;
  }

  /// Launch-time image placement (the firmware encrypts the initial image);
  /// ignores NPT permissions and does not count as a guest access.
  void load_guest_image(PhysAddr gpa, std::span<const std::uint8_t> bytes) {
    for (std::size_t i = 0; i < bytes.size(); i += kPageSize)
      if (!translate(gpa + i)) throw FaultError(gpa + i);
    if (!bytes.empty() && !translate(gpa + bytes.size() - 1)) throw FaultError(gpa + bytes.size() - 1);
    store_guest(gpa, bytes);
  }

  Block guest_block_plaintext(PhysAddr gpa) const { return decrypt_guest_block(block_floor(gpa)); }

  // ---- snapshot ----------------------------------------------------------

  void save_snapshot(std::ostream& os) const {
    os.write(kSnapshotMagic, sizeof kSnapshotMagic);
    const std::uint8_t hdr[3] = {static_cast<std::uint8_t>(table_.address_width), static_cast<std::uint8_t>(mode_),
                                 static_cast<std::uint8_t>((flags_.sev_es ? 1 : 0) | (flags_.rmp_ownership ? 2 : 0) |
                                                           (flags_.interception_enabled ? 4 : 0))};
    os.write(reinterpret_cast<const char*>(hdr), sizeof hdr);
    for (const auto& [frame, f] : frames_) {
      std::uint8_t be[8];
      for (int i = 0; i < 8; ++i) be[i] = static_cast<std::uint8_t>(frame >> (56 - 8 * i));
      os.write(reinterpret_cast<const char*>(be), 8);
      os.write(reinterpret_cast<const char*>(f.data.data()), kPageSize);
    }
  }

  /// Replaces memory contents and flags from a snapshot. Address width and
  /// mode must match this machine.
  void load_snapshot(std::istream& is) {
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, kSnapshotMagic, 8) != 0) throw FormatError("snapshot magic mismatch");
    std::uint8_t hdr[3];
    if (!is.read(reinterpret_cast<char*>(hdr), 3)) throw FormatError("truncated snapshot header");
    if (hdr[0] != table_.address_width) throw FormatError("snapshot address width differs from machine");
    if (hdr[1] != static_cast<std::uint8_t>(mode_)) throw FormatError("snapshot cipher mode differs from machine");
    if (hdr[2] & ~7U) throw FormatError("unknown snapshot flag bits");
    std::map<std::uint64_t, std::array<std::uint8_t, kPageSize>> loaded;
    for (;;) {
      std::uint8_t be[8];
      is.read(reinterpret_cast<char*>(be), 8);
      if (is.gcount() == 0) break;
      if (is.gcount() != 8) throw FormatError("truncated frame record");
      std::uint64_t frame = 0;
      for (int i = 0; i < 8; ++i) frame = frame << 8 | be[i];
      auto& data = loaded[frame];
      if (!is.read(reinterpret_cast<char*>(data.data()), kPageSize)) throw FormatError("truncated frame data");
    }
    flags_.sev_es = hdr[2] & 1;
    flags_.rmp_ownership = hdr[2] & 2;
    flags_.interception_enabled = hdr[2] & 4;
    for (auto& [frame, data] : loaded) {
      add_frame(frame);
      frames_.at(frame).data = data;
    }
  }

 private:
  struct Frame {
    std::array<std::uint8_t, kPageSize> data{};
    OwnerId owner = kHypervisor;
  };

  const Frame& frame_at(PhysAddr hpa) const {
    auto it = frames_.find(page_of(hpa));
    if (it == frames_.end()) throw FaultError(hpa);
    return it->second;
  }
  Frame& frame_at(PhysAddr hpa) {
    auto it = frames_.find(page_of(hpa));
    if (it == frames_.end()) throw FaultError(hpa);
    return it->second;
  }

  const Aes128& aes_for(OwnerId owner) const { return owner == kHypervisor ? hv_aes_ : vm_aes_; }

  FaultInfo make_fault(PhysAddr gpa, AccessKind kind) const {
    return FaultInfo{flags_.sev_es ? page_base(gpa) : gpa, kind};
  }

  std::optional<FaultInfo> check_access(PhysAddr gpa, std::size_t len, AccessKind kind) {
    if (len == 0) return std::nullopt;
    const PhysAddr last = gpa + len - 1;
    for (std::uint64_t pf = page_of(gpa); pf <= page_of(last); ++pf) {
      const PhysAddr at = pf == page_of(gpa) ? gpa : (pf << kPageShift);
      auto it = npt_.find(pf);
      bool allowed = false;
      if (it != npt_.end()) {
        const Perms& p = it->second.perms;
        allowed = kind == AccessKind::Read ? p.read : kind == AccessKind::Write ? p.write : p.execute;
      }
      if (!allowed) {
        ++metrics_.page_faults;
        return make_fault(at, kind);
      }
    }
    return std::nullopt;
  }

  template <class F>
  void for_each_block(PhysAddr gpa, std::size_t len, F&& f) const {
    std::size_t done = 0;
    while (done < len) {
      const PhysAddr a = gpa + done;
      const PhysAddr blk = block_floor(a);
      const std::size_t lo = a - blk;
      const std::size_t n = std::min(len - done, kBlockSize - lo);
      f(blk, lo, n, done);
      done += n;
    }
  }

  Block decrypt_guest_block(PhysAddr block_gpa) const {
    const PhysAddr hpa = translate_or_throw(block_gpa);
    const OwnerId owner = is_shared(page_of(block_gpa)) ? kHypervisor : kVm;
    return decrypt_block(aes_for(owner), mode_, table_, hv_read_block(hpa), hpa);
  }

  void store_guest(PhysAddr gpa, std::span<const std::uint8_t> bytes) {
    for_each_block(gpa, bytes.size(), [&](PhysAddr block_gpa, std::size_t lo, std::size_t n, std::size_t done) {
      const PhysAddr hpa = translate_or_throw(block_gpa);
      const OwnerId owner = is_shared(page_of(block_gpa)) ? kHypervisor : kVm;
      Block m;
      if (n == kBlockSize) {
        std::memcpy(m.bytes.data(), bytes.data() + done, kBlockSize);
      } else {
        m = decrypt_block(aes_for(owner), mode_, table_, hv_read_block(hpa), hpa);
        std::memcpy(m.bytes.data() + lo, bytes.data() + done, n);
      }
      const Block c = encrypt_block(aes_for(owner), mode_, table_, m, hpa);
      std::memcpy(frame_at(hpa).data.data() + page_offset(hpa), c.bytes.data(), kBlockSize);
    });
  }

  TweakTable table_;
  CipherMode mode_;
  MachineFlags flags_;
  CipherKey hv_key_;
  CipherKey vm_key_;
  Aes128 hv_aes_;
  Aes128 vm_aes_;
  std::map<std::uint64_t, Frame> frames_;
  std::map<std::uint64_t, NptEntry> npt_;
  std::map<std::uint64_t, bool> shared_;
  Metrics metrics_;
};

}  // namespace sevlab
