#pragma once

#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>

namespace sevlab {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct AddressRangeError : Error {
  using Error::Error;
};

struct AlignmentError : Error {
  using Error::Error;
};

struct ValidationError : Error {
  using Error::Error;
};

/// Hypervisor-side access to memory that has no backing host frame.
struct FaultError : Error {
  explicit FaultError(std::uint64_t addr)
      : Error("no host frame backs address 0x" + hex(addr)), address(addr) {}
  std::uint64_t address;

 private:
  static std::string hex(std::uint64_t v) {
    char buf[24];
    std::snprintf(buf, sizeof buf, "%llx", static_cast<unsigned long long>(v));
    return buf;
  }
};

/// RMP-style ownership check rejected a hypervisor write or remap.
struct OwnershipViolation : Error {
  using Error::Error;
};

/// Caller is not allowed to perform the operation (wrong side of the trust boundary).
struct PermissionError : Error {
  using Error::Error;
};

struct EncodingError : Error {
  using Error::Error;
};

/// A GF(2) system with no solution.
struct InconsistentSystem : Error {
  using Error::Error;
};

/// Interception is disabled; GHCB register overrides are not honored.
struct InterceptionDisabled : Error {
  using Error::Error;
};

/// A solution no longer matches the machine (source ciphertext changed).
struct StaleSolution : Error {
  using Error::Error;
};

struct FormatError : Error {
  using Error::Error;
};

}  // namespace sevlab
