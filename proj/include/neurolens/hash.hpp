#pragma once

#include <cstdint>
#include <cstdio>
#include <span>
#include <string>
#include <string_view>

namespace neurolens {

/// 64-bit FNV-1a, used for provenance hashes (not for security).
class Fnv1a64 {
 public:
  void update(std::span<const unsigned char> bytes) {
    for (unsigned char b : bytes) {
      h_ ^= b;
      h_ *= 0x100000001b3ULL;
    }
  }
  void update(std::string_view s) {
    update(std::span<const unsigned char>(reinterpret_cast<const unsigned char*>(s.data()), s.size()));
  }
  std::uint64_t digest() const noexcept { return h_; }
  std::string hex() const { return to_hex(h_); }

  static std::string to_hex(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
  }

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

inline std::string fnv1a_hex(std::string_view s) {
  Fnv1a64 h;
  h.update(s);
  return h.hex();
}

}  // namespace neurolens
