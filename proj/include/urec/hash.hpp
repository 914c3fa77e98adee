#pragma once

#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <vector>

namespace urec {

// 64-bit FNV-1a. Used for content hashes (frozen-weight audits, checkpoint
// integrity, dataset manifests). Not cryptographic.
class Fnv1a64 {
public:
  Fnv1a64& update(const void* bytes, size_t len) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (size_t i = 0; i < len; ++i) {
      h_ ^= p[i];
      h_ *= 0x100000001b3ULL;
    }
    return *this;
  }

  template <typename T>
  Fnv1a64& update_value(const T& v) {
    static_assert(std::is_trivially_copyable_v<T>);
    return update(&v, sizeof(T));
  }

  template <typename T>
  Fnv1a64& update_span(std::span<const T> s) {
    static_assert(std::is_trivially_copyable_v<T>);
    return update(s.data(), s.size_bytes());
  }

  Fnv1a64& update_string(const std::string& s) { return update(s.data(), s.size()); }

  uint64_t digest() const { return h_; }

private:
  uint64_t h_ = 0xcbf29ce484222325ULL;
};

inline uint64_t fnv1a64(const void* bytes, size_t len) {
  return Fnv1a64().update(bytes, len).digest();
}

inline uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

inline std::string hash_hex(uint64_t h) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<size_t>(i)] = digits[h & 0xf];
    h >>= 4;
  }
  return out;
}

}  // namespace urec
