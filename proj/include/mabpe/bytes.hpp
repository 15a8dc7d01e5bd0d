#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mabpe {

using Bytes = std::vector<std::uint8_t>;
using ByteView = std::span<const std::uint8_t>;

// Base of every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::uint16_t read_u16(ByteView b, std::size_t off) {
  return static_cast<std::uint16_t>(b[off] | (b[off + 1] << 8));
}

inline std::uint32_t read_u32(ByteView b, std::size_t off) {
  return static_cast<std::uint32_t>(b[off]) |
         (static_cast<std::uint32_t>(b[off + 1]) << 8) |
         (static_cast<std::uint32_t>(b[off + 2]) << 16) |
         (static_cast<std::uint32_t>(b[off + 3]) << 24);
}

inline std::uint64_t read_u64(ByteView b, std::size_t off) {
  return static_cast<std::uint64_t>(read_u32(b, off)) |
         (static_cast<std::uint64_t>(read_u32(b, off + 4)) << 32);
}

inline void write_u16(std::span<std::uint8_t> b, std::size_t off, std::uint16_t v) {
  b[off] = static_cast<std::uint8_t>(v);
  b[off + 1] = static_cast<std::uint8_t>(v >> 8);
}

inline void write_u32(std::span<std::uint8_t> b, std::size_t off, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b[off + i] = static_cast<std::uint8_t>(v >> (8 * i));
}

inline void write_u64(std::span<std::uint8_t> b, std::size_t off, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) b[off + i] = static_cast<std::uint8_t>(v >> (8 * i));
}

constexpr std::uint64_t align_up(std::uint64_t v, std::uint64_t a) {
  return a == 0 ? v : (v + a - 1) / a * a;
}

constexpr bool is_pow2(std::uint64_t v) { return v != 0 && (v & (v - 1)) == 0; }

inline std::string to_hex(ByteView b) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s;
  s.reserve(b.size() * 2);
  for (auto c : b) {
    s.push_back(digits[c >> 4]);
    s.push_back(digits[c & 0xF]);
  }
  return s;
}

inline Bytes from_hex(std::string_view s) {
  auto nibble = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    return -1;
  };
  if (s.size() % 2 != 0) throw Error("odd-length hex string");
  Bytes out(s.size() / 2);
  for (std::size_t i = 0; i < out.size(); ++i) {
    int hi = nibble(s[2 * i]), lo = nibble(s[2 * i + 1]);
    if (hi < 0 || lo < 0) throw Error("invalid hex digit");
    out[i] = static_cast<std::uint8_t>(hi << 4 | lo);
  }
  return out;
}

}  // namespace detail

// Half-open byte range [offset, offset + size) in a file.
struct FileRange {
  std::uint64_t offset = 0;
  std::uint64_t size = 0;

  std::uint64_t end() const { return offset + size; }
  bool contains(std::uint64_t pos) const { return pos >= offset && pos < end(); }
  bool operator==(const FileRange&) const = default;
};

// Sample bytes plus an opaque identifier. Never empty.
class RawBinary {
 public:
  explicit RawBinary(Bytes bytes, std::string origin_id = {})
      : bytes_(std::move(bytes)), origin_id_(std::move(origin_id)) {
    if (bytes_.empty()) throw Error("RawBinary must not be empty");
  }

  ByteView bytes() const { return bytes_; }
  std::size_t size() const { return bytes_.size(); }
  const std::string& origin_id() const { return origin_id_; }
  const Bytes& vec() const { return bytes_; }

  bool operator==(const RawBinary& o) const { return bytes_ == o.bytes_; }

 private:
  Bytes bytes_;
  std::string origin_id_;
};

}  // namespace mabpe
