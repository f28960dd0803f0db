#pragma once

// Little-endian primitive readers/writers shared by the dataset and
// checkpoint containers.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace idd {

/// Thrown for malformed, truncated or incompatible container files.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace idd

namespace idd::io {

class Writer {
 public:
  explicit Writer(std::ostream& os) : os_(os) {}

  void bytes(const void* p, std::size_t n) { os_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
  void u32(std::uint32_t v) { put_le(v); }
  void u64(std::uint64_t v) { put_le(v); }
  void f32(float v) { put_le(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { put_le(std::bit_cast<std::uint64_t>(v)); }
  void f32_array(std::span<const float> v) {
    if constexpr (std::endian::native == std::endian::little) {
      bytes(v.data(), v.size() * sizeof(float));
    } else {
      for (float x : v) f32(x);
    }
  }
  void str(const std::string& s) {
    u64(s.size());
    bytes(s.data(), s.size());
  }

 private:
  template <typename U>
  void put_le(U v) {
    unsigned char buf[sizeof(U)];
    for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
    bytes(buf, sizeof(U));
  }
  std::ostream& os_;
};

class Reader {
 public:
  Reader(std::istream& is, std::string source) : is_(is), source_(std::move(source)) {}

  bool try_bytes(void* p, std::size_t n) {
    is_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    return static_cast<std::size_t>(is_.gcount()) == n;
  }
  void bytes(void* p, std::size_t n) {
    if (!try_bytes(p, n)) throw FormatError(source_ + ": truncated file");
  }
  std::uint32_t u32() { return get_le<std::uint32_t>(); }
  std::uint64_t u64() { return get_le<std::uint64_t>(); }
  float f32() { return std::bit_cast<float>(get_le<std::uint32_t>()); }
  double f64() { return std::bit_cast<double>(get_le<std::uint64_t>()); }
  std::vector<float> f32_array(std::size_t n) {
    std::vector<float> v(n);
    if constexpr (std::endian::native == std::endian::little) {
      bytes(v.data(), n * sizeof(float));
    } else {
      for (auto& x : v) x = f32();
    }
    return v;
  }
  std::string str(std::size_t max_len = std::size_t{1} << 24) {
    const std::uint64_t n = u64();
    if (n > max_len) throw FormatError(source_ + ": implausible string length");
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }

 private:
  template <typename U>
  U get_le() {
    unsigned char buf[sizeof(U)];
    bytes(buf, sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
    return v;
  }
  std::istream& is_;
  std::string source_;
};

}  // namespace idd::io
