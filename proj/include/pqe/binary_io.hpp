#pragma once

// Little-endian encoding helpers and a CRC32 accumulator shared by the
// signal store and the parameter file.

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

namespace pqe::io {

class Crc32 {
 public:
  void update(std::span<const unsigned char> bytes) {
    while (!bytes.empty()) {
      const auto chunk = std::min<std::size_t>(bytes.size(), 1u << 30);
      value_ = ::crc32(value_, bytes.data(), static_cast<uInt>(chunk));
      bytes = bytes.subspan(chunk);
    }
  }
  std::uint32_t value() const { return static_cast<std::uint32_t>(value_); }

 private:
  uLong value_ = ::crc32(0L, Z_NULL, 0);
};

inline std::uint32_t crc32_of(std::span<const unsigned char> bytes) {
  Crc32 c;
  c.update(bytes);
  return c.value();
}

/// Growable little-endian byte buffer.
class Writer {
 public:
  template <class U>
    requires std::is_integral_v<U>
  void put(U v) {
    using Raw = std::make_unsigned_t<U>;
    auto raw = static_cast<Raw>(v);
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      bytes_.push_back(static_cast<unsigned char>(raw & 0xffu));
      if constexpr (sizeof(U) > 1) raw = static_cast<Raw>(raw >> 8);
    }
  }
  void put_f32(float v) { put(std::bit_cast<std::uint32_t>(v)); }
  void put_f64(double v) { put(std::bit_cast<std::uint64_t>(v)); }
  void put_bytes(std::span<const unsigned char> b) { bytes_.insert(bytes_.end(), b.begin(), b.end()); }
  void put_string(const std::string& s) {
    put(static_cast<std::uint16_t>(s.size()));
    bytes_.insert(bytes_.end(), s.begin(), s.end());
  }

  std::span<const unsigned char> bytes() const { return bytes_; }
  void clear() { bytes_.clear(); }
  std::size_t size() const { return bytes_.size(); }

 private:
  std::vector<unsigned char> bytes_;
};

/// Bounds-checked little-endian reader over a byte span; `fail` is invoked
/// (and must throw) when a read runs past the end.
class Reader {
 public:
  Reader(std::span<const unsigned char> bytes, std::function<void()> fail) : bytes_(bytes), fail_(std::move(fail)) {}

  template <class U>
    requires std::is_integral_v<U>
  U get() {
    need(sizeof(U));
    std::make_unsigned_t<U> raw = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      raw = static_cast<decltype(raw)>(raw | (static_cast<decltype(raw)>(bytes_[pos_ + i]) << (8 * i)));
    }
    pos_ += sizeof(U);
    return static_cast<U>(raw);
  }
  float get_f32() { return std::bit_cast<float>(get<std::uint32_t>()); }
  double get_f64() { return std::bit_cast<double>(get<std::uint64_t>()); }
  std::string get_string() {
    const auto n = get<std::uint16_t>();
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::span<const unsigned char> get_bytes(std::size_t n) {
    need(n);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) {
    if (bytes_.size() - pos_ < n) {
      fail_();
      throw std::out_of_range("read past end of buffer");
    }
  }
  std::span<const unsigned char> bytes_;
  std::size_t pos_ = 0;
  std::function<void()> fail_;
};

inline void write_all(std::ostream& os, std::span<const unsigned char> b) {
  os.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

/// Reads up to n bytes; returns how many were read.
inline std::size_t read_some(std::istream& is, std::span<unsigned char> b) {
  is.read(reinterpret_cast<char*>(b.data()), static_cast<std::streamsize>(b.size()));
  return static_cast<std::size_t>(is.gcount());
}

}  // namespace pqe::io
