#pragma once

// Little-endian byte packing shared by the on-disk formats and the wire
// protocol. Floats travel as their IEEE-754 bit pattern in a u32.

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <vector>

namespace hps::detail {

inline void put_le16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

inline void put_le32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) {
    out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
}

inline void put_le64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) {
    out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
}

inline void put_f32(std::vector<std::uint8_t>& out, float v) {
  put_le32(out, std::bit_cast<std::uint32_t>(v));
}

inline void store_le32(std::uint8_t* p, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) {
    p[i] = static_cast<std::uint8_t>(v >> (8 * i));
  }
}

inline void store_le64(std::uint8_t* p, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) {
    p[i] = static_cast<std::uint8_t>(v >> (8 * i));
  }
}

inline std::uint16_t load_le16(const std::uint8_t* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

inline std::uint32_t load_le32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) |
         (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) |
         (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::uint64_t load_le64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) {
    v = (v << 8) | p[i];
  }
  return v;
}

inline float load_f32(const std::uint8_t* p) {
  return std::bit_cast<float>(load_le32(p));
}

// Bounds-checked sequential reader used by every decoder; truncated input
// surfaces as a false return instead of an out-of-range read.
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

  std::size_t remaining() const { return data_.size() - pos_; }
  bool done() const { return pos_ == data_.size(); }

  bool read_u8(std::uint8_t& v) {
    if (remaining() < 1) return false;
    v = data_[pos_++];
    return true;
  }
  bool read_u16(std::uint16_t& v) {
    if (remaining() < 2) return false;
    v = load_le16(data_.data() + pos_);
    pos_ += 2;
    return true;
  }
  bool read_u32(std::uint32_t& v) {
    if (remaining() < 4) return false;
    v = load_le32(data_.data() + pos_);
    pos_ += 4;
    return true;
  }
  bool read_u64(std::uint64_t& v) {
    if (remaining() < 8) return false;
    v = load_le64(data_.data() + pos_);
    pos_ += 8;
    return true;
  }
  bool read_f32(float& v) {
    if (remaining() < 4) return false;
    v = load_f32(data_.data() + pos_);
    pos_ += 4;
    return true;
  }
  bool read_bytes(std::size_t n, std::span<const std::uint8_t>& out) {
    if (remaining() < n) return false;
    out = data_.subspan(pos_, n);
    pos_ += n;
    return true;
  }

 private:
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

}  // namespace hps::detail
