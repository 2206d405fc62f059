#pragma once

// XXH64 (the 64-bit xxHash variant). Implemented here because key placement
// must be bit-identical to the reference algorithm across builds; unit tests
// pin the output against vectors produced by the canonical implementation.

#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>

namespace hps {

namespace detail {

inline constexpr std::uint64_t kXxhPrime1 = 0x9E3779B185EBCA87ull;
inline constexpr std::uint64_t kXxhPrime2 = 0xC2B2AE3D27D4EB4Full;
inline constexpr std::uint64_t kXxhPrime3 = 0x165667B19E3779F9ull;
inline constexpr std::uint64_t kXxhPrime4 = 0x85EBCA77C2B2AE63ull;
inline constexpr std::uint64_t kXxhPrime5 = 0x27D4EB2F165667C5ull;

inline std::uint64_t xxh_read_le64(const unsigned char* p) noexcept {
  if constexpr (std::endian::native == std::endian::little) {
    std::uint64_t v;
    std::memcpy(&v, p, sizeof(v));
    return v;
  } else {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) {
      v = (v << 8) | p[i];
    }
    return v;
  }
}

inline std::uint32_t xxh_read_le32(const unsigned char* p) noexcept {
  if constexpr (std::endian::native == std::endian::little) {
    std::uint32_t v;
    std::memcpy(&v, p, sizeof(v));
    return v;
  } else {
    return static_cast<std::uint32_t>(p[0]) |
           (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) |
           (static_cast<std::uint32_t>(p[3]) << 24);
  }
}

inline std::uint64_t xxh_round(std::uint64_t acc, std::uint64_t lane) noexcept {
  return std::rotl(acc + lane * kXxhPrime2, 31) * kXxhPrime1;
}

inline std::uint64_t xxh_merge_round(std::uint64_t h, std::uint64_t v) noexcept {
  h ^= xxh_round(0, v);
  return h * kXxhPrime1 + kXxhPrime4;
}

}  // namespace detail

inline std::uint64_t xxh64(const void* input, std::size_t length,
                           std::uint64_t seed) noexcept {
  using namespace detail;
  const auto* p = static_cast<const unsigned char*>(input);
  const unsigned char* const end = p + length;
  std::uint64_t h;

  if (length >= 32) {
    std::uint64_t v1 = seed + kXxhPrime1 + kXxhPrime2;
    std::uint64_t v2 = seed + kXxhPrime2;
    std::uint64_t v3 = seed;
    std::uint64_t v4 = seed - kXxhPrime1;
    const unsigned char* const limit = end - 32;
    do {
      v1 = xxh_round(v1, xxh_read_le64(p));
      v2 = xxh_round(v2, xxh_read_le64(p + 8));
      v3 = xxh_round(v3, xxh_read_le64(p + 16));
      v4 = xxh_round(v4, xxh_read_le64(p + 24));
      p += 32;
    } while (p <= limit);
    h = std::rotl(v1, 1) + std::rotl(v2, 7) + std::rotl(v3, 12) +
        std::rotl(v4, 18);
    h = xxh_merge_round(h, v1);
    h = xxh_merge_round(h, v2);
    h = xxh_merge_round(h, v3);
    h = xxh_merge_round(h, v4);
  } else {
    h = seed + kXxhPrime5;
  }

  h += static_cast<std::uint64_t>(length);

  while (p + 8 <= end) {
    h ^= xxh_round(0, xxh_read_le64(p));
    h = std::rotl(h, 27) * kXxhPrime1 + kXxhPrime4;
    p += 8;
  }
  if (p + 4 <= end) {
    h ^= static_cast<std::uint64_t>(xxh_read_le32(p)) * kXxhPrime1;
    h = std::rotl(h, 23) * kXxhPrime2 + kXxhPrime3;
    p += 4;
  }
  while (p < end) {
    h ^= static_cast<std::uint64_t>(*p) * kXxhPrime5;
    h = std::rotl(h, 11) * kXxhPrime1;
    ++p;
  }

  h ^= h >> 33;
  h *= kXxhPrime2;
  h ^= h >> 29;
  h *= kXxhPrime3;
  h ^= h >> 32;
  return h;
}

// Every placement decision hashes the 8-byte little-endian encoding of the
// key, so the same key lands in the same slabset / partition on every host.
inline std::uint64_t xxh64_key(std::uint64_t key, std::uint64_t seed) noexcept {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) {
    buf[i] = static_cast<unsigned char>(key >> (8 * i));
  }
  return xxh64(buf, sizeof(buf), seed);
}

// Seeds for the three independent placement hashes.
inline constexpr std::uint64_t kSlabsetSeed = 0x5EED5E7ull;
inline constexpr std::uint64_t kSlabSeed = 0x51ABull;
inline constexpr std::uint64_t kPartitionSeed = 0ull;

}  // namespace hps
