#pragma once

// Framed binary protocol. Every frame on the wire is
//
//   [u32 body_len][body]
//
// with all integers and floats little-endian. Request bodies are
//
//   "HPS1" [u8 opcode][u16 name_len][name][u32 count][payload]
//
//   LOOKUP  (1): payload = count * [u64 key]
//   UPDATE  (2): payload = count * ([u64 key][u32 dim][dim * f32])
//   REFRESH (3): count = 0, no payload
//   STATS   (4): count = 0, no payload
//
// Response bodies start with [u8 status]; on OK the payload depends on the
// request opcode:
//
//   LOOKUP:  [u32 count][u32 dim][count * dim * f32][ceil(count/8) bitmap]
//            bitmap bit i (byte i/8, bit i%8) set = row i is a default
//            vector because the key was absent from every tier
//   UPDATE:  [u64 last_seq]
//   REFRESH: [u64 refreshed][u64 unresolved]
//   STATS:   [u32 hit_rate_ppm][u64 occupied][u64 capacity][u64 cache_hits]
//            [u64 cache_misses][u64 vdb_hits][u64 pdb_hits][u64 tier_missing]
//
// Non-OK responses carry no payload. Decoders are strict: bad magic, short
// buffers, trailing bytes, oversized names, zero/oversized dims, and
// non-finite floats in UPDATE all reject the frame.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hps/types.hpp"

namespace hps {

inline constexpr char kWireMagic[4] = {'H', 'P', 'S', '1'};
inline constexpr std::uint32_t kMaxFrameBytes = 64u << 20;
inline constexpr std::uint32_t kMaxWireDimension = 65536;

enum class Opcode : std::uint8_t {
  Lookup = 1,
  Update = 2,
  Refresh = 3,
  Stats = 4,
};

enum class Status : std::uint8_t {
  Ok = 0,
  TierFaultError = 1,
  BadRequest = 2,
};

struct WireRequest {
  Opcode opcode = Opcode::Lookup;
  std::string table;
  std::vector<EmbeddingKey> keys;  // LOOKUP and UPDATE
  std::uint32_t dim = 0;           // UPDATE: per-record dimension
  std::vector<float> vectors;      // UPDATE: keys.size() * dim floats

  bool operator==(const WireRequest&) const = default;
};

struct WireStats {
  std::uint32_t hit_rate_ppm = 0;  // cache hits per million probed keys
  std::uint64_t occupied = 0;
  std::uint64_t capacity = 0;
  std::uint64_t cache_hits = 0;
  std::uint64_t cache_misses = 0;
  std::uint64_t vdb_hits = 0;
  std::uint64_t pdb_hits = 0;
  std::uint64_t tier_missing = 0;

  bool operator==(const WireStats&) const = default;
};

struct WireResponse {
  Status status = Status::Ok;
  std::uint32_t count = 0;
  std::uint32_t dim = 0;
  std::vector<float> vectors;
  std::vector<std::uint8_t> miss_bitmap;
  std::uint64_t last_seq = 0;    // UPDATE
  std::uint64_t refreshed = 0;   // REFRESH
  std::uint64_t unresolved = 0;  // REFRESH
  WireStats stats;               // STATS

  bool operator==(const WireResponse&) const = default;
};

inline void set_miss_bit(std::vector<std::uint8_t>& bitmap, std::size_t i) {
  bitmap[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
}
inline bool get_miss_bit(std::span<const std::uint8_t> bitmap, std::size_t i) {
  return (bitmap[i / 8] >> (i % 8)) & 1u;
}

// Frame encoders prepend the u32 length prefix.
std::vector<std::uint8_t> encode_request_frame(const WireRequest& request);
std::vector<std::uint8_t> encode_response_frame(Opcode opcode,
                                                const WireResponse& response);

// Body decoders take the frame body (without the length prefix). On failure
// they return nullopt and, when error is non-null, a short reason.
std::optional<WireRequest> decode_request_body(
    std::span<const std::uint8_t> body, std::string* error = nullptr);
std::optional<WireResponse> decode_response_body(
    Opcode opcode, std::span<const std::uint8_t> body);

}  // namespace hps
