#include "hps/wire.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "hps/detail/bytes.hpp"

namespace hps {

namespace {

void fail(std::string* error, const char* reason) {
  if (error) {
    *error = reason;
  }
}

void finish_frame(std::vector<std::uint8_t>& frame) {
  const std::uint32_t body_len = static_cast<std::uint32_t>(frame.size() - 4);
  detail::store_le32(frame.data(), body_len);
}

}  // namespace

std::vector<std::uint8_t> encode_request_frame(const WireRequest& request) {
  std::vector<std::uint8_t> frame(4, 0);  // length patched at the end
  frame.insert(frame.end(), kWireMagic, kWireMagic + 4);
  frame.push_back(static_cast<std::uint8_t>(request.opcode));
  detail::put_le16(frame, static_cast<std::uint16_t>(request.table.size()));
  frame.insert(frame.end(), request.table.begin(), request.table.end());

  switch (request.opcode) {
    case Opcode::Lookup:
      detail::put_le32(frame, static_cast<std::uint32_t>(request.keys.size()));
      for (const EmbeddingKey key : request.keys) {
        detail::put_le64(frame, key);
      }
      break;
    case Opcode::Update:
      detail::put_le32(frame, static_cast<std::uint32_t>(request.keys.size()));
      for (std::size_t i = 0; i < request.keys.size(); ++i) {
        detail::put_le64(frame, request.keys[i]);
        detail::put_le32(frame, request.dim);
        for (std::uint32_t c = 0; c < request.dim; ++c) {
          detail::put_f32(frame, request.vectors[i * request.dim + c]);
        }
      }
      break;
    case Opcode::Refresh:
    case Opcode::Stats:
      detail::put_le32(frame, 0);
      break;
  }
  finish_frame(frame);
  return frame;
}

std::optional<WireRequest> decode_request_body(
    std::span<const std::uint8_t> body, std::string* error) {
  detail::ByteReader reader(body);
  std::span<const std::uint8_t> magic;
  if (!reader.read_bytes(4, magic) ||
      std::memcmp(magic.data(), kWireMagic, 4) != 0) {
    fail(error, "bad magic");
    return std::nullopt;
  }
  std::uint8_t opcode_raw = 0;
  if (!reader.read_u8(opcode_raw)) {
    fail(error, "missing opcode");
    return std::nullopt;
  }
  if (opcode_raw < 1 || opcode_raw > 4) {
    fail(error, "unknown opcode");
    return std::nullopt;
  }
  WireRequest req;
  req.opcode = static_cast<Opcode>(opcode_raw);

  std::uint16_t name_len = 0;
  if (!reader.read_u16(name_len)) {
    fail(error, "missing table name length");
    return std::nullopt;
  }
  if (name_len == 0 || name_len > kMaxTableNameLength) {
    fail(error, "table name length out of range");
    return std::nullopt;
  }
  std::span<const std::uint8_t> name_bytes;
  if (!reader.read_bytes(name_len, name_bytes)) {
    fail(error, "truncated table name");
    return std::nullopt;
  }
  req.table.assign(name_bytes.begin(), name_bytes.end());

  std::uint32_t count = 0;
  if (!reader.read_u32(count)) {
    fail(error, "missing count");
    return std::nullopt;
  }

  switch (req.opcode) {
    case Opcode::Lookup: {
      if (reader.remaining() != 8ull * count) {
        fail(error, "lookup payload length mismatch");
        return std::nullopt;
      }
      req.keys.resize(count);
      for (std::uint32_t i = 0; i < count; ++i) {
        reader.read_u64(req.keys[i]);
      }
      break;
    }
    case Opcode::Update: {
      // each record is at least key + dim + one float; a count the payload
      // cannot hold must not drive any allocation
      if (reader.remaining() < 16ull * count) {
        fail(error, "update payload length mismatch");
        return std::nullopt;
      }
      req.keys.reserve(count);
      for (std::uint32_t i = 0; i < count; ++i) {
        EmbeddingKey key = 0;
        std::uint32_t dim = 0;
        if (!reader.read_u64(key) || !reader.read_u32(dim)) {
          fail(error, "truncated update record");
          return std::nullopt;
        }
        if (dim == 0 || dim > kMaxWireDimension) {
          fail(error, "update record dimension out of range");
          return std::nullopt;
        }
        if (i == 0) {
          req.dim = dim;
          req.vectors.reserve(std::min<std::size_t>(
              static_cast<std::size_t>(count) * dim,
              reader.remaining() / sizeof(float)));
        } else if (dim != req.dim) {
          fail(error, "update records disagree on dimension");
          return std::nullopt;
        }
        for (std::uint32_t c = 0; c < dim; ++c) {
          float v = 0;
          if (!reader.read_f32(v)) {
            fail(error, "truncated update vector");
            return std::nullopt;
          }
          if (!std::isfinite(v)) {
            fail(error, "update vector holds a non-finite value");
            return std::nullopt;
          }
          req.vectors.push_back(v);
        }
        req.keys.push_back(key);
      }
      break;
    }
    case Opcode::Refresh:
    case Opcode::Stats:
      if (count != 0) {
        fail(error, "unexpected count");
        return std::nullopt;
      }
      break;
  }

  if (!reader.done()) {
    fail(error, "trailing bytes after payload");
    return std::nullopt;
  }
  return req;
}

std::vector<std::uint8_t> encode_response_frame(Opcode opcode,
                                                const WireResponse& response) {
  std::vector<std::uint8_t> frame(4, 0);
  frame.push_back(static_cast<std::uint8_t>(response.status));
  if (response.status == Status::Ok) {
    switch (opcode) {
      case Opcode::Lookup: {
        detail::put_le32(frame, response.count);
        detail::put_le32(frame, response.dim);
        for (const float v : response.vectors) {
          detail::put_f32(frame, v);
        }
        frame.insert(frame.end(), response.miss_bitmap.begin(),
                     response.miss_bitmap.end());
        break;
      }
      case Opcode::Update:
        detail::put_le64(frame, response.last_seq);
        break;
      case Opcode::Refresh:
        detail::put_le64(frame, response.refreshed);
        detail::put_le64(frame, response.unresolved);
        break;
      case Opcode::Stats:
        detail::put_le32(frame, response.stats.hit_rate_ppm);
        detail::put_le64(frame, response.stats.occupied);
        detail::put_le64(frame, response.stats.capacity);
        detail::put_le64(frame, response.stats.cache_hits);
        detail::put_le64(frame, response.stats.cache_misses);
        detail::put_le64(frame, response.stats.vdb_hits);
        detail::put_le64(frame, response.stats.pdb_hits);
        detail::put_le64(frame, response.stats.tier_missing);
        break;
    }
  }
  finish_frame(frame);
  return frame;
}

std::optional<WireResponse> decode_response_body(
    Opcode opcode, std::span<const std::uint8_t> body) {
  detail::ByteReader reader(body);
  std::uint8_t status_raw = 0;
  if (!reader.read_u8(status_raw) || status_raw > 2) {
    return std::nullopt;
  }
  WireResponse resp;
  resp.status = static_cast<Status>(status_raw);
  if (resp.status != Status::Ok) {
    return reader.done() ? std::optional<WireResponse>(resp) : std::nullopt;
  }
  switch (opcode) {
    case Opcode::Lookup: {
      if (!reader.read_u32(resp.count) || !reader.read_u32(resp.dim)) {
        return std::nullopt;
      }
      const std::uint64_t vector_floats =
          static_cast<std::uint64_t>(resp.count) * resp.dim;
      const std::uint64_t bitmap_bytes = (resp.count + 7) / 8;
      if (reader.remaining() != vector_floats * 4 + bitmap_bytes) {
        return std::nullopt;
      }
      resp.vectors.resize(vector_floats);
      for (std::uint64_t i = 0; i < vector_floats; ++i) {
        reader.read_f32(resp.vectors[i]);
      }
      std::span<const std::uint8_t> bitmap;
      reader.read_bytes(bitmap_bytes, bitmap);
      resp.miss_bitmap.assign(bitmap.begin(), bitmap.end());
      break;
    }
    case Opcode::Update:
      if (!reader.read_u64(resp.last_seq)) {
        return std::nullopt;
      }
      break;
    case Opcode::Refresh:
      if (!reader.read_u64(resp.refreshed) ||
          !reader.read_u64(resp.unresolved)) {
        return std::nullopt;
      }
      break;
    case Opcode::Stats:
      if (!reader.read_u32(resp.stats.hit_rate_ppm) ||
          !reader.read_u64(resp.stats.occupied) ||
          !reader.read_u64(resp.stats.capacity) ||
          !reader.read_u64(resp.stats.cache_hits) ||
          !reader.read_u64(resp.stats.cache_misses) ||
          !reader.read_u64(resp.stats.vdb_hits) ||
          !reader.read_u64(resp.stats.pdb_hits) ||
          !reader.read_u64(resp.stats.tier_missing)) {
        return std::nullopt;
      }
      break;
  }
  return reader.done() ? std::optional<WireResponse>(resp) : std::nullopt;
}

}  // namespace hps
