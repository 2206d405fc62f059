#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace hps {

using EmbeddingKey = std::uint64_t;
using EmbeddingVector = std::vector<float>;

// Raised when a storage tier cannot complete an I/O operation (disk errors,
// unreadable segments, injected faults). Distinct from std::invalid_argument,
// which is reserved for malformed requests rejected before any mutation.
class TierFault : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Identifies one embedding table. The name doubles as the on-disk namespace
// and the topic name of the table's update stream; the dimension is fixed at
// creation time.
struct TableId {
  std::string name;
  std::uint32_t dimension = 0;
};

inline constexpr std::size_t kMaxTableNameLength = 255;

// Throws std::invalid_argument if the id violates the naming or dimension
// rules shared by every component that accepts a TableId.
void validate_table_id(const TableId& id);

struct LookupQuery {
  TableId table;
  std::vector<EmbeddingKey> keys;  // order is significant, duplicates allowed
};

struct LookupResult {
  std::uint32_t dimension = 0;
  // keys.size() * dimension floats, row i aligned with query key i.
  std::vector<float> vectors;
  // 1 where the row holds the configured default vector because the key was
  // absent from every tier, 0 otherwise. Same length as the query.
  std::vector<std::uint8_t> miss_flags;
};

// Shared result shape for volatile / persistent tier batch reads.
struct FetchResult {
  std::vector<EmbeddingKey> found_keys;
  std::vector<float> found_vectors;  // row i belongs to found_keys[i]
  std::vector<EmbeddingKey> missing_keys;
};

struct DedupResult {
  std::vector<EmbeddingKey> unique_keys;       // first-occurrence order
  std::vector<std::uint32_t> inverse_indices;  // query position -> unique row
};

// Collapses duplicate keys while remembering how to expand per-unique-key
// results back to query order.
DedupResult dedup_keys(std::span<const EmbeddingKey> keys);

// Throws std::invalid_argument when values contains a NaN or infinity.
// Ingestion boundaries call this so stored vectors are always finite.
void require_finite(std::span<const float> values, const char* context);

}  // namespace hps
