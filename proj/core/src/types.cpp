#include "hps/types.hpp"

#include <cmath>
#include <unordered_map>

namespace hps {

void validate_table_id(const TableId& id) {
  if (id.name.empty()) {
    throw std::invalid_argument("table name must not be empty");
  }
  if (id.name.size() > kMaxTableNameLength) {
    throw std::invalid_argument("table name exceeds 255 bytes: " + id.name);
  }
  if (id.dimension == 0) {
    throw std::invalid_argument("table dimension must be positive: " + id.name);
  }
}

DedupResult dedup_keys(std::span<const EmbeddingKey> keys) {
  DedupResult out;
  out.inverse_indices.resize(keys.size());
  std::unordered_map<EmbeddingKey, std::uint32_t> seen;
  seen.reserve(keys.size());
  for (std::size_t i = 0; i < keys.size(); ++i) {
    auto [it, inserted] =
        seen.emplace(keys[i], static_cast<std::uint32_t>(out.unique_keys.size()));
    if (inserted) {
      out.unique_keys.push_back(keys[i]);
    }
    out.inverse_indices[i] = it->second;
  }
  return out;
}

void require_finite(std::span<const float> values, const char* context) {
  for (float v : values) {
    if (!std::isfinite(v)) {
      throw std::invalid_argument(std::string(context) +
                                  ": embedding values must be finite");
    }
  }
}

}  // namespace hps
