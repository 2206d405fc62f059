#pragma once

// Synthetic embedding workloads: a power-law key sampler with a shuffled
// rank-to-key mapping (so hot keys are spread over the key space), a bulk
// table generator for the persistent tier, and a popularity classifier used
// to sanity-check sampled streams.

#include <cstdint>
#include <filesystem>
#include <span>
#include <unordered_map>
#include <vector>

#include "hps/persistent_store.hpp"
#include "hps/types.hpp"

namespace hps {

struct PowerLawSpec {
  double alpha = 1.2;
  std::uint64_t keyspace = 0;  // keys are 0 .. keyspace-1
  std::uint64_t permute_seed = 0;
};

class PowerLawSampler {
 public:
  explicit PowerLawSampler(const PowerLawSpec& spec);

  // Deterministic in (count, draw_seed): rank r is drawn with probability
  // proportional to r^-alpha via inverse-CDF sampling, then mapped through
  // the permutation.
  std::vector<EmbeddingKey> sample(std::size_t count,
                                   std::uint64_t draw_seed) const;

  EmbeddingKey key_at_rank(std::uint64_t rank) const;  // rank in [1, keyspace]
  double rank_probability(std::uint64_t rank) const;
  const PowerLawSpec& spec() const { return spec_; }

 private:
  PowerLawSpec spec_;
  double total_weight_ = 0.0;
  std::vector<double> cdf_;
  std::vector<EmbeddingKey> rank_to_key_;
};

// Creates the table (if needed) and fills it with keys 0 .. num_keys-1 and
// reproducible uniform [-1, 1) vectors, then flushes.
void gen_table(PersistentStore& pdb, const TableId& table,
               std::uint64_t num_keys, std::uint64_t seed);

enum class KeyCategory {
  Frequent,
  Stochastic,
  Rare,
};

struct CategoryThresholds {
  // A key is Frequent when it appears in at least this fraction of batches,
  // Rare when in at most rare_max_fraction, Stochastic otherwise.
  double frequent_min_fraction = 0.9;
  double rare_max_fraction = 0.01;
};

std::unordered_map<EmbeddingKey, KeyCategory> categorize_keys(
    std::span<const EmbeddingKey> stream, std::size_t batch_size,
    const CategoryThresholds& thresholds = {});

// Key streams on disk are flat little-endian u64 arrays.
void write_key_stream(const std::filesystem::path& path,
                      std::span<const EmbeddingKey> keys);
std::vector<EmbeddingKey> read_key_stream(const std::filesystem::path& path);

}  // namespace hps
