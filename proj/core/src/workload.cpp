#include "hps/workload.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <stdexcept>

#include "hps/detail/bytes.hpp"

namespace hps {

namespace {

// Bit-stable uniform in [0, 1): the top 53 bits of the generator output form
// the mantissa. std::uniform_real_distribution is implementation-defined, so
// it has no place in a reproducible stream.
double uniform_unit(std::mt19937_64& gen) {
  return static_cast<double>(gen() >> 11) * 0x1.0p-53;
}

}  // namespace

PowerLawSampler::PowerLawSampler(const PowerLawSpec& spec) : spec_(spec) {
  if (spec_.keyspace == 0) {
    throw std::invalid_argument("keyspace must be positive");
  }
  if (!(spec_.alpha > 0.0)) {
    throw std::invalid_argument("alpha must be positive");
  }

  cdf_.resize(spec_.keyspace);
  double running = 0.0;
  for (std::uint64_t r = 1; r <= spec_.keyspace; ++r) {
    running += std::pow(static_cast<double>(r), -spec_.alpha);
    cdf_[r - 1] = running;
  }
  total_weight_ = running;
  for (double& c : cdf_) {
    c /= total_weight_;
  }
  cdf_.back() = 1.0;

  rank_to_key_.resize(spec_.keyspace);
  for (std::uint64_t i = 0; i < spec_.keyspace; ++i) {
    rank_to_key_[i] = i;
  }
  // Fisher-Yates with a fixed generator; std::shuffle is not pinned by the
  // standard and would break cross-build determinism.
  std::mt19937_64 gen(spec_.permute_seed);
  for (std::uint64_t i = spec_.keyspace - 1; i > 0; --i) {
    const std::uint64_t j = gen() % (i + 1);
    std::swap(rank_to_key_[i], rank_to_key_[j]);
  }
}

std::vector<EmbeddingKey> PowerLawSampler::sample(
    std::size_t count, std::uint64_t draw_seed) const {
  std::vector<EmbeddingKey> out;
  out.reserve(count);
  std::mt19937_64 gen(draw_seed);
  for (std::size_t i = 0; i < count; ++i) {
    const double u = uniform_unit(gen);
    const auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
    const std::uint64_t rank =
        static_cast<std::uint64_t>(it - cdf_.begin()) + 1;
    out.push_back(key_at_rank(std::min(rank, spec_.keyspace)));
  }
  return out;
}

EmbeddingKey PowerLawSampler::key_at_rank(std::uint64_t rank) const {
  if (rank == 0 || rank > spec_.keyspace) {
    throw std::invalid_argument("rank out of range");
  }
  return rank_to_key_[rank - 1];
}

double PowerLawSampler::rank_probability(std::uint64_t rank) const {
  if (rank == 0 || rank > spec_.keyspace) {
    throw std::invalid_argument("rank out of range");
  }
  return std::pow(static_cast<double>(rank), -spec_.alpha) / total_weight_;
}

void gen_table(PersistentStore& pdb, const TableId& table,
               std::uint64_t num_keys, std::uint64_t seed) {
  pdb.create_table(table);
  const std::uint32_t dim = table.dimension;
  std::mt19937_64 gen(seed);

  constexpr std::uint64_t kBatch = 4096;
  std::vector<EmbeddingKey> keys;
  std::vector<float> vectors;
  for (std::uint64_t start = 0; start < num_keys; start += kBatch) {
    const std::uint64_t n = std::min(kBatch, num_keys - start);
    keys.resize(n);
    vectors.resize(n * dim);
    for (std::uint64_t i = 0; i < n; ++i) {
      keys[i] = start + i;
      for (std::uint32_t c = 0; c < dim; ++c) {
        vectors[i * dim + c] =
            static_cast<float>(2.0 * uniform_unit(gen) - 1.0);
      }
    }
    pdb.put(table.name, keys, vectors);
  }
  pdb.flush(table.name);
}

std::unordered_map<EmbeddingKey, KeyCategory> categorize_keys(
    std::span<const EmbeddingKey> stream, std::size_t batch_size,
    const CategoryThresholds& thresholds) {
  if (batch_size == 0) {
    throw std::invalid_argument("batch size must be positive");
  }
  std::unordered_map<EmbeddingKey, KeyCategory> out;
  if (stream.empty()) {
    return out;
  }
  const std::size_t batches = (stream.size() + batch_size - 1) / batch_size;

  struct Presence {
    std::size_t batches_seen = 0;
    std::size_t last_batch = SIZE_MAX;
  };
  std::unordered_map<EmbeddingKey, Presence> presence;
  for (std::size_t i = 0; i < stream.size(); ++i) {
    const std::size_t b = i / batch_size;
    Presence& p = presence[stream[i]];
    if (p.last_batch != b) {
      p.last_batch = b;
      ++p.batches_seen;
    }
  }

  out.reserve(presence.size());
  for (const auto& [key, p] : presence) {
    const double fraction =
        static_cast<double>(p.batches_seen) / static_cast<double>(batches);
    KeyCategory cat = KeyCategory::Stochastic;
    if (fraction >= thresholds.frequent_min_fraction) {
      cat = KeyCategory::Frequent;
    } else if (fraction <= thresholds.rare_max_fraction) {
      cat = KeyCategory::Rare;
    }
    out.emplace(key, cat);
  }
  return out;
}

void write_key_stream(const std::filesystem::path& path,
                      std::span<const EmbeddingKey> keys) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw TierFault("cannot open key stream file " + path.string());
  }
  std::vector<std::uint8_t> buf;
  buf.reserve(keys.size() * 8);
  for (const EmbeddingKey key : keys) {
    detail::put_le64(buf, key);
  }
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size()));
  if (!out) {
    throw TierFault("failed writing key stream file " + path.string());
  }
}

std::vector<EmbeddingKey> read_key_stream(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw TierFault("cannot open key stream file " + path.string());
  }
  std::vector<std::uint8_t> data((std::istreambuf_iterator<char>(in)),
                                 std::istreambuf_iterator<char>());
  if (data.size() % 8 != 0) {
    throw TierFault("key stream file is not a multiple of 8 bytes: " +
                    path.string());
  }
  std::vector<EmbeddingKey> keys(data.size() / 8);
  for (std::size_t i = 0; i < keys.size(); ++i) {
    keys[i] = detail::load_le64(data.data() + i * 8);
  }
  return keys;
}

}  // namespace hps
