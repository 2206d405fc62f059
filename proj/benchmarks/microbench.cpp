#include <benchmark/benchmark.h>

#include <random>
#include <span>
#include <unordered_set>
#include <vector>

#include "hps/slab_cache.hpp"
#include "hps/types.hpp"
#include "hps/volatile_store.hpp"
#include "hps/workload.hpp"
#include "hps/xxhash64.hpp"

namespace {

constexpr std::uint32_t kDim = 64;
constexpr std::size_t kBatch = 1024;

hps::SlabCacheConfig bench_cache_config(std::size_t slabsets) {
  hps::SlabCacheConfig config;
  config.slabset_count = slabsets;
  config.slabs_per_set = 2;
  config.dimension = kDim;
  config.worker_pool_size = 2;
  return config;
}

// Cache warmed so that roughly 90% of probes hit, which is the operating
// point the serving path cares about.
void BM_CacheQuery(benchmark::State& state) {
  const std::size_t slabsets = 256;
  hps::SlabCache cache(bench_cache_config(slabsets));
  const std::size_t resident = cache.capacity();

  std::vector<hps::EmbeddingKey> warm(resident);
  for (std::size_t i = 0; i < resident; ++i) {
    warm[i] = i;
  }
  std::vector<float> rows(resident * kDim, 0.5f);
  for (std::size_t start = 0; start < resident; start += kBatch) {
    const std::size_t n = std::min(kBatch, resident - start);
    cache.replace({warm.data() + start, n}, {rows.data(), n * kDim});
  }

  hps::PowerLawSpec spec;
  spec.alpha = 1.2;
  spec.keyspace = resident + resident / 9;  // ~90% of draws are resident keys
  spec.permute_seed = 7;
  hps::PowerLawSampler sampler(spec);
  const auto stream = sampler.sample(kBatch * 64, 11);

  std::vector<float> out(kBatch * kDim);
  std::size_t offset = 0;
  for (auto _ : state) {
    const std::span<const hps::EmbeddingKey> batch(stream.data() + offset,
                                                   kBatch);
    benchmark::DoNotOptimize(cache.query(batch, out));
    offset = (offset + kBatch) % (stream.size() - kBatch);
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) *
                          static_cast<std::int64_t>(kBatch));
}
BENCHMARK(BM_CacheQuery);

void BM_CacheReplace(benchmark::State& state) {
  hps::SlabCache cache(bench_cache_config(256));
  std::mt19937_64 gen(3);
  std::vector<hps::EmbeddingKey> keys(kBatch);
  std::vector<float> rows(kBatch * kDim, 1.0f);
  for (auto _ : state) {
    state.PauseTiming();
    std::unordered_set<hps::EmbeddingKey> distinct;
    while (distinct.size() < kBatch) {
      distinct.insert(gen());
    }
    std::size_t i = 0;
    for (const auto key : distinct) {
      keys[i++] = key;
    }
    state.ResumeTiming();
    cache.replace(keys, rows);
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) *
                          static_cast<std::int64_t>(kBatch));
}
BENCHMARK(BM_CacheReplace);

void BM_Dedup(benchmark::State& state) {
  hps::PowerLawSpec spec;
  spec.alpha = 1.2;
  spec.keyspace = 100000;
  spec.permute_seed = 7;
  hps::PowerLawSampler sampler(spec);
  const auto stream = sampler.sample(kBatch * 64, 13);
  std::size_t offset = 0;
  for (auto _ : state) {
    const std::span<const hps::EmbeddingKey> batch(stream.data() + offset,
                                                   kBatch);
    benchmark::DoNotOptimize(hps::dedup_keys(batch));
    offset = (offset + kBatch) % (stream.size() - kBatch);
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) *
                          static_cast<std::int64_t>(kBatch));
}
BENCHMARK(BM_Dedup);

void BM_PlacementHashes(benchmark::State& state) {
  std::uint64_t key = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(hps::SlabCache::slabset_of(key, 4096));
    benchmark::DoNotOptimize(hps::partition_of(key, 16));
    ++key;
  }
}
BENCHMARK(BM_PlacementHashes);

}  // namespace

BENCHMARK_MAIN();
