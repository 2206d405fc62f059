#include "hps/bench.hpp"

#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <ostream>
#include <random>

#include "hps/lookup_engine.hpp"
#include "hps/persistent_store.hpp"
#include "hps/slab_cache.hpp"
#include "hps/volatile_store.hpp"
#include "hps/workload.hpp"

namespace hps {

namespace {

namespace fs = std::filesystem;

fs::path make_scratch_dir() {
  std::random_device rd;
  const fs::path dir = fs::temp_directory_path() /
                       ("hps-bench-" + std::to_string(::getpid()) + "-" +
                        std::to_string(rd()));
  fs::create_directories(dir);
  return dir;
}

}  // namespace

std::uint64_t bench_draw_seed(std::uint64_t seed) {
  return seed ^ 0x9E3779B97F4A7C15ull;
}

BenchSummary run_bench(const BenchConfig& config, std::ostream& csv,
                       std::vector<BenchRecord>* records) {
  if (config.keys == 0 || config.batch_size == 0 || config.iterations == 0) {
    throw std::invalid_argument("bench needs keys, batch_size, iterations");
  }

  const bool scratch = config.data_dir.empty();
  const fs::path data_dir = scratch ? make_scratch_dir() : config.data_dir;
  const TableId table{config.table, config.dim};

  BenchSummary summary;
  {
    PersistentStore pdb(data_dir);
    if (!pdb.has_table(config.table)) {
      gen_table(pdb, table, config.keys, config.seed);
    }

    VolatileStore vdb;
    VolatileTableConfig vdb_config;
    vdb_config.partition_count = 16;
    // Sized so the benchmark table fits without churn; eviction behavior has
    // its own tests.
    vdb_config.overflow_margin = static_cast<std::size_t>(config.keys);
    vdb.register_table(table, vdb_config);

    SlabCacheConfig cache_config;
    cache_config.slabset_count =
        config.cache_slabsets > 0
            ? config.cache_slabsets
            : std::max<std::size_t>(
                  1, (config.keys / 10 +
                      (config.cache_slabs_per_set * kSlotsPerSlab) - 1) /
                         (config.cache_slabs_per_set * kSlotsPerSlab));
    cache_config.slabs_per_set = config.cache_slabs_per_set;
    cache_config.dimension = config.dim;
    cache_config.worker_pool_size = config.cache_worker_pool;
    SlabCache cache(cache_config);

    EngineConfig engine_config;
    engine_config.hit_rate_threshold = config.threshold;
    engine_config.workspace_pool_size = config.workspace_pool;
    engine_config.async_worker_count = config.async_workers;
    engine_config.volatile_tier_enabled = config.use_volatile;
    LookupEngine engine(table, cache, &vdb, pdb, engine_config);

    PowerLawSpec spec;
    spec.alpha = config.alpha;
    spec.keyspace = config.keys;
    spec.permute_seed = config.seed;
    PowerLawSampler sampler(spec);
    const std::vector<EmbeddingKey> stream = sampler.sample(
        config.iterations * config.batch_size, bench_draw_seed(config.seed));

    csv << "iteration,latency_us,hit_rate,sync_branch,defaults_returned\n";

    double latency_sum = 0.0;
    double hit_sum = 0.0;
    const std::size_t steady_from =
        config.iterations - std::max<std::size_t>(1, config.iterations / 10);
    double steady_latency_sum = 0.0;
    double steady_hit_sum = 0.0;
    std::size_t steady_count = 0;

    char row[160];
    for (std::size_t it = 0; it < config.iterations; ++it) {
      const std::span<const EmbeddingKey> batch(
          stream.data() + it * config.batch_size, config.batch_size);
      LookupOutcome outcome;
      const auto t0 = std::chrono::steady_clock::now();
      LookupResult result = engine.lookup(batch, &outcome);
      const auto t1 = std::chrono::steady_clock::now();
      (void)result;

      const double latency_us =
          std::chrono::duration<double, std::micro>(t1 - t0).count();
      latency_sum += latency_us;
      hit_sum += outcome.unique_hit_rate;
      if (it >= steady_from) {
        steady_latency_sum += latency_us;
        steady_hit_sum += outcome.unique_hit_rate;
        ++steady_count;
      }
      if (outcome.sync_branch) {
        ++summary.sync_batches;
      } else {
        ++summary.async_batches;
      }
      summary.defaults_returned += outcome.defaults_returned;

      std::snprintf(row, sizeof(row), "%zu,%.3f,%.6f,%d,%zu\n", it,
                    latency_us, outcome.unique_hit_rate,
                    outcome.sync_branch ? 1 : 0,
                    static_cast<std::size_t>(outcome.defaults_returned));
      csv << row;

      if (records) {
        records->push_back(BenchRecord{it, latency_us,
                                       outcome.unique_hit_rate,
                                       outcome.sync_branch,
                                       outcome.defaults_returned});
      }
    }
    engine.drain_async();
    vdb.drain();

    summary.iterations = config.iterations;
    summary.mean_latency_us = latency_sum / config.iterations;
    summary.overall_hit_rate = hit_sum / config.iterations;
    summary.steady_latency_us = steady_latency_sum / steady_count;
    summary.steady_hit_rate = steady_hit_sum / steady_count;

    csv << "# keys=" << config.keys << " alpha=" << config.alpha
        << " dim=" << config.dim << " batch_size=" << config.batch_size
        << " threshold=" << config.threshold
        << " cache_slots=" << cache.capacity() << " seed=" << config.seed
        << "\n";
    csv << "# steady_state_hit_rate=" << summary.steady_hit_rate
        << " steady_state_latency_us=" << summary.steady_latency_us
        << " (last " << steady_count << " iterations)\n";
    csv << "# mean_latency_us=" << summary.mean_latency_us
        << " overall_hit_rate=" << summary.overall_hit_rate
        << " sync_batches=" << summary.sync_batches
        << " async_batches=" << summary.async_batches
        << " defaults_returned=" << summary.defaults_returned << "\n";
  }

  if (scratch) {
    std::error_code ec;
    fs::remove_all(data_dir, ec);
  }
  return summary;
}

}  // namespace hps
