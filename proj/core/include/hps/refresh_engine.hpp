#pragma once

// Pulls fresh vectors from the storage tiers into the cache without changing
// what the cache holds: resident keys are dumped in batches, re-fetched, and
// written back with the non-admitting update operation. Runs either on
// demand or on a timer; overlapping triggers coalesce into the active run.

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <mutex>
#include <optional>
#include <thread>
#include <vector>

#include "hps/lookup_engine.hpp"
#include "hps/persistent_store.hpp"
#include "hps/slab_cache.hpp"
#include "hps/types.hpp"
#include "hps/volatile_store.hpp"

namespace hps {

struct RefreshConfig {
  std::size_t dump_batch_size = 65536;
  std::chrono::milliseconds interval{10000};
};

struct RefreshOutcome {
  std::size_t refreshed = 0;  // cache rows actually rewritten
  std::vector<EmbeddingKey> unresolved;  // resident but absent from all tiers
};

// One full pass: dump, fetch, update, batch by batch. A tier fault aborts
// the pass mid-way; batches already applied stay applied.
RefreshOutcome refresh_cache(SlabCache& cache, const TableId& table,
                             VolatileStore* vdb, PersistentStore& pdb,
                             std::size_t dump_batch_size);

class RefreshEngine {
 public:
  RefreshEngine(const TableId& table, SlabCache& cache, VolatileStore* vdb,
                PersistentStore& pdb, RefreshConfig config);
  ~RefreshEngine();

  RefreshEngine(const RefreshEngine&) = delete;
  RefreshEngine& operator=(const RefreshEngine&) = delete;

  // Manual trigger. Returns nullopt when another run is already active
  // (the trigger coalesces with it). Tier faults propagate.
  std::optional<RefreshOutcome> run_once();

  void start_periodic();
  void stop_periodic();

  std::uint64_t completed_runs() const {
    return completed_.load(std::memory_order_relaxed);
  }
  std::uint64_t skipped_runs() const {
    return skipped_.load(std::memory_order_relaxed);
  }
  std::uint64_t faulted_runs() const {
    return faulted_.load(std::memory_order_relaxed);
  }

 private:
  void periodic_loop();

  TableId table_;
  SlabCache& cache_;
  VolatileStore* vdb_;
  PersistentStore& pdb_;
  RefreshConfig config_;

  std::atomic<bool> running_{false};
  std::atomic<std::uint64_t> completed_{0};
  std::atomic<std::uint64_t> skipped_{0};
  std::atomic<std::uint64_t> faulted_{0};

  std::mutex periodic_mutex_;
  std::condition_variable periodic_cv_;
  bool periodic_stop_ = false;
  std::thread periodic_;
};

}  // namespace hps
