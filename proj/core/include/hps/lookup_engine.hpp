#pragma once

// Batched lookup pipeline in front of the cache and the storage tiers.
// Each query is deduplicated, probed against the cache, and then completed
// on one of two paths picked by the batch's unique-key hit rate: below the
// threshold the missing vectors are fetched synchronously and admitted to
// the cache before returning; at or above it the response ships immediately
// with default vectors in the missed rows while a background task fetches
// and admits them. Workspaces come from a fixed pool, which bounds the
// number of in-flight batches.

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <memory>
#include <mutex>
#include <span>
#include <thread>
#include <vector>

#include "hps/persistent_store.hpp"
#include "hps/slab_cache.hpp"
#include "hps/types.hpp"
#include "hps/volatile_store.hpp"

namespace hps {

struct EngineConfig {
  double hit_rate_threshold = 0.8;
  // Substituted for keys absent from every tier; resized with zeros / cut to
  // the table dimension. Empty means all-zeros.
  std::vector<float> default_vector;
  std::size_t workspace_pool_size = 16;
  std::uint32_t async_worker_count = 2;
  bool volatile_tier_enabled = true;
};

// Scratch buffers reused across queries; acquiring one is the engine's
// admission ticket.
struct Workspace {
  std::vector<EmbeddingKey> unique_keys;
  std::vector<float> vectors;
  std::vector<EmbeddingKey> missing_keys;
  std::vector<std::uint32_t> missing_positions;  // rows in unique_keys order
  double hit_rate = 0.0;
};

class WorkspacePool {
 public:
  explicit WorkspacePool(std::size_t size);

  WorkspacePool(const WorkspacePool&) = delete;
  WorkspacePool& operator=(const WorkspacePool&) = delete;

  // Blocks until a workspace is free.
  Workspace* acquire();
  void release(Workspace* ws);

  std::size_t size() const { return slots_.size(); }
  std::size_t outstanding() const;
  std::size_t peak_outstanding() const;

 private:
  std::vector<std::unique_ptr<Workspace>> slots_;
  mutable std::mutex mutex_;
  std::condition_variable cv_;
  std::vector<Workspace*> free_;
  std::size_t outstanding_ = 0;
  std::size_t peak_outstanding_ = 0;
};

// RAII lease; releases back to the pool when destroyed.
class WorkspaceLease {
 public:
  WorkspaceLease() = default;
  explicit WorkspaceLease(WorkspacePool& pool)
      : pool_(&pool), ws_(pool.acquire()) {}
  ~WorkspaceLease() { reset(); }

  WorkspaceLease(WorkspaceLease&& other) noexcept
      : pool_(other.pool_), ws_(other.ws_) {
    other.pool_ = nullptr;
    other.ws_ = nullptr;
  }
  WorkspaceLease& operator=(WorkspaceLease&& other) noexcept {
    if (this != &other) {
      reset();
      pool_ = other.pool_;
      ws_ = other.ws_;
      other.pool_ = nullptr;
      other.ws_ = nullptr;
    }
    return *this;
  }
  WorkspaceLease(const WorkspaceLease&) = delete;
  WorkspaceLease& operator=(const WorkspaceLease&) = delete;

  Workspace* get() const { return ws_; }
  Workspace* operator->() const { return ws_; }

  void reset() {
    if (ws_) {
      pool_->release(ws_);
      ws_ = nullptr;
      pool_ = nullptr;
    }
  }

 private:
  WorkspacePool* pool_ = nullptr;
  Workspace* ws_ = nullptr;
};

struct TierCounters {
  std::uint64_t vdb_hits = 0;
  std::uint64_t pdb_hits = 0;
  std::uint64_t missing = 0;
};

// Reads through the storage tiers: volatile first, then persistent for the
// leftovers. Keys found only in the persistent tier are queued for an async
// volatile fill so later lookups get the faster path. Keys in neither tier
// come back in missing_keys. vdb may be null (volatile tier disabled).
FetchResult tier_fetch(const TableId& table,
                       std::span<const EmbeddingKey> keys, VolatileStore* vdb,
                       PersistentStore& pdb, TierCounters* counters = nullptr);

struct EngineStatsSnapshot {
  std::uint64_t queries = 0;
  std::uint64_t queried_keys = 0;
  std::uint64_t unique_keys = 0;
  std::uint64_t cache_hits = 0;
  std::uint64_t cache_misses = 0;
  std::uint64_t sync_batches = 0;
  std::uint64_t async_batches = 0;
  std::uint64_t defaults_returned = 0;
  std::uint64_t vdb_hits = 0;
  std::uint64_t pdb_hits = 0;
  std::uint64_t tier_missing = 0;
  std::uint64_t async_faults = 0;
};

// Per-call outcome details for callers that instrument batches.
struct LookupOutcome {
  bool sync_branch = false;
  double unique_hit_rate = 0.0;
  std::size_t unique_count = 0;
  std::size_t defaults_returned = 0;
};

class LookupEngine {
 public:
  LookupEngine(const TableId& table, SlabCache& cache, VolatileStore* vdb,
               PersistentStore& pdb, EngineConfig config);
  ~LookupEngine();

  LookupEngine(const LookupEngine&) = delete;
  LookupEngine& operator=(const LookupEngine&) = delete;

  LookupResult lookup(std::span<const EmbeddingKey> keys,
                      LookupOutcome* outcome = nullptr);

  // Blocks until every queued async insertion has completed.
  void drain_async();

  EngineStatsSnapshot stats() const;
  const TableId& table() const { return table_; }
  WorkspacePool& workspace_pool() { return pool_; }

 private:
  struct AsyncTask {
    WorkspaceLease lease;
  };

  void async_loop();

  TableId table_;
  SlabCache& cache_;
  VolatileStore* vdb_;
  PersistentStore& pdb_;
  EngineConfig config_;
  std::vector<float> default_vector_;
  WorkspacePool pool_;

  mutable std::mutex stats_mutex_;
  EngineStatsSnapshot stats_;

  std::mutex queue_mutex_;
  std::condition_variable queue_cv_;
  std::condition_variable idle_cv_;
  std::deque<AsyncTask> queue_;
  std::size_t active_tasks_ = 0;
  bool stopping_ = false;
  std::vector<std::thread> async_workers_;
};

}  // namespace hps
