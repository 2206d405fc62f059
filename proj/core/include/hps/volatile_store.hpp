#pragma once

// Partitioned in-memory key-value tier. Each table splits its keys over a
// fixed number of hash partitions; partitions cap their entry count with an
// overflow margin and evict the oldest entries (smallest last-access stamp,
// ties broken by smaller key) when an insert would exceed it. Lookups queue
// their timestamp refreshes onto a background worker so the read path never
// waits on recency bookkeeping.

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "hps/types.hpp"

namespace hps {

enum class EvictionPolicy {
  EvictOldest,
};

struct VolatileTableConfig {
  std::uint32_t partition_count = 16;
  // Maximum entries a partition may hold after an insert returns.
  std::size_t overflow_margin = 1u << 20;
  EvictionPolicy policy = EvictionPolicy::EvictOldest;
  // Fraction of a table preloaded into the embedding cache at deployment
  // time; consumed by the wiring layer, stored here so one struct describes
  // the volatile tier of a table.
  double initial_cache_rate = 1.0;
};

// Routes a key to its partition (stable across hosts and runs).
std::uint32_t partition_of(EmbeddingKey key, std::uint32_t partition_count);

class VolatileStore {
 public:
  VolatileStore();
  ~VolatileStore();

  VolatileStore(const VolatileStore&) = delete;
  VolatileStore& operator=(const VolatileStore&) = delete;

  void register_table(const TableId& table, const VolatileTableConfig& config);
  bool has_table(const std::string& name) const;
  std::uint32_t partition_count(const std::string& name) const;

  // Copies out the vectors of present keys and queues a timestamp refresh
  // for them; the refresh is applied asynchronously (call drain() to wait).
  // Advances the table clock once per call.
  FetchResult lookup(const std::string& name,
                     std::span<const EmbeddingKey> keys);

  // Upserts the given rows, then prunes every touched partition back down to
  // its overflow margin. Returns the evicted keys. Advances the table clock
  // once per call.
  std::vector<EmbeddingKey> insert(const std::string& name,
                                   std::span<const EmbeddingKey> keys,
                                   std::span<const float> vectors);

  // Queues the same upsert to run on the background worker; used for cache
  // fill-backs where the caller must not block on the volatile tier.
  void insert_async(const std::string& name, std::vector<EmbeddingKey> keys,
                    std::vector<float> vectors);

  // Prunes one partition down to its overflow margin and returns the evicted
  // keys (empty when the partition is already within bounds).
  std::vector<EmbeddingKey> evict(const std::string& name,
                                  std::uint32_t partition);

  // Blocks until every queued refresh and async insert has been applied.
  void drain();

  std::size_t partition_size(const std::string& name,
                             std::uint32_t partition) const;
  std::size_t table_size(const std::string& name) const;
  std::optional<std::uint64_t> last_access(const std::string& name,
                                           EmbeddingKey key) const;
  std::uint64_t table_clock(const std::string& name) const;
  std::vector<EmbeddingKey> keys(const std::string& name) const;

 private:
  struct Entry {
    std::vector<float> vector;
    std::uint64_t last_access = 0;
  };

  struct Partition {
    mutable std::mutex mutex;
    std::unordered_map<EmbeddingKey, Entry> entries;
  };

  struct Table {
    TableId id;
    VolatileTableConfig config;
    std::atomic<std::uint64_t> clock{0};
    std::vector<std::unique_ptr<Partition>> partitions;
  };

  struct BackgroundTask {
    Table* table = nullptr;
    bool is_insert = false;
    std::vector<EmbeddingKey> keys;
    std::vector<float> vectors;      // inserts only
    std::uint64_t stamp = 0;         // refreshes only
  };

  Table& table_ref(const std::string& name);
  const Table& table_ref(const std::string& name) const;
  std::vector<EmbeddingKey> insert_rows(Table& t,
                                        std::span<const EmbeddingKey> keys,
                                        std::span<const float> vectors,
                                        std::uint64_t stamp);
  static std::vector<EmbeddingKey> prune_partition(Table& t, Partition& p);
  void enqueue(BackgroundTask task);
  void background_loop();

  mutable std::mutex tables_mutex_;
  std::unordered_map<std::string, std::unique_ptr<Table>> tables_;

  std::mutex queue_mutex_;
  std::condition_variable queue_cv_;
  std::condition_variable idle_cv_;
  std::deque<BackgroundTask> queue_;
  bool worker_busy_ = false;
  bool stopping_ = false;
  std::thread worker_;
};

}  // namespace hps
