#pragma once

// Set-associative, CPU-resident embedding cache. Keys are spread over
// slabsets by hash; each slabset holds a small fixed number of slabs of 32
// slots each and is guarded by its own mutex, so operations on different
// slabsets proceed in parallel while operations within one slabset are
// serialized. Recency is tracked with a single global iteration counter that
// advances once per API call; eviction picks the slot with the smallest
// counter in the whole slabset.

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <memory>
#include <mutex>
#include <span>
#include <thread>
#include <vector>

#include "hps/types.hpp"

namespace hps {

inline constexpr std::uint32_t kSlotsPerSlab = 32;

struct SlabCacheConfig {
  std::size_t slabset_count = 1;
  std::uint32_t slabs_per_set = 2;
  std::uint32_t dimension = 0;
  // Operations are split into per-slabset work items executed by this pool.
  std::uint32_t worker_pool_size = 1;
  std::uint32_t tasks_per_worker = 8;
};

struct CacheMiss {
  std::size_t position;  // index into the query key span
  EmbeddingKey key;
};

class SlabCache {
 public:
  explicit SlabCache(const SlabCacheConfig& config);
  ~SlabCache();

  SlabCache(const SlabCache&) = delete;
  SlabCache& operator=(const SlabCache&) = delete;

  // Copies the vector of every resident key into out_vectors (row i for key
  // i) and refreshes its recency; absent keys are reported in ascending
  // position order and their rows are left untouched. Advances the recency
  // clock exactly once, even for an empty query. out_vectors must hold
  // keys.size() * dimension() floats.
  std::vector<CacheMiss> query(std::span<const EmbeddingKey> keys,
                               std::span<float> out_vectors);

  // Inserts missing keys (filling an empty slot of the first probed slab
  // that has one, else evicting the least recently used slot of the
  // slabset). Keys that are already resident only get their recency
  // refreshed; their stored vectors stay as they are. keys must not contain
  // duplicates; vectors must hold keys.size() * dimension() floats.
  void replace(std::span<const EmbeddingKey> keys,
               std::span<const float> vectors);

  // Overwrites the vectors of resident keys and ignores the rest; never
  // admits new keys and never touches recency. Returns how many keys were
  // actually written.
  std::size_t update(std::span<const EmbeddingKey> keys,
                     std::span<const float> vectors);

  // Streams the resident key set in batches. Each slabset is read under its
  // gate, so every key resident for the cursor's whole lifetime shows up
  // exactly once; keys inserted or evicted concurrently may or may not.
  class DumpCursor {
   public:
    // Replaces out with the next batch (possibly spanning several slabsets)
    // and returns true, or returns false once the cache is exhausted.
    bool next(std::vector<EmbeddingKey>& out);

   private:
    friend class SlabCache;
    DumpCursor(SlabCache* cache, std::size_t batch_size)
        : cache_(cache), batch_size_(batch_size) {}

    SlabCache* cache_;
    std::size_t batch_size_;
    std::size_t next_set_ = 0;
    std::vector<EmbeddingKey> staged_;
    std::size_t staged_pos_ = 0;
  };

  DumpCursor dump(std::size_t batch_size);
  std::vector<EmbeddingKey> dump_all();

  std::uint32_t dimension() const { return dimension_; }
  std::size_t slabset_count() const { return slabset_count_; }
  std::uint32_t slabs_per_set() const { return slabs_per_set_; }
  std::size_t capacity() const {
    return slabset_count_ * slabs_per_set_ * kSlotsPerSlab;
  }
  std::size_t occupied() const {
    return occupied_.load(std::memory_order_relaxed);
  }
  std::uint64_t recency_clock() const {
    return clock_.load(std::memory_order_relaxed);
  }

  static std::size_t slabset_of(EmbeddingKey key, std::size_t slabset_count);
  static std::uint32_t first_slab_of(EmbeddingKey key,
                                     std::uint32_t slabs_per_set);

  // Takes every gate and verifies the structural invariants (occupancy bits
  // match slot state, keys sit in their hashed slabset, no key twice, slot
  // counters never exceed the clock). Throws std::logic_error on violation.
  void check_invariants() const;

 private:
  enum class OpKind { Query, Replace, Update };

  struct Job {
    OpKind kind;
    const EmbeddingKey* keys = nullptr;
    const std::uint32_t* order = nullptr;  // key indices grouped by slabset
    float* out = nullptr;                  // query destination rows
    const float* in = nullptr;             // replace / update source rows
    std::uint8_t* row_status = nullptr;    // per key: 1 = hit / written
    std::uint64_t stamp = 0;
    std::atomic<std::size_t> remaining{0};
  };

  struct Task {
    Job* job;
    std::uint32_t begin;
    std::uint32_t end;       // range into job->order
    std::size_t set_index;
  };

  void run_task(const Task& task);
  void run_grouped(OpKind kind, std::span<const EmbeddingKey> keys,
                   float* out, const float* in, std::uint8_t* row_status,
                   std::uint64_t stamp);
  void worker_loop();

  void apply_query(std::size_t set, const Task& task);
  void apply_replace(std::size_t set, const Task& task);
  void apply_update(std::size_t set, const Task& task);

  // Slot addressing helpers; slot = slab * kSlotsPerSlab + index.
  std::size_t slot_base(std::size_t set) const {
    return set * slots_per_set_;
  }
  float* vector_at(std::size_t global_slot) {
    return vectors_.data() + global_slot * dimension_;
  }
  const float* vector_at(std::size_t global_slot) const {
    return vectors_.data() + global_slot * dimension_;
  }

  std::size_t slabset_count_;
  std::uint32_t slabs_per_set_;
  std::uint32_t dimension_;
  std::size_t slots_per_set_;

  std::vector<EmbeddingKey> keys_;
  std::vector<std::uint64_t> counters_;
  std::vector<std::uint32_t> occupancy_;  // one bit mask per slab
  std::vector<float> vectors_;
  std::unique_ptr<std::mutex[]> gates_;

  std::atomic<std::uint64_t> clock_{0};
  std::atomic<std::size_t> occupied_{0};

  std::uint32_t tasks_per_worker_;
  std::vector<std::thread> workers_;
  std::mutex queue_mutex_;
  std::condition_variable queue_cv_;
  std::deque<Task> queue_;
  bool stopping_ = false;
};

}  // namespace hps
