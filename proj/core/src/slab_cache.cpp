#include "hps/slab_cache.hpp"

#include <algorithm>
#include <bit>
#include <numeric>
#include <stdexcept>
#include <unordered_set>

#include "hps/xxhash64.hpp"

namespace hps {

namespace {
constexpr std::uint32_t kFullSlab = 0xFFFFFFFFu;
}

SlabCache::SlabCache(const SlabCacheConfig& config) {
  if (config.slabset_count == 0) {
    throw std::invalid_argument("slabset_count must be positive");
  }
  if (config.slabs_per_set == 0) {
    throw std::invalid_argument("slabs_per_set must be positive");
  }
  if (config.dimension == 0) {
    throw std::invalid_argument("cache dimension must be positive");
  }
  if (config.worker_pool_size == 0) {
    throw std::invalid_argument("worker_pool_size must be positive");
  }
  slabset_count_ = config.slabset_count;
  slabs_per_set_ = config.slabs_per_set;
  dimension_ = config.dimension;
  slots_per_set_ = static_cast<std::size_t>(slabs_per_set_) * kSlotsPerSlab;
  tasks_per_worker_ = std::max<std::uint32_t>(1, config.tasks_per_worker);

  const std::size_t total_slots = slabset_count_ * slots_per_set_;
  keys_.resize(total_slots, 0);
  counters_.resize(total_slots, 0);
  occupancy_.resize(slabset_count_ * slabs_per_set_, 0);
  vectors_.resize(total_slots * dimension_, 0.0f);
  gates_ = std::make_unique<std::mutex[]>(slabset_count_);

  workers_.reserve(config.worker_pool_size);
  for (std::uint32_t i = 0; i < config.worker_pool_size; ++i) {
    workers_.emplace_back([this] { worker_loop(); });
  }
}

SlabCache::~SlabCache() {
  {
    std::lock_guard lk(queue_mutex_);
    stopping_ = true;
  }
  queue_cv_.notify_all();
  for (auto& w : workers_) {
    w.join();
  }
}

std::size_t SlabCache::slabset_of(EmbeddingKey key, std::size_t slabset_count) {
  return xxh64_key(key, kSlabsetSeed) % slabset_count;
}

std::uint32_t SlabCache::first_slab_of(EmbeddingKey key,
                                       std::uint32_t slabs_per_set) {
  return static_cast<std::uint32_t>(xxh64_key(key, kSlabSeed) % slabs_per_set);
}

std::vector<CacheMiss> SlabCache::query(std::span<const EmbeddingKey> keys,
                                        std::span<float> out_vectors) {
  // One clock tick per call, taken before anything else so concurrent calls
  // observe distinct stamps.
  const std::uint64_t stamp =
      clock_.fetch_add(1, std::memory_order_relaxed) + 1;
  if (out_vectors.size() != keys.size() * dimension_) {
    throw std::invalid_argument("query output buffer has wrong size");
  }
  if (keys.empty()) {
    return {};
  }
  std::vector<std::uint8_t> row_status(keys.size(), 0);
  run_grouped(OpKind::Query, keys, out_vectors.data(), nullptr,
              row_status.data(), stamp);
  std::vector<CacheMiss> misses;
  for (std::size_t i = 0; i < keys.size(); ++i) {
    if (!row_status[i]) {
      misses.push_back(CacheMiss{i, keys[i]});
    }
  }
  return misses;
}

void SlabCache::replace(std::span<const EmbeddingKey> keys,
                        std::span<const float> vectors) {
  if (vectors.size() != keys.size() * dimension_) {
    throw std::invalid_argument("replace vector buffer has wrong size");
  }
  std::unordered_set<EmbeddingKey> distinct(keys.begin(), keys.end());
  if (distinct.size() != keys.size()) {
    throw std::invalid_argument("replace batch contains duplicate keys");
  }
  if (keys.empty()) {
    return;
  }
  const std::uint64_t stamp = clock_.load(std::memory_order_relaxed);
  run_grouped(OpKind::Replace, keys, nullptr, vectors.data(), nullptr, stamp);
}

std::size_t SlabCache::update(std::span<const EmbeddingKey> keys,
                              std::span<const float> vectors) {
  if (vectors.size() != keys.size() * dimension_) {
    throw std::invalid_argument("update vector buffer has wrong size");
  }
  if (keys.empty()) {
    return 0;
  }
  std::vector<std::uint8_t> row_status(keys.size(), 0);
  run_grouped(OpKind::Update, keys, nullptr, vectors.data(),
              row_status.data(), 0);
  std::size_t written = 0;
  for (std::uint8_t s : row_status) {
    written += s;
  }
  return written;
}

void SlabCache::run_grouped(OpKind kind, std::span<const EmbeddingKey> keys,
                            float* out, const float* in,
                            std::uint8_t* row_status, std::uint64_t stamp) {
  const std::size_t n = keys.size();
  std::vector<std::size_t> sets(n);
  for (std::size_t i = 0; i < n; ++i) {
    sets[i] = slabset_of(keys[i], slabset_count_);
  }
  std::vector<std::uint32_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  // Group by slabset but keep input order inside each group so results do
  // not depend on pool scheduling.
  std::sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
    if (sets[a] != sets[b]) return sets[a] < sets[b];
    return a < b;
  });

  Job job;
  job.kind = kind;
  job.keys = keys.data();
  job.order = order.data();
  job.out = out;
  job.in = in;
  job.row_status = row_status;
  job.stamp = stamp;

  std::vector<Task> tasks;
  std::size_t begin = 0;
  while (begin < n) {
    std::size_t end = begin + 1;
    while (end < n && sets[order[end]] == sets[order[begin]]) {
      ++end;
    }
    tasks.push_back(Task{&job, static_cast<std::uint32_t>(begin),
                         static_cast<std::uint32_t>(end), sets[order[begin]]});
    begin = end;
  }

  if (tasks.size() == 1) {
    run_task(tasks.front());
    return;
  }

  job.remaining.store(tasks.size(), std::memory_order_relaxed);
  {
    std::lock_guard lk(queue_mutex_);
    for (const Task& t : tasks) {
      queue_.push_back(t);
    }
  }
  queue_cv_.notify_all();
  for (;;) {
    const std::size_t left = job.remaining.load(std::memory_order_acquire);
    if (left == 0) {
      break;
    }
    job.remaining.wait(left, std::memory_order_acquire);
  }
}

void SlabCache::worker_loop() {
  std::vector<Task> batch;
  for (;;) {
    batch.clear();
    {
      std::unique_lock lk(queue_mutex_);
      queue_cv_.wait(lk, [&] { return stopping_ || !queue_.empty(); });
      if (queue_.empty()) {
        return;  // stopping
      }
      const std::size_t take =
          std::min<std::size_t>(tasks_per_worker_, queue_.size());
      for (std::size_t i = 0; i < take; ++i) {
        batch.push_back(queue_.front());
        queue_.pop_front();
      }
    }
    for (const Task& t : batch) {
      run_task(t);
      if (t.job->remaining.fetch_sub(1, std::memory_order_release) == 1) {
        t.job->remaining.notify_all();
      }
    }
  }
}

void SlabCache::run_task(const Task& task) {
  std::lock_guard lk(gates_[task.set_index]);
  switch (task.job->kind) {
    case OpKind::Query:
      apply_query(task.set_index, task);
      break;
    case OpKind::Replace:
      apply_replace(task.set_index, task);
      break;
    case OpKind::Update:
      apply_update(task.set_index, task);
      break;
  }
}

void SlabCache::apply_query(std::size_t set, const Task& task) {
  Job& job = *task.job;
  const std::size_t base = slot_base(set);
  for (std::uint32_t k = task.begin; k < task.end; ++k) {
    const std::uint32_t i = job.order[k];
    const EmbeddingKey key = job.keys[i];
    const std::uint32_t first = first_slab_of(key, slabs_per_set_);
    for (std::uint32_t step = 0; step < slabs_per_set_; ++step) {
      const std::uint32_t slab = (first + step) % slabs_per_set_;
      const std::uint32_t mask = occupancy_[set * slabs_per_set_ + slab];
      const std::size_t slab_base = base + slab * kSlotsPerSlab;
      std::int32_t found = -1;
      for (std::uint32_t j = 0; j < kSlotsPerSlab; ++j) {
        if ((mask >> j) & 1u && keys_[slab_base + j] == key) {
          found = static_cast<std::int32_t>(j);
          break;
        }
      }
      if (found >= 0) {
        const std::size_t slot = slab_base + static_cast<std::size_t>(found);
        std::copy_n(vector_at(slot), dimension_,
                    job.out + static_cast<std::size_t>(i) * dimension_);
        counters_[slot] = job.stamp;
        job.row_status[i] = 1;
        break;
      }
      if (mask != kFullSlab) {
        break;  // an empty slot before the key means it cannot be resident
      }
    }
  }
}

void SlabCache::apply_replace(std::size_t set, const Task& task) {
  Job& job = *task.job;
  const std::size_t base = slot_base(set);
  for (std::uint32_t k = task.begin; k < task.end; ++k) {
    const std::uint32_t i = job.order[k];
    const EmbeddingKey key = job.keys[i];
    const float* row = job.in + static_cast<std::size_t>(i) * dimension_;
    const std::uint32_t first = first_slab_of(key, slabs_per_set_);

    bool handled = false;
    std::int64_t insert_slab = -1;
    for (std::uint32_t step = 0; step < slabs_per_set_; ++step) {
      const std::uint32_t slab = (first + step) % slabs_per_set_;
      const std::uint32_t mask = occupancy_[set * slabs_per_set_ + slab];
      const std::size_t slab_base = base + slab * kSlotsPerSlab;
      std::int32_t found = -1;
      for (std::uint32_t j = 0; j < kSlotsPerSlab; ++j) {
        if ((mask >> j) & 1u && keys_[slab_base + j] == key) {
          found = static_cast<std::int32_t>(j);
          break;
        }
      }
      if (found >= 0) {
        // Resident: refresh recency only, the stored vector is newer or the
        // same as what the caller fetched from the tiers.
        counters_[slab_base + static_cast<std::size_t>(found)] = job.stamp;
        handled = true;
        break;
      }
      if (mask != kFullSlab) {
        insert_slab = slab;
        break;
      }
    }
    if (handled) {
      continue;
    }

    if (insert_slab >= 0) {
      const auto slab = static_cast<std::uint32_t>(insert_slab);
      std::uint32_t& mask = occupancy_[set * slabs_per_set_ + slab];
      const std::uint32_t j = static_cast<std::uint32_t>(std::countr_one(mask));
      const std::size_t slot = base + slab * kSlotsPerSlab + j;
      keys_[slot] = key;
      counters_[slot] = job.stamp;
      std::copy_n(row, dimension_, vector_at(slot));
      mask |= (1u << j);
      occupied_.fetch_add(1, std::memory_order_relaxed);
      continue;
    }

    // Every slab of the set is full: evict the least recently used slot,
    // breaking counter ties by the lowest (slab, slot) position.
    std::size_t victim = base;
    std::uint64_t victim_counter = counters_[base];
    for (std::size_t s = 1; s < slots_per_set_; ++s) {
      if (counters_[base + s] < victim_counter) {
        victim_counter = counters_[base + s];
        victim = base + s;
      }
    }
    keys_[victim] = key;
    counters_[victim] = job.stamp;
    std::copy_n(row, dimension_, vector_at(victim));
  }
}

void SlabCache::apply_update(std::size_t set, const Task& task) {
  Job& job = *task.job;
  const std::size_t base = slot_base(set);
  for (std::uint32_t k = task.begin; k < task.end; ++k) {
    const std::uint32_t i = job.order[k];
    const EmbeddingKey key = job.keys[i];
    const std::uint32_t first = first_slab_of(key, slabs_per_set_);
    for (std::uint32_t step = 0; step < slabs_per_set_; ++step) {
      const std::uint32_t slab = (first + step) % slabs_per_set_;
      const std::uint32_t mask = occupancy_[set * slabs_per_set_ + slab];
      const std::size_t slab_base = base + slab * kSlotsPerSlab;
      std::int32_t found = -1;
      for (std::uint32_t j = 0; j < kSlotsPerSlab; ++j) {
        if ((mask >> j) & 1u && keys_[slab_base + j] == key) {
          found = static_cast<std::int32_t>(j);
          break;
        }
      }
      if (found >= 0) {
        const std::size_t slot = slab_base + static_cast<std::size_t>(found);
        std::copy_n(job.in + static_cast<std::size_t>(i) * dimension_,
                    dimension_, vector_at(slot));
        job.row_status[i] = 1;
        break;
      }
      if (mask != kFullSlab) {
        break;
      }
    }
  }
}

SlabCache::DumpCursor SlabCache::dump(std::size_t batch_size) {
  if (batch_size == 0) {
    throw std::invalid_argument("dump batch size must be positive");
  }
  return DumpCursor(this, batch_size);
}

bool SlabCache::DumpCursor::next(std::vector<EmbeddingKey>& out) {
  out.clear();
  for (;;) {
    while (staged_pos_ < staged_.size() && out.size() < batch_size_) {
      out.push_back(staged_[staged_pos_++]);
    }
    if (out.size() == batch_size_) {
      return true;
    }
    if (next_set_ == cache_->slabset_count_) {
      return !out.empty();
    }
    staged_.clear();
    staged_pos_ = 0;
    const std::size_t set = next_set_++;
    std::lock_guard lk(cache_->gates_[set]);
    const std::size_t base = cache_->slot_base(set);
    for (std::uint32_t slab = 0; slab < cache_->slabs_per_set_; ++slab) {
      const std::uint32_t mask =
          cache_->occupancy_[set * cache_->slabs_per_set_ + slab];
      for (std::uint32_t j = 0; j < kSlotsPerSlab; ++j) {
        if ((mask >> j) & 1u) {
          staged_.push_back(cache_->keys_[base + slab * kSlotsPerSlab + j]);
        }
      }
    }
  }
}

std::vector<EmbeddingKey> SlabCache::dump_all() {
  std::vector<EmbeddingKey> all;
  all.reserve(occupied());
  auto cursor = dump(4096);
  std::vector<EmbeddingKey> batch;
  while (cursor.next(batch)) {
    all.insert(all.end(), batch.begin(), batch.end());
  }
  return all;
}

void SlabCache::check_invariants() const {
  std::vector<std::unique_lock<std::mutex>> held;
  held.reserve(slabset_count_);
  for (std::size_t s = 0; s < slabset_count_; ++s) {
    held.emplace_back(gates_[s]);
  }
  const std::uint64_t clock_now = clock_.load(std::memory_order_relaxed);
  std::unordered_set<EmbeddingKey> seen;
  std::size_t populated = 0;
  for (std::size_t set = 0; set < slabset_count_; ++set) {
    const std::size_t base = slot_base(set);
    for (std::uint32_t slab = 0; slab < slabs_per_set_; ++slab) {
      const std::uint32_t mask = occupancy_[set * slabs_per_set_ + slab];
      for (std::uint32_t j = 0; j < kSlotsPerSlab; ++j) {
        if (!((mask >> j) & 1u)) {
          continue;
        }
        ++populated;
        const std::size_t slot = base + slab * kSlotsPerSlab + j;
        const EmbeddingKey key = keys_[slot];
        if (slabset_of(key, slabset_count_) != set) {
          throw std::logic_error("slab cache key stored outside its slabset");
        }
        if (!seen.insert(key).second) {
          throw std::logic_error("slab cache holds a key in two slots");
        }
        if (counters_[slot] > clock_now) {
          throw std::logic_error("slab cache slot counter exceeds the clock");
        }
      }
    }
  }
  if (populated != occupied_.load(std::memory_order_relaxed)) {
    throw std::logic_error("slab cache occupancy counter is out of sync");
  }
}

}  // namespace hps
