#include "hps/volatile_store.hpp"

#include <algorithm>
#include <stdexcept>

#include "hps/xxhash64.hpp"

namespace hps {

std::uint32_t partition_of(EmbeddingKey key, std::uint32_t partition_count) {
  return static_cast<std::uint32_t>(xxh64_key(key, kPartitionSeed) %
                                    partition_count);
}

VolatileStore::VolatileStore() : worker_([this] { background_loop(); }) {}

VolatileStore::~VolatileStore() {
  {
    std::lock_guard lk(queue_mutex_);
    stopping_ = true;
  }
  queue_cv_.notify_all();
  worker_.join();
}

void VolatileStore::register_table(const TableId& table,
                                   const VolatileTableConfig& config) {
  validate_table_id(table);
  if (config.partition_count == 0) {
    throw std::invalid_argument("partition_count must be positive");
  }
  if (config.overflow_margin == 0) {
    throw std::invalid_argument("overflow_margin must be positive");
  }
  std::lock_guard lk(tables_mutex_);
  auto it = tables_.find(table.name);
  if (it != tables_.end()) {
    if (it->second->id.dimension != table.dimension) {
      throw std::invalid_argument("table already registered with dimension " +
                                  std::to_string(it->second->id.dimension));
    }
    return;
  }
  auto t = std::make_unique<Table>();
  t->id = table;
  t->config = config;
  t->partitions.reserve(config.partition_count);
  for (std::uint32_t i = 0; i < config.partition_count; ++i) {
    t->partitions.push_back(std::make_unique<Partition>());
  }
  tables_.emplace(table.name, std::move(t));
}

bool VolatileStore::has_table(const std::string& name) const {
  std::lock_guard lk(tables_mutex_);
  return tables_.count(name) != 0;
}

std::uint32_t VolatileStore::partition_count(const std::string& name) const {
  return table_ref(name).config.partition_count;
}

VolatileStore::Table& VolatileStore::table_ref(const std::string& name) {
  std::lock_guard lk(tables_mutex_);
  auto it = tables_.find(name);
  if (it == tables_.end()) {
    throw std::invalid_argument("volatile store has no table named " + name);
  }
  return *it->second;
}

const VolatileStore::Table& VolatileStore::table_ref(
    const std::string& name) const {
  std::lock_guard lk(tables_mutex_);
  auto it = tables_.find(name);
  if (it == tables_.end()) {
    throw std::invalid_argument("volatile store has no table named " + name);
  }
  return *it->second;
}

FetchResult VolatileStore::lookup(const std::string& name,
                                  std::span<const EmbeddingKey> keys) {
  Table& t = table_ref(name);
  const std::uint64_t stamp =
      t.clock.fetch_add(1, std::memory_order_relaxed) + 1;

  FetchResult result;
  for (const EmbeddingKey key : keys) {
    Partition& p =
        *t.partitions[partition_of(key, t.config.partition_count)];
    std::lock_guard lk(p.mutex);
    auto it = p.entries.find(key);
    if (it == p.entries.end()) {
      result.missing_keys.push_back(key);
    } else {
      result.found_keys.push_back(key);
      result.found_vectors.insert(result.found_vectors.end(),
                                  it->second.vector.begin(),
                                  it->second.vector.end());
    }
  }
  if (!result.found_keys.empty()) {
    BackgroundTask task;
    task.table = &t;
    task.is_insert = false;
    task.keys = result.found_keys;
    task.stamp = stamp;
    enqueue(std::move(task));
  }
  return result;
}

std::vector<EmbeddingKey> VolatileStore::insert(
    const std::string& name, std::span<const EmbeddingKey> keys,
    std::span<const float> vectors) {
  Table& t = table_ref(name);
  if (vectors.size() != keys.size() * t.id.dimension) {
    throw std::invalid_argument("insert vector buffer has wrong size");
  }
  require_finite(vectors, "volatile insert");
  const std::uint64_t stamp =
      t.clock.fetch_add(1, std::memory_order_relaxed) + 1;
  return insert_rows(t, keys, vectors, stamp);
}

std::vector<EmbeddingKey> VolatileStore::insert_rows(
    Table& t, std::span<const EmbeddingKey> keys,
    std::span<const float> vectors, std::uint64_t stamp) {
  const std::uint32_t dim = t.id.dimension;
  std::vector<bool> touched(t.config.partition_count, false);
  for (std::size_t i = 0; i < keys.size(); ++i) {
    const std::uint32_t pi = partition_of(keys[i], t.config.partition_count);
    Partition& p = *t.partitions[pi];
    std::lock_guard lk(p.mutex);
    Entry& e = p.entries[keys[i]];
    e.vector.assign(vectors.begin() + i * dim, vectors.begin() + (i + 1) * dim);
    e.last_access = stamp;
    touched[pi] = true;
  }
  std::vector<EmbeddingKey> evicted;
  for (std::uint32_t pi = 0; pi < t.config.partition_count; ++pi) {
    if (!touched[pi]) {
      continue;
    }
    Partition& p = *t.partitions[pi];
    std::lock_guard lk(p.mutex);
    auto victims = prune_partition(t, p);
    evicted.insert(evicted.end(), victims.begin(), victims.end());
  }
  return evicted;
}

std::vector<EmbeddingKey> VolatileStore::prune_partition(Table& t,
                                                         Partition& p) {
  std::vector<EmbeddingKey> evicted;
  if (p.entries.size() <= t.config.overflow_margin) {
    return evicted;
  }
  // EvictOldest: smallest last-access goes first, ties by smaller key.
  std::vector<std::pair<std::uint64_t, EmbeddingKey>> order;
  order.reserve(p.entries.size());
  for (const auto& [key, entry] : p.entries) {
    order.emplace_back(entry.last_access, key);
  }
  std::sort(order.begin(), order.end());
  const std::size_t excess = p.entries.size() - t.config.overflow_margin;
  for (std::size_t i = 0; i < excess; ++i) {
    p.entries.erase(order[i].second);
    evicted.push_back(order[i].second);
  }
  return evicted;
}

void VolatileStore::insert_async(const std::string& name,
                                 std::vector<EmbeddingKey> keys,
                                 std::vector<float> vectors) {
  Table& t = table_ref(name);
  if (vectors.size() != keys.size() * t.id.dimension) {
    throw std::invalid_argument("insert vector buffer has wrong size");
  }
  require_finite(vectors, "volatile insert");
  BackgroundTask task;
  task.table = &t;
  task.is_insert = true;
  task.keys = std::move(keys);
  task.vectors = std::move(vectors);
  enqueue(std::move(task));
}

std::vector<EmbeddingKey> VolatileStore::evict(const std::string& name,
                                               std::uint32_t partition) {
  Table& t = table_ref(name);
  if (partition >= t.config.partition_count) {
    throw std::invalid_argument("partition index out of range");
  }
  Partition& p = *t.partitions[partition];
  std::lock_guard lk(p.mutex);
  return prune_partition(t, p);
}

void VolatileStore::enqueue(BackgroundTask task) {
  {
    std::lock_guard lk(queue_mutex_);
    queue_.push_back(std::move(task));
  }
  queue_cv_.notify_one();
}

void VolatileStore::background_loop() {
  for (;;) {
    BackgroundTask task;
    {
      std::unique_lock lk(queue_mutex_);
      queue_cv_.wait(lk, [&] { return stopping_ || !queue_.empty(); });
      if (queue_.empty()) {
        return;  // stopping; pending refreshes are best-effort by contract
      }
      task = std::move(queue_.front());
      queue_.pop_front();
      worker_busy_ = true;
    }
    Table& t = *task.table;
    if (task.is_insert) {
      const std::uint64_t stamp =
          t.clock.fetch_add(1, std::memory_order_relaxed) + 1;
      insert_rows(t, task.keys, task.vectors, stamp);
    } else {
      for (const EmbeddingKey key : task.keys) {
        Partition& p =
            *t.partitions[partition_of(key, t.config.partition_count)];
        std::lock_guard lk(p.mutex);
        auto it = p.entries.find(key);
        if (it != p.entries.end()) {
          // Never move a stamp backwards: a later insert or lookup may have
          // already stamped the entry with a newer clock value.
          it->second.last_access = std::max(it->second.last_access, task.stamp);
        }
      }
    }
    {
      std::lock_guard lk(queue_mutex_);
      worker_busy_ = false;
      if (queue_.empty()) {
        idle_cv_.notify_all();
      }
    }
  }
}

void VolatileStore::drain() {
  std::unique_lock lk(queue_mutex_);
  idle_cv_.wait(lk, [&] { return queue_.empty() && !worker_busy_; });
}

std::size_t VolatileStore::partition_size(const std::string& name,
                                          std::uint32_t partition) const {
  const Table& t = table_ref(name);
  if (partition >= t.config.partition_count) {
    throw std::invalid_argument("partition index out of range");
  }
  Partition& p = *t.partitions[partition];
  std::lock_guard lk(p.mutex);
  return p.entries.size();
}

std::size_t VolatileStore::table_size(const std::string& name) const {
  const Table& t = table_ref(name);
  std::size_t total = 0;
  for (const auto& p : t.partitions) {
    std::lock_guard lk(p->mutex);
    total += p->entries.size();
  }
  return total;
}

std::optional<std::uint64_t> VolatileStore::last_access(
    const std::string& name, EmbeddingKey key) const {
  const Table& t = table_ref(name);
  Partition& p = *t.partitions[partition_of(key, t.config.partition_count)];
  std::lock_guard lk(p.mutex);
  auto it = p.entries.find(key);
  if (it == p.entries.end()) {
    return std::nullopt;
  }
  return it->second.last_access;
}

std::uint64_t VolatileStore::table_clock(const std::string& name) const {
  return table_ref(name).clock.load(std::memory_order_relaxed);
}

std::vector<EmbeddingKey> VolatileStore::keys(const std::string& name) const {
  const Table& t = table_ref(name);
  std::vector<EmbeddingKey> out;
  for (const auto& p : t.partitions) {
    std::lock_guard lk(p->mutex);
    for (const auto& [key, entry] : p->entries) {
      out.push_back(key);
    }
  }
  return out;
}

}  // namespace hps
