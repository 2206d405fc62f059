#include "hps/lookup_engine.hpp"

#include <algorithm>
#include <stdexcept>
#include <unordered_map>

namespace hps {

WorkspacePool::WorkspacePool(std::size_t size) {
  if (size == 0) {
    throw std::invalid_argument("workspace pool size must be positive");
  }
  slots_.reserve(size);
  free_.reserve(size);
  for (std::size_t i = 0; i < size; ++i) {
    slots_.push_back(std::make_unique<Workspace>());
    free_.push_back(slots_.back().get());
  }
}

Workspace* WorkspacePool::acquire() {
  std::unique_lock lk(mutex_);
  cv_.wait(lk, [&] { return !free_.empty(); });
  Workspace* ws = free_.back();
  free_.pop_back();
  ++outstanding_;
  peak_outstanding_ = std::max(peak_outstanding_, outstanding_);
  return ws;
}

void WorkspacePool::release(Workspace* ws) {
  {
    std::lock_guard lk(mutex_);
    free_.push_back(ws);
    --outstanding_;
  }
  cv_.notify_one();
}

std::size_t WorkspacePool::outstanding() const {
  std::lock_guard lk(mutex_);
  return outstanding_;
}

std::size_t WorkspacePool::peak_outstanding() const {
  std::lock_guard lk(mutex_);
  return peak_outstanding_;
}

FetchResult tier_fetch(const TableId& table,
                       std::span<const EmbeddingKey> keys, VolatileStore* vdb,
                       PersistentStore& pdb, TierCounters* counters) {
  FetchResult out;
  if (keys.empty()) {
    return out;
  }

  const bool use_vdb = vdb != nullptr && vdb->has_table(table.name);
  std::vector<EmbeddingKey> remaining;
  if (use_vdb) {
    FetchResult v = vdb->lookup(table.name, keys);
    if (counters) {
      counters->vdb_hits += v.found_keys.size();
    }
    out.found_keys = std::move(v.found_keys);
    out.found_vectors = std::move(v.found_vectors);
    remaining = std::move(v.missing_keys);
  } else {
    remaining.assign(keys.begin(), keys.end());
  }

  if (!remaining.empty()) {
    FetchResult p = pdb.get(table.name, remaining);
    if (counters) {
      counters->pdb_hits += p.found_keys.size();
      counters->missing += p.missing_keys.size();
    }
    if (use_vdb && !p.found_keys.empty()) {
      // Promote cold reads so the next fetch is served from memory.
      vdb->insert_async(table.name, p.found_keys, p.found_vectors);
    }
    out.found_keys.insert(out.found_keys.end(), p.found_keys.begin(),
                          p.found_keys.end());
    out.found_vectors.insert(out.found_vectors.end(), p.found_vectors.begin(),
                             p.found_vectors.end());
    out.missing_keys = std::move(p.missing_keys);
  }
  return out;
}

LookupEngine::LookupEngine(const TableId& table, SlabCache& cache,
                           VolatileStore* vdb, PersistentStore& pdb,
                           EngineConfig config)
    : table_(table),
      cache_(cache),
      vdb_(vdb),
      pdb_(pdb),
      config_(std::move(config)),
      pool_(config_.workspace_pool_size) {
  validate_table_id(table_);
  if (cache_.dimension() != table_.dimension) {
    throw std::invalid_argument("cache dimension does not match table");
  }
  if (config_.hit_rate_threshold < 0.0 || config_.hit_rate_threshold > 1.0) {
    throw std::invalid_argument("hit_rate_threshold must be within [0, 1]");
  }
  if (config_.async_worker_count == 0) {
    throw std::invalid_argument("async_worker_count must be positive");
  }
  default_vector_ = config_.default_vector;
  default_vector_.resize(table_.dimension, 0.0f);

  async_workers_.reserve(config_.async_worker_count);
  for (std::uint32_t i = 0; i < config_.async_worker_count; ++i) {
    async_workers_.emplace_back([this] { async_loop(); });
  }
}

LookupEngine::~LookupEngine() {
  {
    std::lock_guard lk(queue_mutex_);
    stopping_ = true;
  }
  queue_cv_.notify_all();
  for (auto& w : async_workers_) {
    w.join();
  }
}

LookupResult LookupEngine::lookup(std::span<const EmbeddingKey> keys,
                                  LookupOutcome* outcome) {
  const std::uint32_t d = table_.dimension;
  DedupResult dd = dedup_keys(keys);
  const std::size_t n_unique = dd.unique_keys.size();

  WorkspaceLease lease(pool_);
  Workspace& ws = *lease.get();
  ws.unique_keys = std::move(dd.unique_keys);
  ws.vectors.assign(n_unique * d, 0.0f);
  ws.missing_keys.clear();
  ws.missing_positions.clear();

  const std::vector<CacheMiss> misses = cache_.query(ws.unique_keys, ws.vectors);
  for (const CacheMiss& m : misses) {
    ws.missing_keys.push_back(m.key);
    ws.missing_positions.push_back(static_cast<std::uint32_t>(m.position));
  }
  const double h =
      n_unique == 0
          ? 1.0
          : 1.0 - static_cast<double>(misses.size()) /
                      static_cast<double>(n_unique);
  ws.hit_rate = h;

  const bool sync_branch = h < config_.hit_rate_threshold;
  std::vector<std::uint8_t> unique_defaults(n_unique, 0);
  TierCounters counters;
  std::size_t defaults = 0;

  if (sync_branch) {
    FetchResult fetched =
        tier_fetch(table_, ws.missing_keys,
                   config_.volatile_tier_enabled ? vdb_ : nullptr, pdb_,
                   &counters);
    std::unordered_map<EmbeddingKey, std::uint32_t> row_of;
    row_of.reserve(ws.missing_keys.size());
    for (std::size_t i = 0; i < ws.missing_keys.size(); ++i) {
      row_of.emplace(ws.missing_keys[i], ws.missing_positions[i]);
    }
    for (std::size_t i = 0; i < fetched.found_keys.size(); ++i) {
      const std::uint32_t row = row_of.at(fetched.found_keys[i]);
      std::copy_n(fetched.found_vectors.data() + i * d, d,
                  ws.vectors.data() + static_cast<std::size_t>(row) * d);
    }
    for (const EmbeddingKey key : fetched.missing_keys) {
      const std::uint32_t row = row_of.at(key);
      std::copy_n(default_vector_.data(), d,
                  ws.vectors.data() + static_cast<std::size_t>(row) * d);
      unique_defaults[row] = 1;
      ++defaults;
    }
    if (!fetched.found_keys.empty()) {
      cache_.replace(fetched.found_keys, fetched.found_vectors);
    }
  } else {
    for (const std::uint32_t row : ws.missing_positions) {
      std::copy_n(default_vector_.data(), d,
                  ws.vectors.data() + static_cast<std::size_t>(row) * d);
      unique_defaults[row] = 1;
      ++defaults;
    }
  }

  LookupResult result;
  result.dimension = d;
  result.vectors.resize(keys.size() * d);
  result.miss_flags.resize(keys.size());
  for (std::size_t i = 0; i < keys.size(); ++i) {
    const std::uint32_t u = dd.inverse_indices[i];
    std::copy_n(ws.vectors.data() + static_cast<std::size_t>(u) * d, d,
                result.vectors.data() + i * d);
    result.miss_flags[i] = unique_defaults[u];
  }

  if (outcome) {
    outcome->sync_branch = sync_branch;
    outcome->unique_hit_rate = h;
    outcome->unique_count = n_unique;
    outcome->defaults_returned = defaults;
  }

  {
    std::lock_guard lk(stats_mutex_);
    ++stats_.queries;
    stats_.queried_keys += keys.size();
    stats_.unique_keys += n_unique;
    stats_.cache_hits += n_unique - misses.size();
    stats_.cache_misses += misses.size();
    stats_.defaults_returned += defaults;
    if (sync_branch) {
      ++stats_.sync_batches;
      stats_.vdb_hits += counters.vdb_hits;
      stats_.pdb_hits += counters.pdb_hits;
      stats_.tier_missing += counters.missing;
    } else {
      ++stats_.async_batches;
    }
  }

  if (!sync_branch && !ws.missing_keys.empty()) {
    // The response is fully expanded, so the workspace (and its missing-key
    // list) can ride along with the background insertion task.
    {
      std::lock_guard lk(queue_mutex_);
      queue_.push_back(AsyncTask{std::move(lease)});
    }
    queue_cv_.notify_one();
  }

  return result;
}

void LookupEngine::async_loop() {
  for (;;) {
    AsyncTask task;
    {
      std::unique_lock lk(queue_mutex_);
      queue_cv_.wait(lk, [&] { return stopping_ || !queue_.empty(); });
      if (queue_.empty()) {
        return;  // stopping and nothing left to do
      }
      task = std::move(queue_.front());
      queue_.pop_front();
      ++active_tasks_;
    }
    TierCounters counters;
    try {
      FetchResult fetched =
          tier_fetch(table_, task.lease->missing_keys,
                     config_.volatile_tier_enabled ? vdb_ : nullptr, pdb_,
                     &counters);
      if (!fetched.found_keys.empty()) {
        cache_.replace(fetched.found_keys, fetched.found_vectors);
      }
      std::lock_guard lk(stats_mutex_);
      stats_.vdb_hits += counters.vdb_hits;
      stats_.pdb_hits += counters.pdb_hits;
      stats_.tier_missing += counters.missing;
    } catch (...) {
      // The caller already got default vectors; a failed background fill
      // only costs future hit rate.
      std::lock_guard lk(stats_mutex_);
      ++stats_.async_faults;
    }
    task.lease.reset();
    {
      std::lock_guard lk(queue_mutex_);
      --active_tasks_;
      if (queue_.empty() && active_tasks_ == 0) {
        idle_cv_.notify_all();
      }
    }
  }
}

void LookupEngine::drain_async() {
  std::unique_lock lk(queue_mutex_);
  idle_cv_.wait(lk, [&] { return queue_.empty() && active_tasks_ == 0; });
}

EngineStatsSnapshot LookupEngine::stats() const {
  std::lock_guard lk(stats_mutex_);
  return stats_;
}

}  // namespace hps
