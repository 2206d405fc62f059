#include "hps/refresh_engine.hpp"

namespace hps {

RefreshOutcome refresh_cache(SlabCache& cache, const TableId& table,
                             VolatileStore* vdb, PersistentStore& pdb,
                             std::size_t dump_batch_size) {
  RefreshOutcome outcome;
  auto cursor = cache.dump(dump_batch_size);
  std::vector<EmbeddingKey> batch;
  while (cursor.next(batch)) {
    FetchResult fetched = tier_fetch(table, batch, vdb, pdb);
    if (!fetched.found_keys.empty()) {
      outcome.refreshed +=
          cache.update(fetched.found_keys, fetched.found_vectors);
    }
    outcome.unresolved.insert(outcome.unresolved.end(),
                              fetched.missing_keys.begin(),
                              fetched.missing_keys.end());
  }
  return outcome;
}

RefreshEngine::RefreshEngine(const TableId& table, SlabCache& cache,
                             VolatileStore* vdb, PersistentStore& pdb,
                             RefreshConfig config)
    : table_(table), cache_(cache), vdb_(vdb), pdb_(pdb), config_(config) {
  validate_table_id(table_);
  if (config_.dump_batch_size == 0) {
    throw std::invalid_argument("dump_batch_size must be positive");
  }
}

RefreshEngine::~RefreshEngine() { stop_periodic(); }

std::optional<RefreshOutcome> RefreshEngine::run_once() {
  bool expected = false;
  if (!running_.compare_exchange_strong(expected, true)) {
    skipped_.fetch_add(1, std::memory_order_relaxed);
    return std::nullopt;
  }
  try {
    RefreshOutcome outcome =
        refresh_cache(cache_, table_, vdb_, pdb_, config_.dump_batch_size);
    completed_.fetch_add(1, std::memory_order_relaxed);
    running_.store(false);
    return outcome;
  } catch (...) {
    faulted_.fetch_add(1, std::memory_order_relaxed);
    running_.store(false);
    throw;
  }
}

void RefreshEngine::start_periodic() {
  std::lock_guard lk(periodic_mutex_);
  if (periodic_.joinable()) {
    return;
  }
  periodic_stop_ = false;
  periodic_ = std::thread([this] { periodic_loop(); });
}

void RefreshEngine::stop_periodic() {
  {
    std::lock_guard lk(periodic_mutex_);
    if (!periodic_.joinable()) {
      return;
    }
    periodic_stop_ = true;
  }
  periodic_cv_.notify_all();
  periodic_.join();
  std::lock_guard lk(periodic_mutex_);
  periodic_ = std::thread();
}

void RefreshEngine::periodic_loop() {
  for (;;) {
    {
      std::unique_lock lk(periodic_mutex_);
      if (periodic_cv_.wait_for(lk, config_.interval,
                                [&] { return periodic_stop_; })) {
        return;
      }
    }
    try {
      run_once();
    } catch (const TierFault&) {
      // Already counted in faulted_; the next interval retries.
    }
  }
}

}  // namespace hps
