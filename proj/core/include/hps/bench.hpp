#pragma once

// Closed-loop benchmark: generates a table, wires cache + tiers + engine,
// then replays a power-law key stream batch by batch, timing each lookup.
// Rows stream to CSV with the exact header
//
//   iteration,latency_us,hit_rate,sync_branch,defaults_returned
//
// followed by '#'-prefixed summary lines; steady-state numbers average the
// last 10% of iterations.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <vector>

#include "hps/types.hpp"

namespace hps {

struct BenchConfig {
  double alpha = 1.2;
  std::uint64_t keys = 100000;
  std::uint32_t dim = 64;
  std::size_t cache_slabsets = 0;  // 0: size the cache to ~10% of keys
  std::uint32_t cache_slabs_per_set = 2;
  std::uint32_t cache_worker_pool = 2;
  double threshold = 0.8;
  std::size_t batch_size = 1024;
  std::size_t iterations = 1000;
  std::uint64_t seed = 42;
  std::size_t workspace_pool = 16;
  std::uint32_t async_workers = 2;
  bool use_volatile = true;
  std::string table = "bench";
  // Empty: a throwaway directory is created and removed. Non-empty: reused
  // across runs; the table is generated only when absent.
  std::filesystem::path data_dir;
};

struct BenchRecord {
  std::uint64_t iteration = 0;
  double latency_us = 0.0;
  double hit_rate = 0.0;  // unique-key cache hit rate of the batch
  bool sync_branch = false;
  std::uint64_t defaults_returned = 0;
};

struct BenchSummary {
  std::size_t iterations = 0;
  double mean_latency_us = 0.0;
  double steady_latency_us = 0.0;
  double overall_hit_rate = 0.0;
  double steady_hit_rate = 0.0;
  std::uint64_t sync_batches = 0;
  std::uint64_t async_batches = 0;
  std::uint64_t defaults_returned = 0;
};

// Derives the stream draw seed from the config seed (the permutation uses
// the config seed directly).
std::uint64_t bench_draw_seed(std::uint64_t seed);

BenchSummary run_bench(const BenchConfig& config, std::ostream& csv,
                       std::vector<BenchRecord>* records = nullptr);

}  // namespace hps
