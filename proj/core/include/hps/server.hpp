#pragma once

// Service wiring and the TCP front end. A Node owns the shared tiers (one
// persistent store, one volatile store, one update log) plus a cache, lookup
// engine, and refresh engine per table, and runs the lazy ingestion loop
// that applies produced updates to the tiers. The WireServer speaks the
// framed protocol from wire.hpp on a listening socket, one thread per
// connection.

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "hps/lookup_engine.hpp"
#include "hps/persistent_store.hpp"
#include "hps/refresh_engine.hpp"
#include "hps/slab_cache.hpp"
#include "hps/types.hpp"
#include "hps/update_stream.hpp"
#include "hps/volatile_store.hpp"
#include "hps/wire.hpp"

namespace hps {

struct NodeConfig {
  std::filesystem::path data_dir;

  // Per-table cache geometry.
  std::size_t cache_slabsets = 2048;
  std::uint32_t cache_slabs_per_set = 2;
  std::uint32_t cache_worker_pool = 2;
  std::uint32_t cache_tasks_per_worker = 8;

  EngineConfig engine;
  VolatileTableConfig vdb;
  RefreshConfig refresh;
  bool start_periodic_refresh = false;

  bool start_ingest_thread = true;
  std::chrono::milliseconds ingest_interval{100};
  std::size_t ingest_rate_limit = 1000;
};

// One running parameter-server process: tiers, caches, engines, ingestion.
class Node {
 public:
  explicit Node(NodeConfig config);
  ~Node();

  Node(const Node&) = delete;
  Node& operator=(const Node&) = delete;

  std::vector<std::string> table_names() const;
  bool has_table(const std::string& name) const;

  LookupResult lookup(const std::string& name,
                      std::span<const EmbeddingKey> keys,
                      LookupOutcome* outcome = nullptr);
  std::uint64_t produce(const std::string& name,
                        std::span<const EmbeddingKey> keys,
                        std::span<const float> vectors);
  // Applies all pending updates for the table, then runs one refresh pass.
  RefreshOutcome refresh(const std::string& name);
  WireStats stats(const std::string& name) const;

  // Applies pending updates for one table until caught up.
  void ingest_now(const std::string& name);
  // Full quiescence: ingest everything, drain async fills and inserts.
  void drain();

  PersistentStore& pdb() { return *pdb_; }
  VolatileStore& vdb() { return *vdb_; }
  UpdateLog& updates() { return updates_; }
  SlabCache& cache(const std::string& name);
  LookupEngine& engine(const std::string& name);
  RefreshEngine& refresher(const std::string& name);

 private:
  struct TableRuntime {
    TableId id;
    std::unique_ptr<SlabCache> cache;
    std::unique_ptr<LookupEngine> engine;
    std::unique_ptr<RefreshEngine> refresh;
    std::unique_ptr<Subscription> subscription;
    std::mutex ingest_mutex;
  };

  TableRuntime& runtime(const std::string& name);
  const TableRuntime& runtime(const std::string& name) const;
  void setup_table(const TableId& id);
  void preload_table(TableRuntime& rt);
  void ingest_loop();

  NodeConfig config_;
  std::unique_ptr<PersistentStore> pdb_;
  std::unique_ptr<VolatileStore> vdb_;
  UpdateLog updates_;
  std::unordered_map<std::string, std::unique_ptr<TableRuntime>> tables_;

  std::mutex ingest_thread_mutex_;
  std::condition_variable ingest_cv_;
  bool ingest_stop_ = false;
  std::thread ingest_thread_;
};

// Stateless frame dispatch, shared by the socket loop and the tests: decodes
// the body, executes against the node, and encodes a full response frame.
// Malformed input and std::invalid_argument map to BAD_REQUEST; TierFault
// and unexpected errors map to TIER_FAULT. Never throws.
std::vector<std::uint8_t> handle_frame(Node& node,
                                       std::span<const std::uint8_t> body);

class WireServer {
 public:
  // port 0 binds an ephemeral port; read it back with port().
  WireServer(Node& node, const std::string& host, std::uint16_t port);
  ~WireServer();

  WireServer(const WireServer&) = delete;
  WireServer& operator=(const WireServer&) = delete;

  void start();
  void stop();
  std::uint16_t port() const { return port_; }

 private:
  void accept_loop();
  void serve_connection(int fd);

  Node& node_;
  int listen_fd_ = -1;
  std::uint16_t port_ = 0;
  std::thread accept_thread_;
  std::mutex conn_mutex_;
  std::unordered_set<int> conn_fds_;
  std::vector<std::thread> conn_threads_;
  std::atomic<bool> stopping_{false};
};

// Blocking single-connection client for the framed protocol.
class WireClient {
 public:
  WireClient(const std::string& host, std::uint16_t port);
  ~WireClient();

  WireClient(const WireClient&) = delete;
  WireClient& operator=(const WireClient&) = delete;

  // Throws TierFault on transport errors or an undecodable response.
  WireResponse call(const WireRequest& request);

 private:
  int fd_ = -1;
};

// Splits "host:port"; throws std::invalid_argument on malformed input.
std::pair<std::string, std::uint16_t> parse_host_port(const std::string& s);

}  // namespace hps
