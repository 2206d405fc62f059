#include "hps/server.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <cstring>

#include "hps/detail/bytes.hpp"

namespace hps {

namespace {

bool read_exact(int fd, std::uint8_t* buf, std::size_t n) {
  std::size_t got = 0;
  while (got < n) {
    const ssize_t r = ::recv(fd, buf + got, n - got, 0);
    if (r == 0) {
      return false;  // peer closed
    }
    if (r < 0) {
      if (errno == EINTR) {
        continue;
      }
      return false;
    }
    got += static_cast<std::size_t>(r);
  }
  return true;
}

bool write_all(int fd, const std::uint8_t* buf, std::size_t n) {
  std::size_t sent = 0;
  while (sent < n) {
    const ssize_t r = ::send(fd, buf + sent, n - sent, MSG_NOSIGNAL);
    if (r < 0) {
      if (errno == EINTR) {
        continue;
      }
      return false;
    }
    sent += static_cast<std::size_t>(r);
  }
  return true;
}

}  // namespace

Node::Node(NodeConfig config) : config_(std::move(config)) {
  pdb_ = std::make_unique<PersistentStore>(config_.data_dir);
  vdb_ = std::make_unique<VolatileStore>();
  for (const TableId& id : pdb_->tables()) {
    setup_table(id);
  }
  if (config_.start_ingest_thread) {
    ingest_thread_ = std::thread([this] { ingest_loop(); });
  }
}

Node::~Node() {
  if (ingest_thread_.joinable()) {
    {
      std::lock_guard lk(ingest_thread_mutex_);
      ingest_stop_ = true;
    }
    ingest_cv_.notify_all();
    ingest_thread_.join();
  }
  for (auto& [name, rt] : tables_) {
    rt->refresh->stop_periodic();
    rt->engine->drain_async();
  }
  vdb_->drain();
}

void Node::setup_table(const TableId& id) {
  auto rt = std::make_unique<TableRuntime>();
  rt->id = id;

  SlabCacheConfig cache_config;
  cache_config.slabset_count = config_.cache_slabsets;
  cache_config.slabs_per_set = config_.cache_slabs_per_set;
  cache_config.dimension = id.dimension;
  cache_config.worker_pool_size = config_.cache_worker_pool;
  cache_config.tasks_per_worker = config_.cache_tasks_per_worker;
  rt->cache = std::make_unique<SlabCache>(cache_config);

  vdb_->register_table(id, config_.vdb);

  rt->engine = std::make_unique<LookupEngine>(id, *rt->cache, vdb_.get(),
                                              *pdb_, config_.engine);
  rt->refresh = std::make_unique<RefreshEngine>(
      id, *rt->cache,
      config_.engine.volatile_tier_enabled ? vdb_.get() : nullptr, *pdb_,
      config_.refresh);

  updates_.create_topic(id);
  rt->subscription = std::make_unique<Subscription>(
      updates_.subscribe(id.name, 0, std::nullopt));
  rt->subscription->set_rate_limit(config_.ingest_rate_limit);

  preload_table(*rt);
  if (config_.start_periodic_refresh) {
    rt->refresh->start_periodic();
  }
  tables_.emplace(id.name, std::move(rt));
}

void Node::preload_table(TableRuntime& rt) {
  double rate = config_.vdb.initial_cache_rate;
  rate = std::clamp(rate, 0.0, 1.0);
  if (rate == 0.0) {
    return;
  }
  std::vector<EmbeddingKey> all = pdb_->keys(rt.id.name);
  std::sort(all.begin(), all.end());
  const std::size_t want = std::min(
      static_cast<std::size_t>(rate * static_cast<double>(all.size()) + 0.5),
      rt.cache->capacity());
  all.resize(want);

  constexpr std::size_t kBatch = 4096;
  for (std::size_t start = 0; start < all.size(); start += kBatch) {
    const std::size_t n = std::min(kBatch, all.size() - start);
    const std::span<const EmbeddingKey> chunk(all.data() + start, n);
    FetchResult fetched = pdb_->get(rt.id.name, chunk);
    if (!fetched.found_keys.empty()) {
      rt.cache->replace(fetched.found_keys, fetched.found_vectors);
    }
  }
}

void Node::ingest_loop() {
  for (;;) {
    {
      std::unique_lock lk(ingest_thread_mutex_);
      if (ingest_cv_.wait_for(lk, config_.ingest_interval,
                              [&] { return ingest_stop_; })) {
        return;
      }
    }
    for (auto& [name, rt] : tables_) {
      std::lock_guard lk(rt->ingest_mutex);
      try {
        rt->subscription->ingest_tick(*vdb_, *pdb_);
      } catch (const TierFault& fault) {
        std::fprintf(stderr, "hps: ingest tick failed for %s: %s\n",
                     name.c_str(), fault.what());
      }
    }
  }
}

std::vector<std::string> Node::table_names() const {
  std::vector<std::string> names;
  names.reserve(tables_.size());
  for (const auto& [name, rt] : tables_) {
    names.push_back(name);
  }
  std::sort(names.begin(), names.end());
  return names;
}

bool Node::has_table(const std::string& name) const {
  return tables_.count(name) != 0;
}

Node::TableRuntime& Node::runtime(const std::string& name) {
  auto it = tables_.find(name);
  if (it == tables_.end()) {
    throw std::invalid_argument("node has no table named " + name);
  }
  return *it->second;
}

const Node::TableRuntime& Node::runtime(const std::string& name) const {
  auto it = tables_.find(name);
  if (it == tables_.end()) {
    throw std::invalid_argument("node has no table named " + name);
  }
  return *it->second;
}

SlabCache& Node::cache(const std::string& name) { return *runtime(name).cache; }
LookupEngine& Node::engine(const std::string& name) {
  return *runtime(name).engine;
}
RefreshEngine& Node::refresher(const std::string& name) {
  return *runtime(name).refresh;
}

LookupResult Node::lookup(const std::string& name,
                          std::span<const EmbeddingKey> keys,
                          LookupOutcome* outcome) {
  return runtime(name).engine->lookup(keys, outcome);
}

std::uint64_t Node::produce(const std::string& name,
                            std::span<const EmbeddingKey> keys,
                            std::span<const float> vectors) {
  runtime(name);  // unknown tables fail before touching the log
  return updates_.produce(name, keys, vectors);
}

void Node::ingest_now(const std::string& name) {
  TableRuntime& rt = runtime(name);
  for (;;) {
    std::lock_guard lk(rt.ingest_mutex);
    rt.subscription->ingest_tick(*vdb_, *pdb_);
    if (rt.subscription->pending() == 0) {
      return;
    }
  }
}

RefreshOutcome Node::refresh(const std::string& name) {
  TableRuntime& rt = runtime(name);
  ingest_now(name);
  for (;;) {
    auto outcome = rt.refresh->run_once();
    if (outcome) {
      return *outcome;
    }
    // A periodic run is active; wait for it to finish and trigger again so
    // the caller gets refresh-after-ingest semantics.
    std::this_thread::sleep_for(std::chrono::milliseconds(1));
  }
}

WireStats Node::stats(const std::string& name) const {
  const TableRuntime& rt = runtime(name);
  const EngineStatsSnapshot s = rt.engine->stats();
  WireStats out;
  const std::uint64_t probed = s.cache_hits + s.cache_misses;
  out.hit_rate_ppm =
      probed == 0 ? 0
                  : static_cast<std::uint32_t>(s.cache_hits * 1000000 / probed);
  out.occupied = rt.cache->occupied();
  out.capacity = rt.cache->capacity();
  out.cache_hits = s.cache_hits;
  out.cache_misses = s.cache_misses;
  out.vdb_hits = s.vdb_hits;
  out.pdb_hits = s.pdb_hits;
  out.tier_missing = s.tier_missing;
  return out;
}

void Node::drain() {
  for (auto& [name, rt] : tables_) {
    ingest_now(name);
  }
  for (auto& [name, rt] : tables_) {
    rt->engine->drain_async();
  }
  vdb_->drain();
}

std::vector<std::uint8_t> handle_frame(Node& node,
                                       std::span<const std::uint8_t> body) {
  std::optional<WireRequest> req;
  try {
    req = decode_request_body(body);
  } catch (const std::exception&) {
    WireResponse resp;
    resp.status = Status::TierFaultError;
    return encode_response_frame(Opcode::Lookup, resp);
  }
  if (!req) {
    WireResponse resp;
    resp.status = Status::BadRequest;
    return encode_response_frame(Opcode::Lookup, resp);
  }

  WireResponse resp;
  try {
    switch (req->opcode) {
      case Opcode::Lookup: {
        LookupResult r = node.lookup(req->table, req->keys);
        resp.count = static_cast<std::uint32_t>(req->keys.size());
        resp.dim = r.dimension;
        resp.vectors = std::move(r.vectors);
        resp.miss_bitmap.assign((req->keys.size() + 7) / 8, 0);
        for (std::size_t i = 0; i < r.miss_flags.size(); ++i) {
          if (r.miss_flags[i]) {
            set_miss_bit(resp.miss_bitmap, i);
          }
        }
        break;
      }
      case Opcode::Update: {
        resp.last_seq = node.produce(req->table, req->keys, req->vectors);
        break;
      }
      case Opcode::Refresh: {
        RefreshOutcome r = node.refresh(req->table);
        resp.refreshed = r.refreshed;
        resp.unresolved = r.unresolved.size();
        break;
      }
      case Opcode::Stats: {
        resp.stats = node.stats(req->table);
        break;
      }
    }
  } catch (const std::invalid_argument&) {
    resp = WireResponse{};
    resp.status = Status::BadRequest;
  } catch (const std::exception&) {
    resp = WireResponse{};
    resp.status = Status::TierFaultError;
  }
  return encode_response_frame(req->opcode, resp);
}

WireServer::WireServer(Node& node, const std::string& host,
                       std::uint16_t port)
    : node_(node) {
  listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (listen_fd_ < 0) {
    throw TierFault("cannot create listening socket");
  }
  const int one = 1;
  ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));

  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  std::string resolved = host;
  if (resolved.empty()) {
    resolved = "0.0.0.0";
  } else if (resolved == "localhost") {
    resolved = "127.0.0.1";
  }
  if (::inet_pton(AF_INET, resolved.c_str(), &addr.sin_addr) != 1) {
    ::close(listen_fd_);
    throw std::invalid_argument("cannot parse listen host " + host);
  }
  if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) !=
      0) {
    ::close(listen_fd_);
    throw TierFault("cannot bind to " + resolved + ":" + std::to_string(port));
  }
  if (::listen(listen_fd_, 64) != 0) {
    ::close(listen_fd_);
    throw TierFault("cannot listen on " + resolved);
  }
  sockaddr_in bound{};
  socklen_t len = sizeof(bound);
  ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&bound), &len);
  port_ = ntohs(bound.sin_port);
}

WireServer::~WireServer() { stop(); }

void WireServer::start() {
  if (accept_thread_.joinable()) {
    return;
  }
  accept_thread_ = std::thread([this] { accept_loop(); });
}

void WireServer::stop() {
  if (stopping_.exchange(true)) {
    if (accept_thread_.joinable()) {
      accept_thread_.join();
    }
    return;
  }
  if (listen_fd_ >= 0) {
    ::shutdown(listen_fd_, SHUT_RDWR);
    ::close(listen_fd_);
    listen_fd_ = -1;
  }
  if (accept_thread_.joinable()) {
    accept_thread_.join();
  }
  {
    std::lock_guard lk(conn_mutex_);
    for (const int fd : conn_fds_) {
      ::shutdown(fd, SHUT_RDWR);
    }
  }
  for (auto& t : conn_threads_) {
    t.join();
  }
  conn_threads_.clear();
}

void WireServer::accept_loop() {
  for (;;) {
    const int fd = ::accept(listen_fd_, nullptr, nullptr);
    if (fd < 0) {
      if (stopping_.load() || (errno != EINTR && errno != ECONNABORTED)) {
        return;
      }
      continue;
    }
    const int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    {
      std::lock_guard lk(conn_mutex_);
      conn_fds_.insert(fd);
      conn_threads_.emplace_back([this, fd] { serve_connection(fd); });
    }
  }
}

void WireServer::serve_connection(int fd) {
  std::uint8_t len_buf[4];
  std::vector<std::uint8_t> body;
  for (;;) {
    if (!read_exact(fd, len_buf, 4)) {
      break;
    }
    const std::uint32_t body_len = detail::load_le32(len_buf);
    if (body_len > kMaxFrameBytes) {
      // Unreasonable frame: answer and drop the connection, since the byte
      // stream can no longer be trusted.
      WireResponse resp;
      resp.status = Status::BadRequest;
      const auto frame = encode_response_frame(Opcode::Lookup, resp);
      write_all(fd, frame.data(), frame.size());
      break;
    }
    body.resize(body_len);
    if (body_len > 0 && !read_exact(fd, body.data(), body_len)) {
      break;
    }
    const std::vector<std::uint8_t> response = handle_frame(node_, body);
    if (!write_all(fd, response.data(), response.size())) {
      break;
    }
  }
  ::close(fd);
  std::lock_guard lk(conn_mutex_);
  conn_fds_.erase(fd);
}

WireClient::WireClient(const std::string& host, std::uint16_t port) {
  fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd_ < 0) {
    throw TierFault("cannot create client socket");
  }
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  std::string resolved = host.empty() || host == "localhost" ? "127.0.0.1"
                                                              : host;
  if (::inet_pton(AF_INET, resolved.c_str(), &addr.sin_addr) != 1) {
    ::close(fd_);
    throw std::invalid_argument("cannot parse host " + host);
  }
  if (::connect(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
    ::close(fd_);
    throw TierFault("cannot connect to " + resolved + ":" +
                    std::to_string(port));
  }
}

WireClient::~WireClient() {
  if (fd_ >= 0) {
    ::close(fd_);
  }
}

WireResponse WireClient::call(const WireRequest& request) {
  const auto frame = encode_request_frame(request);
  if (!write_all(fd_, frame.data(), frame.size())) {
    throw TierFault("failed to send request");
  }
  std::uint8_t len_buf[4];
  if (!read_exact(fd_, len_buf, 4)) {
    throw TierFault("connection closed before response");
  }
  const std::uint32_t body_len = detail::load_le32(len_buf);
  if (body_len > kMaxFrameBytes) {
    throw TierFault("response frame too large");
  }
  std::vector<std::uint8_t> body(body_len);
  if (body_len > 0 && !read_exact(fd_, body.data(), body_len)) {
    throw TierFault("connection closed mid-response");
  }
  auto resp = decode_response_body(request.opcode, body);
  if (!resp) {
    throw TierFault("undecodable response");
  }
  return *resp;
}

std::pair<std::string, std::uint16_t> parse_host_port(const std::string& s) {
  const std::size_t colon = s.rfind(':');
  if (colon == std::string::npos || colon + 1 == s.size()) {
    throw std::invalid_argument("expected host:port, got " + s);
  }
  const std::string host = s.substr(0, colon);
  const std::string port_str = s.substr(colon + 1);
  if (!std::all_of(port_str.begin(), port_str.end(),
                   [](unsigned char c) { return std::isdigit(c); })) {
    throw std::invalid_argument("port is not numeric in " + s);
  }
  unsigned long port = 0;
  try {
    port = std::stoul(port_str);
  } catch (...) {
    throw std::invalid_argument("port out of range in " + s);
  }
  if (port > 65535) {
    throw std::invalid_argument("port out of range in " + s);
  }
  return {host, static_cast<std::uint16_t>(port)};
}

}  // namespace hps
