#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstring>
#include <optional>
#include <random>
#include <thread>
#include <vector>

#include "doctest.h"
#include "hps/server.hpp"
#include "support/temp_dir.hpp"

using hps::EmbeddingKey;
using hps::Node;
using hps::NodeConfig;
using hps::Opcode;
using hps::Status;
using hps::TableId;
using hps::WireClient;
using hps::WireRequest;
using hps::WireServer;
using hps_test::TempDir;

namespace {

constexpr std::uint32_t kDim = 4;
constexpr std::size_t kSeededKeys = 50;

float seeded_value(EmbeddingKey key, std::uint32_t c) {
  return static_cast<float>(key * 10 + c);
}

// Lays down a table directory the way a provisioning run would, so the node
// discovers it at startup.
void seed_data_dir(const std::filesystem::path& dir) {
  hps::PersistentStore pdb(dir);
  pdb.create_table(TableId{"emb", kDim});
  std::vector<EmbeddingKey> keys;
  std::vector<float> vectors;
  for (EmbeddingKey k = 0; k < kSeededKeys; ++k) {
    keys.push_back(k);
    for (std::uint32_t c = 0; c < kDim; ++c) {
      vectors.push_back(seeded_value(k, c));
    }
  }
  pdb.put("emb", keys, vectors);
  pdb.flush_all();
}

NodeConfig base_config(const TempDir& tmp) {
  NodeConfig config;
  config.data_dir = tmp.path();
  config.cache_slabsets = 8;
  config.cache_slabs_per_set = 2;
  config.start_ingest_thread = false;
  config.vdb.initial_cache_rate = 0.0;
  return config;
}

void expect_row(const hps::LookupResult& result, std::size_t row,
                EmbeddingKey key) {
  for (std::uint32_t c = 0; c < kDim; ++c) {
    CHECK(result.vectors[row * kDim + c] == seeded_value(key, c));
  }
}

// Bare framed-protocol connection for exercising malformed traffic that
// WireClient refuses to produce.
class RawConn {
 public:
  explicit RawConn(std::uint16_t port) {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    REQUIRE(fd_ >= 0);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    REQUIRE(::inet_pton(AF_INET, "127.0.0.1", &addr.sin_addr) == 1);
    REQUIRE(::connect(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) ==
            0);
  }
  ~RawConn() {
    if (fd_ >= 0) ::close(fd_);
  }

  void send_raw(const std::vector<std::uint8_t>& bytes) {
    std::size_t sent = 0;
    while (sent < bytes.size()) {
      const ssize_t r =
          ::send(fd_, bytes.data() + sent, bytes.size() - sent, MSG_NOSIGNAL);
      REQUIRE(r > 0);
      sent += static_cast<std::size_t>(r);
    }
  }

  void send_frame(const std::vector<std::uint8_t>& body) {
    std::vector<std::uint8_t> frame(4);
    const std::uint32_t len = static_cast<std::uint32_t>(body.size());
    frame[0] = static_cast<std::uint8_t>(len);
    frame[1] = static_cast<std::uint8_t>(len >> 8);
    frame[2] = static_cast<std::uint8_t>(len >> 16);
    frame[3] = static_cast<std::uint8_t>(len >> 24);
    frame.insert(frame.end(), body.begin(), body.end());
    send_raw(frame);
  }

  // Returns the response body, or nullopt once the server closes the socket.
  std::optional<std::vector<std::uint8_t>> recv_frame() {
    std::uint8_t len_buf[4];
    if (!recv_exact(len_buf, 4)) {
      return std::nullopt;
    }
    const std::uint32_t len = static_cast<std::uint32_t>(len_buf[0]) |
                              (static_cast<std::uint32_t>(len_buf[1]) << 8) |
                              (static_cast<std::uint32_t>(len_buf[2]) << 16) |
                              (static_cast<std::uint32_t>(len_buf[3]) << 24);
    std::vector<std::uint8_t> body(len);
    if (len > 0 && !recv_exact(body.data(), len)) {
      return std::nullopt;
    }
    return body;
  }

 private:
  bool recv_exact(std::uint8_t* buf, std::size_t n) {
    std::size_t got = 0;
    while (got < n) {
      const ssize_t r = ::recv(fd_, buf + got, n - got, 0);
      if (r <= 0) {
        return false;
      }
      got += static_cast<std::size_t>(r);
    }
    return true;
  }

  int fd_ = -1;
};

}  // namespace

TEST_CASE("a node serves lookups from a seeded data directory") {
  TempDir tmp;
  seed_data_dir(tmp.path());
  Node node(base_config(tmp));

  CHECK(node.table_names() == std::vector<std::string>{"emb"});
  CHECK(node.has_table("emb"));
  CHECK_FALSE(node.has_table("ghost"));

  const std::vector<EmbeddingKey> keys = {3, 7, 3};
  auto result = node.lookup("emb", keys);
  CHECK(result.dimension == kDim);
  REQUIRE(result.vectors.size() == keys.size() * kDim);
  expect_row(result, 0, 3);
  expect_row(result, 1, 7);
  expect_row(result, 2, 3);
  CHECK(result.miss_flags == std::vector<std::uint8_t>{0, 0, 0});

  auto stats = node.stats("emb");
  CHECK(stats.capacity == 8 * 2 * 32);
  CHECK(stats.occupied == 2);
  CHECK(stats.cache_misses == 2);
  CHECK(stats.cache_hits == 0);
  CHECK(stats.pdb_hits == 2);

  node.lookup("emb", keys);
  stats = node.stats("emb");
  CHECK(stats.cache_hits == 2);
  CHECK(stats.hit_rate_ppm == 500000);

  CHECK_THROWS_AS(node.lookup("ghost", keys), std::invalid_argument);
}

TEST_CASE("keys absent from every tier come back as flagged defaults") {
  TempDir tmp;
  seed_data_dir(tmp.path());
  Node node(base_config(tmp));

  auto result = node.lookup("emb", std::vector<EmbeddingKey>{1, 999});
  expect_row(result, 0, 1);
  CHECK(result.miss_flags == std::vector<std::uint8_t>{0, 1});
  for (std::uint32_t c = 0; c < kDim; ++c) {
    CHECK(result.vectors[kDim + c] == 0.0f);
  }
  CHECK(node.stats("emb").tier_missing == 1);
  CHECK(node.cache("emb").occupied() == 1);
}

TEST_CASE("produced updates reach lookups after a refresh") {
  TempDir tmp;
  seed_data_dir(tmp.path());
  Node node(base_config(tmp));

  // cache the old row first so refresh has something to rewrite
  auto before = node.lookup("emb", std::vector<EmbeddingKey>{3});
  expect_row(before, 0, 3);

  std::vector<float> fresh = {9001, 9002, 9003, 9004};
  const std::uint64_t seq =
      node.produce("emb", std::vector<EmbeddingKey>{3}, fresh);
  CHECK(seq == 1);

  // nothing moves until ingestion runs
  auto stale = node.lookup("emb", std::vector<EmbeddingKey>{3});
  expect_row(stale, 0, 3);

  auto outcome = node.refresh("emb");
  CHECK(outcome.refreshed == 1);
  CHECK(outcome.unresolved.empty());

  auto after = node.lookup("emb", std::vector<EmbeddingKey>{3});
  CHECK(after.vectors == fresh);

  // both tiers now hold the update
  auto from_pdb = node.pdb().get("emb", std::vector<EmbeddingKey>{3});
  CHECK(from_pdb.found_vectors == fresh);
  auto from_vdb = node.vdb().lookup("emb", std::vector<EmbeddingKey>{3});
  CHECK(from_vdb.found_vectors == fresh);
}

TEST_CASE("preload warms the cache with the lowest keys") {
  TempDir tmp;
  seed_data_dir(tmp.path());

  {
    NodeConfig config = base_config(tmp);
    config.vdb.initial_cache_rate = 0.5;
    Node node(config);
    CHECK(node.cache("emb").occupied() == kSeededKeys / 2);

    std::vector<EmbeddingKey> warm;
    for (EmbeddingKey k = 0; k < kSeededKeys / 2; ++k) warm.push_back(k);
    node.lookup("emb", warm);
    auto stats = node.stats("emb");
    CHECK(stats.cache_hits == kSeededKeys / 2);
    CHECK(stats.cache_misses == 0);
  }

  NodeConfig full = base_config(tmp);
  full.vdb.initial_cache_rate = 1.0;
  Node warm_node(full);
  CHECK(warm_node.cache("emb").occupied() == kSeededKeys);
}

TEST_CASE("async fills land after a drain") {
  TempDir tmp;
  seed_data_dir(tmp.path());

  NodeConfig config = base_config(tmp);
  config.engine.hit_rate_threshold = 0.0;  // never block the caller
  Node node(config);

  const std::vector<EmbeddingKey> keys = {1, 2, 3};
  auto first = node.lookup("emb", keys);
  CHECK(first.miss_flags == std::vector<std::uint8_t>{1, 1, 1});

  node.drain();
  auto second = node.lookup("emb", keys);
  CHECK(second.miss_flags == std::vector<std::uint8_t>{0, 0, 0});
  expect_row(second, 0, 1);
  expect_row(second, 1, 2);
  expect_row(second, 2, 3);
}

TEST_CASE("the ingest thread applies updates on its own") {
  TempDir tmp;
  seed_data_dir(tmp.path());

  NodeConfig config = base_config(tmp);
  config.start_ingest_thread = true;
  config.ingest_interval = std::chrono::milliseconds(5);
  Node node(config);

  std::vector<float> fresh = {1.5f, 2.5f, 3.5f, 4.5f};
  node.produce("emb", std::vector<EmbeddingKey>{2}, fresh);

  const auto deadline =
      std::chrono::steady_clock::now() + std::chrono::seconds(10);
  for (;;) {
    auto got = node.pdb().get("emb", std::vector<EmbeddingKey>{2});
    if (got.found_vectors == fresh) {
      break;
    }
    REQUIRE(std::chrono::steady_clock::now() < deadline);
    std::this_thread::sleep_for(std::chrono::milliseconds(2));
  }
}

TEST_CASE("the wire protocol works end to end") {
  TempDir tmp;
  seed_data_dir(tmp.path());
  Node node(base_config(tmp));
  WireServer server(node, "127.0.0.1", 0);
  server.start();
  REQUIRE(server.port() != 0);

  WireClient client("127.0.0.1", server.port());

  WireRequest update;
  update.opcode = Opcode::Update;
  update.table = "emb";
  update.keys = {5, 60};  // key 60 is brand new
  update.dim = kDim;
  update.vectors = {100, 101, 102, 103, 200, 201, 202, 203};
  auto resp = client.call(update);
  REQUIRE(resp.status == Status::Ok);
  CHECK(resp.last_seq == 2);

  WireRequest refresh;
  refresh.opcode = Opcode::Refresh;
  refresh.table = "emb";
  resp = client.call(refresh);
  REQUIRE(resp.status == Status::Ok);
  CHECK(resp.refreshed == 0);  // cache was still empty
  CHECK(resp.unresolved == 0);

  WireRequest lookup;
  lookup.opcode = Opcode::Lookup;
  lookup.table = "emb";
  lookup.keys = {5, 60, 999};
  resp = client.call(lookup);
  REQUIRE(resp.status == Status::Ok);
  CHECK(resp.count == 3);
  CHECK(resp.dim == kDim);
  REQUIRE(resp.vectors.size() == 3 * kDim);
  for (std::uint32_t c = 0; c < kDim; ++c) {
    CHECK(resp.vectors[c] == 100.0f + c);
    CHECK(resp.vectors[kDim + c] == 200.0f + c);
    CHECK(resp.vectors[2 * kDim + c] == 0.0f);
  }
  REQUIRE(resp.miss_bitmap.size() == 1);
  CHECK_FALSE(hps::get_miss_bit(resp.miss_bitmap, 0));
  CHECK_FALSE(hps::get_miss_bit(resp.miss_bitmap, 1));
  CHECK(hps::get_miss_bit(resp.miss_bitmap, 2));

  WireRequest stats;
  stats.opcode = Opcode::Stats;
  stats.table = "emb";
  resp = client.call(stats);
  REQUIRE(resp.status == Status::Ok);
  CHECK(resp.stats.capacity == 512);
  CHECK(resp.stats.occupied == 2);
  CHECK(resp.stats.cache_misses == 3);
  CHECK(resp.stats.cache_hits == 0);
  CHECK(resp.stats.vdb_hits == 2);
  CHECK(resp.stats.tier_missing == 1);

  for (Opcode opcode :
       {Opcode::Lookup, Opcode::Update, Opcode::Refresh, Opcode::Stats}) {
    WireRequest ghost;
    ghost.opcode = opcode;
    ghost.table = "ghost";
    if (opcode == Opcode::Update) {
      ghost.keys = {1};
      ghost.dim = 1;
      ghost.vectors = {1.0f};
    }
    CHECK(client.call(ghost).status == Status::BadRequest);
  }

  server.stop();
}

TEST_CASE("malformed frames get answered without dropping the connection") {
  TempDir tmp;
  seed_data_dir(tmp.path());
  Node node(base_config(tmp));
  WireServer server(node, "127.0.0.1", 0);
  server.start();

  RawConn conn(server.port());
  conn.send_frame({'X', 'X', 'X', 'X'});
  auto reply = conn.recv_frame();
  REQUIRE(reply.has_value());
  REQUIRE_FALSE(reply->empty());
  CHECK((*reply)[0] == static_cast<std::uint8_t>(Status::BadRequest));

  // the same connection still serves valid requests
  WireRequest lookup;
  lookup.opcode = Opcode::Lookup;
  lookup.table = "emb";
  lookup.keys = {1};
  conn.send_raw(hps::encode_request_frame(lookup));
  reply = conn.recv_frame();
  REQUIRE(reply.has_value());
  CHECK((*reply)[0] == static_cast<std::uint8_t>(Status::Ok));

  server.stop();
}

TEST_CASE("oversized frames are refused and the connection is closed") {
  TempDir tmp;
  seed_data_dir(tmp.path());
  Node node(base_config(tmp));
  WireServer server(node, "127.0.0.1", 0);
  server.start();

  RawConn conn(server.port());
  const std::uint32_t huge = hps::kMaxFrameBytes + 1;
  conn.send_raw({static_cast<std::uint8_t>(huge),
                 static_cast<std::uint8_t>(huge >> 8),
                 static_cast<std::uint8_t>(huge >> 16),
                 static_cast<std::uint8_t>(huge >> 24)});
  auto reply = conn.recv_frame();
  REQUIRE(reply.has_value());
  CHECK((*reply)[0] == static_cast<std::uint8_t>(Status::BadRequest));
  CHECK_FALSE(conn.recv_frame().has_value());

  server.stop();
}

TEST_CASE("concurrent clients see consistent rows") {
  TempDir tmp;
  seed_data_dir(tmp.path());

  NodeConfig config = base_config(tmp);
  config.start_ingest_thread = true;
  config.ingest_interval = std::chrono::milliseconds(20);
  // a miss must always fall through to the tiers so every row comes back real
  config.engine.hit_rate_threshold = 1.0;
  Node node(config);
  WireServer server(node, "127.0.0.1", 0);
  server.start();

  constexpr int kThreads = 4;
  constexpr int kCallsPerThread = 30;
  std::atomic<int> failures{0};

  std::vector<std::thread> clients;
  for (int t = 0; t < kThreads; ++t) {
    clients.emplace_back([&, t] {
      WireClient client("127.0.0.1", server.port());
      std::mt19937_64 rng(1000 + t);
      for (int i = 0; i < kCallsPerThread; ++i) {
        WireRequest req;
        req.opcode = Opcode::Lookup;
        req.table = "emb";
        for (int k = 0; k < 8; ++k) {
          req.keys.push_back(rng() % kSeededKeys);
        }
        auto resp = client.call(req);
        if (resp.status != Status::Ok || resp.count != 8 ||
            resp.dim != kDim) {
          ++failures;
          continue;
        }
        for (std::size_t row = 0; row < req.keys.size(); ++row) {
          for (std::uint32_t c = 0; c < kDim; ++c) {
            if (resp.vectors[row * kDim + c] !=
                seeded_value(req.keys[row], c)) {
              ++failures;
            }
          }
          if (hps::get_miss_bit(resp.miss_bitmap, row)) {
            ++failures;
          }
        }
      }
    });
  }
  for (auto& t : clients) {
    t.join();
  }
  CHECK(failures.load() == 0);
  server.stop();
}

TEST_CASE("frame handling survives garbage input") {
  TempDir tmp;
  seed_data_dir(tmp.path());
  Node node(base_config(tmp));

  std::mt19937_64 rng(0xF00D);
  for (int i = 0; i < 500; ++i) {
    std::vector<std::uint8_t> body(rng() % 100);
    for (auto& b : body) {
      b = static_cast<std::uint8_t>(rng());
    }
    auto frame = hps::handle_frame(node, body);
    REQUIRE(frame.size() >= 5);
    CHECK(frame[4] <= 2);  // a known status byte
  }

  // bit-flipped variants of a legitimate request
  WireRequest req;
  req.opcode = Opcode::Update;
  req.table = "emb";
  req.keys = {1, 2};
  req.dim = kDim;
  req.vectors.assign(2 * kDim, 0.25f);
  const auto valid = hps::encode_request_frame(req);
  for (int i = 0; i < 300; ++i) {
    std::vector<std::uint8_t> body(valid.begin() + 4, valid.end());
    const int flips = 1 + static_cast<int>(rng() % 3);
    for (int f = 0; f < flips; ++f) {
      body[rng() % body.size()] ^=
          static_cast<std::uint8_t>(1u << (rng() % 8));
    }
    auto frame = hps::handle_frame(node, body);
    REQUIRE(frame.size() >= 5);
    CHECK(frame[4] <= 2);
  }
}

TEST_CASE("host:port strings parse strictly") {
  using hps::parse_host_port;
  CHECK(parse_host_port("localhost:7070") ==
        std::make_pair(std::string("localhost"), std::uint16_t{7070}));
  CHECK(parse_host_port("0.0.0.0:0") ==
        std::make_pair(std::string("0.0.0.0"), std::uint16_t{0}));
  CHECK(parse_host_port(":123") ==
        std::make_pair(std::string(""), std::uint16_t{123}));
  CHECK(parse_host_port("a:b:123").second == 123);

  CHECK_THROWS_AS(parse_host_port("nocolon"), std::invalid_argument);
  CHECK_THROWS_AS(parse_host_port("host:"), std::invalid_argument);
  CHECK_THROWS_AS(parse_host_port("host:abc"), std::invalid_argument);
  CHECK_THROWS_AS(parse_host_port("host:12x"), std::invalid_argument);
  CHECK_THROWS_AS(parse_host_port("host:99999"), std::invalid_argument);
  CHECK_THROWS_AS(parse_host_port("host:-1"), std::invalid_argument);
}
