#pragma once

// In-process ordered update log, one topic per table. Producers append
// (key, vector) messages and receive gap-free sequence numbers; subscribers
// pull messages in order and apply them to the storage tiers at their own
// pace. Delivery to the tiers is at-least-once: a subscription only advances
// its cursor after both tier writes succeed, and reapplying a message is
// harmless because tier writes are idempotent upserts.
//
// Messages serialize as [u64 seq][u16 name_len][name][u64 key][u32 dim]
// [dim * f32], little-endian; save()/load() persist whole topics in that
// encoding.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "hps/persistent_store.hpp"
#include "hps/types.hpp"
#include "hps/volatile_store.hpp"

namespace hps {

struct UpdateMessage {
  std::uint64_t seq = 0;  // 1-based, contiguous within a topic
  std::string table;
  EmbeddingKey key = 0;
  std::vector<float> vector;

  bool operator==(const UpdateMessage&) const = default;
};

void encode_update_message(const UpdateMessage& msg,
                           std::vector<std::uint8_t>& out);
// Returns nullopt when the buffer does not start with a complete message;
// consumed reports how many bytes the decoded message occupied.
std::optional<UpdateMessage> decode_update_message(
    std::span<const std::uint8_t> data, std::size_t& consumed);

// Restricts a subscription to keys whose volatile-tier partition falls in
// the given set.
struct PartitionFilter {
  std::uint32_t partition_count = 16;
  std::vector<std::uint32_t> partitions;

  bool matches(EmbeddingKey key) const;
};

// Implementation detail of UpdateLog, exposed so subscriptions can hold a
// stable pointer to their topic.
struct UpdateTopic {
  TableId id;
  mutable std::mutex mutex;
  std::vector<UpdateMessage> log;  // log[i].seq == i + 1
};

class Subscription {
 public:
  // Sequence number of the last message this subscription consumed.
  std::uint64_t cursor() const { return cursor_; }

  std::size_t rate_limit() const { return rate_limit_; }
  void set_rate_limit(std::size_t limit);

  // Messages past the cursor, before filtering.
  std::size_t pending() const;

  // Pulls pending messages in order and applies each to the volatile tier
  // (when it knows the table) and then the persistent tier, stopping after
  // rate_limit() applied messages. Filtered-out messages are skipped without
  // counting. Returns the number applied. A tier failure propagates and the
  // cursor stays before the failed message, so the next tick retries it.
  std::size_t ingest_tick(VolatileStore& vdb, PersistentStore& pdb);

  // Test hook called between the volatile and persistent writes of each
  // applied message.
  void set_between_tier_hook(std::function<void(const UpdateMessage&)> hook);

 private:
  friend class UpdateLog;
  Subscription(UpdateTopic* topic, std::uint64_t after_seq,
               std::optional<PartitionFilter> filter)
      : topic_(topic), cursor_(after_seq), filter_(std::move(filter)) {}

  UpdateTopic* topic_;
  std::uint64_t cursor_;
  std::optional<PartitionFilter> filter_;
  std::size_t rate_limit_ = 1000;
  std::function<void(const UpdateMessage&)> hook_;
  // Ticks of one subscription never overlap.
  std::unique_ptr<std::mutex> tick_mutex_ = std::make_unique<std::mutex>();
};

class UpdateLog {
 public:
  UpdateLog() = default;

  UpdateLog(const UpdateLog&) = delete;
  UpdateLog& operator=(const UpdateLog&) = delete;

  void create_topic(const TableId& table);
  bool has_topic(const std::string& name) const;
  TableId topic(const std::string& name) const;
  std::vector<std::string> topic_names() const;

  // Appends one message per key and assigns consecutive sequence numbers;
  // concurrent producers interleave at batch granularity but sequences stay
  // gap-free. Returns the last assigned sequence number.
  std::uint64_t produce(const std::string& name,
                        std::span<const EmbeddingKey> keys,
                        std::span<const float> vectors);

  std::uint64_t last_seq(const std::string& name) const;

  std::vector<UpdateMessage> read(const std::string& name,
                                  std::uint64_t after_seq,
                                  std::size_t max_count) const;

  // Consumption starts at after_seq + 1. The subscription must not outlive
  // this log.
  Subscription subscribe(const std::string& name, std::uint64_t after_seq = 0,
                         std::optional<PartitionFilter> filter = std::nullopt);

  // Persists every topic to one file in the message wire encoding; load()
  // recreates topics (dimension taken from the first message seen).
  void save(const std::filesystem::path& path) const;
  void load(const std::filesystem::path& path);

 private:
  UpdateTopic& topic_ref(const std::string& name);
  const UpdateTopic& topic_ref(const std::string& name) const;

  mutable std::mutex topics_mutex_;
  std::unordered_map<std::string, std::unique_ptr<UpdateTopic>> topics_;
};

}  // namespace hps
