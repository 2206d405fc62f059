#include "hps/update_stream.hpp"

#include <algorithm>
#include <fstream>

#include "hps/detail/bytes.hpp"
#include "hps/xxhash64.hpp"

namespace hps {

void encode_update_message(const UpdateMessage& msg,
                           std::vector<std::uint8_t>& out) {
  detail::put_le64(out, msg.seq);
  detail::put_le16(out, static_cast<std::uint16_t>(msg.table.size()));
  out.insert(out.end(), msg.table.begin(), msg.table.end());
  detail::put_le64(out, msg.key);
  detail::put_le32(out, static_cast<std::uint32_t>(msg.vector.size()));
  for (float v : msg.vector) {
    detail::put_f32(out, v);
  }
}

std::optional<UpdateMessage> decode_update_message(
    std::span<const std::uint8_t> data, std::size_t& consumed) {
  detail::ByteReader reader(data);
  UpdateMessage msg;
  std::uint16_t name_len = 0;
  if (!reader.read_u64(msg.seq) || !reader.read_u16(name_len)) {
    return std::nullopt;
  }
  std::span<const std::uint8_t> name_bytes;
  if (!reader.read_bytes(name_len, name_bytes)) {
    return std::nullopt;
  }
  msg.table.assign(name_bytes.begin(), name_bytes.end());
  std::uint32_t dim = 0;
  if (!reader.read_u64(msg.key) || !reader.read_u32(dim)) {
    return std::nullopt;
  }
  msg.vector.resize(dim);
  for (std::uint32_t i = 0; i < dim; ++i) {
    if (!reader.read_f32(msg.vector[i])) {
      return std::nullopt;
    }
  }
  consumed = data.size() - reader.remaining();
  return msg;
}

bool PartitionFilter::matches(EmbeddingKey key) const {
  const std::uint32_t p = partition_of(key, partition_count);
  return std::find(partitions.begin(), partitions.end(), p) !=
         partitions.end();
}

void UpdateLog::create_topic(const TableId& table) {
  validate_table_id(table);
  std::lock_guard lk(topics_mutex_);
  auto it = topics_.find(table.name);
  if (it != topics_.end()) {
    if (it->second->id.dimension != table.dimension) {
      throw std::invalid_argument("topic exists with dimension " +
                                  std::to_string(it->second->id.dimension));
    }
    return;
  }
  auto t = std::make_unique<UpdateTopic>();
  t->id = table;
  topics_.emplace(table.name, std::move(t));
}

bool UpdateLog::has_topic(const std::string& name) const {
  std::lock_guard lk(topics_mutex_);
  return topics_.count(name) != 0;
}

TableId UpdateLog::topic(const std::string& name) const {
  return topic_ref(name).id;
}

std::vector<std::string> UpdateLog::topic_names() const {
  std::lock_guard lk(topics_mutex_);
  std::vector<std::string> names;
  names.reserve(topics_.size());
  for (const auto& [name, t] : topics_) {
    names.push_back(name);
  }
  std::sort(names.begin(), names.end());
  return names;
}

UpdateTopic& UpdateLog::topic_ref(const std::string& name) {
  std::lock_guard lk(topics_mutex_);
  auto it = topics_.find(name);
  if (it == topics_.end()) {
    throw std::invalid_argument("update log has no topic named " + name);
  }
  return *it->second;
}

const UpdateTopic& UpdateLog::topic_ref(const std::string& name) const {
  std::lock_guard lk(topics_mutex_);
  auto it = topics_.find(name);
  if (it == topics_.end()) {
    throw std::invalid_argument("update log has no topic named " + name);
  }
  return *it->second;
}

std::uint64_t UpdateLog::produce(const std::string& name,
                                 std::span<const EmbeddingKey> keys,
                                 std::span<const float> vectors) {
  UpdateTopic& t = topic_ref(name);
  const std::uint32_t dim = t.id.dimension;
  if (vectors.size() != keys.size() * dim) {
    throw std::invalid_argument("produce vector buffer has wrong size");
  }
  require_finite(vectors, "update produce");
  std::lock_guard lk(t.mutex);
  std::uint64_t seq = t.log.empty() ? 0 : t.log.back().seq;
  for (std::size_t i = 0; i < keys.size(); ++i) {
    UpdateMessage msg;
    msg.seq = ++seq;
    msg.table = name;
    msg.key = keys[i];
    msg.vector.assign(vectors.begin() + i * dim,
                      vectors.begin() + (i + 1) * dim);
    t.log.push_back(std::move(msg));
  }
  return seq;
}

std::uint64_t UpdateLog::last_seq(const std::string& name) const {
  const UpdateTopic& t = topic_ref(name);
  std::lock_guard lk(t.mutex);
  return t.log.empty() ? 0 : t.log.back().seq;
}

std::vector<UpdateMessage> UpdateLog::read(const std::string& name,
                                           std::uint64_t after_seq,
                                           std::size_t max_count) const {
  const UpdateTopic& t = topic_ref(name);
  std::lock_guard lk(t.mutex);
  std::vector<UpdateMessage> out;
  for (std::size_t i = after_seq; i < t.log.size() && out.size() < max_count;
       ++i) {
    out.push_back(t.log[i]);
  }
  return out;
}

Subscription UpdateLog::subscribe(const std::string& name,
                                  std::uint64_t after_seq,
                                  std::optional<PartitionFilter> filter) {
  UpdateTopic& t = topic_ref(name);
  if (filter && filter->partition_count == 0) {
    throw std::invalid_argument("partition filter needs a partition count");
  }
  return Subscription(&t, after_seq, std::move(filter));
}

void Subscription::set_rate_limit(std::size_t limit) {
  if (limit == 0) {
    throw std::invalid_argument("rate limit must be positive");
  }
  rate_limit_ = limit;
}

std::size_t Subscription::pending() const {
  std::lock_guard lk(topic_->mutex);
  const std::uint64_t last = topic_->log.empty() ? 0 : topic_->log.back().seq;
  return last > cursor_ ? static_cast<std::size_t>(last - cursor_) : 0;
}

void Subscription::set_between_tier_hook(
    std::function<void(const UpdateMessage&)> hook) {
  hook_ = std::move(hook);
}

std::size_t Subscription::ingest_tick(VolatileStore& vdb,
                                      PersistentStore& pdb) {
  std::lock_guard tick(*tick_mutex_);
  std::size_t applied = 0;
  while (applied < rate_limit_) {
    UpdateMessage msg;
    {
      std::lock_guard lk(topic_->mutex);
      if (cursor_ >= topic_->log.size()) {
        break;
      }
      msg = topic_->log[static_cast<std::size_t>(cursor_)];
    }
    if (filter_ && !filter_->matches(msg.key)) {
      cursor_ = msg.seq;
      continue;
    }
    const std::span<const EmbeddingKey> key_span(&msg.key, 1);
    const std::span<const float> vec_span(msg.vector.data(),
                                          msg.vector.size());
    if (vdb.has_table(msg.table)) {
      vdb.insert(msg.table, key_span, vec_span);
    }
    if (hook_) {
      hook_(msg);
    }
    pdb.put(msg.table, key_span, vec_span);
    cursor_ = msg.seq;
    ++applied;
  }
  return applied;
}

void UpdateLog::save(const std::filesystem::path& path) const {
  std::vector<std::string> names = topic_names();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw TierFault("cannot open update log file " + path.string());
  }
  std::vector<std::uint8_t> buf;
  for (const std::string& name : names) {
    const UpdateTopic& t = topic_ref(name);
    std::lock_guard lk(t.mutex);
    for (const UpdateMessage& msg : t.log) {
      buf.clear();
      encode_update_message(msg, buf);
      out.write(reinterpret_cast<const char*>(buf.data()),
                static_cast<std::streamsize>(buf.size()));
    }
  }
  if (!out) {
    throw TierFault("failed writing update log file " + path.string());
  }
}

void UpdateLog::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw TierFault("cannot open update log file " + path.string());
  }
  std::vector<std::uint8_t> data((std::istreambuf_iterator<char>(in)),
                                 std::istreambuf_iterator<char>());
  std::size_t pos = 0;
  while (pos < data.size()) {
    std::size_t consumed = 0;
    auto msg = decode_update_message(
        std::span<const std::uint8_t>(data).subspan(pos), consumed);
    if (!msg) {
      throw TierFault("corrupt update log file " + path.string());
    }
    pos += consumed;
    if (!has_topic(msg->table)) {
      create_topic(TableId{msg->table,
                           static_cast<std::uint32_t>(msg->vector.size())});
    }
    UpdateTopic& t = topic_ref(msg->table);
    std::lock_guard lk(t.mutex);
    const std::uint64_t expect = (t.log.empty() ? 0 : t.log.back().seq) + 1;
    if (msg->seq != expect || msg->vector.size() != t.id.dimension) {
      throw TierFault("update log sequence mismatch in " + path.string());
    }
    t.log.push_back(std::move(*msg));
  }
}

}  // namespace hps
