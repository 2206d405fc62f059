#pragma once

// Durable full-replica tier. Every table lives in its own directory under
// the store root:
//
//   <root>/<escaped table name>/MANIFEST      text: name=, dim=, version=1
//   <root>/<escaped table name>/seg-<n>.log   append-only record segments
//
// A segment record is [u64 key][u32 dim][dim * f32], all little-endian. The
// newest record for a key wins; the in-memory index is rebuilt by scanning
// the segments in ascending number on open. A torn record at the tail of a
// segment (from a crash mid-append) is ignored and reported once.
//
// Compaction writes one new segment holding only the live records (numbered
// above every existing segment, created via a temp file + rename) and then
// deletes the old segments, so a crash at any point leaves a directory that
// replays to the same key-value state.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <shared_mutex>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "hps/types.hpp"

namespace hps {

// Table names map to directory names with %XX escaping of anything outside
// [A-Za-z0-9._-] so arbitrary names stay filesystem-safe and reversible.
std::string escape_table_dir(const std::string& name);
std::string unescape_table_dir(const std::string& dir);

class PersistentStore {
 public:
  explicit PersistentStore(std::filesystem::path root);
  ~PersistentStore();

  PersistentStore(const PersistentStore&) = delete;
  PersistentStore& operator=(const PersistentStore&) = delete;

  const std::filesystem::path& root() const { return root_; }

  // Creates the table namespace. Recreating an existing table with the same
  // dimension is a no-op; a different dimension is an error.
  void create_table(const TableId& table);
  bool has_table(const std::string& name) const;
  TableId table(const std::string& name) const;
  std::vector<TableId> tables() const;

  // Appends one record per key (last writer wins on rereads). The index is
  // updated only after the write succeeds, so a failed append leaves reads
  // untouched. Durability of buffered bytes is deferred until flush().
  void put(const std::string& name, std::span<const EmbeddingKey> keys,
           std::span<const float> vectors);

  FetchResult get(const std::string& name,
                  std::span<const EmbeddingKey> keys) const;

  void flush(const std::string& name);
  void flush_all();

  // Rewrites the table into a single segment containing only live records.
  void compact(const std::string& name);

  std::size_t key_count(const std::string& name) const;
  std::size_t segment_count(const std::string& name) const;
  std::vector<EmbeddingKey> keys(const std::string& name) const;
  bool torn_tail_detected(const std::string& name) const;

  // Test hook, invoked once with "before-publish" after the replacement
  // segment is fully written and once with "after-publish" after the rename
  // but before the old segments are deleted; throwing from it simulates a
  // crash in that window.
  void set_compaction_hook(std::function<void(std::string_view)> hook);

 private:
  struct RecordLoc {
    std::size_t segment;  // index into Table::segments
    std::uint64_t offset; // byte offset of the record's vector payload
  };

  struct Segment {
    std::uint64_t number = 0;
    std::filesystem::path path;
    int fd = -1;
  };

  struct FileCloser {
    void operator()(std::FILE* f) const {
      if (f) std::fclose(f);
    }
  };

  struct Table {
    TableId id;
    std::filesystem::path dir;
    mutable std::shared_mutex mutex;
    std::vector<Segment> segments;
    std::unordered_map<EmbeddingKey, RecordLoc> index;
    // Records appended since the last flush; served from memory because the
    // stream buffer may not have reached the file yet.
    std::unordered_map<EmbeddingKey, std::vector<float>> unflushed;
    std::unique_ptr<std::FILE, FileCloser> appender;
    std::uint64_t append_offset = 0;   // logical end of the active segment
    std::uint64_t flushed_offset = 0;
    bool torn_tail = false;
  };

  Table& table_ref(const std::string& name);
  const Table& table_ref(const std::string& name) const;
  void open_existing_tables();
  void load_table_dir(const std::filesystem::path& dir);
  void open_appender(Table& t);
  void flush_locked(Table& t);
  // Rebuilds index entries from one segment; returns the byte offset of the
  // last complete record's end (the good prefix length).
  static std::uint64_t scan_segment(Table& t, std::size_t segment_slot);

  std::filesystem::path root_;
  mutable std::mutex tables_mutex_;
  std::unordered_map<std::string, std::unique_ptr<Table>> tables_;
  std::function<void(std::string_view)> compaction_hook_;
  std::mutex hook_mutex_;

  // Flush automatically once this many unflushed bytes accumulate, keeping
  // the in-memory tail bounded during bulk loads.
  static constexpr std::uint64_t kAutoFlushBytes = 4u << 20;
};

}  // namespace hps
