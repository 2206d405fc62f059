#include "hps/persistent_store.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "hps/detail/bytes.hpp"

namespace hps {

namespace fs = std::filesystem;

namespace {

bool dir_char_is_safe(char c) {
  return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
         (c >= '0' && c <= '9') || c == '.' || c == '_' || c == '-';
}

int hex_value(char c) {
  if (c >= '0' && c <= '9') return c - '0';
  if (c >= 'a' && c <= 'f') return c - 'a' + 10;
  if (c >= 'A' && c <= 'F') return c - 'A' + 10;
  return -1;
}

std::uint64_t file_size_of(const fs::path& p) {
  std::error_code ec;
  const auto size = fs::file_size(p, ec);
  if (ec) {
    throw TierFault("cannot stat " + p.string() + ": " + ec.message());
  }
  return static_cast<std::uint64_t>(size);
}

bool parse_segment_number(const std::string& filename, std::uint64_t& number) {
  // seg-<n>.log
  if (filename.size() < 9 || filename.rfind("seg-", 0) != 0 ||
      filename.substr(filename.size() - 4) != ".log") {
    return false;
  }
  const std::string digits = filename.substr(4, filename.size() - 8);
  if (digits.empty() ||
      !std::all_of(digits.begin(), digits.end(),
                   [](unsigned char c) { return std::isdigit(c); })) {
    return false;
  }
  number = std::stoull(digits);
  return true;
}

constexpr std::size_t kRecordHeaderBytes = 12;  // u64 key + u32 dim

}  // namespace

std::string escape_table_dir(const std::string& name) {
  // "." and ".." would collide with directory navigation entries.
  if (name == "." || name == "..") {
    std::string out;
    for (char c : name) {
      (void)c;
      out += "%2E";
    }
    return out;
  }
  std::string out;
  for (char c : name) {
    if (dir_char_is_safe(c)) {
      out.push_back(c);
    } else {
      static const char* hex = "0123456789ABCDEF";
      out.push_back('%');
      out.push_back(hex[(static_cast<unsigned char>(c) >> 4) & 0xF]);
      out.push_back(hex[static_cast<unsigned char>(c) & 0xF]);
    }
  }
  return out;
}

std::string unescape_table_dir(const std::string& dir) {
  std::string out;
  for (std::size_t i = 0; i < dir.size(); ++i) {
    if (dir[i] == '%' && i + 2 < dir.size()) {
      const int hi = hex_value(dir[i + 1]);
      const int lo = hex_value(dir[i + 2]);
      if (hi >= 0 && lo >= 0) {
        out.push_back(static_cast<char>((hi << 4) | lo));
        i += 2;
        continue;
      }
    }
    out.push_back(dir[i]);
  }
  return out;
}

PersistentStore::PersistentStore(fs::path root) : root_(std::move(root)) {
  std::error_code ec;
  fs::create_directories(root_, ec);
  if (ec) {
    throw TierFault("cannot create store root " + root_.string() + ": " +
                    ec.message());
  }
  open_existing_tables();
}

PersistentStore::~PersistentStore() {
  for (auto& [name, t] : tables_) {
    std::unique_lock lk(t->mutex);
    try {
      flush_locked(*t);
    } catch (...) {
      // Destructor flush is best effort; the appender is closed below and
      // fclose flushes what it can.
    }
    t->appender.reset();
    for (Segment& s : t->segments) {
      if (s.fd >= 0) {
        ::close(s.fd);
      }
    }
  }
}

void PersistentStore::open_existing_tables() {
  for (const auto& entry : fs::directory_iterator(root_)) {
    if (!entry.is_directory()) {
      continue;
    }
    if (fs::exists(entry.path() / "MANIFEST")) {
      load_table_dir(entry.path());
    }
  }
}

void PersistentStore::load_table_dir(const fs::path& dir) {
  std::ifstream manifest(dir / "MANIFEST");
  if (!manifest) {
    throw TierFault("cannot read MANIFEST in " + dir.string());
  }
  std::string name;
  std::uint32_t dim = 0;
  std::uint32_t version = 0;
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.rfind("name=", 0) == 0) {
      name = line.substr(5);
    } else if (line.rfind("dim=", 0) == 0) {
      dim = static_cast<std::uint32_t>(std::stoul(line.substr(4)));
    } else if (line.rfind("version=", 0) == 0) {
      version = static_cast<std::uint32_t>(std::stoul(line.substr(8)));
    }
  }
  if (name.empty() || dim == 0 || version != 1) {
    throw TierFault("malformed MANIFEST in " + dir.string());
  }

  auto t = std::make_unique<Table>();
  t->id = TableId{name, dim};
  t->dir = dir;

  std::vector<std::pair<std::uint64_t, fs::path>> found;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) {
      continue;
    }
    const std::string filename = entry.path().filename().string();
    std::uint64_t number = 0;
    if (parse_segment_number(filename, number)) {
      found.emplace_back(number, entry.path());
    } else if (filename.size() > 4 &&
               filename.substr(filename.size() - 4) == ".tmp") {
      // Leftover from a compaction that never published; safe to discard.
      std::error_code ec;
      fs::remove(entry.path(), ec);
    }
  }
  std::sort(found.begin(), found.end());

  for (const auto& [number, path] : found) {
    const int fd = ::open(path.c_str(), O_RDONLY);
    if (fd < 0) {
      throw TierFault("cannot open segment " + path.string());
    }
    t->segments.push_back(Segment{number, path, fd});
  }

  std::uint64_t active_good = 0;
  for (std::size_t slot = 0; slot < t->segments.size(); ++slot) {
    const std::uint64_t good = scan_segment(*t, slot);
    if (slot + 1 == t->segments.size()) {
      active_good = good;
      const std::uint64_t size = file_size_of(t->segments[slot].path);
      if (good < size) {
        // Drop the torn bytes so future appends land right after the last
        // complete record.
        if (::truncate(t->segments[slot].path.c_str(),
                       static_cast<off_t>(good)) != 0) {
          throw TierFault("cannot truncate torn segment " +
                          t->segments[slot].path.string());
        }
      }
    }
  }

  open_appender(*t);
  t->append_offset = active_good;
  t->flushed_offset = active_good;

  std::lock_guard lk(tables_mutex_);
  tables_.emplace(name, std::move(t));
}

std::uint64_t PersistentStore::scan_segment(Table& t,
                                            std::size_t segment_slot) {
  const Segment& seg = t.segments[segment_slot];
  std::FILE* f = std::fopen(seg.path.c_str(), "rb");
  if (!f) {
    throw TierFault("cannot open segment " + seg.path.string());
  }
  const std::uint64_t size = file_size_of(seg.path);
  const std::uint32_t dim = t.id.dimension;
  const std::uint64_t payload = 4ull * dim;
  std::vector<std::uint8_t> scratch(payload);
  std::uint8_t header[kRecordHeaderBytes];
  std::uint64_t pos = 0;
  bool corrupt = false;
  while (size - pos >= kRecordHeaderBytes) {
    if (std::fread(header, 1, kRecordHeaderBytes, f) != kRecordHeaderBytes) {
      corrupt = true;
      break;
    }
    const std::uint64_t key = detail::load_le64(header);
    const std::uint32_t record_dim = detail::load_le32(header + 8);
    if (record_dim != dim || size - pos - kRecordHeaderBytes < payload) {
      corrupt = true;
      break;
    }
    if (std::fread(scratch.data(), 1, payload, f) != payload) {
      corrupt = true;
      break;
    }
    t.index[key] = RecordLoc{segment_slot, pos + kRecordHeaderBytes};
    pos += kRecordHeaderBytes + payload;
  }
  std::fclose(f);
  if (corrupt || pos < size) {
    if (!t.torn_tail) {
      std::fprintf(stderr,
                   "hps: table %s: ignoring incomplete record at end of %s\n",
                   t.id.name.c_str(), seg.path.filename().c_str());
    }
    t.torn_tail = true;
  }
  return pos;
}

void PersistentStore::open_appender(Table& t) {
  if (t.segments.empty()) {
    const fs::path path = t.dir / "seg-0.log";
    std::FILE* create = std::fopen(path.c_str(), "ab");
    if (!create) {
      throw TierFault("cannot create segment " + path.string());
    }
    std::fclose(create);
    const int fd = ::open(path.c_str(), O_RDONLY);
    if (fd < 0) {
      throw TierFault("cannot open segment " + path.string());
    }
    t.segments.push_back(Segment{0, path, fd});
  }
  const fs::path& active = t.segments.back().path;
  std::FILE* f = std::fopen(active.c_str(), "ab");
  if (!f) {
    throw TierFault("cannot open segment for append " + active.string());
  }
  t.appender.reset(f);
}

void PersistentStore::create_table(const TableId& table) {
  validate_table_id(table);
  std::lock_guard lk(tables_mutex_);
  auto it = tables_.find(table.name);
  if (it != tables_.end()) {
    if (it->second->id.dimension != table.dimension) {
      throw std::invalid_argument("table exists with dimension " +
                                  std::to_string(it->second->id.dimension));
    }
    return;
  }
  const fs::path dir = root_ / escape_table_dir(table.name);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) {
    throw TierFault("cannot create table dir " + dir.string());
  }
  const fs::path manifest_tmp = dir / "MANIFEST.tmp";
  {
    std::ofstream out(manifest_tmp, std::ios::trunc);
    out << "name=" << table.name << "\n";
    out << "dim=" << table.dimension << "\n";
    out << "version=1\n";
    if (!out) {
      throw TierFault("cannot write MANIFEST for " + table.name);
    }
  }
  fs::rename(manifest_tmp, dir / "MANIFEST", ec);
  if (ec) {
    throw TierFault("cannot publish MANIFEST for " + table.name);
  }

  auto t = std::make_unique<Table>();
  t->id = table;
  t->dir = dir;
  open_appender(*t);
  tables_.emplace(table.name, std::move(t));
}

bool PersistentStore::has_table(const std::string& name) const {
  std::lock_guard lk(tables_mutex_);
  return tables_.count(name) != 0;
}

TableId PersistentStore::table(const std::string& name) const {
  return table_ref(name).id;
}

std::vector<TableId> PersistentStore::tables() const {
  std::lock_guard lk(tables_mutex_);
  std::vector<TableId> out;
  out.reserve(tables_.size());
  for (const auto& [name, t] : tables_) {
    out.push_back(t->id);
  }
  std::sort(out.begin(), out.end(),
            [](const TableId& a, const TableId& b) { return a.name < b.name; });
  return out;
}

PersistentStore::Table& PersistentStore::table_ref(const std::string& name) {
  std::lock_guard lk(tables_mutex_);
  auto it = tables_.find(name);
  if (it == tables_.end()) {
    throw std::invalid_argument("persistent store has no table named " + name);
  }
  return *it->second;
}

const PersistentStore::Table& PersistentStore::table_ref(
    const std::string& name) const {
  std::lock_guard lk(tables_mutex_);
  auto it = tables_.find(name);
  if (it == tables_.end()) {
    throw std::invalid_argument("persistent store has no table named " + name);
  }
  return *it->second;
}

void PersistentStore::put(const std::string& name,
                          std::span<const EmbeddingKey> keys,
                          std::span<const float> vectors) {
  Table& t = table_ref(name);
  std::unique_lock lk(t.mutex);
  const std::uint32_t dim = t.id.dimension;
  if (vectors.size() != keys.size() * dim) {
    throw std::invalid_argument("put vector buffer has wrong size");
  }
  require_finite(vectors, "persistent put");

  const std::size_t record_bytes = kRecordHeaderBytes + 4ull * dim;
  std::vector<std::uint8_t> record(record_bytes);
  for (std::size_t i = 0; i < keys.size(); ++i) {
    detail::store_le64(record.data(), keys[i]);
    detail::store_le32(record.data() + 8, dim);
    for (std::uint32_t c = 0; c < dim; ++c) {
      detail::store_le32(record.data() + kRecordHeaderBytes + 4ull * c,
                         std::bit_cast<std::uint32_t>(vectors[i * dim + c]));
    }
    if (std::fwrite(record.data(), 1, record_bytes, t.appender.get()) !=
        record_bytes) {
      throw TierFault("segment append failed for table " + name);
    }
  }
  // All bytes written: publish the batch to the index and the unflushed tail.
  const std::size_t active_slot = t.segments.size() - 1;
  for (std::size_t i = 0; i < keys.size(); ++i) {
    t.index[keys[i]] = RecordLoc{
        active_slot, t.append_offset + i * record_bytes + kRecordHeaderBytes};
    t.unflushed[keys[i]] =
        std::vector<float>(vectors.begin() + i * dim,
                           vectors.begin() + (i + 1) * dim);
  }
  t.append_offset += keys.size() * record_bytes;
  if (t.append_offset - t.flushed_offset >= kAutoFlushBytes) {
    flush_locked(t);
  }
}

FetchResult PersistentStore::get(const std::string& name,
                                 std::span<const EmbeddingKey> keys) const {
  const Table& t = table_ref(name);
  std::shared_lock lk(t.mutex);
  const std::uint32_t dim = t.id.dimension;
  const std::uint64_t payload = 4ull * dim;
  std::vector<std::uint8_t> buf(payload);

  FetchResult result;
  for (const EmbeddingKey key : keys) {
    auto un = t.unflushed.find(key);
    if (un != t.unflushed.end()) {
      result.found_keys.push_back(key);
      result.found_vectors.insert(result.found_vectors.end(),
                                  un->second.begin(), un->second.end());
      continue;
    }
    auto it = t.index.find(key);
    if (it == t.index.end()) {
      result.missing_keys.push_back(key);
      continue;
    }
    const Segment& seg = t.segments[it->second.segment];
    const ssize_t got = ::pread(seg.fd, buf.data(), payload,
                                static_cast<off_t>(it->second.offset));
    if (got != static_cast<ssize_t>(payload)) {
      throw TierFault("segment read failed for table " + name);
    }
    result.found_keys.push_back(key);
    for (std::uint32_t c = 0; c < dim; ++c) {
      result.found_vectors.push_back(detail::load_f32(buf.data() + 4ull * c));
    }
  }
  return result;
}

void PersistentStore::flush_locked(Table& t) {
  if (t.appender && std::fflush(t.appender.get()) != 0) {
    throw TierFault("segment flush failed for table " + t.id.name);
  }
  t.flushed_offset = t.append_offset;
  t.unflushed.clear();
}

void PersistentStore::flush(const std::string& name) {
  Table& t = table_ref(name);
  std::unique_lock lk(t.mutex);
  flush_locked(t);
}

void PersistentStore::flush_all() {
  std::vector<std::string> names;
  {
    std::lock_guard lk(tables_mutex_);
    for (const auto& [name, t] : tables_) {
      names.push_back(name);
    }
  }
  for (const std::string& name : names) {
    flush(name);
  }
}

void PersistentStore::set_compaction_hook(
    std::function<void(std::string_view)> hook) {
  std::lock_guard lk(hook_mutex_);
  compaction_hook_ = std::move(hook);
}

void PersistentStore::compact(const std::string& name) {
  Table& t = table_ref(name);
  std::unique_lock lk(t.mutex);
  flush_locked(t);

  std::function<void(std::string_view)> hook;
  {
    std::lock_guard hk(hook_mutex_);
    hook = compaction_hook_;
  }

  const std::uint32_t dim = t.id.dimension;
  const std::uint64_t payload = 4ull * dim;
  const std::size_t record_bytes = kRecordHeaderBytes + payload;
  const std::uint64_t new_number = t.segments.back().number + 1;
  const fs::path final_path =
      t.dir / ("seg-" + std::to_string(new_number) + ".log");
  const fs::path tmp_path =
      t.dir / ("seg-" + std::to_string(new_number) + ".log.tmp");

  std::unordered_map<EmbeddingKey, RecordLoc> new_index;
  new_index.reserve(t.index.size());
  {
    std::FILE* out = std::fopen(tmp_path.c_str(), "wb");
    if (!out) {
      throw TierFault("cannot create compaction segment for " + name);
    }
    std::vector<std::uint8_t> record(record_bytes);
    std::uint64_t offset = 0;
    bool failed = false;
    for (const auto& [key, loc] : t.index) {
      const Segment& seg = t.segments[loc.segment];
      if (::pread(seg.fd, record.data() + kRecordHeaderBytes, payload,
                  static_cast<off_t>(loc.offset)) !=
          static_cast<ssize_t>(payload)) {
        failed = true;
        break;
      }
      detail::store_le64(record.data(), key);
      detail::store_le32(record.data() + 8, dim);
      if (std::fwrite(record.data(), 1, record_bytes, out) != record_bytes) {
        failed = true;
        break;
      }
      new_index[key] = RecordLoc{0, offset + kRecordHeaderBytes};
      offset += record_bytes;
    }
    if (!failed && std::fflush(out) != 0) {
      failed = true;
    }
    if (!failed && ::fsync(::fileno(out)) != 0) {
      failed = true;
    }
    std::fclose(out);
    if (failed) {
      std::error_code ec;
      fs::remove(tmp_path, ec);
      throw TierFault("compaction write failed for table " + name);
    }
  }

  if (hook) {
    hook("before-publish");
  }

  std::error_code ec;
  fs::rename(tmp_path, final_path, ec);
  if (ec) {
    fs::remove(tmp_path, ec);
    throw TierFault("compaction publish failed for table " + name);
  }

  if (hook) {
    hook("after-publish");
  }

  const int new_fd = ::open(final_path.c_str(), O_RDONLY);
  if (new_fd < 0) {
    throw TierFault("cannot reopen compacted segment for " + name);
  }

  // Point the table at the new segment before removing the old files.
  std::vector<Segment> old_segments = std::move(t.segments);
  t.segments.clear();
  t.segments.push_back(Segment{new_number, final_path, new_fd});
  t.index = std::move(new_index);
  t.unflushed.clear();
  t.appender.reset();
  std::FILE* f = std::fopen(final_path.c_str(), "ab");
  if (!f) {
    throw TierFault("cannot open compacted segment for append");
  }
  t.appender.reset(f);
  t.append_offset = file_size_of(final_path);
  t.flushed_offset = t.append_offset;

  for (Segment& seg : old_segments) {
    if (seg.fd >= 0) {
      ::close(seg.fd);
    }
    fs::remove(seg.path, ec);
  }
}

std::size_t PersistentStore::key_count(const std::string& name) const {
  const Table& t = table_ref(name);
  std::shared_lock lk(t.mutex);
  return t.index.size();
}

std::size_t PersistentStore::segment_count(const std::string& name) const {
  const Table& t = table_ref(name);
  std::shared_lock lk(t.mutex);
  return t.segments.size();
}

std::vector<EmbeddingKey> PersistentStore::keys(const std::string& name) const {
  const Table& t = table_ref(name);
  std::shared_lock lk(t.mutex);
  std::vector<EmbeddingKey> out;
  out.reserve(t.index.size());
  for (const auto& [key, loc] : t.index) {
    out.push_back(key);
  }
  return out;
}

bool PersistentStore::torn_tail_detected(const std::string& name) const {
  const Table& t = table_ref(name);
  std::shared_lock lk(t.mutex);
  return t.torn_tail;
}

}  // namespace hps
