#include "tree/cache.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <ctime>
#include <sstream>

#include <json.hpp>

#include "tree/digest.hpp"

namespace tree {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

void append_field(std::string& out, std::string_view bytes) {
  auto length = static_cast<std::uint64_t>(bytes.size());
  for (int i = 0; i < 8; ++i) {
    out.push_back(static_cast<char>(length & 0xff));
    length >>= 8;
  }
  out.append(bytes);
}

std::string shortest_decimal(double value) {
  std::array<char, 64> buf{};
  const auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), value);
  return std::string(buf.data(), end);
}

}  // namespace

std::string canonical_encoding(const CallDescription& call) {
  std::string out;
  append_field(out, call.backend_id);
  append_field(out, call.model_name);
  append_field(out, to_string(call.role));
  append_field(out, call.prompt);
  append_field(out, call.image_digest);
  append_field(out, shortest_decimal(call.params.temperature));
  append_field(out, std::to_string(call.params.max_new_tokens));
  append_field(out, std::to_string(call.params.stop_sequences.size()));
  for (const auto& stop : call.params.stop_sequences) append_field(out, stop);
  return out;
}

CacheKey key_of(const CallDescription& call) { return {sha256_hex(canonical_encoding(call))}; }

std::string utc_timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm utc{};
  gmtime_r(&now, &utc);
  std::array<char, 32> buf{};
  std::strftime(buf.data(), buf.size(), "%Y-%m-%dT%H:%M:%SZ", &utc);
  return buf.data();
}

namespace {

std::string encode_entry(const CacheEntry& entry) {
  ordered_json j;
  j["key"] = entry.key.hex;
  j["backend_id"] = entry.backend_id;
  j["created_at"] = entry.created_at;
  j["completion"] = entry.completion;
  return j.dump() + "\n";
}

}  // namespace

CallCache::CallCache(std::filesystem::path dir) : dir_(std::move(dir)) {
  std::error_code ec;
  std::filesystem::create_directories(dir_, ec);
  if (!std::filesystem::is_directory(dir_)) {
    throw Error(ErrorKind::output_error, "cannot create cache directory " + dir_.string());
  }
  load();
  open_writer();
}

void CallCache::load() {
  const auto path = log_path();
  std::ifstream in(path, std::ios::binary);
  if (!in) return;
  std::stringstream buffer;
  buffer << in.rdbuf();
  const std::string content = buffer.str();
  in.close();

  std::size_t pos = 0;
  std::size_t line_no = 0;
  while (pos < content.size()) {
    const auto newline = content.find('\n', pos);
    if (newline == std::string::npos) {
      // A record without its newline is a torn write from an interrupted run.
      std::filesystem::resize_file(path, pos);
      break;
    }
    ++line_no;
    const std::string_view line(content.data() + pos, newline - pos);
    pos = newline + 1;
    if (line.empty()) continue;
    try {
      const auto j = json::parse(line);
      CacheEntry entry{{j.at("key").get<std::string>()}, j.at("completion").get<std::string>(),
                       j.at("created_at").get<std::string>(), j.at("backend_id").get<std::string>()};
      if (!is_hex_digest(entry.key.hex)) throw std::runtime_error("key is not a 64-hex digest");
      index_[entry.key.hex] = std::move(entry);
    } catch (const std::exception& e) {
      throw Error(ErrorKind::cache_corrupt,
                  path.string() + " record " + std::to_string(line_no) + ": " + e.what());
    }
  }
}

void CallCache::open_writer() {
  writer_.close();
  writer_.clear();
  writer_.open(log_path(), std::ios::binary | std::ios::app);
  if (!writer_) throw Error(ErrorKind::output_error, "cannot open cache log " + log_path().string());
}

std::optional<CacheEntry> CallCache::get(const CacheKey& key) const {
  std::shared_lock lock(mutex_);
  const auto it = index_.find(key.hex);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

void CallCache::put(const CacheKey& key, const CacheEntry& entry) {
  if (entry.key != key) {
    throw Error(ErrorKind::invalid_argument, "cache entry key does not match put key " + key.hex);
  }
  if (!is_hex_digest(key.hex)) throw Error(ErrorKind::invalid_argument, "cache key is not a 64-hex digest");
  std::unique_lock lock(mutex_);
  if (const auto it = index_.find(key.hex);
      it != index_.end() && it->second.completion == entry.completion) {
    return;
  }
  writer_ << encode_entry(entry);
  writer_.flush();
  if (!writer_) throw Error(ErrorKind::output_error, "failed appending to cache log " + log_path().string());
  index_[key.hex] = entry;
}

std::size_t CallCache::size() const {
  std::shared_lock lock(mutex_);
  return index_.size();
}

void CallCache::compact() {
  std::unique_lock lock(mutex_);
  std::vector<const CacheEntry*> entries;
  entries.reserve(index_.size());
  for (const auto& [key, entry] : index_) entries.push_back(&entry);
  std::sort(entries.begin(), entries.end(),
            [](const CacheEntry* a, const CacheEntry* b) { return a->key < b->key; });
  const auto tmp = dir_ / (std::string(kLogName) + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    for (const auto* entry : entries) out << encode_entry(*entry);
    if (!out) throw Error(ErrorKind::output_error, "failed writing " + tmp.string());
  }
  writer_.close();
  std::filesystem::rename(tmp, log_path());
  open_writer();
}

void append_run_stats(const std::filesystem::path& cache_dir, const RunStats& stats) {
  std::ofstream out(cache_dir / CallCache::kRunLogName, std::ios::binary | std::ios::app);
  if (!out) throw Error(ErrorKind::output_error, "cannot append run stats in " + cache_dir.string());
  ordered_json j;
  j["run_label"] = stats.run_label;
  j["config_digest"] = stats.config_digest;
  j["finished_at"] = stats.finished_at;
  j["hits"] = stats.hits;
  j["misses"] = stats.misses;
  out << j.dump() << "\n";
}

std::vector<RunStats> read_run_stats(const std::filesystem::path& cache_dir) {
  std::vector<RunStats> runs;
  std::ifstream in(cache_dir / CallCache::kRunLogName, std::ios::binary);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = json::parse(line);
      runs.push_back({j.at("run_label").get<std::string>(), j.at("config_digest").get<std::string>(),
                      j.at("finished_at").get<std::string>(), j.at("hits").get<std::uint64_t>(),
                      j.at("misses").get<std::uint64_t>()});
    } catch (const json::exception& e) {
      throw Error(ErrorKind::cache_corrupt, std::string(CallCache::kRunLogName) + " record " +
                                                std::to_string(line_no) + ": " + e.what());
    }
  }
  return runs;
}

CachedBackend::CachedBackend(BackendPtr inner, std::shared_ptr<CallCache> cache)
    : inner_(std::move(inner)), cache_(std::move(cache)) {}

std::string CachedBackend::image_digest(const ImageRef& image) {
  if (image.content_digest) return *image.content_digest;
  std::lock_guard lock(digest_mutex_);
  if (const auto it = digests_.find(image.locator); it != digests_.end()) return it->second;
  // Unreadable or remote images are identified by their locator.
  auto digest = sha256_file(image.locator).value_or(sha256_hex("locator:" + image.locator));
  digests_.emplace(image.locator, digest);
  return digest;
}

CallDescription CachedBackend::describe(const CallRequest& request) {
  const auto& d = inner_->descriptor();
  return {d.backend_id, d.model_name.value_or(""), request.role, request.prompt,
          request.image ? image_digest(*request.image) : std::string(), request.params};
}

Completion CachedBackend::complete(const CallRequest& request) {
  const auto key = key_of(describe(request));
  if (auto entry = cache_->get(key)) {
    cache_->record_hit();
    return {std::move(entry->completion), true, 0};
  }
  cache_->record_miss();
  auto completion = inner_->complete(request);
  cache_->put(key, {key, completion.text, utc_timestamp(), inner_->descriptor().backend_id});
  return completion;
}

}  // namespace tree
