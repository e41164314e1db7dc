#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <unordered_map>
#include <vector>

#include "tree/backends.hpp"

namespace tree {

/// Everything that determines a model call's completion.
struct CallDescription {
  std::string backend_id;
  std::string model_name;
  Role role = Role::reasoner;
  std::string prompt;
  std::string image_digest;  // empty for text-only calls
  DecodingParams params;
};

struct CacheKey {
  std::string hex;  // 64 lowercase hex chars

  auto operator<=>(const CacheKey&) const = default;
};

/// Length-prefixed concatenation (u64 little-endian length, then bytes) of
/// backend id, model name, role, prompt, image digest, temperature (shortest
/// round-trip decimal), max_new_tokens, stop-sequence count and each stop
/// sequence, in that order.
std::string canonical_encoding(const CallDescription& call);

CacheKey key_of(const CallDescription& call);

struct CacheEntry {
  CacheKey key;
  std::string completion;  // byte-exact
  std::string created_at;  // ISO-8601 UTC
  std::string backend_id;

  bool operator==(const CacheEntry&) const = default;
};

std::string utc_timestamp();

/// Append-only record log with an in-memory index rebuilt on open.
class CallCache {
 public:
  static constexpr const char* kLogName = "calls.log";
  static constexpr const char* kRunLogName = "runs.jsonl";

  explicit CallCache(std::filesystem::path dir);

  std::optional<CacheEntry> get(const CacheKey& key) const;
  void put(const CacheKey& key, const CacheEntry& entry);

  std::size_t size() const;
  const std::filesystem::path& dir() const { return dir_; }
  std::filesystem::path log_path() const { return dir_ / kLogName; }

  /// Rewrites the log with one record per key, ordered by key.
  void compact();

  std::uint64_t hits() const { return hits_.load(); }
  std::uint64_t misses() const { return misses_.load(); }
  void record_hit() { ++hits_; }
  void record_miss() { ++misses_; }

 private:
  void load();
  void open_writer();

  std::filesystem::path dir_;
  mutable std::shared_mutex mutex_;
  std::unordered_map<std::string, CacheEntry> index_;
  std::ofstream writer_;
  std::atomic<std::uint64_t> hits_{0};
  std::atomic<std::uint64_t> misses_{0};
};

struct RunStats {
  std::string run_label;
  std::string config_digest;
  std::string finished_at;
  std::uint64_t hits = 0;
  std::uint64_t misses = 0;
};

void append_run_stats(const std::filesystem::path& cache_dir, const RunStats& stats);
std::vector<RunStats> read_run_stats(const std::filesystem::path& cache_dir);

/// Serves calls from the cache, forwarding misses to the wrapped backend.
class CachedBackend : public Backend {
 public:
  CachedBackend(BackendPtr inner, std::shared_ptr<CallCache> cache);

  const BackendDescriptor& descriptor() const override { return inner_->descriptor(); }
  Completion complete(const CallRequest& request) override;

  CallDescription describe(const CallRequest& request);

 private:
  std::string image_digest(const ImageRef& image);

  BackendPtr inner_;
  std::shared_ptr<CallCache> cache_;
  std::mutex digest_mutex_;
  std::map<std::string, std::string> digests_;  // locator -> digest
};

}  // namespace tree
