#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <semaphore>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "tree/core.hpp"

namespace tree {

enum class Role { captioner, reasoner, conditioned_answerer };
enum class BackendKind { http, scripted, replay };

std::string_view to_string(Role role);
std::optional<Role> parse_role(std::string_view name);
std::string_view to_string(BackendKind kind);
std::optional<BackendKind> parse_backend_kind(std::string_view name);

struct DecodingParams {
  double temperature = 0.0;
  int max_new_tokens = 64;
  std::vector<std::string> stop_sequences{"\n\n"};

  bool operator==(const DecodingParams&) const = default;
};

/// Defaults: 64 new tokens for captions and answers, 256 for rationales.
DecodingParams default_decoding(Role role);

struct BackendDescriptor {
  std::string backend_id;
  Role role = Role::reasoner;
  BackendKind kind = BackendKind::scripted;
  std::optional<std::string> endpoint;
  std::optional<std::string> model_name;
  std::optional<std::string> auth_ref;  // environment variable holding the bearer token
  DecodingParams decoding;
  std::optional<std::filesystem::path> script_path;  // scripted backends
  std::optional<std::filesystem::path> trace_dir;    // replay backends
  int max_in_flight = 4;
  int max_retries = 2;
  std::chrono::milliseconds retry_base_delay{200};
  std::chrono::milliseconds timeout{60000};
};

/// Names every violated descriptor invariant; empty when the descriptor is usable.
std::vector<std::string> validate_descriptor(const BackendDescriptor& descriptor);

struct CallRequest {
  Role role = Role::reasoner;
  std::string prompt;
  std::optional<ImageRef> image;
  DecodingParams params;
};

struct Completion {
  std::string text;
  bool cache_hit = false;
  std::int64_t latency_ms = 0;
};

/// A model endpoint for one role. Implementations are safe to call concurrently.
class Backend {
 public:
  virtual ~Backend() = default;
  virtual const BackendDescriptor& descriptor() const = 0;
  virtual Completion complete(const CallRequest& request) = 0;
};

using BackendPtr = std::shared_ptr<Backend>;

/// True when the locator is an existing file or a well-formed http(s) URL.
bool image_resolvable(const ImageRef& image);

Completion complete_text(Backend& backend, std::string_view prompt, const DecodingParams& params);
Caption caption_image(Backend& backend, const ImageRef& image, std::string_view prompt,
                      const DecodingParams& params);
Completion caption_image_completion(Backend& backend, const ImageRef& image,
                                    std::string_view prompt, const DecodingParams& params);
Completion answer_with_context(Backend& backend, const ImageRef& image, std::string_view prompt,
                               const DecodingParams& params);

/// Truncates `text` at the earliest occurrence of any stop sequence.
std::string strip_stop_sequences(std::string_view text, const std::vector<std::string>& stops);

struct ScriptEntry {
  Role role = Role::reasoner;
  std::optional<std::string> image_id;
  std::optional<std::string> prompt;         // exact prompt
  std::optional<std::string> prompt_digest;  // sha256 of the prompt bytes
  std::string completion;
};

std::vector<ScriptEntry> load_script(const std::filesystem::path& path);
std::vector<ScriptEntry> parse_script(std::string_view json_text);
std::string script_to_json(const std::vector<ScriptEntry>& entries);

/// Deterministic backend: looks the call up by (role, image id, prompt digest),
/// falling back to an entry that names no prompt for that (role, image id).
class ScriptedBackend : public Backend {
 public:
  ScriptedBackend(BackendDescriptor descriptor, const std::vector<ScriptEntry>& entries);

  const BackendDescriptor& descriptor() const override { return descriptor_; }
  Completion complete(const CallRequest& request) override;

 private:
  using Key = std::tuple<Role, std::string, std::string>;
  BackendDescriptor descriptor_;
  std::map<Key, std::string> exact_;
  std::map<std::pair<Role, std::string>, std::string> any_prompt_;
};

/// Script entries reproducing every completed call recorded in `trace`.
std::vector<ScriptEntry> replay_entries(const PipelineTrace& trace);

/// Serves completions recorded in traces; never touches the network.
class ReplayBackend : public ScriptedBackend {
 public:
  ReplayBackend(BackendDescriptor descriptor, const std::vector<PipelineTrace>& traces);
};

/// OpenAI-compatible chat-completions client.
class HttpBackend : public Backend {
 public:
  explicit HttpBackend(BackendDescriptor descriptor);

  const BackendDescriptor& descriptor() const override { return descriptor_; }
  Completion complete(const CallRequest& request) override;

  /// Request body for `request`; exposed for wire-format tests.
  std::string request_body(const CallRequest& request) const;

 private:
  Completion complete_once(const CallRequest& request);

  BackendDescriptor descriptor_;
  std::string scheme_host_port_;
  std::string base_path_;
  std::counting_semaphore<> in_flight_;
};

/// Parses the completion text out of a chat-completions response body.
std::string parse_chat_response(std::string_view body);

/// Runs `attempt`, retrying retryable errors up to `max_retries` times with
/// exponential backoff starting at `base_delay`.
Completion with_retries(const std::function<Completion()>& attempt, int max_retries,
                        std::chrono::milliseconds base_delay);

/// Counts calls that reach the wrapped backend.
class CountingBackend : public Backend {
 public:
  explicit CountingBackend(BackendPtr inner) : inner_(std::move(inner)) {}

  const BackendDescriptor& descriptor() const override { return inner_->descriptor(); }
  Completion complete(const CallRequest& request) override {
    ++calls_;
    return inner_->complete(request);
  }
  std::uint64_t calls() const { return calls_.load(); }

 private:
  BackendPtr inner_;
  std::atomic<std::uint64_t> calls_{0};
};

/// Builds the backend a descriptor names (http, scripted or replay).
BackendPtr make_backend(const BackendDescriptor& descriptor);

}  // namespace tree
