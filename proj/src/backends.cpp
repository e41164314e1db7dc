#include "tree/backends.hpp"

#include <httplib.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "tree/digest.hpp"
#include "tree/trace_io.hpp"

namespace tree {

using nlohmann::json;

std::string_view to_string(Role role) {
  switch (role) {
    case Role::captioner: return "captioner";
    case Role::reasoner: return "reasoner";
    case Role::conditioned_answerer: return "conditioned_answerer";
  }
  return "unknown";
}

std::optional<Role> parse_role(std::string_view name) {
  if (name == "captioner") return Role::captioner;
  if (name == "reasoner") return Role::reasoner;
  if (name == "conditioned_answerer" || name == "answerer") return Role::conditioned_answerer;
  return std::nullopt;
}

std::string_view to_string(BackendKind kind) {
  switch (kind) {
    case BackendKind::http: return "http";
    case BackendKind::scripted: return "scripted";
    case BackendKind::replay: return "replay";
  }
  return "unknown";
}

std::optional<BackendKind> parse_backend_kind(std::string_view name) {
  if (name == "http") return BackendKind::http;
  if (name == "scripted") return BackendKind::scripted;
  if (name == "replay") return BackendKind::replay;
  return std::nullopt;
}

DecodingParams default_decoding(Role role) {
  DecodingParams params;
  params.max_new_tokens = role == Role::reasoner ? 256 : 64;
  return params;
}

std::vector<std::string> validate_descriptor(const BackendDescriptor& d) {
  std::vector<std::string> problems;
  if (d.backend_id.empty()) problems.push_back("backend id empty");
  if (d.kind == BackendKind::http) {
    if (!d.endpoint || d.endpoint->empty()) problems.push_back(d.backend_id + ": http backend needs an endpoint");
    if (!d.model_name || d.model_name->empty()) problems.push_back(d.backend_id + ": http backend needs a model name");
  }
  if (d.kind == BackendKind::scripted && !d.script_path) {
    problems.push_back(d.backend_id + ": scripted backend needs a script file");
  }
  if (d.kind == BackendKind::replay && !d.trace_dir) {
    problems.push_back(d.backend_id + ": replay backend needs a trace directory");
  }
  if (!(d.decoding.temperature >= 0.0)) problems.push_back(d.backend_id + ": temperature must be >= 0");
  if (d.decoding.max_new_tokens < 1) problems.push_back(d.backend_id + ": max_new_tokens must be >= 1");
  if (d.max_in_flight < 1) problems.push_back(d.backend_id + ": max_in_flight must be >= 1");
  if (d.max_retries < 0) problems.push_back(d.backend_id + ": max_retries must be >= 0");
  return problems;
}

namespace {

bool is_url(std::string_view locator) {
  return locator.starts_with("http://") || locator.starts_with("https://");
}

bool well_formed_url(std::string_view locator) {
  const auto rest = locator.substr(locator.find("://") + 3);
  const auto host = rest.substr(0, rest.find('/'));
  return !host.empty() && host.find(' ') == std::string_view::npos;
}

void require_role(const Backend& backend, Role expected) {
  const auto& d = backend.descriptor();
  if (d.role != expected) {
    throw Error(ErrorKind::configuration, "backend " + d.backend_id + " has role " +
                                              std::string(to_string(d.role)) + ", expected " +
                                              std::string(to_string(expected)));
  }
}

void require_image(const Backend& backend, const ImageRef& image) {
  // Replay never reads the image; recorded completions are keyed by id.
  if (backend.descriptor().kind == BackendKind::replay) return;
  if (!image_resolvable(image)) {
    throw Error(ErrorKind::input_unavailable, "image " + image.id + " not readable at " + image.locator);
  }
}

}  // namespace

bool image_resolvable(const ImageRef& image) {
  if (is_url(image.locator)) return well_formed_url(image.locator);
  std::error_code ec;
  return std::filesystem::is_regular_file(image.locator, ec);
}

std::string strip_stop_sequences(std::string_view text, const std::vector<std::string>& stops) {
  auto cut = text.size();
  for (const auto& stop : stops) {
    if (stop.empty()) continue;
    cut = std::min(cut, text.find(stop));
  }
  return std::string(text.substr(0, cut));
}

Completion complete_text(Backend& backend, std::string_view prompt, const DecodingParams& params) {
  require_role(backend, Role::reasoner);
  return backend.complete({Role::reasoner, std::string(prompt), std::nullopt, params});
}

Completion caption_image_completion(Backend& backend, const ImageRef& image, std::string_view prompt,
                                    const DecodingParams& params) {
  require_role(backend, Role::captioner);
  require_image(backend, image);
  auto completion = backend.complete({Role::captioner, std::string(prompt), image, params});
  if (trim(completion.text).empty()) {
    throw Error(ErrorKind::empty_caption, "captioner returned an empty caption for image " + image.id);
  }
  return completion;
}

Caption caption_image(Backend& backend, const ImageRef& image, std::string_view prompt,
                      const DecodingParams& params) {
  const auto completion = caption_image_completion(backend, image, prompt, params);
  return {image.id, trim(completion.text), backend.descriptor().backend_id};
}

Completion answer_with_context(Backend& backend, const ImageRef& image, std::string_view prompt,
                               const DecodingParams& params) {
  require_role(backend, Role::conditioned_answerer);
  require_image(backend, image);
  return backend.complete({Role::conditioned_answerer, std::string(prompt), image, params});
}

// --- scripted ---------------------------------------------------------------

std::vector<ScriptEntry> parse_script(std::string_view json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::configuration, std::string("script is not valid JSON: ") + e.what());
  }
  if (!root.is_array()) throw Error(ErrorKind::configuration, "script must be a JSON list");
  std::vector<ScriptEntry> entries;
  for (std::size_t i = 0; i < root.size(); ++i) {
    const auto& item = root[i];
    const auto where = "script entry " + std::to_string(i);
    try {
      ScriptEntry entry;
      const auto role = parse_role(item.at("role").get<std::string>());
      if (!role) throw Error(ErrorKind::configuration, where + ": unknown role");
      entry.role = *role;
      if (item.contains("image_id")) entry.image_id = item.at("image_id").get<std::string>();
      if (item.contains("prompt")) entry.prompt = item.at("prompt").get<std::string>();
      if (item.contains("prompt_digest")) entry.prompt_digest = item.at("prompt_digest").get<std::string>();
      if (entry.prompt && entry.prompt_digest) {
        throw Error(ErrorKind::configuration, where + ": give prompt or prompt_digest, not both");
      }
      if (entry.prompt_digest && !is_hex_digest(*entry.prompt_digest)) {
        throw Error(ErrorKind::configuration, where + ": prompt_digest must be 64 lowercase hex chars");
      }
      entry.completion = item.at("completion").get<std::string>();
      entries.push_back(std::move(entry));
    } catch (const json::exception& e) {
      throw Error(ErrorKind::configuration, where + ": " + e.what());
    }
  }
  return entries;
}

std::vector<ScriptEntry> load_script(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::configuration, "cannot read script file " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_script(buffer.str());
}

std::string script_to_json(const std::vector<ScriptEntry>& entries) {
  auto root = ordered_json::array();
  for (const auto& entry : entries) {
    ordered_json item;
    item["role"] = to_string(entry.role);
    if (entry.image_id) item["image_id"] = *entry.image_id;
    if (entry.prompt) item["prompt"] = *entry.prompt;
    if (entry.prompt_digest) item["prompt_digest"] = *entry.prompt_digest;
    item["completion"] = entry.completion;
    root.push_back(std::move(item));
  }
  return root.dump(2) + "\n";
}

ScriptedBackend::ScriptedBackend(BackendDescriptor descriptor, const std::vector<ScriptEntry>& entries)
    : descriptor_(std::move(descriptor)) {
  const bool first_wins = descriptor_.kind == BackendKind::replay;
  for (const auto& entry : entries) {
    if (entry.role != descriptor_.role) continue;
    const auto image = entry.image_id.value_or("");
    auto insert = [&](auto& table, auto key) {
      auto [it, inserted] = table.emplace(std::move(key), entry.completion);
      if (!inserted && it->second != entry.completion && !first_wins) {
        throw Error(ErrorKind::configuration,
                    descriptor_.backend_id + ": conflicting script entries for one match key");
      }
    };
    if (entry.prompt || entry.prompt_digest) {
      const auto digest = entry.prompt ? sha256_hex(*entry.prompt) : *entry.prompt_digest;
      insert(exact_, Key{entry.role, image, digest});
    } else {
      insert(any_prompt_, std::pair{entry.role, image});
    }
  }
}

Completion ScriptedBackend::complete(const CallRequest& request) {
  const auto image = request.image ? request.image->id : std::string();
  const auto digest = sha256_hex(request.prompt);
  if (const auto it = exact_.find(Key{request.role, image, digest}); it != exact_.end()) {
    return {it->second, false, 0};
  }
  if (const auto it = any_prompt_.find({request.role, image}); it != any_prompt_.end()) {
    return {it->second, false, 0};
  }
  throw Error(ErrorKind::unscripted_prompt,
              descriptor_.backend_id + ": no scripted completion for " +
                  std::string(to_string(request.role)) + " prompt " + digest +
                  (image.empty() ? "" : " image " + image));
}

std::vector<ScriptEntry> replay_entries(const PipelineTrace& trace) {
  std::vector<ScriptEntry> entries;
  for (const auto& record : trace.records) {
    if (record.failed()) continue;
    ScriptEntry entry;
    switch (record.stage) {
      case Stage::observe: entry.role = Role::captioner; break;
      case Stage::think: entry.role = Role::reasoner; break;
      case Stage::rethink: entry.role = Role::conditioned_answerer; break;
    }
    entry.image_id = record.image_id;
    entry.prompt = record.prompt.rendered;
    entry.completion = record.completion;
    entries.push_back(std::move(entry));
  }
  return entries;
}

namespace {

std::vector<ScriptEntry> collect_replay_entries(const std::vector<PipelineTrace>& traces) {
  std::vector<ScriptEntry> entries;
  for (const auto& trace : traces) {
    auto more = replay_entries(trace);
    entries.insert(entries.end(), std::make_move_iterator(more.begin()),
                   std::make_move_iterator(more.end()));
  }
  return entries;
}

BackendDescriptor as_replay(BackendDescriptor descriptor) {
  descriptor.kind = BackendKind::replay;
  return descriptor;
}

}  // namespace

ReplayBackend::ReplayBackend(BackendDescriptor descriptor, const std::vector<PipelineTrace>& traces)
    : ScriptedBackend(as_replay(std::move(descriptor)), collect_replay_entries(traces)) {}

// --- http -------------------------------------------------------------------

namespace {

std::string mime_for(const std::filesystem::path& path) {
  const auto ext = to_lower_ascii(path.extension().string());
  if (ext == ".png") return "image/png";
  if (ext == ".jpg" || ext == ".jpeg") return "image/jpeg";
  if (ext == ".gif") return "image/gif";
  if (ext == ".webp") return "image/webp";
  return "application/octet-stream";
}

std::string image_url_for(const ImageRef& image) {
  if (is_url(image.locator)) return image.locator;
  std::ifstream in(image.locator, std::ios::binary);
  if (!in) throw Error(ErrorKind::input_unavailable, "cannot read image " + image.locator);
  std::stringstream bytes;
  bytes << in.rdbuf();
  return "data:" + mime_for(image.locator) + ";base64," + base64_encode(bytes.str());
}

}  // namespace

HttpBackend::HttpBackend(BackendDescriptor descriptor)
    : descriptor_(std::move(descriptor)), in_flight_(std::max(1, descriptor_.max_in_flight)) {
  const auto problems = validate_descriptor(descriptor_);
  if (!problems.empty()) throw Error(ErrorKind::configuration, problems.front());
  const std::string& endpoint = *descriptor_.endpoint;
  const auto scheme_end = endpoint.find("://");
  if (scheme_end == std::string::npos || !is_url(endpoint)) {
    throw Error(ErrorKind::configuration, "endpoint must start with http:// or https://: " + endpoint);
  }
  const auto path_start = endpoint.find('/', scheme_end + 3);
  scheme_host_port_ = endpoint.substr(0, path_start);
  base_path_ = path_start == std::string::npos ? "" : endpoint.substr(path_start);
  while (!base_path_.empty() && base_path_.back() == '/') base_path_.pop_back();
  if (descriptor_.auth_ref && !std::getenv(descriptor_.auth_ref->c_str())) {
    throw Error(ErrorKind::configuration,
                "environment variable " + *descriptor_.auth_ref + " named by " +
                    descriptor_.backend_id + " is not set");
  }
}

std::string HttpBackend::request_body(const CallRequest& request) const {
  ordered_json body;
  body["model"] = *descriptor_.model_name;
  ordered_json message{{"role", "user"}};
  if (request.image) {
    message["content"] = ordered_json::array(
        {{{"type", "text"}, {"text", request.prompt}},
         {{"type", "image_url"}, {"image_url", {{"url", image_url_for(*request.image)}}}}});
  } else {
    message["content"] = request.prompt;
  }
  body["messages"] = ordered_json::array({message});
  body["temperature"] = request.params.temperature;
  body["max_tokens"] = request.params.max_new_tokens;
  if (!request.params.stop_sequences.empty()) body["stop"] = request.params.stop_sequences;
  return body.dump();
}

std::string parse_chat_response(std::string_view body) {
  json root;
  try {
    root = json::parse(body);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::backend_protocol, std::string("response is not JSON: ") + e.what());
  }
  const auto choices = root.find("choices");
  if (choices == root.end() || !choices->is_array() || choices->empty()) {
    throw Error(ErrorKind::backend_protocol, "response has no choices");
  }
  const auto& first = (*choices)[0];
  if (first.contains("message") && first["message"].contains("content") &&
      first["message"]["content"].is_string()) {
    return first["message"]["content"].get<std::string>();
  }
  if (first.contains("text") && first["text"].is_string()) return first["text"].get<std::string>();
  throw Error(ErrorKind::backend_protocol, "response choice carries no text");
}

Completion HttpBackend::complete_once(const CallRequest& request) {
  const auto body = request_body(request);
  httplib::Client client(scheme_host_port_);
  client.set_connection_timeout(descriptor_.timeout);
  client.set_read_timeout(descriptor_.timeout);
  httplib::Headers headers;
  if (descriptor_.auth_ref) {
    const char* token = std::getenv(descriptor_.auth_ref->c_str());
    if (token == nullptr) {
      throw Error(ErrorKind::configuration, "environment variable " + *descriptor_.auth_ref + " is not set");
    }
    headers.emplace("Authorization", std::string("Bearer ") + token);
  }

  in_flight_.acquire();
  const auto start = std::chrono::steady_clock::now();
  auto result = client.Post(base_path_ + "/chat/completions", headers, body, "application/json");
  in_flight_.release();
  const auto elapsed = std::chrono::duration_cast<std::chrono::milliseconds>(
      std::chrono::steady_clock::now() - start);

  if (!result) {
    throw Error(ErrorKind::backend_unavailable,
                descriptor_.backend_id + ": transport failure: " + httplib::to_string(result.error()));
  }
  const int status = result->status;
  if (status == 429 || status >= 500) {
    throw Error(ErrorKind::backend_unavailable,
                descriptor_.backend_id + ": HTTP " + std::to_string(status));
  }
  if (status >= 400) {
    throw Error(ErrorKind::configuration, descriptor_.backend_id + ": HTTP " + std::to_string(status) +
                                              ": " + result->body.substr(0, 200));
  }
  auto text = strip_stop_sequences(parse_chat_response(result->body), request.params.stop_sequences);
  return {std::move(text), false, elapsed.count()};
}

Completion HttpBackend::complete(const CallRequest& request) {
  return with_retries([&] { return complete_once(request); }, descriptor_.max_retries,
                      descriptor_.retry_base_delay);
}

Completion with_retries(const std::function<Completion()>& attempt, int max_retries,
                        std::chrono::milliseconds base_delay) {
  for (int tries = 0;; ++tries) {
    try {
      return attempt();
    } catch (const Error& e) {
      if (!e.retryable() || tries >= max_retries) throw;
    }
    std::this_thread::sleep_for(base_delay * (1LL << tries));
  }
}

BackendPtr make_backend(const BackendDescriptor& descriptor) {
  const auto problems = validate_descriptor(descriptor);
  if (!problems.empty()) throw Error(ErrorKind::configuration, problems.front());
  switch (descriptor.kind) {
    case BackendKind::http: return std::make_shared<HttpBackend>(descriptor);
    case BackendKind::scripted:
      return std::make_shared<ScriptedBackend>(descriptor, load_script(*descriptor.script_path));
    case BackendKind::replay:
      return std::make_shared<ReplayBackend>(descriptor, read_trace_dir(*descriptor.trace_dir));
  }
  throw Error(ErrorKind::configuration, "unknown backend kind");
}

}  // namespace tree
