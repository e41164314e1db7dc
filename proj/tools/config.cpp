#include <fstream>
#include <set>
#include <sstream>

#define TOML_EXCEPTIONS 1
#include <toml.hpp>

#include "cli.hpp"

namespace tree::cli {

namespace fs = std::filesystem;

namespace {

[[noreturn]] void config_fail(const std::string& where, const std::string& what) {
  throw Error(ErrorKind::configuration, "config [" + where + "]: " + what);
}

void reject_unknown(const toml::table& table, const std::string& where,
                    const std::set<std::string_view>& known) {
  for (const auto& [key, value] : table) {
    if (!known.contains(key.str())) config_fail(where, "unknown key '" + std::string(key.str()) + "'");
  }
}

template <typename T>
std::optional<T> get(const toml::table& table, std::string_view key, const std::string& where) {
  const auto* node = table.get(key);
  if (node == nullptr) return std::nullopt;
  if constexpr (std::is_same_v<T, double>) {
    // Integers are accepted where reals are expected ("temperature = 0").
    if (auto v = node->value<double>()) return v;
  } else if (auto v = node->value_exact<T>()) {
    return v;
  }
  config_fail(where, "key '" + std::string(key) + "' has the wrong type");
}

std::vector<std::string> string_list(const toml::table& table, std::string_view key,
                                     const std::string& where) {
  const auto* node = table.get(key);
  if (node == nullptr) return {};
  const auto* array = node->as_array();
  if (array == nullptr) config_fail(where, "key '" + std::string(key) + "' must be a list of strings");
  std::vector<std::string> out;
  for (const auto& item : *array) {
    const auto value = item.value_exact<std::string>();
    if (!value) config_fail(where, "key '" + std::string(key) + "' must be a list of strings");
    out.push_back(*value);
  }
  return out;
}

fs::path resolve(const fs::path& base, const std::string& value) {
  const fs::path p(value);
  return p.is_absolute() ? p : (base / p).lexically_normal();
}

const toml::table& require_table(const toml::table& root, std::string_view key, const std::string& where) {
  const auto* node = root.get(key);
  if (node == nullptr || !node->is_table()) config_fail(where, "missing section");
  return *node->as_table();
}

BackendDescriptor parse_backend(const toml::table& t, Role role, const std::string& where,
                                const fs::path& base) {
  reject_unknown(t, where,
                 {"id", "kind", "endpoint", "model", "auth_env", "script", "trace_dir", "temperature",
                  "max_new_tokens", "stop", "max_in_flight", "max_retries", "retry_delay_ms",
                  "timeout_ms"});
  BackendDescriptor d;
  d.role = role;
  d.decoding = default_decoding(role);
  d.backend_id = get<std::string>(t, "id", where).value_or(std::string(to_string(role)));
  const auto kind_name = get<std::string>(t, "kind", where).value_or("http");
  const auto kind = parse_backend_kind(kind_name);
  if (!kind) config_fail(where, "unknown backend kind '" + kind_name + "'");
  d.kind = *kind;
  d.endpoint = get<std::string>(t, "endpoint", where);
  d.model_name = get<std::string>(t, "model", where);
  d.auth_ref = get<std::string>(t, "auth_env", where);
  if (auto script = get<std::string>(t, "script", where)) d.script_path = resolve(base, *script);
  if (auto dir = get<std::string>(t, "trace_dir", where)) d.trace_dir = resolve(base, *dir);
  if (auto v = get<double>(t, "temperature", where)) d.decoding.temperature = *v;
  if (auto v = get<std::int64_t>(t, "max_new_tokens", where)) d.decoding.max_new_tokens = static_cast<int>(*v);
  if (t.contains("stop")) d.decoding.stop_sequences = string_list(t, "stop", where);
  if (auto v = get<std::int64_t>(t, "max_in_flight", where)) d.max_in_flight = static_cast<int>(*v);
  if (auto v = get<std::int64_t>(t, "max_retries", where)) d.max_retries = static_cast<int>(*v);
  if (auto v = get<std::int64_t>(t, "retry_delay_ms", where)) d.retry_base_delay = std::chrono::milliseconds(*v);
  if (auto v = get<std::int64_t>(t, "timeout_ms", where)) d.timeout = std::chrono::milliseconds(*v);
  return d;
}

DatasetSpec parse_dataset(const toml::table& t, const std::string& where, const fs::path& base) {
  reject_unknown(t, where, {"name", "format", "root", "split", "limit", "seed", "metric"});
  DatasetSpec spec;
  const auto format_name = get<std::string>(t, "format", where);
  if (!format_name) config_fail(where, "missing 'format'");
  const auto format = parse_dataset_format(*format_name);
  if (!format) config_fail(where, "unknown dataset format '" + *format_name + "'");
  spec.manifest.format = *format;
  const auto root = get<std::string>(t, "root", where);
  if (!root) config_fail(where, "missing 'root'");
  spec.manifest.root = resolve(base, *root);
  spec.manifest.name = get<std::string>(t, "name", where).value_or(std::string(to_string(*format)));
  spec.manifest.split = get<std::string>(t, "split", where).value_or("val");
  if (auto limit = get<std::int64_t>(t, "limit", where)) {
    if (*limit < 1) config_fail(where, "limit must be >= 1");
    spec.manifest.limit = static_cast<std::size_t>(*limit);
  }
  if (auto seed = get<std::int64_t>(t, "seed", where)) spec.manifest.seed = static_cast<std::uint64_t>(*seed);
  if (auto metric = get<std::string>(t, "metric", where); metric && *metric != "auto") {
    spec.metric = parse_metric_kind(*metric);
    if (!spec.metric) config_fail(where, "unknown metric '" + *metric + "'");
  }
  return spec;
}

}  // namespace

CliConfig parse_config(std::string_view toml_text, const fs::path& base_dir) {
  toml::table root;
  try {
    root = toml::parse(toml_text);
  } catch (const toml::parse_error& e) {
    std::ostringstream msg;
    msg << e.description() << " at line " << e.source().begin.line;
    throw Error(ErrorKind::configuration, "config is not valid TOML: " + msg.str());
  }
  reject_unknown(root, "root", {"run", "backends", "dataset", "datasets"});

  CliConfig config;
  if (const auto* run_node = root.get("run")) {
    const auto* run = run_node->as_table();
    if (run == nullptr) config_fail("run", "must be a table");
    reject_unknown(*run, "run",
                   {"label", "demo_count", "demo_source", "fallback_policy", "concurrency", "cache",
                    "cache_dir", "llm_shortcut", "observation_prompt", "vqa_variant"});
    auto& r = config.run;
    r.label = get<std::string>(*run, "label", "run").value_or("pipeline");
    if (auto v = get<std::int64_t>(*run, "demo_count", "run")) {
      if (*v < 0) config_fail("run", "demo_count must be >= 0");
      r.demo_count = static_cast<std::size_t>(*v);
    }
    if (auto v = get<std::string>(*run, "demo_source", "run")) r.demo_source = resolve(base_dir, *v);
    if (auto v = get<std::string>(*run, "fallback_policy", "run")) {
      const auto policy = parse_fallback_policy(*v);
      if (!policy) config_fail("run", "unknown fallback_policy '" + *v + "'");
      r.fallback_policy = *policy;
    }
    if (auto v = get<std::int64_t>(*run, "concurrency", "run")) r.concurrency_limit = static_cast<int>(*v);
    r.cache_enabled = get<bool>(*run, "cache", "run").value_or(true);
    r.cache_dir = resolve(base_dir, get<std::string>(*run, "cache_dir", "run").value_or(".tree-cache"));
    r.llm_shortcut = get<bool>(*run, "llm_shortcut", "run").value_or(false);
    r.observation_prompt = get<std::string>(*run, "observation_prompt", "run").value_or("");
    if (auto v = get<std::string>(*run, "vqa_variant", "run")) {
      const auto variant = parse_vqa_variant(*v);
      if (!variant) config_fail("run", "unknown vqa_variant '" + *v + "'");
      config.vqa_variant = *variant;
    }
  } else {
    config.run.cache_dir = resolve(base_dir, ".tree-cache");
  }

  const auto& backends = require_table(root, "backends", "backends");
  reject_unknown(backends, "backends", {"captioner", "reasoner", "answerer"});
  const std::pair<std::string_view, Role> sections[] = {{"captioner", Role::captioner},
                                                        {"reasoner", Role::reasoner},
                                                        {"answerer", Role::conditioned_answerer}};
  for (const auto& [name, role] : sections) {
    const auto where = "backends." + std::string(name);
    config.run.backends[role] = parse_backend(require_table(backends, name, where), role, where, base_dir);
  }

  if (const auto* single = root.get("dataset")) {
    if (!single->is_table()) config_fail("dataset", "must be a table");
    config.datasets.push_back(parse_dataset(*single->as_table(), "dataset", base_dir));
  }
  if (const auto* many = root.get("datasets")) {
    const auto* array = many->as_array();
    if (array == nullptr) config_fail("datasets", "must be an array of tables ([[datasets]])");
    for (std::size_t i = 0; i < array->size(); ++i) {
      const auto* table = array->get(i)->as_table();
      const auto where = "datasets." + std::to_string(i);
      if (table == nullptr) config_fail(where, "must be a table");
      config.datasets.push_back(parse_dataset(*table, where, base_dir));
    }
  }

  auto problems = validate_config(config.run);
  if (!problems.empty()) throw Error(ErrorKind::configuration, "config: " + problems.front());
  return config;
}

CliConfig load_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::configuration, "cannot read config file " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_config(buffer.str(), path.parent_path());
}

}  // namespace tree::cli
