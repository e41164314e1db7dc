#include "tree/trace_io.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "tree/digest.hpp"

namespace tree {

namespace {

ErrorKind parse_error_kind(std::string_view name) {
  for (int k = 0; k <= static_cast<int>(ErrorKind::empty_report); ++k) {
    const auto kind = static_cast<ErrorKind>(k);
    if (to_string(kind) == name) return kind;
  }
  return ErrorKind::stage_failure;
}

template <typename T>
std::optional<T> optional_field(const ordered_json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<T>();
}

ordered_json record_to_json(const StageRecord& record) {
  ordered_json j;
  j["stage"] = to_string(record.stage);
  j["template_id"] = record.prompt.template_id;
  j["slots"] = ordered_json::object();
  for (const auto& [name, value] : record.prompt.filled_slots) j["slots"][name] = value;
  j["prompt"] = record.prompt.rendered;
  j["backend_id"] = record.backend_id;
  if (record.image_id) j["image_id"] = *record.image_id;
  j["completion"] = record.completion;
  j["cache_hit"] = record.cache_hit;
  j["latency_ms"] = record.latency_ms;
  if (record.error) j["error"] = *record.error;
  return j;
}

StageRecord record_from_json(const ordered_json& j) {
  StageRecord record;
  const auto stage = parse_stage(j.at("stage").get<std::string>());
  if (!stage) throw Error(ErrorKind::load_error, "trace record has unknown stage");
  record.stage = *stage;
  record.prompt.template_id = j.at("template_id").get<std::string>();
  for (const auto& [name, value] : j.at("slots").items()) {
    record.prompt.filled_slots[name] = value.get<std::string>();
  }
  record.prompt.rendered = j.at("prompt").get<std::string>();
  record.backend_id = j.at("backend_id").get<std::string>();
  record.image_id = optional_field<std::string>(j, "image_id");
  record.completion = j.at("completion").get<std::string>();
  record.cache_hit = j.at("cache_hit").get<bool>();
  record.latency_ms = j.at("latency_ms").get<std::int64_t>();
  if (record.latency_ms < 0) throw Error(ErrorKind::load_error, "trace record has negative latency");
  record.error = optional_field<std::string>(j, "error");
  return record;
}

}  // namespace

ordered_json to_json(const ImageRef& image) {
  ordered_json j;
  j["id"] = image.id;
  j["locator"] = image.locator;
  if (image.content_digest) j["content_digest"] = *image.content_digest;
  return j;
}

ImageRef image_from_json(const ordered_json& j) {
  return {j.at("id").get<std::string>(), j.at("locator").get<std::string>(),
          optional_field<std::string>(j, "content_digest")};
}

ordered_json to_json(const Instance& instance) {
  ordered_json j;
  if (const auto* qa = std::get_if<QaInstance>(&instance)) {
    j["kind"] = "qa";
    j["id"] = qa->instance_id;
    j["image"] = to_json(qa->image);
    j["question"] = qa->question;
    j["gold_answers"] = ordered_json::array();
    for (const auto& gold : qa->gold_answers) {
      j["gold_answers"].push_back({{"text", gold.text}, {"count", gold.count}});
    }
    if (qa->choices) j["choices"] = *qa->choices;
    if (qa->gold_choice_index) j["gold_choice_index"] = *qa->gold_choice_index;
    return j;
  }
  const auto& matrix = std::get<MatrixIqInstance>(instance);
  j["kind"] = "matrix";
  j["id"] = matrix.instance_id;
  j["context_images"] = ordered_json::array();
  for (const auto& image : matrix.context_images) j["context_images"].push_back(to_json(image));
  j["candidate_images"] = ordered_json::array();
  for (const auto& image : matrix.candidate_images) j["candidate_images"].push_back(to_json(image));
  if (matrix.gold_candidate_index) j["gold_candidate_index"] = *matrix.gold_candidate_index;
  return j;
}

Instance instance_from_json(const ordered_json& j) {
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "qa") {
    QaInstance qa;
    qa.instance_id = j.at("id").get<std::string>();
    qa.image = image_from_json(j.at("image"));
    qa.question = j.at("question").get<std::string>();
    for (const auto& gold : j.at("gold_answers")) {
      qa.gold_answers.push_back({gold.at("text").get<std::string>(), gold.at("count").get<int>()});
    }
    qa.choices = optional_field<std::vector<std::string>>(j, "choices");
    qa.gold_choice_index = optional_field<std::size_t>(j, "gold_choice_index");
    return qa;
  }
  if (kind == "matrix") {
    MatrixIqInstance matrix;
    matrix.instance_id = j.at("id").get<std::string>();
    for (const auto& image : j.at("context_images")) {
      matrix.context_images.push_back(image_from_json(image));
    }
    for (const auto& image : j.at("candidate_images")) {
      matrix.candidate_images.push_back(image_from_json(image));
    }
    matrix.gold_candidate_index = optional_field<std::size_t>(j, "gold_candidate_index");
    return matrix;
  }
  throw Error(ErrorKind::load_error, "unknown instance kind: " + kind);
}

ordered_json to_json(const PipelineTrace& trace) {
  ordered_json j;
  j["instance_id"] = trace.instance_id;
  j["config_digest"] = trace.config_digest;
  j["instance"] = to_json(trace.instance);
  j["records"] = ordered_json::array();
  for (const auto& record : trace.records) j["records"].push_back(record_to_json(record));
  j["captions"] = ordered_json::array();
  for (const auto& caption : trace.captions) {
    j["captions"].push_back(
        {{"image_id", caption.image_id}, {"text", caption.text}, {"backend_id", caption.backend_id}});
  }
  if (trace.rationale) {
    ordered_json r;
    r["text"] = trace.rationale->text;
    if (trace.rationale->extracted_answer) r["extracted_answer"] = *trace.rationale->extracted_answer;
    r["raw_completion"] = trace.rationale->raw_completion;
    r["degenerate"] = trace.rationale->degenerate;
    j["rationale"] = std::move(r);
  } else {
    j["rationale"] = nullptr;
  }
  if (trace.final) {
    ordered_json f;
    f["raw"] = trace.final->raw;
    f["normalized"] = trace.final->normalized;
    if (trace.final->chosen_index) f["chosen_index"] = *trace.final->chosen_index;
    j["final"] = std::move(f);
  } else {
    j["final"] = nullptr;
  }
  if (trace.failure) {
    j["failure"] = {{"stage", trace.failure->stage},
                    {"kind", std::string(to_string(trace.failure->kind))},
                    {"message", trace.failure->message}};
  } else {
    j["failure"] = nullptr;
  }
  j["flags"] = trace.flags;
  return j;
}

PipelineTrace trace_from_json(const ordered_json& j) {
  PipelineTrace trace;
  trace.instance_id = j.at("instance_id").get<std::string>();
  trace.instance = instance_from_json(j.at("instance"));
  trace.config_digest = j.at("config_digest").get<std::string>();
  for (const auto& record : j.at("records")) trace.records.push_back(record_from_json(record));
  for (const auto& caption : j.at("captions")) {
    trace.captions.push_back({caption.at("image_id").get<std::string>(),
                              caption.at("text").get<std::string>(),
                              caption.at("backend_id").get<std::string>()});
  }
  if (const auto& r = j.at("rationale"); !r.is_null()) {
    trace.rationale = Rationale{r.at("text").get<std::string>(),
                                optional_field<std::string>(r, "extracted_answer"),
                                r.at("raw_completion").get<std::string>(),
                                r.at("degenerate").get<bool>()};
  }
  if (const auto& f = j.at("final"); !f.is_null()) {
    trace.final = FinalAnswer{f.at("raw").get<std::string>(), f.at("normalized").get<std::string>(),
                              optional_field<std::size_t>(f, "chosen_index")};
  }
  if (const auto& f = j.at("failure"); !f.is_null()) {
    trace.failure = StageFailure{f.at("stage").get<std::string>(),
                                 parse_error_kind(f.at("kind").get<std::string>()),
                                 f.at("message").get<std::string>()};
  }
  trace.flags = j.at("flags").get<std::vector<std::string>>();
  return trace;
}

std::string serialize_trace(const PipelineTrace& trace) { return to_json(trace).dump(2) + "\n"; }

PipelineTrace parse_trace(std::string_view text) {
  try {
    return trace_from_json(ordered_json::parse(text));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::load_error, std::string("malformed trace: ") + e.what());
  }
}

std::string trace_file_name(std::string_view instance_id) {
  std::string name;
  bool changed = instance_id.empty();
  for (char c : instance_id) {
    const bool keep = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') ||
                      c == '-' || c == '_' || c == '.';
    name.push_back(keep ? c : '_');
    changed = changed || !keep;
  }
  // Sanitized names may collide; disambiguate with a digest prefix.
  if (changed) name += "-" + sha256_hex(instance_id).substr(0, 12);
  return name + ".json";
}

void write_trace_file(const std::filesystem::path& dir, const PipelineTrace& trace) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  const auto path = dir / trace_file_name(trace.instance_id);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::output_error, "cannot write trace file " + path.string());
  out << serialize_trace(trace);
  if (!out) throw Error(ErrorKind::output_error, "failed writing trace file " + path.string());
}

PipelineTrace read_trace_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::load_error, "cannot read trace file " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  try {
    return parse_trace(buffer.str());
  } catch (const Error& e) {
    throw Error(ErrorKind::load_error, path.string() + ": " + e.what());
  }
}

std::vector<PipelineTrace> read_trace_dir(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) {
    throw Error(ErrorKind::load_error, "trace directory not found: " + dir.string());
  }
  std::vector<std::filesystem::path> paths;
  for (const auto& entry : std::filesystem::recursive_directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".json") paths.push_back(entry.path());
  }
  std::sort(paths.begin(), paths.end());
  std::vector<PipelineTrace> traces;
  traces.reserve(paths.size());
  for (const auto& path : paths) traces.push_back(read_trace_file(path));
  return traces;
}

}  // namespace tree
