#include "tree/pipeline.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "tree/digest.hpp"
#include "tree/evaluation.hpp"

namespace tree {

using nlohmann::ordered_json;

std::string_view to_string(FallbackPolicy policy) {
  return policy == FallbackPolicy::fail ? "fail" : "answer_without_rationale";
}

std::optional<FallbackPolicy> parse_fallback_policy(std::string_view name) {
  if (name == "fail") return FallbackPolicy::fail;
  if (name == "answer_without_rationale") return FallbackPolicy::answer_without_rationale;
  return std::nullopt;
}

std::vector<std::string> validate_config(const RunConfig& config) {
  std::vector<std::string> problems;
  std::map<std::string, Role> ids;
  for (auto role : {Role::captioner, Role::reasoner, Role::conditioned_answerer}) {
    const auto it = config.backends.find(role);
    if (it == config.backends.end()) {
      problems.push_back("no backend configured for role " + std::string(to_string(role)));
      continue;
    }
    if (it->second.role != role) {
      problems.push_back("backend " + it->second.backend_id + " is mapped to role " +
                         std::string(to_string(role)) + " but declares " +
                         std::string(to_string(it->second.role)));
    }
    for (auto& problem : validate_descriptor(it->second)) problems.push_back(std::move(problem));
    if (!ids.emplace(it->second.backend_id, role).second) {
      problems.push_back("backend id " + it->second.backend_id + " used by more than one role");
    }
  }
  if (!config.demo_source && config.demo_count != 0) {
    problems.push_back("demo_count must be 0 without a demo_source");
  }
  if (config.concurrency_limit < 1) problems.push_back("concurrency_limit must be >= 1");
  return problems;
}

std::vector<Demonstration> load_demonstrations(const std::filesystem::path& path, std::size_t count) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::configuration, "cannot read demonstrations " + path.string());
  std::vector<Demonstration> demos;
  std::string line;
  std::size_t line_no = 0;
  while (demos.size() < count && std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      Demonstration demo{j.at("caption").get<std::string>(), j.at("question").get<std::string>(),
                         j.at("rationale").get<std::string>(), j.at("answer").get<std::string>()};
      if (demo.caption.empty() || demo.question.empty() || demo.rationale.empty() ||
          demo.answer.empty()) {
        throw Error(ErrorKind::configuration, "empty field");
      }
      demos.push_back(std::move(demo));
    } catch (const std::exception& e) {
      throw Error(ErrorKind::configuration,
                  path.string() + " line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (demos.size() < count) {
    throw Error(ErrorKind::configuration, path.string() + " holds " + std::to_string(demos.size()) +
                                              " demonstrations, " + std::to_string(count) +
                                              " requested");
  }
  return demos;
}

std::string config_digest(const RunConfig& config, std::span<const Demonstration> demos) {
  ordered_json j;
  j["backends"] = ordered_json::array();
  for (const auto& [role, d] : config.backends) {
    ordered_json b;
    b["role"] = to_string(role);
    b["id"] = d.backend_id;
    b["kind"] = to_string(d.kind);
    b["endpoint"] = d.endpoint.value_or("");
    b["model"] = d.model_name.value_or("");
    b["auth_ref"] = d.auth_ref.value_or("");
    b["temperature"] = d.decoding.temperature;
    b["max_new_tokens"] = d.decoding.max_new_tokens;
    b["stop"] = d.decoding.stop_sequences;
    if (d.script_path) b["script"] = sha256_file(*d.script_path).value_or("unreadable");
    if (d.trace_dir) b["trace_dir"] = d.trace_dir->string();
    j["backends"].push_back(std::move(b));
  }
  j["demos"] = ordered_json::array();
  for (const auto& demo : demos) j["demos"].push_back(render_demonstration(demo));
  j["fallback_policy"] = to_string(config.fallback_policy);
  j["llm_shortcut"] = config.llm_shortcut;
  j["observation_prompt"] = config.observation_prompt;
  return sha256_hex(j.dump());
}

BackendSet make_backends(const RunConfig& config, const std::shared_ptr<CallCache>& cache) {
  auto build = [&](Role role) -> BackendPtr {
    const auto it = config.backends.find(role);
    if (it == config.backends.end()) {
      throw Error(ErrorKind::configuration, "no backend for role " + std::string(to_string(role)));
    }
    auto backend = make_backend(it->second);
    if (cache && it->second.kind != BackendKind::replay) {
      return std::make_shared<CachedBackend>(std::move(backend), cache);
    }
    return backend;
  };
  return {build(Role::captioner), build(Role::reasoner), build(Role::conditioned_answerer)};
}

std::size_t select_candidate(std::string_view predicted, std::span<const std::string> candidate_captions) {
  if (candidate_captions.empty()) {
    throw Error(ErrorKind::invalid_argument, "select_candidate needs candidates");
  }
  std::size_t best = 0;
  double best_score = -1.0;
  for (std::size_t i = 0; i < candidate_captions.size(); ++i) {
    const double score = text_similarity(predicted, candidate_captions[i]);
    if (score > best_score) {
      best_score = score;
      best = i;
    }
  }
  return best;
}

Pipeline::Pipeline(RunConfig config, BackendSet backends, std::vector<Demonstration> demos)
    : config_(std::move(config)), backends_(std::move(backends)), demos_(std::move(demos)) {
  if (!backends_.captioner || !backends_.reasoner || !backends_.answerer) {
    throw Error(ErrorKind::configuration, "pipeline needs a backend for every role");
  }
  digest_ = config_digest(config_, demos_);
}

namespace {

StageRecord make_record(Stage stage, PromptText prompt, const Backend& backend,
                        std::optional<std::string> image_id) {
  StageRecord record;
  record.stage = stage;
  record.prompt = std::move(prompt);
  record.backend_id = backend.descriptor().backend_id;
  record.image_id = std::move(image_id);
  return record;
}

void fill(StageRecord& record, const Completion& completion) {
  record.completion = completion.text;
  record.cache_hit = completion.cache_hit;
  record.latency_ms = completion.latency_ms;
}

}  // namespace

Caption Pipeline::caption_one(const ImageRef& image, const PromptText& prompt,
                              PipelineTrace& trace) const {
  auto& backend = *backends_.captioner;
  const auto& params = backend.descriptor().decoding;
  auto record = make_record(Stage::observe, prompt, backend, image.id);
  for (int attempt = 0;; ++attempt) {
    try {
      const auto completion = caption_image_completion(backend, image, prompt.rendered, params);
      fill(record, completion);
      trace.records.push_back(record);
      Caption caption{image.id, trim(completion.text), backend.descriptor().backend_id};
      trace.captions.push_back(caption);
      return caption;
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::empty_caption && attempt == 0) continue;
      record.error = std::string(to_string(e.kind())) + ": " + e.what();
      trace.records.push_back(record);
      if (e.kind() == ErrorKind::empty_caption) {
        throw Error(ErrorKind::empty_caption,
                    "empty caption for image " + image.id + " after one retry");
      }
      throw;
    }
  }
}

std::vector<Caption> Pipeline::observe(std::span<const ImageRef> images, PipelineTrace& trace) const {
  const auto prompt = render_observation(config_.observation_prompt);
  std::vector<Caption> captions;
  captions.reserve(images.size());
  for (const auto& image : images) captions.push_back(caption_one(image, prompt, trace));
  return captions;
}

Rationale Pipeline::think(const Caption& caption, std::string_view question,
                          PipelineTrace& trace) const {
  auto& backend = *backends_.reasoner;
  auto prompt = render_thinking_qa(caption.text, question, demos_);
  auto record = make_record(Stage::think, prompt, backend, std::nullopt);
  auto degrade = [&](const std::string& why, ErrorKind kind) -> Rationale {
    record.error = why;
    trace.records.push_back(record);
    if (config_.fallback_policy == FallbackPolicy::fail) throw Error(kind, why);
    trace.flags.push_back("degenerate_rationale");
    return Rationale{"", std::nullopt, record.completion, true};
  };

  Completion completion;
  try {
    completion = complete_text(backend, prompt.rendered, backend.descriptor().decoding);
  } catch (const Error& e) {
    return degrade(std::string(to_string(e.kind())) + ": " + e.what(), e.kind());
  }
  fill(record, completion);
  auto extraction = extract_answer(completion.text);
  if (extraction.rationale.empty()) {
    return degrade("stage-failure: reasoner returned no rationale", ErrorKind::stage_failure);
  }
  trace.records.push_back(record);
  return Rationale{std::move(extraction.rationale), std::move(extraction.answer), completion.text,
                   false};
}

FinalAnswer Pipeline::rethink(const QaInstance& instance, const Rationale& rationale,
                              std::string_view rationale_slot, PipelineTrace& trace) const {
  auto& backend = *backends_.answerer;
  auto prompt = render_rethinking(instance.question, rationale_slot);
  for (const auto* slot : {"question", "rationale"}) {
    if (prompt.filled_slots.at(slot).find('\t') != std::string::npos) {
      trace.flags.push_back(std::string("tab_in_slot:") + slot);
    }
  }
  auto record = make_record(Stage::rethink, prompt, backend, instance.image.id);
  Completion completion;
  try {
    completion = answer_with_context(backend, instance.image, prompt.rendered,
                                     backend.descriptor().decoding);
    if (trim(completion.text).empty()) {
      throw Error(ErrorKind::stage_failure, "answerer returned an empty answer");
    }
  } catch (const Error& e) {
    fill(record, completion);
    record.error = std::string(to_string(e.kind())) + ": " + e.what();
    trace.records.push_back(record);
    throw;
  }
  fill(record, completion);
  trace.records.push_back(record);

  FinalAnswer answer;
  answer.raw = completion.text;
  if (config_.llm_shortcut && rationale.extracted_answer) answer.raw = *rationale.extracted_answer;
  answer.normalized = normalize_answer(answer.raw);
  if (instance.choices && !instance.choices->empty()) {
    answer.chosen_index = select_choice(answer.raw, *instance.choices);
  }
  return answer;
}

namespace {

PipelineTrace start_trace(const Instance& instance, const std::string& digest) {
  PipelineTrace trace;
  trace.instance_id = instance_id(instance);
  trace.instance = instance;
  trace.config_digest = digest;
  return trace;
}

bool validated(const Instance& instance, PipelineTrace& trace) {
  const auto validation = validate_instance(instance);
  if (validation.ok()) return true;
  std::string message;
  for (const auto& v : validation.violations) message += (message.empty() ? "" : "; ") + v;
  trace.failure = StageFailure{"validate", ErrorKind::invalid_argument, message};
  return false;
}

void mark_failed(PipelineTrace& trace, Stage stage, const std::exception& e) {
  const auto* error = dynamic_cast<const Error*>(&e);
  trace.failure = StageFailure{std::string(to_string(stage)),
                               error ? error->kind() : ErrorKind::stage_failure, e.what()};
  trace.final.reset();
}

}  // namespace

PipelineTrace Pipeline::run_qa(const QaInstance& instance) const {
  auto trace = start_trace(instance, digest_);
  if (!validated(instance, trace)) return trace;
  Stage stage = Stage::observe;
  try {
    const auto captions = observe(std::span(&instance.image, 1), trace);
    stage = Stage::think;
    auto rationale = think(captions.front(), instance.question, trace);
    trace.rationale = rationale;
    stage = Stage::rethink;
    // A degenerate rationale is replaced by the caption so the prompt stays well formed.
    const auto& slot = rationale.degenerate ? captions.front().text : rationale.text;
    trace.final = rethink(instance, rationale, slot, trace);
  } catch (const std::exception& e) {
    mark_failed(trace, stage, e);
  }
  return trace;
}

PipelineTrace Pipeline::run_matrix(const MatrixIqInstance& instance) const {
  auto trace = start_trace(instance, digest_);
  if (!validated(instance, trace)) return trace;
  Stage stage = Stage::observe;
  try {
    std::vector<ImageRef> images = instance.context_images;
    images.insert(images.end(), instance.candidate_images.begin(), instance.candidate_images.end());
    const auto captions = observe(images, trace);
    std::vector<std::string> context;
    std::vector<std::string> candidates;
    for (std::size_t i = 0; i < captions.size(); ++i) {
      (i < instance.context_images.size() ? context : candidates).push_back(captions[i].text);
    }

    stage = Stage::think;
    auto& backend = *backends_.reasoner;
    auto prompt = render_thinking_matrix(context);
    auto record = make_record(Stage::think, prompt, backend, std::nullopt);
    Completion completion;
    try {
      completion = complete_text(backend, prompt.rendered, backend.descriptor().decoding);
    } catch (const Error& e) {
      record.error = std::string(to_string(e.kind())) + ": " + e.what();
      trace.records.push_back(record);
      throw;
    }
    fill(record, completion);
    std::string predicted = trim(completion.text);
    if (!predicted.empty() && predicted.back() == '.') predicted = trim(predicted.substr(0, predicted.size() - 1));
    if (predicted.empty()) {
      record.error = "stage-failure: reasoner returned no description";
      trace.records.push_back(record);
      throw Error(ErrorKind::stage_failure, "reasoner returned no description of the next picture");
    }
    trace.records.push_back(record);
    trace.rationale = Rationale{predicted, std::nullopt, completion.text, false};
    trace.final = FinalAnswer{completion.text, normalize_answer(predicted),
                              select_candidate(predicted, candidates)};
  } catch (const std::exception& e) {
    mark_failed(trace, stage, e);
  }
  return trace;
}

PipelineTrace Pipeline::run(const Instance& instance) const {
  if (const auto* qa = std::get_if<QaInstance>(&instance)) return run_qa(*qa);
  return run_matrix(std::get<MatrixIqInstance>(instance));
}

std::vector<PipelineTrace> run_dataset_serial(const Pipeline& pipeline,
                                              std::span<const Instance> instances) {
  std::vector<PipelineTrace> traces;
  traces.reserve(instances.size());
  for (const auto& instance : instances) traces.push_back(pipeline.run(instance));
  return traces;
}

std::vector<PipelineTrace> run_dataset(const Pipeline& pipeline, std::span<const Instance> instances,
                                       int concurrency) {
  if (concurrency < 1) throw Error(ErrorKind::invalid_argument, "concurrency must be >= 1");
  std::vector<std::optional<PipelineTrace>> slots(instances.size());
  const auto n = static_cast<std::int64_t>(instances.size());
#pragma omp parallel for schedule(dynamic, 1) num_threads(concurrency)
  for (std::int64_t i = 0; i < n; ++i) {
    const auto& instance = instances[static_cast<std::size_t>(i)];
    try {
      slots[static_cast<std::size_t>(i)] = pipeline.run(instance);
    } catch (const std::exception& e) {
      // run() converts stage errors itself; this only sees faults like bad_alloc.
      auto trace = start_trace(instance, pipeline.digest());
      trace.failure = StageFailure{"observe", ErrorKind::stage_failure, e.what()};
      slots[static_cast<std::size_t>(i)] = std::move(trace);
    }
  }
  std::vector<PipelineTrace> traces;
  traces.reserve(slots.size());
  for (auto& slot : slots) traces.push_back(std::move(*slot));
  return traces;
}

}  // namespace tree
