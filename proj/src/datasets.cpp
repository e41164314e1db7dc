#include "tree/datasets.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <regex>
#include <sstream>

#include <json.hpp>

namespace tree {

using nlohmann::json;
using nlohmann::ordered_json;
namespace fs = std::filesystem;

std::string_view to_string(DatasetFormat format) {
  switch (format) {
    case DatasetFormat::vqa_v2: return "vqa_v2";
    case DatasetFormat::okvqa: return "okvqa";
    case DatasetFormat::gqa: return "gqa";
    case DatasetFormat::aokvqa: return "aokvqa";
    case DatasetFormat::unified_jsonl: return "unified_jsonl";
    case DatasetFormat::matrix_dir: return "matrix_dir";
  }
  return "unknown";
}

std::optional<DatasetFormat> parse_dataset_format(std::string_view name) {
  for (auto f : {DatasetFormat::vqa_v2, DatasetFormat::okvqa, DatasetFormat::gqa, DatasetFormat::aokvqa,
                 DatasetFormat::unified_jsonl, DatasetFormat::matrix_dir}) {
    if (to_string(f) == name) return f;
  }
  return std::nullopt;
}

std::vector<std::size_t> subsample_indices(std::size_t size, std::size_t limit, std::uint64_t seed) {
  std::vector<std::size_t> indices(size);
  std::iota(indices.begin(), indices.end(), 0);
  if (limit >= size) return indices;
  std::mt19937_64 rng(seed);
  // Partial Fisher-Yates: the first `limit` slots become the sample.
  for (std::size_t i = 0; i < limit; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, size - 1);
    std::swap(indices[i], indices[pick(rng)]);
  }
  indices.resize(limit);
  std::sort(indices.begin(), indices.end());
  return indices;
}

namespace {

[[noreturn]] void load_fail(const fs::path& file, const std::string& where, const std::string& what) {
  throw Error(ErrorKind::load_error, file.string() + " " + where + ": " + what);
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::load_error, "cannot read " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

json parse_json_file(const fs::path& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    load_fail(path, "byte " + std::to_string(e.byte), e.what());
  }
}

std::string id_string(const json& value) {
  if (value.is_string()) return value.get<std::string>();
  if (value.is_number_integer()) return std::to_string(value.get<std::int64_t>());
  throw std::runtime_error("expected a string or integer id");
}

std::string coco_number(const json& value) {
  std::array<char, 32> buf{};
  std::snprintf(buf.data(), buf.size(), "%012lld", static_cast<long long>(value.get<std::int64_t>()));
  return buf.data();
}

template <typename T>
void apply_limit(LoadResult<T>& result, const DatasetManifest& manifest) {
  auto by_id = [](const T& a, const T& b) { return a.instance_id < b.instance_id; };
  std::sort(result.instances.begin(), result.instances.end(), by_id);
  for (std::size_t i = 1; i < result.instances.size(); ++i) {
    if (result.instances[i].instance_id == result.instances[i - 1].instance_id) {
      throw Error(ErrorKind::load_error,
                  manifest.name + ": duplicate instance id " + result.instances[i].instance_id);
    }
  }
  if (!manifest.limit) return;
  if (*manifest.limit < 1) throw Error(ErrorKind::configuration, "limit must be >= 1");
  const auto keep = subsample_indices(result.instances.size(), *manifest.limit, manifest.seed.value_or(0));
  std::vector<T> sampled;
  sampled.reserve(keep.size());
  for (auto i : keep) sampled.push_back(std::move(result.instances[i]));
  result.instances = std::move(sampled);
}

void check_image(const ImageRef& image, const std::string& where, std::vector<std::string>& warnings) {
  std::error_code ec;
  if (!fs::is_regular_file(image.locator, ec)) {
    warnings.push_back(where + ": image not found: " + image.locator);
  }
}

fs::path find_file(const fs::path& root, const std::vector<std::string>& must_contain) {
  std::vector<fs::path> found;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (!entry.is_regular_file() || entry.path().extension() != ".json") continue;
    const auto name = entry.path().filename().string();
    if (std::all_of(must_contain.begin(), must_contain.end(),
                    [&](const std::string& part) { return name.find(part) != std::string::npos; })) {
      found.push_back(entry.path());
    }
  }
  std::sort(found.begin(), found.end());
  return found.empty() ? fs::path() : found.front();
}

void load_unified(const DatasetManifest& manifest, LoadResult<QaInstance>& result) {
  const fs::path file = fs::is_directory(manifest.root) ? manifest.root / (manifest.split + ".jsonl")
                                                         : manifest.root;
  std::ifstream in(file, std::ios::binary);
  if (!in) throw Error(ErrorKind::load_error, "cannot read " + file.string());
  const fs::path base = file.parent_path();
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto where = "line " + std::to_string(line_no);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      load_fail(file, where, e.what());
    }
    std::string field;
    try {
      QaInstance qa;
      field = "id";
      qa.instance_id = id_string(j.at("id"));
      field = "image";
      const fs::path image = j.at("image").get<std::string>();
      qa.image.locator = (image.is_absolute() ? image : base / image).lexically_normal().string();
      qa.image.id = j.contains("image_id") ? id_string(j.at("image_id")) : image.stem().string();
      field = "question";
      qa.question = trim(j.at("question").get<std::string>());
      field = "answers";
      if (j.contains("answers")) {
        qa.gold_answers = fold_answers(j.at("answers").get<std::vector<std::string>>());
      }
      field = "choices";
      if (j.contains("choices")) qa.choices = j.at("choices").get<std::vector<std::string>>();
      field = "correct_choice";
      if (j.contains("correct_choice")) qa.gold_choice_index = j.at("correct_choice").get<std::size_t>();
      field = "record";
      const auto validation = validate_instance(qa);
      if (!validation.ok()) throw std::runtime_error(validation.violations.front());
      check_image(qa.image, where, result.warnings);
      result.instances.push_back(std::move(qa));
    } catch (const std::exception& e) {
      load_fail(file, where + " field '" + field + "'", e.what());
    }
  }
}

void load_vqa(const DatasetManifest& manifest, LoadResult<QaInstance>& result) {
  const auto questions_file = find_file(manifest.root, {"questions", manifest.split});
  if (questions_file.empty()) {
    throw Error(ErrorKind::load_error,
                "no questions file for split " + manifest.split + " under " + manifest.root.string());
  }
  const auto annotations_file = find_file(manifest.root, {"annotations", manifest.split});
  std::map<std::string, std::vector<std::string>> answers;
  if (!annotations_file.empty()) {
    const auto annotations = parse_json_file(annotations_file);
    std::size_t index = 0;
    try {
      for (const auto& a : annotations.at("annotations")) {
        std::vector<std::string> flat;
        for (const auto& answer : a.at("answers")) flat.push_back(answer.at("answer").get<std::string>());
        answers[id_string(a.at("question_id"))] = std::move(flat);
        ++index;
      }
    } catch (const std::exception& e) {
      load_fail(annotations_file, "annotation " + std::to_string(index), e.what());
    }
  }
  const auto questions = parse_json_file(questions_file);
  std::size_t index = 0;
  try {
    for (const auto& q : questions.at("questions")) {
      QaInstance qa;
      qa.instance_id = id_string(q.at("question_id"));
      qa.image.id = id_string(q.at("image_id"));
      qa.image.locator = (manifest.root / manifest.split /
                          ("COCO_" + manifest.split + "_" + coco_number(q.at("image_id")) + ".jpg"))
                             .string();
      qa.question = trim(q.at("question").get<std::string>());
      if (const auto it = answers.find(qa.instance_id); it != answers.end()) {
        qa.gold_answers = fold_answers(it->second);
      }
      check_image(qa.image, "question " + qa.instance_id, result.warnings);
      result.instances.push_back(std::move(qa));
      ++index;
    }
  } catch (const std::exception& e) {
    load_fail(questions_file, "question " + std::to_string(index), e.what());
  }
}

void load_gqa(const DatasetManifest& manifest, LoadResult<QaInstance>& result) {
  auto file = manifest.root / (manifest.split + "_balanced_questions.json");
  if (!fs::exists(file)) file = manifest.root / (manifest.split + "_questions.json");
  const auto questions = parse_json_file(file);
  std::string current;
  try {
    for (const auto& [qid, q] : questions.items()) {
      current = qid;
      QaInstance qa;
      qa.instance_id = qid;
      qa.image.id = id_string(q.at("imageId"));
      qa.image.locator = (manifest.root / "images" / (qa.image.id + ".jpg")).string();
      qa.question = trim(q.at("question").get<std::string>());
      if (q.contains("answer")) qa.gold_answers = {{q.at("answer").get<std::string>(), 1}};
      check_image(qa.image, "question " + qid, result.warnings);
      result.instances.push_back(std::move(qa));
    }
  } catch (const std::exception& e) {
    load_fail(file, "question " + current, e.what());
  }
}

void load_aokvqa(const DatasetManifest& manifest, LoadResult<QaInstance>& result) {
  const auto file = manifest.root / ("aokvqa_v1p0_" + manifest.split + ".json");
  const auto records = parse_json_file(file);
  std::size_t index = 0;
  try {
    for (const auto& r : records) {
      QaInstance qa;
      qa.instance_id = id_string(r.at("question_id"));
      qa.image.id = id_string(r.at("image_id"));
      qa.image.locator =
          (manifest.root / (manifest.split + "2017") / (coco_number(r.at("image_id")) + ".jpg")).string();
      qa.question = trim(r.at("question").get<std::string>());
      if (r.contains("choices")) qa.choices = r.at("choices").get<std::vector<std::string>>();
      if (r.contains("correct_choice_idx") && !r.at("correct_choice_idx").is_null()) {
        qa.gold_choice_index = r.at("correct_choice_idx").get<std::size_t>();
      }
      if (r.contains("direct_answers")) {
        qa.gold_answers = fold_answers(r.at("direct_answers").get<std::vector<std::string>>());
      }
      const auto validation = validate_instance(qa);
      if (!validation.ok()) throw std::runtime_error(validation.violations.front());
      check_image(qa.image, "record " + std::to_string(index), result.warnings);
      result.instances.push_back(std::move(qa));
      ++index;
    }
  } catch (const std::exception& e) {
    load_fail(file, "record " + std::to_string(index), e.what());
  }
}

}  // namespace

LoadResult<QaInstance> load_qa(const DatasetManifest& manifest) {
  if (!fs::exists(manifest.root)) {
    throw Error(ErrorKind::load_error, "dataset root does not exist: " + manifest.root.string());
  }
  LoadResult<QaInstance> result;
  switch (manifest.format) {
    case DatasetFormat::unified_jsonl: load_unified(manifest, result); break;
    case DatasetFormat::vqa_v2:
    case DatasetFormat::okvqa: load_vqa(manifest, result); break;
    case DatasetFormat::gqa: load_gqa(manifest, result); break;
    case DatasetFormat::aokvqa: load_aokvqa(manifest, result); break;
    case DatasetFormat::matrix_dir:
      throw Error(ErrorKind::configuration, "matrix_dir is not a QA format; use load_matrix");
  }
  apply_limit(result, manifest);
  return result;
}

LoadResult<MatrixIqInstance> load_matrix(const DatasetManifest& manifest) {
  if (manifest.format != DatasetFormat::matrix_dir) {
    throw Error(ErrorKind::configuration, "load_matrix needs the matrix_dir format");
  }
  if (!fs::is_directory(manifest.root)) {
    throw Error(ErrorKind::load_error, "matrix root is not a directory: " + manifest.root.string());
  }
  static const std::regex kImage(R"(([ca])(\d+)\.(png|jpg|jpeg|gif|webp))", std::regex::icase);
  std::vector<fs::path> tasks;
  for (const auto& entry : fs::directory_iterator(manifest.root)) {
    if (entry.is_directory()) tasks.push_back(entry.path());
  }
  std::sort(tasks.begin(), tasks.end());

  LoadResult<MatrixIqInstance> result;
  for (const auto& task : tasks) {
    const auto task_name = task.filename().string();
    std::map<int, fs::path> contexts;
    std::map<int, fs::path> candidates;
    for (const auto& entry : fs::directory_iterator(task)) {
      std::smatch m;
      const auto name = entry.path().filename().string();
      if (!entry.is_regular_file() || !std::regex_match(name, m, kImage)) continue;
      auto& table = std::tolower(static_cast<unsigned char>(m[1].str()[0])) == 'c' ? contexts : candidates;
      if (!table.emplace(std::stoi(m[2].str()), entry.path()).second) {
        load_fail(task, "", "two images share index " + m[2].str());
      }
    }
    if (candidates.empty()) load_fail(task, "", "no candidate images (a<N>.png)");
    if (contexts.size() < 2) load_fail(task, "", "needs at least 2 context images (c<N>.png)");

    MatrixIqInstance instance;
    instance.instance_id = task_name;
    for (const auto& [n, path] : contexts) {
      instance.context_images.push_back({task_name + "/" + path.stem().string(), path.string(), std::nullopt});
    }
    for (const auto& [n, path] : candidates) {
      instance.candidate_images.push_back({task_name + "/" + path.stem().string(), path.string(), std::nullopt});
    }
    const auto answer_file = task / "answer.txt";
    if (fs::exists(answer_file)) {
      const auto text = trim(read_file(answer_file));
      std::size_t one_based = 0;
      try {
        std::size_t used = 0;
        one_based = std::stoul(text, &used);
        if (used != text.size()) throw std::invalid_argument("trailing characters");
      } catch (const std::exception&) {
        load_fail(answer_file, "", "expected a 1-based candidate number, got '" + text + "'");
      }
      if (one_based < 1 || one_based > instance.candidate_images.size()) {
        load_fail(answer_file, "", "candidate number " + text + " out of range");
      }
      // Answer files are 1-based; instances are 0-based.
      instance.gold_candidate_index = one_based - 1;
    } else {
      result.warnings.push_back(task_name + ": no answer.txt, task is unlabeled");
    }
    result.instances.push_back(std::move(instance));
  }
  apply_limit(result, manifest);
  return result;
}

std::string to_jsonl_line(const RationaleRecord& record) {
  ordered_json j;
  j["id"] = record.id;
  j["image"] = record.image;
  j["question"] = record.question;
  j["caption"] = record.caption;
  j["rationale"] = record.rationale;
  j["answer"] = record.answer;
  if (record.score) j["score"] = *record.score;
  return j.dump() + "\n";
}

RationaleRecord parse_rationale_record(std::string_view line) {
  try {
    const auto j = json::parse(line);
    RationaleRecord record{j.at("id").get<std::string>(),        j.at("image").get<std::string>(),
                           j.at("question").get<std::string>(),  j.at("caption").get<std::string>(),
                           j.at("rationale").get<std::string>(), j.at("answer").get<std::string>(),
                           std::nullopt};
    if (j.contains("score")) record.score = j.at("score").get<double>();
    if (record.score && !(*record.score >= 0.0 && *record.score <= 1.0)) {
      throw std::runtime_error("score outside [0,1]");
    }
    return record;
  } catch (const std::exception& e) {
    throw Error(ErrorKind::load_error, std::string("malformed rationale record: ") + e.what());
  }
}

std::optional<RationaleRecord> rationale_record(const PipelineTrace& trace, std::optional<double> score) {
  const auto* qa = std::get_if<QaInstance>(&trace.instance);
  if (qa == nullptr || !trace.succeeded() || !trace.rationale || trace.rationale->degenerate ||
      trace.captions.empty()) {
    return std::nullopt;
  }
  const bool has_think = std::any_of(trace.records.begin(), trace.records.end(), [](const StageRecord& r) {
    return r.stage == Stage::think && !r.failed();
  });
  if (!has_think) return std::nullopt;
  return RationaleRecord{qa->instance_id,          qa->image.locator,  qa->question,
                         trace.captions.front().text, trace.rationale->text, trace.final->raw,
                         score};
}

ExportResult export_rationales(std::span<const PipelineTrace> traces, std::ostream& out,
                               const std::map<std::string, double>& scores) {
  ExportResult result;
  for (const auto& trace : traces) {
    std::optional<double> score;
    if (const auto it = scores.find(trace.instance_id); it != scores.end()) score = it->second;
    const auto record = rationale_record(trace, score);
    if (!record) {
      ++result.skipped;
      continue;
    }
    out << to_jsonl_line(*record);
    ++result.written;
  }
  if (!out) throw Error(ErrorKind::output_error, "failed writing rationale export");
  return result;
}

ExportResult export_rationales(std::span<const PipelineTrace> traces, const fs::path& path,
                               const std::map<std::string, double>& scores) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::output_error, "cannot write " + path.string());
  return export_rationales(traces, out, scores);
}

}  // namespace tree
