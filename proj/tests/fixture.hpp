#pragma once

// Builds small self-contained corpora on disk: dummy image files, a
// unified_jsonl question file, matrix task directories, a scripted-backend
// script covering every call and a TOML config tying them together.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tree/backends.hpp"
#include "tree/pipeline.hpp"
#include "tree/prompts.hpp"

namespace fixture {

namespace fs = std::filesystem;

class TempDir {
 public:
  TempDir() {
    std::random_device rd;
    path_ = fs::temp_directory_path() / ("tree-test-" + std::to_string(rd()) + std::to_string(rd()));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  fs::path path_;
};

inline void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

struct QaSpec {
  std::string id;
  std::string image_id;
  std::string caption;
  std::string question;
  std::string rationale;
  std::string answer;  // what the answerer says
  std::vector<std::string> gold;  // flat annotator answers
  std::vector<std::string> choices;
  int correct_choice = -1;
};

inline const std::vector<std::string>& nouns() {
  static const std::vector<std::string> words = {
      "zebra", "giraffe", "bus",   "train", "pizza",  "kite",    "surfboard", "clock",
      "horse", "laptop",  "cake",  "boat",  "bench",  "umbrella", "elephant", "bicycle",
      "sheep", "banana",  "couch", "vase",  "tennis", "skis",    "frisbee",   "oven"};
  return words;
}

/// Deterministic QA specs. Answers agree with the gold majority on most
/// instances so reports are neither 0 nor 100.
inline std::vector<QaSpec> qa_specs(std::size_t n) {
  std::vector<QaSpec> specs;
  const auto& words = nouns();
  for (std::size_t i = 0; i < n; ++i) {
    QaSpec s;
    char buf[32];
    std::snprintf(buf, sizeof buf, "q%03zu", i);
    s.id = buf;
    std::snprintf(buf, sizeof buf, "img%03zu", i);
    s.image_id = buf;
    const auto& w = words[i % words.size()];
    const auto& other = words[(i + 7) % words.size()];
    s.caption = "a photo of a " + w + " next to a " + other;
    s.question = "What is the main object in picture " + std::to_string(i) + "?";
    s.rationale = "The caption mentions a " + w + " in the foreground";
    s.answer = (i % 4 == 3) ? other : w;
    s.gold.assign(6, w);
    s.gold.insert(s.gold.end(), 2, other);
    s.gold.insert(s.gold.end(), 2, "thing");
    if (i % 5 == 2) {
      s.choices = {other, w, "thing", "nothing"};
      s.correct_choice = 1;
    }
    specs.push_back(std::move(s));
  }
  return specs;
}

struct Corpus {
  fs::path root;
  fs::path data_file;
  fs::path script_file;
  fs::path config_file;
  fs::path matrix_dir;
  std::vector<QaSpec> specs;
};

inline std::string thinking_completion(const QaSpec& s) {
  return " " + s.rationale + ". So the answer is " + s.answer + ".";
}

struct CorpusOptions {
  std::size_t qa_count = 20;
  std::size_t matrix_count = 0;
  std::set<std::size_t> observe_failures;  // instances whose caption is unscripted
  std::set<std::size_t> rethink_failures;  // instances whose answer is empty
  std::string label = "Ours";
  bool cache = false;
  std::string extra_run;  // appended to [run]
};

inline void add_matrix_tasks(Corpus& corpus, std::size_t count, std::vector<tree::ScriptEntry>& script) {
  static const std::vector<std::string> shapes = {"circle", "square", "triangle", "star", "hexagon", "cross"};
  for (std::size_t t = 0; t < count; ++t) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "task%02zu", t);
    const std::string task = buf;
    const auto dir = corpus.matrix_dir / task;
    std::vector<std::string> context;
    for (int c = 1; c <= 3; ++c) {
      const auto caption = std::to_string(c) + " " + shapes[t % shapes.size()] + "s";
      context.push_back(caption);
      write_file(dir / ("c" + std::to_string(c) + ".png"), "img:" + task + caption);
      script.push_back({tree::Role::captioner, task + "/c" + std::to_string(c), std::nullopt, std::nullopt, caption});
    }
    const std::size_t gold = t % 6;
    for (std::size_t a = 0; a < 6; ++a) {
      const auto caption = std::to_string(4 + (a == gold ? 0 : a + 1)) + " " + shapes[(t + a) % shapes.size()] +
                           " shapes";
      write_file(dir / ("a" + std::to_string(a + 1) + ".png"), "img:" + task + caption);
      script.push_back({tree::Role::captioner, task + "/a" + std::to_string(a + 1), std::nullopt, std::nullopt,
                        caption});
    }
    write_file(dir / "answer.txt", std::to_string(gold + 1) + "\n");
    // The reasoner predicts the gold candidate on even tasks only.
    const auto predicted = t % 2 == 0 ? "4 " + shapes[(t + gold) % shapes.size()] + " shapes."
                                      : "a " + shapes[(t + 3) % shapes.size()] + " outline.";
    script.push_back({tree::Role::reasoner, std::nullopt,
                      tree::render_thinking_matrix(context).rendered, std::nullopt, " " + predicted});
  }
}

inline std::string config_text(const Corpus& corpus, const CorpusOptions& options, bool qa, bool matrix) {
  std::ostringstream out;
  out << "[run]\nlabel = \"" << options.label << "\"\nconcurrency = 2\ncache = "
      << (options.cache ? "true" : "false") << "\ncache_dir = \"cache\"\n"
      << options.extra_run << "\n";
  for (const auto* role : {"captioner", "reasoner", "answerer"}) {
    out << "[backends." << role << "]\nid = \"scripted-" << role << "\"\nkind = \"scripted\"\nscript = \""
        << corpus.script_file.filename().string() << "\"\n\n";
  }
  if (qa) out << "[[datasets]]\nname = \"Fixture\"\nformat = \"unified_jsonl\"\nroot = \"data/val.jsonl\"\n\n";
  if (matrix) out << "[[datasets]]\nname = \"Matrix\"\nformat = \"matrix_dir\"\nroot = \"matrix\"\n\n";
  return out.str();
}

inline Corpus make_corpus(const fs::path& root, const CorpusOptions& options = {}) {
  Corpus corpus;
  corpus.root = root;
  corpus.data_file = root / "data" / "val.jsonl";
  corpus.script_file = root / "script.json";
  corpus.config_file = root / "config.toml";
  corpus.matrix_dir = root / "matrix";
  corpus.specs = qa_specs(options.qa_count);

  std::vector<tree::ScriptEntry> script;
  std::string jsonl;
  for (std::size_t i = 0; i < corpus.specs.size(); ++i) {
    const auto& s = corpus.specs[i];
    write_file(root / "data" / "images" / (s.image_id + ".png"), "fake-png-" + s.image_id);
    nlohmann::ordered_json line;
    line["id"] = s.id;
    line["image"] = "images/" + s.image_id + ".png";
    line["question"] = s.question;
    line["answers"] = s.gold;
    if (!s.choices.empty()) {
      line["choices"] = s.choices;
      line["correct_choice"] = s.correct_choice;
    }
    jsonl += line.dump() + "\n";
    if (!options.observe_failures.contains(i)) {
      script.push_back({tree::Role::captioner, s.image_id, std::nullopt, std::nullopt, s.caption});
    }
    script.push_back({tree::Role::reasoner, std::nullopt,
                      tree::render_thinking_qa(s.caption, s.question, {}).rendered, std::nullopt,
                      thinking_completion(s)});
    script.push_back({tree::Role::conditioned_answerer, s.image_id, std::nullopt, std::nullopt,
                      options.rethink_failures.contains(i) ? "  " : s.answer});
  }
  if (options.qa_count > 0) write_file(corpus.data_file, jsonl);
  if (options.matrix_count > 0) add_matrix_tasks(corpus, options.matrix_count, script);
  write_file(corpus.script_file, tree::script_to_json(script));
  write_file(corpus.config_file,
             config_text(corpus, options, options.qa_count > 0, options.matrix_count > 0));
  return corpus;
}

/// The config the corpus TOML describes, built directly.
inline tree::RunConfig run_config(const Corpus& corpus) {
  tree::RunConfig config;
  config.label = "Ours";
  config.cache_enabled = false;
  config.cache_dir = corpus.root / "cache";
  const std::pair<tree::Role, std::string> roles[] = {{tree::Role::captioner, "captioner"},
                                                      {tree::Role::reasoner, "reasoner"},
                                                      {tree::Role::conditioned_answerer, "answerer"}};
  for (const auto& [role, name] : roles) {
    tree::BackendDescriptor d;
    d.backend_id = "scripted-" + name;
    d.role = role;
    d.kind = tree::BackendKind::scripted;
    d.script_path = corpus.script_file;
    d.decoding = tree::default_decoding(role);
    config.backends[role] = d;
  }
  return config;
}

}  // namespace fixture
