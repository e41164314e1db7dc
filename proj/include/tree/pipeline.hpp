#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tree/backends.hpp"
#include "tree/cache.hpp"
#include "tree/core.hpp"
#include "tree/prompts.hpp"

namespace tree {

enum class FallbackPolicy { fail, answer_without_rationale };

std::string_view to_string(FallbackPolicy policy);
std::optional<FallbackPolicy> parse_fallback_policy(std::string_view name);

struct RunConfig {
  std::string label = "pipeline";
  std::map<Role, BackendDescriptor> backends;
  std::size_t demo_count = 0;
  std::optional<std::filesystem::path> demo_source;
  FallbackPolicy fallback_policy = FallbackPolicy::fail;
  int concurrency_limit = 4;
  bool cache_enabled = true;
  std::optional<std::filesystem::path> cache_dir;
  // Take the reasoner's own answer as final instead of the re-think answer.
  bool llm_shortcut = false;
  std::string observation_prompt;
};

std::vector<std::string> validate_config(const RunConfig& config);

/// Demonstrations from a JSONL file with caption/question/rationale/answer
/// fields; the first `count` lines are used.
std::vector<Demonstration> load_demonstrations(const std::filesystem::path& path, std::size_t count);

/// Digest over everything that can change a completion: backend identities,
/// decoding, script contents, demonstrations and stage options.
std::string config_digest(const RunConfig& config, std::span<const Demonstration> demos);

struct BackendSet {
  BackendPtr captioner;
  BackendPtr reasoner;
  BackendPtr answerer;
};

/// Builds one backend per role, each wrapped in the cache when `cache` is set.
BackendSet make_backends(const RunConfig& config, const std::shared_ptr<CallCache>& cache);

/// Index of the candidate caption most similar to `predicted` (token F1 after
/// normalization), ties to the lowest index.
std::size_t select_candidate(std::string_view predicted, std::span<const std::string> candidate_captions);

/// Observe / think / re-think orchestration for one instance at a time.
/// Stateless across instances, so one Pipeline serves many threads.
class Pipeline {
 public:
  Pipeline(RunConfig config, BackendSet backends, std::vector<Demonstration> demos = {});

  const RunConfig& config() const { return config_; }
  const std::string& digest() const { return digest_; }

  // Stage operations append their StageRecords to `trace` and throw on failure.
  std::vector<Caption> observe(std::span<const ImageRef> images, PipelineTrace& trace) const;
  Rationale think(const Caption& caption, std::string_view question, PipelineTrace& trace) const;
  FinalAnswer rethink(const QaInstance& instance, const Rationale& rationale,
                      std::string_view rationale_slot, PipelineTrace& trace) const;

  PipelineTrace run_qa(const QaInstance& instance) const;
  PipelineTrace run_matrix(const MatrixIqInstance& instance) const;
  PipelineTrace run(const Instance& instance) const;

 private:
  Caption caption_one(const ImageRef& image, const PromptText& prompt, PipelineTrace& trace) const;

  RunConfig config_;
  BackendSet backends_;
  std::vector<Demonstration> demos_;
  std::string digest_;
};

/// Runs every instance with up to `concurrency` OpenMP threads. Output order
/// matches input order and equals run_dataset_serial's.
std::vector<PipelineTrace> run_dataset(const Pipeline& pipeline, std::span<const Instance> instances,
                                       int concurrency);
std::vector<PipelineTrace> run_dataset_serial(const Pipeline& pipeline,
                                              std::span<const Instance> instances);

}  // namespace tree
