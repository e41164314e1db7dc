#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "tree/error.hpp"

namespace tree {

struct ImageRef {
  std::string id;
  std::string locator;  // file path or URL
  std::optional<std::string> content_digest;  // 64 lowercase hex chars

  bool operator==(const ImageRef&) const = default;
};

/// One distinct gold answer with the number of annotators who gave it.
struct GoldAnswer {
  std::string text;
  int count = 1;

  bool operator==(const GoldAnswer&) const = default;
};

/// Folds a flat annotator list into (text, count) pairs, keeping first-seen order.
std::vector<GoldAnswer> fold_answers(const std::vector<std::string>& flat);

struct QaInstance {
  std::string instance_id;
  ImageRef image;
  std::string question;
  std::vector<GoldAnswer> gold_answers;  // empty for unlabeled runs
  std::optional<std::vector<std::string>> choices;
  std::optional<std::size_t> gold_choice_index;

  bool operator==(const QaInstance&) const = default;
};

struct MatrixIqInstance {
  std::string instance_id;
  std::vector<ImageRef> context_images;
  std::vector<ImageRef> candidate_images;
  std::optional<std::size_t> gold_candidate_index;

  bool operator==(const MatrixIqInstance&) const = default;
};

using Instance = std::variant<QaInstance, MatrixIqInstance>;

const std::string& instance_id(const Instance& instance);

struct Caption {
  std::string image_id;
  std::string text;
  std::string backend_id;

  bool operator==(const Caption&) const = default;
};

struct Rationale {
  std::string text;
  std::optional<std::string> extracted_answer;
  std::string raw_completion;
  // Set when the reasoner produced nothing usable and the fallback policy kept
  // the instance alive.
  bool degenerate = false;

  bool operator==(const Rationale&) const = default;
};

struct FinalAnswer {
  std::string raw;
  std::string normalized;
  std::optional<std::size_t> chosen_index;

  bool operator==(const FinalAnswer&) const = default;
};

enum class Stage { observe, think, rethink };

std::string_view to_string(Stage stage);
std::optional<Stage> parse_stage(std::string_view name);

struct PromptText {
  std::string template_id;
  std::map<std::string, std::string> filled_slots;
  std::string rendered;

  bool operator==(const PromptText&) const = default;
};

struct StageRecord {
  Stage stage = Stage::observe;
  PromptText prompt;
  std::string backend_id;
  std::optional<std::string> image_id;  // image the call was conditioned on
  std::string completion;
  bool cache_hit = false;
  std::int64_t latency_ms = 0;
  std::optional<std::string> error;  // set when the call or stage failed

  bool failed() const { return error.has_value(); }
  bool operator==(const StageRecord&) const = default;
};

struct StageFailure {
  std::string stage;  // "validate", "observe", "think" or "rethink"
  ErrorKind kind = ErrorKind::stage_failure;
  std::string message;

  bool operator==(const StageFailure&) const = default;
};

struct PipelineTrace {
  std::string instance_id;
  Instance instance;
  std::vector<StageRecord> records;
  std::vector<Caption> captions;
  std::optional<Rationale> rationale;
  std::optional<FinalAnswer> final;
  std::optional<StageFailure> failure;
  std::vector<std::string> flags;
  std::string config_digest;

  bool succeeded() const { return final.has_value() && !failure.has_value(); }
  bool operator==(const PipelineTrace&) const = default;
};

struct ValidationResult {
  std::vector<std::string> violations;

  bool ok() const { return violations.empty(); }
};

ValidationResult validate_instance(const QaInstance& instance);
ValidationResult validate_instance(const MatrixIqInstance& instance);
ValidationResult validate_instance(const Instance& instance);

/// Checks the record-ordering invariants of a trace (observe < think < rethink,
/// at most one think, at most one rethink, QA traces with a final answer carry
/// exactly one rethink record).
bool stage_order_holds(const PipelineTrace& trace);

bool is_hex_digest(std::string_view text);

// String helpers shared across modules.
std::string trim(std::string_view text);
std::string to_lower_ascii(std::string_view text);

}  // namespace tree
