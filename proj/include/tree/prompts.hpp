#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tree/core.hpp"

namespace tree {

enum class TemplateId { thinking_qa, thinking_matrix, rethinking_qa, observation_caption };

std::string_view to_string(TemplateId id);
std::optional<TemplateId> parse_template_id(std::string_view name);

/// A literal/slot skeleton. Slots are written `{name}` in skeleton text;
/// `{{` and `}}` stand for literal braces.
class PromptTemplate {
 public:
  struct Segment {
    bool is_slot = false;
    std::string text;  // literal text or slot name
  };

  static PromptTemplate from_skeleton(TemplateId id, std::string_view skeleton);

  /// Parses the template file format: a first line `id: <template_id>`
  /// followed by the skeleton (everything after that newline, verbatim).
  static PromptTemplate from_file_text(std::string_view text);
  std::string to_file_text() const;

  TemplateId id() const { return id_; }
  const std::vector<Segment>& segments() const { return segments_; }
  std::vector<std::string> slot_names() const;
  std::string skeleton() const;

  /// Fills every slot. Missing or unknown slot names are invalid-argument.
  PromptText render(const std::map<std::string, std::string>& slots) const;

 private:
  TemplateId id_ = TemplateId::thinking_qa;
  std::vector<Segment> segments_;
};

const PromptTemplate& builtin_template(TemplateId id);

struct Demonstration {
  std::string caption;
  std::string question;
  std::string rationale;
  std::string answer;
};

/// The marker completions use to separate the rationale from the answer.
inline constexpr std::string_view kAnswerMarker = "So the answer is";

inline constexpr std::size_t kMaxMatrixContext = 10;

PromptText render_thinking_qa(std::string_view caption, std::string_view question,
                              std::span<const Demonstration> demos);
PromptText render_thinking_matrix(std::span<const std::string> context_captions);
PromptText render_rethinking(std::string_view question, std::string_view rationale);
PromptText render_observation(std::string_view instruction = {});

/// Renders one demonstration block (no separators).
std::string render_demonstration(const Demonstration& demo);

struct Extraction {
  std::string rationale;
  std::optional<std::string> answer;

  bool operator==(const Extraction&) const = default;
};

/// Splits a completion at the last case-insensitive answer marker.
Extraction extract_answer(std::string_view completion);

}  // namespace tree
