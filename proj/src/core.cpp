#include "tree/core.hpp"

#include <algorithm>
#include <cctype>

namespace tree {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::invalid_argument: return "invalid-argument";
    case ErrorKind::unsupported_arity: return "unsupported-arity";
    case ErrorKind::backend_unavailable: return "backend-unavailable";
    case ErrorKind::configuration: return "configuration";
    case ErrorKind::backend_protocol: return "backend-protocol";
    case ErrorKind::unscripted_prompt: return "unscripted-prompt";
    case ErrorKind::input_unavailable: return "input-unavailable";
    case ErrorKind::empty_caption: return "empty-caption";
    case ErrorKind::stage_failure: return "stage-failure";
    case ErrorKind::load_error: return "load-error";
    case ErrorKind::output_error: return "output-error";
    case ErrorKind::cache_corrupt: return "cache-corrupt";
    case ErrorKind::metric_undefined: return "metric-undefined";
    case ErrorKind::empty_report: return "empty-report";
  }
  return "unknown";
}

std::string_view to_string(Stage stage) {
  switch (stage) {
    case Stage::observe: return "observe";
    case Stage::think: return "think";
    case Stage::rethink: return "rethink";
  }
  return "unknown";
}

std::optional<Stage> parse_stage(std::string_view name) {
  if (name == "observe") return Stage::observe;
  if (name == "think") return Stage::think;
  if (name == "rethink") return Stage::rethink;
  return std::nullopt;
}

std::vector<GoldAnswer> fold_answers(const std::vector<std::string>& flat) {
  std::vector<GoldAnswer> folded;
  for (const auto& answer : flat) {
    auto it = std::find_if(folded.begin(), folded.end(),
                           [&](const GoldAnswer& g) { return g.text == answer; });
    if (it == folded.end()) {
      folded.push_back({answer, 1});
    } else {
      ++it->count;
    }
  }
  return folded;
}

const std::string& instance_id(const Instance& instance) {
  return std::visit([](const auto& i) -> const std::string& { return i.instance_id; }, instance);
}

bool is_hex_digest(std::string_view text) {
  return text.size() == 64 && std::all_of(text.begin(), text.end(), [](char c) {
           return (c >= '0' && c <= '9') || (c >= 'a' && c <= 'f');
         });
}

std::string trim(std::string_view text) {
  auto is_space = [](char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; };
  std::size_t begin = 0;
  std::size_t end = text.size();
  while (begin < end && is_space(text[begin])) ++begin;
  while (end > begin && is_space(text[end - 1])) --end;
  return std::string(text.substr(begin, end - begin));
}

std::string to_lower_ascii(std::string_view text) {
  std::string out(text);
  for (auto& c : out) {
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  }
  return out;
}

namespace {

void check_image(const ImageRef& image, const std::string& label,
                 std::vector<std::string>& violations) {
  if (image.id.empty()) violations.push_back(label + ": image id empty");
  if (image.locator.empty()) violations.push_back(label + ": image locator empty");
  if (image.content_digest && !is_hex_digest(*image.content_digest)) {
    violations.push_back(label + ": content digest is not 64 lowercase hex chars");
  }
}

}  // namespace

ValidationResult validate_instance(const QaInstance& instance) {
  ValidationResult result;
  auto& v = result.violations;
  if (instance.instance_id.empty()) v.push_back("instance id empty");
  check_image(instance.image, "image", v);
  if (instance.question.empty()) {
    v.push_back("question empty");
  } else if (trim(instance.question) != instance.question) {
    v.push_back("question has leading or trailing whitespace");
  }
  for (const auto& gold : instance.gold_answers) {
    if (gold.count < 1) v.push_back("gold answer count below 1: " + gold.text);
  }
  if (instance.gold_choice_index) {
    if (!instance.choices) {
      v.push_back("gold choice index without choices");
    } else if (*instance.gold_choice_index >= instance.choices->size()) {
      v.push_back("index out of bounds");
    }
  }
  return result;
}

ValidationResult validate_instance(const MatrixIqInstance& instance) {
  ValidationResult result;
  auto& v = result.violations;
  if (instance.instance_id.empty()) v.push_back("instance id empty");
  if (instance.context_images.empty()) {
    v.push_back("context empty");
  } else if (instance.context_images.size() < 2) {
    v.push_back("fewer than 2 context images");
  }
  if (instance.candidate_images.empty()) {
    v.push_back("candidates empty");
  } else if (instance.candidate_images.size() < 2) {
    v.push_back("fewer than 2 candidate images");
  }
  for (std::size_t i = 0; i < instance.context_images.size(); ++i) {
    check_image(instance.context_images[i], "context " + std::to_string(i), v);
  }
  for (std::size_t i = 0; i < instance.candidate_images.size(); ++i) {
    check_image(instance.candidate_images[i], "candidate " + std::to_string(i), v);
  }
  if (instance.gold_candidate_index &&
      *instance.gold_candidate_index >= instance.candidate_images.size()) {
    v.push_back("index out of bounds");
  }
  return result;
}

ValidationResult validate_instance(const Instance& instance) {
  return std::visit([](const auto& i) { return validate_instance(i); }, instance);
}

bool stage_order_holds(const PipelineTrace& trace) {
  int last = -1;
  int thinks = 0;
  int rethinks = 0;
  for (const auto& record : trace.records) {
    const int rank = static_cast<int>(record.stage);
    if (rank < last) return false;
    // Only observe may repeat.
    if (rank == last && record.stage != Stage::observe) return false;
    last = rank;
    if (record.stage == Stage::think) ++thinks;
    if (record.stage == Stage::rethink) ++rethinks;
  }
  if (thinks > 1 || rethinks > 1) return false;
  if (std::holds_alternative<QaInstance>(trace.instance) && trace.succeeded()) {
    return rethinks == 1;
  }
  if (std::holds_alternative<MatrixIqInstance>(trace.instance)) return rethinks == 0;
  return true;
}

}  // namespace tree
