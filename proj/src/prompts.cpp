#include "tree/prompts.hpp"

#include <algorithm>
#include <cctype>
#include <array>
#include <set>

namespace tree {

std::string_view to_string(TemplateId id) {
  switch (id) {
    case TemplateId::thinking_qa: return "thinking_qa";
    case TemplateId::thinking_matrix: return "thinking_matrix";
    case TemplateId::rethinking_qa: return "rethinking_qa";
    case TemplateId::observation_caption: return "observation_caption";
  }
  return "unknown";
}

std::optional<TemplateId> parse_template_id(std::string_view name) {
  for (auto id : {TemplateId::thinking_qa, TemplateId::thinking_matrix, TemplateId::rethinking_qa,
                  TemplateId::observation_caption}) {
    if (to_string(id) == name) return id;
  }
  return std::nullopt;
}

PromptTemplate PromptTemplate::from_skeleton(TemplateId id, std::string_view skeleton) {
  PromptTemplate tmpl;
  tmpl.id_ = id;
  std::string literal;
  std::set<std::string> seen;
  auto flush = [&] {
    if (!literal.empty()) {
      tmpl.segments_.push_back({false, literal});
      literal.clear();
    }
  };
  for (std::size_t i = 0; i < skeleton.size(); ++i) {
    const char c = skeleton[i];
    if (c == '{' && i + 1 < skeleton.size() && skeleton[i + 1] == '{') {
      literal.push_back('{');
      ++i;
    } else if (c == '}' && i + 1 < skeleton.size() && skeleton[i + 1] == '}') {
      literal.push_back('}');
      ++i;
    } else if (c == '{') {
      const auto close = skeleton.find('}', i);
      if (close == std::string_view::npos) {
        throw Error(ErrorKind::invalid_argument, "unterminated slot in template skeleton");
      }
      std::string name(skeleton.substr(i + 1, close - i - 1));
      if (name.empty() || name.find('{') != std::string::npos) {
        throw Error(ErrorKind::invalid_argument, "malformed slot name in template skeleton");
      }
      if (!seen.insert(name).second) {
        throw Error(ErrorKind::invalid_argument, "duplicate slot name: " + name);
      }
      flush();
      tmpl.segments_.push_back({true, std::move(name)});
      i = close;
    } else if (c == '}') {
      throw Error(ErrorKind::invalid_argument, "unbalanced '}' in template skeleton");
    } else {
      literal.push_back(c);
    }
  }
  flush();
  return tmpl;
}

PromptTemplate PromptTemplate::from_file_text(std::string_view text) {
  constexpr std::string_view kPrefix = "id: ";
  const auto newline = text.find('\n');
  const auto header = text.substr(0, newline);
  if (!header.starts_with(kPrefix)) {
    throw Error(ErrorKind::invalid_argument, "template file must start with 'id: <template_id>'");
  }
  const auto id = parse_template_id(header.substr(kPrefix.size()));
  if (!id) {
    throw Error(ErrorKind::invalid_argument,
                "unknown template id: " + std::string(header.substr(kPrefix.size())));
  }
  const auto body = newline == std::string_view::npos ? std::string_view{} : text.substr(newline + 1);
  return from_skeleton(*id, body);
}

std::string PromptTemplate::to_file_text() const {
  return "id: " + std::string(to_string(id_)) + "\n" + skeleton();
}

std::vector<std::string> PromptTemplate::slot_names() const {
  std::vector<std::string> names;
  for (const auto& segment : segments_) {
    if (segment.is_slot) names.push_back(segment.text);
  }
  return names;
}

std::string PromptTemplate::skeleton() const {
  std::string out;
  for (const auto& segment : segments_) {
    if (segment.is_slot) {
      out += "{" + segment.text + "}";
      continue;
    }
    for (char c : segment.text) {
      if (c == '{' || c == '}') out.push_back(c);
      out.push_back(c);
    }
  }
  return out;
}

PromptText PromptTemplate::render(const std::map<std::string, std::string>& slots) const {
  PromptText prompt;
  prompt.template_id = std::string(to_string(id_));
  std::size_t used = 0;
  for (const auto& segment : segments_) {
    if (!segment.is_slot) {
      prompt.rendered += segment.text;
      continue;
    }
    const auto it = slots.find(segment.text);
    if (it == slots.end()) {
      throw Error(ErrorKind::invalid_argument, "missing value for slot '" + segment.text + "'");
    }
    prompt.rendered += it->second;
    ++used;
  }
  if (used != slots.size()) {
    throw Error(ErrorKind::invalid_argument,
                "unknown slot supplied to template " + prompt.template_id);
  }
  prompt.filled_slots = slots;
  return prompt;
}

const PromptTemplate& builtin_template(TemplateId id) {
  static const std::array<PromptTemplate, 4> templates = {
      PromptTemplate::from_skeleton(TemplateId::thinking_qa,
                                    "{demonstrations}Caption:{caption}\nQuestion:{question}\nAnswer:"),
      PromptTemplate::from_skeleton(
          TemplateId::thinking_matrix,
          "{context}Question: What does the next image look like?\nAnswer:The next picture is"),
      PromptTemplate::from_skeleton(TemplateId::rethinking_qa,
                                    "Question:{question}\tRationale:{rationale}\tAnswer:"),
      PromptTemplate::from_skeleton(TemplateId::observation_caption, "{instruction}"),
  };
  return templates[static_cast<std::size_t>(id)];
}

std::string render_demonstration(const Demonstration& demo) {
  return "Caption:" + demo.caption + "\nQuestion:" + demo.question + "\nAnswer:" + demo.rationale +
         ". " + std::string(kAnswerMarker) + " " + demo.answer;
}

PromptText render_thinking_qa(std::string_view caption, std::string_view question,
                              std::span<const Demonstration> demos) {
  if (caption.empty()) throw Error(ErrorKind::invalid_argument, "thinking prompt: caption is empty");
  if (question.empty()) throw Error(ErrorKind::invalid_argument, "thinking prompt: question is empty");
  std::string demonstrations;
  for (const auto& demo : demos) {
    if (demo.caption.empty() || demo.question.empty() || demo.rationale.empty() ||
        demo.answer.empty()) {
      throw Error(ErrorKind::invalid_argument, "demonstration has an empty field");
    }
    demonstrations += render_demonstration(demo);
    demonstrations += "\n\n";
  }
  return builtin_template(TemplateId::thinking_qa)
      .render({{"demonstrations", std::move(demonstrations)},
               {"caption", std::string(caption)},
               {"question", std::string(question)}});
}

PromptText render_thinking_matrix(std::span<const std::string> context_captions) {
  static constexpr std::array<std::string_view, kMaxMatrixContext> kOrdinals = {
      "first", "second", "third", "fourth", "fifth",
      "sixth", "seventh", "eighth", "ninth", "tenth"};
  if (context_captions.size() < 2) {
    throw Error(ErrorKind::invalid_argument, "matrix prompt needs at least 2 context captions");
  }
  if (context_captions.size() > kMaxMatrixContext) {
    throw Error(ErrorKind::unsupported_arity,
                "matrix prompt supports at most 10 context captions, got " +
                    std::to_string(context_captions.size()));
  }
  std::string context;
  for (std::size_t i = 0; i < context_captions.size(); ++i) {
    if (context_captions[i].empty()) {
      throw Error(ErrorKind::invalid_argument, "matrix prompt: context caption is empty");
    }
    context += "The " + std::string(kOrdinals[i]) + " picture is " + context_captions[i] + ".\n";
  }
  return builtin_template(TemplateId::thinking_matrix).render({{"context", std::move(context)}});
}

PromptText render_rethinking(std::string_view question, std::string_view rationale) {
  if (question.empty()) throw Error(ErrorKind::invalid_argument, "rethinking prompt: question is empty");
  if (rationale.empty()) {
    throw Error(ErrorKind::invalid_argument, "rethinking prompt: rationale is empty");
  }
  return builtin_template(TemplateId::rethinking_qa)
      .render({{"question", std::string(question)}, {"rationale", std::string(rationale)}});
}

PromptText render_observation(std::string_view instruction) {
  return builtin_template(TemplateId::observation_caption)
      .render({{"instruction", std::string(instruction)}});
}

namespace {

std::string trim_rationale_tail(std::string_view text) {
  std::string out = trim(text);
  // Connective punctuation before the marker ("stripes, so the answer is").
  while (!out.empty() && (out.back() == ',' || out.back() == ';' || out.back() == ':' ||
                          std::isspace(static_cast<unsigned char>(out.back())))) {
    out.pop_back();
  }
  // Keep a single sentence-final period.
  while (out.size() >= 2 && out.back() == '.' && out[out.size() - 2] == '.') out.pop_back();
  return out;
}

}  // namespace

Extraction extract_answer(std::string_view completion) {
  static const std::string kMarkerLower = to_lower_ascii(kAnswerMarker);
  const std::string lowered = to_lower_ascii(completion);
  const auto pos = lowered.rfind(kMarkerLower);
  if (pos == std::string::npos) return {trim(completion), std::nullopt};

  Extraction result;
  result.rationale = trim_rationale_tail(completion.substr(0, pos));
  std::string answer = trim(completion.substr(pos + kMarkerLower.size()));
  if (!answer.empty() && answer.back() == '.') {
    answer.pop_back();
    answer = trim(answer);
  }
  if (!answer.empty()) result.answer = std::move(answer);
  return result;
}

}  // namespace tree
