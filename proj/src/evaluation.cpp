#include "tree/evaluation.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdio>
#include <random>
#include <sstream>
#include <unordered_map>

namespace tree {

std::string_view to_string(MetricKind kind) {
  switch (kind) {
    case MetricKind::vqa_soft_accuracy: return "vqa_soft_accuracy";
    case MetricKind::exact_match: return "exact_match";
    case MetricKind::multiple_choice: return "multiple_choice";
  }
  return "unknown";
}

std::optional<MetricKind> parse_metric_kind(std::string_view name) {
  for (auto kind : {MetricKind::vqa_soft_accuracy, MetricKind::exact_match,
                    MetricKind::multiple_choice}) {
    if (to_string(kind) == name) return kind;
  }
  return std::nullopt;
}

std::string_view to_string(VqaVariant variant) {
  return variant == VqaVariant::simple ? "simple" : "subset_averaged";
}

std::optional<VqaVariant> parse_vqa_variant(std::string_view name) {
  if (name == "simple") return VqaVariant::simple;
  if (name == "subset_averaged") return VqaVariant::subset_averaged;
  return std::nullopt;
}

namespace {

std::vector<std::string_view> split_ws(std::string_view text) {
  std::vector<std::string_view> tokens;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && text[i] == ' ') ++i;
    const auto start = i;
    while (i < text.size() && text[i] != ' ') ++i;
    if (i > start) tokens.push_back(text.substr(start, i - start));
  }
  return tokens;
}

bool is_stripped_punct(char c) {
  return c == '.' || c == ',' || c == '!' || c == '?' || c == '\'' || c == '"';
}

}  // namespace

std::string normalize_answer(std::string_view text) {
  static const std::unordered_map<std::string_view, std::string_view> kNumbers = {
      {"zero", "0"}, {"one", "1"}, {"two", "2"},   {"three", "3"}, {"four", "4"}, {"five", "5"},
      {"six", "6"},  {"seven", "7"}, {"eight", "8"}, {"nine", "9"},  {"ten", "10"}};
  std::string cleaned;
  cleaned.reserve(text.size());
  for (char c : to_lower_ascii(text)) {
    if (is_stripped_punct(c)) continue;
    cleaned.push_back(std::isspace(static_cast<unsigned char>(c)) ? ' ' : c);
  }
  std::string out;
  for (auto token : split_ws(cleaned)) {
    if (token == "a" || token == "an" || token == "the") continue;
    if (const auto it = kNumbers.find(token); it != kNumbers.end()) token = it->second;
    if (!out.empty()) out.push_back(' ');
    out.append(token);
  }
  return out;
}

double vqa_soft_accuracy(std::string_view pred, std::span<const GoldAnswer> gold,
                         VqaVariant variant) {
  if (gold.empty()) throw Error(ErrorKind::metric_undefined, "vqa accuracy needs gold answers");
  const auto normalized = normalize_answer(pred);
  int matches = 0;
  int annotators = 0;
  for (const auto& g : gold) {
    annotators += g.count;
    if (normalize_answer(g.text) == normalized) matches += g.count;
  }
  auto capped = [](int m) { return std::min(static_cast<double>(m) / 3.0, 1.0); };
  if (variant == VqaVariant::simple) return capped(matches);
  // Leaving out a matching annotator removes one match; leaving out any other
  // annotator keeps all of them.
  const double total = matches * capped(matches - 1) + (annotators - matches) * capped(matches);
  return total / annotators;
}

int exact_match(std::string_view pred, std::string_view gold) {
  return normalize_answer(pred) == normalize_answer(gold) ? 1 : 0;
}

double token_f1(std::string_view a, std::string_view b) {
  const auto ta = split_ws(a);
  const auto tb = split_ws(b);
  if (ta.empty() || tb.empty()) return ta.empty() && tb.empty() ? 1.0 : 0.0;
  std::unordered_map<std::string_view, int> counts;
  for (auto t : tb) ++counts[t];
  int common = 0;
  for (auto t : ta) {
    if (auto it = counts.find(t); it != counts.end() && it->second > 0) {
      --it->second;
      ++common;
    }
  }
  if (common == 0) return 0.0;
  const double precision = static_cast<double>(common) / ta.size();
  const double recall = static_cast<double>(common) / tb.size();
  return 2.0 * precision * recall / (precision + recall);
}

double text_similarity(std::string_view a, std::string_view b) {
  return token_f1(normalize_answer(a), normalize_answer(b));
}

std::size_t select_choice(std::string_view pred, std::span<const std::string> options) {
  if (options.empty()) throw Error(ErrorKind::invalid_argument, "select_choice needs options");
  const auto normalized = normalize_answer(pred);
  std::vector<std::string> normalized_options;
  normalized_options.reserve(options.size());
  for (const auto& option : options) normalized_options.push_back(normalize_answer(option));
  for (std::size_t i = 0; i < options.size(); ++i) {
    if (normalized_options[i] == normalized) return i;
  }
  std::size_t best = 0;
  double best_score = -1.0;
  for (std::size_t i = 0; i < options.size(); ++i) {
    const double score = token_f1(normalized, normalized_options[i]);
    if (score > best_score) {
      best_score = score;
      best = i;
    }
  }
  return best;
}

EvalReport aggregate(const std::map<std::string, double>& scores, const ReportMetadata& metadata) {
  if (scores.empty()) {
    throw Error(ErrorKind::empty_report, "no evaluated instances for dataset " + metadata.dataset);
  }
  EvalReport report;
  report.dataset = metadata.dataset;
  report.metric = metadata.metric;
  report.vqa_variant = metadata.vqa_variant;
  report.scores = scores;
  double sum = 0.0;
  for (const auto& [id, score] : scores) {
    if (!(score >= 0.0 && score <= 1.0)) {
      throw Error(ErrorKind::invalid_argument, "score out of [0,1] for instance " + id);
    }
    sum += score;
  }
  report.aggregate = 100.0 * sum / static_cast<double>(scores.size());
  report.counts = {scores.size(), metadata.failed, metadata.skipped};
  return report;
}

std::string format_percent(double value) {
  std::array<char, 64> buf{};
  std::snprintf(buf.data(), buf.size(), "%.1f", value);
  return buf.data();
}

std::string ReportTable::render() const {
  std::vector<std::vector<std::string>> cells;
  std::vector<std::string> header{label_header};
  header.insert(header.end(), columns.begin(), columns.end());
  cells.push_back(header);
  for (const auto& row : rows) {
    std::vector<std::string> line{row.label};
    for (std::size_t c = 0; c < columns.size(); ++c) {
      const bool present = c < row.values.size() && row.values[c].has_value();
      line.push_back(present ? format_percent(*row.values[c]) : "-");
    }
    cells.push_back(std::move(line));
  }
  std::vector<std::size_t> widths(header.size(), 0);
  for (const auto& line : cells) {
    for (std::size_t c = 0; c < line.size(); ++c) widths[c] = std::max(widths[c], line[c].size());
  }
  auto rule = [&] {
    std::string r;
    for (std::size_t c = 0; c < widths.size(); ++c) {
      r += std::string(widths[c] + 2, '-');
      if (c + 1 < widths.size()) r += "+";
    }
    return r + "\n";
  };
  std::ostringstream out;
  for (std::size_t r = 0; r < cells.size(); ++r) {
    const auto& line = cells[r];
    for (std::size_t c = 0; c < line.size(); ++c) {
      // Label column left-aligned, numbers right-aligned.
      const auto pad = std::string(widths[c] - line[c].size(), ' ');
      out << ' ' << (c == 0 ? line[c] + pad : pad + line[c]) << ' ';
      if (c + 1 < line.size()) out << '|';
    }
    out << '\n';
    if (r == 0) out << rule();
  }
  return out.str();
}

MetricKind default_metric(const QaInstance& instance) {
  if (instance.choices && instance.gold_choice_index) return MetricKind::multiple_choice;
  return MetricKind::vqa_soft_accuracy;
}

std::optional<double> score_qa(const QaInstance& instance, const FinalAnswer& answer,
                               MetricKind metric, VqaVariant variant) {
  switch (metric) {
    case MetricKind::multiple_choice: {
      if (!instance.choices || !instance.gold_choice_index) return std::nullopt;
      const auto chosen =
          answer.chosen_index ? *answer.chosen_index : select_choice(answer.raw, *instance.choices);
      return chosen == *instance.gold_choice_index ? 1.0 : 0.0;
    }
    case MetricKind::exact_match: {
      if (instance.gold_answers.empty()) return std::nullopt;
      const auto top = std::max_element(
          instance.gold_answers.begin(), instance.gold_answers.end(),
          [](const GoldAnswer& a, const GoldAnswer& b) { return a.count < b.count; });
      return static_cast<double>(exact_match(answer.raw, top->text));
    }
    case MetricKind::vqa_soft_accuracy:
      if (instance.gold_answers.empty()) return std::nullopt;
      return vqa_soft_accuracy(answer.raw, instance.gold_answers, variant);
  }
  return std::nullopt;
}

namespace {

std::size_t count_random_hits(std::size_t candidates, std::size_t gold, std::size_t task,
                              std::size_t repetitions, std::uint64_t seed) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(task), static_cast<std::uint32_t>(task >> 32)};
  std::mt19937_64 rng(seq);
  std::uniform_int_distribution<std::size_t> pick(0, candidates - 1);
  std::size_t hits = 0;
  for (std::size_t r = 0; r < repetitions; ++r) {
    if (pick(rng) == gold) ++hits;
  }
  return hits;
}

void check_baseline_inputs(std::span<const std::size_t> candidate_counts,
                           std::span<const std::size_t> gold_indices, std::size_t repetitions) {
  if (candidate_counts.size() != gold_indices.size()) {
    throw Error(ErrorKind::invalid_argument, "random baseline: counts and gold indices differ in length");
  }
  if (candidate_counts.empty() || repetitions == 0) {
    throw Error(ErrorKind::empty_report, "random baseline: no trials");
  }
  for (std::size_t t = 0; t < candidate_counts.size(); ++t) {
    if (candidate_counts[t] == 0 || gold_indices[t] >= candidate_counts[t]) {
      throw Error(ErrorKind::invalid_argument, "random baseline: gold index out of bounds");
    }
  }
}

}  // namespace

double random_baseline_accuracy_serial(std::span<const std::size_t> candidate_counts,
                                       std::span<const std::size_t> gold_indices,
                                       std::size_t repetitions, std::uint64_t seed) {
  check_baseline_inputs(candidate_counts, gold_indices, repetitions);
  std::size_t hits = 0;
  for (std::size_t t = 0; t < candidate_counts.size(); ++t) {
    hits += count_random_hits(candidate_counts[t], gold_indices[t], t, repetitions, seed);
  }
  return 100.0 * static_cast<double>(hits) /
         static_cast<double>(candidate_counts.size() * repetitions);
}

double random_baseline_accuracy(std::span<const std::size_t> candidate_counts,
                                std::span<const std::size_t> gold_indices,
                                std::size_t repetitions, std::uint64_t seed) {
  check_baseline_inputs(candidate_counts, gold_indices, repetitions);
  const auto tasks = static_cast<std::int64_t>(candidate_counts.size());
  std::size_t hits = 0;
#pragma omp parallel for schedule(static) reduction(+ : hits)
  for (std::int64_t t = 0; t < tasks; ++t) {
    const auto task = static_cast<std::size_t>(t);
    hits += count_random_hits(candidate_counts[task], gold_indices[task], task, repetitions, seed);
  }
  return 100.0 * static_cast<double>(hits) /
         static_cast<double>(candidate_counts.size() * repetitions);
}

}  // namespace tree
