#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tree/core.hpp"

namespace tree {

enum class MetricKind { vqa_soft_accuracy, exact_match, multiple_choice };

std::string_view to_string(MetricKind kind);
std::optional<MetricKind> parse_metric_kind(std::string_view name);

/// `simple` is min(matches / 3, 1). `subset_averaged` averages that score over
/// every leave-one-annotator-out subset, as the official VQA evaluator does.
enum class VqaVariant { simple, subset_averaged };

std::string_view to_string(VqaVariant variant);
std::optional<VqaVariant> parse_vqa_variant(std::string_view name);

/// Lowercases, strips .,!?'" punctuation, drops the articles a/an/the, maps
/// zero..ten to digits and collapses whitespace.
std::string normalize_answer(std::string_view text);

double vqa_soft_accuracy(std::string_view pred, std::span<const GoldAnswer> gold,
                         VqaVariant variant = VqaVariant::simple);

int exact_match(std::string_view pred, std::string_view gold);

/// Token-level F1 between two already-normalized strings (whitespace tokens).
double token_f1(std::string_view a, std::string_view b);

/// Token F1 after answer normalization.
double text_similarity(std::string_view a, std::string_view b);

/// Index of the option matching `pred`: an exact normalized match wins
/// (lowest index), otherwise the best token F1 with ties to the lowest index.
std::size_t select_choice(std::string_view pred, std::span<const std::string> options);

struct EvalCounts {
  std::size_t evaluated = 0;
  std::size_t failed = 0;
  std::size_t skipped = 0;

  std::size_t total() const { return evaluated + failed + skipped; }
};

struct EvalReport {
  std::string dataset;
  MetricKind metric = MetricKind::vqa_soft_accuracy;
  std::optional<VqaVariant> vqa_variant;  // set when metric is vqa_soft_accuracy
  std::map<std::string, double> scores;   // instance id -> [0, 1]
  double aggregate = 0.0;                 // percentage
  EvalCounts counts;
};

struct ReportMetadata {
  std::string dataset;
  MetricKind metric = MetricKind::vqa_soft_accuracy;
  std::optional<VqaVariant> vqa_variant;
  std::size_t failed = 0;
  std::size_t skipped = 0;
};

/// `scores` holds evaluated instances only; failed and skipped instances are
/// counted through `metadata` and never enter the mean.
EvalReport aggregate(const std::map<std::string, double>& scores, const ReportMetadata& metadata);

/// One decimal place, e.g. 48.0.
std::string format_percent(double value);

/// An aligned text table: a label column followed by one column per header.
struct ReportTable {
  std::string label_header = "Model";
  std::vector<std::string> columns;
  struct Row {
    std::string label;
    std::vector<std::optional<double>> values;
  };
  std::vector<Row> rows;

  std::string render() const;
};

/// Scores one instance. nullopt when the instance carries no gold label.
std::optional<double> score_qa(const QaInstance& instance, const FinalAnswer& answer,
                               MetricKind metric, VqaVariant variant = VqaVariant::simple);

/// Metric picked for a QA instance when the dataset does not name one.
MetricKind default_metric(const QaInstance& instance);

/// Mean accuracy (percent) of uniform-random candidate selection, repeated
/// `repetitions` times over every task. Each task draws from its own stream
/// seeded from (seed, task index) so serial and parallel results agree.
double random_baseline_accuracy(std::span<const std::size_t> candidate_counts,
                                std::span<const std::size_t> gold_indices,
                                std::size_t repetitions, std::uint64_t seed);
double random_baseline_accuracy_serial(std::span<const std::size_t> candidate_counts,
                                       std::span<const std::size_t> gold_indices,
                                       std::size_t repetitions, std::uint64_t seed);

}  // namespace tree
