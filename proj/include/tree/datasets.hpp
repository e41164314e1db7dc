#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tree/core.hpp"

namespace tree {

enum class DatasetFormat { vqa_v2, okvqa, gqa, aokvqa, unified_jsonl, matrix_dir };

std::string_view to_string(DatasetFormat format);
std::optional<DatasetFormat> parse_dataset_format(std::string_view name);

struct DatasetManifest {
  std::string name;
  DatasetFormat format = DatasetFormat::unified_jsonl;
  std::filesystem::path root;
  std::string split = "val";
  std::optional<std::size_t> limit;
  std::optional<std::uint64_t> seed;
};

template <typename T>
struct LoadResult {
  std::vector<T> instances;
  std::vector<std::string> warnings;
};

/// Loads a QA corpus sorted by instance id. With a limit, a seeded subsample
/// (default seed 0) is drawn and then re-sorted.
LoadResult<QaInstance> load_qa(const DatasetManifest& manifest);

/// Loads every task directory under `manifest.root`: context images c<N>.*,
/// candidate images a<N>.* (ordered by N) and an optional answer.txt holding
/// the 1-based index of the correct candidate.
LoadResult<MatrixIqInstance> load_matrix(const DatasetManifest& manifest);

/// Indices of a reproducible `limit`-element subsample of `size` items.
std::vector<std::size_t> subsample_indices(std::size_t size, std::size_t limit, std::uint64_t seed);

struct RationaleRecord {
  std::string id;
  std::string image;
  std::string question;
  std::string caption;
  std::string rationale;
  std::string answer;
  std::optional<double> score;

  bool operator==(const RationaleRecord&) const = default;
};

std::string to_jsonl_line(const RationaleRecord& record);
RationaleRecord parse_rationale_record(std::string_view line);

struct ExportResult {
  std::size_t written = 0;
  std::size_t skipped = 0;
};

/// One line per QA trace that completed every stage with a real rationale.
/// `scores` optionally supplies per-instance scores by instance id.
ExportResult export_rationales(std::span<const PipelineTrace> traces, std::ostream& out,
                               const std::map<std::string, double>& scores = {});
ExportResult export_rationales(std::span<const PipelineTrace> traces,
                               const std::filesystem::path& path,
                               const std::map<std::string, double>& scores = {});

/// The record a successful trace exports, or nullopt when it is skipped.
std::optional<RationaleRecord> rationale_record(const PipelineTrace& trace,
                                                std::optional<double> score = std::nullopt);

}  // namespace tree
