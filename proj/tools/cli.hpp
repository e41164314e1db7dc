#pragma once

#include <filesystem>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tree/datasets.hpp"
#include "tree/evaluation.hpp"
#include "tree/pipeline.hpp"

namespace tree::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitPartial = 2;

struct DatasetSpec {
  DatasetManifest manifest;
  std::optional<MetricKind> metric;
};

struct CliConfig {
  RunConfig run;
  std::vector<DatasetSpec> datasets;
  VqaVariant vqa_variant = VqaVariant::simple;
};

/// Parses the TOML run configuration. Relative paths resolve against `base_dir`.
CliConfig parse_config(std::string_view toml_text, const std::filesystem::path& base_dir);
CliConfig load_config(const std::filesystem::path& path);

/// Scores a set of traces. The metric defaults to the dataset format's
/// convention when `metric` is unset.
EvalReport evaluate_traces(std::span<const PipelineTrace> traces, const std::string& dataset,
                           std::optional<MetricKind> metric, VqaVariant variant,
                           std::optional<DatasetFormat> format = std::nullopt);

/// Report as machine-readable JSON (scores, counts, aggregate, metric names).
std::string report_json(const std::string& label, std::span<const EvalReport> reports);

/// Entry point shared by the executable and in-process tests. `args` excludes
/// the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace tree::cli
