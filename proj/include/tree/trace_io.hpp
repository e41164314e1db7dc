#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "tree/core.hpp"

namespace tree {

using ordered_json = nlohmann::ordered_json;

ordered_json to_json(const ImageRef& image);
ordered_json to_json(const Instance& instance);
ordered_json to_json(const PipelineTrace& trace);

ImageRef image_from_json(const ordered_json& j);
Instance instance_from_json(const ordered_json& j);
PipelineTrace trace_from_json(const ordered_json& j);

/// Pretty-printed JSON with a trailing newline; byte-stable for equal traces.
std::string serialize_trace(const PipelineTrace& trace);
PipelineTrace parse_trace(std::string_view text);

/// File name used for a trace inside a trace directory.
std::string trace_file_name(std::string_view instance_id);

void write_trace_file(const std::filesystem::path& dir, const PipelineTrace& trace);
PipelineTrace read_trace_file(const std::filesystem::path& path);

/// Every *.json trace under `dir` (recursively), ordered by path.
std::vector<PipelineTrace> read_trace_dir(const std::filesystem::path& dir);

}  // namespace tree
