#pragma once

// Loads the pinned prompt fixtures written by golden/make_golden.py.

#include <algorithm>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "fixture.hpp"
#include "tree/prompts.hpp"

namespace golden {

namespace fs = std::filesystem;

struct Case {
  std::string name;
  nlohmann::json inputs;
  std::string expected;
};

inline std::vector<Case> load(const std::string& template_id) {
  std::vector<Case> cases;
  const fs::path dir = fs::path(TREE_GOLDEN_DIR) / template_id;
  std::vector<fs::path> inputs;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.path().extension() == ".json") inputs.push_back(entry.path());
  }
  std::sort(inputs.begin(), inputs.end());
  for (const auto& path : inputs) {
    auto expected_path = path;
    expected_path.replace_extension(".txt");
    cases.push_back({template_id + "/" + path.stem().string(),
                     nlohmann::json::parse(fixture::read_file(path)), fixture::read_file(expected_path)});
  }
  return cases;
}

inline std::string render(const std::string& template_id, const nlohmann::json& in) {
  if (template_id == "thinking_qa") {
    std::vector<tree::Demonstration> demos;
    for (const auto& d : in.at("demonstrations")) {
      demos.push_back({d.at("caption"), d.at("question"), d.at("rationale"), d.at("answer")});
    }
    return tree::render_thinking_qa(in.at("caption").get<std::string>(), in.at("question").get<std::string>(),
                                    demos)
        .rendered;
  }
  if (template_id == "thinking_matrix") {
    const auto context = in.at("context").get<std::vector<std::string>>();
    return tree::render_thinking_matrix(context).rendered;
  }
  return tree::render_rethinking(in.at("question").get<std::string>(), in.at("rationale").get<std::string>())
      .rendered;
}

}  // namespace golden
