#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>

namespace tree {

/// SHA-256 of `bytes` as 64 lowercase hex characters.
std::string sha256_hex(std::string_view bytes);

/// SHA-256 of a file's contents; nullopt when the file cannot be read.
std::optional<std::string> sha256_file(const std::filesystem::path& path);

std::string base64_encode(std::string_view bytes);

}  // namespace tree
