#pragma once

// Reader for the TOML subset used by pipeline config files: [tables] and
// [dotted.tables], key = value pairs, basic and literal strings, integers,
// floats, booleans, and (nested, possibly multi-line) arrays. Inline tables,
// dates, and multi-line strings are rejected.

#include <filesystem>
#include <stdexcept>
#include <string_view>

#include <json.hpp>

namespace msdf {

class TomlError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

nlohmann::json parse_toml(std::string_view text);
nlohmann::json load_toml(const std::filesystem::path& path);

}  // namespace msdf
