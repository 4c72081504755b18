#include "msdf/toml_lite.hpp"

#include <cctype>
#include <fstream>
#include <sstream>
#include <string>

namespace msdf {
namespace {

class Parser {
 public:
  explicit Parser(std::string_view text) : s_(text) {}

  nlohmann::json run() {
    nlohmann::json root = nlohmann::json::object();
    nlohmann::json* table = &root;
    while (true) {
      skip_ws_comments_newlines();
      if (eof()) break;
      if (peek() == '[') {
        ++pos_;
        skip_inline_ws();
        auto path = parse_key_path(']');
        expect(']');
        table = &root;
        for (const auto& part : path) {
          auto& next = (*table)[part];
          if (next.is_null()) next = nlohmann::json::object();
          if (!next.is_object()) fail("key '" + part + "' is not a table");
          table = &next;
        }
      } else {
        auto path = parse_key_path('=');
        expect('=');
        skip_inline_ws();
        nlohmann::json value = parse_value();
        nlohmann::json* target = table;
        for (std::size_t i = 0; i + 1 < path.size(); ++i) {
          auto& next = (*target)[path[i]];
          if (next.is_null()) next = nlohmann::json::object();
          target = &next;
        }
        if (target->contains(path.back())) fail("duplicate key '" + path.back() + "'");
        (*target)[path.back()] = std::move(value);
      }
      skip_inline_ws();
      if (!eof() && peek() == '#') skip_comment();
      if (!eof() && peek() != '\n' && peek() != '\r') fail("expected end of line");
    }
    return root;
  }

 private:
  std::string_view s_;
  std::size_t pos_ = 0;
  std::size_t line_ = 1;

  bool eof() const { return pos_ >= s_.size(); }
  char peek() const { return s_[pos_]; }

  [[noreturn]] void fail(const std::string& what) const {
    throw TomlError("toml line " + std::to_string(line_) + ": " + what);
  }

  void expect(char c) {
    skip_inline_ws();
    if (eof() || peek() != c) fail(std::string("expected '") + c + "'");
    ++pos_;
  }

  void skip_inline_ws() {
    while (!eof() && (peek() == ' ' || peek() == '\t')) ++pos_;
  }

  void skip_comment() {
    while (!eof() && peek() != '\n') ++pos_;
  }

  void skip_ws_comments_newlines() {
    while (!eof()) {
      const char c = peek();
      if (c == '\n') {
        ++line_;
        ++pos_;
      } else if (c == ' ' || c == '\t' || c == '\r') {
        ++pos_;
      } else if (c == '#') {
        skip_comment();
      } else {
        break;
      }
    }
  }

  std::vector<std::string> parse_key_path(char terminator) {
    std::vector<std::string> parts;
    while (true) {
      skip_inline_ws();
      if (eof()) fail("unexpected end of input in key");
      std::string part;
      if (peek() == '"' || peek() == '\'') {
        part = parse_string();
      } else {
        while (!eof() && (std::isalnum(static_cast<unsigned char>(peek())) || peek() == '_' ||
                          peek() == '-')) {
          part += peek();
          ++pos_;
        }
      }
      if (part.empty()) fail("empty key");
      parts.push_back(part);
      skip_inline_ws();
      if (!eof() && peek() == '.') {
        ++pos_;
        continue;
      }
      if (eof() || peek() != terminator) fail(std::string("expected '") + terminator + "'");
      return parts;
    }
  }

  std::string parse_string() {
    const char quote = peek();
    ++pos_;
    std::string out;
    while (true) {
      if (eof() || peek() == '\n') fail("unterminated string");
      char c = peek();
      ++pos_;
      if (c == quote) break;
      if (c == '\\' && quote == '"') {
        if (eof()) fail("dangling escape");
        const char e = peek();
        ++pos_;
        switch (e) {
          case 'n': out += '\n'; break;
          case 't': out += '\t'; break;
          case 'r': out += '\r'; break;
          case '\\': out += '\\'; break;
          case '"': out += '"'; break;
          case 'u': {
            if (pos_ + 4 > s_.size()) fail("short \\u escape");
            const unsigned cp = std::stoul(std::string(s_.substr(pos_, 4)), nullptr, 16);
            pos_ += 4;
            append_utf8(out, cp);
            break;
          }
          default: fail(std::string("unknown escape \\") + e);
        }
        continue;
      }
      out += c;
    }
    return out;
  }

  static void append_utf8(std::string& out, unsigned cp) {
    if (cp < 0x80) {
      out += static_cast<char>(cp);
    } else if (cp < 0x800) {
      out += static_cast<char>(0xC0 | (cp >> 6));
      out += static_cast<char>(0x80 | (cp & 0x3F));
    } else {
      out += static_cast<char>(0xE0 | (cp >> 12));
      out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
      out += static_cast<char>(0x80 | (cp & 0x3F));
    }
  }

  nlohmann::json parse_value() {
    if (eof()) fail("missing value");
    const char c = peek();
    if (c == '"' || c == '\'') {
      if (s_.substr(pos_, 3) == "\"\"\"" || s_.substr(pos_, 3) == "'''") {
        fail("multi-line strings are not supported");
      }
      return parse_string();
    }
    if (c == '[') return parse_array();
    if (c == '{') fail("inline tables are not supported");
    std::string word;
    while (!eof() && peek() != ',' && peek() != ']' && peek() != '#' && peek() != '\n' &&
           peek() != ' ' && peek() != '\t' && peek() != '\r') {
      word += peek();
      ++pos_;
    }
    if (word == "true") return true;
    if (word == "false") return false;
    std::string clean;
    for (char ch : word) {
      if (ch != '_') clean += ch;
    }
    try {
      std::size_t used = 0;
      if (clean.find_first_of(".eE") == std::string::npos) {
        const long long v = std::stoll(clean, &used);
        if (used == clean.size()) return v;
      } else {
        const double v = std::stod(clean, &used);
        if (used == clean.size()) return v;
      }
    } catch (const std::exception&) {
    }
    fail("cannot parse value '" + word + "'");
  }

  nlohmann::json parse_array() {
    ++pos_;
    nlohmann::json arr = nlohmann::json::array();
    while (true) {
      skip_ws_comments_newlines();
      if (eof()) fail("unterminated array");
      if (peek() == ']') {
        ++pos_;
        return arr;
      }
      arr.push_back(parse_value());
      skip_ws_comments_newlines();
      if (eof()) fail("unterminated array");
      if (peek() == ',') {
        ++pos_;
        continue;
      }
      if (peek() != ']') fail("expected ',' or ']' in array");
    }
  }
};

}  // namespace

nlohmann::json parse_toml(std::string_view text) { return Parser(text).run(); }

nlohmann::json load_toml(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw TomlError("cannot open " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_toml(ss.str());
}

}  // namespace msdf
