#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

namespace msdf {

// Reserved tokens occupy ids 0..kNumReserved-1 in this order.
namespace tok {
inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kUnk = 3;
inline constexpr int kCls = 4;
inline constexpr int kSep = 5;
inline constexpr int kSpeaker1 = 6;
inline constexpr int kSpeaker2 = 7;
inline constexpr int kGoal = 8;
inline constexpr int kUname = 9;
inline constexpr int kMovie1 = 10;
inline constexpr int kMovie2 = 11;
inline constexpr int kStar1 = 12;
inline constexpr int kStar2 = 13;
inline constexpr int kNumReserved = 14;

inline constexpr std::array<std::string_view, kNumReserved> kReserved = {
    "[PAD]",      "[BOS]",      "[EOS]", "[UNK]",   "[CLS]",    "[SEP]",    "[speaker1]",
    "[speaker2]", "[goal]",     "[uname]", "[movie1]", "[movie2]", "[star1]", "[star2]"};

inline constexpr std::string_view kSepText = "[SEP]";
inline constexpr std::string_view kGoalText = "[goal]";
inline constexpr std::string_view kUnameText = "[uname]";
inline constexpr std::string_view kSpeaker1Text = "[speaker1]";
inline constexpr std::string_view kSpeaker2Text = "[speaker2]";
}  // namespace tok

// UTF-8 helpers. Invalid bytes are treated as single-byte code units.
std::size_t utf8_char_len(unsigned char lead);
std::vector<std::string> utf8_chars(std::string_view text);
std::size_t utf8_length(std::string_view text);

// Splits text into model tokens: reserved tokens (longest match first), runs
// of ASCII word characters [A-Za-z0-9_], and every other code point on its
// own (including spaces). A single space between two ASCII words is implied
// by the word boundary and not emitted, so join_tokens(split_tokens(s)) == s
// for any s.
std::vector<std::string> split_tokens(std::string_view text);
std::string join_tokens(std::span<const std::string> tokens);
bool is_ascii_word(std::string_view token);
bool is_reserved(std::string_view token);

class Vocab {
 public:
  Vocab();  // reserved tokens only

  // Reserved block first, then tokens by descending frequency (ties broken by
  // byte order), up to max_size entries in total.
  static Vocab build(std::span<const std::string> texts, std::size_t max_size,
                     std::size_t min_count = 1);

  std::size_t size() const { return tokens_.size(); }
  int id(std::string_view token) const;  // kUnk when absent
  bool contains(std::string_view token) const;
  const std::string& token(int id) const;
  // Appends a token when absent; returns its id.
  int add(std::string_view token);

  std::vector<int> encode(std::string_view text) const;
  // skip_control drops every reserved token except placeholders ([uname],
  // [movie*], [star*]) and [goal], which postprocessing resolves.
  std::string decode(std::span<const int> ids, bool skip_control = false) const;

  nlohmann::json to_json() const;
  static Vocab from_json(const nlohmann::json& j);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace msdf
