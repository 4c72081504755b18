#include "msdf/vocab.hpp"

#include <algorithm>
#include <map>
#include <stdexcept>

namespace msdf {

std::size_t utf8_char_len(unsigned char lead) {
  if (lead < 0x80) return 1;
  if ((lead >> 5) == 0x6) return 2;
  if ((lead >> 4) == 0xE) return 3;
  if ((lead >> 3) == 0x1E) return 4;
  return 1;
}

std::vector<std::string> utf8_chars(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const std::size_t n =
        std::min(utf8_char_len(static_cast<unsigned char>(text[i])), text.size() - i);
    out.emplace_back(text.substr(i, n));
    i += n;
  }
  return out;
}

std::size_t utf8_length(std::string_view text) {
  std::size_t count = 0;
  for (std::size_t i = 0; i < text.size();) {
    i += std::min(utf8_char_len(static_cast<unsigned char>(text[i])), text.size() - i);
    ++count;
  }
  return count;
}

namespace {

bool word_char(char c) {
  return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') ||
         c == '_';
}

// Reserved strings sorted by decreasing length for longest-first matching.
const std::vector<std::string_view>& reserved_by_length() {
  static const std::vector<std::string_view> sorted = [] {
    std::vector<std::string_view> v(tok::kReserved.begin(), tok::kReserved.end());
    std::stable_sort(v.begin(), v.end(),
                     [](auto a, auto b) { return a.size() > b.size(); });
    return v;
  }();
  return sorted;
}

}  // namespace

bool is_ascii_word(std::string_view token) {
  return !token.empty() && std::all_of(token.begin(), token.end(), word_char);
}

bool is_reserved(std::string_view token) {
  return std::find(tok::kReserved.begin(), tok::kReserved.end(), token) !=
         tok::kReserved.end();
}

std::vector<std::string> split_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    if (text[i] == '[') {
      bool matched = false;
      for (auto r : reserved_by_length()) {
        if (text.substr(i, r.size()) == r) {
          out.emplace_back(r);
          i += r.size();
          matched = true;
          break;
        }
      }
      if (matched) continue;
    }
    if (word_char(text[i])) {
      std::size_t j = i;
      while (j < text.size() && word_char(text[j])) ++j;
      out.emplace_back(text.substr(i, j - i));
      i = j;
      // One space between two words is implied by the boundary.
      if (j + 1 < text.size() && text[j] == ' ' && word_char(text[j + 1])) ++i;
      continue;
    }
    const std::size_t n =
        std::min(utf8_char_len(static_cast<unsigned char>(text[i])), text.size() - i);
    out.emplace_back(text.substr(i, n));
    i += n;
  }
  return out;
}

std::string join_tokens(std::span<const std::string> tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i > 0 && is_ascii_word(tokens[i - 1]) && is_ascii_word(tokens[i])) out += ' ';
    out += tokens[i];
  }
  return out;
}

Vocab::Vocab() {
  for (auto r : tok::kReserved) add(r);
}

Vocab Vocab::build(std::span<const std::string> texts, std::size_t max_size,
                   std::size_t min_count) {
  std::map<std::string, std::size_t> counts;
  for (const auto& t : texts) {
    for (auto& piece : split_tokens(t)) {
      if (!is_reserved(piece)) ++counts[piece];
    }
  }
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocab v;
  for (const auto& [token, count] : ranked) {
    if (v.size() >= max_size) break;
    if (count < min_count) break;
    v.add(token);
  }
  return v;
}

int Vocab::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? tok::kUnk : it->second;
}

bool Vocab::contains(std::string_view token) const {
  return index_.count(std::string(token)) > 0;
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary of " +
                            std::to_string(tokens_.size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

int Vocab::add(std::string_view token) {
  auto [it, inserted] = index_.emplace(std::string(token), static_cast<int>(tokens_.size()));
  if (inserted) tokens_.emplace_back(token);
  return it->second;
}

std::vector<int> Vocab::encode(std::string_view text) const {
  std::vector<int> ids;
  for (const auto& t : split_tokens(text)) ids.push_back(id(t));
  return ids;
}

std::string Vocab::decode(std::span<const int> ids, bool skip_control) const {
  std::vector<std::string> pieces;
  for (int i : ids) {
    if (skip_control && i < tok::kUname && i != tok::kGoal) continue;
    pieces.push_back(token(i));
  }
  return join_tokens(pieces);
}

nlohmann::json Vocab::to_json() const { return tokens_; }

Vocab Vocab::from_json(const nlohmann::json& j) {
  Vocab v;
  const auto tokens = j.get<std::vector<std::string>>();
  if (tokens.size() < tok::kNumReserved) throw std::runtime_error("vocabulary lacks reserved block");
  for (std::size_t i = 0; i < tok::kNumReserved; ++i) {
    if (tokens[i] != tok::kReserved[i]) {
      throw std::runtime_error("vocabulary reserved block mismatch at id " + std::to_string(i));
    }
  }
  for (const auto& t : tokens) v.add(t);
  if (v.size() != tokens.size()) throw std::runtime_error("vocabulary has duplicate tokens");
  return v;
}

}  // namespace msdf
