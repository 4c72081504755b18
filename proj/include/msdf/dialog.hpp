#pragma once

// Dialog records, per-task preprocessing into encoder/decoder strings, and
// response post-processing.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <regex>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

namespace msdf {

class WordVectors;

inline constexpr int kSchemaVersion = 1;

// kChat is the history-only setting used for pre-training.
enum class Task { kChat, kKnowledge, kRecommendation, kPersona };

std::string_view task_name(Task task);
Task parse_task(std::string_view name);

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised when a task-required field is missing; field() names it.
class MissingSourceError : public DataError {
 public:
  explicit MissingSourceError(std::string field)
      : DataError(field + " required"), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

struct KnowledgeItem {
  std::vector<std::string> triple;  // [subject, predicate, object] when structured
  std::string sentence;             // free text otherwise

  bool is_triple() const { return !triple.empty(); }
};

// placeholder → original string, in assignment order.
struct PlaceholderMap {
  std::vector<std::pair<std::string, std::string>> entries;

  bool empty() const { return entries.empty(); }
  // Replaces every original string with its placeholder in one left-to-right
  // pass, longest original first at each position.
  std::string substitute(std::string_view text) const;
  // Replaces every placeholder with its original in one pass.
  std::string restore(std::string_view text) const;

  nlohmann::json to_json() const;
  static PlaceholderMap from_json(const nlohmann::json& j);
};

struct DialogSample {
  Task task = Task::kChat;
  std::vector<std::string> history;
  std::vector<KnowledgeItem> knowledge;
  std::vector<std::string> goal;
  std::map<std::string, std::string> user_profile;
  std::string situation;
  std::vector<std::string> persona;
  std::string response;
  PlaceholderMap placeholder_map;
};

nlohmann::json sample_to_json(const DialogSample& s);
DialogSample sample_from_json(const nlohmann::json& j);
std::vector<DialogSample> read_jsonl(const std::filesystem::path& path);
void write_jsonl(const std::filesystem::path& path, std::span<const DialogSample> samples);

// --- preprocessing ---------------------------------------------------------

struct ReprocessRule {
  std::string pattern;
  std::string replacement;
};

struct PersonaFilterConfig {
  double threshold = 0.7;
  double drop_prob = 1.0;
  std::size_t length_cap = 50;  // characters
  std::vector<std::string> keywords = {"工作"};
};

struct PipelineConfig {
  std::size_t max_history_tokens = 64;
  std::size_t max_knowledge_tokens = 64;
  std::size_t max_persona_tokens = 64;
  std::size_t max_response_tokens = 63;
  bool goals_in_knowledge = true;  // knowledge task: prepend goal strings
  PersonaFilterConfig persona_filter;
  std::vector<ReprocessRule> reprocess_rules;

  // Reads [pipeline], [persona_filter], and [reprocess] tables; unknown keys
  // are ignored, missing keys keep their defaults.
  static PipelineConfig from_json(const nlohmann::json& j);
  static PipelineConfig load(const std::filesystem::path& path);  // .toml or .json
};

// Everything the generator needs for one sample, as text.
struct ProcessedSample {
  Task task = Task::kChat;
  std::string history;
  std::optional<std::string> knowledge;
  std::optional<std::string> persona;
  std::string target;  // training target (goal prefix included where used)
  PlaceholderMap placeholders;
  std::string user_name;
};

// Assigns [movie1]/[movie2]/[star1]/[star2] to topic subjects: a subject is a
// movie topic when a (subject, 领域, 电影) triple exists and a star topic for
// (subject, 领域, 明星), numbered by first appearance. At most two of each.
PlaceholderMap assign_topic_placeholders(std::span<const KnowledgeItem> knowledge);

// "s p o" per triple, sentences verbatim, items joined by " [SEP] ", with
// topic subjects replaced through `placeholders`. Throws DataError on a
// malformed triple.
std::string linearize_knowledge(std::span<const KnowledgeItem> knowledge,
                                const PlaceholderMap& placeholders);

// "[speaker1] u1 [speaker2] u2 ..." with speakers alternating from the first
// turn. Oldest whole turns are dropped until the result is at most
// max_tokens tokens; a single over-long final turn keeps its speaker token
// and the tail of its text.
std::string build_history(std::span<const std::string> turns, std::size_t max_tokens);

std::string attach_goal_prefix(std::string_view goal, std::string_view response);
// Inverse of attach_goal_prefix; text without a leading [goal] is unchanged.
std::string strip_goal_prefix(std::string_view text);

// Goal prefix removal, placeholder restoration, [uname] → user_name, removal
// of any remaining control tokens, then the reprocess rules in order.
std::string postprocess_response(std::string_view text, const PlaceholderMap& placeholders,
                                 std::string_view user_name,
                                 std::span<const ReprocessRule> rules = {});

// Profile keys holding the user's name.
std::optional<std::string> profile_user_name(const std::map<std::string, std::string>& profile);

// Validates task-required fields (MissingSourceError) and produces the
// encoder/decoder strings. `require_response` is false at inference.
ProcessedSample preprocess(const DialogSample& sample, const PipelineConfig& config,
                           bool require_response = true);

// Drops low-similarity, over-long, or keyword-bearing examples, each with
// probability drop_prob. Deterministic for a fixed seed.
std::vector<DialogSample> filter_persona_corpus(std::span<const DialogSample> samples,
                                                const WordVectors& vectors,
                                                const PersonaFilterConfig& config,
                                                std::uint64_t seed);
// Max over persona lines of cosine(mean vector(response), mean vector(line));
// 0 when either side has no known tokens.
double persona_similarity(const DialogSample& sample, const WordVectors& vectors);

// --- pre-training corpus shaping ---------------------------------------------

struct HistoryResponse {
  std::vector<std::string> history;
  std::string response;
};

// A k-turn dialog yields k−1 pairs: every prefix paired with its next turn.
std::vector<HistoryResponse> shape_pretraining_corpus(
    std::span<const std::vector<std::string>> dialogs);
// The ⌈N/2⌉ pairs with the longest responses (characters), ties resolved by
// original position; output keeps the original order.
std::vector<HistoryResponse> select_longer_half(std::span<const HistoryResponse> pairs);

}  // namespace msdf
