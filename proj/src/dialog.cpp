#include "msdf/dialog.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <set>

#include "msdf/toml_lite.hpp"
#include "msdf/vocab.hpp"
#include "msdf/word_vectors.hpp"

namespace msdf {

std::string_view task_name(Task task) {
  switch (task) {
    case Task::kChat: return "chat";
    case Task::kKnowledge: return "knowledge";
    case Task::kRecommendation: return "recommendation";
    case Task::kPersona: return "persona";
  }
  return "chat";
}

Task parse_task(std::string_view name) {
  if (name == "chat") return Task::kChat;
  if (name == "knowledge") return Task::kKnowledge;
  if (name == "recommendation") return Task::kRecommendation;
  if (name == "persona") return Task::kPersona;
  throw DataError("unknown task '" + std::string(name) + "'");
}

// --- placeholders -------------------------------------------------------------

namespace {

// One left-to-right pass replacing the longest matching `from` string at each
// position by its `to` counterpart.
std::string replace_all_longest(std::string_view text,
                                std::vector<std::pair<std::string, std::string>> rules) {
  std::erase_if(rules, [](const auto& r) { return r.first.empty(); });
  std::stable_sort(rules.begin(), rules.end(),
                   [](const auto& a, const auto& b) { return a.first.size() > b.first.size(); });
  std::string out;
  std::size_t i = 0;
  while (i < text.size()) {
    bool hit = false;
    for (const auto& [from, to] : rules) {
      if (text.substr(i, from.size()) == from) {
        out += to;
        i += from.size();
        hit = true;
        break;
      }
    }
    if (hit) continue;
    const std::size_t n =
        std::min(utf8_char_len(static_cast<unsigned char>(text[i])), text.size() - i);
    out.append(text.substr(i, n));
    i += n;
  }
  return out;
}

}  // namespace

std::string PlaceholderMap::substitute(std::string_view text) const {
  std::vector<std::pair<std::string, std::string>> rules;
  for (const auto& [ph, orig] : entries) rules.emplace_back(orig, ph);
  return replace_all_longest(text, std::move(rules));
}

std::string PlaceholderMap::restore(std::string_view text) const {
  return replace_all_longest(text, entries);
}

nlohmann::json PlaceholderMap::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [ph, orig] : entries) j[ph] = orig;
  return j;
}

PlaceholderMap PlaceholderMap::from_json(const nlohmann::json& j) {
  PlaceholderMap m;
  for (auto it = j.begin(); it != j.end(); ++it) {
    m.entries.emplace_back(it.key(), it.value().get<std::string>());
  }
  return m;
}

// --- JSON I/O -------------------------------------------------------------------

nlohmann::json sample_to_json(const DialogSample& s) {
  nlohmann::json j;
  j["schema_version"] = kSchemaVersion;
  j["task"] = std::string(task_name(s.task));
  j["history"] = s.history;
  j["knowledge"] = nlohmann::json::array();
  for (const auto& k : s.knowledge) {
    if (k.is_triple()) {
      j["knowledge"].push_back(k.triple);
    } else {
      j["knowledge"].push_back(k.sentence);
    }
  }
  j["goal"] = s.goal;
  j["user_profile"] = s.user_profile;
  j["situation"] = s.situation;
  j["persona"] = s.persona;
  j["response"] = s.response;
  j["placeholder_map"] = s.placeholder_map.to_json();
  return j;
}

DialogSample sample_from_json(const nlohmann::json& j) {
  if (j.contains("schema_version") && j["schema_version"].get<int>() > kSchemaVersion) {
    throw DataError("unsupported schema_version " + j["schema_version"].dump());
  }
  DialogSample s;
  s.task = parse_task(j.value("task", std::string("chat")));
  s.history = j.value("history", std::vector<std::string>{});
  if (j.contains("knowledge")) {
    for (const auto& k : j["knowledge"]) {
      KnowledgeItem item;
      if (k.is_array()) {
        item.triple = k.get<std::vector<std::string>>();
      } else {
        item.sentence = k.get<std::string>();
      }
      s.knowledge.push_back(std::move(item));
    }
  }
  if (j.contains("goal")) {
    if (j["goal"].is_string()) {
      s.goal.push_back(j["goal"].get<std::string>());
    } else {
      s.goal = j["goal"].get<std::vector<std::string>>();
    }
  }
  s.user_profile = j.value("user_profile", std::map<std::string, std::string>{});
  s.situation = j.value("situation", std::string());
  s.persona = j.value("persona", std::vector<std::string>{});
  s.response = j.value("response", std::string());
  if (j.contains("placeholder_map")) {
    s.placeholder_map = PlaceholderMap::from_json(j["placeholder_map"]);
  }
  return s;
}

std::vector<DialogSample> read_jsonl(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open " + path.string());
  std::vector<DialogSample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(sample_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void write_jsonl(const std::filesystem::path& path, std::span<const DialogSample> samples) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot write " + path.string());
  for (const auto& s : samples) os << sample_to_json(s).dump() << '\n';
}

// --- config -----------------------------------------------------------------------

PipelineConfig PipelineConfig::from_json(const nlohmann::json& j) {
  PipelineConfig c;
  if (j.contains("pipeline")) {
    const auto& p = j["pipeline"];
    c.max_history_tokens = p.value("max_history_tokens", c.max_history_tokens);
    c.max_knowledge_tokens = p.value("max_knowledge_tokens", c.max_knowledge_tokens);
    c.max_persona_tokens = p.value("max_persona_tokens", c.max_persona_tokens);
    c.max_response_tokens = p.value("max_response_tokens", c.max_response_tokens);
    c.goals_in_knowledge = p.value("goals_in_knowledge", c.goals_in_knowledge);
  }
  if (j.contains("persona_filter")) {
    const auto& f = j["persona_filter"];
    c.persona_filter.threshold = f.value("threshold", c.persona_filter.threshold);
    c.persona_filter.drop_prob = f.value("drop_prob", c.persona_filter.drop_prob);
    c.persona_filter.length_cap = f.value("length_cap", c.persona_filter.length_cap);
    c.persona_filter.keywords = f.value("keywords", c.persona_filter.keywords);
  }
  if (j.contains("reprocess") && j["reprocess"].contains("rules")) {
    for (const auto& r : j["reprocess"]["rules"]) {
      if (!r.is_array() || r.size() != 2) throw DataError("reprocess rule must be [pattern, replacement]");
      c.reprocess_rules.push_back({r[0].get<std::string>(), r[1].get<std::string>()});
    }
  }
  return c;
}

PipelineConfig PipelineConfig::load(const std::filesystem::path& path) {
  if (path.extension() == ".json") {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open " + path.string());
    return from_json(nlohmann::json::parse(is));
  }
  return from_json(load_toml(path));
}

// --- preprocessing ------------------------------------------------------------------

PlaceholderMap assign_topic_placeholders(std::span<const KnowledgeItem> knowledge) {
  std::set<std::string> movies, stars;
  for (const auto& k : knowledge) {
    if (k.triple.size() != 3 || k.triple[1] != "领域") continue;
    if (k.triple[2] == "电影") movies.insert(k.triple[0]);
    if (k.triple[2] == "明星") stars.insert(k.triple[0]);
  }
  PlaceholderMap map;
  std::vector<std::string> seen;
  int n_movies = 0, n_stars = 0;
  for (const auto& k : knowledge) {
    if (k.triple.size() != 3) continue;
    const std::string& subject = k.triple[0];
    if (std::find(seen.begin(), seen.end(), subject) != seen.end()) continue;
    if (movies.count(subject) && n_movies < 2) {
      map.entries.emplace_back("[movie" + std::to_string(++n_movies) + "]", subject);
      seen.push_back(subject);
    } else if (stars.count(subject) && n_stars < 2) {
      map.entries.emplace_back("[star" + std::to_string(++n_stars) + "]", subject);
      seen.push_back(subject);
    }
  }
  return map;
}

std::string linearize_knowledge(std::span<const KnowledgeItem> knowledge,
                                const PlaceholderMap& placeholders) {
  std::string out;
  for (const auto& k : knowledge) {
    std::string item;
    if (k.is_triple()) {
      if (k.triple.size() != 3 || std::any_of(k.triple.begin(), k.triple.end(),
                                              [](const auto& p) { return p.empty(); })) {
        throw DataError("malformed knowledge triple with " + std::to_string(k.triple.size()) +
                        " parts");
      }
      item = k.triple[0] + " " + k.triple[1] + " " + k.triple[2];
    } else {
      item = k.sentence;
    }
    if (item.empty()) continue;
    if (!out.empty()) out += " [SEP] ";
    out += placeholders.substitute(item);
  }
  return out;
}

namespace {

std::size_t token_count(std::string_view s) { return split_tokens(s).size(); }

std::string_view speaker_for(std::size_t turn_index) {
  return turn_index % 2 == 0 ? tok::kSpeaker1Text : tok::kSpeaker2Text;
}

std::string join_nonempty(const std::vector<std::string>& parts) {
  std::string out;
  for (const auto& p : parts) {
    if (p.empty()) continue;
    if (!out.empty()) out += " [SEP] ";
    out += p;
  }
  return out;
}

}  // namespace

std::string build_history(std::span<const std::string> turns, std::size_t max_tokens) {
  if (turns.empty()) return {};
  auto render = [&](std::size_t first) {
    std::string out;
    for (std::size_t i = first; i < turns.size(); ++i) {
      if (!out.empty()) out += ' ';
      out += speaker_for(i);
      out += ' ';
      out += turns[i];
    }
    return out;
  };
  for (std::size_t first = 0; first < turns.size(); ++first) {
    std::string h = render(first);
    if (token_count(h) <= max_tokens) return h;
  }
  // Only the newest turn is left and it is still too long: keep its speaker
  // token and the tail of its text.
  const std::size_t last = turns.size() - 1;
  auto pieces = split_tokens(turns[last]);
  const std::size_t budget = max_tokens > 2 ? max_tokens - 2 : 0;
  std::vector<std::string> tail(pieces.end() - static_cast<long>(std::min(budget, pieces.size())),
                                pieces.end());
  std::string out(speaker_for(last));
  if (!tail.empty()) out += ' ' + join_tokens(tail);
  return out;
}

std::string attach_goal_prefix(std::string_view goal, std::string_view response) {
  if (goal.empty()) return std::string(response);
  std::string out(tok::kGoalText);
  out += goal;
  out += tok::kGoalText;
  out += response;
  return out;
}

std::string strip_goal_prefix(std::string_view text) {
  const auto g = tok::kGoalText;
  if (text.substr(0, g.size()) != g) return std::string(text);
  const auto second = text.find(g, g.size());
  if (second == std::string_view::npos) return std::string(text.substr(g.size()));
  return std::string(text.substr(second + g.size()));
}

std::string postprocess_response(std::string_view text, const PlaceholderMap& placeholders,
                                 std::string_view user_name,
                                 std::span<const ReprocessRule> rules) {
  std::string s = strip_goal_prefix(text);
  // Trim first so a leading space left by "[goal] g [goal] r" disappears.
  auto trim = [](std::string v) {
    const auto b = v.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return std::string();
    const auto e = v.find_last_not_of(" \t\r\n");
    return v.substr(b, e - b + 1);
  };
  s = placeholders.restore(trim(s));
  PlaceholderMap uname;
  uname.entries.emplace_back(std::string(tok::kUnameText), std::string(user_name));
  s = uname.restore(s);
  if (s.find('[') != std::string::npos) {
    auto pieces = split_tokens(s);
    std::erase_if(pieces, [](const auto& p) { return is_reserved(p); });
    s = join_tokens(pieces);
  }
  s = trim(s);
  for (const auto& r : rules) s = std::regex_replace(s, std::regex(r.pattern), r.replacement);
  return s;
}

std::optional<std::string> profile_user_name(const std::map<std::string, std::string>& profile) {
  for (const char* key : {"姓名", "name", "user_name"}) {
    auto it = profile.find(key);
    if (it != profile.end() && !it->second.empty()) return it->second;
  }
  return std::nullopt;
}

ProcessedSample preprocess(const DialogSample& sample, const PipelineConfig& config,
                           bool require_response) {
  ProcessedSample out;
  out.task = sample.task;
  if (!require_response && sample.history.empty()) throw MissingSourceError("history");
  if (require_response && sample.response.empty()) throw MissingSourceError("response");

  switch (sample.task) {
    case Task::kKnowledge:
      if (sample.goal.empty()) throw MissingSourceError("goal");
      if (sample.knowledge.empty()) throw MissingSourceError("knowledge");
      break;
    case Task::kRecommendation:
      if (sample.user_profile.empty()) throw MissingSourceError("user_profile");
      if (sample.situation.empty()) throw MissingSourceError("situation");
      if (sample.goal.empty()) throw MissingSourceError("goal");
      if (sample.knowledge.empty()) throw MissingSourceError("knowledge");
      break;
    case Task::kPersona:
      if (sample.persona.empty()) throw MissingSourceError("persona");
      break;
    case Task::kChat:
      break;
  }

  PlaceholderMap map = sample.placeholder_map;
  if (map.empty() && sample.task != Task::kPersona && sample.task != Task::kChat) {
    map = assign_topic_placeholders(sample.knowledge);
  }
  if (sample.task == Task::kRecommendation) {
    if (auto name = profile_user_name(sample.user_profile)) {
      out.user_name = *name;
      const bool present = std::any_of(map.entries.begin(), map.entries.end(),
                                       [](const auto& e) { return e.first == tok::kUnameText; });
      if (!present) map.entries.emplace_back(std::string(tok::kUnameText), *name);
    }
  }

  std::vector<std::string> turns;
  for (const auto& t : sample.history) turns.push_back(map.substitute(t));
  out.history = build_history(turns, config.max_history_tokens);

  std::string goals;
  {
    std::vector<std::string> g;
    for (const auto& x : sample.goal) g.push_back(map.substitute(x));
    goals = join_nonempty(g);
  }

  switch (sample.task) {
    case Task::kKnowledge: {
      std::vector<std::string> parts;
      if (config.goals_in_knowledge) parts.push_back(goals);
      parts.push_back(linearize_knowledge(sample.knowledge, map));
      out.knowledge = join_nonempty(parts);
      break;
    }
    case Task::kRecommendation: {
      out.knowledge = join_nonempty({map.substitute(sample.situation),
                                     linearize_knowledge(sample.knowledge, map), goals});
      std::vector<std::string> profile;
      for (const auto& [k, v] : sample.user_profile) profile.push_back(map.substitute(k + " " + v));
      out.persona = join_nonempty(profile);
      break;
    }
    case Task::kPersona: {
      out.persona = join_nonempty(sample.persona);
      break;
    }
    case Task::kChat:
      break;
  }

  std::string response = map.substitute(sample.response);
  if (sample.task == Task::kRecommendation && !sample.goal.empty()) {
    response = attach_goal_prefix(map.substitute(sample.goal.front()), response);
  }
  out.target = std::move(response);
  out.placeholders = std::move(map);
  return out;
}

double persona_similarity(const DialogSample& sample, const WordVectors& vectors) {
  const auto r = vectors.mean_vector_of(sample.response);
  if (!r) return 0.0;
  double best = 0.0;
  bool any = false;
  for (const auto& line : sample.persona) {
    const auto p = vectors.mean_vector_of(line);
    if (!p) continue;
    const double c = cosine(*r, *p);
    best = any ? std::max(best, c) : c;
    any = true;
  }
  return any ? best : 0.0;
}

std::vector<DialogSample> filter_persona_corpus(std::span<const DialogSample> samples,
                                                const WordVectors& vectors,
                                                const PersonaFilterConfig& config,
                                                std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<DialogSample> kept;
  for (const auto& s : samples) {
    // One draw per sample keeps the stream aligned whatever gets dropped.
    const double draw = u(rng);
    const bool low_similarity = persona_similarity(s, vectors) < config.threshold;
    bool flagged = utf8_length(s.response) > config.length_cap;
    for (const auto& kw : config.keywords) {
      if (!kw.empty() && s.response.find(kw) != std::string::npos) flagged = true;
    }
    if ((low_similarity || flagged) && draw < config.drop_prob) continue;
    kept.push_back(s);
  }
  return kept;
}

// --- pre-training corpus --------------------------------------------------------------

std::vector<HistoryResponse> shape_pretraining_corpus(
    std::span<const std::vector<std::string>> dialogs) {
  std::vector<HistoryResponse> out;
  for (const auto& d : dialogs) {
    for (std::size_t i = 1; i < d.size(); ++i) {
      out.push_back({std::vector<std::string>(d.begin(), d.begin() + static_cast<long>(i)), d[i]});
    }
  }
  return out;
}

std::vector<HistoryResponse> select_longer_half(std::span<const HistoryResponse> pairs) {
  std::vector<std::size_t> idx(pairs.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return utf8_length(pairs[a].response) > utf8_length(pairs[b].response);
  });
  idx.resize((pairs.size() + 1) / 2);
  std::sort(idx.begin(), idx.end());
  std::vector<HistoryResponse> out;
  for (std::size_t i : idx) out.push_back(pairs[i]);
  return out;
}

}  // namespace msdf
