#include "msdf/synth.hpp"

#include <array>
#include <random>
#include <set>
#include <stdexcept>

namespace msdf::synth {

namespace {

std::vector<std::string> entity_pool(std::size_t n, std::mt19937_64& rng,
                                     std::set<std::string>& taken) {
  std::uniform_int_distribution<int> letter('a', 'z');
  std::vector<std::string> out;
  while (out.size() < n) {
    std::string w;
    for (int i = 0; i < 6; ++i) w.push_back(static_cast<char>(letter(rng)));
    if (taken.insert(w).second) out.push_back(w);
  }
  return out;
}

struct Relation {
  const char* predicate;
  const char* question;
  const char* answer_prefix;
};

constexpr std::array<Relation, 3> kRelations = {{
    {"导演", "这部 电影 的 导演 是 谁", "导演 是"},
    {"主演", "这部 电影 的 主演 是 谁", "主演 是"},
    {"编剧", "这部 电影 的 编剧 是 谁", "编剧 是"},
}};

constexpr std::array<const char*, 4> kOpeners = {"你好", "在 吗", "嗨", "我 想 问 个 问题"};

DialogSample copy_sample(const std::vector<std::string>& pool, std::mt19937_64& rng,
                         std::string& answer) {
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  const std::string film = pool[pick(rng)];
  do answer = pool[pick(rng)]; while (answer == film);
  const Relation& rel = kRelations[rng() % kRelations.size()];

  DialogSample s;
  s.task = Task::kKnowledge;
  KnowledgeItem k;
  k.triple = {film, rel.predicate, answer};
  s.knowledge = {k};
  s.goal = {"问答"};
  s.history = {kOpeners[rng() % kOpeners.size()], "你好", rel.question};
  s.response = std::string(rel.answer_prefix) + " " + answer;
  return s;
}

struct Topic {
  const char* key;
  std::array<const char*, 2> replies;
};

constexpr std::array<Topic, 6> kTopics = {{
    {"猫", {"猫 很 可爱 总是 在 睡觉", "我 家 的 猫 会 抓 老鼠"}},
    {"足球", {"昨晚 的 足球 比赛 踢 得 真 精彩", "周末 一起 去 踢 足球 吧"}},
    {"下雨", {"下雨 天 记得 带 伞 出门", "外面 雨 好 大 路 都 湿 了"}},
    {"咖啡", {"早上 一杯 咖啡 很 提神", "这 家 店 的 拿铁 香 浓"}},
    {"火车", {"坐 火车 旅行 可以 看 风景", "高铁 票 要 提前 抢 购"}},
    {"钢琴", {"练 钢琴 需要 每天 坚持", "肖邦 的 夜曲 弹 起来 很 美"}},
}};

constexpr std::array<const char*, 5> kFillers = {"你好", "最近 怎么样", "还 不错", "在 干 嘛",
                                                 "刚 下班"};

DialogSample keyed_sample(std::size_t topic, std::mt19937_64& rng) {
  DialogSample s;
  s.task = Task::kChat;
  s.history = {kFillers[rng() % kFillers.size()], kFillers[rng() % kFillers.size()],
               std::string("我们 聊 聊 ") + kTopics[topic].key + " 吧"};
  s.response = kTopics[topic].replies[rng() % 2];
  return s;
}

}  // namespace

CopyTask make_copy_task(std::size_t n_train, std::size_t n_dev, std::size_t n_test,
                        std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::set<std::string> taken;
  // Train and dev draw from a small pool, so each entity recurs in many random
  // pairings and only its position in the triple predicts the answer.
  const auto seen = entity_pool(256, rng, taken);
  const auto unseen = entity_pool(std::max<std::size_t>(16, 3 * n_test), rng, taken);
  CopyTask t;
  std::string answer;
  for (std::size_t i = 0; i < n_train; ++i) t.train.push_back(copy_sample(seen, rng, answer));
  for (std::size_t i = 0; i < n_dev; ++i) t.dev.push_back(copy_sample(seen, rng, answer));
  for (std::size_t i = 0; i < n_test; ++i) {
    t.test.push_back(copy_sample(unseen, rng, answer));
    t.test_answers.push_back(answer);
  }
  return t;
}

KeyedTask make_keyed_task(std::size_t n_train, std::size_t n_dev, std::size_t n_test, double noise,
                          std::uint64_t seed) {
  if (noise < 0.0 || noise > 1.0) throw std::invalid_argument("keyed task: noise must be in [0, 1]");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  KeyedTask t;
  for (std::size_t i = 0; i < n_train; ++i) {
    const std::size_t topic = rng() % kTopics.size();
    auto s = keyed_sample(topic, rng);
    t.train.push_back(s);
    if (u(rng) < noise) {
      const std::size_t other = rng() % kTopics.size();
      s.response = kTopics[other].replies[rng() % 2];
    }
    t.generator_train.push_back(s);
  }
  for (std::size_t i = 0; i < n_dev; ++i) t.dev.push_back(keyed_sample(rng() % kTopics.size(), rng));
  for (std::size_t i = 0; i < n_test; ++i) t.test.push_back(keyed_sample(rng() % kTopics.size(), rng));
  return t;
}

std::vector<std::string> corpus_texts(const std::vector<DialogSample>& samples) {
  std::vector<std::string> out;
  for (const auto& s : samples) {
    out.insert(out.end(), s.history.begin(), s.history.end());
    for (const auto& k : s.knowledge) {
      if (k.is_triple()) {
        out.insert(out.end(), k.triple.begin(), k.triple.end());
      } else {
        out.push_back(k.sentence);
      }
    }
    out.insert(out.end(), s.goal.begin(), s.goal.end());
    out.insert(out.end(), s.persona.begin(), s.persona.end());
    out.push_back(s.situation);
    for (const auto& [k, v] : s.user_profile) out.push_back(k + " " + v);
    out.push_back(s.response);
  }
  return out;
}

}  // namespace msdf::synth
