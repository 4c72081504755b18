#include <doctest.h>

#include <chrono>
#include <filesystem>
#include <future>
#include <thread>

#include <httplib.h>

#include "msdf/serve.hpp"

using namespace msdf;

namespace {

Vocab vocab() {
  const std::vector<std::string> texts = {"你好 我 喜欢 看 电影 吗 是 的 推荐 一部 动作 类型 猫 狗",
                                          "alpha beta gamma delta epsilon"};
  return Vocab::build(texts, 200);
}

ModelConfig config() {
  ModelConfig c;
  c.d = 16;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_ff = 32;
  c.max_len = 32;
  c.dropout = 0.0;
  c.init_std = 0.3;
  return c;
}

struct Models {
  std::shared_ptr<const GeneratorModel> knowledge, persona;
  std::shared_ptr<const SelectorModel> selector;
};

const Models& models() {
  static const Models m{
      std::make_shared<const GeneratorModel>(GeneratorModel::create(Task::kKnowledge, config(), vocab(), 1)),
      std::make_shared<const GeneratorModel>(GeneratorModel::create(Task::kPersona, config(), vocab(), 2)),
      std::make_shared<const SelectorModel>(SelectorModel::create(config(), vocab(), 3))};
  return m;
}

std::shared_ptr<ChatService> service(std::optional<std::filesystem::path> journal = std::nullopt) {
  ServiceConfig cfg;
  cfg.decoding.pool_size = 5;
  cfg.decoding.max_new_tokens = 8;
  cfg.journal_dir = std::move(journal);
  return std::make_shared<ChatService>(
      std::vector<std::shared_ptr<const GeneratorModel>>{models().knowledge, models().persona},
      models().selector, cfg);
}

const nlohmann::json kKnowledgeSession = {
    {"task", "knowledge"},
    {"knowledge", {{"alpha", "类型", "动作"}}},
    {"goal", {"推荐"}},
};

const nlohmann::json kPersonaSession = {{"task", "persona"}, {"persona", {"我 喜欢 猫"}}};

int api_status(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const ApiError& e) {
    return e.status();
  }
  return 200;
}

std::filesystem::path fresh_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(dir);
  return dir;
}

}  // namespace

TEST_CASE("session creation") {
  auto svc = service();
  const auto a = svc->create(kPersonaSession)["session_id"].get<std::string>();
  const auto b = svc->create(kPersonaSession)["session_id"].get<std::string>();
  CHECK(a != b);
  CHECK(svc->size() == 2);

  try {
    svc->create({{"task", "knowledge"}, {"goal", {"推荐"}}});
    FAIL("expected 422");
  } catch (const ApiError& e) {
    CHECK(e.status() == 422);
    CHECK(std::string(e.what()) == "knowledge required");
  }
  CHECK(api_status([&] { svc->create({{"task", "persona"}}); }) == 422);
  CHECK(api_status([&] { svc->create({{"task", "poetry"}}); }) == 422);
  CHECK(api_status([&] { svc->create({{"knowledge", {}}}); }) == 422);
  // recommendation has no generator loaded in this service
  CHECK(api_status([&] {
          svc->create({{"task", "recommendation"},
                       {"knowledge", {{"a", "b", "c"}}},
                       {"goal", {"g"}},
                       {"situation", "s"},
                       {"user_profile", {{"name", "n"}}}});
        }) == 422);
}

TEST_CASE("messages, overrides, and the transcript") {
  auto svc = service();
  const auto id = svc->create(kKnowledgeSession)["session_id"].get<std::string>();
  CHECK(api_status([&] { svc->choose(id, {{"candidate_index", 0}}); }) == 409);

  const auto r1 = svc->message(id, {{"text", "你好"}});
  const auto& cands = r1["candidates"];
  REQUIRE(cands.size() == 5);
  CHECK(r1["reply"] == cands[r1["chosen_index"].get<std::size_t>()]["text"]);
  for (std::size_t i = 0; i < cands.size(); ++i) {
    const double c = cands[i]["consistency"];
    CHECK(c >= 0.0);
    CHECK(c <= 1.0);
    if (i > 0) CHECK(cands[i - 1]["consistency"].get<double>() >= c);
  }

  auto session = svc->get(id);
  REQUIRE(session["transcript"].size() == 2);
  CHECK(session["transcript"][0]["role"] == "user");
  CHECK(session["transcript"][1]["role"] == "bot");
  CHECK(session["transcript"][1]["text"] == r1["reply"]);

  CHECK(svc->choose(id, {{"candidate_index", 3}})["reply"] == cands[3]["text"]);
  CHECK(svc->choose(id, {{"candidate_index", 1}})["reply"] == cands[1]["text"]);
  session = svc->get(id);
  CHECK(session["transcript"][1]["text"] == cands[1]["text"]);
  CHECK(session["chosen_index"] == 1);
  CHECK(api_status([&] { svc->choose(id, {{"candidate_index", 5}}); }) == 422);
  CHECK(api_status([&] { svc->choose(id, {{"candidate_index", -1}}); }) == 422);
  CHECK(api_status([&] { svc->choose(id, {{"index", 0}}); }) == 422);

  svc->message(id, {{"text", "我 喜欢 看 电影"}});
  session = svc->get(id);
  REQUIRE(session["transcript"].size() == 4);
  for (std::size_t i = 0; i < 4; ++i) CHECK(session["transcript"][i]["role"] == (i % 2 ? "bot" : "user"));
  CHECK(session["transcript"][1]["text"] == cands[1]["text"]);

  CHECK(api_status([&] { svc->message(id, {{"text", ""}}); }) == 422);
  CHECK(api_status([&] { svc->message(id, {{"text", "x"}, {"decoding", {{"top_k", 0}}}}); }) == 422);
  CHECK(api_status([&] { svc->message("0123456789abcdef", {{"text", "x"}}); }) == 404);

  svc->remove(id);
  CHECK(api_status([&] { svc->get(id); }) == 404);
  CHECK(api_status([&] { svc->remove(id); }) == 404);
}

TEST_CASE("same seeds replay the same pools on a fresh session") {
  auto run = [](ChatService& svc) {
    const auto id = svc.create(kKnowledgeSession)["session_id"].get<std::string>();
    std::vector<nlohmann::json> out;
    for (int seed : {7, 8}) {
      out.push_back(svc.message(id, {{"text", "你好"}, {"decoding", {{"seed", seed}}}})["candidates"]);
    }
    return out;
  };
  auto a = service();
  auto b = service();
  CHECK(run(*a) == run(*b));
}

TEST_CASE("one generation per session at a time") {
  ServiceConfig cfg;
  cfg.decoding.pool_size = 200;
  cfg.decoding.max_new_tokens = 31;
  cfg.decoding.temperature = 5.0;  // long, high-entropy samples keep the call busy
  ChatService svc({models().knowledge}, models().selector, cfg);
  const auto id = svc.create(kKnowledgeSession)["session_id"].get<std::string>();
  const auto other = svc.create(kKnowledgeSession)["session_id"].get<std::string>();
  // A quick first turn leaves a pool, so choose only fails while busy.
  svc.message(id, {{"text", "你好"}, {"decoding", {{"pool_size", 2}, {"max_new_tokens", 2}}}});
  CHECK(api_status([&] { svc.choose(id, {{"candidate_index", 0}}); }) == 200);

  auto slow = std::async(std::launch::async, [&] { return svc.message(id, {{"text", "你好"}}); });
  int conflict = 0;
  do {
    if (api_status([&] { svc.choose(id, {{"candidate_index", 0}}); }) == 409) {
      conflict = 409;
      // other sessions stay readable meanwhile
      CHECK(svc.get(other)["transcript"].empty());
      break;
    }
  } while (slow.wait_for(std::chrono::milliseconds(1)) != std::future_status::ready);
  slow.get();
  CHECK(conflict == 409);
}

TEST_CASE("journal replay restores sessions exactly") {
  const auto dir = fresh_dir("msdf_journal_test");
  std::string id;
  nlohmann::json before;
  {
    auto svc = service(dir);
    id = svc->create(kPersonaSession)["session_id"].get<std::string>();
    svc->message(id, {{"text", "你好"}});
    svc->choose(id, {{"candidate_index", 2}});
    svc->message(id, {{"text", "我 喜欢 狗"}});
    const auto gone = svc->create(kPersonaSession)["session_id"].get<std::string>();
    svc->remove(gone);
    before = svc->get(id);
  }
  auto restored = service(dir);
  CHECK(restored->restore() == 1);
  CHECK(restored->get(id).dump() == before.dump());
  std::filesystem::remove_all(dir);
}

TEST_CASE("HTTP front end") {
  auto svc = service();
  HttpServer server(svc, 2);
  const int port = server.start("127.0.0.1", 0);
  httplib::Client cli("127.0.0.1", port);

  auto res = cli.Post("/v1/sessions", kPersonaSession.dump(), "application/json");
  REQUIRE(res);
  CHECK(res->status == 201);
  CHECK(res->get_header_value("Access-Control-Allow-Origin") == "*");
  const auto id = nlohmann::json::parse(res->body)["session_id"].get<std::string>();

  res = cli.Post("/v1/sessions", R"({"task":"knowledge","goal":["g"]})", "application/json");
  CHECK(res->status == 422);
  CHECK(nlohmann::json::parse(res->body)["error"] == "knowledge required");

  res = cli.Post("/v1/sessions", "{not json", "application/json");
  CHECK(res->status == 400);

  res = cli.Post("/v1/sessions/" + id + "/messages", R"({"text":"你好"})", "application/json");
  REQUIRE(res->status == 200);
  const auto reply = nlohmann::json::parse(res->body);
  CHECK(reply["reply"] == reply["candidates"][reply["chosen_index"].get<std::size_t>()]["text"]);

  res = cli.Post("/v1/sessions/" + id + "/choose", R"({"candidate_index":1})", "application/json");
  CHECK(res->status == 200);
  res = cli.Post("/v1/sessions/" + id + "/choose", R"({"candidate_index":99})", "application/json");
  CHECK(res->status == 422);

  res = cli.Get("/v1/sessions/" + id);
  REQUIRE(res->status == 200);
  CHECK(nlohmann::json::parse(res->body)["transcript"][1]["text"] == reply["candidates"][1]["text"]);

  res = cli.Post("/v1/sessions/ffffffffffffffff/messages", R"({"text":"x"})", "application/json");
  CHECK(res->status == 404);
  res = cli.Options("/v1/sessions");
  CHECK(res->status == 204);
  CHECK(res->get_header_value("Access-Control-Allow-Methods").find("POST") != std::string::npos);

  res = cli.Delete("/v1/sessions/" + id);
  CHECK(res->status == 204);
  res = cli.Get("/v1/sessions/" + id);
  CHECK(res->status == 404);
  server.stop();
}
