#include "msdf/serve.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <numeric>

#include <httplib.h>

namespace msdf {

namespace {

std::string now_utc() {
  using namespace std::chrono;
  const auto now = system_clock::now();
  const auto t = system_clock::to_time_t(now);
  const auto ms = duration_cast<milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02d:%02d:%02d.%03dZ", tm.tm_year + 1900,
                tm.tm_mon + 1, tm.tm_mday, tm.tm_hour, tm.tm_min, tm.tm_sec, static_cast<int>(ms));
  return buf;
}

nlohmann::json context_json(const DialogSample& s) {
  auto j = sample_to_json(s);
  j.erase("history");
  j.erase("response");
  return j;
}

nlohmann::json pool_json(const std::vector<PoolEntry>& pool) {
  auto out = nlohmann::json::array();
  for (const auto& p : pool) {
    out.push_back({{"text", p.text}, {"gen_logprob", p.gen_logprob}, {"consistency", p.consistency}});
  }
  return out;
}

std::vector<PoolEntry> pool_from_json(const nlohmann::json& j) {
  std::vector<PoolEntry> out;
  for (const auto& p : j) {
    out.push_back({p.at("text").get<std::string>(), p.at("gen_logprob").get<double>(),
                   p.at("consistency").get<double>()});
  }
  return out;
}

std::string dump(const nlohmann::json& j) {
  return j.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
}

}  // namespace

nlohmann::json Session::to_json() const {
  nlohmann::json turns = nlohmann::json::array();
  for (const auto& t : transcript) turns.push_back({{"role", t.role}, {"text", t.text}});
  return {{"session_id", id},
          {"task", std::string(task_name(context.task))},
          {"context", context_json(context)},
          {"transcript", turns},
          {"last_pool", pool_json(last_pool)},
          {"chosen_index", chosen_index ? nlohmann::json(*chosen_index) : nlohmann::json()},
          {"created", created},
          {"updated", updated}};
}

std::vector<std::string> Session::history() const {
  std::vector<std::string> out;
  out.reserve(transcript.size());
  for (const auto& t : transcript) out.push_back(t.text);
  return out;
}

ChatService::ChatService(std::vector<std::shared_ptr<const GeneratorModel>> generators,
                         std::shared_ptr<const SelectorModel> selector, ServiceConfig config)
    : selector_(std::move(selector)), config_(std::move(config)), ids_(std::random_device{}()) {
  if (!selector_) throw std::invalid_argument("chat service: a selector is required");
  for (auto& g : generators) {
    if (!g) continue;
    if (generators_.contains(g->task())) {
      throw std::invalid_argument("chat service: two generators for task " +
                                  std::string(task_name(g->task())));
    }
    generators_[g->task()] = std::move(g);
  }
  if (generators_.empty()) throw std::invalid_argument("chat service: no generator loaded");
  config_.decoding.validate();
  if (config_.journal_dir) std::filesystem::create_directories(*config_.journal_dir);
}

std::size_t ChatService::size() const {
  std::lock_guard lock(mu_);
  return sessions_.size();
}

std::shared_ptr<ChatService::Entry> ChatService::find(const std::string& id) const {
  std::lock_guard lock(mu_);
  auto it = sessions_.find(id);
  if (it == sessions_.end()) throw ApiError(404, "unknown session " + id);
  return it->second;
}

std::string ChatService::new_id() {
  for (;;) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(ids_()));
    if (!sessions_.contains(buf)) return buf;
  }
}

void ChatService::journal(const std::string& id, const nlohmann::json& event) const {
  if (!config_.journal_dir) return;
  std::ofstream os(*config_.journal_dir / (id + ".jsonl"), std::ios::app);
  if (!os) throw std::runtime_error("cannot write journal for session " + id);
  os << dump(event) << '\n';
}

nlohmann::json ChatService::create(const nlohmann::json& body) {
  if (!body.is_object()) throw ApiError(422, "request body must be a JSON object");
  if (!body.contains("task") || !body["task"].is_string()) throw ApiError(422, "task required");

  Session s;
  try {
    s.context = sample_from_json(body);
  } catch (const std::exception& e) {
    throw ApiError(422, e.what());
  }
  s.context.history.clear();
  s.context.response.clear();
  if (!generators_.contains(s.context.task)) {
    throw ApiError(422, "no generator loaded for task " + std::string(task_name(s.context.task)));
  }
  DialogSample probe = s.context;
  probe.history = {"你好"};
  try {
    preprocess(probe, config_.pipeline, false);
  } catch (const std::exception& e) {
    throw ApiError(422, e.what());
  }

  s.created = s.updated = now_utc();
  auto entry = std::make_shared<Entry>();
  {
    std::lock_guard lock(mu_);
    s.id = new_id();
    entry->session = s;
    sessions_[s.id] = entry;
  }
  journal(s.id, {{"event", "create"}, {"session", s.to_json()}});
  return {{"session_id", s.id}};
}

void ChatService::apply_message(Session& s, const nlohmann::json& event) {
  s.last_pool = pool_from_json(event.at("candidates"));
  const auto chosen = event.at("chosen_index").get<std::size_t>();
  s.chosen_index = chosen;
  s.transcript.push_back({"user", event.at("text").get<std::string>()});
  s.transcript.push_back({"bot", s.last_pool.at(chosen).text});
  s.updated = event.at("at").get<std::string>();
}

void ChatService::apply_choose(Session& s, std::size_t index, const std::string& at) {
  s.chosen_index = index;
  s.transcript.back().text = s.last_pool.at(index).text;
  s.updated = at;
}

nlohmann::json ChatService::message(const std::string& id, const nlohmann::json& body) {
  auto entry = find(id);
  std::unique_lock busy(entry->busy, std::try_to_lock);
  if (!busy.owns_lock()) throw ApiError(409, "a generation for this session is already in flight");

  if (!body.is_object() || !body.contains("text") || !body["text"].is_string() ||
      body["text"].get<std::string>().empty()) {
    throw ApiError(422, "text required");
  }
  const std::string text = body["text"].get<std::string>();

  DialogSample sample;
  std::size_t user_turns = 0;
  {
    std::lock_guard lock(mu_);
    sample = entry->session.context;
    sample.history = entry->session.history();
    for (const auto& t : entry->session.transcript) user_turns += t.role == "user";
  }
  sample.history.push_back(text);

  DecodeParams params = config_.decoding;
  params.seed = config_.decoding.seed + user_turns;
  if (body.contains("decoding")) {
    try {
      params = DecodeParams::from_json(body["decoding"], params);
    } catch (const std::exception& e) {
      throw ApiError(422, std::string("decoding: ") + e.what());
    }
  }

  const auto& generator = *generators_.at(sample.task);
  CandidatePool pool;
  try {
    pool = generator.respond(sample, config_.pipeline, params);
  } catch (const DataError& e) {
    throw ApiError(422, e.what());
  }
  const auto scored = selector_->rerank(pool, sample.history);

  std::vector<std::size_t> order(pool.candidates.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scored.scores[a] != scored.scores[b]) return scored.scores[a] > scored.scores[b];
    return pool.candidates[a].logprob > pool.candidates[b].logprob;
  });
  std::vector<PoolEntry> sorted;
  std::size_t chosen = 0;
  for (std::size_t i = 0; i < order.size(); ++i) {
    const auto& c = pool.candidates[order[i]];
    sorted.push_back({c.text, c.logprob, scored.scores[order[i]]});
    if (order[i] == scored.chosen) chosen = i;
  }

  const nlohmann::json event{{"event", "message"},     {"text", text},
                             {"decoding", params.to_json()}, {"candidates", pool_json(sorted)},
                             {"chosen_index", chosen},  {"at", now_utc()}};
  {
    std::lock_guard lock(mu_);
    apply_message(entry->session, event);
  }
  journal(id, event);
  return {{"reply", sorted[chosen].text}, {"candidates", event["candidates"]}, {"chosen_index", chosen}};
}

nlohmann::json ChatService::choose(const std::string& id, const nlohmann::json& body) {
  auto entry = find(id);
  std::unique_lock busy(entry->busy, std::try_to_lock);
  if (!busy.owns_lock()) throw ApiError(409, "a generation for this session is already in flight");
  if (!body.is_object() || !body.contains("candidate_index") ||
      !body["candidate_index"].is_number_integer()) {
    throw ApiError(422, "candidate_index required");
  }
  const auto index = body["candidate_index"].get<long long>();
  std::lock_guard lock(mu_);
  Session& s = entry->session;
  if (s.last_pool.empty()) throw ApiError(409, "no candidate pool to choose from yet");
  if (index < 0 || static_cast<std::size_t>(index) >= s.last_pool.size()) {
    throw ApiError(422, "candidate_index " + std::to_string(index) + " out of range [0, " +
                            std::to_string(s.last_pool.size()) + ")");
  }
  const std::string at = now_utc();
  apply_choose(s, static_cast<std::size_t>(index), at);
  journal(id, {{"event", "choose"}, {"candidate_index", index}, {"at", at}});
  return {{"reply", s.transcript.back().text}};
}

nlohmann::json ChatService::get(const std::string& id) const {
  auto entry = find(id);
  std::lock_guard lock(mu_);
  return entry->session.to_json();
}

void ChatService::remove(const std::string& id) {
  auto entry = find(id);
  std::unique_lock busy(entry->busy, std::try_to_lock);
  if (!busy.owns_lock()) throw ApiError(409, "a generation for this session is already in flight");
  {
    std::lock_guard lock(mu_);
    sessions_.erase(id);
  }
  if (config_.journal_dir) std::filesystem::remove(*config_.journal_dir / (id + ".jsonl"));
}

std::size_t ChatService::restore() {
  if (!config_.journal_dir || !std::filesystem::exists(*config_.journal_dir)) return 0;
  std::vector<std::filesystem::path> files;
  for (const auto& f : std::filesystem::directory_iterator(*config_.journal_dir)) {
    if (f.path().extension() == ".jsonl") files.push_back(f.path());
  }
  std::sort(files.begin(), files.end());
  std::size_t restored = 0;
  for (const auto& path : files) {
    std::ifstream is(path);
    std::string line;
    std::size_t lineno = 0;
    auto entry = std::make_shared<Entry>();
    bool created = false;
    while (std::getline(is, line)) {
      ++lineno;
      if (line.empty()) continue;
      try {
        const auto ev = nlohmann::json::parse(line);
        const auto kind = ev.at("event").get<std::string>();
        Session& s = entry->session;
        if (kind == "create") {
          const auto& j = ev.at("session");
          s.id = j.at("session_id").get<std::string>();
          s.context = sample_from_json(j.at("context"));
          s.created = j.at("created").get<std::string>();
          s.updated = j.at("updated").get<std::string>();
          created = true;
        } else if (!created) {
          throw std::runtime_error("event before create");
        } else if (kind == "message") {
          apply_message(s, ev);
        } else if (kind == "choose") {
          apply_choose(s, ev.at("candidate_index").get<std::size_t>(), ev.at("at").get<std::string>());
        } else {
          throw std::runtime_error("unknown event '" + kind + "'");
        }
      } catch (const std::exception& e) {
        throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
      }
    }
    if (!created) continue;
    std::lock_guard lock(mu_);
    sessions_[entry->session.id] = entry;
    ++restored;
  }
  return restored;
}

// --- HTTP -------------------------------------------------------------------

struct HttpServer::Impl {
  std::shared_ptr<ChatService> service;
  httplib::Server server;
};

namespace {

void reply_json(httplib::Response& res, int status, const nlohmann::json& body) {
  res.status = status;
  res.set_content(dump(body), "application/json; charset=utf-8");
}

template <typename Fn>
void guarded(const httplib::Request& req, httplib::Response& res, Fn&& fn) {
  try {
    nlohmann::json body = nlohmann::json::object();
    if (!req.body.empty()) body = nlohmann::json::parse(req.body);
    fn(body);
  } catch (const ApiError& e) {
    reply_json(res, e.status(), {{"error", e.what()}});
  } catch (const nlohmann::json::parse_error& e) {
    reply_json(res, 400, {{"error", std::string("invalid JSON: ") + e.what()}});
  } catch (const std::exception& e) {
    reply_json(res, 500, {{"error", e.what()}});
  }
}

}  // namespace

HttpServer::HttpServer(std::shared_ptr<ChatService> service, std::size_t workers)
    : impl_(std::make_unique<Impl>()) {
  impl_->service = std::move(service);
  auto& svr = impl_->server;
  auto* svc = impl_->service.get();
  svr.new_task_queue = [workers] { return new httplib::ThreadPool(std::max<std::size_t>(workers, 1)); };
  svr.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                           {"Access-Control-Allow-Methods", "GET, POST, DELETE, OPTIONS"},
                           {"Access-Control-Allow-Headers", "Content-Type"}});
  svr.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

  svr.Post("/v1/sessions", [svc](const httplib::Request& req, httplib::Response& res) {
    guarded(req, res, [&](const nlohmann::json& body) { reply_json(res, 201, svc->create(body)); });
  });
  svr.Post(R"(/v1/sessions/([0-9a-f]+)/messages)",
           [svc](const httplib::Request& req, httplib::Response& res) {
             guarded(req, res, [&](const nlohmann::json& body) {
               reply_json(res, 200, svc->message(req.matches[1], body));
             });
           });
  svr.Post(R"(/v1/sessions/([0-9a-f]+)/choose)",
           [svc](const httplib::Request& req, httplib::Response& res) {
             guarded(req, res, [&](const nlohmann::json& body) {
               reply_json(res, 200, svc->choose(req.matches[1], body));
             });
           });
  svr.Get(R"(/v1/sessions/([0-9a-f]+))", [svc](const httplib::Request& req, httplib::Response& res) {
    guarded(req, res, [&](const nlohmann::json&) { reply_json(res, 200, svc->get(req.matches[1])); });
  });
  svr.Delete(R"(/v1/sessions/([0-9a-f]+))",
             [svc](const httplib::Request& req, httplib::Response& res) {
               guarded(req, res, [&](const nlohmann::json&) {
                 svc->remove(req.matches[1]);
                 res.status = 204;
               });
             });
  svr.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (res.body.empty()) reply_json(res, res.status, {{"error", "no such route"}});
  });
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::start(const std::string& host, int port) {
  auto& svr = impl_->server;
  int bound = port;
  if (port == 0) {
    bound = svr.bind_to_any_port(host);
  } else if (!svr.bind_to_port(host, port)) {
    bound = -1;
  }
  if (bound < 0) throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
  thread_ = std::thread([&svr] { svr.listen_after_bind(); });
  svr.wait_until_ready();
  return bound;
}

void HttpServer::listen(const std::string& host, int port) {
  if (!impl_->server.listen(host, port)) {
    throw std::runtime_error("cannot listen on " + host + ":" + std::to_string(port));
  }
}

void HttpServer::stop() {
  if (impl_) impl_->server.stop();
  if (thread_.joinable()) thread_.join();
}

}  // namespace msdf
