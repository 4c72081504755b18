#pragma once

// Chat sessions over the generate → rerank loop, with an append-only journal
// and a JSON/HTTP front end.

#include <atomic>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "msdf/dialog.hpp"
#include "msdf/generator.hpp"
#include "msdf/selector.hpp"

namespace msdf {

// An error with the HTTP status it maps to.
class ApiError : public std::runtime_error {
 public:
  ApiError(int status, const std::string& message) : std::runtime_error(message), status_(status) {}
  int status() const { return status_; }

 private:
  int status_;
};

struct Turn {
  std::string role;  // "user" or "bot"
  std::string text;
};

struct PoolEntry {
  std::string text;
  double gen_logprob = 0.0;
  double consistency = 0.0;
};

struct Session {
  std::string id;
  DialogSample context;  // task and fixed inputs; history and response unused
  std::vector<Turn> transcript;
  std::vector<PoolEntry> last_pool;  // sorted by consistency, highest first
  std::optional<std::size_t> chosen_index;
  std::string created, updated;

  nlohmann::json to_json() const;
  std::vector<std::string> history() const;
};

struct ServiceConfig {
  PipelineConfig pipeline;
  DecodeParams decoding;  // defaults for messages without a "decoding" object
  std::optional<std::filesystem::path> journal_dir;
};

class ChatService {
 public:
  // One generator per task; sessions of a task without a generator are
  // rejected at creation.
  ChatService(std::vector<std::shared_ptr<const GeneratorModel>> generators,
              std::shared_ptr<const SelectorModel> selector, ServiceConfig config);

  // Replays every journal in journal_dir. Returns the number of sessions.
  std::size_t restore();

  nlohmann::json create(const nlohmann::json& body);
  nlohmann::json message(const std::string& id, const nlohmann::json& body);
  nlohmann::json choose(const std::string& id, const nlohmann::json& body);
  nlohmann::json get(const std::string& id) const;
  void remove(const std::string& id);

  std::size_t size() const;

 private:
  struct Entry {
    Session session;
    std::mutex busy;  // held for the whole of a message or choose call
  };

  std::map<Task, std::shared_ptr<const GeneratorModel>> generators_;
  std::shared_ptr<const SelectorModel> selector_;
  ServiceConfig config_;
  mutable std::mutex mu_;
  std::map<std::string, std::shared_ptr<Entry>> sessions_;
  std::mt19937_64 ids_;

  std::shared_ptr<Entry> find(const std::string& id) const;
  std::string new_id();
  void journal(const std::string& id, const nlohmann::json& event) const;
  static void apply_message(Session& s, const nlohmann::json& event);
  static void apply_choose(Session& s, std::size_t index, const std::string& at);
};

// HTTP routes:
//   POST   /v1/sessions                   201 {session_id}
//   POST   /v1/sessions/{id}/messages     200 {reply, candidates, chosen_index}
//   POST   /v1/sessions/{id}/choose       200 {reply}
//   GET    /v1/sessions/{id}              200 session
//   DELETE /v1/sessions/{id}              204
// Errors are {"error": message} with 404, 409, 422, or 400 for bad JSON.
class HttpServer {
 public:
  explicit HttpServer(std::shared_ptr<ChatService> service, std::size_t workers = 4);
  ~HttpServer();

  // Binds and serves on a background thread. Port 0 picks a free port.
  // Returns the bound port.
  int start(const std::string& host, int port);
  // Blocks serving on the calling thread.
  void listen(const std::string& host, int port);
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  std::thread thread_;
};

}  // namespace msdf
