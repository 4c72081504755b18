#pragma once

// History/response consistency classifier and candidate reranking.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "msdf/dialog.hpp"
#include "msdf/generator.hpp"
#include "msdf/optim.hpp"
#include "msdf/params.hpp"
#include "msdf/transformer.hpp"
#include "msdf/vocab.hpp"

namespace msdf {

struct SelectorPair {
  std::vector<std::string> history;  // turns, oldest first
  std::string response;
  int label = 0;  // 1 consistent, 0 inconsistent
};

// One positive per sample plus neg_ratio negatives whose response is drawn
// uniformly from the other samples. A draw that would reproduce a positive
// (history, response) pair is redrawn. Throws DataError for fewer than two
// samples or when no foreign response differs from the gold one.
std::vector<SelectorPair> build_pairs(std::span<const DialogSample> corpus, std::size_t neg_ratio,
                                      std::uint64_t seed);

struct SelectorEval {
  double loss = 0.0;  // mean cross-entropy
  double accuracy = 0.0;
};

struct ScoredPool {
  std::vector<double> scores;
  std::size_t chosen = 0;
};

// Index with the highest score; ties go to the higher log-probability, then
// to the lowest index. Throws std::invalid_argument on an empty pool or
// mismatched lengths.
std::size_t select_final(std::span<const double> scores, std::span<const double> logprobs);

class SelectorModel {
 public:
  // Only d, n_layers, n_heads, d_ff, max_len, dropout and init_std are used;
  // vocab_size follows `vocab`.
  static SelectorModel create(ModelConfig config, Vocab vocab, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  const Vocab& vocab() const { return vocab_; }
  ParamList parameters() const;

  // [CLS] history [SEP] response [SEP]. The response keeps its head (at most
  // half the budget), the history keeps its tail.
  std::vector<int> encode_pair(std::span<const std::string> history,
                               std::string_view response) const;
  Tensor logits(std::span<const int> ids, const ForwardContext& ctx = {}) const;  // [1×2]
  Tensor loss(const SelectorPair& pair, const ForwardContext& ctx = {}) const;

  // Positive-class probability.
  double score(std::span<const std::string> history, std::string_view response) const;
  SelectorEval evaluate(std::span<const SelectorPair> pairs) const;
  ScoredPool rerank(const CandidatePool& pool, std::span<const std::string> history) const;

  Checkpoint to_checkpoint() const;
  static SelectorModel from_checkpoint(const Checkpoint& ck);
  void save(const std::filesystem::path& path) const;
  static SelectorModel load(const std::filesystem::path& path);

  Tensor token_table;  // [V×d]
  std::shared_ptr<Encoder> encoder;
  Tensor head;  // [d×2]

 private:
  ModelConfig config_;
  Vocab vocab_;
};

struct SelectorTrainConfig {
  AdamWConfig optim{};
  std::size_t batch_size = 16;
  std::size_t max_steps = 2000;
  std::size_t eval_every = 100;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
};

struct SelectorTrainResult {
  SelectorModel model;  // parameters at the lowest dev loss
  double best_dev_loss = 0.0;
  std::size_t best_step = 0;
  std::vector<nlohmann::json> log;  // {step, loss, dev_loss, dev_accuracy}
};

// Minibatch AdamW on shuffled pairs. Dev loss is measured every eval_every
// steps and at the end; the best parameters are kept. Throws DivergenceError
// on a non-finite loss.
SelectorTrainResult train_selector(SelectorModel model, std::span<const SelectorPair> train,
                                   std::span<const SelectorPair> dev,
                                   const SelectorTrainConfig& config,
                                   const std::function<void(const nlohmann::json&)>& on_log = {});

}  // namespace msdf
