#include "msdf/selector.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <stdexcept>

namespace msdf {

std::vector<SelectorPair> build_pairs(std::span<const DialogSample> corpus, std::size_t neg_ratio,
                                      std::uint64_t seed) {
  if (corpus.size() < 2) {
    throw DataError("build_pairs: need at least 2 samples to draw negatives, got " +
                    std::to_string(corpus.size()));
  }
  std::set<std::pair<std::vector<std::string>, std::string>> positives;
  for (const auto& s : corpus) positives.emplace(s.history, s.response);

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, corpus.size() - 2);
  std::vector<SelectorPair> pairs;
  pairs.reserve(corpus.size() * (1 + neg_ratio));
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto& s = corpus[i];
    pairs.push_back({s.history, s.response, 1});
    bool any_foreign = false;
    for (std::size_t j = 0; j < corpus.size() && !any_foreign; ++j) {
      any_foreign = j != i && !positives.contains({s.history, corpus[j].response});
    }
    if (neg_ratio > 0 && !any_foreign) {
      throw DataError("build_pairs: sample " + std::to_string(i) +
                      " has no foreign response that differs from a gold pair");
    }
    for (std::size_t k = 0; k < neg_ratio; ++k) {
      for (;;) {
        std::size_t j = pick(rng);
        if (j >= i) ++j;  // uniform over the other samples
        if (positives.contains({s.history, corpus[j].response})) continue;
        pairs.push_back({s.history, corpus[j].response, 0});
        break;
      }
    }
  }
  return pairs;
}

std::size_t select_final(std::span<const double> scores, std::span<const double> logprobs) {
  if (scores.empty()) throw std::invalid_argument("select_final: empty candidate pool");
  if (scores.size() != logprobs.size()) {
    throw std::invalid_argument("select_final: " + std::to_string(scores.size()) + " scores for " +
                                std::to_string(logprobs.size()) + " candidates");
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[best] || (scores[i] == scores[best] && logprobs[i] > logprobs[best])) {
      best = i;
    }
  }
  return best;
}

SelectorModel SelectorModel::create(ModelConfig config, Vocab vocab, std::uint64_t seed) {
  config.vocab_size = vocab.size();
  config.use_knowledge = false;
  config.use_persona = false;
  config.validate();
  if (config.max_len < 4) throw std::invalid_argument("selector: max_len must be at least 4");
  std::mt19937_64 rng(seed);
  SelectorModel m;
  m.config_ = config;
  m.vocab_ = std::move(vocab);
  m.token_table = init_normal({config.vocab_size, config.d}, config.init_std, rng);
  m.encoder = Encoder::make(config, rng);
  m.head = init_normal({config.d, 2}, config.init_std, rng);
  return m;
}

ParamList SelectorModel::parameters() const {
  ParamList p;
  p.add("embed", token_table);
  encoder->collect(p, "encoder.");
  p.add("head", head);
  return p;
}

std::vector<int> SelectorModel::encode_pair(std::span<const std::string> history,
                                            std::string_view response) const {
  const std::size_t budget = config_.max_len - 3;  // CLS, SEP, SEP
  auto resp = vocab_.encode(response);
  if (resp.size() > budget / 2) resp.resize(budget / 2);
  const std::size_t hist_budget = budget - resp.size();
  auto hist = vocab_.encode(build_history(history, hist_budget));
  if (hist.size() > hist_budget) hist.erase(hist.begin(), hist.end() - static_cast<long>(hist_budget));

  std::vector<int> ids;
  ids.reserve(hist.size() + resp.size() + 3);
  ids.push_back(tok::kCls);
  ids.insert(ids.end(), hist.begin(), hist.end());
  ids.push_back(tok::kSep);
  ids.insert(ids.end(), resp.begin(), resp.end());
  ids.push_back(tok::kSep);
  return ids;
}

Tensor SelectorModel::logits(std::span<const int> ids, const ForwardContext& ctx) const {
  const auto enc = encoder->encode(token_table, ids, ctx);
  return matmul(slice_rows(enc.states, 0, 1), head);
}

Tensor SelectorModel::loss(const SelectorPair& pair, const ForwardContext& ctx) const {
  const auto ids = encode_pair(pair.history, pair.response);
  const std::vector<int> target{pair.label};
  return cross_entropy_nll(log_softmax(logits(ids, ctx)), target);
}

double SelectorModel::score(std::span<const std::string> history, std::string_view response) const {
  NoGradGuard guard;
  const auto ids = encode_pair(history, response);
  return softmax(logits(ids), 1).at(1);
}

SelectorEval SelectorModel::evaluate(std::span<const SelectorPair> pairs) const {
  NoGradGuard guard;
  SelectorEval e;
  if (pairs.empty()) return e;
  std::size_t correct = 0;
  for (const auto& p : pairs) {
    const auto lp = log_softmax(logits(encode_pair(p.history, p.response)));
    e.loss -= lp.at(static_cast<std::size_t>(p.label));
    const int predicted = lp.at(1) > lp.at(0) ? 1 : 0;
    if (predicted == p.label) ++correct;
  }
  e.loss /= static_cast<double>(pairs.size());
  e.accuracy = static_cast<double>(correct) / static_cast<double>(pairs.size());
  return e;
}

ScoredPool SelectorModel::rerank(const CandidatePool& pool,
                                 std::span<const std::string> history) const {
  ScoredPool out;
  std::vector<double> logprobs;
  for (const auto& c : pool.candidates) {
    out.scores.push_back(score(history, c.text));
    logprobs.push_back(c.logprob);
  }
  out.chosen = select_final(out.scores, logprobs);
  return out;
}

Checkpoint SelectorModel::to_checkpoint() const {
  Checkpoint ck;
  ck.meta["kind"] = "selector";
  ck.meta["config"] = config_.to_json();
  ck.meta["vocab"] = vocab_.to_json();
  ck.add_params(parameters());
  return ck;
}

SelectorModel SelectorModel::from_checkpoint(const Checkpoint& ck) {
  if (ck.meta.value("kind", std::string{}) != "selector") {
    throw std::runtime_error("checkpoint is not a selector");
  }
  auto m = create(ModelConfig::from_json(ck.meta["config"]), Vocab::from_json(ck.meta["vocab"]), 0);
  auto params = m.parameters();
  ck.load_into(params);
  return m;
}

void SelectorModel::save(const std::filesystem::path& path) const { to_checkpoint().save(path); }

SelectorModel SelectorModel::load(const std::filesystem::path& path) {
  return from_checkpoint(Checkpoint::load(path));
}

SelectorTrainResult train_selector(SelectorModel model, std::span<const SelectorPair> train,
                                   std::span<const SelectorPair> dev,
                                   const SelectorTrainConfig& config,
                                   const std::function<void(const nlohmann::json&)>& on_log) {
  if (train.empty()) throw std::invalid_argument("train_selector: no training pairs");
  if (config.batch_size == 0) throw std::invalid_argument("train_selector: batch_size must be positive");
  std::mt19937_64 rng(config.seed);
  auto params = model.parameters();
  auto tensors = params.tensors();
  AdamW opt(tensors, config.optim);
  const ForwardContext train_ctx{true, model.config().dropout, &rng};

  SelectorTrainResult result{model.from_checkpoint(model.to_checkpoint()), 0.0, 0, {}};
  result.best_dev_loss = std::numeric_limits<double>::infinity();
  auto consider = [&](std::size_t step, double train_loss) {
    const auto e = dev.empty() ? model.evaluate(train) : model.evaluate(dev);
    nlohmann::json entry{{"step", step}, {"loss", train_loss}, {"dev_loss", e.loss},
                         {"dev_accuracy", e.accuracy}};
    result.log.push_back(entry);
    if (on_log) on_log(entry);
    if (e.loss < result.best_dev_loss) {
      result.best_dev_loss = e.loss;
      result.best_step = step;
      result.model = SelectorModel::from_checkpoint(model.to_checkpoint());
    }
  };

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0;
  double running = 0.0;
  for (std::size_t step = 1; step <= config.max_steps; ++step) {
    opt.zero_grad();
    double batch_loss = 0.0;
    for (std::size_t b = 0; b < config.batch_size; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      Tensor l;
      try {
        l = scale(model.loss(train[order[cursor++]], train_ctx),
                  1.0 / static_cast<double>(config.batch_size));
      } catch (const NumericError& e) {
        throw DivergenceError("selector training diverged at step " + std::to_string(step) + ": " +
                              e.what());
      }
      batch_loss += l.item();
      l.backward();
    }
    const double norm = clip_grad_norm(tensors, config.clip_norm);
    if (!std::isfinite(batch_loss) || !std::isfinite(norm)) {
      throw DivergenceError("selector training diverged at step " + std::to_string(step) +
                            " (loss " + std::to_string(batch_loss) + ", grad norm " +
                            std::to_string(norm) + ")");
    }
    opt.step();
    running = step == 1 ? batch_loss : 0.9 * running + 0.1 * batch_loss;
    if (config.eval_every > 0 && step % config.eval_every == 0) consider(step, running);
  }
  if (config.eval_every == 0 || config.max_steps % config.eval_every != 0) {
    consider(config.max_steps, running);
  }
  return result;
}

}  // namespace msdf
