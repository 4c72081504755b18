#include "msdf/generator.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>

namespace msdf {

void DecodeParams::validate() const {
  if (pool_size < 1) throw std::invalid_argument("decode: pool_size must be at least 1");
  if (top_k < 1) throw std::invalid_argument("decode: top_k must be at least 1");
  if (!(temperature >= 0.0)) throw std::invalid_argument("decode: temperature must be >= 0");
  if (max_new_tokens < 1) throw std::invalid_argument("decode: max_new_tokens must be at least 1");
}

nlohmann::json DecodeParams::to_json() const {
  return {{"pool_size", pool_size},
          {"top_k", top_k},
          {"temperature", temperature},
          {"max_new_tokens", max_new_tokens},
          {"seed", seed}};
}

DecodeParams DecodeParams::from_json(const nlohmann::json& j, const DecodeParams& defaults) {
  DecodeParams p = defaults;
  if (j.is_null()) return p;
  auto read_count = [&](const char* key, std::size_t& out) {
    if (!j.contains(key)) return;
    const auto v = j[key].get<long long>();
    if (v < 1) throw std::invalid_argument(std::string("decode: ") + key + " must be at least 1");
    out = static_cast<std::size_t>(v);
  };
  read_count("pool_size", p.pool_size);
  read_count("top_k", p.top_k);
  read_count("max_new_tokens", p.max_new_tokens);
  p.temperature = j.value("temperature", p.temperature);
  p.seed = j.value("seed", p.seed);
  p.validate();
  return p;
}

DecodeParams DecodeParams::from_json(const nlohmann::json& j) {
  return from_json(j, DecodeParams{});
}

ModelConfig config_for_task(ModelConfig base, Task task) {
  base.use_knowledge = task == Task::kKnowledge || task == Task::kRecommendation;
  base.use_persona = task == Task::kPersona || task == Task::kRecommendation;
  return base;
}

GeneratorModel GeneratorModel::create(Task task, ModelConfig config, Vocab vocab,
                                      std::uint64_t seed, std::optional<bool> copy) {
  GeneratorModel m;
  m.task_ = task;
  m.config_ = config_for_task(config, task);
  m.config_.vocab_size = vocab.size();
  m.config_.validate();
  m.vocab_ = std::move(vocab);
  const auto& c = m.config_;

  std::mt19937_64 rng(seed);
  m.token_table = init_normal({c.vocab_size, c.d}, c.init_std, rng);
  if (!c.share_embeddings) m.encoder_table = init_normal({c.vocab_size, c.d}, c.init_std, rng);
  if (!c.tie_lm_head) m.lm_head = init_normal({c.d, c.vocab_size}, c.init_std, rng);
  m.history_encoder = Encoder::make(c, rng);
  if (c.use_knowledge) m.knowledge_encoder = Encoder::make(c, rng);
  if (c.use_persona) {
    m.persona_encoder =
        task == Task::kRecommendation ? m.knowledge_encoder : Encoder::make(c, rng);
  }
  m.decoder = Decoder::make(c, rng);

  const bool want_copy = copy.value_or(task == Task::kKnowledge || task == Task::kRecommendation);
  if (want_copy) {
    if (!c.use_knowledge) {
      throw std::invalid_argument("copy head needs a knowledge source; task " +
                                  std::string(task_name(task)) + " has none");
    }
    m.copy_ = CopyHeadParams::make(c.d, c.init_std, rng);
  }
  return m;
}

ParamList GeneratorModel::parameters() const {
  ParamList p;
  p.add("embed", token_table);
  if (encoder_table.defined()) p.add("enc_embed", encoder_table);
  if (lm_head.defined()) p.add("lm_head", lm_head);
  history_encoder->collect(p, "history.");
  if (knowledge_encoder) knowledge_encoder->collect(p, "knowledge.");
  if (persona_encoder) persona_encoder->collect(p, "persona.");
  decoder.collect(p, "decoder.");
  if (copy_) copy_->collect(p, "copy.");
  return p;
}

GeneratorModel GeneratorModel::transplant(Task task, std::uint64_t seed) const {
  if (task_ != Task::kChat) {
    throw std::invalid_argument("transplant starts from a history-only model, not " +
                                std::string(task_name(task_)));
  }
  GeneratorModel out = create(task, config_, vocab_, seed);
  const ParamList src = parameters();
  ParamList dst = out.parameters();
  copy_matching(src, dst);

  auto copy_values = [](const Tensor& from, Tensor to) {
    std::copy(from.data().begin(), from.data().end(), to.mutable_data().begin());
  };
  for (const auto& item : dst.items()) {
    for (const std::string prefix : {"knowledge.", "persona."}) {
      if (item.name.rfind(prefix, 0) != 0) continue;
      const Tensor* from = src.find("history." + item.name.substr(prefix.size()));
      if (from != nullptr) copy_values(*from, item.tensor);
    }
  }
  const std::size_t d = config_.d;
  for (std::size_t l = 0; l < out.decoder.blocks.size(); ++l) {
    const auto& old_block = decoder.blocks[l];
    auto& block = out.decoder.blocks[l];
    auto wp = block.w_p.mutable_data();
    std::fill(wp.begin(), wp.end(), 0.0);
    std::copy_n(old_block.w_p.data().begin(), d * d, wp.begin());
    for (std::size_t s = 1; s < block.cross.size(); ++s) {
      copy_values(old_block.cross[0].q.w, block.cross[s].q.w);
      copy_values(old_block.cross[0].k.w, block.cross[s].k.w);
      copy_values(old_block.cross[0].v.w, block.cross[s].v.w);
    }
  }
  return out;
}

namespace {

std::vector<int> keep_head(std::vector<int> ids, std::size_t n) {
  if (ids.size() > n) ids.resize(n);
  return ids;
}

std::vector<int> keep_tail(std::vector<int> ids, std::size_t n) {
  if (ids.size() > n) ids.erase(ids.begin(), ids.end() - static_cast<long>(n));
  return ids;
}

std::vector<int> or_cls(std::vector<int> ids) {
  if (ids.empty()) ids.push_back(tok::kCls);
  return ids;
}

}  // namespace

EncodedInput GeneratorModel::encode(const ProcessedSample& sample,
                                    const PipelineConfig& pipeline) const {
  const std::size_t max_len = config_.max_len;
  EncodedInput in;
  in.history = or_cls(
      keep_tail(vocab_.encode(sample.history), std::min(pipeline.max_history_tokens, max_len)));
  if (sample.knowledge) {
    in.knowledge = or_cls(keep_head(vocab_.encode(*sample.knowledge),
                                    std::min(pipeline.max_knowledge_tokens, max_len)));
  }
  if (sample.persona) {
    in.persona = or_cls(keep_head(vocab_.encode(*sample.persona),
                                  std::min(pipeline.max_persona_tokens, max_len)));
  }
  in.target = keep_head(vocab_.encode(sample.target),
                        std::min(pipeline.max_response_tokens, max_len - 1));
  return in;
}

GenerationContext GeneratorModel::context(const EncodedInput& input,
                                          const ForwardContext& ctx) const {
  GenerationContext g;
  if (input.history.empty()) throw MissingSourceError("history");
  g.sources.history = history_encoder->encode(source_table(), input.history, ctx);
  if (config_.use_knowledge) {
    if (input.knowledge.empty()) throw MissingSourceError("knowledge");
    g.sources.knowledge = knowledge_encoder->encode(source_table(), input.knowledge, ctx);
    g.knowledge_ids = input.knowledge;
  }
  if (config_.use_persona) {
    if (input.persona.empty()) throw MissingSourceError("persona");
    g.sources.persona = persona_encoder->encode(source_table(), input.persona, ctx);
  }
  g.memory = decoder.project(g.sources);
  return g;
}

Tensor GeneratorModel::lm_logits(const Tensor& h_d) const {
  return lm_head.defined() ? matmul(h_d, lm_head) : matmul_nt(h_d, token_table);
}

Tensor GeneratorModel::output_log_probs(const Tensor& h_d, const GenerationContext& g) const {
  if (!copy_) return log_softmax(lm_logits(h_d));
  const Tensor p_vocab = softmax(lm_logits(h_d), 1);
  const EncodedSource& k = *g.sources.knowledge;
  const Tensor a_copy = copy_attention(h_d, k.states, k.keep, *copy_);
  const Tensor p_gen = generation_gate(a_copy, k.states, h_d, *copy_);
  return merge_distributions(p_vocab, a_copy, p_gen, g.knowledge_ids);
}

TeacherForced GeneratorModel::forward_teacher_forced(const EncodedInput& input,
                                                     const ForwardContext& ctx) const {
  const GenerationContext g = context(input, ctx);
  std::vector<int> dec_in{tok::kBos};
  dec_in.insert(dec_in.end(), input.target.begin(), input.target.end());
  TeacherForced out;
  out.targets = input.target;
  out.targets.push_back(tok::kEos);
  const Tensor h = decoder.forward(token_table, dec_in, g.memory, nullptr, ctx);
  out.log_probs = output_log_probs(h, g);
  out.nll = cross_entropy_nll(out.log_probs, out.targets);
  return out;
}

std::vector<double> GeneratorModel::next_log_probs(const GenerationContext& g,
                                                   std::span<const int> prefix) const {
  NoGradGuard no_grad;
  const Tensor h = decoder.forward(token_table, prefix, g.memory, nullptr);
  const Tensor lp = output_log_probs(slice_rows(h, h.dim(0) - 1, 1), g);
  return {lp.data().begin(), lp.data().end()};
}

namespace {

bool banned(int id) {
  return id == tok::kPad || id == tok::kBos || id == tok::kUnk || id == tok::kCls;
}

// Top-k sampling at the given temperature; ties in log-probability resolve
// to the lower id. A temperature of (nearly) zero is greedy.
int sample_token(std::span<const double> lp, std::size_t top_k, double temperature,
                 std::mt19937_64& rng) {
  std::vector<int> order;
  order.reserve(lp.size());
  for (std::size_t i = 0; i < lp.size(); ++i)
    if (!banned(static_cast<int>(i))) order.push_back(static_cast<int>(i));
  const std::size_t k = std::min(top_k, order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<long>(k), order.end(),
                    [&](int a, int b) { return lp[a] > lp[b] || (lp[a] == lp[b] && a < b); });
  order.resize(k);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double draw = u(rng);  // always consumed so the stream does not depend on k
  if (temperature < 1e-6 || k == 1) return order[0];
  std::vector<double> w(k);
  double total = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    w[i] = std::exp((lp[order[i]] - lp[order[0]]) / temperature);
    total += w[i];
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    acc += w[i] / total;
    if (draw < acc) return order[i];
  }
  return order[k - 1];
}

}  // namespace

CandidatePool GeneratorModel::sample_pool(const GenerationContext& g,
                                          const DecodeParams& params) const {
  params.validate();
  NoGradGuard no_grad;
  CandidatePool pool;
  pool.pool_size = params.pool_size;
  std::mt19937_64 rng(params.seed);
  const std::size_t max_new = std::min(params.max_new_tokens, config_.max_len - 1);
  for (std::size_t s = 0; s < params.pool_size; ++s) {
    Candidate c;
    std::vector<LayerCache> cache(decoder.blocks.size());
    int last = tok::kBos;
    for (std::size_t step = 0; step < max_new; ++step) {
      const int in[1] = {last};
      const Tensor h = decoder.forward(token_table, in, g.memory, &cache);
      const Tensor lp = output_log_probs(h, g);
      const int next = sample_token(lp.data(), params.top_k, params.temperature, rng);
      c.logprob += lp.data()[static_cast<std::size_t>(next)];
      if (next == tok::kEos) {
        c.ended = true;
        break;
      }
      c.ids.push_back(next);
      last = next;
    }
    const bool duplicate = std::any_of(pool.candidates.begin(), pool.candidates.end(),
                                       [&](const Candidate& o) { return o.ids == c.ids; });
    if (duplicate) continue;
    c.raw_text = vocab_.decode(c.ids, true);
    c.text = c.raw_text;
    pool.candidates.push_back(std::move(c));
  }
  return pool;
}

CandidatePool GeneratorModel::respond(const DialogSample& sample, const PipelineConfig& pipeline,
                                      const DecodeParams& params) const {
  const ProcessedSample proc = preprocess(sample, pipeline, false);
  const EncodedInput in = encode(proc, pipeline);
  GenerationContext g;
  {
    NoGradGuard no_grad;
    g = context(in);
  }
  CandidatePool pool = sample_pool(g, params);
  for (auto& c : pool.candidates) {
    c.text = postprocess_response(c.raw_text, proc.placeholders, proc.user_name,
                                  pipeline.reprocess_rules);
  }
  return pool;
}

Checkpoint GeneratorModel::to_checkpoint() const {
  Checkpoint ck;
  ck.meta["kind"] = "generator";
  ck.meta["task"] = std::string(task_name(task_));
  ck.meta["copy"] = copy_enabled();
  ck.meta["config"] = config_.to_json();
  ck.meta["vocab"] = vocab_.to_json();
  ck.add_params(parameters());
  return ck;
}

GeneratorModel GeneratorModel::from_checkpoint(const Checkpoint& ck) {
  if (ck.meta.value("kind", std::string()) != "generator") {
    throw std::runtime_error("checkpoint does not hold a generator");
  }
  GeneratorModel m = create(parse_task(ck.meta["task"].get<std::string>()),
                            ModelConfig::from_json(ck.meta["config"]),
                            Vocab::from_json(ck.meta["vocab"]), 0, ck.meta["copy"].get<bool>());
  ParamList params = m.parameters();
  ck.load_into(params);
  return m;
}

void GeneratorModel::save(const std::filesystem::path& path) const { to_checkpoint().save(path); }

GeneratorModel GeneratorModel::load(const std::filesystem::path& path) {
  return from_checkpoint(Checkpoint::load(path));
}

}  // namespace msdf
