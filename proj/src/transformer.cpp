#include "msdf/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "msdf/vocab.hpp"

namespace msdf {

std::string_view source_name(Source s) {
  switch (s) {
    case Source::kHistory: return "history";
    case Source::kKnowledge: return "knowledge";
    case Source::kPersona: return "persona";
  }
  return "history";
}

std::vector<Source> ModelConfig::sources() const {
  std::vector<Source> out{Source::kHistory};
  if (use_knowledge) out.push_back(Source::kKnowledge);
  if (use_persona) out.push_back(Source::kPersona);
  return out;
}

void ModelConfig::validate() const {
  auto bad = [](const std::string& what) { throw std::invalid_argument("model config: " + what); };
  if (d == 0 || n_heads == 0 || d % n_heads != 0) bad("d must be a positive multiple of n_heads");
  if (n_layers == 0) bad("n_layers must be positive");
  if (d_ff == 0) bad("d_ff must be positive");
  if (max_len < 2) bad("max_len must be at least 2");
  if (vocab_size <= static_cast<std::size_t>(tok::kNumReserved)) bad("vocab_size too small");
  if (dropout < 0.0 || dropout >= 1.0) bad("dropout must be in [0, 1)");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"d", d},
          {"n_layers", n_layers},
          {"n_heads", n_heads},
          {"d_ff", d_ff},
          {"vocab_size", vocab_size},
          {"max_len", max_len},
          {"dropout", dropout},
          {"use_knowledge", use_knowledge},
          {"use_persona", use_persona},
          {"n_sources", n_sources()},
          {"share_embeddings", share_embeddings},
          {"tie_lm_head", tie_lm_head},
          {"init_std", init_std}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.d = j.value("d", c.d);
  c.n_layers = j.value("n_layers", c.n_layers);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.d_ff = j.value("d_ff", c.d_ff);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.max_len = j.value("max_len", c.max_len);
  c.dropout = j.value("dropout", c.dropout);
  c.use_knowledge = j.value("use_knowledge", c.use_knowledge);
  c.use_persona = j.value("use_persona", c.use_persona);
  c.share_embeddings = j.value("share_embeddings", c.share_embeddings);
  c.tie_lm_head = j.value("tie_lm_head", c.tie_lm_head);
  c.init_std = j.value("init_std", c.init_std);
  c.validate();
  return c;
}

Tensor ForwardContext::drop(const Tensor& x) const {
  if (!training || dropout <= 0.0 || rng == nullptr) return x;
  return ::msdf::dropout(x, dropout, *rng, true);
}

// --- small layers --------------------------------------------------------------

Linear Linear::make(std::size_t in, std::size_t out, bool bias, double stddev,
                    std::mt19937_64& rng) {
  Linear l;
  l.w = init_normal({in, out}, stddev, rng);
  if (bias) l.b = init_zeros({out});
  return l;
}

Tensor Linear::operator()(const Tensor& x) const {
  Tensor y = matmul(x, w);
  return b.defined() ? add_bias(y, b) : y;
}

void Linear::collect(ParamList& params, const std::string& prefix) const {
  params.add(prefix + "w", w);
  if (b.defined()) params.add(prefix + "b", b);
}

LayerNormParams LayerNormParams::make(std::size_t d) {
  return {init_ones({d}), init_zeros({d})};
}

void LayerNormParams::collect(ParamList& params, const std::string& prefix) const {
  params.add(prefix + "gain", gain);
  params.add(prefix + "bias", bias);
}

FeedForward FeedForward::make(std::size_t d, std::size_t d_ff, double stddev,
                              std::mt19937_64& rng) {
  FeedForward f;
  f.in = Linear::make(d, d_ff, true, stddev, rng);
  f.out = Linear::make(d_ff, d, true, stddev, rng);
  return f;
}

void FeedForward::collect(ParamList& params, const std::string& prefix) const {
  in.collect(params, prefix + "in.");
  out.collect(params, prefix + "out.");
}

// --- attention -----------------------------------------------------------------

AttentionMask causal_mask(std::size_t n_queries, std::size_t past) {
  const std::size_t n_keys = past + n_queries;
  AttentionMask keep(n_queries * n_keys, 0);
  for (std::size_t i = 0; i < n_queries; ++i)
    for (std::size_t j = 0; j <= past + i; ++j) keep[i * n_keys + j] = 1;
  return keep;
}

AttentionMask key_mask(std::size_t n_queries, std::span<const std::uint8_t> key_keep) {
  AttentionMask keep;
  keep.reserve(n_queries * key_keep.size());
  for (std::size_t i = 0; i < n_queries; ++i) keep.insert(keep.end(), key_keep.begin(), key_keep.end());
  return keep;
}

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            std::size_t n_heads, std::span<const std::uint8_t> keep) {
  const std::size_t d = q.dim(1);
  if (k.dim(1) != d || v.dim(1) != d || k.dim(0) != v.dim(0)) {
    throw DimensionError("attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) +
                         ", v " + shape_str(v.shape()));
  }
  if (keep.size() != q.dim(0) * k.dim(0)) throw DimensionError("attention: mask size mismatch");
  const std::size_t dh = d / n_heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  if (n_heads == 1) return matmul(masked_softmax(scale(matmul_nt(q, k), inv), keep), v);
  std::vector<Tensor> heads;
  heads.reserve(n_heads);
  for (std::size_t h = 0; h < n_heads; ++h) {
    Tensor qh = slice_last(q, h * dh, dh);
    Tensor kh = slice_last(k, h * dh, dh);
    Tensor vh = slice_last(v, h * dh, dh);
    heads.push_back(matmul(masked_softmax(scale(matmul_nt(qh, kh), inv), keep), vh));
  }
  return concat_last(heads);
}

SelfAttention SelfAttention::make(std::size_t d, std::size_t n_heads, double stddev,
                                  std::mt19937_64& rng) {
  SelfAttention a;
  a.q = Linear::make(d, d, true, stddev, rng);
  a.k = Linear::make(d, d, true, stddev, rng);
  a.v = Linear::make(d, d, true, stddev, rng);
  a.o = Linear::make(d, d, true, stddev, rng);
  a.n_heads = n_heads;
  return a;
}

void SelfAttention::collect(ParamList& params, const std::string& prefix) const {
  q.collect(params, prefix + "q.");
  k.collect(params, prefix + "k.");
  v.collect(params, prefix + "v.");
  o.collect(params, prefix + "o.");
}

CrossAttention CrossAttention::make(std::size_t d, std::size_t n_heads, double stddev,
                                    std::mt19937_64& rng) {
  CrossAttention a;
  a.q = Linear::make(d, d, false, stddev, rng);
  a.k = Linear::make(d, d, false, stddev, rng);
  a.v = Linear::make(d, d, false, stddev, rng);
  a.n_heads = n_heads;
  return a;
}

SourceKV CrossAttention::project(const Tensor& states, std::span<const std::uint8_t> keep) const {
  return {k(states), v(states), std::vector<std::uint8_t>(keep.begin(), keep.end())};
}

Tensor CrossAttention::attend(const Tensor& normed_query, const SourceKV& kv) const {
  const auto mask = key_mask(normed_query.dim(0), kv.keep);
  return multi_head_attention(q(normed_query), kv.k, kv.v, n_heads, mask);
}

void CrossAttention::collect(ParamList& params, const std::string& prefix) const {
  q.collect(params, prefix + "q.");
  k.collect(params, prefix + "k.");
  v.collect(params, prefix + "v.");
}

Tensor fuse_cross_attention(const Tensor& h_sa, const LayerNormParams& ln,
                            std::span<const CrossAttention> branches,
                            std::span<const SourceKV> sources, const Tensor& w_p) {
  if (branches.empty()) throw std::invalid_argument("fuse_cross_attention: no sources present");
  if (branches.size() != sources.size()) {
    throw std::invalid_argument("fuse_cross_attention: " + std::to_string(branches.size()) +
                                " branches for " + std::to_string(sources.size()) + " sources");
  }
  const std::size_t d = h_sa.dim(1);
  if (w_p.rank() != 2 || w_p.dim(0) != branches.size() * d || w_p.dim(1) != d) {
    throw DimensionError("fuse_cross_attention: W^P " + shape_str(w_p.shape()) + " for " +
                         std::to_string(branches.size()) + " sources of width " +
                         std::to_string(d));
  }
  const Tensor normed = ln(h_sa);
  std::vector<Tensor> parts;
  parts.reserve(branches.size());
  for (std::size_t i = 0; i < branches.size(); ++i) parts.push_back(branches[i].attend(normed, sources[i]));
  const Tensor joined = parts.size() == 1 ? parts[0] : concat_last(parts);
  return add(h_sa, matmul(joined, w_p));
}

const EncodedSource* EncodedSources::get(Source s) const {
  switch (s) {
    case Source::kHistory: return &history;
    case Source::kKnowledge: return knowledge ? &*knowledge : nullptr;
    case Source::kPersona: return persona ? &*persona : nullptr;
  }
  return nullptr;
}

// --- encoder -------------------------------------------------------------------

EncoderBlock EncoderBlock::make(const ModelConfig& c, std::mt19937_64& rng) {
  EncoderBlock b;
  b.ln_attn = LayerNormParams::make(c.d);
  b.attn = SelfAttention::make(c.d, c.n_heads, c.init_std, rng);
  b.ln_ffn = LayerNormParams::make(c.d);
  b.ffn = FeedForward::make(c.d, c.d_ff, c.init_std, rng);
  return b;
}

Tensor EncoderBlock::forward(const Tensor& x, std::span<const std::uint8_t> keep,
                             const ForwardContext& ctx) const {
  const Tensor n = ln_attn(x);
  const auto mask = key_mask(x.dim(0), keep);
  const Tensor a = attn.o(multi_head_attention(attn.q(n), attn.k(n), attn.v(n), attn.n_heads, mask));
  const Tensor h = add(x, ctx.drop(a));
  return add(h, ctx.drop(ffn(ln_ffn(h))));
}

void EncoderBlock::collect(ParamList& params, const std::string& prefix) const {
  ln_attn.collect(params, prefix + "ln_attn.");
  attn.collect(params, prefix + "attn.");
  ln_ffn.collect(params, prefix + "ln_ffn.");
  ffn.collect(params, prefix + "ffn.");
}

std::shared_ptr<Encoder> Encoder::make(const ModelConfig& c, std::mt19937_64& rng) {
  auto e = std::make_shared<Encoder>();
  e->positions = init_normal({c.max_len, c.d}, c.init_std, rng);
  for (std::size_t l = 0; l < c.n_layers; ++l) e->blocks.push_back(EncoderBlock::make(c, rng));
  e->ln_final = LayerNormParams::make(c.d);
  return e;
}

std::shared_ptr<Encoder> Encoder::clone() const {
  // The member-wise copy shares nodes; every tensor then gets its own storage.
  auto copy = std::make_shared<Encoder>(*this);
  auto fresh = [](Tensor& t) { t = t.clone(true); };
  fresh(copy->positions);
  for (auto& b : copy->blocks) {
    for (Tensor* t : {&b.ln_attn.gain, &b.ln_attn.bias, &b.ln_ffn.gain, &b.ln_ffn.bias,
                      &b.attn.q.w, &b.attn.q.b, &b.attn.k.w, &b.attn.k.b, &b.attn.v.w,
                      &b.attn.v.b, &b.attn.o.w, &b.attn.o.b, &b.ffn.in.w, &b.ffn.in.b,
                      &b.ffn.out.w, &b.ffn.out.b})
      fresh(*t);
  }
  fresh(copy->ln_final.gain);
  fresh(copy->ln_final.bias);
  return copy;
}

EncodedSource Encoder::encode(const Tensor& token_table, std::span<const int> ids,
                              const ForwardContext& ctx) const {
  if (ids.empty()) throw std::invalid_argument("encode: empty sequence");
  if (ids.size() > positions.dim(0)) {
    throw std::invalid_argument("encode: length " + std::to_string(ids.size()) +
                                " exceeds max_len " + std::to_string(positions.dim(0)));
  }
  EncodedSource out;
  out.keep.reserve(ids.size());
  for (int id : ids) out.keep.push_back(id == tok::kPad ? 0 : 1);
  Tensor x = add(embedding(token_table, ids), slice_rows(positions, 0, ids.size()));
  x = ctx.drop(x);
  for (const auto& b : blocks) x = b.forward(x, out.keep, ctx);
  out.states = ln_final(x);
  return out;
}

void Encoder::collect(ParamList& params, const std::string& prefix) const {
  params.add(prefix + "positions", positions);
  for (std::size_t l = 0; l < blocks.size(); ++l)
    blocks[l].collect(params, prefix + "block" + std::to_string(l) + ".");
  ln_final.collect(params, prefix + "ln_final.");
}

// --- decoder -------------------------------------------------------------------

DecoderBlock DecoderBlock::make(const ModelConfig& c, std::mt19937_64& rng) {
  DecoderBlock b;
  b.ln_self = LayerNormParams::make(c.d);
  b.self_attn = SelfAttention::make(c.d, c.n_heads, c.init_std, rng);
  b.ln_cross = LayerNormParams::make(c.d);
  for (std::size_t s = 0; s < c.n_sources(); ++s)
    b.cross.push_back(CrossAttention::make(c.d, c.n_heads, c.init_std, rng));
  b.w_p = init_normal({c.n_sources() * c.d, c.d}, c.init_std, rng);
  b.ln_ffn = LayerNormParams::make(c.d);
  b.ffn = FeedForward::make(c.d, c.d_ff, c.init_std, rng);
  return b;
}

Tensor DecoderBlock::self_attention(const Tensor& x, LayerCache* cache,
                                    const ForwardContext& ctx) const {
  const Tensor n = ln_self(x);
  Tensor k = self_attn.k(n);
  Tensor v = self_attn.v(n);
  std::size_t past = 0;
  if (cache != nullptr) {
    past = cache->length();
    if (past > 0) {
      std::vector<Tensor> ks{cache->k, k}, vs{cache->v, v};
      k = concat_rows(ks);
      v = concat_rows(vs);
    }
    cache->k = k;
    cache->v = v;
  }
  const auto mask = causal_mask(x.dim(0), past);
  const Tensor a =
      self_attn.o(multi_head_attention(self_attn.q(n), k, v, self_attn.n_heads, mask));
  return add(x, ctx.drop(a));
}

Tensor DecoderBlock::forward(const Tensor& x, std::span<const SourceKV> sources,
                             LayerCache* cache, const ForwardContext& ctx) const {
  const Tensor h_sa = self_attention(x, cache, ctx);
  const Tensor h_fa = fuse_cross_attention(h_sa, ln_cross, cross, sources, w_p);
  return add(h_fa, ctx.drop(ffn(ln_ffn(h_fa))));
}

void DecoderBlock::collect(ParamList& params, const std::string& prefix) const {
  ln_self.collect(params, prefix + "ln_self.");
  self_attn.collect(params, prefix + "self.");
  ln_cross.collect(params, prefix + "ln_cross.");
  for (std::size_t s = 0; s < cross.size(); ++s)
    cross[s].collect(params, prefix + "cross" + std::to_string(s) + ".");
  params.add(prefix + "w_p", w_p);
  ln_ffn.collect(params, prefix + "ln_ffn.");
  ffn.collect(params, prefix + "ffn.");
}

Decoder Decoder::make(const ModelConfig& c, std::mt19937_64& rng) {
  Decoder dec;
  dec.slots = c.sources();
  dec.positions = init_normal({c.max_len, c.d}, c.init_std, rng);
  for (std::size_t l = 0; l < c.n_layers; ++l) dec.blocks.push_back(DecoderBlock::make(c, rng));
  dec.ln_final = LayerNormParams::make(c.d);
  return dec;
}

DecoderMemory Decoder::project(const EncodedSources& sources) const {
  for (std::size_t s = 0; s < kMaxSources; ++s) {
    const auto slot = static_cast<Source>(s);
    const bool configured = std::find(slots.begin(), slots.end(), slot) != slots.end();
    const bool present = sources.get(slot) != nullptr;
    if (configured && !present) {
      throw std::invalid_argument(std::string(source_name(slot)) + " source required");
    }
    if (!configured && present) {
      throw std::invalid_argument(std::string(source_name(slot)) +
                                  " source given to a model without that encoder");
    }
  }
  DecoderMemory memory(blocks.size());
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    for (std::size_t i = 0; i < slots.size(); ++i) {
      const EncodedSource* src = sources.get(slots[i]);
      memory[l].push_back(blocks[l].cross[i].project(src->states, src->keep));
    }
  }
  return memory;
}

Tensor Decoder::forward(const Tensor& token_table, std::span<const int> ids,
                        const DecoderMemory& memory, std::vector<LayerCache>* cache,
                        const ForwardContext& ctx) const {
  if (ids.empty()) throw std::invalid_argument("decoder: empty input");
  if (memory.size() != blocks.size()) throw std::invalid_argument("decoder: memory/layer mismatch");
  if (cache != nullptr && cache->size() != blocks.size()) cache->resize(blocks.size());
  const std::size_t past = cache != nullptr ? (*cache)[0].length() : 0;
  if (past + ids.size() > positions.dim(0)) {
    throw std::invalid_argument("decoder: length " + std::to_string(past + ids.size()) +
                                " exceeds max_len " + std::to_string(positions.dim(0)));
  }
  Tensor x = add(embedding(token_table, ids), slice_rows(positions, past, ids.size()));
  x = ctx.drop(x);
  for (std::size_t l = 0; l < blocks.size(); ++l)
    x = blocks[l].forward(x, memory[l], cache != nullptr ? &(*cache)[l] : nullptr, ctx);
  return ln_final(x);
}

void Decoder::collect(ParamList& params, const std::string& prefix) const {
  params.add(prefix + "positions", positions);
  for (std::size_t l = 0; l < blocks.size(); ++l)
    blocks[l].collect(params, prefix + "block" + std::to_string(l) + ".");
  ln_final.collect(params, prefix + "ln_final.");
}

}  // namespace msdf
