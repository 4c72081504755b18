#pragma once

// Pre-layernorm transformer pieces: bidirectional source encoders and the
// decoder block whose cross-attention fuses several encoded sources through
// one projection.

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "msdf/params.hpp"
#include "msdf/tensor.hpp"

namespace msdf {

// Source slots in their fixed concatenation order.
enum class Source : std::size_t { kHistory = 0, kKnowledge = 1, kPersona = 2 };
inline constexpr std::size_t kMaxSources = 3;
std::string_view source_name(Source s);

struct ModelConfig {
  std::size_t d = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t d_ff = 256;
  std::size_t vocab_size = 512;
  std::size_t max_len = 64;
  double dropout = 0.1;
  bool use_knowledge = false;  // history is always a source
  bool use_persona = false;
  bool share_embeddings = true;  // encoders read the decoder's token table
  bool tie_lm_head = true;
  double init_std = 0.02;

  std::size_t n_sources() const { return 1 + (use_knowledge ? 1 : 0) + (use_persona ? 1 : 0); }
  // Present slots in concatenation order.
  std::vector<Source> sources() const;
  void validate() const;  // throws std::invalid_argument

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

// Per-call switches for dropout. Inference passes the default (off).
struct ForwardContext {
  bool training = false;
  double dropout = 0.0;
  std::mt19937_64* rng = nullptr;

  Tensor drop(const Tensor& x) const;
};

struct Linear {
  Tensor w;  // [in×out]
  Tensor b;  // [out], undefined when bias-free

  static Linear make(std::size_t in, std::size_t out, bool bias, double stddev,
                     std::mt19937_64& rng);
  Tensor operator()(const Tensor& x) const;
  void collect(ParamList& params, const std::string& prefix) const;
};

struct LayerNormParams {
  Tensor gain, bias;

  static LayerNormParams make(std::size_t d);
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias); }
  void collect(ParamList& params, const std::string& prefix) const;
};

struct FeedForward {
  Linear in, out;

  static FeedForward make(std::size_t d, std::size_t d_ff, double stddev, std::mt19937_64& rng);
  Tensor operator()(const Tensor& x) const { return out(gelu(in(x))); }
  void collect(ParamList& params, const std::string& prefix) const;
};

// keep[i*n_keys + j] for a [n_queries×n_keys] score matrix.
using AttentionMask = std::vector<std::uint8_t>;
// Query i (absolute position past + i) sees keys 0..past+i.
AttentionMask causal_mask(std::size_t n_queries, std::size_t past);
// Every query sees exactly the keys with key_keep[j] != 0.
AttentionMask key_mask(std::size_t n_queries, std::span<const std::uint8_t> key_keep);

// softmax(q kᵀ / √d_head) v per head, heads concatenated. q [m×d], k and v
// [n×d].
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            std::size_t n_heads, std::span<const std::uint8_t> keep);

struct SelfAttention {
  Linear q, k, v, o;
  std::size_t n_heads = 1;

  static SelfAttention make(std::size_t d, std::size_t n_heads, double stddev,
                            std::mt19937_64& rng);
  void collect(ParamList& params, const std::string& prefix) const;
};

// Projected keys and values of one encoded source for one decoder layer.
struct SourceKV {
  Tensor k, v;
  std::vector<std::uint8_t> keep;  // per key position
};

// Bias-free per-source projections W^Q, W^K, W^V of one decoder layer.
struct CrossAttention {
  Linear q, k, v;
  std::size_t n_heads = 1;

  static CrossAttention make(std::size_t d, std::size_t n_heads, double stddev,
                             std::mt19937_64& rng);
  SourceKV project(const Tensor& states, std::span<const std::uint8_t> keep) const;
  // softmax(normed_query W^Q (H^E W^K)ᵀ / √d_head)(H^E W^V)
  Tensor attend(const Tensor& normed_query, const SourceKV& kv) const;
  void collect(ParamList& params, const std::string& prefix) const;
};

// H^SA + concat_i(A_i(H^E_i)) W^P, with the query layer-normalized once.
// branches and sources pair up by index; w_p is [(n·d)×d].
Tensor fuse_cross_attention(const Tensor& h_sa, const LayerNormParams& ln,
                            std::span<const CrossAttention> branches,
                            std::span<const SourceKV> sources, const Tensor& w_p);

// One encoded source: states [len×d] and which positions are real tokens.
struct EncodedSource {
  Tensor states;
  std::vector<std::uint8_t> keep;
};

struct EncodedSources {
  EncodedSource history;
  std::optional<EncodedSource> knowledge;
  std::optional<EncodedSource> persona;

  const EncodedSource* get(Source s) const;
};

struct EncoderBlock {
  LayerNormParams ln_attn, ln_ffn;
  SelfAttention attn;
  FeedForward ffn;

  static EncoderBlock make(const ModelConfig& c, std::mt19937_64& rng);
  Tensor forward(const Tensor& x, std::span<const std::uint8_t> keep,
                 const ForwardContext& ctx) const;
  void collect(ParamList& params, const std::string& prefix) const;
};

class Encoder {
 public:
  static std::shared_ptr<Encoder> make(const ModelConfig& c, std::mt19937_64& rng);
  std::shared_ptr<Encoder> clone() const;

  // Token embeddings come from the caller's table. Ids equal to PAD are
  // masked out of attention. ids.size() must be in [1, max_len].
  EncodedSource encode(const Tensor& token_table, std::span<const int> ids,
                       const ForwardContext& ctx = {}) const;
  void collect(ParamList& params, const std::string& prefix) const;

  Tensor positions;  // [max_len×d]
  std::vector<EncoderBlock> blocks;
  LayerNormParams ln_final;
};

// Cached self-attention keys and values of the positions decoded so far.
struct LayerCache {
  Tensor k, v;  // [past×d], undefined when empty
  std::size_t length() const { return k.defined() ? k.dim(0) : 0; }
};

struct DecoderBlock {
  LayerNormParams ln_self, ln_cross, ln_ffn;
  SelfAttention self_attn;
  std::vector<CrossAttention> cross;  // one per present source, slot order
  Tensor w_p;                         // [(n_sources·d)×d]
  FeedForward ffn;

  static DecoderBlock make(const ModelConfig& c, std::mt19937_64& rng);

  // x holds the new positions only. With a cache, keys/values of earlier
  // positions are read from it and the new ones appended.
  Tensor self_attention(const Tensor& x, LayerCache* cache, const ForwardContext& ctx) const;
  Tensor forward(const Tensor& x, std::span<const SourceKV> sources, LayerCache* cache,
                 const ForwardContext& ctx) const;
  void collect(ParamList& params, const std::string& prefix) const;
};

// Per layer, per present source.
using DecoderMemory = std::vector<std::vector<SourceKV>>;

class Decoder {
 public:
  static Decoder make(const ModelConfig& c, std::mt19937_64& rng);

  // Projects the encoded sources once for every layer. Throws
  // std::invalid_argument when a configured source is absent or an
  // unconfigured one is present.
  DecoderMemory project(const EncodedSources& sources) const;
  // Hidden states after the final layer norm for the new positions. cache,
  // when given, must hold one LayerCache per layer.
  Tensor forward(const Tensor& token_table, std::span<const int> ids, const DecoderMemory& memory,
                 std::vector<LayerCache>* cache, const ForwardContext& ctx = {}) const;
  void collect(ParamList& params, const std::string& prefix) const;

  std::vector<Source> slots;
  Tensor positions;  // [max_len×d]
  std::vector<DecoderBlock> blocks;
  LayerNormParams ln_final;
};

}  // namespace msdf
