#pragma once

// Response generator: task-specific source encoders, the fusion decoder, and
// (for knowledge-bearing tasks) the copy head, plus sampling-based decoding of
// a candidate pool.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "msdf/copy_head.hpp"
#include "msdf/dialog.hpp"
#include "msdf/params.hpp"
#include "msdf/transformer.hpp"
#include "msdf/vocab.hpp"

namespace msdf {

struct DecodeParams {
  std::size_t pool_size = 10;
  std::size_t top_k = 8;
  double temperature = 1.0;
  std::size_t max_new_tokens = 48;
  std::uint64_t seed = 0;

  void validate() const;  // throws std::invalid_argument
  nlohmann::json to_json() const;
  // Missing keys keep the values of `defaults`.
  static DecodeParams from_json(const nlohmann::json& j, const DecodeParams& defaults);
  static DecodeParams from_json(const nlohmann::json& j);
};

struct Candidate {
  std::vector<int> ids;  // generated tokens, EOS excluded
  std::string raw_text;  // decoded, control tokens kept
  std::string text;      // after postprocessing
  double logprob = 0.0;  // sum over generated tokens, EOS included when ended
  bool ended = false;    // EOS produced before max_new_tokens
};

struct CandidatePool {
  std::vector<Candidate> candidates;
  std::size_t pool_size = 0;
};

// Token ids of one sample, truncated to the model's limits.
struct EncodedInput {
  std::vector<int> history;
  std::vector<int> knowledge;
  std::vector<int> persona;
  std::vector<int> target;  // response tokens without BOS/EOS
};

// Everything decoding needs that depends only on the sources.
struct GenerationContext {
  EncodedSources sources;
  DecoderMemory memory;
  std::vector<int> knowledge_ids;
};

struct TeacherForced {
  Tensor log_probs;          // [L×V], L = target length + 1
  Tensor nll;                // mean over positions
  std::vector<int> targets;  // target tokens then EOS
};

class GeneratorModel {
 public:
  // Sources and copy follow the task: knowledge {history, knowledge} with
  // copy, recommendation {history, knowledge, persona} with the persona
  // encoder shared with the knowledge encoder and copy, persona {history,
  // persona} without copy, chat {history} without copy. `copy` overrides the
  // task default (used for ablations).
  static GeneratorModel create(Task task, ModelConfig config, Vocab vocab, std::uint64_t seed,
                               std::optional<bool> copy = std::nullopt);

  // Starts a task model from this history-only model: shared weights are
  // copied, new encoders and cross-attention branches start as copies of the
  // history ones, and the new rows of every W^P are zero, so the LM logits of
  // the result equal this model's on any input.
  GeneratorModel transplant(Task task, std::uint64_t seed) const;

  Task task() const { return task_; }
  bool copy_enabled() const { return copy_.has_value(); }
  const ModelConfig& config() const { return config_; }
  const Vocab& vocab() const { return vocab_; }
  ParamList parameters() const;

  EncodedInput encode(const ProcessedSample& sample, const PipelineConfig& pipeline) const;
  GenerationContext context(const EncodedInput& input, const ForwardContext& ctx = {}) const;

  Tensor lm_logits(const Tensor& h_d) const;
  // Per-position log-probabilities: the merged copy distribution when copy is
  // enabled, log_softmax of the LM logits otherwise.
  Tensor output_log_probs(const Tensor& h_d, const GenerationContext& g) const;

  TeacherForced forward_teacher_forced(const EncodedInput& input,
                                       const ForwardContext& ctx = {}) const;

  // Log-probabilities of the next token after `prefix` (which starts with
  // BOS), recomputed from scratch. Reference path for tests and scoring.
  std::vector<double> next_log_probs(const GenerationContext& g, std::span<const int> prefix) const;

  CandidatePool sample_pool(const GenerationContext& g, const DecodeParams& params) const;
  // Preprocess (no response needed), encode, sample, and postprocess.
  CandidatePool respond(const DialogSample& sample, const PipelineConfig& pipeline,
                        const DecodeParams& params) const;

  Checkpoint to_checkpoint() const;
  static GeneratorModel from_checkpoint(const Checkpoint& ck);
  void save(const std::filesystem::path& path) const;
  static GeneratorModel load(const std::filesystem::path& path);

  // Public for tests and the trainer.
  Tensor token_table;
  Tensor encoder_table;  // undefined when embeddings are shared
  Tensor lm_head;        // [d×V], undefined when tied
  std::shared_ptr<Encoder> history_encoder;
  std::shared_ptr<Encoder> knowledge_encoder;
  std::shared_ptr<Encoder> persona_encoder;
  Decoder decoder;

  const std::optional<CopyHeadParams>& copy_head() const { return copy_; }

 private:
  Task task_ = Task::kChat;
  ModelConfig config_;
  Vocab vocab_;
  std::optional<CopyHeadParams> copy_;

  const Tensor& source_table() const {
    return encoder_table.defined() ? encoder_table : token_table;
  }
};

// Model config for a task: sources switched on as the task requires.
ModelConfig config_for_task(ModelConfig base, Task task);

}  // namespace msdf
