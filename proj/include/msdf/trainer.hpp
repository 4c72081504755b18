#pragma once

// Generator optimization: pre-training on history/response pairs, per-task
// fine-tuning, and resumable training state.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "msdf/dialog.hpp"
#include "msdf/generator.hpp"
#include "msdf/optim.hpp"

namespace msdf {

enum class Phase { kPretrain, kPretrainLongerHalf, kFinetune };
std::string_view phase_name(Phase p);
Phase parse_phase(std::string_view name);

struct TrainConfig {
  AdamWConfig optim{};
  std::size_t batch_size = 16;
  std::size_t max_epochs = 5;
  std::size_t max_steps = 0;  // 0: no cap beyond max_epochs
  double grad_clip = 1.0;     // 0 disables clipping
  std::uint64_t seed = 0;
  std::size_t eval_every = 200;
  Task task = Task::kChat;
  Phase phase = Phase::kPretrain;
  // Stop once the token-level loss over the whole training set, measured at
  // each evaluation, is below this value. 0 disables.
  double stop_below_train_loss = 0.0;

  // Desk scale: lr 3e-4, batch 16, clip 1.0, 5 epochs, evaluation every 200 steps.
  static TrainConfig desk(Task task);
  // Full-size per-task settings (lr 2.5e-5, AdamW 0.9/0.999/1e-5; batch and
  // epochs 16/15 knowledge, 2/10 recommendation, 16/10 persona).
  static TrainConfig full(Task task);

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j, const TrainConfig& defaults);
};

// Token-weighted mean NLL (nats per target token, EOS included).
double corpus_loss(const GeneratorModel& model, std::span<const EncodedInput> data);

struct TrainSummary {
  std::int64_t steps = 0;
  std::int64_t best_step = 0;
  double best_dev_loss = 0.0;
  double last_train_loss = 0.0;  // training-set loss at the last evaluation, NaN if not measured
  bool stopped_early = false;
  std::vector<double> step_losses;  // batch loss of every step, in order
};

class Trainer {
 public:
  // `model` is trained in place. With an empty dev set the training set is
  // used for checkpoint selection.
  Trainer(GeneratorModel& model, std::vector<EncodedInput> train, std::vector<EncodedInput> dev,
          TrainConfig config);

  // One optimizer step on the next batch; returns the batch's token-mean
  // loss. Throws DivergenceError on a non-finite loss or gradient, after
  // restoring the parameters of the last evaluation.
  double step();
  // Runs until max_epochs, max_steps, or the stop threshold. `log` receives
  // one record per evaluation: {step, epoch, loss, dev_loss, train_loss, lr}.
  TrainSummary run(const std::function<void(const nlohmann::json&)>& log = {});

  // Dev loss now; keeps a copy of the parameters when it is the best so far.
  double evaluate();

  std::int64_t steps_taken() const { return step_; }
  std::size_t epoch() const { return epoch_; }
  bool finished() const;
  const TrainConfig& config() const { return config_; }
  // Parameters with the lowest dev loss seen by evaluate().
  GeneratorModel best_model() const;
  double best_dev_loss() const { return best_dev_loss_; }

  // Model, optimizer moments, RNG, and data position; resuming continues the
  // exact step sequence.
  Checkpoint state() const;
  void save_state(const std::filesystem::path& path) const;
  void restore(const Checkpoint& state);

 private:
  GeneratorModel& model_;
  std::vector<EncodedInput> train_, dev_;
  TrainConfig config_;
  std::vector<Tensor> params_;
  AdamW opt_;
  std::mt19937_64 rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::size_t epoch_ = 0;
  std::int64_t step_ = 0;
  double best_dev_loss_;
  std::int64_t best_step_ = 0;
  Checkpoint best_;
  Checkpoint last_good_;
  TrainSummary summary_;

  void reshuffle();
};

std::vector<EncodedInput> encode_samples(const GeneratorModel& model,
                                         std::span<const DialogSample> samples,
                                         const PipelineConfig& pipeline);
std::vector<EncodedInput> encode_pairs(const GeneratorModel& model,
                                       std::span<const HistoryResponse> pairs,
                                       const PipelineConfig& pipeline);

struct PretrainResult {
  GeneratorModel model;  // best dev checkpoint of the second phase
  TrainSummary phase1, phase2;
};

// Phase one trains on every pair, phase two on the longer-response half.
// Each phase uses `config` (its phase field is overridden).
PretrainResult pretrain(GeneratorModel model, std::span<const HistoryResponse> pairs,
                        std::span<const HistoryResponse> dev, const PipelineConfig& pipeline,
                        TrainConfig config,
                        const std::function<void(const nlohmann::json&)>& log = {});

struct FinetuneResult {
  GeneratorModel model;  // best dev checkpoint
  TrainSummary summary;
};

// Transplants the history-only model to config.task and trains it on the task
// corpus. Throws DataError when a sample's task differs from config.task.
FinetuneResult finetune(const GeneratorModel& pretrained, std::span<const DialogSample> train,
                        std::span<const DialogSample> dev, const PipelineConfig& pipeline,
                        TrainConfig config,
                        const std::function<void(const nlohmann::json&)>& log = {});

}  // namespace msdf
