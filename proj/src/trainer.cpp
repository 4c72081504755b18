#include "msdf/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace msdf {

std::string_view phase_name(Phase p) {
  switch (p) {
    case Phase::kPretrain: return "pretrain";
    case Phase::kPretrainLongerHalf: return "pretrain-longer-half";
    case Phase::kFinetune: return "finetune";
  }
  return "pretrain";
}

Phase parse_phase(std::string_view name) {
  if (name == "pretrain") return Phase::kPretrain;
  if (name == "pretrain-longer-half") return Phase::kPretrainLongerHalf;
  if (name == "finetune") return Phase::kFinetune;
  throw std::invalid_argument("unknown phase '" + std::string(name) + "'");
}

TrainConfig TrainConfig::desk(Task task) {
  TrainConfig c;
  c.optim.lr = 3e-4;
  c.batch_size = 16;
  c.grad_clip = 1.0;
  c.max_epochs = 5;
  c.eval_every = 200;
  c.task = task;
  c.phase = task == Task::kChat ? Phase::kPretrain : Phase::kFinetune;
  return c;
}

TrainConfig TrainConfig::full(Task task) {
  TrainConfig c = desk(task);
  c.optim.lr = 2.5e-5;
  c.optim.beta1 = 0.9;
  c.optim.beta2 = 0.999;
  c.optim.eps = 1e-5;
  switch (task) {
    case Task::kRecommendation:
      c.batch_size = 2;
      c.max_epochs = 10;
      break;
    case Task::kPersona:
      c.batch_size = 16;
      c.max_epochs = 10;
      break;
    case Task::kKnowledge:
    case Task::kChat:
      c.batch_size = 16;
      c.max_epochs = 15;
      break;
  }
  return c;
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw std::invalid_argument("train: batch_size must be at least 1");
  if (max_epochs == 0 && max_steps == 0) {
    throw std::invalid_argument("train: max_epochs or max_steps must be positive");
  }
  if (!(optim.lr > 0.0)) throw std::invalid_argument("train: lr must be positive");
  if (grad_clip < 0.0) throw std::invalid_argument("train: grad_clip must be >= 0");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"lr", optim.lr},
          {"beta1", optim.beta1},
          {"beta2", optim.beta2},
          {"eps", optim.eps},
          {"weight_decay", optim.weight_decay},
          {"batch_size", batch_size},
          {"max_epochs", max_epochs},
          {"max_steps", max_steps},
          {"grad_clip", grad_clip},
          {"seed", seed},
          {"eval_every", eval_every},
          {"task", std::string(task_name(task))},
          {"phase", std::string(phase_name(phase))},
          {"stop_below_train_loss", stop_below_train_loss}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j, const TrainConfig& defaults) {
  TrainConfig c = defaults;
  c.optim.lr = j.value("lr", c.optim.lr);
  c.optim.beta1 = j.value("beta1", c.optim.beta1);
  c.optim.beta2 = j.value("beta2", c.optim.beta2);
  c.optim.eps = j.value("eps", c.optim.eps);
  c.optim.weight_decay = j.value("weight_decay", c.optim.weight_decay);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.max_steps = j.value("max_steps", c.max_steps);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.seed = j.value("seed", c.seed);
  c.eval_every = j.value("eval_every", c.eval_every);
  if (j.contains("task")) c.task = parse_task(j["task"].get<std::string>());
  if (j.contains("phase")) c.phase = parse_phase(j["phase"].get<std::string>());
  c.stop_below_train_loss = j.value("stop_below_train_loss", c.stop_below_train_loss);
  c.validate();
  return c;
}

double corpus_loss(const GeneratorModel& model, std::span<const EncodedInput> data) {
  NoGradGuard guard;
  double total = 0.0;
  std::size_t tokens = 0;
  for (const auto& in : data) {
    const auto tf = model.forward_teacher_forced(in);
    total += tf.nll.item() * static_cast<double>(tf.targets.size());
    tokens += tf.targets.size();
  }
  return tokens == 0 ? 0.0 : total / static_cast<double>(tokens);
}

Trainer::Trainer(GeneratorModel& model, std::vector<EncodedInput> train,
                 std::vector<EncodedInput> dev, TrainConfig config)
    : model_(model),
      train_(std::move(train)),
      dev_(std::move(dev)),
      config_(config),
      params_(model.parameters().tensors()),
      opt_(params_, config.optim),
      rng_(config.seed),
      best_dev_loss_(std::numeric_limits<double>::infinity()) {
  config_.validate();
  if (train_.empty()) throw std::invalid_argument("train: empty training set");
  order_.resize(train_.size());
  std::iota(order_.begin(), order_.end(), 0);
  reshuffle();
  last_good_ = model_.to_checkpoint();
}

void Trainer::reshuffle() {
  std::iota(order_.begin(), order_.end(), 0);
  std::shuffle(order_.begin(), order_.end(), rng_);
  cursor_ = 0;
}

bool Trainer::finished() const {
  if (config_.max_steps > 0 && step_ >= static_cast<std::int64_t>(config_.max_steps)) return true;
  return config_.max_epochs > 0 && epoch_ >= config_.max_epochs;
}

double Trainer::step() {
  const std::size_t end = std::min(order_.size(), cursor_ + config_.batch_size);
  std::size_t tokens = 0;
  for (std::size_t i = cursor_; i < end; ++i) tokens += train_[order_[i]].target.size() + 1;

  const ForwardContext ctx{true, model_.config().dropout, &rng_};
  auto diverged = [&](const std::string& why) {
    auto params = model_.parameters();
    last_good_.load_into(params);
    return DivergenceError("training diverged at step " + std::to_string(step_ + 1) + ": " + why +
                           "; parameters restored to the last evaluation");
  };

  opt_.zero_grad();
  double batch_loss = 0.0;
  for (std::size_t i = cursor_; i < end; ++i) {
    const auto& in = train_[order_[i]];
    try {
      const auto tf = model_.forward_teacher_forced(in, ctx);
      const double weight =
          static_cast<double>(tf.targets.size()) / static_cast<double>(tokens);
      const Tensor l = scale(tf.nll, weight);
      batch_loss += l.item();
      l.backward();
    } catch (const NumericError& e) {
      throw diverged(e.what());
    }
  }
  const double norm = config_.grad_clip > 0.0 ? clip_grad_norm(params_, config_.grad_clip)
                                              : global_grad_norm(params_);
  if (!std::isfinite(batch_loss) || !std::isfinite(norm)) {
    throw diverged("loss " + std::to_string(batch_loss) + ", gradient norm " + std::to_string(norm));
  }
  opt_.step();
  ++step_;
  cursor_ = end;
  if (cursor_ == order_.size()) {
    ++epoch_;
    reshuffle();
  }
  summary_.step_losses.push_back(batch_loss);
  return batch_loss;
}

double Trainer::evaluate() {
  const double dev_loss = corpus_loss(model_, dev_.empty() ? train_ : dev_);
  last_good_ = model_.to_checkpoint();
  if (dev_loss < best_dev_loss_) {
    best_dev_loss_ = dev_loss;
    best_step_ = step_;
    best_ = last_good_;
  }
  return dev_loss;
}

TrainSummary Trainer::run(const std::function<void(const nlohmann::json&)>& log) {
  double window = 0.0;
  std::size_t window_steps = 0;
  std::int64_t last_eval = -1;
  auto checkpoint = [&] {
    const double dev_loss = evaluate();
    last_eval = step_;
    // Without a dev set the dev loss already is the training-set loss.
    double train_loss = std::numeric_limits<double>::quiet_NaN();
    if (dev_.empty()) {
      train_loss = dev_loss;
    } else if (config_.stop_below_train_loss > 0.0) {
      train_loss = corpus_loss(model_, train_);
    }
    summary_.last_train_loss = train_loss;
    if (log) {
      nlohmann::json entry{{"step", step_},
                           {"epoch", epoch_},
                           {"phase", std::string(phase_name(config_.phase))},
                           {"loss", window_steps ? window / static_cast<double>(window_steps) : 0.0},
                           {"dev_loss", dev_loss},
                           {"train_loss", std::isnan(train_loss) ? nlohmann::json()
                                                                 : nlohmann::json(train_loss)},
                           {"lr", config_.optim.lr}};
      log(entry);
    }
    window = 0.0;
    window_steps = 0;
    if (config_.stop_below_train_loss > 0.0 && train_loss < config_.stop_below_train_loss) {
      summary_.stopped_early = true;
    }
  };

  while (!finished() && !summary_.stopped_early) {
    window += step();
    ++window_steps;
    if (config_.eval_every > 0 && step_ % static_cast<std::int64_t>(config_.eval_every) == 0) {
      checkpoint();
    }
  }
  if (last_eval != step_) checkpoint();

  summary_.steps = step_;
  summary_.best_step = best_step_;
  summary_.best_dev_loss = best_dev_loss_;
  return summary_;
}

GeneratorModel Trainer::best_model() const {
  return GeneratorModel::from_checkpoint(best_.tensors.empty() ? model_.to_checkpoint() : best_);
}

Checkpoint Trainer::state() const {
  Checkpoint ck = model_.to_checkpoint();
  opt_.save_state(ck, "adam.");
  std::ostringstream rng;
  rng << rng_;
  nlohmann::json t{{"step", step_},
                   {"epoch", epoch_},
                   {"cursor", cursor_},
                   {"order", order_},
                   {"rng", rng.str()},
                   {"best_step", best_step_},
                   {"train_size", train_.size()},
                   {"config", config_.to_json()}};
  t["best_dev_loss"] = std::isfinite(best_dev_loss_) ? nlohmann::json(best_dev_loss_) : nlohmann::json();
  ck.meta["trainer"] = t;
  for (const auto& tensor : best_.tensors) {
    ck.tensors.push_back({"best/" + tensor.name, tensor.shape, tensor.values});
  }
  return ck;
}

void Trainer::save_state(const std::filesystem::path& path) const { state().save(path); }

void Trainer::restore(const Checkpoint& state) {
  if (!state.meta.contains("trainer")) throw std::runtime_error("checkpoint has no trainer state");
  const auto& t = state.meta["trainer"];
  if (t.at("train_size").get<std::size_t>() != train_.size()) {
    throw std::runtime_error("trainer state was saved for " +
                             std::to_string(t["train_size"].get<std::size_t>()) +
                             " training samples, this run has " + std::to_string(train_.size()));
  }
  auto params = model_.parameters();
  state.load_into(params);
  opt_.load_state(state, "adam.");
  step_ = t.at("step").get<std::int64_t>();
  epoch_ = t.at("epoch").get<std::size_t>();
  cursor_ = t.at("cursor").get<std::size_t>();
  order_ = t.at("order").get<std::vector<std::size_t>>();
  std::istringstream rng(t.at("rng").get<std::string>());
  rng >> rng_;
  best_step_ = t.at("best_step").get<std::int64_t>();
  best_dev_loss_ = t["best_dev_loss"].is_null() ? std::numeric_limits<double>::infinity()
                                                 : t["best_dev_loss"].get<double>();
  best_ = Checkpoint{};
  for (const auto& tensor : state.tensors) {
    if (tensor.name.rfind("best/", 0) == 0) {
      best_.tensors.push_back({tensor.name.substr(5), tensor.shape, tensor.values});
    }
  }
  if (!best_.tensors.empty()) {
    best_.meta = state.meta;
    best_.meta.erase("trainer");
  }
  last_good_ = model_.to_checkpoint();
}

std::vector<EncodedInput> encode_samples(const GeneratorModel& model,
                                         std::span<const DialogSample> samples,
                                         const PipelineConfig& pipeline) {
  std::vector<EncodedInput> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(model.encode(preprocess(s, pipeline), pipeline));
  return out;
}

std::vector<EncodedInput> encode_pairs(const GeneratorModel& model,
                                       std::span<const HistoryResponse> pairs,
                                       const PipelineConfig& pipeline) {
  std::vector<EncodedInput> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) {
    ProcessedSample s;
    s.task = Task::kChat;
    s.history = build_history(p.history, pipeline.max_history_tokens);
    s.target = p.response;
    out.push_back(model.encode(s, pipeline));
  }
  return out;
}

PretrainResult pretrain(GeneratorModel model, std::span<const HistoryResponse> pairs,
                        std::span<const HistoryResponse> dev, const PipelineConfig& pipeline,
                        TrainConfig config,
                        const std::function<void(const nlohmann::json&)>& log) {
  if (model.task() != Task::kChat) {
    throw std::invalid_argument("pretrain: expected a history-only model, got task " +
                                std::string(task_name(model.task())));
  }
  auto working = GeneratorModel::from_checkpoint(model.to_checkpoint());
  const auto dev_inputs = encode_pairs(working, dev, pipeline);

  config.phase = Phase::kPretrain;
  Trainer first(working, encode_pairs(working, pairs, pipeline), dev_inputs, config);
  const auto s1 = first.run(log);

  auto second_model = first.best_model();
  const auto longer = select_longer_half(pairs);
  config.phase = Phase::kPretrainLongerHalf;
  Trainer second(second_model, encode_pairs(second_model, longer, pipeline), dev_inputs, config);
  const auto s2 = second.run(log);
  return {second.best_model(), s1, s2};
}

FinetuneResult finetune(const GeneratorModel& pretrained, std::span<const DialogSample> train,
                        std::span<const DialogSample> dev, const PipelineConfig& pipeline,
                        TrainConfig config,
                        const std::function<void(const nlohmann::json&)>& log) {
  auto check = [&](std::span<const DialogSample> samples, const char* which) {
    for (std::size_t i = 0; i < samples.size(); ++i) {
      if (samples[i].task != config.task) {
        throw DataError(std::string("finetune: ") + which + " sample " + std::to_string(i) +
                        " is a " + std::string(task_name(samples[i].task)) + " sample, expected " +
                        std::string(task_name(config.task)));
      }
    }
  };
  check(train, "training");
  check(dev, "dev");

  GeneratorModel model = [&] {
    if (pretrained.task() == Task::kChat && config.task != Task::kChat) {
      return pretrained.transplant(config.task, config.seed);
    }
    if (pretrained.task() != config.task) {
      throw std::invalid_argument("finetune: cannot turn a " +
                                  std::string(task_name(pretrained.task())) + " model into " +
                                  std::string(task_name(config.task)));
    }
    return GeneratorModel::from_checkpoint(pretrained.to_checkpoint());
  }();

  config.phase = Phase::kFinetune;
  Trainer trainer(model, encode_samples(model, train, pipeline), encode_samples(model, dev, pipeline),
                  config);
  const auto summary = trainer.run(log);
  return {trainer.best_model(), summary};
}

}  // namespace msdf
