#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "msdf/trainer.hpp"

using namespace msdf;

namespace {

Vocab vocab() {
  const std::vector<std::string> texts = {"你好 我 喜欢 看 电影 吗 是 的 推荐 一部 动作 类型",
                                          "alpha beta gamma delta epsilon zeta eta theta"};
  return Vocab::build(texts, 200);
}

ModelConfig config(double dropout = 0.1) {
  ModelConfig c;
  c.d = 16;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_ff = 32;
  c.max_len = 24;
  c.dropout = dropout;
  c.init_std = 0.1;
  return c;
}

std::vector<HistoryResponse> pairs(std::size_t n) {
  const std::vector<std::string> words = {"alpha", "beta", "gamma", "delta", "epsilon", "zeta"};
  std::vector<HistoryResponse> out;
  for (std::size_t i = 0; i < n; ++i) {
    HistoryResponse p;
    p.history = {words[i % words.size()] + " " + words[(i + 1) % words.size()]};
    std::string r;
    for (std::size_t k = 0; k <= i % 4; ++k) r += (k ? " " : "") + words[(i + k + 2) % words.size()];
    p.response = r;
    out.push_back(p);
  }
  return out;
}

TrainConfig quick(std::size_t batch = 4) {
  TrainConfig t = TrainConfig::desk(Task::kChat);
  t.optim.lr = 1e-2;
  t.batch_size = batch;
  t.max_epochs = 3;
  t.eval_every = 3;
  t.seed = 42;
  return t;
}

std::vector<EncodedInput> inputs(const GeneratorModel& m, std::size_t n) {
  const auto p = pairs(n);
  return encode_pairs(m, p, PipelineConfig{});
}

std::vector<double> flat_params(const GeneratorModel& m) {
  std::vector<double> out;
  const auto params = m.parameters();
  for (const auto& p : params.items()) out.insert(out.end(), p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

}  // namespace

TEST_CASE("training presets") {
  const auto k = TrainConfig::full(Task::kKnowledge);
  CHECK(k.optim.lr == 2.5e-5);
  CHECK(k.optim.beta1 == 0.9);
  CHECK(k.optim.beta2 == 0.999);
  CHECK(k.optim.eps == 1e-5);
  CHECK(k.batch_size == 16);
  CHECK(k.max_epochs == 15);
  const auto r = TrainConfig::full(Task::kRecommendation);
  CHECK(r.batch_size == 2);
  CHECK(r.max_epochs == 10);
  const auto p = TrainConfig::full(Task::kPersona);
  CHECK(p.batch_size == 16);
  CHECK(p.max_epochs == 10);

  const auto d = TrainConfig::desk(Task::kPersona);
  CHECK(d.optim.lr == 3e-4);
  CHECK(d.batch_size == 16);
  CHECK(d.grad_clip == 1.0);
  CHECK(d.max_epochs == 5);
  CHECK(d.eval_every == 200);
  CHECK(d.phase == Phase::kFinetune);

  const auto back = TrainConfig::from_json(r.to_json(), TrainConfig{});
  CHECK(back.to_json() == r.to_json());
  auto bad = r.to_json();
  bad["batch_size"] = 0;
  CHECK_THROWS_AS(TrainConfig::from_json(bad, TrainConfig{}), std::invalid_argument);
  CHECK_THROWS_AS(parse_phase("warmup"), std::invalid_argument);
}

TEST_CASE("training is bit-deterministic under a fixed seed") {
  auto run = [] {
    auto m = GeneratorModel::create(Task::kChat, config(), vocab(), 1);
    Trainer t(m, inputs(m, 10), {}, quick());
    return t.run();
  };
  const auto a = run();
  const auto b = run();
  REQUIRE(a.step_losses.size() == 9);  // 3 epochs of ceil(10/4) batches
  CHECK(a.step_losses == b.step_losses);
  CHECK(a.best_dev_loss == b.best_dev_loss);
}

TEST_CASE("clipping bounds the global gradient norm") {
  auto m = GeneratorModel::create(Task::kChat, config(0.0), vocab(), 2);
  auto cfg = quick();
  cfg.grad_clip = 1e-3;
  Trainer t(m, inputs(m, 8), {}, cfg);
  const auto params = m.parameters().tensors();
  for (int i = 0; i < 3; ++i) {
    t.step();
    CHECK(global_grad_norm(params) <= cfg.grad_clip + 1e-9);
  }
}

TEST_CASE("resuming mid-epoch reproduces the uninterrupted run") {
  auto cfg = quick();
  cfg.max_epochs = 0;
  cfg.max_steps = 12;

  auto full_model = GeneratorModel::create(Task::kChat, config(), vocab(), 3);
  Trainer full(full_model, inputs(full_model, 10), {}, cfg);
  std::vector<double> expected;
  while (!full.finished()) expected.push_back(full.step());

  auto first_model = GeneratorModel::create(Task::kChat, config(), vocab(), 3);
  Trainer first(first_model, inputs(first_model, 10), {}, cfg);
  std::vector<double> resumed;
  for (int i = 0; i < 5; ++i) resumed.push_back(first.step());  // 5 steps: mid-epoch 2
  const auto path = std::filesystem::temp_directory_path() / "msdf_trainer_state.ckpt";
  first.save_state(path);

  auto second_model = GeneratorModel::create(Task::kChat, config(), vocab(), 99);
  Trainer second(second_model, inputs(second_model, 10), {}, cfg);
  second.restore(Checkpoint::load(path));
  std::filesystem::remove(path);
  CHECK(second.steps_taken() == 5);
  CHECK(second.epoch() == 1);
  while (!second.finished()) resumed.push_back(second.step());
  CHECK(resumed == expected);
  CHECK(flat_params(second_model) == flat_params(full_model));
}

TEST_CASE("state round trip then one step equals one step") {
  auto a_model = GeneratorModel::create(Task::kChat, config(), vocab(), 4);
  Trainer a(a_model, inputs(a_model, 6), {}, quick(2));
  a.step();
  a.step();
  const auto path = std::filesystem::temp_directory_path() / "msdf_trainer_rt.ckpt";
  a.save_state(path);
  auto b_model = GeneratorModel::create(Task::kChat, config(), vocab(), 5);
  Trainer b(b_model, inputs(b_model, 6), {}, quick(2));
  b.restore(Checkpoint::load(path));
  std::filesystem::remove(path);
  CHECK(a.step() == b.step());
  CHECK(flat_params(a_model) == flat_params(b_model));

  auto c_model = GeneratorModel::create(Task::kChat, config(), vocab(), 6);
  Trainer c(c_model, inputs(c_model, 7), {}, quick(2));
  CHECK_THROWS_AS(c.restore(a.state()), std::runtime_error);
}

TEST_CASE("the kept checkpoint has the lowest logged dev loss") {
  auto m = GeneratorModel::create(Task::kChat, config(), vocab(), 7);
  const auto dev_pairs = pairs(4);
  Trainer t(m, inputs(m, 12), encode_pairs(m, dev_pairs, PipelineConfig{}), quick());
  std::vector<double> logged;
  const auto summary = t.run([&](const nlohmann::json& e) {
    logged.push_back(e["dev_loss"].get<double>());
    CHECK(e.contains("lr"));
    CHECK(e.contains("step"));
    CHECK(e.contains("loss"));
  });
  REQUIRE_FALSE(logged.empty());
  for (double l : logged) CHECK(summary.best_dev_loss <= l);
  const auto best = t.best_model();
  CHECK(corpus_loss(best, encode_pairs(best, dev_pairs, PipelineConfig{})) == summary.best_dev_loss);
}

TEST_CASE("a diverging step aborts and restores the last good parameters") {
  auto m = GeneratorModel::create(Task::kChat, config(0.0), vocab(), 8);
  Trainer t(m, inputs(m, 6), {}, quick());
  t.step();
  t.evaluate();
  const auto good = flat_params(m);
  for (double& x : m.token_table.mutable_data()) x = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(t.step(), DivergenceError);
  CHECK(flat_params(m) == good);
}

TEST_CASE("pretraining runs the longer half second") {
  auto m = GeneratorModel::create(Task::kChat, config(), vocab(), 9);
  auto cfg = quick(1);
  cfg.max_epochs = 1;
  cfg.eval_every = 0;
  const auto corpus = pairs(5);
  std::vector<std::string> phases;
  const auto result = pretrain(m, corpus, {}, PipelineConfig{}, cfg,
                               [&](const nlohmann::json& e) { phases.push_back(e["phase"]); });
  CHECK(result.phase1.steps == 5);
  CHECK(result.phase2.steps == 3);
  CHECK(phases == std::vector<std::string>{"pretrain", "pretrain-longer-half"});
  CHECK(result.model.task() == Task::kChat);

  auto knowledge = GeneratorModel::create(Task::kKnowledge, config(), vocab(), 9);
  CHECK_THROWS_AS(pretrain(knowledge, corpus, {}, PipelineConfig{}, cfg), std::invalid_argument);
}

TEST_CASE("fine-tuning transplants and checks the corpus task") {
  auto base = GeneratorModel::create(Task::kChat, config(), vocab(), 10);
  DialogSample s;
  s.task = Task::kKnowledge;
  s.history = {"你好"};
  KnowledgeItem k;
  k.triple = {"alpha", "类型", "动作"};
  s.knowledge = {k};
  s.goal = {"推荐"};
  s.response = "推荐 alpha";
  std::vector<DialogSample> corpus(4, s);

  auto cfg = TrainConfig::desk(Task::kKnowledge);
  cfg.optim.lr = 1e-2;
  cfg.batch_size = 2;
  cfg.max_epochs = 2;
  cfg.eval_every = 0;
  const auto result = finetune(base, corpus, {}, PipelineConfig{}, cfg);
  CHECK(result.model.task() == Task::kKnowledge);
  CHECK(result.model.copy_enabled());
  CHECK(result.summary.steps == 4);

  cfg.task = Task::kPersona;
  CHECK_THROWS_AS(finetune(base, corpus, {}, PipelineConfig{}, cfg), DataError);
  cfg.task = Task::kKnowledge;
  auto persona_model = GeneratorModel::create(Task::kPersona, config(), vocab(), 10);
  CHECK_THROWS_AS(finetune(persona_model, corpus, {}, PipelineConfig{}, cfg), std::invalid_argument);
}
