#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "msdf/evalkit.hpp"
#include "msdf/serve.hpp"
#include "msdf/synth.hpp"
#include "msdf/trainer.hpp"
#include "msdf/word_vectors.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace msdf;

namespace {

std::vector<json> read_lines(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::vector<json> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(json::parse(line));
    } catch (const json::parse_error& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

class LineWriter {
 public:
  explicit LineWriter(const fs::path& path) : os_(path) {
    if (!os_) throw std::runtime_error("cannot write " + path.string());
  }
  void write(const json& j) {
    os_ << j.dump(-1, ' ', false, json::error_handler_t::replace) << '\n';
  }

 private:
  std::ofstream os_;
};

// Accepts raw sample lines and preprocess output lines (which carry the
// sample under "sample").
std::vector<DialogSample> load_samples(const fs::path& path) {
  std::vector<DialogSample> out;
  for (const auto& j : read_lines(path)) out.push_back(sample_from_json(j.contains("sample") ? j["sample"] : j));
  return out;
}

// Dialog lines are {"turns": [...]}; a sample line contributes its history
// followed by its response.
std::vector<std::vector<std::string>> load_dialogs(const fs::path& path) {
  std::vector<std::vector<std::string>> out;
  for (const auto& j : read_lines(path)) {
    if (j.contains("turns")) {
      out.push_back(j["turns"].get<std::vector<std::string>>());
    } else {
      const auto s = sample_from_json(j.contains("sample") ? j["sample"] : j);
      auto turns = s.history;
      if (!s.response.empty()) turns.push_back(s.response);
      out.push_back(std::move(turns));
    }
  }
  return out;
}

PipelineConfig load_pipeline(const std::string& path) {
  return path.empty() ? PipelineConfig{} : PipelineConfig::load(path);
}

std::function<void(const json&)> json_log(const std::string& path) {
  std::shared_ptr<LineWriter> file;
  if (!path.empty()) file = std::make_shared<LineWriter>(path);
  return [file](const json& j) {
    if (file) file->write(j);
    std::cerr << j.dump() << '\n';
  };
}

struct ModelFlags {
  std::size_t d = 64, layers = 2, heads = 2, d_ff = 256, max_len = 64, vocab_size = 8000;
  double dropout = 0.1;
  bool untie = false;
  std::vector<std::string> vocab_extra;

  void add(CLI::App* app) {
    app->add_option("--d", d, "model width");
    app->add_option("--layers", layers, "blocks per encoder and decoder");
    app->add_option("--heads", heads, "attention heads");
    app->add_option("--d-ff", d_ff, "feed-forward width");
    app->add_option("--max-len", max_len, "longest sequence");
    app->add_option("--dropout", dropout);
    app->add_option("--vocab-size", vocab_size, "vocabulary cap, reserved tokens included");
    app->add_flag("--untie-lm-head", untie, "separate output matrix instead of the token table");
    app->add_option("--vocab-extra", vocab_extra, "more JSONL files whose text enters the vocabulary")
        ->check(CLI::ExistingFile);
  }
  ModelConfig config() const {
    ModelConfig c;
    c.d = d;
    c.n_layers = layers;
    c.n_heads = heads;
    c.d_ff = d_ff;
    c.max_len = max_len;
    c.dropout = dropout;
    c.tie_lm_head = !untie;
    return c;
  }
  Vocab vocab(std::vector<std::string> texts) const {
    for (const auto& f : vocab_extra) {
      const auto extra = synth::corpus_texts(load_samples(f));
      texts.insert(texts.end(), extra.begin(), extra.end());
    }
    return Vocab::build(texts, vocab_size);
  }
};

struct TrainFlags {
  std::string preset = "desk";
  std::optional<double> lr;
  std::optional<std::size_t> batch, epochs;
  std::size_t max_steps = 0, eval_every = 0;
  double stop_below = 0.0;
  std::uint64_t seed = 0;
  std::string log;

  void add(CLI::App* app) {
    app->add_option("--preset", preset, "desk or full")->check(CLI::IsMember({"desk", "full"}));
    app->add_option("--lr", lr);
    app->add_option("--batch", batch);
    app->add_option("--epochs", epochs);
    app->add_option("--max-steps", max_steps, "0: epochs only");
    app->add_option("--eval-every", eval_every, "0: preset value");
    app->add_option("--stop-below", stop_below, "stop once the training loss is below this");
    app->add_option("--seed", seed);
    app->add_option("--log", log, "JSON-lines training log (also echoed to stderr)");
  }
  TrainConfig config(Task task) const {
    auto c = preset == "full" ? TrainConfig::full(task) : TrainConfig::desk(task);
    if (lr) c.optim.lr = *lr;
    if (batch) c.batch_size = *batch;
    if (epochs) c.max_epochs = *epochs;
    c.max_steps = max_steps;
    if (eval_every) c.eval_every = eval_every;
    c.stop_below_train_loss = stop_below;
    c.seed = seed;
    c.validate();
    return c;
  }
};

std::vector<HistoryResponse> pairs_of(const std::vector<std::vector<std::string>>& dialogs) {
  return shape_pretraining_corpus(dialogs);
}

std::vector<std::string> dialog_texts(const std::vector<std::vector<std::string>>& dialogs) {
  std::vector<std::string> out;
  for (const auto& d : dialogs) out.insert(out.end(), d.begin(), d.end());
  return out;
}

// --- subcommands -------------------------------------------------------------

int cmd_synth(const std::string& kind, std::size_t n_train, std::size_t n_dev, std::size_t n_test,
              double noise, std::uint64_t seed, const fs::path& dir) {
  fs::create_directories(dir);
  auto write = [&](const std::string& name, const std::vector<DialogSample>& samples) {
    write_jsonl(dir / name, samples);
    std::cerr << "wrote " << samples.size() << " samples to " << (dir / name).string() << '\n';
  };
  if (kind == "copy") {
    const auto t = synth::make_copy_task(n_train, n_dev, n_test, seed);
    write("train.jsonl", t.train);
    write("dev.jsonl", t.dev);
    write("test.jsonl", t.test);
  } else {
    const auto t = synth::make_keyed_task(n_train, n_dev, n_test, noise, seed);
    write("train.jsonl", t.train);
    write("generator_train.jsonl", t.generator_train);
    write("dev.jsonl", t.dev);
    write("test.jsonl", t.test);
  }
  return 0;
}

int cmd_preprocess(Task task, const fs::path& in, const fs::path& out, const std::string& config_path,
                   std::uint64_t seed) {
  const auto pipeline = load_pipeline(config_path);
  auto samples = load_samples(in);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].task != task) {
      throw DataError(in.string() + ": sample " + std::to_string(i) + " has task " +
                      std::string(task_name(samples[i].task)) + ", expected " +
                      std::string(task_name(task)));
    }
  }
  const std::size_t before = samples.size();
  if (task == Task::kPersona) {
    std::vector<std::string> texts;
    for (const auto& s : samples) {
      texts.push_back(s.response);
      texts.insert(texts.end(), s.persona.begin(), s.persona.end());
    }
    WordVectorConfig wv;
    wv.seed = seed;
    const auto vectors = WordVectors::train_on_text(texts, wv);
    samples = filter_persona_corpus(samples, vectors, pipeline.persona_filter, seed);
  }
  LineWriter w(out);
  for (const auto& s : samples) {
    const auto p = preprocess(s, pipeline);
    json j{{"schema_version", sample_to_json(s)["schema_version"]},
           {"task", std::string(task_name(p.task))},
           {"history", p.history},
           {"knowledge", p.knowledge ? json(*p.knowledge) : json()},
           {"persona", p.persona ? json(*p.persona) : json()},
           {"target", p.target},
           {"placeholder_map", p.placeholders.to_json()},
           {"user_name", p.user_name},
           {"sample", sample_to_json(s)}};
    w.write(j);
  }
  std::cerr << "preprocessed " << samples.size() << " of " << before << " samples\n";
  return 0;
}

int cmd_pretrain(const fs::path& train, const fs::path& dev, const fs::path& out,
                 const std::string& pipeline_path, const ModelFlags& mf, const TrainFlags& tf) {
  const auto pipeline = load_pipeline(pipeline_path);
  const auto train_dialogs = load_dialogs(train);
  const auto dev_dialogs = dev.empty() ? decltype(train_dialogs){} : load_dialogs(dev);
  auto texts = dialog_texts(train_dialogs);
  const auto dev_texts = dialog_texts(dev_dialogs);
  texts.insert(texts.end(), dev_texts.begin(), dev_texts.end());
  auto model = GeneratorModel::create(Task::kChat, mf.config(), mf.vocab(texts), tf.seed);
  auto config = tf.config(Task::kChat);
  const auto result = pretrain(std::move(model), pairs_of(train_dialogs), pairs_of(dev_dialogs),
                               pipeline, config, json_log(tf.log));
  result.model.save(out);
  std::cerr << "saved " << out.string() << " (phase 2 best dev loss " << result.phase2.best_dev_loss
            << ")\n";
  return 0;
}

int cmd_finetune(const std::string& init, Task task, const fs::path& train, const fs::path& dev,
                 const fs::path& out, const std::string& pipeline_path, const ModelFlags& mf,
                 const TrainFlags& tf) {
  const auto pipeline = load_pipeline(pipeline_path);
  const auto train_samples = load_samples(train);
  const auto dev_samples = dev.empty() ? std::vector<DialogSample>{} : load_samples(dev);
  GeneratorModel base = [&] {
    if (!init.empty()) return GeneratorModel::load(init);
    auto texts = synth::corpus_texts(train_samples);
    const auto more = synth::corpus_texts(dev_samples);
    texts.insert(texts.end(), more.begin(), more.end());
    return GeneratorModel::create(Task::kChat, mf.config(), mf.vocab(texts), tf.seed);
  }();
  auto config = tf.config(task);
  config.task = task;
  const auto result = finetune(base, train_samples, dev_samples, pipeline, config, json_log(tf.log));
  result.model.save(out);
  std::cerr << "saved " << out.string() << " (best dev loss " << result.summary.best_dev_loss
            << " at step " << result.summary.best_step << ")\n";
  return 0;
}

int cmd_generate(const fs::path& model_path, const fs::path& input, const fs::path& out,
                 const std::string& pipeline_path, DecodeParams params) {
  params.validate();
  const auto pipeline = load_pipeline(pipeline_path);
  const auto model = GeneratorModel::load(model_path);
  const auto samples = load_samples(input);
  LineWriter w(out);
  const std::uint64_t base_seed = params.seed;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    params.seed = base_seed + i;
    const auto pool = model.respond(samples[i], pipeline, params);
    json cands = json::array();
    for (const auto& c : pool.candidates) {
      cands.push_back({{"text", c.text}, {"raw_text", c.raw_text}, {"logprob", c.logprob}, {"ended", c.ended}});
    }
    w.write({{"index", i}, {"history", samples[i].history}, {"seed", params.seed}, {"candidates", cands}});
  }
  std::cerr << "wrote " << samples.size() << " pools to " << out.string() << '\n';
  return 0;
}

int cmd_train_selector(const fs::path& corpus, const fs::path& dev, std::size_t neg_ratio,
                       std::uint64_t seed, const fs::path& out, std::size_t steps, double lr,
                       std::size_t batch, const ModelFlags& mf, const std::string& log) {
  const auto train_samples = load_samples(corpus);
  const auto dev_samples = load_samples(dev);
  auto texts = synth::corpus_texts(train_samples);
  const auto more = synth::corpus_texts(dev_samples);
  texts.insert(texts.end(), more.begin(), more.end());
  const auto train_pairs = build_pairs(train_samples, neg_ratio, seed);
  const auto dev_pairs = build_pairs(dev_samples, neg_ratio, seed + 1);
  SelectorTrainConfig config;
  config.optim.lr = lr;
  config.max_steps = steps;
  config.batch_size = batch;
  config.seed = seed;
  const auto result = train_selector(SelectorModel::create(mf.config(), mf.vocab(texts), seed),
                                     train_pairs, dev_pairs, config, json_log(log));
  result.model.save(out);
  const auto eval = result.model.evaluate(dev_pairs);
  std::cerr << "saved " << out.string() << " (dev loss " << eval.loss << ", accuracy "
            << eval.accuracy << ")\n";
  return 0;
}

int cmd_rerank(const fs::path& selector_path, const fs::path& pools, const fs::path& out) {
  const auto selector = SelectorModel::load(selector_path);
  LineWriter w(out);
  std::size_t n = 0;
  for (const auto& line : read_lines(pools)) {
    CandidatePool pool;
    for (const auto& c : line.at("candidates")) {
      Candidate cand;
      cand.text = c.at("text").get<std::string>();
      cand.logprob = c.at("logprob").get<double>();
      pool.candidates.push_back(std::move(cand));
    }
    pool.pool_size = pool.candidates.size();
    const auto history = line.at("history").get<std::vector<std::string>>();
    const auto scored = selector.rerank(pool, history);
    w.write({{"index", line.value("index", n)},
             {"text", pool.candidates.at(scored.chosen).text},
             {"chosen", scored.chosen},
             {"scores", scored.scores}});
    ++n;
  }
  std::cerr << "reranked " << n << " pools\n";
  return 0;
}

int cmd_eval(const fs::path& hyp, const fs::path& ref, const std::string& report_path) {
  const auto hyps = read_lines(hyp);
  const auto refs = load_samples(ref);
  if (hyps.size() != refs.size()) {
    throw DataError("eval: " + std::to_string(hyps.size()) + " hypotheses for " +
                    std::to_string(refs.size()) + " references");
  }
  std::vector<std::string> tasks, hyp_text, ref_text;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const auto& h = hyps[i];
    hyp_text.push_back(h.is_string() ? h.get<std::string>() : h.value("text", h.value("response", "")));
    ref_text.push_back(refs[i].response);
    tasks.emplace_back(task_name(refs[i].task));
  }
  const auto report = build_report(tasks, hyp_text, ref_text).to_json();
  if (!report_path.empty()) {
    std::ofstream os(report_path);
    if (!os) throw std::runtime_error("cannot write " + report_path);
    os << report.dump(2) << '\n';
  }
  std::cout << report.dump(2) << '\n';
  return 0;
}

HttpServer* g_server = nullptr;

int cmd_serve(const std::vector<std::string>& generators, const std::string& selector,
              const std::string& host, int port, const std::string& journal_dir,
              const std::string& pipeline_path, std::size_t workers, DecodeParams decoding) {
  std::vector<std::shared_ptr<const GeneratorModel>> models;
  for (const auto& g : generators) {
    models.push_back(std::make_shared<const GeneratorModel>(GeneratorModel::load(g)));
    std::cerr << "loaded " << g << " for task " << task_name(models.back()->task()) << '\n';
  }
  ServiceConfig config;
  config.pipeline = load_pipeline(pipeline_path);
  config.decoding = decoding;
  if (!journal_dir.empty()) config.journal_dir = journal_dir;
  auto service = std::make_shared<ChatService>(
      models, std::make_shared<const SelectorModel>(SelectorModel::load(selector)), config);
  if (config.journal_dir) std::cerr << "restored " << service->restore() << " sessions\n";
  HttpServer server(service, workers);
  g_server = &server;
  std::signal(SIGINT, [](int) {
    if (g_server) g_server->stop();
  });
  std::cerr << "listening on " << host << ":" << port << '\n';
  server.listen(host, port);
  return 0;
}

void add_decoding(CLI::App* app, DecodeParams& p) {
  app->add_option("--pool-size", p.pool_size, "candidates per context");
  app->add_option("--top-k", p.top_k);
  app->add_option("--temperature", p.temperature, "below 1e-6 decodes greedily");
  app->add_option("--max-new-tokens", p.max_new_tokens);
  app->add_option("--seed", p.seed);
}

Task task_option(const std::string& s) { return parse_task(s); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-stage dialog generation: response pools from a multi-source generator, "
               "reranked by a consistency selector."};
  app.require_subcommand(1);
  const auto task_names = CLI::IsMember({"knowledge", "recommendation", "persona", "chat"});

  // synth
  std::string synth_kind = "copy";
  std::size_t n_train = 2000, n_dev = 200, n_test = 200;
  double noise = 0.5;
  std::uint64_t synth_seed = 0;
  std::string synth_dir;
  auto* synth_cmd = app.add_subcommand("synth", "write a seeded synthetic corpus");
  synth_cmd->add_option("--kind", synth_kind, "copy (knowledge task) or keyed (chat task)")
      ->check(CLI::IsMember({"copy", "keyed"}));
  synth_cmd->add_option("--n-train", n_train);
  synth_cmd->add_option("--n-dev", n_dev);
  synth_cmd->add_option("--n-test", n_test);
  synth_cmd->add_option("--noise", noise, "keyed: share of generator responses from a random topic");
  synth_cmd->add_option("--seed", synth_seed);
  synth_cmd->add_option("--out-dir", synth_dir)->required();

  // preprocess
  std::string pre_task, pre_in, pre_out, pre_config;
  std::uint64_t pre_seed = 0;
  auto* pre = app.add_subcommand("preprocess", "validate, filter, and linearize a corpus");
  pre->add_option("--task", pre_task)->required()->check(task_names);
  pre->add_option("--in", pre_in)->required()->check(CLI::ExistingFile);
  pre->add_option("--out", pre_out)->required();
  pre->add_option("--config", pre_config, "pipeline TOML or JSON")->check(CLI::ExistingFile);
  pre->add_option("--seed", pre_seed);

  // pretrain
  std::string pt_train, pt_dev, pt_out, pt_pipeline;
  ModelFlags pt_model;
  TrainFlags pt_train_flags;
  auto* pt = app.add_subcommand("pretrain", "train the history-only model on dialogs");
  pt->add_option("--train", pt_train, "dialog or sample JSONL")->required()->check(CLI::ExistingFile);
  pt->add_option("--dev", pt_dev)->check(CLI::ExistingFile);
  pt->add_option("--out", pt_out)->required();
  pt->add_option("--pipeline", pt_pipeline)->check(CLI::ExistingFile);
  pt_model.add(pt);
  pt_train_flags.add(pt);

  // finetune
  std::string ft_init, ft_task, ft_train, ft_dev, ft_out, ft_pipeline;
  ModelFlags ft_model;
  TrainFlags ft_train_flags;
  auto* ft = app.add_subcommand("finetune", "transplant a pre-trained model to a task and train it");
  ft->add_option("--init", ft_init, "pre-trained checkpoint; omitted: random history-only start")
      ->check(CLI::ExistingFile);
  ft->add_option("--task", ft_task)->required()->check(task_names);
  ft->add_option("--train", ft_train)->required()->check(CLI::ExistingFile);
  ft->add_option("--dev", ft_dev)->check(CLI::ExistingFile);
  ft->add_option("--out", ft_out)->required();
  ft->add_option("--pipeline", ft_pipeline)->check(CLI::ExistingFile);
  ft_model.add(ft);
  ft_train_flags.add(ft);

  // generate
  std::string gen_model, gen_input, gen_out, gen_pipeline;
  DecodeParams gen_params;
  auto* gen = app.add_subcommand("generate", "sample a candidate pool per context");
  gen->add_option("--model", gen_model)->required()->check(CLI::ExistingFile);
  gen->add_option("--input", gen_input)->required()->check(CLI::ExistingFile);
  gen->add_option("--out", gen_out)->required();
  gen->add_option("--pipeline", gen_pipeline)->check(CLI::ExistingFile);
  add_decoding(gen, gen_params);

  // train-selector
  std::string ts_corpus, ts_dev, ts_out, ts_log;
  std::size_t ts_neg = 1, ts_steps = 2000, ts_batch = 16;
  double ts_lr = 3e-4;
  std::uint64_t ts_seed = 0;
  ModelFlags ts_model;
  auto* ts = app.add_subcommand("train-selector", "train the consistency classifier");
  ts->add_option("--corpus", ts_corpus)->required()->check(CLI::ExistingFile);
  ts->add_option("--dev", ts_dev)->required()->check(CLI::ExistingFile);
  ts->add_option("--neg-ratio", ts_neg, "negatives per positive");
  ts->add_option("--seed", ts_seed);
  ts->add_option("--out", ts_out)->required();
  ts->add_option("--steps", ts_steps);
  ts->add_option("--lr", ts_lr);
  ts->add_option("--batch", ts_batch);
  ts->add_option("--log", ts_log);
  ts_model.add(ts);

  // rerank
  std::string rr_selector, rr_pools, rr_out;
  auto* rr = app.add_subcommand("rerank", "pick the most consistent candidate of every pool");
  rr->add_option("--selector", rr_selector)->required()->check(CLI::ExistingFile);
  rr->add_option("--pools", rr_pools)->required()->check(CLI::ExistingFile);
  rr->add_option("--out", rr_out)->required();

  // eval
  std::string ev_hyp, ev_ref, ev_report;
  auto* ev = app.add_subcommand("eval", "character F1, BLEU-1/2, DISTINCT-1/2, and SCORE");
  ev->add_option("--hyp", ev_hyp, "JSONL with a text field per line")->required()->check(CLI::ExistingFile);
  ev->add_option("--ref", ev_ref, "samples whose responses are the references")
      ->required()
      ->check(CLI::ExistingFile);
  ev->add_option("--report", ev_report);

  // serve
  std::vector<std::string> sv_generators;
  std::string sv_selector, sv_host = "127.0.0.1", sv_journal, sv_pipeline;
  int sv_port = 8080;
  std::size_t sv_workers = 4;
  DecodeParams sv_decoding;
  auto* sv = app.add_subcommand("serve", "chat sessions over HTTP");
  sv->add_option("--generator", sv_generators, "one checkpoint per task")->required()->check(CLI::ExistingFile);
  sv->add_option("--selector", sv_selector)->required()->check(CLI::ExistingFile);
  sv->add_option("--host", sv_host);
  sv->add_option("--port", sv_port);
  sv->add_option("--journal-dir", sv_journal, "session journals; replayed at start");
  sv->add_option("--pipeline", sv_pipeline)->check(CLI::ExistingFile);
  sv->add_option("--workers", sv_workers);
  add_decoding(sv, sv_decoding);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth_cmd) return cmd_synth(synth_kind, n_train, n_dev, n_test, noise, synth_seed, synth_dir);
    if (*pre) return cmd_preprocess(task_option(pre_task), pre_in, pre_out, pre_config, pre_seed);
    if (*pt) return cmd_pretrain(pt_train, pt_dev, pt_out, pt_pipeline, pt_model, pt_train_flags);
    if (*ft) {
      return cmd_finetune(ft_init, task_option(ft_task), ft_train, ft_dev, ft_out, ft_pipeline, ft_model,
                          ft_train_flags);
    }
    if (*gen) return cmd_generate(gen_model, gen_input, gen_out, gen_pipeline, gen_params);
    if (*ts) {
      return cmd_train_selector(ts_corpus, ts_dev, ts_neg, ts_seed, ts_out, ts_steps, ts_lr, ts_batch,
                                ts_model, ts_log);
    }
    if (*rr) return cmd_rerank(rr_selector, rr_pools, rr_out);
    if (*ev) return cmd_eval(ev_hyp, ev_ref, ev_report);
    if (*sv) {
      return cmd_serve(sv_generators, sv_selector, sv_host, sv_port, sv_journal, sv_pipeline, sv_workers,
                       sv_decoding);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
