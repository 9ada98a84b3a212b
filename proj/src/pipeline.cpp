#include "modrank/pipeline.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "json.hpp"
#include "modrank/error.hpp"
#include "modrank/io.hpp"

namespace modrank {

namespace {

using Json = nlohmann::ordered_json;

std::uint64_t derive_seed(std::uint64_t seed, std::string_view purpose) {
  std::uint64_t h = 1469598103934665603ULL ^ seed;
  for (unsigned char c : purpose) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

TrainConfig seeded(TrainConfig c, std::uint64_t seed, std::string_view purpose) {
  c.seed = derive_seed(seed, purpose);
  return c;
}

Json train_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate}, {"batch_size", c.batch_size}, {"steps", c.steps},
          {"warmup_steps", c.warmup_steps},   {"eval_interval", c.eval_interval}, {"max_seq_len", c.max_seq_len}};
}

TrainConfig train_from_json(const nlohmann::json& j, TrainConfig c) {
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.steps = j.value("steps", c.steps);
  c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
  c.eval_interval = j.value("eval_interval", c.eval_interval);
  c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
  return c;
}

const char* module_name(ModuleKind k) { return k == ModuleKind::kAdapter ? "adapter" : "sftm"; }
const char* preranker_name(Preranker p) { return p == Preranker::kBm25 ? "bm25" : "biencoder"; }

std::vector<std::string> texts_of(const Corpus& corpus, bool held_out) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    if ((i % 20 == 19) == held_out) out.push_back(corpus.at(i).text);
  }
  return out;
}

TrainableSet all_but_head(const ParamStore& params) {
  TrainableSet set;
  for (const auto& [name, t] : params.entries()) {
    if (!name.starts_with(kScoreHeadPrefix)) set.add(t);
  }
  return set;
}

std::size_t head_offset(const ParamStore& params) {
  const auto off = params.offset("score.weight");
  if (off + params.at("score.weight").numel() + params.at("score.bias").numel() != params.num_coordinates()) {
    throw ContractError("scoring head must occupy the last coordinates of θ");
  }
  return off;
}

Qrels restrict_qrels(const Qrels& qrels, const std::vector<Query>& queries) {
  Qrels out;
  for (const auto& q : queries) {
    if (auto it = qrels.relevant.find(q.id); it != qrels.relevant.end()) out.relevant.insert(*it);
  }
  return out;
}

}  // namespace

// Configuration ---------------------------------------------------------------------

ExperimentConfig ExperimentConfig::defaults(std::uint64_t seed) {
  ExperimentConfig c;
  c.seed = seed;
  c.benchmark = "bench";
  c.work_dir = "work";
  c.base_training = {.learning_rate = 1e-3, .batch_size = 32, .steps = 3000, .warmup_steps = 200,
                     .eval_interval = 500, .seed = 0, .max_seq_len = 64};
  c.language_training = {.learning_rate = 1e-3, .batch_size = 32, .steps = 3000, .warmup_steps = 0,
                         .eval_interval = 500, .seed = 0, .max_seq_len = 64};
  c.ranking_training = {.learning_rate = 1e-3, .batch_size = 16, .steps = 2000, .warmup_steps = 200,
                        .eval_interval = 200, .seed = 0, .max_seq_len = 64};
  c.full_training = {.learning_rate = 1e-4, .batch_size = 16, .steps = 2000, .warmup_steps = 200,
                     .eval_interval = 200, .seed = 0, .max_seq_len = 64};
  return c;
}

std::string ExperimentConfig::to_json() const {
  const auto& e = encoder;
  Json j{{"version", kVersion},
         {"benchmark", benchmark.string()},
         {"work_dir", work_dir.string()},
         {"seed", seed},
         {"encoder",
          {{"num_layers", e.num_layers}, {"hidden", e.hidden}, {"heads", e.heads}, {"ffn_dim", e.ffn_dim},
           {"max_seq_len", e.max_seq_len}, {"vocab_cap", vocab_cap}, {"code_switch_rate", code_switch_rate}}},
         {"modules",
          {{"kind", module_name(modules)}, {"reduction_factor", reduction_factor},
           {"language_reduction_factor", language_reduction_factor}, {"mode", mode},
           {"invertible", invertible}, {"drop_first_n", drop_first_n}}},
         {"languages", {{"query", query_lang}, {"document", doc_lang}}},
         {"retrieval",
          {{"preranker", preranker_name(preranker)}, {"k", k}, {"ensemble", ensemble}, {"score_batch", score_batch}}},
         {"training",
          {{"negatives_depth", negatives_depth},
           {"validation_k", validation_k},
           {"validation_queries", validation_queries},
           {"base", train_json(base_training)},
           {"language", train_json(language_training)},
           {"ranking", train_json(ranking_training)},
           {"full", train_json(full_training)}}}};
  return j.dump(2) + "\n";
}

ExperimentConfig ExperimentConfig::from_json(const std::string& text, const std::string& source) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(source + ": " + e.what());
  }
  try {
    if (j.value("version", 0) != kVersion) {
      throw ConfigError(source + ": unsupported config version " + std::to_string(j.value("version", 0)));
    }
    ExperimentConfig c = defaults(j.value("seed", std::uint64_t{1}));
    c.benchmark = j.value("benchmark", c.benchmark.string());
    c.work_dir = j.value("work_dir", c.work_dir.string());
    if (j.contains("encoder")) {
      const auto& e = j["encoder"];
      c.encoder.num_layers = e.value("num_layers", c.encoder.num_layers);
      c.encoder.hidden = e.value("hidden", c.encoder.hidden);
      c.encoder.heads = e.value("heads", c.encoder.heads);
      c.encoder.ffn_dim = e.value("ffn_dim", c.encoder.ffn_dim);
      c.encoder.max_seq_len = e.value("max_seq_len", c.encoder.max_seq_len);
      c.vocab_cap = e.value("vocab_cap", c.vocab_cap);
      c.code_switch_rate = e.value("code_switch_rate", c.code_switch_rate);
    }
    if (j.contains("modules")) {
      const auto& m = j["modules"];
      const auto kind = m.value("kind", std::string(module_name(c.modules)));
      if (kind != "adapter" && kind != "sftm") throw ConfigError(source + ": unknown module kind '" + kind + "'");
      c.modules = kind == "adapter" ? ModuleKind::kAdapter : ModuleKind::kSftm;
      c.reduction_factor = m.value("reduction_factor", c.reduction_factor);
      c.language_reduction_factor = m.value("language_reduction_factor", c.language_reduction_factor);
      c.mode = m.value("mode", c.mode);
      c.invertible = m.value("invertible", c.invertible);
      c.drop_first_n = m.value("drop_first_n", c.drop_first_n);
    }
    if (j.contains("languages")) {
      c.query_lang = j["languages"].value("query", c.query_lang);
      c.doc_lang = j["languages"].value("document", c.doc_lang);
    }
    if (j.contains("retrieval")) {
      const auto& r = j["retrieval"];
      const auto pre = r.value("preranker", std::string(preranker_name(c.preranker)));
      if (pre != "bm25" && pre != "biencoder") throw ConfigError(source + ": unknown preranker '" + pre + "'");
      c.preranker = pre == "bm25" ? Preranker::kBm25 : Preranker::kBiEncoder;
      c.k = r.value("k", c.k);
      c.ensemble = r.value("ensemble", c.ensemble);
      c.score_batch = r.value("score_batch", c.score_batch);
    }
    if (j.contains("training")) {
      const auto& t = j["training"];
      c.negatives_depth = t.value("negatives_depth", c.negatives_depth);
      c.validation_k = t.value("validation_k", c.validation_k);
      c.validation_queries = t.value("validation_queries", c.validation_queries);
      if (t.contains("base")) c.base_training = train_from_json(t["base"], c.base_training);
      if (t.contains("language")) c.language_training = train_from_json(t["language"], c.language_training);
      if (t.contains("ranking")) c.ranking_training = train_from_json(t["ranking"], c.ranking_training);
      if (t.contains("full")) c.full_training = train_from_json(t["full"], c.full_training);
    }
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(source + ": " + e.what());
  }
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  return from_json(io::read_file(path), path.string());
}

void ExperimentConfig::save(const std::filesystem::path& path) const { io::write_atomic(path, to_json()); }

void ExperimentConfig::validate() const {
  EncoderConfig e = encoder;
  e.vocab_size = std::max<std::size_t>(e.vocab_size, special::kCount + 1);
  e.validate();
  AdapterConfig{.reduction_factor = reduction_factor}.bottleneck(encoder.hidden);
  AdapterConfig{.reduction_factor = language_reduction_factor}.bottleneck(encoder.hidden);
  const bool adapter = modules == ModuleKind::kAdapter;
  if (!(mode == "Q" || mode == "D" || (adapter ? mode == "S" : mode == "B"))) {
    throw ConfigError("mode '" + mode + "' is not valid for " + module_name(modules) + " modules");
  }
  if (drop_first_n > encoder.num_layers) throw ConfigError("drop_first_n exceeds the layer count");
  if (invertible && encoder.hidden % 2 != 0) throw ConfigError("invertible adapters need an even hidden size");
  for (const auto& lang : {query_lang, doc_lang}) {
    if (lang != kSourceLang && lang != kTargetLang) throw ConfigError("unknown language '" + lang + "'");
  }
  if (!(code_switch_rate >= 0.0 && code_switch_rate <= 1.0)) throw ConfigError("code_switch_rate must lie in [0, 1]");
  if (k == 0) throw ConfigError("k must be at least 1");
  if (validation_k == 0 || validation_queries == 0 || score_batch == 0 || negatives_depth == 0) {
    throw ConfigError("validation_k, validation_queries, score_batch and negatives_depth must be positive");
  }
  for (const auto* t : {&base_training, &language_training, &ranking_training, &full_training}) t->validate();
}

// Workspace -------------------------------------------------------------------------

const Corpus& Workspace::corpus(const std::string& lang) const {
  if (lang == kSourceLang) return bench.source;
  if (lang == kTargetLang) return bench.target;
  throw ConfigError("unknown language '" + lang + "'");
}

const QuerySplit& Workspace::split(const std::string& name) const {
  if (name == "train") return bench.train;
  if (name == "val") return bench.val;
  if (name == "test") return bench.test;
  throw ConfigError("unknown split '" + name + "'");
}

const std::vector<Query>& Workspace::queries(const std::string& split_name, const std::string& lang) const {
  const auto& s = split(split_name);
  if (lang == kSourceLang) return s.source;
  if (lang == kTargetLang) return s.target;
  throw ConfigError("unknown language '" + lang + "'");
}

const InvertedIndex& Workspace::index(const std::string& lang) const {
  auto& slot = indexes_[lang];
  if (!slot) slot = std::make_shared<InvertedIndex>(InvertedIndex::build(corpus(lang)));
  return *slot;
}

// Recipes ---------------------------------------------------------------------------

Checkpoint pretrain_base(const ExperimentConfig& config, const SyntheticBenchmark& bench, TrainResult* result) {
  config.validate();
  std::vector<std::string> vocab_texts;
  for (const auto* c : {&bench.source, &bench.target}) {
    for (const auto& d : c->documents()) vocab_texts.push_back(d.text);
  }
  for (const auto* s : {&bench.train, &bench.val, &bench.test}) {
    for (const auto* qs : {&s->source, &s->target}) {
      for (const auto& q : *qs) vocab_texts.push_back(q.text);
    }
  }
  Checkpoint ckpt;
  ckpt.backbone.tokenizer = Tokenizer::build(vocab_texts, config.vocab_cap);
  ckpt.backbone.config = config.encoder;
  ckpt.backbone.config.vocab_size = ckpt.backbone.tokenizer.size();
  ckpt.params = init_encoder_params(ckpt.backbone.config, derive_seed(config.seed, "init"));

  std::vector<std::string> train, val;
  for (const auto* c : {&bench.source, &bench.target}) {
    for (auto& t : texts_of(*c, false)) train.push_back(std::move(t));
    for (auto& t : texts_of(*c, true)) val.push_back(std::move(t));
  }
  if (config.code_switch_rate > 0.0) {
    std::mt19937_64 rng(derive_seed(config.seed, "code-switch"));
    for (const auto& t : texts_of(bench.source, false)) {
      train.push_back(code_switch(t, bench.cipher, config.code_switch_rate, rng));
    }
  }
  const auto cfg = seeded(config.base_training, config.seed, "base");
  auto r = train_mlm(ckpt.backbone, ckpt.params, nullptr, all_but_head(ckpt.params), train, val, cfg);
  spdlog::info("base pretraining: best validation MLM loss {:.4f} at step {}", r.best_validation, r.best_step);
  if (result != nullptr) *result = std::move(r);
  return ckpt;
}

std::string code_switch(const std::string& text, const Cipher& cipher, double rate, std::mt19937_64& rng) {
  std::bernoulli_distribution flip(rate);
  std::string out;
  for (const auto& word : Tokenizer::split_words(text)) {
    if (!out.empty()) out += ' ';
    out += flip(rng) ? cipher.encode(word) : word;
  }
  return out;
}

Workspace make_workspace(const ExperimentConfig& config, SyntheticBenchmark bench, Checkpoint base) {
  Workspace ws;
  ws.config = config;
  ws.bench = std::move(bench);
  ws.base = std::move(base);
  ws.base_fingerprint = fingerprint(ws.base);
  return ws;
}

RankingData ranking_data(const Workspace& ws, const std::string& lang) {
  RankingData data;
  const auto& corpus = ws.corpus(lang);
  const auto& index = ws.index(lang);
  const auto& qrels = ws.split("train").qrels;
  for (const auto& q : ws.queries("train", lang)) {
    data.queries.emplace(q.id, q.text);
    const auto it = qrels.relevant.find(q.id);
    if (it == qrels.relevant.end()) continue;
    for (const auto& d : it->second) {
      data.examples.push_back({q.id, d, 1});
      data.documents.emplace(d, corpus.text(d));
    }
    const auto r0 = bm25_rank(q, index);
    const auto depth = std::min(ws.config.negatives_depth, r0.docs.size());
    for (std::size_t i = 0; i < depth; ++i) {
      const auto& d = r0.docs[i].doc_id;
      if (it->second.contains(d)) continue;
      data.examples.push_back({q.id, d, 0});
      data.documents.emplace(d, corpus.text(d));
    }
  }
  data.validate();
  return data;
}

double validation_map(const Workspace& ws, const ParamStore& params, const EncoderPlugin* plugin) {
  const auto& all = ws.queries("val", kSourceLang);
  const std::vector<Query> queries(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(
                                                                   std::min(all.size(), ws.config.validation_queries)));
  const auto& corpus = ws.corpus(kSourceLang);
  const auto& index = ws.index(kSourceLang);
  const auto& bb = ws.base.backbone;
  const auto batch = ws.config.score_batch;
  std::vector<Ranking> r1;
  for (const auto& q : queries) {
    r1.push_back(rerank(bm25_rank(q, index), q, ws.config.validation_k,
                        [&](const Query& query, std::span<const std::string> ids) {
                          std::vector<std::string> texts;
                          for (const auto& id : ids) texts.push_back(corpus.text(id));
                          return ce_score_many(bb, params, query.text, texts, plugin, batch);
                        }));
  }
  return map_of(r1, restrict_qrels(ws.split("val").qrels, queries));
}

AdapterFile train_language_adapter(const Workspace& ws, const std::string& lang, TrainResult* result) {
  const auto& cfg = ws.config;
  AdapterFile file;
  file.role = AdapterRole::kLanguage;
  file.tag = lang;
  file.base_fingerprint = ws.base_fingerprint;
  file.params = AdapterParams::init({.reduction_factor = cfg.language_reduction_factor, .invertible = cfg.invertible},
                                    ws.base.backbone.config, derive_seed(cfg.seed, "la-init-" + lang));
  const AdapterStack stack(&file.params, nullptr, nullptr, LaMode::kQuery, 0, cfg.invertible);
  TrainableSet trainable;
  trainable.add_store(file.params.store);
  const auto& corpus = ws.corpus(lang);
  auto r = train_mlm(ws.base.backbone, ws.base.params, &stack, trainable, texts_of(corpus, false),
                     texts_of(corpus, true), seeded(cfg.language_training, cfg.seed, "la-" + lang));
  spdlog::info("LA {}: best validation MLM loss {:.4f} at step {}", lang, r.best_validation, r.best_step);
  if (result != nullptr) *result = std::move(r);
  return file;
}

AdapterFile train_ranking_adapter(const Workspace& ws, const AdapterFile& la_source, TrainResult* result) {
  const auto& cfg = ws.config;
  if (la_source.base_fingerprint != ws.base_fingerprint) {
    throw FingerprintError("source language adapter", ws.base_fingerprint, la_source.base_fingerprint);
  }
  ParamStore params = ws.base.params.clone();
  AdapterFile file;
  file.role = AdapterRole::kRanking;
  file.tag = "rank";
  file.base_fingerprint = ws.base_fingerprint;
  file.params = AdapterParams::init({.reduction_factor = cfg.reduction_factor}, ws.base.backbone.config,
                                    derive_seed(cfg.seed, "ra-init"));
  const AdapterStack stack(&la_source.params, nullptr, &file.params, LaMode::kQuery, 0, cfg.invertible);
  TrainableSet trainable;
  trainable.add_store(file.params.store);
  trainable.add(params.at("score.weight"));
  trainable.add(params.at("score.bias"));
  const auto data = ranking_data(ws, kSourceLang);
  auto r = train_ranking(ws.base.backbone, params, &stack, trainable, data,
                         seeded(cfg.ranking_training, cfg.seed, "ra"),
                         [&] { return validation_map(ws, params, &stack); });
  spdlog::info("RA: best validation MAP {:.4f} at step {}", r.best_validation, r.best_step);
  file.head = extract_head(params);
  if (result != nullptr) *result = std::move(r);
  return file;
}

SparseMask train_language_mask(const Workspace& ws, const std::string& lang, TrainResult* result) {
  const auto& cfg = ws.config;
  const auto& bb = ws.base.backbone;
  const auto k = k_from_reduction_factor(cfg.language_reduction_factor, bb.config.num_layers, bb.config.hidden);
  const auto& corpus = ws.corpus(lang);
  const auto train = texts_of(corpus, false), val = texts_of(corpus, true);
  const auto theta0 = ws.base.params.flatten();

  ParamStore phase1 = ws.base.params.clone();
  train_mlm(bb, phase1, nullptr, all_but_head(phase1), train, val, seeded(cfg.language_training, cfg.seed, "lm1-" + lang));
  const auto support = select_support(theta0, phase1.flatten(), k, mask_eligibility(ws.base.params));

  TrainResult phase2_result;
  const auto theta2 = phase2_train(
      theta0, support,
      [&](std::span<const double> start, std::span<const std::uint8_t> trainable) {
        ParamStore p = ws.base.params.clone();
        p.unflatten(start);
        phase2_result = train_mlm(bb, p, nullptr, TrainableSet::from_flat_mask(p, trainable), train, val,
                                  seeded(cfg.language_training, cfg.seed, "lm2-" + lang));
        return p.flatten();
      },
      theta0.size());
  auto mask = extract_mask(theta2, theta0, support, k, theta0.size(), MaskRole::kLanguage, lang);
  mask.base_fingerprint = ws.base_fingerprint;
  spdlog::info("LM {}: {} entries, best validation MLM loss {:.4f}", lang, mask.size(), phase2_result.best_validation);
  if (result != nullptr) *result = std::move(phase2_result);
  return mask;
}

SparseMask train_ranking_mask(const Workspace& ws, const SparseMask& lm_source, TrainResult* result) {
  const auto& cfg = ws.config;
  const auto& bb = ws.base.backbone;
  if (lm_source.base_fingerprint != ws.base_fingerprint) {
    throw FingerprintError("source language mask", ws.base_fingerprint, lm_source.base_fingerprint);
  }
  const auto k = k_from_reduction_factor(cfg.reduction_factor, bb.config.num_layers, bb.config.hidden);
  auto start = ws.base.params.flatten();
  apply_mask(start, lm_source);
  const auto exempt = head_offset(ws.base.params);
  const auto data = ranking_data(ws, kSourceLang);

  ParamStore phase1 = ws.base.params.clone();
  phase1.unflatten(start);
  train_full(bb, phase1, data, seeded(cfg.ranking_training, cfg.seed, "rm1"),
             [&] { return validation_map(ws, phase1, nullptr); });
  const auto support = select_support(start, phase1.flatten(), k, mask_eligibility(ws.base.params));

  TrainResult phase2_result;
  const auto theta2 = phase2_train(
      start, support,
      [&](std::span<const double> from, std::span<const std::uint8_t> trainable) {
        ParamStore p = ws.base.params.clone();
        p.unflatten(from);
        phase2_result = train_ranking(bb, p, nullptr, TrainableSet::from_flat_mask(p, trainable), data,
                                      seeded(cfg.ranking_training, cfg.seed, "rm2"),
                                      [&] { return validation_map(ws, p, nullptr); });
        return p.flatten();
      },
      exempt);
  auto mask = extract_mask(theta2, start, support, k, exempt, MaskRole::kRanking, "rank");
  mask.base_fingerprint = ws.base_fingerprint;
  spdlog::info("RM: {} entries, best validation MAP {:.4f}", mask.size(), phase2_result.best_validation);
  if (result != nullptr) *result = std::move(phase2_result);
  return mask;
}

Checkpoint train_full_model(const Workspace& ws, TrainResult* result) {
  const auto& cfg = ws.config;
  Checkpoint tuned{ws.base.backbone, ws.base.params.clone()};
  auto r = train_full(tuned.backbone, tuned.params, ranking_data(ws, kSourceLang),
                      seeded(cfg.full_training, cfg.seed, "full"),
                      [&] { return validation_map(ws, tuned.params, nullptr); });
  spdlog::info("full fine-tune: best validation MAP {:.4f} at step {}", r.best_validation, r.best_step);
  if (result != nullptr) *result = std::move(r);
  return tuned;
}

// Rerankers ----------------------------------------------------------------------------

Reranker Reranker::base(const Workspace& ws) {
  Reranker r;
  r.ws_ = &ws;
  r.params_ = std::make_shared<ParamStore>(ws.base.params.clone());
  return r;
}

Reranker Reranker::full(const Workspace& ws, const Checkpoint& tuned) {
  if (!(tuned.backbone.config == ws.base.backbone.config) ||
      tuned.backbone.tokenizer.tokens() != ws.base.backbone.tokenizer.tokens()) {
    throw ConfigError("fine-tuned checkpoint does not share the base architecture and vocabulary");
  }
  Reranker r;
  r.ws_ = &ws;
  r.params_ = std::make_shared<ParamStore>(tuned.params.clone());
  return r;
}

Reranker Reranker::headed(const Workspace& ws, const ParamStore& head) {
  Reranker r = base(ws);
  apply_head(*r.params_, head);
  return r;
}

Reranker Reranker::adapters(const Workspace& ws, std::map<std::string, AdapterParams> registry,
                            const ParamStore& head, const AdapterComposition& comp) {
  Reranker r = base(ws);
  apply_head(*r.params_, head);
  r.registry_ = std::make_shared<std::map<std::string, AdapterParams>>(std::move(registry));
  r.stack_ = std::make_shared<AdapterStack>(
      AdapterStack::compose(comp, *r.registry_, ws.base.backbone.config.num_layers));
  return r;
}

Reranker Reranker::masks(const Workspace& ws, const SparseMask& rm, const SparseMask& lm) {
  for (const auto* m : {&rm, &lm}) {
    if (m->base_fingerprint != ws.base_fingerprint) {
      throw FingerprintError("mask '" + m->tag + "'", ws.base_fingerprint, m->base_fingerprint);
    }
  }
  Reranker r = base(ws);
  r.params_->unflatten(compose(ws.base.params.flatten(), rm, lm));
  return r;
}

PairScorer Reranker::scorer(const Corpus& corpus, std::size_t batch_size) const {
  return [this, &corpus, batch_size](const Query& query, std::span<const std::string> ids) {
    std::vector<std::string> texts;
    texts.reserve(ids.size());
    for (const auto& id : ids) texts.push_back(corpus.text(id));
    return ce_score_many(ws_->base.backbone, *params_, query.text, texts, plugin(), batch_size);
  };
}

RunSet run_pipeline(const Workspace& ws, const std::vector<Query>& queries, const Corpus& corpus,
                    const Reranker* reranker, std::size_t k, bool ensemble) {
  RunSet runs;
  std::vector<std::vector<double>> embeddings;
  const InvertedIndex* index = nullptr;
  if (ws.config.preranker == Preranker::kBiEncoder) {
    embeddings = embed_corpus(ws.base.backbone, ws.base.params, corpus);
  } else {
    index = corpus.size() > 0 && &corpus == &ws.bench.source   ? &ws.index(kSourceLang)
            : &corpus == &ws.bench.target                         ? &ws.index(kTargetLang)
                                                                  : nullptr;
  }
  std::optional<InvertedIndex> own;
  if (ws.config.preranker == Preranker::kBm25 && index == nullptr) {
    own = InvertedIndex::build(corpus);
    index = &*own;
  }
  std::optional<PairScorer> scorer;
  if (reranker != nullptr) scorer = reranker->scorer(corpus, ws.config.score_batch);
  for (const auto& q : queries) {
    Ranking r0 = index != nullptr ? bm25_rank(q, *index)
                                  : biencoder_rank(q, corpus, embeddings, ws.base.backbone, ws.base.params);
    if (scorer) {
      Ranking r1 = rerank(r0, q, k, *scorer);
      if (ensemble) runs.ens.push_back(modrank::ensemble(r0, r1));
      runs.r1.push_back(std::move(r1));
    }
    runs.r0.push_back(std::move(r0));
  }
  return runs;
}

std::map<std::string, Ranking> as_run(const std::vector<Ranking>& rankings) {
  std::map<std::string, Ranking> run;
  for (const auto& r : rankings) run.emplace(r.query_id, r);
  return run;
}

double map_of(const std::vector<Ranking>& rankings, const Qrels& qrels) {
  return mean_average_precision(as_run(rankings), qrels).map;
}

// Artifacts -----------------------------------------------------------------------------

std::filesystem::path Artifacts::adapter(AdapterRole role, const std::string& tag, std::size_t r) const {
  return dir / adapter_file_name(role, tag, r);
}

std::filesystem::path Artifacts::mask(MaskRole role, const std::string& tag, std::size_t r) const {
  return dir / mask_file_name(role, tag, r);
}

std::filesystem::path Artifacts::run(const std::string& system, const std::string& split,
                                     const std::string& stage) const {
  return dir / "runs" / (system + "." + split + "." + stage + ".run");
}

Workspace open_workspace(const ExperimentConfig& config) {
  config.validate();
  auto bench = SyntheticBenchmark::read(config.benchmark);
  auto base = load_checkpoint(Artifacts{config.work_dir}.base());
  return make_workspace(config, std::move(bench), std::move(base));
}

AdapterComposition composition(const ExperimentConfig& config) {
  AdapterComposition comp;
  comp.la_mode = config.mode == "S" ? LaMode::kSplit : config.mode == "D" ? LaMode::kDocument : LaMode::kQuery;
  comp.la_query = config.query_lang;
  comp.la_document = config.doc_lang;
  comp.ra = "rank";
  comp.drop_first_n = config.drop_first_n;
  comp.invertible = config.invertible;
  return comp;
}

AdapterSet load_adapter_set(const Workspace& ws) {
  const Artifacts art{ws.config.work_dir};
  AdapterSet set;
  std::vector<std::string> langs{ws.config.query_lang};
  if (ws.config.doc_lang != ws.config.query_lang) langs.push_back(ws.config.doc_lang);
  for (const auto& lang : langs) {
    auto f = load_adapter(art.adapter(AdapterRole::kLanguage, lang, ws.config.language_reduction_factor),
                          ws.base_fingerprint);
    set.registry.emplace(lang, std::move(f.params));
  }
  auto ra = load_adapter(art.adapter(AdapterRole::kRanking, "rank", ws.config.reduction_factor), ws.base_fingerprint);
  if (!ra.head) throw IoError("ranking adapter file carries no scoring head");
  set.registry.emplace("rank", std::move(ra.params));
  set.head = std::move(*ra.head);
  return set;
}

Reranker load_reranker(const Workspace& ws, const std::string& system) {
  const Artifacts art{ws.config.work_dir};
  if (system == "base") return Reranker::base(ws);
  if (system == "full") return Reranker::full(ws, load_checkpoint(art.full()));
  if (system == "adapter") {
    auto set = load_adapter_set(ws);
    return Reranker::adapters(ws, std::move(set.registry), set.head, composition(ws.config));
  }
  if (system == "sftm") {
    const auto& cfg = ws.config;
    const auto rm = load_mask(art.mask(MaskRole::kRanking, "rank", cfg.reduction_factor), ws.base_fingerprint);
    auto lm_for = [&](const std::string& lang) {
      return load_mask(art.mask(MaskRole::kLanguage, lang, cfg.language_reduction_factor), ws.base_fingerprint);
    };
    SparseMask lm;
    if (cfg.mode == "Q") {
      lm = lm_for(cfg.query_lang);
    } else if (cfg.mode == "D" || cfg.query_lang == cfg.doc_lang) {
      lm = lm_for(cfg.doc_lang);
    } else {
      lm = combine_masks(lm_for(cfg.query_lang), lm_for(cfg.doc_lang));
    }
    return Reranker::masks(ws, rm, lm);
  }
  throw ConfigError("unknown system '" + system + "' (expected base, full, adapter or sftm)");
}

// Sweeps ----------------------------------------------------------------------------------

std::vector<SweepRow> sweep_adapter_drop(const Workspace& ws, const std::vector<std::size_t>& values,
                                         std::size_t repetitions, std::size_t latency_queries) {
  const auto& cfg = ws.config;
  const auto set = load_adapter_set(ws);
  const auto& queries = ws.queries("test", cfg.query_lang);
  const auto& corpus = ws.corpus(cfg.doc_lang);
  const auto& qrels = ws.split("test").qrels;
  const auto L = ws.base.backbone.config.num_layers;

  std::vector<Reranker> rerankers;
  std::vector<SweepRow> rows;
  for (auto n : values) {
    rerankers.push_back(Reranker::adapters(ws, set.registry, set.head, adapter_drop(composition(cfg), n, L)));
    const auto runs = run_pipeline(ws, queries, corpus, &rerankers.back(), cfg.k, false);
    rows.push_back({n, map_of(runs.r1, qrels), 0.0, 0.0});
  }

  const auto timed = std::min(latency_queries, queries.size());
  const auto r0 = run_pipeline(ws, std::vector<Query>(queries.begin(), queries.begin() + static_cast<std::ptrdiff_t>(timed)),
                               corpus, nullptr, cfg.k, false).r0;
  std::vector<PairScorer> scorers;
  for (const auto& r : rerankers) scorers.push_back(r.scorer(corpus, cfg.score_batch));
  std::vector<std::function<void(std::size_t)>> passes;
  for (const auto& s : scorers) {
    passes.push_back([&, s](std::size_t q) { rerank(r0[q], queries[q], cfg.k, s); });
  }
  const auto stats = measure_latency_interleaved(passes, timed, repetitions);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::string reps;
    for (double ms : stats[i].repetition_ms) reps += " " + std::to_string(ms);
    spdlog::debug("drop {}: repetitions{} ms", rows[i].value, reps);
    rows[i].latency_ms = stats[i].drift_corrected_ms;
    rows[i].delta_latency_ms = stats[i].drift_corrected_ms - stats[0].drift_corrected_ms;
  }
  return rows;
}

std::vector<SweepRow> sweep_reduction_factor(const Workspace& ws, const std::vector<std::size_t>& values) {
  const auto& base_cfg = ws.config;
  const auto& queries = ws.queries("test", base_cfg.query_lang);
  const auto& corpus = ws.corpus(base_cfg.doc_lang);
  const auto& qrels = ws.split("test").qrels;
  const Artifacts art{base_cfg.work_dir};
  std::vector<SweepRow> rows;
  for (auto r : values) {
    Workspace variant = ws;
    variant.config.reduction_factor = r;
    variant.config.validate();
    std::optional<Reranker> reranker;
    if (base_cfg.modules == ModuleKind::kAdapter) {
      const auto la_src = load_adapter(art.adapter(AdapterRole::kLanguage, kSourceLang, base_cfg.language_reduction_factor),
                                       ws.base_fingerprint);
      const auto ra = train_ranking_adapter(variant, la_src);
      save_adapter(art.adapter(AdapterRole::kRanking, "rank", r), ra);
      auto set = load_adapter_set(variant);
      reranker = Reranker::adapters(variant, std::move(set.registry), set.head, composition(variant.config));
    } else {
      const auto lm_src = load_mask(art.mask(MaskRole::kLanguage, kSourceLang, base_cfg.language_reduction_factor),
                                    ws.base_fingerprint);
      save_mask(art.mask(MaskRole::kRanking, "rank", r), train_ranking_mask(variant, lm_src));
      reranker = load_reranker(variant, "sftm");
    }
    const auto runs = run_pipeline(variant, queries, corpus, &*reranker, base_cfg.k, false);
    rows.push_back({r, map_of(runs.r1, qrels), 0.0, 0.0});
  }
  return rows;
}

std::string format_sweep(const std::string& axis, const std::vector<SweepRow>& rows) {
  std::ostringstream out;
  out << axis << "\tMAP\tlatency_ms\tdelta_latency_ms\n";
  for (const auto& r : rows) {
    out << r.value << '\t' << io::format_exact(r.map) << '\t' << r.latency_ms << '\t' << r.delta_latency_ms << '\n';
  }
  return out.str();
}

}  // namespace modrank
