// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits non-zero when any selected criterion fails.

#include <spdlog/spdlog.h>

#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "gradcheck.hpp"
#include "json.hpp"
#include "modrank/error.hpp"
#include "modrank/io.hpp"
#include "modrank/pipeline.hpp"
#include "oracles.hpp"

using namespace modrank;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string sci(double v) {
  std::ostringstream out;
  out << std::scientific << std::setprecision(2) << v;
  return out.str();
}

std::string fixed(double v, int precision = 4) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(precision) << v;
  return out.str();
}

bool bit_equal(double a, double b) { return std::memcmp(&a, &b, sizeof a) == 0; }

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

EncoderConfig desk_encoder(std::size_t vocab) {
  return {.num_layers = 4, .hidden = 64, .heads = 4, .ffn_dim = 256, .vocab_size = vocab, .max_seq_len = 128};
}

Backbone desk_backbone() {
  std::vector<std::string> words;
  for (int i = 0; i < 60; ++i) words.push_back("w" + std::to_string(i));
  Backbone bb;
  bb.tokenizer = Tokenizer(words);
  bb.config = desk_encoder(bb.tokenizer.size());
  return bb;
}

TokenBatch random_pairs(const Backbone& bb, std::size_t n, std::mt19937_64& rng, std::size_t max_len = 12) {
  std::uniform_int_distribution<int> word(special::kCount, static_cast<int>(bb.tokenizer.size()) - 1);
  std::uniform_int_distribution<std::size_t> len(1, max_len);
  std::vector<TokenSequence> seqs;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<int> q(len(rng)), d(len(rng));
    for (auto& t : q) t = word(rng);
    for (auto& t : d) t = word(rng);
    seqs.push_back(make_pair_input(q, d, bb.config.max_seq_len));
  }
  return TokenBatch::pack(seqs);
}

void randomize(ParamStore& store, std::mt19937_64& rng, double scale) {
  std::normal_distribution<double> n(0.0, scale);
  for (const auto& [name, t] : store.entries()) {
    auto handle = t;
    for (auto& v : handle.mutable_data()) v = n(rng);
  }
}

// 1 ----------------------------------------------------------------------------------

Outcome parameter_counts() {
  const std::size_t factors[] = {1, 2, 4, 8, 16, 32};
  const std::size_t expected[] = {14174208, 7091712, 3550464, 1779840, 894528, 451872};
  bool ok = true;
  std::string detail;
  for (int i = 0; i < 6; ++i) {
    const auto a = adapter_param_count({.reduction_factor = factors[i]}, 12, 768);
    const auto k = k_from_reduction_factor(factors[i], 12, 768);
    ok = ok && a == expected[i] && k == expected[i];
    const double v = static_cast<double>(a);
    detail += (i ? ", " : "") + std::string("r=") + std::to_string(factors[i]) + ":" + std::to_string(a) + " (" +
              (v >= 1e6 ? fixed(v / 1e6, 1) + "M" : fixed(v / 1e3, 0) + "K") + ")";
  }
  return {ok, detail};
}

// 2 ----------------------------------------------------------------------------------

Outcome gradient_suite() {
  const auto bb = desk_backbone();
  auto params = init_encoder_params(bb.config, 101, {.weight_std = 0.2, .embedding_std = 0.5});
  std::mt19937_64 rng(102);
  auto la_q = AdapterParams::init({.reduction_factor = 2, .invertible = true}, bb.config, 103);
  auto la_d = AdapterParams::init({.reduction_factor = 2, .invertible = true}, bb.config, 104);
  auto ra = AdapterParams::init({.reduction_factor = 16}, bb.config, 105);
  for (auto* a : {&la_q, &la_d, &ra}) randomize(a->store, rng, 0.2);
  const AdapterStack split(&la_q, &la_d, &ra, LaMode::kSplit, 0, true);
  const auto batch = random_pairs(bb, 2, rng, 6);
  const double labels[] = {1.0, 0.0};
  const std::vector<int> targets(batch.ids.begin(), batch.ids.end());
  auto loss = [&] {
    return ops::add(ops::bce_with_logits(ce_logits(bb, params, batch, &split), labels),
                    ops::cross_entropy(mlm_logits(bb, params, batch, &split), targets));
  };
  std::vector<Tensor> leaves = params.tensors();
  for (const auto* a : {&la_q, &la_d, &ra}) {
    for (const auto& t : a->store.tensors()) leaves.push_back(t);
  }
  const auto coords = testing::sample_coordinates(leaves, 1, 106);
  // Central differences of a loss near 1 carry ~1e-10 rounding noise.
  const auto r = testing::grad_check(leaves, loss, coords, 1e-5, 1e-4, 1e-5);
  for (const auto& f : r.failures) {
    spdlog::warn("leaf {} index {}: analytic {} numeric {}", f.at.leaf, f.at.index, f.analytic, f.numeric);
  }
  return {r.checked >= 100 && r.failures.empty(),
          std::to_string(r.checked) + " coordinates over " + std::to_string(leaves.size()) +
              " tensors, worst relative error " + sci(r.worst_rel_error) + ", " +
              std::to_string(r.failures.size()) + " above 1e-4"};
}

// 3 ----------------------------------------------------------------------------------

Outcome sftm_contracts() {
  std::vector<std::string> texts;
  std::mt19937_64 rng(201);
  std::uniform_int_distribution<int> w(0, 39);
  for (int i = 0; i < 80; ++i) {
    std::string s;
    for (int j = 0; j < 10; ++j) s += "w" + std::to_string(w(rng) / (1 + i % 3)) + " ";
    texts.push_back(s);
  }
  Backbone bb;
  bb.tokenizer = Tokenizer::build(texts);
  bb.config = {.num_layers = 2, .hidden = 16, .heads = 2, .ffn_dim = 32, .vocab_size = bb.tokenizer.size(),
               .max_seq_len = 16};
  const auto p0 = init_encoder_params(bb.config, 202);
  const auto theta0 = p0.flatten();
  const TrainConfig cfg{.learning_rate = 1e-2, .batch_size = 8, .steps = 20, .warmup_steps = 0, .eval_interval = 10,
                        .seed = 203, .max_seq_len = 16};
  ParamStore p1 = p0.clone();
  TrainableSet all;
  for (const auto& [name, t] : p1.entries()) {
    if (!name.starts_with(kScoreHeadPrefix)) all.add(t);
  }
  const std::span<const std::string> train(texts.data(), 70), val(texts.data() + 70, 10);
  train_mlm(bb, p1, nullptr, all, train, val, cfg);
  const std::size_t k = theta0.size() / 20;
  const auto support = select_support(theta0, p1.flatten(), k, mask_eligibility(p0));
  const auto theta2 = phase2_train(
      theta0, support,
      [&](std::span<const double> start, std::span<const std::uint8_t> trainable) {
        ParamStore p = p0.clone();
        p.unflatten(start);
        train_mlm(bb, p, nullptr, TrainableSet::from_flat_mask(p, trainable), train, val, cfg);
        return p.flatten();
      },
      theta0.size());
  std::size_t off_support_changed = 0, on_support_changed = 0;
  std::set<std::size_t> on(support.begin(), support.end());
  for (std::size_t i = 0; i < theta0.size(); ++i) {
    const bool same = bit_equal(theta0[i], theta2[i]);
    if (on.count(i)) {
      on_support_changed += same ? 0 : 1;
    } else if (!same) {
      ++off_support_changed;
    }
  }
  const auto lm = extract_mask(theta2, theta0, support, k, theta0.size(), MaskRole::kLanguage, "x");
  SparseMask empty;
  empty.dim = theta0.size();
  empty.exempt_from = theta0.size();
  const auto recomposed = compose(theta0, lm, empty);
  const auto identity = compose(theta0, empty, empty);
  bool round_trip = true, identity_ok = true;
  for (std::size_t i = 0; i < theta0.size(); ++i) {
    round_trip = round_trip && bit_equal(recomposed[i], theta2[i]);
    identity_ok = identity_ok && bit_equal(identity[i], theta0[i]);
  }

  bool dense_ok = true;
  std::mt19937_64 mrng(204);
  const std::size_t dim = 100000;
  std::normal_distribution<double> n(0.0, 1.0);
  for (int trial = 0; trial < 5 && dense_ok; ++trial) {
    std::vector<double> theta(dim);
    for (auto& v : theta) v = n(mrng);
    const auto rm = testing::random_mask(dim, 4000, mrng, "rank");
    const auto a = testing::random_mask(dim, 9000, mrng, "tgt");
    const auto b = testing::random_mask(dim, 9000, mrng, "src");
    const auto out = compose(theta, rm, combine_masks(a, b));
    const auto drm = testing::dense(rm), da = testing::dense(a), db = testing::dense(b);
    for (std::size_t i = 0; i < dim && dense_ok; ++i) dense_ok = bit_equal(out[i], (theta[i] + drm[i]) + (da[i] + db[i]));
  }
  return {off_support_changed == 0 && identity_ok && round_trip && dense_ok,
          "dim " + std::to_string(theta0.size()) + ", support " + std::to_string(support.size()) + " (" +
              std::to_string(on_support_changed) + " moved), off-support changes " +
              std::to_string(off_support_changed) + "; compose(0,0) identity " + (identity_ok ? "exact" : "BROKEN") +
              "; extract/compose round trip " + (round_trip ? "exact" : "BROKEN") + "; dense oracle (dim 1e5) " +
              (dense_ok ? "exact" : "MISMATCH")};
}

// 4 ----------------------------------------------------------------------------------

Outcome adapter_identity() {
  const auto bb = desk_backbone();
  const auto params = init_encoder_params(bb.config, 301);
  std::mt19937_64 rng(302);
  const auto la = AdapterParams::init({.reduction_factor = 2}, bb.config, 303);
  const auto ra = AdapterParams::init({.reduction_factor = 16}, bb.config, 304);
  const AdapterStack zero(&la, nullptr, &ra, LaMode::kQuery, 0, false);
  double identity_gap = 0.0;
  for (int i = 0; i < 50; ++i) {
    const auto batch = random_pairs(bb, 1, rng, 40);
    identity_gap = std::max(identity_gap, max_abs_diff(encode(bb, params, batch), encode(bb, params, batch, &zero)));
  }

  std::map<std::string, AdapterParams> registry;
  registry.emplace("a", AdapterParams::init({.reduction_factor = 2}, bb.config, 305));
  registry.emplace("rank", AdapterParams::init({.reduction_factor = 16}, bb.config, 306));
  for (auto& [_, a] : registry) randomize(a.store, rng, 0.1);
  registry.emplace("a_copy", AdapterParams{registry.at("a").config, registry.at("a").num_layers,
                                           registry.at("a").hidden, registry.at("a").store.clone()});
  const AdapterComposition q{.la_mode = LaMode::kQuery, .la_query = "a", .la_document = "a", .ra = "rank"};
  auto split = q;
  split.la_mode = LaMode::kSplit;
  split.la_document = "a_copy";
  const auto sq = AdapterStack::compose(q, registry, 4);
  const auto s0 = AdapterStack::compose(adapter_drop(q, 0, 4), registry, 4);
  const auto ss = AdapterStack::compose(split, registry, 4);
  double drop_gap = 0.0, split_gap = 0.0;
  for (int i = 0; i < 20; ++i) {
    const auto batch = random_pairs(bb, 3, rng, 20);
    const auto h = encode(bb, params, batch, &sq);
    drop_gap = std::max(drop_gap, max_abs_diff(h, encode(bb, params, batch, &s0)));
    split_gap = std::max(split_gap, max_abs_diff(h, encode(bb, params, batch, &ss)));
  }
  return {identity_gap < 1e-9 && drop_gap == 0.0 && split_gap < 1e-12,
          "zero-U gap " + sci(identity_gap) + " over 50 inputs; drop(0) gap " + sci(drop_gap) +
              "; split vs Q gap " + sci(split_gap)};
}

// 5 ----------------------------------------------------------------------------------

Outcome bm25_oracle() {
  std::mt19937_64 rng(501);
  double worst = 0.0;
  std::size_t largest = 0;
  for (int i = 0; i < 20; ++i) {
    const auto rc = testing::random_corpus(rng, 1000);
    largest = std::max(largest, rc.corpus.size());
    worst = std::max(worst, testing::bm25_oracle_gap(rc));
  }
  return {worst < 1e-9, "20 corpora (largest " + std::to_string(largest) + " docs), max score gap " +
                            sci(worst)};
}

// 6 ----------------------------------------------------------------------------------

Outcome metric_fixtures(const fs::path& fixtures) {
  const std::vector<ScoredDoc> ranking{{"r1", 3}, {"n", 2}, {"r2", 1}};
  const double ap = average_precision(ranking, {"r1", "r2"});
  const bool ap_ok = ap == 5.0 / 6.0;

  std::mt19937_64 rng(601);
  Qrels qrels;
  std::map<std::string, Ranking> run;
  std::vector<std::string> ids;
  for (int q = 0; q < 40; ++q) {
    const auto id = "q" + std::to_string(q);
    std::vector<std::string> docs;
    for (int d = 0; d < 30; ++d) docs.push_back("d" + std::to_string(d));
    std::shuffle(docs.begin(), docs.end(), rng);
    Ranking r{id, Stage::kR0, {}, 0};
    for (std::size_t i = 0; i < docs.size(); ++i) r.docs.push_back({docs[i], -static_cast<double>(i)});
    run[id] = r;
    qrels.relevant[id] = {"d" + std::to_string(q % 7), "d" + std::to_string(10 + q % 5)};
    ids.push_back(id);
  }
  const double reference = mean_average_precision(run, qrels).map;
  double perm_gap = 0.0;
  for (int p = 0; p < 10; ++p) {
    std::shuffle(ids.begin(), ids.end(), rng);
    std::map<std::string, Ranking> renamed;
    Qrels renamed_qrels;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const auto nid = "p" + std::to_string(i);
      renamed[nid] = run.at(ids[i]);
      renamed[nid].query_id = nid;
      renamed_qrels.relevant[nid] = qrels.relevant.at(ids[i]);
    }
    perm_gap = std::max(perm_gap, std::abs(mean_average_precision(renamed, renamed_qrels).map - reference));
  }

  const auto fx = nlohmann::json::parse(io::read_file(fixtures / "scipy_reference.json"));
  double t_gap = 0.0;
  for (const auto& c : fx["ttest"]) {
    const auto t = paired_t_test(c["a"].get<std::vector<double>>(), c["b"].get<std::vector<double>>());
    t_gap = std::max({t_gap, std::abs(t.t - c["t"].get<double>()), std::abs(t.p - c["p"].get<double>())});
  }
  return {ap_ok && perm_gap < 1e-12 && t_gap < 1e-6,
          "AP " + io::format_exact(ap) + (ap_ok ? " == 5/6" : " != 5/6") + "; MAP permutation gap " +
              sci(perm_gap) + "; t-test fixture gap " + sci(t_gap)};
}

// 7, 8 -------------------------------------------------------------------------------

struct E2eScale {
  TrainConfig base{.learning_rate = 1e-3, .batch_size = 32, .steps = 3000, .warmup_steps = 200,
                   .eval_interval = 500, .seed = 0, .max_seq_len = 64};
  TrainConfig language{.learning_rate = 1e-3, .batch_size = 32, .steps = 400, .warmup_steps = 0,
                       .eval_interval = 100, .seed = 0, .max_seq_len = 64};
  TrainConfig ranking{.learning_rate = 1e-3, .batch_size = 16, .steps = 1000, .warmup_steps = 100,
                      .eval_interval = 200, .seed = 0, .max_seq_len = 64};
  TrainConfig full{.learning_rate = 1e-4, .batch_size = 16, .steps = 1000, .warmup_steps = 100,
                   .eval_interval = 200, .seed = 0, .max_seq_len = 64};
};

// Masks use reduction factor 2 for both LM and RM; adapters use LA r=2, RA r=16.
ExperimentConfig e2e_config(const fs::path& root, std::uint64_t seed, const E2eScale& scale,
                            const std::string& kind = "sftm") {
  auto c = ExperimentConfig::defaults(seed);
  c.benchmark = root / "bench";
  c.work_dir = root / ("seed" + std::to_string(seed));
  c.modules = kind == "sftm" ? ModuleKind::kSftm : ModuleKind::kAdapter;
  c.reduction_factor = kind == "sftm" ? 2 : 16;
  c.query_lang = kTargetLang;
  c.doc_lang = kTargetLang;
  c.base_training = scale.base;
  c.language_training = scale.language;
  c.ranking_training = scale.ranking;
  c.full_training = scale.full;
  return c;
}

struct SeedResult {
  std::uint64_t seed = 0;
  double bm25 = 0.0, modular = 0.0, full = 0.0, random = 0.0;
  bool ok() const { return modular > full && modular >= random + 0.2 && full >= random + 0.2; }
};

double random_map(const Workspace& ws, const std::vector<Query>& queries, const Corpus& corpus) {
  double total = 0.0;
  for (const auto& q : queries) {
    total += random_expected_ap(corpus.size(), ws.split("test").qrels.relevant.at(q.id).size());
  }
  return total / static_cast<double>(queries.size());
}

void write_stage_runs(const Artifacts& art, const std::string& system, const RunSet& runs) {
  fs::create_directories(art.run(system, "test", "r0").parent_path());
  write_run(art.run(system, "test", "r0"), runs.r0, "bm25");
  if (!runs.r1.empty()) write_run(art.run(system, "test", "r1"), runs.r1, system + ".r1");
  if (!runs.ens.empty()) write_run(art.run(system, "test", "ens"), runs.ens, system + ".ens");
}

MetricReport report_of(const std::string& name, const std::vector<Ranking>& run, const Qrels& qrels,
                       const MetricReport* against = nullptr) {
  MetricReport r;
  r.name = name;
  r.result = mean_average_precision(as_run(run), qrels);
  if (against != nullptr) {
    std::vector<double> a, b;
    for (const auto& [qid, ap] : r.result.per_query) {
      a.push_back(ap);
      b.push_back(against->result.per_query.at(qid));
    }
    r.test = paired_t_test(a, b);
    r.test_against = against->name;
  }
  return r;
}

SeedResult run_seed(const ExperimentConfig& cfg, const SyntheticBenchmark& bench, const Checkpoint& base) {
  fs::create_directories(cfg.work_dir);
  const Artifacts art{cfg.work_dir};
  save_checkpoint(art.base(), base);
  const auto ws = make_workspace(cfg, bench, Checkpoint{base.backbone, base.params.clone()});
  TrainResult log;
  const auto lm_src = train_language_mask(ws, kSourceLang, &log);
  save_mask(art.mask(MaskRole::kLanguage, kSourceLang, cfg.language_reduction_factor), lm_src);
  io::write_atomic(art.log("lm-src"), log.to_jsonl());
  save_mask(art.mask(MaskRole::kLanguage, kTargetLang, cfg.language_reduction_factor),
            train_language_mask(ws, kTargetLang, &log));
  io::write_atomic(art.log("lm-tgt"), log.to_jsonl());
  save_mask(art.mask(MaskRole::kRanking, "rank", cfg.reduction_factor), train_ranking_mask(ws, lm_src, &log));
  io::write_atomic(art.log("rm"), log.to_jsonl());
  save_checkpoint(art.full(), train_full_model(ws, &log));
  io::write_atomic(art.log("full"), log.to_jsonl());

  const auto& queries = ws.queries("test", kTargetLang);
  const auto& corpus = ws.corpus(kTargetLang);
  const auto& qrels = ws.split("test").qrels;
  const auto modular_reranker = load_reranker(ws, "sftm");
  const auto full_reranker = load_reranker(ws, "full");
  const auto modular_runs = run_pipeline(ws, queries, corpus, &modular_reranker, cfg.k, cfg.ensemble);
  const auto full_runs = run_pipeline(ws, queries, corpus, &full_reranker, cfg.k, cfg.ensemble);
  write_stage_runs(art, "sftm", modular_runs);
  write_stage_runs(art, "full", full_runs);
  std::vector<MetricReport> reports{report_of("bm25.test.r0", modular_runs.r0, qrels)};
  reports.push_back(report_of("full.test.r1", full_runs.r1, qrels, &reports[0]));
  reports.push_back(report_of("sftm.test.r1", modular_runs.r1, qrels, &reports[1]));
  reports.push_back(report_of("full.test.ens", full_runs.ens, qrels, &reports[0]));
  reports.push_back(report_of("sftm.test.ens", modular_runs.ens, qrels, &reports[3]));
  write_reports(art.reports(), reports);

  SeedResult r;
  r.seed = cfg.seed;
  r.bm25 = reports[0].result.map;
  r.full = reports[1].result.map;
  r.modular = reports[2].result.map;
  r.random = random_map(ws, queries, corpus);
  return r;
}

SynthConfig e2e_benchmark() {
  SynthConfig s;
  s.seed = 1;
  return s;
}

struct E2eState {
  std::vector<SeedResult> seeds;
  fs::path root;
};

// One base model, pretrained once and shared by every seed; seeds vary module
// initialization and batch order.
E2eState transfer_experiment(const fs::path& root, std::size_t num_seeds, const E2eScale& scale) {
  E2eState state{{}, root};
  fs::create_directories(root);
  const auto bench = generate_benchmark(e2e_benchmark());
  bench.write(root / "bench");
  TrainResult base_log;
  const auto base = pretrain_base(e2e_config(root, 1, scale), bench, &base_log);
  save_checkpoint(root / "base.ckpt", base);
  io::write_atomic(root / "train.base.jsonl", base_log.to_jsonl());
  for (std::uint64_t seed = 1; seed <= num_seeds; ++seed) {
    const auto t0 = std::chrono::steady_clock::now();
    state.seeds.push_back(run_seed(e2e_config(root, seed, scale), bench, base));
    const auto& s = state.seeds.back();
    spdlog::info("seed {}: RM+LM {:.4f} full {:.4f} bm25 {:.4f} random {:.4f} ({:.0f} s)", seed, s.modular, s.full,
                 s.bm25, s.random, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  return state;
}

Outcome transfer_direction(const E2eState& state) {
  std::size_t agree = 0;
  std::string detail;
  for (const auto& s : state.seeds) {
    agree += s.ok() ? 1 : 0;
    detail += "seed " + std::to_string(s.seed) + ": RM+LM_tgt " + fixed(s.modular) + " vs full " + fixed(s.full) +
              " (random " + fixed(s.random) + ", BM25 " + fixed(s.bm25) + ")" + (s.ok() ? " ok" : " not ok") + "; ";
  }
  detail += std::to_string(agree) + "/" + std::to_string(state.seeds.size()) + " seeds agree";
  return {2 * agree > state.seeds.size(), detail};
}

// Trains LA_src, LA_tgt and RA into the seed-1 work directory, then sweeps n.
Outcome adapter_drop_trend(const fs::path& root, std::size_t repetitions, std::size_t latency_queries,
                           const E2eScale& scale) {
  const auto cfg = e2e_config(root, 1, scale, "adapter");
  if (!fs::exists(Artifacts{cfg.work_dir}.base())) {
    throw ContractError("criterion 8 needs the criterion 7 work directory " + cfg.work_dir.string());
  }
  const Artifacts art{cfg.work_dir};
  {
    const auto ws = open_workspace(cfg);
    TrainResult log;
    const auto la_src = train_language_adapter(ws, kSourceLang, &log);
    save_adapter(art.adapter(AdapterRole::kLanguage, kSourceLang, cfg.language_reduction_factor), la_src);
    io::write_atomic(art.log("la-src"), log.to_jsonl());
    save_adapter(art.adapter(AdapterRole::kLanguage, kTargetLang, cfg.language_reduction_factor),
                 train_language_adapter(ws, kTargetLang, &log));
    io::write_atomic(art.log("la-tgt"), log.to_jsonl());
    save_adapter(art.adapter(AdapterRole::kRanking, "rank", cfg.reduction_factor), train_ranking_adapter(ws, la_src, &log));
    io::write_atomic(art.log("ra"), log.to_jsonl());
  }
  const auto ws = open_workspace(cfg);
  const auto L = ws.base.backbone.config.num_layers;
  std::vector<std::size_t> values;
  for (std::size_t n = 0; n <= L; ++n) values.push_back(n);
  const auto rows = sweep_adapter_drop(ws, values, repetitions, latency_queries);
  const auto set = load_adapter_set(ws);
  const auto adapter_free = Reranker::headed(ws, set.head);
  const auto runs = run_pipeline(ws, ws.queries("test", cfg.query_lang), ws.corpus(cfg.doc_lang), &adapter_free,
                                 cfg.k, false);
  const double free_map = map_of(runs.r1, ws.split("test").qrels);
  bool monotone = true;
  std::string detail;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (i > 0 && rows[i].latency_ms > rows[i - 1].latency_ms) monotone = false;
    detail += "n=" + std::to_string(rows[i].value) + ": " + fixed(rows[i].latency_ms, 2) + " ms, MAP " +
              fixed(rows[i].map) + "; ";
  }
  io::write_atomic(root / "adapter_drop.tsv", format_sweep("drop_first_n", rows));
  const bool map_equal = rows.back().map == free_map;
  detail += "adapter-free MAP " + fixed(free_map) + (map_equal ? " (equal at n=L)" : " (DIFFERS at n=L)") +
            (monotone ? "; latency non-increasing" : "; latency NOT monotone");
  return {monotone && map_equal, detail};
}

// 9 ----------------------------------------------------------------------------------

// A scaled-down run of every command path: benchmark, base, LA/RA, LM/RM, full
// fine-tune, ranking with all systems, reports.
void determinism_suite(const fs::path& root) {
  fs::remove_all(root);
  fs::create_directories(root);
  SynthConfig s;
  s.seed = 9;
  s.num_docs = 200;
  s.num_topics = 30;
  s.train_topics = 10;
  s.val_topics = 5;
  s.queries_per_topic = 2;
  const auto bench = generate_benchmark(s);
  bench.write(root / "bench");
  auto cfg = ExperimentConfig::defaults(9);
  cfg.benchmark = root / "bench";
  cfg.work_dir = root / "work";
  cfg.k = 20;
  cfg.validation_queries = 5;
  cfg.validation_k = 10;
  const TrainConfig tiny{.learning_rate = 1e-3, .batch_size = 8, .steps = 20, .warmup_steps = 5,
                         .eval_interval = 10, .seed = 0, .max_seq_len = 48};
  cfg.base_training = cfg.language_training = cfg.ranking_training = cfg.full_training = tiny;
  fs::create_directories(cfg.work_dir);
  auto portable = cfg;
  portable.benchmark = "bench";
  portable.work_dir = "work";
  portable.save(root / "config.json");
  const Artifacts art{cfg.work_dir};
  save_checkpoint(art.base(), pretrain_base(cfg, bench));
  const auto base_bytes = io::read_file(art.base());

  const auto ws = open_workspace(cfg);
  const auto la_src = train_language_adapter(ws, kSourceLang);
  save_adapter(art.adapter(AdapterRole::kLanguage, kSourceLang, cfg.language_reduction_factor), la_src);
  save_adapter(art.adapter(AdapterRole::kLanguage, kTargetLang, cfg.language_reduction_factor),
               train_language_adapter(ws, kTargetLang));
  save_adapter(art.adapter(AdapterRole::kRanking, "rank", cfg.reduction_factor), train_ranking_adapter(ws, la_src));
  const auto lm_src = train_language_mask(ws, kSourceLang);
  save_mask(art.mask(MaskRole::kLanguage, kSourceLang, cfg.language_reduction_factor), lm_src);
  save_mask(art.mask(MaskRole::kLanguage, kTargetLang, cfg.language_reduction_factor),
            train_language_mask(ws, kTargetLang));
  save_mask(art.mask(MaskRole::kRanking, "rank", cfg.reduction_factor), train_ranking_mask(ws, lm_src));
  save_checkpoint(art.full(), train_full_model(ws));

  const auto& queries = ws.queries("test", kTargetLang);
  const auto& corpus = ws.corpus(kTargetLang);
  const auto& qrels = ws.split("test").qrels;
  std::vector<MetricReport> reports;
  for (const std::string system : {"base", "full", "adapter", "sftm"}) {
    const auto reranker = load_reranker(ws, system);
    const auto runs = run_pipeline(ws, queries, corpus, &reranker, cfg.k, true);
    write_stage_runs(art, system, runs);
    if (reports.empty()) reports.push_back(report_of("bm25.test.r0", runs.r0, qrels));
    reports.push_back(report_of(system + ".test.r1", runs.r1, qrels, &reports[0]));
    reports.push_back(report_of(system + ".test.ens", runs.ens, qrels, &reports[0]));
  }
  write_reports(art.reports(), reports);
  if (io::read_file(art.base()) != base_bytes) throw ContractError("base checkpoint changed during the suite");
}

std::map<std::string, std::string> tree_bytes(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = io::read_file(e.path());
  }
  return out;
}

Outcome determinism(const fs::path& root, const E2eState* e2e, const E2eScale& scale) {
  determinism_suite(root / "a");
  determinism_suite(root / "b");
  const auto a = tree_bytes(root / "a"), b = tree_bytes(root / "b");
  std::size_t runs = 0, differing = 0;
  for (const auto& [name, bytes] : a) {
    if (name.ends_with(".run") || name.ends_with("metrics.jsonl")) ++runs;
    const auto it = b.find(name);
    if (it == b.end() || it->second != bytes) ++differing;
  }
  std::string detail = std::to_string(a.size()) + " files (" + std::to_string(runs) +
                       " run/report files) compared across two runs, " + std::to_string(differing) + " differ";
  bool ok = differing == 0 && a.size() == b.size() && runs > 0;
  if (e2e != nullptr && !e2e->seeds.empty()) {
    const auto cfg = e2e_config(e2e->root, 1, scale);
    const auto before = io::read_file(Artifacts{cfg.work_dir}.run("sftm", "test", "r1"));
    const auto ws = open_workspace(cfg);
    const auto reranker = load_reranker(ws, "sftm");
    const auto again = run_pipeline(ws, ws.queries("test", kTargetLang), ws.corpus(kTargetLang), &reranker, cfg.k, false);
    const bool same = format_run(again.r1, "sftm.r1") == before;
    detail += "; end-to-end RM+LM run re-ranked from saved masks " + std::string(same ? "identical" : "DIFFERS");
    ok = ok && same;
  }
  return {ok, detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string only = "1,2,3,4,5,6,7,8,9";
  std::string work = "acceptance_work";
  std::string fixtures = MODRANK_FIXTURES;
  std::size_t seeds = 3, repetitions = 25, latency_queries = 8;
  E2eScale scale;
  app.add_option("--only", only, "Comma-separated criteria");
  app.add_option("--work", work, "Scratch directory");
  app.add_option("--fixtures", fixtures);
  app.add_option("--seeds", seeds);
  app.add_option("--repetitions", repetitions);
  app.add_option("--latency-queries", latency_queries);
  app.add_option("--base-steps", scale.base.steps);
  app.add_option("--language-steps", scale.language.steps);
  app.add_option("--ranking-steps", scale.ranking.steps);
  app.add_option("--full-steps", scale.full.steps);
  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(spdlog::level::warn);
  retain_freed_memory();

  std::set<int> selected;
  std::stringstream list(only);
  for (std::string item; std::getline(list, item, ',');) selected.insert(std::stoi(item));
  const fs::path root = fs::absolute(work);

  bool all_pass = true;
  std::optional<E2eState> e2e;
  auto run = [&](int n, const std::string& title, const std::function<Outcome()>& check) {
    if (!selected.count(n)) return;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    all_pass = all_pass && o.pass;
    std::cout << "criterion " << n << " " << (o.pass ? "PASS" : "FAIL") << "  " << title << ": " << o.detail << " ["
              << fixed(secs, 1) << " s]" << std::endl;
  };

  run(1, "parameter counts", parameter_counts);
  run(2, "gradient suite", gradient_suite);
  run(3, "SFTM contracts", sftm_contracts);
  run(4, "adapter identity", adapter_identity);
  run(5, "BM25 oracle", bm25_oracle);
  run(6, "metric fixtures", [&] { return metric_fixtures(fixtures); });
  run(7, "transfer direction", [&] {
    e2e = transfer_experiment(root / "e2e", seeds, scale);
    return transfer_direction(*e2e);
  });
  run(8, "AdapterDrop trend", [&] { return adapter_drop_trend(root / "e2e", repetitions, latency_queries, scale); });
  run(9, "determinism", [&] { return determinism(root / "determinism", e2e ? &*e2e : nullptr, scale); });
  return all_pass ? 0 : 1;
}
