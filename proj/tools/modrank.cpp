#include <spdlog/spdlog.h>

#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "modrank/error.hpp"
#include "modrank/io.hpp"
#include "modrank/pipeline.hpp"

namespace fs = std::filesystem;
using namespace modrank;

namespace {

std::string index_text(const InvertedIndex& index) {
  std::ostringstream out;
  out << "modrank-index 1\n";
  out << "docs " << index.num_docs() << ' ' << io::format_exact(index.avg_doc_length) << '\n';
  for (std::size_t i = 0; i < index.num_docs(); ++i) out << index.doc_ids[i] << '\t' << index.doc_lengths[i] << '\n';
  std::vector<std::string> terms;
  terms.reserve(index.postings.size());
  for (const auto& [term, _] : index.postings) terms.push_back(term);
  std::sort(terms.begin(), terms.end());
  out << "terms " << terms.size() << '\n';
  for (const auto& term : terms) {
    out << term;
    for (const auto& p : index.postings.at(term)) out << '\t' << p.doc << ':' << p.tf;
    out << '\n';
  }
  return out.str();
}

void write_log(const Artifacts& art, const std::string& name, const TrainResult& result) {
  io::write_atomic(art.log(name), result.to_jsonl());
}

void cmd_train(const ExperimentConfig& config, const std::string& kind, const std::string& lang, bool force) {
  const Artifacts art{config.work_dir};
  fs::create_directories(config.work_dir);
  TrainResult result;
  if (kind == "base") {
    if (fs::exists(art.base()) && !force) {
      throw ContractError("base checkpoint " + art.base().string() + " exists; pass --force to replace it");
    }
    const auto bench = SyntheticBenchmark::read(config.benchmark);
    const auto ckpt = pretrain_base(config, bench, &result);
    save_checkpoint(art.base(), ckpt);
    write_log(art, "base", result);
    std::cout << "base " << fingerprint(ckpt) << '\n';
    return;
  }
  const auto ws = open_workspace(config);
  if (kind == "la") {
    const auto file = train_language_adapter(ws, lang, &result);
    save_adapter(art.adapter(AdapterRole::kLanguage, lang, config.language_reduction_factor), file);
    write_log(art, "la-" + lang, result);
  } else if (kind == "ra") {
    const auto la = load_adapter(art.adapter(AdapterRole::kLanguage, kSourceLang, config.language_reduction_factor),
                                 ws.base_fingerprint);
    const auto file = train_ranking_adapter(ws, la, &result);
    save_adapter(art.adapter(AdapterRole::kRanking, "rank", config.reduction_factor), file);
    write_log(art, "ra", result);
  } else if (kind == "lm") {
    const auto mask = train_language_mask(ws, lang, &result);
    save_mask(art.mask(MaskRole::kLanguage, lang, config.language_reduction_factor), mask);
    write_log(art, "lm-" + lang, result);
  } else if (kind == "rm") {
    const auto lm = load_mask(art.mask(MaskRole::kLanguage, kSourceLang, config.language_reduction_factor),
                              ws.base_fingerprint);
    const auto mask = train_ranking_mask(ws, lm, &result);
    save_mask(art.mask(MaskRole::kRanking, "rank", config.reduction_factor), mask);
    write_log(art, "rm", result);
  } else if (kind == "full") {
    const auto tuned = train_full_model(ws, &result);
    save_checkpoint(art.full(), tuned);
    write_log(art, "full", result);
  } else {
    throw ConfigError("unknown training kind '" + kind + "'");
  }
  std::cout << kind << " best_step=" << result.best_step << " best_validation=" << io::format_exact(result.best_validation)
            << '\n';
}

void cmd_rank(const ExperimentConfig& config, const std::string& system, const std::string& split, bool rerank) {
  const Artifacts art{config.work_dir};
  const auto ws = open_workspace(config);
  const auto& queries = ws.queries(split, config.query_lang);
  const auto& corpus = ws.corpus(config.doc_lang);
  std::optional<Reranker> reranker;
  if (rerank) reranker = load_reranker(ws, system);
  const auto runs = run_pipeline(ws, queries, corpus, reranker ? &*reranker : nullptr, config.k, config.ensemble);
  fs::create_directories(art.run(system, split, "r0").parent_path());
  write_run(art.run(system, split, "r0"), runs.r0, "bm25");
  const std::pair<const char*, const std::vector<Ranking>*> staged[] = {{"r1", &runs.r1}, {"ens", &runs.ens}};
  for (const auto& [stage, rankings] : staged) {
    const auto path = art.run(system, split, stage);
    if (rankings->empty()) {
      fs::remove(path);
    } else {
      write_run(path, *rankings, system + "." + stage);
    }
  }
  const auto& qrels = ws.split(split).qrels;
  std::cout << "r0 MAP " << io::format_exact(map_of(runs.r0, qrels)) << '\n';
  if (!runs.r1.empty()) std::cout << "r1 MAP " << io::format_exact(map_of(runs.r1, qrels)) << '\n';
  if (!runs.ens.empty()) std::cout << "ens MAP " << io::format_exact(map_of(runs.ens, qrels)) << '\n';
}

void cmd_eval(const fs::path& run_path, const fs::path& qrels_path, const std::string& against, std::size_t cutoff,
              const std::string& name, const std::string& reports) {
  const auto qrels = Qrels::load(qrels_path);
  MetricReport report;
  report.name = name.empty() ? run_path.filename().string() : name;
  report.result = mean_average_precision(read_run(run_path), qrels, cutoff);
  if (!against.empty()) {
    const auto other = mean_average_precision(read_run(against), qrels, cutoff);
    std::vector<double> a, b;
    for (const auto& [qid, ap] : report.result.per_query) {
      a.push_back(ap);
      b.push_back(other.per_query.at(qid));
    }
    report.test = paired_t_test(a, b);
    report.test_against = fs::path(against).filename().string();
  }
  const auto line = report.to_jsonl();
  std::cout << line << '\n';
  if (!reports.empty()) {
    const auto existing = fs::exists(reports) ? io::read_file(reports) : std::string();
    io::write_atomic(reports, existing + line + '\n');
  }
}

std::vector<std::size_t> parse_values(const std::string& text) {
  std::vector<std::size_t> values;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    try {
      std::size_t used = 0;
      values.push_back(std::stoul(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::logic_error&) {
      throw ConfigError("bad sweep value '" + item + "'");
    }
  }
  if (values.empty()) throw ConfigError("sweep needs at least one value");
  return values;
}

}  // namespace

int main(int argc, char** argv) {
  retain_freed_memory();
  CLI::App app{"Modular cross-lingual reranking on a synthetic bilingual benchmark"};
  app.require_subcommand(1);
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "trace, debug, info, warn, error or off");

  SynthConfig synth;
  std::string synth_out;
  auto* synth_cmd = app.add_subcommand("synth", "Generate the synthetic cipher benchmark");
  synth_cmd->add_option("--out", synth_out, "Output directory")->required();
  synth_cmd->add_option("--seed", synth.seed);
  synth_cmd->add_option("--docs", synth.num_docs);
  synth_cmd->add_option("--topics", synth.num_topics);
  synth_cmd->add_option("--train-topics", synth.train_topics);
  synth_cmd->add_option("--val-topics", synth.val_topics);
  synth_cmd->add_option("--queries-per-topic", synth.queries_per_topic);

  std::string init_out, init_bench = "bench", init_work = "work";
  std::uint64_t init_seed = 1;
  auto* init_cmd = app.add_subcommand("init-config", "Write a default experiment configuration");
  init_cmd->add_option("--out", init_out, "Config file")->required();
  init_cmd->add_option("--benchmark", init_bench);
  init_cmd->add_option("--work-dir", init_work);
  init_cmd->add_option("--seed", init_seed);

  std::string index_corpus, index_out;
  auto* index_cmd = app.add_subcommand("index", "Build a BM25 inverted index of a corpus");
  index_cmd->add_option("--corpus", index_corpus, "Corpus (.jsonl)")->required();
  index_cmd->add_option("--out", index_out, "Index file")->required();

  std::string config_path;
  std::string train_kind, train_lang = kTargetLang;
  bool force = false;
  auto* train_cmd = app.add_subcommand("train", "Train the base model or a module");
  train_cmd->add_option("kind", train_kind, "base, la, ra, lm, rm or full")
      ->required()
      ->check(CLI::IsMember({"base", "la", "ra", "lm", "rm", "full"}));
  train_cmd->add_option("--config", config_path)->required();
  train_cmd->add_option("--lang", train_lang, "Language of la/lm modules")->check(CLI::IsMember({"src", "tgt"}));
  train_cmd->add_flag("--force", force, "Replace an existing base checkpoint");

  std::string system = "adapter", split = "test";
  bool no_rerank = false;
  auto* rank_cmd = app.add_subcommand("rank", "Write R0, R1 and ensemble runs");
  rank_cmd->add_option("--config", config_path)->required();
  rank_cmd->add_option("--system", system, "base, full, adapter or sftm")
      ->check(CLI::IsMember({"base", "full", "adapter", "sftm"}));
  rank_cmd->add_option("--split", split)->check(CLI::IsMember({"train", "val", "test"}));
  rank_cmd->add_flag("--no-rerank", no_rerank, "Stage 1 only");

  std::string eval_run, eval_qrels, eval_against, eval_name, eval_reports;
  std::size_t cutoff = 0;
  auto* eval_cmd = app.add_subcommand("eval", "MAP of a run, optionally t-tested against another run");
  eval_cmd->add_option("--run", eval_run)->required();
  eval_cmd->add_option("--qrels", eval_qrels)->required();
  eval_cmd->add_option("--against", eval_against);
  eval_cmd->add_option("--cutoff", cutoff, "Evaluation depth, 0 for the full list");
  eval_cmd->add_option("--name", eval_name);
  eval_cmd->add_option("--reports", eval_reports, "Append the report to this file");

  std::string axis, values_text;
  std::size_t repetitions = 15, latency_queries = 8;
  auto* sweep_cmd = app.add_subcommand("sweep", "Reduction-factor or AdapterDrop sweep");
  sweep_cmd->add_option("--config", config_path)->required();
  sweep_cmd->add_option("--axis", axis)->required()->check(CLI::IsMember({"reduction_factor", "adapter_drop"}));
  sweep_cmd->add_option("--values", values_text, "Comma-separated values")->required();
  sweep_cmd->add_option("--repetitions", repetitions);
  sweep_cmd->add_option("--latency-queries", latency_queries);

  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(spdlog::level::from_str(log_level));

  try {
    if (*synth_cmd) {
      generate_benchmark(synth).write(synth_out);
    } else if (*init_cmd) {
      auto c = ExperimentConfig::defaults(init_seed);
      c.benchmark = init_bench;
      c.work_dir = init_work;
      c.save(init_out);
    } else if (*index_cmd) {
      io::write_atomic(index_out, index_text(InvertedIndex::build(Corpus::load_jsonl(index_corpus))));
    } else if (*train_cmd) {
      cmd_train(ExperimentConfig::load(config_path), train_kind, train_lang, force);
    } else if (*rank_cmd) {
      cmd_rank(ExperimentConfig::load(config_path), system, split, !no_rerank);
    } else if (*eval_cmd) {
      cmd_eval(eval_run, eval_qrels, eval_against, cutoff, eval_name, eval_reports);
    } else if (*sweep_cmd) {
      const auto ws = open_workspace(ExperimentConfig::load(config_path));
      const auto values = parse_values(values_text);
      const auto rows = axis == "adapter_drop" ? sweep_adapter_drop(ws, values, repetitions, latency_queries)
                                               : sweep_reduction_factor(ws, values);
      std::cout << format_sweep(axis, rows);
    }
  } catch (const ContractError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << '\n';
    return 2;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "io error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
