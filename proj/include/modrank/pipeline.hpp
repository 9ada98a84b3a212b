#pragma once

// Experiment orchestration shared by the command-line tool and the end-to-end
// checks: configuration, module training recipes, composed rerankers, ranking
// runs, evaluation and sweeps.

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "modrank/adapters.hpp"
#include "modrank/encoder.hpp"
#include "modrank/eval.hpp"
#include "modrank/retrieval.hpp"
#include "modrank/sftm.hpp"
#include "modrank/synth.hpp"
#include "modrank/training.hpp"

namespace modrank {

enum class ModuleKind { kAdapter, kSftm };
enum class Preranker { kBm25, kBiEncoder };

struct ExperimentConfig {
  static constexpr int kVersion = 1;

  std::filesystem::path benchmark;  // directory written by generate_benchmark
  std::filesystem::path work_dir;   // artifacts, runs and reports
  std::uint64_t seed = 1;
  EncoderConfig encoder;            // vocab_size is filled from the tokenizer
  std::size_t vocab_cap = 8192;
  /// Share of words translated in the code-switched copies of the training
  /// documents added to base pretraining; 0 disables them.
  double code_switch_rate = 0.5;

  ModuleKind modules = ModuleKind::kAdapter;
  /// Ranking modules (RA, and the RM budget K).
  std::size_t reduction_factor = 16;
  /// Language modules (LA, and the LM budget K).
  std::size_t language_reduction_factor = 2;
  /// "Q", "D", "S" for adapters; "Q", "D", "B" for masks.
  std::string mode = "Q";
  bool invertible = false;
  std::size_t drop_first_n = 0;

  std::string query_lang = kTargetLang;
  std::string doc_lang = kTargetLang;

  Preranker preranker = Preranker::kBm25;
  std::size_t k = 100;
  bool ensemble = true;
  std::size_t negatives_depth = 100;
  std::size_t validation_k = 20;
  std::size_t validation_queries = 30;
  std::size_t score_batch = 50;

  TrainConfig base_training;
  TrainConfig language_training;
  TrainConfig ranking_training;
  TrainConfig full_training;

  /// Desk-scale defaults with every schedule seeded from `seed`.
  static ExperimentConfig defaults(std::uint64_t seed = 1);
  static ExperimentConfig load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
  std::string to_json() const;
  static ExperimentConfig from_json(const std::string& text, const std::string& source = "config");
  /// Throws ConfigError for unsupported values.
  void validate() const;
};

/// The loaded benchmark plus the base model, shared by every recipe.
struct Workspace {
  ExperimentConfig config;
  SyntheticBenchmark bench;
  Checkpoint base;
  std::string base_fingerprint;

  const Corpus& corpus(const std::string& lang) const;
  const QuerySplit& split(const std::string& name) const;
  const std::vector<Query>& queries(const std::string& split, const std::string& lang) const;
  /// BM25 index of corpus(lang), built on first use.
  const InvertedIndex& index(const std::string& lang) const;

 private:
  mutable std::map<std::string, std::shared_ptr<InvertedIndex>> indexes_;
};

// Recipes ---------------------------------------------------------------------------

/// Vocabulary from both corpora and all queries, then MLM pretraining of every
/// parameter on the source and target documents plus code-switched copies of
/// the source documents. Stands in for the multilingual pretrained model.
Checkpoint pretrain_base(const ExperimentConfig& config, const SyntheticBenchmark& bench,
                         TrainResult* result = nullptr);

/// `text` with each word replaced by its cipher translation with probability `rate`.
std::string code_switch(const std::string& text, const Cipher& cipher, double rate, std::mt19937_64& rng);

Workspace make_workspace(const ExperimentConfig& config, SyntheticBenchmark bench, Checkpoint base);

/// Pointwise training data for the train split in `lang`: every judged
/// relevant document, and the non-relevant ones among the BM25 top
/// negatives_depth.
RankingData ranking_data(const Workspace& ws, const std::string& lang);

AdapterFile train_language_adapter(const Workspace& ws, const std::string& lang, TrainResult* result = nullptr);
/// RA (plus scoring head) trained on source data on top of `la_source`.
AdapterFile train_ranking_adapter(const Workspace& ws, const AdapterFile& la_source, TrainResult* result = nullptr);
SparseMask train_language_mask(const Workspace& ws, const std::string& lang, TrainResult* result = nullptr);
/// RM trained on source data over θ⁰ + lm_source; stored relative to that point.
SparseMask train_ranking_mask(const Workspace& ws, const SparseMask& lm_source, TrainResult* result = nullptr);
/// Full fine-tune of θ⁰ on source ranking data.
Checkpoint train_full_model(const Workspace& ws, TrainResult* result = nullptr);

// Composed rerankers ----------------------------------------------------------------

/// A cross-encoder ready to score pairs: parameters plus an optional adapter plugin.
class Reranker {
 public:
  /// θ⁰ as is.
  static Reranker base(const Workspace& ws);
  static Reranker full(const Workspace& ws, const Checkpoint& tuned);
  /// θ⁰ with `head` swapped in and no adapters: the adapter-free pipeline.
  static Reranker headed(const Workspace& ws, const ParamStore& head);
  /// θ⁰ with the RA's head, LA(s) chosen by the composition and the RA stacked on top.
  static Reranker adapters(const Workspace& ws, std::map<std::string, AdapterParams> registry,
                           const ParamStore& head, const AdapterComposition& comp);
  /// θ⁰ + rm + lm.
  static Reranker masks(const Workspace& ws, const SparseMask& rm, const SparseMask& lm);

  PairScorer scorer(const Corpus& corpus, std::size_t batch_size) const;
  const ParamStore& params() const { return *params_; }
  const EncoderPlugin* plugin() const { return stack_.get(); }

 private:
  const Workspace* ws_ = nullptr;
  std::shared_ptr<ParamStore> params_;
  std::shared_ptr<std::map<std::string, AdapterParams>> registry_;
  std::shared_ptr<AdapterStack> stack_;
};

struct RunSet {
  std::vector<Ranking> r0, r1, ens;
};

/// Stage 1 for every query; with a reranker, Stage 2 over the top k and the
/// ensemble when enabled.
RunSet run_pipeline(const Workspace& ws, const std::vector<Query>& queries, const Corpus& corpus,
                    const Reranker* reranker, std::size_t k, bool ensemble);

std::map<std::string, Ranking> as_run(const std::vector<Ranking>& rankings);
double map_of(const std::vector<Ranking>& rankings, const Qrels& qrels);

/// MAP of reranking the top validation_k documents for the first
/// validation_queries source-language validation queries.
double validation_map(const Workspace& ws, const ParamStore& params, const EncoderPlugin* plugin);

// File-level artifacts ---------------------------------------------------------------

struct Artifacts {
  std::filesystem::path dir;
  std::filesystem::path base() const { return dir / "base.ckpt"; }
  std::filesystem::path full() const { return dir / "full.ckpt"; }
  std::filesystem::path adapter(AdapterRole role, const std::string& tag, std::size_t r) const;
  std::filesystem::path mask(MaskRole role, const std::string& tag, std::size_t r) const;
  std::filesystem::path log(const std::string& name) const { return dir / ("train." + name + ".jsonl"); }
  std::filesystem::path run(const std::string& system, const std::string& split, const std::string& stage) const;
  std::filesystem::path reports() const { return dir / "metrics.jsonl"; }
};

/// Loads the benchmark and base checkpoint named by `config`.
Workspace open_workspace(const ExperimentConfig& config);

/// Fingerprint-checked module files of the work directory: language adapters
/// keyed by language tag plus the ranking adapter under "rank".
struct AdapterSet {
  std::map<std::string, AdapterParams> registry;
  ParamStore head;
};
AdapterSet load_adapter_set(const Workspace& ws);
AdapterComposition composition(const ExperimentConfig& config);

/// Reranker selected by name: "base", "full", "adapter" or "sftm", loading the
/// needed artifacts (fingerprint-checked) from the work directory.
Reranker load_reranker(const Workspace& ws, const std::string& system);

struct SweepRow {
  std::size_t value = 0;
  double map = 0.0;
  double latency_ms = 0.0;
  double delta_latency_ms = 0.0;
};

/// AdapterDrop sweep for the adapter system over `values` (dropped layers):
/// MAP of Stage 2 on the test split and the drift-corrected per-query
/// reranking latency over `repetitions` interleaved passes.
std::vector<SweepRow> sweep_adapter_drop(const Workspace& ws, const std::vector<std::size_t>& values,
                                         std::size_t repetitions, std::size_t latency_queries);

/// Reduction-factor sweep: trains the configured module kind per value and
/// reports Stage-2 MAP on the test split.
std::vector<SweepRow> sweep_reduction_factor(const Workspace& ws, const std::vector<std::size_t>& values);

std::string format_sweep(const std::string& axis, const std::vector<SweepRow>& rows);

}  // namespace modrank
