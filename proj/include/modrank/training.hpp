#pragma once

// Training loops: masked language modelling for language modules and pointwise
// binary cross-entropy for ranking modules and the full fine-tune baseline.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "modrank/encoder.hpp"

namespace modrank {

struct TrainConfig {
  double learning_rate = 1e-4;
  std::size_t batch_size = 32;
  std::size_t steps = 3000;
  std::size_t warmup_steps = 0;
  std::size_t eval_interval = 200;
  std::uint64_t seed = 1;
  std::size_t max_seq_len = 128;

  /// Throws ConfigError unless warmup <= steps, batch >= 1, eval_interval >= 1
  /// and the learning rate is finite and non-negative.
  void validate() const;
};

/// lr·t/warmup for 1 <= t <= warmup, lr afterwards (t is the 1-based update).
double learning_rate_at(const TrainConfig& config, std::size_t step);

/// Tensors updated by an optimizer; a non-empty coordinate mask restricts the
/// update to entries with mask[i] != 0.
struct TrainableSet {
  std::vector<Tensor> tensors;
  std::vector<std::vector<std::uint8_t>> masks;

  void add(Tensor t, std::vector<std::uint8_t> mask = {});
  void add_store(const ParamStore& store);
  /// Every tensor of `store` holding at least one coordinate with trainable[i]
  /// != 0, where i indexes the flat θ of `store`.
  static TrainableSet from_flat_mask(const ParamStore& store, std::span<const std::uint8_t> trainable);
  std::size_t num_coordinates() const;
};

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(TrainableSet params, AdamOptions options = {});
  /// One bias-corrected update using the current gradients.
  void step(double learning_rate);
  std::size_t steps_taken() const { return t_; }

 private:
  TrainableSet params_;
  AdamOptions options_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

// Masked language modelling -------------------------------------------------------

struct MaskedBatch {
  TokenBatch batch;
  std::vector<std::size_t> rows;  // masked positions (flat row indices)
  std::vector<int> targets;       // original ids at those rows
};

/// Selects 15% of the non-special tokens (at least one per batch); 80% become
/// [MASK], 10% a random non-special token, 10% stay unchanged.
MaskedBatch mask_tokens(std::span<const TokenSequence> seqs, std::size_t vocab_size, std::mt19937_64& rng,
                        double mask_rate = 0.15);

/// Mean masked-token cross-entropy and accuracy over `texts`, with masking
/// drawn from `seed` so repeated calls agree.
struct MlmEval {
  double loss = 0.0;
  double accuracy = 0.0;
  std::size_t tokens = 0;
};
MlmEval evaluate_mlm(const Backbone& backbone, const ParamStore& params, const EncoderPlugin* plugin,
                     std::span<const std::string> texts, std::uint64_t seed, std::size_t batch_size = 32);

// Loop bookkeeping ----------------------------------------------------------------

struct TrainRecord {
  std::size_t step = 0;
  double loss = 0.0;
  double learning_rate = 0.0;
  std::optional<double> validation;
};

struct TrainResult {
  std::vector<TrainRecord> log;
  std::size_t best_step = 0;
  double best_validation = 0.0;
  double final_validation = 0.0;

  /// Mean loss over the first / last 10% of steps (at least one step each).
  double early_loss() const;
  double late_loss() const;
  std::string to_jsonl() const;
};

struct TrainHooks {
  /// Called after each validation with the step and metric.
  std::function<void(std::size_t, double)> on_eval;
};

/// Trains `trainable` on the MLM objective. Validation metric: masked-token
/// loss on `validation_texts` (lower is better); the best evaluated state of
/// the trainable tensors is restored before returning.
TrainResult train_mlm(const Backbone& backbone, const ParamStore& params, const EncoderPlugin* plugin,
                      const TrainableSet& trainable, std::span<const std::string> texts,
                      std::span<const std::string> validation_texts, const TrainConfig& config,
                      const TrainHooks& hooks = {});

// Ranking ---------------------------------------------------------------------------

struct RankingExample {
  std::string query_id;
  std::string doc_id;
  int label = 0;
};

struct RankingData {
  std::map<std::string, std::string> queries;    // id → text
  std::map<std::string, std::string> documents;  // id → text
  std::vector<RankingExample> examples;

  /// Throws ContractError if labels are not in {0,1}, ids are unknown, or no
  /// query has both a positive and a negative example.
  void validate() const;
};

/// Returns the validation metric (higher is better), e.g. MAP of reranking.
using RankingValidator = std::function<double()>;

/// Pointwise BCE on ce_logits; each batch holds batch_size/2 positive and as
/// many negative pairs, drawn per query from its examples. The best evaluated
/// state of the trainable tensors is restored before returning.
TrainResult train_ranking(const Backbone& backbone, const ParamStore& params, const EncoderPlugin* plugin,
                          const TrainableSet& trainable, const RankingData& data,
                          const TrainConfig& config, const RankingValidator& validate,
                          const TrainHooks& hooks = {});

/// train_ranking with every tensor of `params` trainable.
TrainResult train_full(const Backbone& backbone, const ParamStore& params, const RankingData& data,
                       const TrainConfig& config, const RankingValidator& validate,
                       const TrainHooks& hooks = {});

}  // namespace modrank
