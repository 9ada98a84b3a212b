#include "modrank/training.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>

#include "json.hpp"
#include "modrank/error.hpp"

namespace modrank {

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
  if (warmup_steps > steps) throw ConfigError("warmup_steps exceeds steps");
  if (eval_interval == 0) throw ConfigError("eval_interval must be at least 1");
  if (!std::isfinite(learning_rate) || learning_rate < 0.0) throw ConfigError("learning rate must be finite and >= 0");
  if (max_seq_len < 8) throw ConfigError("max_seq_len must be at least 8");
}

double learning_rate_at(const TrainConfig& config, std::size_t step) {
  if (config.warmup_steps > 0 && step <= config.warmup_steps) {
    return config.learning_rate * static_cast<double>(step) / static_cast<double>(config.warmup_steps);
  }
  return config.learning_rate;
}

// Trainable sets and Adam ---------------------------------------------------------

void TrainableSet::add(Tensor t, std::vector<std::uint8_t> mask) {
  if (!mask.empty() && mask.size() != t.numel()) throw DimensionError("trainable mask length mismatch");
  tensors.push_back(std::move(t));
  masks.push_back(std::move(mask));
}

void TrainableSet::add_store(const ParamStore& store) {
  for (const auto& [_, t] : store.entries()) add(t);
}

TrainableSet TrainableSet::from_flat_mask(const ParamStore& store, std::span<const std::uint8_t> trainable) {
  if (trainable.size() != store.num_coordinates()) throw DimensionError("flat trainable mask length mismatch");
  TrainableSet set;
  std::size_t offset = 0;
  for (const auto& [_, t] : store.entries()) {
    const auto n = t.numel();
    const auto part = trainable.subspan(offset, n);
    offset += n;
    const auto count = static_cast<std::size_t>(std::count_if(part.begin(), part.end(), [](auto v) { return v != 0; }));
    if (count == 0) continue;
    if (count == n) {
      set.add(t);
    } else {
      std::vector<std::uint8_t> mask(part.size());
      std::transform(part.begin(), part.end(), mask.begin(), [](auto v) { return v != 0 ? 1 : 0; });
      set.add(t, std::move(mask));
    }
  }
  return set;
}

std::size_t TrainableSet::num_coordinates() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    n += masks[i].empty() ? tensors[i].numel()
                          : static_cast<std::size_t>(std::count(masks[i].begin(), masks[i].end(), 1));
  }
  return n;
}

Adam::Adam(TrainableSet params, AdamOptions options) : params_(std::move(params)), options_(options) {
  for (const auto& t : params_.tensors) {
    m_.emplace_back(t.numel(), 0.0);
    v_.emplace_back(t.numel(), 0.0);
  }
}

void Adam::step(double learning_rate) {
  ++t_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t p = 0; p < params_.tensors.size(); ++p) {
    auto& tensor = params_.tensors[p];
    if (!tensor.has_grad()) continue;
    const auto g = tensor.grad();
    auto x = tensor.mutable_data();
    const auto& mask = params_.masks[p];
    auto& m = m_[p];
    auto& v = v_[p];
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (!mask.empty() && mask[i] == 0) continue;
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      x[i] -= learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + options_.eps);
    }
  }
}

// MLM -----------------------------------------------------------------------------

MaskedBatch mask_tokens(std::span<const TokenSequence> seqs, std::size_t vocab_size, std::mt19937_64& rng,
                        double mask_rate) {
  if (vocab_size <= special::kCount) throw ContractError("vocabulary has no ordinary tokens to mask");
  MaskedBatch out;
  out.batch = TokenBatch::pack(seqs);
  auto& b = out.batch;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> random_token(special::kCount, static_cast<int>(vocab_size) - 1);

  std::vector<std::size_t> candidates;
  for (std::size_t r = 0; r < b.rows(); ++r) {
    if (b.valid[r] && b.ids[r] >= special::kCount) candidates.push_back(r);
  }
  if (candidates.empty()) throw ContractError("MLM batch has no maskable tokens");
  for (auto r : candidates) {
    if (unit(rng) < mask_rate) out.rows.push_back(r);
  }
  if (out.rows.empty()) {
    std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
    out.rows.push_back(candidates[pick(rng)]);
  }
  for (auto r : out.rows) {
    out.targets.push_back(b.ids[r]);
    const double u = unit(rng);
    if (u < 0.8) {
      b.ids[r] = special::kMask;
    } else if (u < 0.9) {
      b.ids[r] = random_token(rng);
    }
  }
  return out;
}

namespace {

std::vector<TokenSequence> tokenize_texts(const Backbone& backbone, std::span<const std::string> texts,
                                          std::size_t max_len) {
  std::vector<TokenSequence> seqs;
  seqs.reserve(texts.size());
  for (const auto& t : texts) {
    auto tokens = backbone.tokenizer.tokenize(t);
    if (tokens.empty()) continue;
    seqs.push_back(make_text_input(tokens, max_len));
  }
  return seqs;
}

std::size_t effective_len(const Backbone& backbone, const TrainConfig& config) {
  return std::min(config.max_seq_len, backbone.config.max_seq_len);
}

class LoopState {
 public:
  LoopState(const TrainableSet& trainable, const TrainConfig& config, bool higher_is_better)
      : trainable_(trainable), config_(config), higher_(higher_is_better), adam_(trainable) {
    config.validate();
    for (auto t : trainable_.tensors) t.set_requires_grad(true);
    snapshot();
  }
  ~LoopState() {
    for (auto t : trainable_.tensors) t.set_requires_grad(false);
  }
  LoopState(const LoopState&) = delete;
  LoopState& operator=(const LoopState&) = delete;

  template <class LossFn, class Validate>
  TrainResult run(LossFn&& loss_fn, Validate&& validate, const TrainHooks& hooks) {
    TrainResult result;
    std::mt19937_64 rng(config_.seed);
    bool have_best = false;
    for (std::size_t step = 1; step <= config_.steps; ++step) {
      for (auto t : trainable_.tensors) t.zero_grad();
      double loss_value = 0.0;
      {
        Tape tape;
        Tensor loss = loss_fn(rng);
        loss_value = loss.item();
        if (!std::isfinite(loss_value)) throw NumericError("training loss became non-finite at step " + std::to_string(step));
        tape.backward(loss);
      }
      const double lr = learning_rate_at(config_, step);
      adam_.step(lr);
      TrainRecord rec{step, loss_value, lr, std::nullopt};
      if (step % config_.eval_interval == 0 || step == config_.steps) {
        const double metric = validate();
        rec.validation = metric;
        result.final_validation = metric;
        if (hooks.on_eval) hooks.on_eval(step, metric);
        const bool better = !have_best || (higher_ ? metric > result.best_validation : metric < result.best_validation);
        if (better) {
          have_best = true;
          result.best_validation = metric;
          result.best_step = step;
          snapshot();
        }
        spdlog::debug("step {} loss {:.5f} lr {:.3g} validation {:.5f}", step, loss_value, lr, metric);
      }
      result.log.push_back(rec);
    }
    restore();
    return result;
  }

 private:
  void snapshot() {
    best_.clear();
    for (const auto& t : trainable_.tensors) best_.emplace_back(t.data().begin(), t.data().end());
  }
  void restore() {
    for (std::size_t i = 0; i < trainable_.tensors.size(); ++i) {
      auto dst = trainable_.tensors[i].mutable_data();
      std::copy(best_[i].begin(), best_[i].end(), dst.begin());
    }
  }

  TrainableSet trainable_;
  TrainConfig config_;
  bool higher_;
  Adam adam_;
  std::vector<std::vector<double>> best_;
};

}  // namespace

MlmEval evaluate_mlm(const Backbone& backbone, const ParamStore& params, const EncoderPlugin* plugin,
                     std::span<const std::string> texts, std::uint64_t seed, std::size_t batch_size) {
  const auto seqs = tokenize_texts(backbone, texts, backbone.config.max_seq_len);
  if (seqs.empty()) throw ContractError("evaluate_mlm: no non-empty texts");
  std::mt19937_64 rng(seed);
  MlmEval out;
  double loss_sum = 0.0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < seqs.size(); start += batch_size) {
    const auto end = std::min(seqs.size(), start + batch_size);
    const auto masked = mask_tokens(std::span(seqs).subspan(start, end - start), backbone.config.vocab_size, rng);
    const Tensor logits = mlm_logits(backbone, params, masked.batch, plugin, masked.rows);
    const auto v = logits.dim(1);
    const auto data = logits.data();
    for (std::size_t i = 0; i < masked.rows.size(); ++i) {
      const auto row = data.subspan(i * v, v);
      const double mx = *std::max_element(row.begin(), row.end());
      double z = 0.0;
      for (double x : row) z += std::exp(x - mx);
      loss_sum += mx + std::log(z) - row[static_cast<std::size_t>(masked.targets[i])];
      const auto arg = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
      if (arg == masked.targets[i]) ++correct;
    }
    out.tokens += masked.rows.size();
  }
  out.loss = loss_sum / static_cast<double>(out.tokens);
  out.accuracy = static_cast<double>(correct) / static_cast<double>(out.tokens);
  return out;
}

TrainResult train_mlm(const Backbone& backbone, const ParamStore& params, const EncoderPlugin* plugin,
                      const TrainableSet& trainable, std::span<const std::string> texts,
                      std::span<const std::string> validation_texts, const TrainConfig& config,
                      const TrainHooks& hooks) {
  config.validate();
  const auto seqs = tokenize_texts(backbone, texts, effective_len(backbone, config));
  if (seqs.empty()) throw ContractError("train_mlm: empty training corpus");
  if (validation_texts.empty()) throw ContractError("train_mlm: empty validation corpus");
  std::uniform_int_distribution<std::size_t> pick(0, seqs.size() - 1);
  std::vector<TokenSequence> batch(config.batch_size);
  const auto vocab = backbone.config.vocab_size;

  LoopState loop(trainable, config, false);
  return loop.run(
      [&](std::mt19937_64& rng) {
        for (auto& s : batch) s = seqs[pick(rng)];
        const auto masked = mask_tokens(batch, vocab, rng);
        return ops::cross_entropy(mlm_logits(backbone, params, masked.batch, plugin, masked.rows), masked.targets);
      },
      [&] { return evaluate_mlm(backbone, params, plugin, validation_texts, config.seed ^ 0x9e3779b97f4a7c15ULL).loss; },
      hooks);
}

// Ranking -------------------------------------------------------------------------

void RankingData::validate() const {
  std::map<std::string, std::pair<bool, bool>> labels;
  for (const auto& e : examples) {
    if (e.label != 0 && e.label != 1) throw ContractError("ranking label must be 0 or 1");
    if (!queries.contains(e.query_id)) throw ContractError("unknown query id '" + e.query_id + "'");
    if (!documents.contains(e.doc_id)) throw ContractError("unknown document id '" + e.doc_id + "'");
    auto& [pos, neg] = labels[e.query_id];
    (e.label == 1 ? pos : neg) = true;
  }
  const bool usable = std::any_of(labels.begin(), labels.end(), [](const auto& kv) {
    return kv.second.first && kv.second.second;
  });
  if (!usable) throw ContractError("ranking data needs a query with both positive and negative examples");
}

TrainResult train_ranking(const Backbone& backbone, const ParamStore& params, const EncoderPlugin* plugin,
                          const TrainableSet& trainable, const RankingData& data,
                          const TrainConfig& config, const RankingValidator& validate,
                          const TrainHooks& hooks) {
  config.validate();
  data.validate();
  const auto max_len = effective_len(backbone, config);
  const auto& tok = backbone.tokenizer;

  struct Group {
    std::vector<int> query;
    std::vector<std::vector<int>> pos, neg;
  };
  std::map<std::string, Group> groups;
  std::map<std::string, std::vector<int>> doc_tokens;
  for (const auto& e : data.examples) {
    auto& g = groups[e.query_id];
    if (g.query.empty()) g.query = tok.tokenize(data.queries.at(e.query_id));
    auto [it, fresh] = doc_tokens.try_emplace(e.doc_id);
    if (fresh) it->second = tok.tokenize(data.documents.at(e.doc_id));
    (e.label == 1 ? g.pos : g.neg).push_back(it->second);
  }
  std::vector<const Group*> usable;
  for (const auto& [_, g] : groups) {
    if (!g.pos.empty() && !g.neg.empty()) usable.push_back(&g);
  }
  const std::size_t half = std::max<std::size_t>(1, config.batch_size / 2);
  std::vector<TokenSequence> seqs(2 * half);
  std::vector<double> labels(2 * half);
  for (std::size_t i = 0; i < half; ++i) {
    labels[2 * i] = 1.0;
    labels[2 * i + 1] = 0.0;
  }

  LoopState loop(trainable, config, true);
  return loop.run(
      [&](std::mt19937_64& rng) {
        for (std::size_t i = 0; i < half; ++i) {
          const Group& g = *usable[std::uniform_int_distribution<std::size_t>(0, usable.size() - 1)(rng)];
          const auto& p = g.pos[std::uniform_int_distribution<std::size_t>(0, g.pos.size() - 1)(rng)];
          const auto& n = g.neg[std::uniform_int_distribution<std::size_t>(0, g.neg.size() - 1)(rng)];
          seqs[2 * i] = make_pair_input(g.query, p, max_len);
          seqs[2 * i + 1] = make_pair_input(g.query, n, max_len);
        }
        return ops::bce_with_logits(ce_logits(backbone, params, TokenBatch::pack(seqs), plugin), labels);
      },
      validate, hooks);
}

TrainResult train_full(const Backbone& backbone, const ParamStore& params, const RankingData& data,
                       const TrainConfig& config, const RankingValidator& validate, const TrainHooks& hooks) {
  TrainableSet all;
  all.add_store(params);
  return train_ranking(backbone, params, nullptr, all, data, config, validate, hooks);
}

// Results -------------------------------------------------------------------------

double TrainResult::early_loss() const {
  if (log.empty()) return 0.0;
  const auto n = std::max<std::size_t>(1, log.size() / 10);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += log[i].loss;
  return s / static_cast<double>(n);
}

double TrainResult::late_loss() const {
  if (log.empty()) return 0.0;
  const auto n = std::max<std::size_t>(1, log.size() / 10);
  double s = 0.0;
  for (std::size_t i = log.size() - n; i < log.size(); ++i) s += log[i].loss;
  return s / static_cast<double>(n);
}

std::string TrainResult::to_jsonl() const {
  std::string out;
  for (const auto& r : log) {
    nlohmann::ordered_json j{{"step", r.step}, {"loss", r.loss}, {"lr", r.learning_rate}};
    if (r.validation) j["validation"] = *r.validation;
    out += j.dump() + "\n";
  }
  return out;
}

}  // namespace modrank
