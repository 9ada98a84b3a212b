#pragma once

// Micro BERT-style transformer encoder: embeddings, post-LN transformer layers,
// a weight-tied masked-language-model head and a dense [CLS] scoring head.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "modrank/io.hpp"
#include "modrank/ops.hpp"
#include "modrank/tensor.hpp"
#include "modrank/tokenizer.hpp"

namespace modrank {

struct EncoderConfig {
  std::size_t num_layers = 4;
  std::size_t hidden = 64;
  std::size_t heads = 4;
  std::size_t ffn_dim = 256;
  std::size_t vocab_size = 0;
  std::size_t max_seq_len = 128;

  /// Throws ConfigError unless hidden % heads == 0, max_seq_len >= 8, and all
  /// sizes are positive.
  void validate() const;
  bool operator==(const EncoderConfig&) const = default;
};

/// Named parameter tensors in insertion order. The flat coordinate vector θ
/// concatenates the tensors in that order, each row-major.
class ParamStore {
 public:
  void add(std::string name, Tensor tensor);
  bool contains(std::string_view name) const;
  Tensor& at(std::string_view name);
  const Tensor& at(std::string_view name) const;

  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  std::vector<Tensor> tensors() const;
  std::size_t num_coordinates() const;
  /// First flat coordinate of `name`.
  std::size_t offset(std::string_view name) const;

  std::vector<double> flatten() const;
  /// Overwrites every tensor in place from θ; throws on a length mismatch.
  void unflatten(std::span<const double> theta);

  /// Deep copy with fresh storage; requires_grad flags are cleared.
  ParamStore clone() const;
  void set_requires_grad(bool on);
  void zero_grad();

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct InitOptions {
  double weight_std = 0.02;
  double embedding_std = 0.02;
};

/// Fresh parameters for `config`; deterministic in `seed`.
ParamStore init_encoder_params(const EncoderConfig& config, std::uint64_t seed,
                               const InitOptions& options = {});

/// Parameter-name prefix of the dense scoring layer (always last in θ).
inline constexpr std::string_view kScoreHeadPrefix = "score.";
inline constexpr std::string_view kMlmHeadPrefix = "mlm.";

struct TokenSequence {
  std::vector<int> ids;
  std::vector<int> segments;
  std::size_t size() const { return ids.size(); }
};

/// [CLS] text [SEP], truncated to max_len.
TokenSequence make_text_input(std::span<const int> tokens, std::size_t max_len);
/// [CLS] q [SEP] d [SEP] with document tokens segment 1. Over-long inputs drop
/// document tokens first, then query tokens; a warning is logged.
TokenSequence make_pair_input(std::span<const int> query, std::span<const int> doc,
                              std::size_t max_len);

/// Sequences padded to a common length and flattened row-wise.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<int> ids;
  std::vector<int> segments;
  std::vector<int> positions;
  std::vector<std::uint8_t> valid;

  static TokenBatch pack(std::span<const TokenSequence> seqs);
  ops::BatchLayout layout() const;
  std::size_t rows() const { return batch * seq_len; }
};

/// Hook points used by adapters. Implementations must be pure functions of
/// their inputs so that encode stays deterministic.
class EncoderPlugin {
 public:
  virtual ~EncoderPlugin() = default;
  virtual Tensor on_embeddings(const Tensor& embedded, const TokenBatch&) const { return embedded; }
  virtual bool active_at(std::size_t layer) const = 0;
  /// hidden = LN(a + ffn(a)) and residual = ffn(a) of layer `layer`; the
  /// returned tensor replaces the FFN output before the closing layer norm.
  virtual Tensor after_ffn(std::size_t layer, const Tensor& hidden, const Tensor& residual,
                           const TokenBatch&) const = 0;
  virtual Tensor before_output(const Tensor& hidden, const TokenBatch&) const { return hidden; }
};

/// Architecture plus vocabulary: everything except the weights.
struct Backbone {
  EncoderConfig config;
  Tokenizer tokenizer;
};

/// Hidden states [rows × h] for every token of the batch.
Tensor encode(const Backbone& backbone, const ParamStore& params, const TokenBatch& batch,
              const EncoderPlugin* plugin = nullptr);

/// MLM logits for the selected rows (all rows when `rows` is empty).
Tensor mlm_logits(const Backbone& backbone, const ParamStore& params, const TokenBatch& batch,
                  const EncoderPlugin* plugin = nullptr, std::span<const std::size_t> rows = {});

/// Cross-encoder relevance logits [batch], one per pair sequence.
Tensor ce_logits(const Backbone& backbone, const ParamStore& params, const TokenBatch& batch,
                 const EncoderPlugin* plugin = nullptr);

double ce_score(const Backbone& backbone, const ParamStore& params, std::string_view query,
                std::string_view doc, const EncoderPlugin* plugin = nullptr);

/// Scores `docs` against one query, `batch_size` pairs per forward pass.
std::vector<double> ce_score_many(const Backbone& backbone, const ParamStore& params,
                                  std::string_view query, std::span<const std::string> docs,
                                  const EncoderPlugin* plugin = nullptr,
                                  std::size_t batch_size = 32);

/// Mean-pooled adapter-free embedding over the non-pad tokens of
/// [CLS] text [SEP]. Empty text yields a zero vector and a warning.
std::vector<double> be_embed(const Backbone& backbone, const ParamStore& params,
                             std::string_view text);

// Checkpoints -------------------------------------------------------------------

struct Checkpoint {
  Backbone backbone;
  ParamStore params;
};

/// u64 count, then per tensor: name, u32 rank, u64 dims, raw doubles.
void write_params(io::BinaryWriter& w, const ParamStore& params);
ParamStore read_params(io::BinaryReader& r, const std::string& source);

/// Binary layout: "MRCKPT01", u32 version, six u64 config fields, u64 vocab
/// size + length-prefixed tokens, u64 tensor count, then per tensor name,
/// u32 rank, u64 dims, raw little-endian doubles.
std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(std::string_view bytes, const std::string& source = "checkpoint");
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// 16 hex digits of SHA-256 over the serialized checkpoint (config, vocabulary
/// and θ). Adapter and mask files record it to detect foreign bases.
std::string fingerprint(const Checkpoint& ckpt);

}  // namespace modrank
