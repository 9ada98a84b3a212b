#pragma once

// Bottleneck adapters injected after the FFN sub-layer of each transformer
// layer: Language Adapters (LA), Ranking Adapters (RA) stacked on top of an LA,
// invertible embedding adapters, split query/document routing and AdapterDrop.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>

#include "modrank/encoder.hpp"

namespace modrank {

enum class Activation { kRelu };

struct AdapterConfig {
  std::size_t reduction_factor = 16;
  Activation activation = Activation::kRelu;
  /// Also add invertible coupling adapters at the embedding/output layers.
  bool invertible = false;

  /// d = h / r. Throws ConfigError unless r >= 1 and r divides h.
  std::size_t bottleneck(std::size_t hidden) const;
  bool operator==(const AdapterConfig&) const = default;
};

/// Trainable parameter count of one adapter set: L·(2hd + d + h).
std::size_t adapter_param_count(const AdapterConfig& config, std::size_t num_layers,
                                std::size_t hidden);

/// Per-layer projections named layer.{l}.down.{weight,bias} ([h×d], [d]) and
/// layer.{l}.up.{weight,bias} ([d×h], [h]). With config.invertible the store
/// also holds inv.{f,g}.{in,out}.{weight,bias}, two bottleneck MLPs over h/2.
struct AdapterParams {
  AdapterConfig config;
  std::size_t num_layers = 0;
  std::size_t hidden = 0;
  ParamStore store;

  /// D ~ N(0, down_std²), U = 0 and zero biases: an exact passthrough.
  static AdapterParams init(const AdapterConfig& config, const EncoderConfig& encoder,
                            std::uint64_t seed, double down_std = 0.01);

  const Tensor& down_weight(std::size_t layer) const;
  const Tensor& down_bias(std::size_t layer) const;
  const Tensor& up_weight(std::size_t layer) const;
  const Tensor& up_bias(std::size_t layer) const;
  bool has_invertible() const { return config.invertible; }
};

/// U ψ(D h + b_D) + b_U + r for one layer; h and r are [n×h].
Tensor la_forward(const Tensor& hidden, const Tensor& residual, const AdapterParams& la,
                  std::size_t layer);
/// RA stacked on LA; both read the FFN residual r.
Tensor ra_forward(const Tensor& hidden, const Tensor& residual, const AdapterParams& la,
                  const AdapterParams& ra, std::size_t layer);

/// Additive coupling over the halves of the last axis:
/// o1 = e1 + F(e2), o2 = e2 + G(o1).
Tensor invertible_apply(const Tensor& e, const AdapterParams& la);
Tensor invertible_invert(const Tensor& o, const AdapterParams& la);

/// take_query[r] = 1 for rows up to and including the first [SEP] of each
/// sequence; pad rows are assigned to the document side.
std::vector<std::uint8_t> split_route(const TokenBatch& batch);

enum class LaMode { kQuery, kDocument, kSplit };

/// Inference-time recipe; ids name entries of an adapter registry.
struct AdapterComposition {
  LaMode la_mode = LaMode::kQuery;
  std::string la_query;
  std::string la_document;
  std::string ra;  // empty: LA only
  std::size_t drop_first_n = 0;
  bool invertible = false;
};

/// Same composition with adapters removed from the first n layers. Invertible
/// adapters sit below layer 1 and are dropped with it for n >= 1.
AdapterComposition adapter_drop(const AdapterComposition& comp, std::size_t n,
                                std::size_t num_layers);

/// EncoderPlugin running LA (optionally split) and RA modules.
class AdapterStack final : public EncoderPlugin {
 public:
  /// la_document is only read in split mode; ra may be null.
  AdapterStack(const AdapterParams* la_query, const AdapterParams* la_document,
               const AdapterParams* ra, LaMode mode, std::size_t drop_first_n, bool invertible);

  /// Resolves the ids of `comp` in `registry`; throws ConfigError for a
  /// missing id or incompatible shapes.
  static AdapterStack compose(const AdapterComposition& comp,
                              const std::map<std::string, AdapterParams>& registry,
                              std::size_t num_layers);

  Tensor on_embeddings(const Tensor& embedded, const TokenBatch& batch) const override;
  bool active_at(std::size_t layer) const override;
  Tensor after_ffn(std::size_t layer, const Tensor& hidden, const Tensor& residual,
                   const TokenBatch& batch) const override;
  Tensor before_output(const Tensor& hidden, const TokenBatch& batch) const override;

 private:
  Tensor language(std::size_t layer, const Tensor& hidden, const Tensor& residual,
                  const TokenBatch& batch) const;

  const AdapterParams* la_query_;
  const AdapterParams* la_document_;
  const AdapterParams* ra_;
  LaMode mode_;
  std::size_t drop_first_n_;
  bool invertible_;
};

// Adapter files ---------------------------------------------------------------

enum class AdapterRole { kLanguage, kRanking };

struct AdapterFile {
  AdapterRole role = AdapterRole::kLanguage;
  std::string tag;  // language code, or "rank"
  std::string base_fingerprint;
  AdapterParams params;
  /// score.weight / score.bias trained together with an RA.
  std::optional<ParamStore> head;
};

/// "LA_<tag>_r<r>.adapter" or "RA_<tag>_r<r>.adapter".
std::string adapter_file_name(AdapterRole role, const std::string& tag, std::size_t reduction_factor);

void save_adapter(const std::filesystem::path& path, const AdapterFile& file);
/// Throws FingerprintError when `expected_fingerprint` is non-empty and differs.
AdapterFile load_adapter(const std::filesystem::path& path, const std::string& expected_fingerprint = {});

/// Copies every tensor of `head` over the same-named tensor of `params`.
void apply_head(ParamStore& params, const ParamStore& head);
/// The score.* tensors of `params`, deep-copied.
ParamStore extract_head(const ParamStore& params);

}  // namespace modrank
