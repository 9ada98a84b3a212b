#pragma once

// Sparse fine-tuning masks: two-phase learning of a sparse delta over the flat
// parameter vector θ, and additive composition θ⁰ + RM + LM at inference.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "modrank/encoder.hpp"

namespace modrank {

enum class MaskRole { kLanguage, kRanking };

struct SparseMask {
  std::size_t dim = 0;
  /// Budget on the number of entries with index < exempt_from.
  std::size_t k = 0;
  /// Coordinates at or above this index (the scoring head of a ranking mask)
  /// ride along with the mask without counting against k.
  std::size_t exempt_from = 0;
  MaskRole role = MaskRole::kLanguage;
  std::string tag;
  std::string base_fingerprint;
  std::vector<std::size_t> indices;  // strictly increasing
  std::vector<double> values;

  std::size_t size() const { return indices.size(); }
  /// Entries counted against k.
  std::size_t budgeted_size() const;
  /// Throws ContractError when an invariant is violated.
  void validate() const;
  bool operator==(const SparseMask&) const = default;
};

/// 1 for every coordinate outside the score.* tensors.
std::vector<std::uint8_t> mask_eligibility(const ParamStore& params);

/// Indices of the k largest |θ¹ᵢ − θ⁰ᵢ| among eligible coordinates (all
/// coordinates when `eligible` is empty); ties by ascending index. The result
/// is sorted ascending and has min(k, #eligible) entries.
std::vector<std::size_t> select_support(std::span<const double> theta0, std::span<const double> theta1,
                                        std::size_t k, std::span<const std::uint8_t> eligible = {});

/// Trains from `start` updating only coordinates with trainable[i] != 0 and
/// returns the final θ.
using SparseTrainer = std::function<std::vector<double>(std::span<const double> start,
                                                        std::span<const std::uint8_t> trainable)>;

/// Restarts from θ⁰ and trains the support plus every coordinate >= exempt_from.
/// Trained coordinates are rounded to the nearest value reachable as
/// θ⁰ᵢ + (θ²ᵢ − θ⁰ᵢ), so that composing the extracted mask reproduces θ² exactly.
/// Throws ContractError if the trainer touched a frozen coordinate.
std::vector<double> phase2_train(std::span<const double> theta0, std::span<const std::size_t> support,
                                 const SparseTrainer& trainer, std::size_t exempt_from);

/// Deltas θ²ᵢ − θ⁰ᵢ on the support and on [exempt_from, dim). With `prune`,
/// zero deltas are dropped.
SparseMask extract_mask(std::span<const double> theta2, std::span<const double> theta0,
                        std::span<const std::size_t> support, std::size_t k, std::size_t exempt_from,
                        MaskRole role, std::string tag, bool prune = false);

/// Adds `mask` to θ in place.
void apply_mask(std::span<double> theta, const SparseMask& mask);
/// θ⁰ + rm + lm, added in that order.
std::vector<double> compose(std::span<const double> theta0, const SparseMask& rm, const SparseMask& lm);

/// Sparse sum over the union of supports; both masks must share dim,
/// exempt_from and base fingerprint.
SparseMask combine_masks(const SparseMask& a, const SparseMask& b);

/// Mask budget matching adapters of reduction factor r.
std::size_t k_from_reduction_factor(std::size_t r, std::size_t num_layers, std::size_t hidden);

/// Text format: a "modrank-mask 1" line, key/value header lines (dim, k,
/// exempt_from, role, tag, base, entries), then one "index delta" line per
/// entry with deltas in shortest round-trip form.
std::string mask_file_name(MaskRole role, const std::string& tag, std::size_t reduction_factor);
void save_mask(const std::filesystem::path& path, const SparseMask& mask);
/// Throws FingerprintError when `expected_fingerprint` is non-empty and differs.
SparseMask load_mask(const std::filesystem::path& path, const std::string& expected_fingerprint = {});

}  // namespace modrank
