#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "modrank/tensor.hpp"

namespace modrank::ops {

// Linear algebra --------------------------------------------------------------

/// [m×k]·[k×n] → [m×n].
Tensor matmul(const Tensor& a, const Tensor& b);
/// [m×k]·[n×k]ᵀ → [m×n]; used for weight-tied output projections.
Tensor matmul_nt(const Tensor& a, const Tensor& b);
/// x·w + b with x [n×in], w [in×out], b [out].
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// Elementwise -----------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
/// Broadcasts a [n] bias over the rows of x [m×n].
Tensor add_row_bias(const Tensor& x, const Tensor& bias);
Tensor relu(const Tensor& x);
/// tanh approximation used by BERT-family models.
Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

// Reductions and normalisation ------------------------------------------------

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Softmax along `axis`; only the last axis (or -1) is supported.
Tensor softmax(const Tensor& x, int axis = -1);
/// Per-row normalisation over the last axis followed by gain/bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// Losses (mean over rows) -----------------------------------------------------

/// Mean cross-entropy of logits [m×v] against integer targets in [0, v).
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);
/// Mean binary cross-entropy with logits; logits hold m values, labels ∈ {0,1}.
Tensor bce_with_logits(const Tensor& logits, std::span<const double> labels);

// Indexing --------------------------------------------------------------------

/// Rows of `table` [v×h] selected by ids → [n×h].
Tensor embedding(const Tensor& table, std::span<const int> ids);
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);
/// Row r of the result is taken from `a` when take_a[r] != 0, else from `b`.
Tensor row_blend(const Tensor& a, const Tensor& b, std::span<const std::uint8_t> take_a);
Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end);

// Attention -------------------------------------------------------------------

/// Layout of a padded batch flattened to rows: row b*seq_len + t is token t of
/// sequence b. valid[row] marks non-pad tokens.
struct BatchLayout {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<std::uint8_t> valid;
};

/// Scaled dot-product multi-head attention over q, k, v [batch*seq × h].
/// Invalid key positions receive zero weight.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const BatchLayout& layout,
                 std::size_t heads);

/// Attention probabilities [batch*heads*seq × seq] (row (b*heads + a)*seq + t).
/// Values only; not recorded on the tape.
std::vector<double> attention_probabilities(const Tensor& q, const Tensor& k,
                                            const BatchLayout& layout, std::size_t heads);

}  // namespace modrank::ops
