#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "stagesum/random.hpp"
#include "stagesum/tensor.hpp"

// Differentiable operations. Every op checks shapes, throws DimensionError
// naming the offending shapes, and records a backward function when any
// input requires a gradient.

namespace stagesum {

/// Additive logit offset used to switch attention positions off.
inline constexpr double kMaskOffset = -10000.0;

Tensor matmul(const Tensor& a, const Tensor& b);
/// a · bᵀ for a [m×k], b [n×k].
Tensor matmul_transposed(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
/// x [..., n] + bias [n], broadcast over the leading axes.
Tensor add_bias(const Tensor& x, const Tensor& bias);

Tensor sigmoid(const Tensor& x);
/// Exact (erf-based) GELU.
Tensor gelu(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// Softmax along `axis` with max subtraction. NaN inputs raise NumericError.
Tensor softmax(const Tensor& x, std::size_t axis);

/// Normalises the last axis to zero mean / unit variance, then applies the
/// affine gain and bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);

/// Zeroes whole rows of x [rows×hidden] with probability `rate` and scales the
/// survivors by 1/(1-rate). Returns x itself when rate is 0.
Tensor dropout_tokens(const Tensor& x, double rate, Rng& rng);

/// Rows of table [n×d] selected by ids -> [ids.size()×d].
Tensor gather_rows(const Tensor& table, std::span<const int> ids);
/// First `count` rows of table.
Tensor leading_rows(const Tensor& table, std::size_t count);
Tensor concat_rows(const Tensor& top, const Tensor& bottom);

/// Scaled dot-product logits per head: q [Tq×H], k [Tk×H] -> [heads×Tq×Tk],
/// each head using its H/heads slice and scaled by 1/sqrt(H/heads).
Tensor attention_logits(const Tensor& q, const Tensor& k, std::size_t heads);
/// logits [heads×Tq×Tk] + offsets [Tq×Tk] (constant, broadcast over heads).
Tensor add_attention_offsets(const Tensor& logits, const Tensor& offsets);
/// probs [heads×Tq×Tk] applied to v [Tk×H] -> concatenated heads [Tq×H].
Tensor attention_context(const Tensor& probs, const Tensor& v);
/// One head's slice [Tq×Tk] of a [heads×Tq×Tk] tensor.
Tensor select_head(const Tensor& logits, std::size_t head);

/// Scatter-adds columns of a [T×S] into a [T×vocab] zero tensor at column
/// ids[s]; positions with include[s] == false are skipped. This is the
/// product a·X with X the one-hot matrix of the ids, never materialised.
Tensor scatter_columns(const Tensor& a, std::span<const int> ids, std::span<const std::uint8_t> include,
                       std::size_t vocab);

/// gate [T×1] · y [T×V] + (1 - gate) · c [T×V], gate broadcast along rows.
Tensor mix_rows(const Tensor& gate, const Tensor& y, const Tensor& c);

/// Sum over rows t with include[t] of -log(max(probs[t, targets[t]], 1e-30)).
/// Each clamped probability increments *clamped when provided.
Tensor nll_sum(const Tensor& probs, std::span<const int> targets, std::span<const std::uint8_t> include,
               std::size_t* clamped = nullptr);

/// Mean binary cross-entropy of probabilities p [n] against labels over
/// positions with include[i]; logs are clamped at 1e-30.
Tensor binary_cross_entropy(const Tensor& p, std::span<const double> labels,
                            std::span<const std::uint8_t> include);

}  // namespace stagesum
