#pragma once

// Differentiable tensor ops. Every op validates shapes and precision, computes
// its forward in the inputs' precision and, under grad mode, records a backward.

#include <cstdint>
#include <span>

#include "lpa/tensor.hpp"

namespace lpa {

using TokenId = std::int32_t;

/// [m×k]·[k×n] -> [m×n]. Adds m·k·n to the FlopCounter.
Tensor matmul(const Tensor& a, const Tensor& b);
/// [m×k]·[n×k]ᵀ -> [m×n].
Tensor matmul_nt(const Tensor& a, const Tensor& b);
/// Batched [N×m×k]·[N×k×n] -> [N×m×n].
Tensor bmm(const Tensor& a, const Tensor& b);
/// Batched [N×m×k]·[N×n×k]ᵀ -> [N×m×n].
Tensor bmm_nt(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);

Tensor relu(const Tensor& x);
Tensor silu(const Tensor& x);

/// Softmax over the last axis of a [...×L×L] score tensor, stabilized by
/// row-max subtraction. With `causal`, row i is normalized over columns j <= i
/// and columns j > i are exactly zero.
Tensor masked_softmax(const Tensor& scores, bool causal = true);

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);
Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps);

/// Mean negative log-likelihood of `targets` under row-wise softmax(logits).
Tensor cross_entropy(const Tensor& logits, std::span<const TokenId> targets);

/// Row gather: out[i] = weight[ids[i]].
Tensor embedding(const Tensor& weight, std::span<const TokenId> ids);

/// [B·T × H·dh] -> [B·H × T × dh].
Tensor split_heads(const Tensor& x, std::size_t batch, std::size_t seq, std::size_t heads);
/// [B·H × T × dh] -> [B·T × H·dh].
Tensor merge_heads(const Tensor& x, std::size_t batch, std::size_t heads);

/// Rotary position rotation of adjacent pairs along the last axis of a
/// [N×T×dh] tensor, position t = row index within the sequence.
Tensor rotary(const Tensor& x, double base = 10000.0);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);

}  // namespace lpa
