#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mmbert/random.h"
#include "mmbert/tensor.h"

// Differentiable tensor operations. Every op validates its shapes, checks its
// output for NaN/Inf, and records a backward rule on the active tape when an
// input requires a gradient. Reductions use a fixed left-to-right order so
// results are bitwise reproducible.
namespace mmbert::ops {

inline constexpr int kIgnoreIndex = -100;

// [m x k] . [k x n] -> [m x n]
Tensor matmul(const Tensor& a, const Tensor& b);
// 2-D transpose.
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
// x[..., n] + bias[n]: the only broadcast supported.
Tensor add_bias(const Tensor& x, const Tensor& bias);
// x . w + b for 2-D x.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor softmax(const Tensor& x, std::size_t axis);
// Softmax over the last axis where columns with key_valid[j] == 0 receive
// exactly zero probability (equivalent to -inf logits).
Tensor masked_softmax(const Tensor& x, std::span<const std::uint8_t> key_valid);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);
Tensor gelu(const Tensor& x, bool exact = false);

// Mean negative log-likelihood over rows whose target != ignore_index.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                     int ignore_index = kIgnoreIndex);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// Row gather from a 2-D table: embedding lookup and row selection.
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> rows);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count);
// Mean over rows with row_valid[i] != 0 -> [1 x n].
Tensor masked_mean_rows(const Tensor& x, std::span<const std::uint8_t> row_valid);

// Inverted dropout; identity when rate == 0.
Tensor dropout(const Tensor& x, double rate, Rng& rng);

// x[C x H x W], weight[O x C x k x k], bias[O] -> [O x Ho x Wo]; square
// kernels, zero padding.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride,
              std::size_t padding);
// [C x H x W] -> [1 x C]
Tensor global_avg_pool(const Tensor& x);

}  // namespace mmbert::ops
