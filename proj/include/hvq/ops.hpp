#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "hvq/rng.hpp"
#include "hvq/tensor.hpp"

// Differentiable ops. Every op checks its output for NaN/Inf and throws
// NumericError; every op records its backward on the tape when an input
// requires grad.
namespace hvq::ops {

using Index = std::int32_t;

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& a, real factor);
Tensor square(Tape& tape, const Tensor& a);
Tensor relu(Tape& tape, const Tensor& a);
Tensor tanh(Tape& tape, const Tensor& a);
Tensor sigmoid(Tape& tape, const Tensor& a);

Tensor sum(Tape& tape, const Tensor& a);
Tensor mean(Tape& tape, const Tensor& a);
// mean((a - b)^2) over all elements.
Tensor mse(Tape& tape, const Tensor& a, const Tensor& b);

// Forward identity, zero gradient to the argument.
Tensor stop_gradient(Tape& tape, const Tensor& a);

Tensor reshape(Tape& tape, const Tensor& a, Shape shape);

// x[B,C,...] + bias[C]
Tensor add_channel_bias(Tape& tape, const Tensor& x, const Tensor& bias);
// x[B,C,H,W] + v[B,C], constant over space.
Tensor add_batch_channel(Tape& tape, const Tensor& x, const Tensor& v);
// x[B,...] + y[...], y shared by every batch entry.
Tensor add_broadcast_batch(Tape& tape, const Tensor& x, const Tensor& y);

/// 2-D cross-correlation. x[B,C,H,W], kernel[O,C,k,k] -> [B,O,H',W'] with
/// H' = floor((H + 2*padding - k) / stride) + 1.
Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& kernel, int stride, int padding);

/// Adjoint of conv2d with the same kernel. x[B,C,H,W], kernel[C,O,k,k] ->
/// [B,O,H',W'] with H' = (H - 1)*stride - 2*padding + k.
Tensor conv_transpose2d(Tape& tape, const Tensor& x, const Tensor& kernel, int stride, int padding);

Tensor concat_channels(Tape& tape, std::span<const Tensor> parts);
Tensor slice_channels(Tape& tape, const Tensor& x, std::size_t start, std::size_t count);

// table[K,C] gathered at indices laid out [B,H,W] -> [B,C,H,W].
Tensor embedding(Tape& tape, const Tensor& table, std::span<const Index> indices, std::size_t batch,
                 std::size_t height, std::size_t width);
// table[K,C] gathered at indices [N] -> [N,C].
Tensor embedding_rows(Tape& tape, const Tensor& table, std::span<const Index> indices);

// [B,C,H,W] <-> [B,H*W,C]
Tensor nchw_to_nlc(Tape& tape, const Tensor& x);
Tensor nlc_to_nchw(Tape& tape, const Tensor& x, std::size_t height, std::size_t width);

// x[..., Cin] @ w[Cin, Cout] (+ b[Cout])
Tensor linear(Tape& tape, const Tensor& x, const Tensor& w, const Tensor* bias = nullptr);

// [B,T,h*d] <-> [B*h,T,d]
Tensor split_heads(Tape& tape, const Tensor& x, std::size_t heads);
Tensor merge_heads(Tape& tape, const Tensor& x, std::size_t heads);

// Batched matmul a[G,M,K] @ b[G,K,N], or a @ b^T with b[G,N,K].
Tensor bmm(Tape& tape, const Tensor& a, const Tensor& b, bool transpose_b = false);

// Row softmax over the last axis of x[G,T,T] with entries j > i masked out.
Tensor causal_softmax(Tape& tape, const Tensor& x);
// Row softmax over the last axis.
Tensor softmax(Tape& tape, const Tensor& x);

// Elementwise inverted dropout. Identity when p == 0.
Tensor dropout(Tape& tape, const Tensor& x, real p, Rng& rng);

// Mean over rows of -log softmax(logits)[row, target].
Tensor softmax_cross_entropy(Tape& tape, const Tensor& logits, std::span<const Index> targets);

// [B,C,H,W] -> [B,C]
Tensor global_avg_pool(Tape& tape, const Tensor& x);

}  // namespace hvq::ops
