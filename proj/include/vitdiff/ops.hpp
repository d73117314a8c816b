// Copyright (C) 2026 The vitdiff Authors
// SPDX-License-Identifier: Apache-2.0

// Differentiable tensor operations. Every op is a free function over Var<S>
// with its adjoint recorded in the dynamic graph; S is float or double.

#pragma once

#include "vitdiff/autograd.hpp"

#include <cstdint>
#include <vector>

namespace vitdiff {

// Elementwise (identical shapes).
template <typename S> Var<S> add(const Var<S>& a, const Var<S>& b);
template <typename S> Var<S> sub(const Var<S>& a, const Var<S>& b);
template <typename S> Var<S> mul(const Var<S>& a, const Var<S>& b);
template <typename S> Var<S> scale(const Var<S>& a, S factor);
template <typename S> Var<S> silu(const Var<S>& x);
template <typename S> Var<S> gelu(const Var<S>& x);

/// x + b where b's shape equals the trailing dimensions of x.
template <typename S> Var<S> add_broadcast(const Var<S>& x, const Var<S>& b);

template <typename S> Var<S> sum(const Var<S>& x);
template <typename S> Var<S> mean(const Var<S>& x);
/// Mean squared error over all elements.
template <typename S> Var<S> mse(const Var<S>& prediction, const Var<S>& target);

// Layout.
template <typename S> Var<S> reshape(const Var<S>& x, Shape shape);
template <typename S> Var<S> permute(const Var<S>& x, const std::vector<int>& perm);
template <typename S> Var<S> concat(const std::vector<Var<S>>& parts, int axis);
template <typename S> Var<S> slice(const Var<S>& x, int axis, Index start, Index length);
/// Cyclic shift of a [B, H, W, C] map; positive shifts move content toward higher indices.
template <typename S> Var<S> roll2d(const Var<S>& x, Index shift_h, Index shift_w);
/// Nearest-neighbour 2x upsampling of an NCHW map.
template <typename S> Var<S> upsample_nearest2x(const Var<S>& x);

// Layers.
/// y = x W^T + b over the last axis; W is [out, in], b is [out] or undefined.
template <typename S> Var<S> linear(const Var<S>& x, const Var<S>& weight, const Var<S>& bias);
/// Normalizes over the last axis. gamma/beta may be undefined (no affine).
template <typename S>
Var<S> layer_norm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, S eps = S(1e-6));
template <typename S>
Var<S> group_norm(const Var<S>& x, Index groups, const Var<S>& gamma, const Var<S>& beta, S eps = S(1e-5));
/// NCHW convolution with square kernel [Cout, Cin, k, k].
template <typename S>
Var<S> conv2d(const Var<S>& x, const Var<S>& weight, const Var<S>& bias, Index stride, Index padding);
/// Per-channel convolution, kernel [C, k, k], zero padding.
template <typename S>
Var<S> depthwise_conv2d(const Var<S>& x, const Var<S>& weight, const Var<S>& bias, Index padding);

enum class ChannelAxis { First, Last };
/// x * (1 + scale) + shift with scale/shift of shape [B, C] broadcast over
/// every non-batch, non-channel position.
template <typename S>
Var<S> modulate(const Var<S>& x, const Var<S>& scale, const Var<S>& shift, ChannelAxis axis);

/// Row lookup: table [R, C], result [indices.size(), C].
template <typename S> Var<S> gather_rows(const Var<S>& table, const std::vector<Index>& indices);

/// Inverted dropout; identity when p == 0.
template <typename S> Var<S> dropout(const Var<S>& x, S p, Rng& rng);

template <typename S>
struct AttentionOptions {
  Index heads = 1;      // group g uses head g % heads and batch row g / heads
  S scale = S(1);
  Var<S> bias;          // optional additive [heads, Nq, Nk]
  const Tensor<S>* additive_mask = nullptr;             // optional [M, Nq, Nk], row (g / heads) % M
  const std::vector<std::uint8_t>* key_mask = nullptr;  // optional [G / heads, Nk], 0 = ignore key
  Tensor<S>* probabilities = nullptr;                   // optional output [G, Nq, Nk]
};

/// softmax(scale * q k^T + bias + mask) v over groups.
/// q: [G, Nq, d], k: [G, Nk, d], v: [G, Nk, dv]. A query with every key
/// masked yields a zero output row.
template <typename S>
Var<S> attention(const Var<S>& q, const Var<S>& k, const Var<S>& v, const AttentionOptions<S>& options);

#define VITDIFF_DECLARE_OPS(S)                                                                        \
  extern template Var<S> add(const Var<S>&, const Var<S>&);                                          \
  extern template Var<S> sub(const Var<S>&, const Var<S>&);                                          \
  extern template Var<S> mul(const Var<S>&, const Var<S>&);                                          \
  extern template Var<S> scale(const Var<S>&, S);                                                    \
  extern template Var<S> silu(const Var<S>&);                                                        \
  extern template Var<S> gelu(const Var<S>&);                                                        \
  extern template Var<S> add_broadcast(const Var<S>&, const Var<S>&);                                \
  extern template Var<S> sum(const Var<S>&);                                                         \
  extern template Var<S> mean(const Var<S>&);                                                        \
  extern template Var<S> mse(const Var<S>&, const Var<S>&);                                          \
  extern template Var<S> reshape(const Var<S>&, Shape);                                              \
  extern template Var<S> permute(const Var<S>&, const std::vector<int>&);                            \
  extern template Var<S> concat(const std::vector<Var<S>>&, int);                                    \
  extern template Var<S> slice(const Var<S>&, int, Index, Index);                                    \
  extern template Var<S> roll2d(const Var<S>&, Index, Index);                                        \
  extern template Var<S> upsample_nearest2x(const Var<S>&);                                          \
  extern template Var<S> linear(const Var<S>&, const Var<S>&, const Var<S>&);                        \
  extern template Var<S> layer_norm(const Var<S>&, const Var<S>&, const Var<S>&, S);                 \
  extern template Var<S> group_norm(const Var<S>&, Index, const Var<S>&, const Var<S>&, S);          \
  extern template Var<S> conv2d(const Var<S>&, const Var<S>&, const Var<S>&, Index, Index);          \
  extern template Var<S> depthwise_conv2d(const Var<S>&, const Var<S>&, const Var<S>&, Index);       \
  extern template Var<S> modulate(const Var<S>&, const Var<S>&, const Var<S>&, ChannelAxis);         \
  extern template Var<S> gather_rows(const Var<S>&, const std::vector<Index>&);                      \
  extern template Var<S> dropout(const Var<S>&, S, Rng&);                                            \
  extern template Var<S> attention(const Var<S>&, const Var<S>&, const Var<S>&,                      \
                                   const AttentionOptions<S>&);

VITDIFF_DECLARE_OPS(float)
VITDIFF_DECLARE_OPS(double)
#undef VITDIFF_DECLARE_OPS

}  // namespace vitdiff
