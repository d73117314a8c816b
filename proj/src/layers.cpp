// Copyright (C) 2026 The vitdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "vitdiff/layers.hpp"

#include <algorithm>
#include <cmath>

namespace vitdiff {

template <typename S>
void Denoiser<S>::check_input(const Var<S>& x_t, std::span<const double> timesteps) const {
  const Index n = image_size();
  if (x_t.rank() != 4 || x_t.dim(1) != 3 || x_t.dim(2) != n || x_t.dim(3) != n) {
    throw ShapeError(name() + ": expected input [B, 3, " + std::to_string(n) + ", " + std::to_string(n) + "], got " +
                     shape_string(x_t.shape()));
  }
  if (static_cast<Index>(timesteps.size()) != x_t.dim(0)) {
    throw ShapeError(name() + ": need one timestep per batch row");
  }
}

template <typename S>
Var<S> split_heads(const Var<S>& x, Index heads) {
  const Index B = x.dim(0), N = x.dim(1), C = x.dim(2);
  if (C % heads) throw ShapeError("split_heads: width not divisible by heads");
  return reshape(permute(reshape(x, {B, N, heads, C / heads}), {0, 2, 1, 3}), {B * heads, N, C / heads});
}

template <typename S>
Var<S> merge_heads(const Var<S>& x, Index heads) {
  const Index G = x.dim(0), N = x.dim(1), d = x.dim(2);
  return reshape(permute(reshape(x, {G / heads, heads, N, d}), {0, 2, 1, 3}), {G / heads, N, heads * d});
}

template <typename S>
Var<S> SelfAttention<S>::operator()(const Var<S>& x, AttentionOptions<S> options) const {
  const Index B = x.dim(0), N = x.dim(1), C = x.dim(2);
  const Index d = C / heads;
  // [B, N, 3, heads, d] -> [3, B, heads, N, d]
  const Var<S> packed = permute(reshape(qkv(x), {B, N, 3, heads, d}), {2, 0, 3, 1, 4});
  auto part = [&](Index i) { return reshape(slice(packed, 0, i, 1), {B * heads, N, d}); };
  options.heads = heads;
  options.scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(d)));
  return proj(merge_heads(attention(part(0), part(1), part(2), options), heads));
}

template <typename S>
Var<S> CrossAttention<S>::operator()(const Var<S>& x, const Var<S>& text,
                                     const std::vector<std::uint8_t>& key_mask) const {
  const Index B = x.dim(0), L = text.dim(1), C = x.dim(2);
  if (text.rank() != 3 || text.dim(0) != B) throw ShapeError("cross-attention: text must be [B, L, D]");
  if (text.dim(2) != kv.in_features()) {
    throw ShapeError("cross-attention: text width " + std::to_string(text.dim(2)) + " does not match configured " +
                     std::to_string(kv.in_features()));
  }
  const Index d = C / heads;
  const Var<S> packed = permute(reshape(kv(text), {B, L, 2, heads, d}), {2, 0, 3, 1, 4});
  auto part = [&](Index i) { return reshape(slice(packed, 0, i, 1), {B * heads, L, d}); };
  AttentionOptions<S> options;
  options.heads = heads;
  options.scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(d)));
  options.key_mask = &key_mask;
  Var<S> out = proj(merge_heads(attention(split_heads(q(x), heads), part(0), part(1), options), heads));
  // A sample with no valid text token contributes nothing, projection bias included.
  std::vector<bool> empty(static_cast<std::size_t>(B), true);
  for (Index b = 0; b < B; ++b)
    for (Index l = 0; l < L; ++l)
      if (key_mask.at(static_cast<std::size_t>(b * L + l))) empty[static_cast<std::size_t>(b)] = false;
  if (std::find(empty.begin(), empty.end(), true) == empty.end()) return out;
  const Index N = x.dim(1);
  Tensor<S> keep(out.shape(), S(1));
  for (Index b = 0; b < B; ++b)
    if (empty[static_cast<std::size_t>(b)]) std::fill_n(keep.data() + b * N * C, N * C, S(0));
  return mul(out, constant(std::move(keep)));
}

#define VITDIFF_INSTANTIATE_LAYERS(S)                   \
  template class Denoiser<S>;                           \
  template Var<S> split_heads(const Var<S>&, Index);    \
  template Var<S> merge_heads(const Var<S>&, Index);    \
  template struct SelfAttention<S>;                     \
  template struct CrossAttention<S>;

VITDIFF_INSTANTIATE_LAYERS(float)
VITDIFF_INSTANTIATE_LAYERS(double)

}  // namespace vitdiff
