// Copyright (C) 2026 The vitdiff Authors
// SPDX-License-Identifier: Apache-2.0

// Plain-ViT denoiser: patch tokens plus a time token (and optional label
// token), pre-norm blocks with separate self/cross-attention and a
// depthwise-convolution FFN, long skips between symmetric blocks, and a
// rearrange-then-convolve prediction head.

#pragma once

#include "vitdiff/layers.hpp"

namespace vitdiff {

enum class HeadMode { RearrangeFirst, LinearFirst };

struct IUViTConfig {
  Index image_size = 32;
  Index patch_size = 2;
  Index depth = 13;
  Index hidden_size = 512;
  Index num_heads = 8;
  Index mlp_ratio = 4;
  bool use_dwconv_ffn = true;
  HeadMode head_mode = HeadMode::RearrangeFirst;
  bool cross_attention = false;
  Index text_width = 0;
  Index text_context = 0;
  Index num_classes = 0;  // 0 disables the label token

  Index grid() const { return image_size / patch_size; }
  Index num_patches() const { return grid() * grid(); }
  Index extra_tokens() const { return 1 + (num_classes > 0 ? 1 : 0); }
  Index skip_pairs() const { return depth / 2; }

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
};

// Layout helpers. Patches are row-major over the grid; inside a patch the
// feature order is (channel, dy, dx).

/// [B, Ch, H, W] -> [B, (H/p)(W/p), Ch p^2].
template <typename S>
Var<S> patchify(const Var<S>& x, Index p);
/// [B, N, Ch p^2] -> [B, Ch, grid p, grid p]; the inverse of patchify. Also the
/// rearrange-first head layout: token channel c lands on output channel c / p^2
/// at in-patch offset (dy, dx) = ((c % p^2) / p, c % p).
template <typename S>
Var<S> unpatchify(const Var<S>& tokens, Index p, Index grid);

/// Linear(C, rC) -> [depthwise 3x3 over the image tokens] -> GELU -> Linear(rC, C).
/// The first `extra` tokens skip the convolution.
template <typename S>
struct ConvFeedForward {
  Linear<S> fc1;
  Parameter<S>* dw_weight = nullptr;  // [rC, 3, 3]
  Parameter<S>* dw_bias = nullptr;
  Linear<S> fc2;

  ConvFeedForward() = default;
  ConvFeedForward(const ParamScope<S>& scope, Index channels, Index hidden, bool dwconv);

  bool has_dwconv() const { return dw_weight != nullptr; }
  Var<S> operator()(const Var<S>& x, Index extra, Index grid_h, Index grid_w) const;
};

template <typename S>
struct IUViTBlock {
  LayerNorm<S> norm1;
  SelfAttention<S> attn;
  LayerNorm<S> norm2;
  CrossAttention<S> cross;
  bool has_cross = false;
  LayerNorm<S> norm3;
  ConvFeedForward<S> ffn;
  Linear<S> skip_proj;  // 2C -> C, only on blocks after the middle one
  bool has_skip = false;

  IUViTBlock() = default;
  IUViTBlock(const ParamScope<S>& scope, const IUViTConfig& cfg, bool long_skip);

  /// `text` is null when cross-attention is disabled.
  Var<S> operator()(Var<S> x, const typename TextConditioner<S>::Context* text, Index extra, Index grid) const;
  /// concat[deep, shallow] along channels, projected back to C.
  Var<S> merge_skip(const Var<S>& deep, const Var<S>& shallow) const;
};

template <typename S>
class IUViT final : public Denoiser<S> {
 public:
  IUViT(const IUViTConfig& config, std::uint64_t seed, bool materialize = true);

  Var<S> forward(const Var<S>& x_t, std::span<const double> timesteps, const ConditioningBundle<S>* cond,
                 const ForwardOptions& options = {}) const override;
  Index image_size() const override { return config_.image_size; }
  std::string name() const override { return "iuvit"; }

  const IUViTConfig& config() const { return config_; }
  const std::vector<IUViTBlock<S>>& blocks() const { return blocks_; }
  std::vector<IUViTBlock<S>>& blocks() { return blocks_; }
  const Conv2d<S>& head_conv() const { return head_conv_; }

  /// Token features ahead of the prediction head, image tokens only: [B, N, C].
  Var<S> features(const Var<S>& x_t, std::span<const double> timesteps, const ConditioningBundle<S>* cond) const;
  /// Image tokens [B, N, C] -> [B, 3, H, W].
  Var<S> head(const Var<S>& tokens) const;

 private:
  IUViTConfig config_;
  Linear<S> patch_embed_;
  Parameter<S>* pos_embed_ = nullptr;
  TimestepEmbedder<S> time_embed_;
  LabelEmbedding<S> label_embed_;
  TextConditioner<S> text_;
  std::vector<IUViTBlock<S>> blocks_;
  LayerNorm<S> final_norm_;
  Linear<S> head_linear_;  // LinearFirst only
  Conv2d<S> head_conv_;
};

#define VITDIFF_DECLARE_IUVIT(S)                              \
  extern template Var<S> patchify(const Var<S>&, Index);      \
  extern template Var<S> unpatchify(const Var<S>&, Index, Index); \
  extern template struct ConvFeedForward<S>;                  \
  extern template struct IUViTBlock<S>;                       \
  extern template class IUViT<S>;

VITDIFF_DECLARE_IUVIT(float)
VITDIFF_DECLARE_IUVIT(double)
#undef VITDIFF_DECLARE_IUVIT

}  // namespace vitdiff
