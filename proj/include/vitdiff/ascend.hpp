// Copyright (C) 2026 The vitdiff Authors
// SPDX-License-Identifier: Apache-2.0

// Hierarchical encoder-decoder denoiser: shifted-window transformer encoder
// with residual down-sampling, a convolutional residual decoder with residual
// up-sampling, and skips from every encoder block into the decoder.

#pragma once

#include "vitdiff/layers.hpp"

namespace vitdiff {

enum class BlockKind { Swin, Conv };
enum class ResampleMode { Residual, PatchMergeExpand };
enum class SkipMode { Dense, Reduced };

struct ASCENDConfig {
  Index image_size = 32;
  Index base_channels = 128;
  Index depth_per_stage = 3;
  std::vector<Index> channel_mult{1, 2, 2, 2};
  Index head_channels = 64;
  std::vector<Index> attention_resolutions{16, 8};
  Index window_size = 8;
  double dropout = 0.1;
  BlockKind encoder_block = BlockKind::Swin;
  BlockKind decoder_block = BlockKind::Conv;
  ResampleMode resample_mode = ResampleMode::Residual;
  SkipMode skip_mode = SkipMode::Dense;
  bool cross_attention = false;
  Index text_width = 0;
  Index text_context = 0;
  Index num_classes = 0;

  Index num_stages() const { return static_cast<Index>(channel_mult.size()); }
  Index stage_channels(Index s) const { return base_channels * channel_mult.at(static_cast<std::size_t>(s)); }
  Index stage_resolution(Index s) const { return image_size >> s; }
  Index embed_dim() const { return 4 * base_channels; }
  bool attends_at(Index resolution) const;
  Index effective_window(Index resolution) const { return std::min(window_size, resolution); }
  /// Which block kind a stage at `resolution` uses for the given side.
  BlockKind block_at(BlockKind side, Index resolution) const {
    return side == BlockKind::Swin && attends_at(resolution) ? BlockKind::Swin : BlockKind::Conv;
  }

  void validate() const;
};

/// ADM-style residual block with scale-shift timestep conditioning.
template <typename S>
struct ResBlock {
  GroupNorm<S> norm1;
  Conv2d<S> conv1;
  Linear<S> emb_proj;  // temb -> 2 * out
  GroupNorm<S> norm2;
  Conv2d<S> conv2;     // zero-initialized
  Conv2d<S> skip;      // 1x1, only when channels change
  bool has_skip = false;
  double dropout_p = 0.0;

  ResBlock() = default;
  ResBlock(const ParamScope<S>& scope, Index in, Index out, Index emb_dim, double dropout);
  Var<S> operator()(const Var<S>& x, const Var<S>& temb, const ForwardOptions& options) const;
};

/// Relative-position-biased multi-head attention inside (optionally shifted)
/// square windows of a channel-last map [B, H, W, C].
template <typename S>
struct WindowAttention {
  Index heads = 1;
  Index window = 1;
  Linear<S> qkv;
  Linear<S> proj;
  Parameter<S>* bias_table = nullptr;  // [(2w - 1)^2, heads]

  WindowAttention() = default;
  WindowAttention(const ParamScope<S>& scope, Index channels, Index num_heads, Index window_size);

  /// `shift` > 0 rolls the map by -shift before partitioning and masks pairs
  /// that were not neighbours before the roll. `probabilities` receives the
  /// post-softmax weights [B * windows * heads, w^2, w^2] when non-null.
  Var<S> operator()(const Var<S>& x, Index shift, Tensor<S>* probabilities = nullptr) const;
  /// Gathered bias [heads, w^2, w^2].
  Var<S> relative_bias() const;
};

/// Region mask of a shifted-window layer: [windows, w^2, w^2] with 0 for
/// pairs in the same pre-shift region and -inf otherwise.
template <typename S>
Tensor<S> shifted_window_mask(Index height, Index width, Index window, Index shift);

/// [B, H, W, C] -> [B * (H/w)(W/w), w^2, C] and back.
template <typename S>
Var<S> window_partition(const Var<S>& x, Index window);
template <typename S>
Var<S> window_reverse(const Var<S>& windows, Index window, Index height, Index width);

/// One window-attention layer: adaLN -> window attention -> [LN -> cross] -> adaLN -> FFN.
template <typename S>
struct SwinLayer {
  Index shift = 0;
  Linear<S> mod_attn;  // temb -> 2C, zero-initialized
  WindowAttention<S> attn;
  LayerNorm<S> norm_cross;
  CrossAttention<S> cross;
  bool has_cross = false;
  Linear<S> mod_ffn;   // temb -> 2C, zero-initialized
  Linear<S> fc1;
  Linear<S> fc2;

  SwinLayer() = default;
  SwinLayer(const ParamScope<S>& scope, Index channels, Index heads, Index window, Index shift_, Index emb_dim,
            bool cross_attention, Index text_width);
  /// x: [B, H, W, C].
  Var<S> operator()(Var<S> x, const Var<S>& temb, const typename TextConditioner<S>::Context* text) const;
};

/// Unshifted layer followed by a shifted one (the shift is skipped when the
/// map fits in one window). Optional 1x1 input projection for concatenated
/// decoder inputs. Operates on NCHW.
template <typename S>
struct SwinBlock {
  Conv2d<S> in_proj;
  bool has_in_proj = false;
  std::vector<SwinLayer<S>> layers;

  SwinBlock() = default;
  SwinBlock(const ParamScope<S>& scope, Index in, Index channels, Index heads, Index resolution, Index window,
            Index emb_dim, bool cross_attention, Index text_width);
  Var<S> operator()(const Var<S>& x, const Var<S>& temb, const typename TextConditioner<S>::Context* text) const;
};

/// Down (stride-2 conv) or up (nearest 2x + conv) residual resampler with a
/// 1x1 shortcut on the same path.
template <typename S>
struct ResidualResample {
  bool up = false;
  GroupNorm<S> norm1;
  Conv2d<S> conv1;
  GroupNorm<S> norm2;
  Conv2d<S> conv2;  // main-path output conv
  Conv2d<S> shortcut;

  ResidualResample() = default;
  ResidualResample(const ParamScope<S>& scope, Index in, Index out, bool upsample);
  Var<S> operator()(const Var<S>& x) const;
};

/// 2x2 neighbourhood concat (channel index (dx * 2 + dy) * C + c) then Linear(4C, out).
template <typename S>
struct PatchMerge {
  Linear<S> reduction;
  PatchMerge() = default;
  PatchMerge(const ParamScope<S>& scope, Index in, Index out);
  Var<S> operator()(const Var<S>& x) const;
};

/// Linear(in, 4 out) then the inverse 2x2 rearrangement of PatchMerge.
template <typename S>
struct PatchExpand {
  Linear<S> expansion;
  PatchExpand() = default;
  PatchExpand(const ParamScope<S>& scope, Index in, Index out);
  Var<S> operator()(const Var<S>& x) const;
};

/// 2x2 space-to-depth and its inverse with the PatchMerge channel order; NCHW in,
/// channel-last [B, H/2, W/2, 4C] out.
template <typename S>
Var<S> merge_neighbourhoods(const Var<S>& x);
template <typename S>
Var<S> expand_neighbourhoods(const Var<S>& x, Index out_channels);

template <typename S>
class ASCEND final : public Denoiser<S> {
 public:
  ASCEND(const ASCENDConfig& config, std::uint64_t seed, bool materialize = true);

  Var<S> forward(const Var<S>& x_t, std::span<const double> timesteps, const ConditioningBundle<S>* cond,
                 const ForwardOptions& options = {}) const override;
  Index image_size() const override { return config_.image_size; }
  std::string name() const override { return "ascend"; }
  const ASCENDConfig& config() const { return config_; }

  struct Pyramid {
    std::vector<Var<S>> records;            // skip features in production order
    std::vector<Index> record_stage;        // stage index of each record
    Var<S> bottom;                          // lowest-resolution features entering the middle blocks
  };
  Pyramid encode(const Var<S>& x_t, const Var<S>& temb, const typename TextConditioner<S>::Context* text,
                 const ForwardOptions& options) const;
  /// Number of skip concatenations the decoder performs at each stage (index = stage).
  std::vector<Index> decoder_concat_counts() const;

 private:
  struct Block {
    BlockKind kind = BlockKind::Conv;
    ResBlock<S> res;
    SwinBlock<S> swin;
    bool takes_skip = false;
  };
  struct Resample {
    ResidualResample<S> residual;
    PatchMerge<S> merge;
    PatchExpand<S> expand;
  };

  Block make_block(const ParamScope<S>& scope, BlockKind kind, Index in, Index out, Index resolution,
                   bool takes_skip) const;
  Var<S> run_block(const Block& block, const Var<S>& x, const Var<S>& temb,
                   const typename TextConditioner<S>::Context* text, const ForwardOptions& options) const;
  Var<S> run_resample(const Resample& r, const Var<S>& x, bool up) const;
  Var<S> embed_time(std::span<const double> timesteps, const ConditioningBundle<S>* cond, Index batch,
                    typename TextConditioner<S>::Context* text) const;

  ASCENDConfig config_;
  Conv2d<S> stem_;
  TimestepEmbedder<S> time_embed_;
  LabelEmbedding<S> label_embed_;
  TextConditioner<S> text_;
  std::vector<std::vector<Block>> encoder_;   // [stage][block]
  std::vector<Resample> down_;                // stage s -> s + 1
  std::vector<Block> middle_;
  std::vector<std::vector<Block>> decoder_;   // [stage][block]
  std::vector<Resample> up_;                  // stage s -> s - 1 (index s)
  GroupNorm<S> out_norm_;
  Conv2d<S> out_conv_;
};

#define VITDIFF_DECLARE_ASCEND(S)                                                     \
  extern template struct ResBlock<S>;                                                 \
  extern template struct WindowAttention<S>;                                          \
  extern template Tensor<S> shifted_window_mask<S>(Index, Index, Index, Index);       \
  extern template Var<S> window_partition(const Var<S>&, Index);                      \
  extern template Var<S> window_reverse(const Var<S>&, Index, Index, Index);          \
  extern template struct SwinLayer<S>;                                                \
  extern template struct SwinBlock<S>;                                                \
  extern template struct ResidualResample<S>;                                         \
  extern template struct PatchMerge<S>;                                               \
  extern template struct PatchExpand<S>;                                              \
  extern template Var<S> merge_neighbourhoods(const Var<S>&);                         \
  extern template Var<S> expand_neighbourhoods(const Var<S>&, Index);                 \
  extern template class ASCEND<S>;

VITDIFF_DECLARE_ASCEND(float)
VITDIFF_DECLARE_ASCEND(double)
#undef VITDIFF_DECLARE_ASCEND

}  // namespace vitdiff
