// Copyright (C) 2026 The vitdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "vitdiff/ascend.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace vitdiff {

namespace {

void require(bool ok, const std::string& field, const std::string& message) {
  if (!ok) throw std::invalid_argument("backbone." + field + ": " + message);
}

template <typename S>
std::pair<Var<S>, Var<S>> split_scale_shift(const Var<S>& modulation, Index channels) {
  return {slice(modulation, 1, 0, channels), slice(modulation, 1, channels, channels)};
}

}  // namespace

bool ASCENDConfig::attends_at(Index resolution) const {
  return std::find(attention_resolutions.begin(), attention_resolutions.end(), resolution) !=
         attention_resolutions.end();
}

void ASCENDConfig::validate() const {
  require(image_size > 0, "image_size", "must be positive");
  require(base_channels > 0, "base_channels", "must be positive");
  require(depth_per_stage > 0, "depth_per_stage", "must be positive");
  require(!channel_mult.empty(), "channel_mult", "needs at least one stage");
  for (Index m : channel_mult) require(m > 0, "channel_mult", "entries must be positive");
  const Index factor = Index{1} << (num_stages() - 1);
  require(image_size % factor == 0, "image_size",
          std::to_string(image_size) + " is not divisible by 2^(stages - 1) = " + std::to_string(factor));
  require(head_channels > 0, "head_channels", "must be positive");
  require(window_size > 0, "window_size", "must be positive");
  require(dropout >= 0.0 && dropout < 1.0, "dropout", "must lie in [0, 1)");
  for (Index r : attention_resolutions) {
    bool found = false;
    for (Index s = 0; s < num_stages(); ++s) found = found || stage_resolution(s) == r;
    require(found, "attention_resolutions",
            "resolution " + std::to_string(r) + " is not produced by any stage of a " + std::to_string(image_size) +
                "px model with " + std::to_string(num_stages()) + " stages");
  }
  for (Index s = 0; s < num_stages(); ++s) {
    const Index res = stage_resolution(s);
    const bool swin = block_at(encoder_block, res) == BlockKind::Swin || block_at(decoder_block, res) == BlockKind::Swin;
    if (!swin) continue;
    require(stage_channels(s) % head_channels == 0, "head_channels",
            "stage " + std::to_string(s) + " width " + std::to_string(stage_channels(s)) +
                " is not divisible by head_channels " + std::to_string(head_channels));
    const Index w = effective_window(res);
    require(res % w == 0, "window_size",
            "window " + std::to_string(w) + " does not divide the " + std::to_string(res) + "px feature map");
    require(res == w || w % 2 == 0, "window_size", "shifted windows need an even window size");
  }
  if (cross_attention) {
    require(text_width > 0, "text_width", "must be positive when cross_attention is enabled");
    require(text_context > 0, "text_context", "must be positive when cross_attention is enabled");
  }
  require(num_classes >= 0, "num_classes", "must be >= 0");
}

// ------------------------------------------------------------ building blocks

template <typename S>
ResBlock<S>::ResBlock(const ParamScope<S>& scope, Index in, Index out, Index emb_dim, double dropout)
    : norm1(scope.sub("norm1"), in),
      conv1(scope.sub("conv1"), in, out, 3),
      emb_proj(scope.sub("emb_proj"), emb_dim, 2 * out),
      norm2(scope.sub("norm2"), out),
      conv2(scope.sub("conv2"), out, out, 3, 1, true),
      has_skip(in != out),
      dropout_p(dropout) {
  if (has_skip) skip = Conv2d<S>(scope.sub("skip"), in, out, 1);
}

template <typename S>
Var<S> ResBlock<S>::operator()(const Var<S>& x, const Var<S>& temb, const ForwardOptions& options) const {
  const Index out = conv1.weight->shape()[0];
  Var<S> h = conv1(silu(norm1(x)));
  const auto [scale_, shift_] = split_scale_shift(emb_proj(silu(temb)), out);
  h = silu(modulate(norm2(h), scale_, shift_, ChannelAxis::First));
  if (options.training && dropout_p > 0.0) {
    if (!options.rng) throw std::invalid_argument("ResBlock: training with dropout needs an rng");
    h = dropout(h, static_cast<S>(dropout_p), *options.rng);
  }
  return add(has_skip ? skip(x) : x, conv2(h));
}

template <typename S>
Var<S> window_partition(const Var<S>& x, Index window) {
  const Index B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  if (H % window || W % window) {
    throw ShapeError("window partition: " + std::to_string(H) + "x" + std::to_string(W) + " map not divisible by window " +
                     std::to_string(window));
  }
  return reshape(permute(reshape(x, {B, H / window, window, W / window, window, C}), {0, 1, 3, 2, 4, 5}),
                 {B * (H / window) * (W / window), window * window, C});
}

template <typename S>
Var<S> window_reverse(const Var<S>& windows, Index window, Index height, Index width) {
  const Index C = windows.dim(2);
  const Index B = windows.dim(0) / ((height / window) * (width / window));
  return reshape(permute(reshape(windows, {B, height / window, width / window, window, window, C}), {0, 1, 3, 2, 4, 5}),
                 {B, height, width, C});
}

template <typename S>
Tensor<S> shifted_window_mask(Index height, Index width, Index window, Index shift) {
  auto region = [&](Index v, Index extent) { return v < extent - window ? 0 : (v < extent - shift ? 1 : 2); };
  const Index nh = height / window, nw = width / window, n = window * window;
  Tensor<S> mask({nh * nw, n, n});
  std::vector<Index> labels(static_cast<std::size_t>(n));
  for (Index wy = 0; wy < nh; ++wy)
    for (Index wx = 0; wx < nw; ++wx) {
      for (Index i = 0; i < n; ++i) {
        const Index y = wy * window + i / window, x = wx * window + i % window;
        labels[i] = region(y, height) * 3 + region(x, width);
      }
      S* m = mask.data() + (wy * nw + wx) * n * n;
      for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < n; ++j)
          m[i * n + j] = labels[i] == labels[j] ? S(0) : -std::numeric_limits<S>::infinity();
    }
  return mask;
}

template <typename S>
WindowAttention<S>::WindowAttention(const ParamScope<S>& scope, Index channels, Index num_heads, Index window_size)
    : heads(num_heads),
      window(window_size),
      qkv(scope.sub("qkv"), channels, 3 * channels, true),
      proj(scope.sub("proj"), channels, channels),
      bias_table(&scope.create("relative_bias", {(2 * window_size - 1) * (2 * window_size - 1), num_heads},
                               InitSpec::zeros())) {}

template <typename S>
Var<S> WindowAttention<S>::relative_bias() const {
  const Index n = window * window, span = 2 * window - 1;
  std::vector<Index> index(static_cast<std::size_t>(n * n));
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < n; ++j) {
      const Index dy = i / window - j / window + window - 1;
      const Index dx = i % window - j % window + window - 1;
      index[i * n + j] = dy * span + dx;
    }
  return reshape(permute(gather_rows(bias_table->var(), index), {1, 0}), {heads, n, n});
}

template <typename S>
Var<S> WindowAttention<S>::operator()(const Var<S>& x, Index shift, Tensor<S>* probabilities) const {
  const Index H = x.dim(1), W = x.dim(2), C = x.dim(3);
  const Index d = C / heads, n = window * window;
  Var<S> shifted = shift ? roll2d(x, -shift, -shift) : x;
  const Var<S> tokens = window_partition(shifted, window);
  const Index G = tokens.dim(0);
  const Var<S> packed = permute(reshape(qkv(tokens), {G, n, 3, heads, d}), {2, 0, 3, 1, 4});
  auto part = [&](Index i) { return reshape(slice(packed, 0, i, 1), {G * heads, n, d}); };

  Tensor<S> mask;
  AttentionOptions<S> options;
  options.heads = heads;
  options.scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(d)));
  options.bias = relative_bias();
  if (shift) {
    mask = shifted_window_mask<S>(H, W, window, shift);
    options.additive_mask = &mask;
  }
  options.probabilities = probabilities;
  const Var<S> out = proj(merge_heads(attention(part(0), part(1), part(2), options), heads));
  shifted = window_reverse(out, window, H, W);
  return shift ? roll2d(shifted, shift, shift) : shifted;
}

template <typename S>
SwinLayer<S>::SwinLayer(const ParamScope<S>& scope, Index channels, Index heads, Index window, Index shift_,
                        Index emb_dim, bool cross_attention, Index text_width)
    : shift(shift_),
      mod_attn(scope.sub("mod_attn"), emb_dim, 2 * channels, true, InitSpec::zeros()),
      attn(scope.sub("attn"), channels, heads, window),
      has_cross(cross_attention),
      mod_ffn(scope.sub("mod_ffn"), emb_dim, 2 * channels, true, InitSpec::zeros()),
      fc1(scope.sub("fc1"), channels, 4 * channels),
      fc2(scope.sub("fc2"), 4 * channels, channels) {
  if (has_cross) {
    norm_cross = LayerNorm<S>(scope.sub("norm_cross"), channels);
    cross = CrossAttention<S>(scope.sub("cross_attn"), channels, text_width, heads);
  }
}

template <typename S>
Var<S> SwinLayer<S>::operator()(Var<S> x, const Var<S>& temb,
                                const typename TextConditioner<S>::Context* text) const {
  const Index B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  const Var<S> act = silu(temb);
  const Var<S> none;
  {
    const auto [sc, sh] = split_scale_shift(mod_attn(act), C);
    x = add(x, attn(modulate(layer_norm(x, none, none), sc, sh, ChannelAxis::Last), shift));
  }
  if (has_cross) {
    if (!text) throw std::logic_error("swin layer: cross-attention enabled but no text context");
    Var<S> flat = reshape(x, {B, H * W, C});
    flat = add(flat, cross(norm_cross(flat), text->sequence, text->key_mask));
    x = reshape(flat, {B, H, W, C});
  }
  const auto [sc, sh] = split_scale_shift(mod_ffn(act), C);
  return add(x, fc2(gelu(fc1(modulate(layer_norm(x, none, none), sc, sh, ChannelAxis::Last)))));
}

template <typename S>
SwinBlock<S>::SwinBlock(const ParamScope<S>& scope, Index in, Index channels, Index heads, Index resolution,
                        Index window, Index emb_dim, bool cross_attention, Index text_width)
    : has_in_proj(in != channels) {
  if (has_in_proj) in_proj = Conv2d<S>(scope.sub("in_proj"), in, channels, 1);
  const Index w = std::min(window, resolution);
  layers.emplace_back(scope.sub("layers").sub(0), channels, heads, w, 0, emb_dim, cross_attention, text_width);
  layers.emplace_back(scope.sub("layers").sub(1), channels, heads, w, resolution > w ? w / 2 : 0, emb_dim,
                      cross_attention, text_width);
}

template <typename S>
Var<S> SwinBlock<S>::operator()(const Var<S>& x, const Var<S>& temb,
                                const typename TextConditioner<S>::Context* text) const {
  Var<S> h = permute(has_in_proj ? in_proj(x) : x, {0, 2, 3, 1});
  for (const auto& layer : layers) h = layer(h, temb, text);
  return permute(h, {0, 3, 1, 2});
}

template <typename S>
ResidualResample<S>::ResidualResample(const ParamScope<S>& scope, Index in, Index out, bool upsample)
    : up(upsample),
      norm1(scope.sub("norm1"), in),
      conv1(scope.sub("conv1"), in, out, 3, upsample ? 1 : 2),
      norm2(scope.sub("norm2"), out),
      conv2(scope.sub("conv2"), out, out, 3),
      shortcut(scope.sub("shortcut"), in, out, 1, upsample ? 1 : 2) {}

template <typename S>
Var<S> ResidualResample<S>::operator()(const Var<S>& x) const {
  if (!up && (x.dim(2) % 2 || x.dim(3) % 2)) {
    throw ShapeError("residual downsample: odd feature map " + shape_string(x.shape()));
  }
  Var<S> h = silu(norm1(x));
  if (up) h = upsample_nearest2x(h);
  h = conv2(silu(norm2(conv1(h))));
  return add(shortcut(up ? upsample_nearest2x(x) : x), h);
}

template <typename S>
Var<S> merge_neighbourhoods(const Var<S>& x) {
  const Index B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % 2 || W % 2) throw ShapeError("patch merge: odd feature map " + shape_string(x.shape()));
  return reshape(permute(reshape(x, {B, C, H / 2, 2, W / 2, 2}), {0, 2, 4, 5, 3, 1}), {B, H / 2, W / 2, 4 * C});
}

template <typename S>
Var<S> expand_neighbourhoods(const Var<S>& x, Index out_channels) {
  const Index B = x.dim(0), H = x.dim(1), W = x.dim(2);
  if (x.dim(3) != 4 * out_channels) throw ShapeError("patch expand: channel count is not 4 * out");
  return reshape(permute(reshape(x, {B, H, W, 2, 2, out_channels}), {0, 5, 1, 4, 2, 3}), {B, out_channels, 2 * H, 2 * W});
}

template <typename S>
PatchMerge<S>::PatchMerge(const ParamScope<S>& scope, Index in, Index out)
    : reduction(scope.sub("reduction"), 4 * in, out, false) {}

template <typename S>
Var<S> PatchMerge<S>::operator()(const Var<S>& x) const {
  return permute(reduction(merge_neighbourhoods(x)), {0, 3, 1, 2});
}

template <typename S>
PatchExpand<S>::PatchExpand(const ParamScope<S>& scope, Index in, Index out)
    : expansion(scope.sub("expansion"), in, 4 * out, false) {}

template <typename S>
Var<S> PatchExpand<S>::operator()(const Var<S>& x) const {
  const Index out = expansion.out_features() / 4;
  return expand_neighbourhoods(expansion(permute(x, {0, 2, 3, 1})), out);
}

// ------------------------------------------------------------ model

template <typename S>
typename ASCEND<S>::Block ASCEND<S>::make_block(const ParamScope<S>& scope, BlockKind kind, Index in, Index out,
                                                Index resolution, bool takes_skip) const {
  Block block;
  block.kind = kind;
  block.takes_skip = takes_skip;
  if (kind == BlockKind::Conv) {
    block.res = ResBlock<S>(scope, in, out, config_.embed_dim(), config_.dropout);
  } else {
    block.swin = SwinBlock<S>(scope, in, out, out / config_.head_channels, resolution, config_.window_size,
                              config_.embed_dim(), config_.cross_attention, config_.text_width);
  }
  return block;
}

template <typename S>
ASCEND<S>::ASCEND(const ASCENDConfig& config, std::uint64_t seed, bool materialize)
    : Denoiser<S>(seed, materialize), config_(config) {
  config_.validate();
  const ParamScope<S> root = this->root();
  const Index stages = config_.num_stages(), base = config_.base_channels, emb = config_.embed_dim();
  stem_ = Conv2d<S>(root.sub("stem"), 3, config_.stage_channels(0), 3);
  time_embed_ = TimestepEmbedder<S>(root.sub("time_embed"), base, emb, emb);
  if (config_.num_classes > 0) label_embed_ = LabelEmbedding<S>(root.sub("label_embed"), config_.num_classes, emb);
  if (config_.cross_attention) text_ = TextConditioner<S>(root.sub("text"), config_.text_width, emb);

  const bool merge = config_.resample_mode == ResampleMode::PatchMergeExpand;
  for (Index s = 0; s < stages; ++s) {
    const Index ch = config_.stage_channels(s), res = config_.stage_resolution(s);
    const ParamScope<S> scope = root.sub("encoder").sub(s);
    std::vector<Block> blocks;
    for (Index i = 0; i < config_.depth_per_stage; ++i) {
      blocks.push_back(make_block(scope.sub(i), config_.block_at(config_.encoder_block, res), ch, ch, res, false));
    }
    encoder_.push_back(std::move(blocks));
    if (s + 1 < stages) {
      Resample r;
      const Index next = config_.stage_channels(s + 1);
      if (merge) {
        r.merge = PatchMerge<S>(scope.sub("down"), ch, next);
      } else {
        r.residual = ResidualResample<S>(scope.sub("down"), ch, next, false);
      }
      down_.push_back(std::move(r));
    }
  }
  const Index last = stages - 1;
  for (Index i = 0; i < 2; ++i) {
    const Index res = config_.stage_resolution(last), ch = config_.stage_channels(last);
    middle_.push_back(make_block(root.sub("middle").sub(i), config_.block_at(config_.encoder_block, res), ch, ch, res,
                                 false));
  }
  decoder_.resize(static_cast<std::size_t>(stages));
  up_.resize(static_cast<std::size_t>(stages));
  for (Index s = last; s >= 0; --s) {
    const Index ch = config_.stage_channels(s), res = config_.stage_resolution(s);
    const ParamScope<S> scope = root.sub("decoder").sub(s);
    const BlockKind kind = config_.block_at(config_.decoder_block, res);
    for (Index i = 0; i <= config_.depth_per_stage; ++i) {
      const bool skip = config_.skip_mode == SkipMode::Dense || i == 0;
      decoder_[s].push_back(make_block(scope.sub(i), kind, skip ? 2 * ch : ch, ch, res, skip));
    }
    if (s > 0) {
      const Index prev = config_.stage_channels(s - 1);
      if (merge) {
        up_[s].expand = PatchExpand<S>(scope.sub("up"), ch, prev);
      } else {
        up_[s].residual = ResidualResample<S>(scope.sub("up"), ch, prev, true);
      }
    }
  }
  out_norm_ = GroupNorm<S>(root.sub("out_norm"), config_.stage_channels(0));
  out_conv_ = Conv2d<S>(root.sub("out_conv"), config_.stage_channels(0), 3, 3, 1, true);
}

template <typename S>
std::vector<Index> ASCEND<S>::decoder_concat_counts() const {
  std::vector<Index> counts;
  for (const auto& stage : decoder_) {
    counts.push_back(static_cast<Index>(std::count_if(stage.begin(), stage.end(), [](const Block& b) { return b.takes_skip; })));
  }
  return counts;
}

template <typename S>
Var<S> ASCEND<S>::run_block(const Block& block, const Var<S>& x, const Var<S>& temb,
                            const typename TextConditioner<S>::Context* text, const ForwardOptions& options) const {
  return block.kind == BlockKind::Conv ? block.res(x, temb, options) : block.swin(x, temb, text);
}

template <typename S>
Var<S> ASCEND<S>::run_resample(const Resample& r, const Var<S>& x, bool up) const {
  if (config_.resample_mode == ResampleMode::Residual) return r.residual(x);
  return up ? r.expand(x) : r.merge(x);
}

template <typename S>
Var<S> ASCEND<S>::embed_time(std::span<const double> timesteps, const ConditioningBundle<S>* cond, Index batch,
                             typename TextConditioner<S>::Context* text) const {
  Var<S> temb = time_embed_(timesteps);
  if (config_.num_classes > 0) temb = add(temb, label_embed_(cond, batch));
  if (config_.cross_attention) {
    *text = text_.prepare(cond, batch, config_.text_context);
    temb = add(temb, text->pooled_embedding);
  }
  return temb;
}

template <typename S>
typename ASCEND<S>::Pyramid ASCEND<S>::encode(const Var<S>& x_t, const Var<S>& temb,
                                              const typename TextConditioner<S>::Context* text,
                                              const ForwardOptions& options) const {
  Pyramid pyramid;
  Var<S> h = stem_(x_t);
  for (Index s = 0; s < config_.num_stages(); ++s) {
    if (s > 0) h = run_resample(down_[s - 1], h, false);
    pyramid.records.push_back(h);
    pyramid.record_stage.push_back(s);
    for (const auto& block : encoder_[s]) {
      h = run_block(block, h, temb, text, options);
      pyramid.records.push_back(h);
      pyramid.record_stage.push_back(s);
    }
  }
  pyramid.bottom = h;
  return pyramid;
}

template <typename S>
Var<S> ASCEND<S>::forward(const Var<S>& x_t, std::span<const double> timesteps, const ConditioningBundle<S>* cond,
                          const ForwardOptions& options) const {
  this->check_input(x_t, timesteps);
  typename TextConditioner<S>::Context text;
  const Var<S> temb = embed_time(timesteps, cond, x_t.dim(0), &text);
  const auto* ctx = config_.cross_attention ? &text : nullptr;

  Pyramid pyramid = encode(x_t, temb, ctx, options);
  Var<S> h = pyramid.bottom;
  for (const auto& block : middle_) h = run_block(block, h, temb, ctx, options);

  for (Index s = config_.num_stages() - 1; s >= 0; --s) {
    std::vector<Var<S>> stage_records;
    while (!pyramid.records.empty() && pyramid.record_stage.back() == s) {
      stage_records.push_back(pyramid.records.back());  // deepest first
      pyramid.records.pop_back();
      pyramid.record_stage.pop_back();
    }
    std::size_t next = 0;
    for (const auto& block : decoder_[s]) {
      if (block.takes_skip) {
        if (next >= stage_records.size()) throw std::logic_error("decoder ran out of skip features");
        h = concat<S>({h, stage_records[next++]}, 1);
      }
      h = run_block(block, h, temb, ctx, options);
    }
    if (s > 0) h = run_resample(up_[s], h, true);
  }
  return out_conv_(silu(out_norm_(h)));
}

#define VITDIFF_INSTANTIATE_ASCEND(S)                                          \
  template struct ResBlock<S>;                                                 \
  template struct WindowAttention<S>;                                          \
  template Tensor<S> shifted_window_mask<S>(Index, Index, Index, Index);       \
  template Var<S> window_partition(const Var<S>&, Index);                      \
  template Var<S> window_reverse(const Var<S>&, Index, Index, Index);          \
  template struct SwinLayer<S>;                                                \
  template struct SwinBlock<S>;                                                \
  template struct ResidualResample<S>;                                         \
  template struct PatchMerge<S>;                                               \
  template struct PatchExpand<S>;                                              \
  template Var<S> merge_neighbourhoods(const Var<S>&);                         \
  template Var<S> expand_neighbourhoods(const Var<S>&, Index);                 \
  template class ASCEND<S>;

VITDIFF_INSTANTIATE_ASCEND(float)
VITDIFF_INSTANTIATE_ASCEND(double)

}  // namespace vitdiff
