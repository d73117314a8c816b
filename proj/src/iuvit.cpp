// Copyright (C) 2026 The vitdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "vitdiff/iuvit.hpp"

namespace vitdiff {

namespace {

void require(bool ok, const std::string& field, const std::string& message) {
  if (!ok) throw std::invalid_argument("backbone." + field + ": " + message);
}

}  // namespace

void IUViTConfig::validate() const {
  require(image_size > 0, "image_size", "must be positive");
  require(patch_size > 0, "patch_size", "must be positive");
  require(image_size % patch_size == 0, "patch_size",
          "image_size " + std::to_string(image_size) + " is not divisible by patch_size " + std::to_string(patch_size));
  require(depth > 0, "depth", "must be positive");
  require(depth % 2 == 1, "depth", "must be odd (in-blocks, one middle block, out-blocks)");
  require(hidden_size > 0, "hidden_size", "must be positive");
  require(num_heads > 0, "num_heads", "must be positive");
  require(hidden_size % num_heads == 0, "num_heads",
          "hidden_size " + std::to_string(hidden_size) + " is not divisible by num_heads " + std::to_string(num_heads));
  require(mlp_ratio > 0, "mlp_ratio", "must be positive");
  if (head_mode == HeadMode::RearrangeFirst) {
    require(hidden_size % (patch_size * patch_size) == 0, "head_mode",
            "rearrange-first head needs patch_size^2 = " + std::to_string(patch_size * patch_size) +
                " to divide hidden_size " + std::to_string(hidden_size));
  }
  require(num_classes >= 0, "num_classes", "must be >= 0");
  if (cross_attention) {
    require(text_width > 0, "text_width", "must be positive when cross_attention is enabled");
    require(text_context > 0, "text_context", "must be positive when cross_attention is enabled");
  }
}

template <typename S>
Var<S> patchify(const Var<S>& x, Index p) {
  if (x.rank() != 4) throw ShapeError("patchify expects [B, C, H, W]");
  const Index B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (p < 1 || H % p || W % p) {
    throw ShapeError("patchify: " + std::to_string(H) + "x" + std::to_string(W) + " not divisible by patch size " +
                     std::to_string(p));
  }
  const Index h = H / p, w = W / p;
  return reshape(permute(reshape(x, {B, C, h, p, w, p}), {0, 2, 4, 1, 3, 5}), {B, h * w, C * p * p});
}

template <typename S>
Var<S> unpatchify(const Var<S>& tokens, Index p, Index grid) {
  if (tokens.rank() != 3) throw ShapeError("unpatchify expects [B, N, D]");
  const Index B = tokens.dim(0), N = tokens.dim(1), D = tokens.dim(2);
  if (N != grid * grid) throw ShapeError("unpatchify: token count does not match grid");
  if (D % (p * p)) throw ShapeError("unpatchify: token width not divisible by p^2");
  const Index C = D / (p * p);
  return reshape(permute(reshape(tokens, {B, grid, grid, C, p, p}), {0, 3, 1, 4, 2, 5}), {B, C, grid * p, grid * p});
}

template <typename S>
ConvFeedForward<S>::ConvFeedForward(const ParamScope<S>& scope, Index channels, Index hidden, bool dwconv)
    : fc1(scope.sub("fc1"), channels, hidden),
      dw_weight(dwconv ? &scope.create("dwconv.weight", {hidden, 3, 3}, InitSpec::fan_in(9)) : nullptr),
      dw_bias(dwconv ? &scope.create("dwconv.bias", {hidden}, InitSpec::zeros()) : nullptr),
      fc2(scope.sub("fc2"), hidden, channels) {}

template <typename S>
Var<S> ConvFeedForward<S>::operator()(const Var<S>& x, Index extra, Index grid_h, Index grid_w) const {
  Var<S> h = fc1(x);
  if (dw_weight) {
    const Index B = h.dim(0), M = h.dim(1), D = h.dim(2);
    if (M - extra != grid_h * grid_w) {
      throw ShapeError("dwconv ffn: " + std::to_string(M - extra) + " image tokens do not form a " +
                       std::to_string(grid_h) + "x" + std::to_string(grid_w) + " grid");
    }
    Var<S> image = slice(h, 1, extra, M - extra);
    image = permute(reshape(image, {B, grid_h, grid_w, D}), {0, 3, 1, 2});
    image = depthwise_conv2d(image, dw_weight->var(), dw_bias->var(), 1);
    image = reshape(permute(image, {0, 2, 3, 1}), {B, grid_h * grid_w, D});
    h = extra > 0 ? concat<S>({slice(h, 1, 0, extra), image}, 1) : image;
  }
  return fc2(gelu(h));
}

template <typename S>
IUViTBlock<S>::IUViTBlock(const ParamScope<S>& scope, const IUViTConfig& cfg, bool long_skip)
    : norm1(scope.sub("norm1"), cfg.hidden_size),
      attn(scope.sub("attn"), cfg.hidden_size, cfg.num_heads, false),
      has_cross(cfg.cross_attention),
      has_skip(long_skip) {
  const Index C = cfg.hidden_size;
  if (has_cross) {
    norm2 = LayerNorm<S>(scope.sub("norm2"), C);
    cross = CrossAttention<S>(scope.sub("cross_attn"), C, cfg.text_width, cfg.num_heads);
  }
  norm3 = LayerNorm<S>(scope.sub("norm3"), C);
  ffn = ConvFeedForward<S>(scope.sub("ffn"), C, cfg.mlp_ratio * C, cfg.use_dwconv_ffn);
  if (has_skip) skip_proj = Linear<S>(scope.sub("skip_proj"), 2 * C, C);
}

template <typename S>
Var<S> IUViTBlock<S>::merge_skip(const Var<S>& deep, const Var<S>& shallow) const {
  if (deep.shape() != shallow.shape()) {
    throw ShapeError("long skip: " + shape_string(deep.shape()) + " vs " + shape_string(shallow.shape()));
  }
  return skip_proj(concat<S>({deep, shallow}, 2));
}

template <typename S>
Var<S> IUViTBlock<S>::operator()(Var<S> x, const typename TextConditioner<S>::Context* text, Index extra,
                                 Index grid) const {
  if (has_cross != (text != nullptr)) throw std::logic_error("block: text context present iff cross-attention enabled");
  x = add(x, attn(norm1(x)));
  if (has_cross) x = add(x, cross(norm2(x), text->sequence, text->key_mask));
  return add(x, ffn(norm3(x), extra, grid, grid));
}

template <typename S>
IUViT<S>::IUViT(const IUViTConfig& config, std::uint64_t seed, bool materialize)
    : Denoiser<S>(seed, materialize), config_(config) {
  config_.validate();
  const ParamScope<S> root = this->root();
  const Index C = config_.hidden_size, p = config_.patch_size;
  patch_embed_ = Linear<S>(root.sub("patch_embed"), 3 * p * p, C);
  pos_embed_ = &root.create("pos_embed", {config_.num_patches(), C}, InitSpec::trunc_normal(0.02));
  time_embed_ = TimestepEmbedder<S>(root.sub("time_embed"), C, 4 * C, C);
  if (config_.num_classes > 0) label_embed_ = LabelEmbedding<S>(root.sub("label_embed"), config_.num_classes, C);
  if (config_.cross_attention) text_ = TextConditioner<S>(root.sub("text"), config_.text_width, C);
  for (Index i = 0; i < config_.depth; ++i) {
    blocks_.emplace_back(root.sub("blocks").sub(i), config_, i > config_.depth / 2);
  }
  final_norm_ = LayerNorm<S>(root.sub("final_norm"), C);
  if (config_.head_mode == HeadMode::LinearFirst) {
    head_linear_ = Linear<S>(root.sub("head.linear"), C, 3 * p * p);
    head_conv_ = Conv2d<S>(root.sub("head.conv"), 3, 3, 3, 1, true);
  } else {
    head_conv_ = Conv2d<S>(root.sub("head.conv"), C / (p * p), 3, 3, 1, true);
  }
}

template <typename S>
Var<S> IUViT<S>::features(const Var<S>& x_t, std::span<const double> timesteps,
                          const ConditioningBundle<S>* cond) const {
  this->check_input(x_t, timesteps);
  const Index B = x_t.dim(0), C = config_.hidden_size, grid = config_.grid();
  const Index extra = config_.extra_tokens();

  Var<S> image = add_broadcast(patch_embed_(patchify(x_t, config_.patch_size)), pos_embed_->var());
  Var<S> time = time_embed_(timesteps);
  typename TextConditioner<S>::Context text;
  if (config_.cross_attention) {
    text = text_.prepare(cond, B, config_.text_context);
    time = add(time, text.pooled_embedding);
  }
  std::vector<Var<S>> parts{reshape(time, {B, 1, C})};
  if (config_.num_classes > 0) parts.push_back(reshape(label_embed_(cond, B), {B, 1, C}));
  parts.push_back(image);
  Var<S> x = concat(parts, 1);

  const auto* ctx = config_.cross_attention ? &text : nullptr;
  const Index half = config_.skip_pairs();
  std::vector<Var<S>> cached;
  for (Index i = 0; i < half; ++i) {
    x = blocks_[i](x, ctx, extra, grid);
    cached.push_back(x);
  }
  x = blocks_[half](x, ctx, extra, grid);
  for (Index i = half + 1; i < config_.depth; ++i) {
    x = blocks_[i](blocks_[i].merge_skip(x, cached.back()), ctx, extra, grid);
    cached.pop_back();
  }
  return slice(final_norm_(x), 1, extra, config_.num_patches());
}

template <typename S>
Var<S> IUViT<S>::head(const Var<S>& tokens) const {
  const Index p = config_.patch_size, grid = config_.grid();
  if (config_.head_mode == HeadMode::LinearFirst) return head_conv_(unpatchify(head_linear_(tokens), p, grid));
  return head_conv_(unpatchify(tokens, p, grid));
}

template <typename S>
Var<S> IUViT<S>::forward(const Var<S>& x_t, std::span<const double> timesteps, const ConditioningBundle<S>* cond,
                         const ForwardOptions&) const {
  return head(features(x_t, timesteps, cond));
}

#define VITDIFF_INSTANTIATE_IUVIT(S)                   \
  template Var<S> patchify(const Var<S>&, Index);      \
  template Var<S> unpatchify(const Var<S>&, Index, Index); \
  template struct ConvFeedForward<S>;                  \
  template struct IUViTBlock<S>;                       \
  template class IUViT<S>;

VITDIFF_INSTANTIATE_IUVIT(float)
VITDIFF_INSTANTIATE_IUVIT(double)

}  // namespace vitdiff
