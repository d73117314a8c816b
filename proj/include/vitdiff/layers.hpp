// Copyright (C) 2026 The vitdiff Authors
// SPDX-License-Identifier: Apache-2.0

// Attention sublayers and the denoiser interface shared by both backbones.

#pragma once

#include "vitdiff/conditioning.hpp"

#include <memory>
#include <span>

namespace vitdiff {

struct ForwardOptions {
  bool training = false;
  Rng* rng = nullptr;  // required when training with dropout > 0
};

/// An epsilon-predicting network: forward(x_t [B, 3, H, W], t [B]) -> [B, 3, H, W].
/// Timesteps are fractional indices in [0, T) so continuous-time samplers can
/// condition between grid points.
template <typename S>
class Denoiser {
 public:
  explicit Denoiser(std::uint64_t seed, bool materialize = true) : params_(seed, materialize) {}
  virtual ~Denoiser() = default;
  Denoiser(const Denoiser&) = delete;
  Denoiser& operator=(const Denoiser&) = delete;

  virtual Var<S> forward(const Var<S>& x_t, std::span<const double> timesteps, const ConditioningBundle<S>* cond,
                         const ForwardOptions& options = {}) const = 0;
  virtual Index image_size() const = 0;
  virtual std::string name() const = 0;

  /// Inference-mode forward: no graph is recorded.
  Tensor<S> predict(const Tensor<S>& x_t, std::span<const double> timesteps,
                    const ConditioningBundle<S>* cond = nullptr) const {
    NoGradGuard guard;
    return forward(constant(x_t), timesteps, cond).value();
  }

  ParameterStore<S>& parameters() { return params_; }
  const ParameterStore<S>& parameters() const { return params_; }
  Index parameter_count() const { return params_.total_count(); }

 protected:
  ParamScope<S> root() { return ParamScope<S>(params_); }
  void check_input(const Var<S>& x_t, std::span<const double> timesteps) const;

 private:
  ParameterStore<S> params_;
};

/// [B, N, heads * d] -> [B * heads, N, d].
template <typename S>
Var<S> split_heads(const Var<S>& x, Index heads);
/// Inverse of split_heads.
template <typename S>
Var<S> merge_heads(const Var<S>& x, Index heads);

/// Multi-head self-attention over tokens [B, N, C].
template <typename S>
struct SelfAttention {
  Index heads = 1;
  Linear<S> qkv;
  Linear<S> proj;

  SelfAttention() = default;
  SelfAttention(const ParamScope<S>& scope, Index channels, Index num_heads, bool qkv_bias, bool zero_proj = false)
      : heads(num_heads),
        qkv(scope.sub("qkv"), channels, 3 * channels, qkv_bias),
        proj(scope.sub("proj"), channels, channels, true,
             zero_proj ? InitSpec::zeros() : InitSpec::trunc_normal(0.02)) {}

  /// `options.heads`/`scale` are filled in; bias and masks pass through.
  Var<S> operator()(const Var<S>& x, AttentionOptions<S> options = {}) const;
};

/// Queries from the tokens, keys/values from the text sequence [B, L, D].
/// Masked text positions are ignored; a query with no valid key contributes zero.
template <typename S>
struct CrossAttention {
  Index heads = 1;
  Linear<S> q;
  Linear<S> kv;
  Linear<S> proj;

  CrossAttention() = default;
  CrossAttention(const ParamScope<S>& scope, Index channels, Index text_width, Index num_heads)
      : heads(num_heads),
        q(scope.sub("q"), channels, channels, false),
        kv(scope.sub("kv"), text_width, 2 * channels, false),
        proj(scope.sub("proj"), channels, channels, true, InitSpec::zeros()) {}

  Var<S> operator()(const Var<S>& x, const Var<S>& text, const std::vector<std::uint8_t>& key_mask) const;
};

#define VITDIFF_DECLARE_LAYERS(S)                              \
  extern template class Denoiser<S>;                           \
  extern template Var<S> split_heads(const Var<S>&, Index);    \
  extern template Var<S> merge_heads(const Var<S>&, Index);    \
  extern template struct SelfAttention<S>;                     \
  extern template struct CrossAttention<S>;

VITDIFF_DECLARE_LAYERS(float)
VITDIFF_DECLARE_LAYERS(double)
#undef VITDIFF_DECLARE_LAYERS

}  // namespace vitdiff
