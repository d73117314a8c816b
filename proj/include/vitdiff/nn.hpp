// Copyright (C) 2026 The vitdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "vitdiff/ops.hpp"

#include <cmath>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_map>
#include <vector>

namespace vitdiff {

enum class InitKind { Zeros, Ones, Normal, TruncatedNormal, Uniform };

struct InitSpec {
  InitKind kind = InitKind::Zeros;
  double scale = 0.0;  // std for the normal kinds, half-width for Uniform

  static InitSpec zeros() { return {InitKind::Zeros, 0.0}; }
  static InitSpec ones() { return {InitKind::Ones, 0.0}; }
  static InitSpec normal(double std) { return {InitKind::Normal, std}; }
  static InitSpec trunc_normal(double std) { return {InitKind::TruncatedNormal, std}; }
  static InitSpec uniform(double bound) { return {InitKind::Uniform, bound}; }
  /// PyTorch's default for conv/linear weights: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
  static InitSpec fan_in(Index fan) { return uniform(1.0 / std::sqrt(static_cast<double>(fan))); }
};

/// A named trainable tensor. A parameter built in a non-materializing store
/// only records its shape (used for parameter accounting of large presets).
template <typename S>
class Parameter {
 public:
  Parameter(std::string name, Shape shape) : name_(std::move(name)), shape_(std::move(shape)) {}

  const std::string& name() const { return name_; }
  const Shape& shape() const { return shape_; }
  Index numel() const { return shape_numel(shape_); }
  bool materialized() const { return var_.defined(); }

  const Var<S>& var() const {
    if (!var_.defined()) throw std::logic_error("parameter '" + name_ + "' is not materialized");
    return var_;
  }
  Tensor<S>& value() { return const_cast<Var<S>&>(var()).mutable_value(); }
  const Tensor<S>& value() const { return var().value(); }
  Tensor<S> grad() const { return var().grad(); }
  bool has_grad() const { return var_.defined() && var_.node()->has_grad(); }
  Tensor<S>& grad_buffer() { return var().node()->grad_buffer(); }
  void zero_grad() {
    if (var_.defined()) var_.node()->grad = Tensor<S>();
  }

  void materialize(Tensor<S> value) {
    if (value.shape() != shape_) throw ShapeError("parameter '" + name_ + "': bad initial shape");
    var_ = leaf(std::move(value));
  }

 private:
  std::string name_;
  Shape shape_;
  Var<S> var_;
};

/// Ordered registry of parameters; initialization consumes a seeded RNG in
/// registration order, so a (config, seed) pair fixes every initial weight.
template <typename S>
class ParameterStore {
 public:
  explicit ParameterStore(std::uint64_t seed = 0, bool materialize = true) : rng_(seed), materialize_(materialize) {}
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;

  Parameter<S>& create(const std::string& name, Shape shape, InitSpec init) {
    if (index_.count(name)) throw std::logic_error("duplicate parameter name '" + name + "'");
    auto param = std::make_unique<Parameter<S>>(name, shape);
    if (materialize_) param->materialize(initial_value(shape, init));
    index_.emplace(name, params_.size());
    params_.push_back(std::move(param));
    return *params_.back();
  }

  bool materialized() const { return materialize_; }
  std::size_t size() const { return params_.size(); }
  Parameter<S>& operator[](std::size_t i) { return *params_[i]; }
  const Parameter<S>& operator[](std::size_t i) const { return *params_[i]; }
  Parameter<S>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second].get();
  }

  Index total_count() const {
    Index n = 0;
    for (const auto& p : params_) n += p->numel();
    return n;
  }
  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  Tensor<S> initial_value(const Shape& shape, InitSpec init) {
    Tensor<S> t(shape);
    switch (init.kind) {
      case InitKind::Zeros:
        break;
      case InitKind::Ones:
        t.fill(S(1));
        break;
      case InitKind::Normal: {
        std::normal_distribution<double> d(0.0, init.scale);
        for (auto& v : t.storage()) v = static_cast<S>(d(rng_));
        break;
      }
      case InitKind::TruncatedNormal: {
        std::normal_distribution<double> d(0.0, 1.0);
        for (auto& v : t.storage()) {
          double z;
          do z = d(rng_);
          while (std::abs(z) > 2.0);
          v = static_cast<S>(z * init.scale);
        }
        break;
      }
      case InitKind::Uniform: {
        std::uniform_real_distribution<double> d(-init.scale, init.scale);
        for (auto& v : t.storage()) v = static_cast<S>(d(rng_));
        break;
      }
    }
    return t;
  }

  std::vector<std::unique_ptr<Parameter<S>>> params_;
  std::unordered_map<std::string, std::size_t> index_;
  Rng rng_;
  bool materialize_;
};

/// Hierarchical naming helper: scope.sub("blocks").sub("3").create("w", ...)
/// registers "blocks.3.w".
template <typename S>
class ParamScope {
 public:
  ParamScope(ParameterStore<S>& store, std::string prefix = {}) : store_(&store), prefix_(std::move(prefix)) {}

  ParamScope sub(const std::string& name) const { return ParamScope(*store_, join(name)); }
  ParamScope sub(Index i) const { return sub(std::to_string(i)); }
  Parameter<S>& create(const std::string& name, Shape shape, InitSpec init) const {
    return store_->create(join(name), std::move(shape), init);
  }
  ParameterStore<S>& store() const { return *store_; }

 private:
  std::string join(const std::string& name) const { return prefix_.empty() ? name : prefix_ + "." + name; }

  ParameterStore<S>* store_;
  std::string prefix_;
};

template <typename S>
inline Var<S> var_of(const Parameter<S>* p) {
  return p ? p->var() : Var<S>();
}

/// Largest group count <= 32 dividing `channels`.
inline Index group_count(Index channels) {
  for (Index g = std::min<Index>(32, channels); g > 1; --g)
    if (channels % g == 0) return g;
  return 1;
}

template <typename S>
struct Linear {
  Parameter<S>* weight = nullptr;
  Parameter<S>* bias = nullptr;

  Linear() = default;
  Linear(const ParamScope<S>& scope, Index in, Index out, bool with_bias = true,
         InitSpec init = InitSpec::trunc_normal(0.02))
      : weight(&scope.create("weight", {out, in}, init)),
        bias(with_bias ? &scope.create("bias", {out}, InitSpec::zeros()) : nullptr) {}

  Index in_features() const { return weight->shape()[1]; }
  Index out_features() const { return weight->shape()[0]; }
  Var<S> operator()(const Var<S>& x) const { return linear(x, weight->var(), var_of(bias)); }
};

template <typename S>
struct LayerNorm {
  Parameter<S>* gamma = nullptr;
  Parameter<S>* beta = nullptr;
  S eps = S(1e-6);

  LayerNorm() = default;
  LayerNorm(const ParamScope<S>& scope, Index channels, bool affine = true)
      : gamma(affine ? &scope.create("weight", {channels}, InitSpec::ones()) : nullptr),
        beta(affine ? &scope.create("bias", {channels}, InitSpec::zeros()) : nullptr) {}

  Var<S> operator()(const Var<S>& x) const { return layer_norm(x, var_of(gamma), var_of(beta), eps); }
};

template <typename S>
struct GroupNorm {
  Parameter<S>* gamma = nullptr;
  Parameter<S>* beta = nullptr;
  Index groups = 1;

  GroupNorm() = default;
  GroupNorm(const ParamScope<S>& scope, Index channels)
      : gamma(&scope.create("weight", {channels}, InitSpec::ones())),
        beta(&scope.create("bias", {channels}, InitSpec::zeros())),
        groups(group_count(channels)) {}

  Var<S> operator()(const Var<S>& x) const { return group_norm(x, groups, gamma->var(), beta->var()); }
};

template <typename S>
struct Conv2d {
  Parameter<S>* weight = nullptr;
  Parameter<S>* bias = nullptr;
  Index stride = 1;
  Index padding = 0;

  Conv2d() = default;
  Conv2d(const ParamScope<S>& scope, Index in, Index out, Index kernel, Index stride_ = 1, bool zero_init = false)
      : weight(&scope.create("weight", {out, in, kernel, kernel},
                             zero_init ? InitSpec::zeros() : InitSpec::fan_in(in * kernel * kernel))),
        bias(&scope.create("bias", {out}, InitSpec::zeros())),
        stride(stride_),
        padding(kernel / 2) {}

  Var<S> operator()(const Var<S>& x) const { return conv2d(x, weight->var(), var_of(bias), stride, padding); }
};

}  // namespace vitdiff
