// Copyright (C) 2026 The vitdiff Authors
// SPDX-License-Identifier: Apache-2.0

// Helpers shared by the unit and acceptance tests: random tensors, hand-rolled
// generators for property tests, toy configurations and a finite-difference
// gradient checker.

#pragma once

#include "vitdiff/backbone.hpp"
#include "vitdiff/diffusion.hpp"
#include "vitdiff/ops.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace vitdiff::testing {

template <typename S>
Tensor<S> random_tensor(const Shape& shape, std::uint64_t seed, double stddev = 1.0) {
  Rng rng(seed);
  Tensor<S> t = Tensor<S>::randn(shape, rng);
  for (auto& v : t.values()) v = static_cast<S>(v * stddev);
  return t;
}

template <typename S>
double max_abs_diff(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape()) return INFINITY;
  double m = 0.0;
  for (Index i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

template <typename S>
double max_abs(const Tensor<S>& a) {
  double m = 0.0;
  for (Index i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i])));
  return m;
}

/// Small deterministic generator for property tests.
class Gen {
 public:
  explicit Gen(std::uint64_t seed) : rng_(seed) {}
  Index integer(Index lo, Index hi) { return std::uniform_int_distribution<Index>(lo, hi)(rng_); }
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }
  template <typename T>
  const T& pick(const std::vector<T>& items) {
    return items[static_cast<std::size_t>(integer(0, static_cast<Index>(items.size()) - 1))];
  }
  std::uint64_t seed() { return rng_(); }
  Rng& rng() { return rng_; }

 private:
  Rng rng_;
};

inline IUViTConfig toy_iuvit() {
  IUViTConfig c;
  c.image_size = 8;
  c.patch_size = 2;
  c.depth = 3;
  c.hidden_size = 16;
  c.num_heads = 2;
  return c;
}

inline ASCENDConfig toy_ascend(Index image_size = 16) {
  ASCENDConfig c;
  c.image_size = image_size;
  c.base_channels = 8;
  c.depth_per_stage = 1;
  c.channel_mult = {1, 2};
  c.head_channels = 4;
  c.attention_resolutions = {image_size, image_size / 2};
  c.window_size = 4;
  c.dropout = 0.0;
  return c;
}

/// Replaces every parameter with small random values so zero-initialized
/// projections do not hide gradient paths.
template <typename S>
void randomize_parameters(Denoiser<S>& model, std::uint64_t seed, double stddev = 0.2) {
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, stddev);
  for (auto& p : model.parameters())
    for (auto& v : p->value().values()) v = static_cast<S>(normal(rng));
}

struct GradCheckResult {
  std::string parameter;
  double relative_error = 0.0;
  Index checked = 0;
};

/// Central differences on up to `per_tensor` entries of every parameter tensor.
/// The per-tensor error is ||analytic - numeric|| / max(||analytic|| + ||numeric||, 1e-7);
/// the floor keeps structurally zero gradients (key biases, biases ahead of a
/// per-channel normalization) from being judged on finite-difference roundoff.
inline std::vector<GradCheckResult> gradient_check(Denoiser<double>& model, const std::function<Var<double>()>& loss_fn,
                                                   Index per_tensor, std::uint64_t seed, double h = 1e-4) {
  auto& params = model.parameters();
  params.zero_grad();
  backward(loss_fn());
  std::vector<GradCheckResult> results;
  Rng rng(seed);
  for (auto& p : params) {
    const Tensor<double> analytic = p->grad();
    Tensor<double>& value = p->value();
    std::vector<Index> picks;
    if (value.size() <= per_tensor) {
      for (Index i = 0; i < value.size(); ++i) picks.push_back(i);
    } else {
      std::uniform_int_distribution<Index> dist(0, value.size() - 1);
      for (Index k = 0; k < per_tensor; ++k) picks.push_back(dist(rng));
    }
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (Index i : picks) {
      const double orig = value[i];
      double plus, minus;
      {
        NoGradGuard guard;
        value[i] = orig + h;
        plus = loss_fn().value().item();
        value[i] = orig - h;
        minus = loss_fn().value().item();
      }
      value[i] = orig;
      const double numeric = (plus - minus) / (2 * h);
      diff2 += (analytic[i] - numeric) * (analytic[i] - numeric);
      a2 += analytic[i] * analytic[i];
      n2 += numeric * numeric;
    }
    const double denom = std::max(std::sqrt(a2) + std::sqrt(n2), 1e-7);
    results.push_back({p->name(), std::sqrt(diff2) / denom, static_cast<Index>(picks.size())});
  }
  return results;
}

/// Two-mode 8x8 dataset: half the images sit near one colour, half near another.
template <typename S>
Tensor<S> two_mode_images(Index count, Index size, std::uint64_t seed, double jitter = 0.05) {
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, jitter);
  const double modes[2][3] = {{0.6, -0.5, -0.4}, {-0.6, -0.3, 0.6}};
  Tensor<S> images({count, 3, size, size});
  for (Index b = 0; b < count; ++b)
    for (Index c = 0; c < 3; ++c)
      for (Index i = 0; i < size * size; ++i) {
        images[(b * 3 + c) * size * size + i] = static_cast<S>(std::clamp(modes[b % 2][c] + normal(rng), -1.0, 1.0));
      }
  return images;
}

}  // namespace vitdiff::testing
