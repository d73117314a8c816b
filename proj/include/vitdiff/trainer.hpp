// Copyright (C) 2026 The vitdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "vitdiff/checkpoint.hpp"
#include "vitdiff/diffusion.hpp"
#include "vitdiff/layers.hpp"

#include <optional>

namespace vitdiff {

struct TrainConfig {
  Index batch_size = 16;
  double learning_rate = 2e-4;
  double beta1 = 0.99;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  double ema_decay = 0.9999;
  Index max_iterations = 1000;
  std::optional<double> grad_clip;  // global L2 norm
  Index warmup_steps = 0;           // linear warmup, 0 = constant rate
  std::uint64_t seed = 0;
  double p_drop = 0.1;

  void validate() const;
};

/// Raised when a step produces a NaN/inf loss.
class NonFiniteLossError : public std::runtime_error {
 public:
  NonFiniteLossError(Index iteration, double loss);
  Index iteration() const { return iteration_; }

 private:
  Index iteration_;
};

/// Images in [-1, 1] plus optional per-sample labels and text keys.
template <typename S>
struct Dataset {
  Tensor<S> images;                          // [N, 3, H, W]
  std::vector<std::string> keys;             // sample identifiers (file stems)
  std::optional<std::vector<Index>> labels;  // [N]
  const EmbeddingTable* text = nullptr;      // rows looked up by key

  Index size() const { return images.rank() ? images.dim(0) : 0; }
  Tensor<S> gather_images(std::span<const Index> indices) const;
  /// Conditioning for the given samples; nullopt when the dataset has none.
  std::optional<ConditioningBundle<S>> gather_conditioning(std::span<const Index> indices) const;
};

/// Decoupled-weight-decay Adam over every parameter of a store.
template <typename S>
class AdamW {
 public:
  AdamW() = default;
  explicit AdamW(const ParameterStore<S>& params);

  void step(ParameterStore<S>& params, double lr, double beta1, double beta2, double eps, double weight_decay);
  Index steps() const { return steps_; }
  std::vector<Tensor<S>>& first_moments() { return m_; }
  std::vector<Tensor<S>>& second_moments() { return v_; }
  const std::vector<Tensor<S>>& first_moments() const { return m_; }
  const std::vector<Tensor<S>>& second_moments() const { return v_; }
  void set_steps(Index steps) { steps_ = steps; }

 private:
  std::vector<Tensor<S>> m_;
  std::vector<Tensor<S>> v_;
  Index steps_ = 0;
};

/// ema <- decay * ema + (1 - decay) * param for every tensor pair.
template <typename S>
void ema_update(std::vector<Tensor<S>>& ema, const std::vector<const Tensor<S>*>& params, double decay);

/// Global L2 norm of all gradients; scales them down to `max_norm` when above.
template <typename S>
double clip_grad_norm(ParameterStore<S>& params, double max_norm);

template <typename S>
class Trainer {
 public:
  Trainer(Denoiser<S>& model, const NoiseSchedule& schedule, TrainConfig config, std::string config_text = {});

  /// One optimization step on a fixed batch: per-sample t ~ U[0, T), eps ~ N(0, I),
  /// conditioning dropout, epsilon loss, backward, AdamW, EMA. Returns the loss.
  double step(const Tensor<S>& x0, const ConditioningBundle<S>* cond = nullptr);
  /// Draws a batch (with replacement) from the dataset and steps on it.
  double train_iteration(const Dataset<S>& data);

  Index iteration() const { return iteration_; }
  const TrainConfig& config() const { return config_; }
  Rng& rng() { return rng_; }
  Denoiser<S>& model() { return model_; }
  const std::vector<Tensor<S>>& ema() const { return ema_; }
  const AdamW<S>& optimizer() const { return optimizer_; }
  /// Learning rate applied at the next step.
  double current_learning_rate() const;

  /// Copies the EMA shadow weights into the model (for sampling).
  void load_ema_into_model();

  Checkpoint snapshot() const;
  /// Restores weights, EMA, optimizer moments, iteration and RNG. Throws
  /// CheckpointError on missing tensors, shape mismatches or a config-hash mismatch.
  void restore(const Checkpoint& checkpoint);

 private:
  Denoiser<S>& model_;
  const NoiseSchedule& schedule_;
  TrainConfig config_;
  std::string config_text_;
  AdamW<S> optimizer_;
  std::vector<Tensor<S>> ema_;
  Rng rng_;
  Index iteration_ = 0;
};

#define VITDIFF_DECLARE_TRAINER(S)                                                                        \
  extern template struct Dataset<S>;                                                                      \
  extern template class AdamW<S>;                                                                         \
  extern template void ema_update(std::vector<Tensor<S>>&, const std::vector<const Tensor<S>*>&, double); \
  extern template double clip_grad_norm(ParameterStore<S>&, double);                                      \
  extern template class Trainer<S>;

VITDIFF_DECLARE_TRAINER(float)
VITDIFF_DECLARE_TRAINER(double)
#undef VITDIFF_DECLARE_TRAINER

}  // namespace vitdiff
