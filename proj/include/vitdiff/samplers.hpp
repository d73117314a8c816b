// Copyright (C) 2026 The vitdiff Authors
// SPDX-License-Identifier: Apache-2.0

// Reverse-process integrators: ancestral, DDIM and Euler-Maruyama on the
// variance-preserving SDE. Index -1 denotes clean data (alpha_bar = 1).

#pragma once

#include "vitdiff/conditioning.hpp"
#include "vitdiff/diffusion.hpp"

#include <functional>

namespace vitdiff {

enum class SamplerFamily { Ancestral, EulerMaruyama, DDIM };

std::string to_string(SamplerFamily family);
SamplerFamily parse_sampler_family(const std::string& name);

struct SamplerSpec {
  SamplerFamily family = SamplerFamily::DDIM;
  Index num_steps = 50;
  double eta = 0.0;  // DDIM only
  GuidanceSpec guidance;
  std::uint64_t seed = 0;
  bool clamp_output = true;

  void validate(const NoiseSchedule& schedule) const;
};

/// x_{t-1} = posterior mean + sqrt(posterior variance) noise; t = 0 lands on
/// clean data and ignores the noise.
template <typename S>
Tensor<S> ancestral_step(const Tensor<S>& x_t, Index t, const Tensor<S>& eps_hat, const NoiseSchedule& schedule,
                         const Tensor<S>& noise);

/// Ancestral step over a respaced pair t -> t_prev (t_prev = -1 is clean data),
/// using alpha = abar_t / abar_prev. Equals ancestral_step when t_prev = t - 1.
template <typename S>
Tensor<S> ancestral_step_between(const Tensor<S>& x_t, Index t, Index t_prev, const Tensor<S>& eps_hat,
                                 const NoiseSchedule& schedule, const Tensor<S>& noise);

/// DDIM update from t to t_prev (-1 <= t_prev < t).
template <typename S>
Tensor<S> ddim_step(const Tensor<S>& x_t, Index t, Index t_prev, const Tensor<S>& eps_hat, double eta,
                    const NoiseSchedule& schedule, const Tensor<S>& noise);

/// x0 implied by an epsilon prediction at t.
template <typename S>
Tensor<S> predict_x0(const Tensor<S>& x_t, Index t, const Tensor<S>& eps_hat, const NoiseSchedule& schedule);

/// Reverse-time Euler-Maruyama step at continuous time u with step dt:
/// x + (beta x / 2 + beta score) dt + sqrt(beta dt) noise.
template <typename S>
Tensor<S> em_step(const Tensor<S>& x, double u, const Tensor<S>& eps_hat, const NoiseSchedule& schedule, double dt,
                  const Tensor<S>& noise);

/// Same update with beta and alpha_bar supplied directly.
template <typename S>
Tensor<S> em_update(const Tensor<S>& x, const Tensor<S>& eps_hat, double beta, double alpha_bar, double dt,
                    const Tensor<S>& noise);

/// Evenly spaced descending indices round(i (T - 1) / (n - 1)), i = n - 1 .. 0.
std::vector<Index> ddim_timesteps(Index num_train_steps, Index num_steps);

/// Noise predictor: (x_t, per-sample timestep index, conditioning) -> eps_hat.
template <typename S>
using EpsilonModel =
    std::function<Tensor<S>(const Tensor<S>&, std::span<const double>, const ConditioningBundle<S>*)>;
/// grad_x log p(c | x_t) for classifier guidance.
template <typename S>
using ClassifierGradient = std::function<Tensor<S>(const Tensor<S>&, std::span<const double>)>;

template <typename S>
struct SampleResult {
  Tensor<S> samples;
  Index model_calls = 0;
  std::vector<double> timesteps;  // model-facing timestep of every step, in order
};

/// Starts from x_T ~ N(0, I) drawn from spec.seed and applies the spec's step
/// rule; classifier-free guidance evaluates the model twice per step.
template <typename S>
SampleResult<S> run_sampler(const EpsilonModel<S>& model, const SamplerSpec& spec, const NoiseSchedule& schedule,
                            const Shape& shape, const ConditioningBundle<S>* cond = nullptr,
                            const ClassifierGradient<S>& classifier = {});

#define VITDIFF_DECLARE_SAMPLERS(S)                                                                            \
  extern template Tensor<S> ancestral_step(const Tensor<S>&, Index, const Tensor<S>&, const NoiseSchedule&,    \
                                           const Tensor<S>&);                                                  \
  extern template Tensor<S> ancestral_step_between(const Tensor<S>&, Index, Index, const Tensor<S>&,           \
                                                   const NoiseSchedule&, const Tensor<S>&);                    \
  extern template Tensor<S> ddim_step(const Tensor<S>&, Index, Index, const Tensor<S>&, double,                \
                                      const NoiseSchedule&, const Tensor<S>&);                                 \
  extern template Tensor<S> predict_x0(const Tensor<S>&, Index, const Tensor<S>&, const NoiseSchedule&);       \
  extern template Tensor<S> em_step(const Tensor<S>&, double, const Tensor<S>&, const NoiseSchedule&, double,  \
                                    const Tensor<S>&);                                                         \
  extern template Tensor<S> em_update(const Tensor<S>&, const Tensor<S>&, double, double, double,              \
                                      const Tensor<S>&);                                                       \
  extern template SampleResult<S> run_sampler(const EpsilonModel<S>&, const SamplerSpec&, const NoiseSchedule&, \
                                              const Shape&, const ConditioningBundle<S>*,                      \
                                              const ClassifierGradient<S>&);

VITDIFF_DECLARE_SAMPLERS(float)
VITDIFF_DECLARE_SAMPLERS(double)
#undef VITDIFF_DECLARE_SAMPLERS

}  // namespace vitdiff
