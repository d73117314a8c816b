// Copyright (C) 2026 The vitdiff Authors
// SPDX-License-Identifier: Apache-2.0

// Noise schedules, the forward (noising) process, the epsilon objective and
// guidance arithmetic.
//
// Timesteps are 0-based: index t in [0, T) corresponds to step t + 1 of the
// usual 1-based chain x_1 ... x_T. The "previous" of index 0 is clean data,
// for which alpha_bar is taken to be 1.

#pragma once

#include "vitdiff/tensor.hpp"

#include <span>
#include <string>
#include <vector>

namespace vitdiff {

enum class ScheduleKind { Linear, Cosine, Custom };

std::string to_string(ScheduleKind kind);

/// Precomputed variance schedule. All arrays are float64 and immutable.
class NoiseSchedule {
 public:
  static NoiseSchedule linear(Index num_steps, double beta_start = 1e-4, double beta_end = 0.02);
  static NoiseSchedule cosine(Index num_steps, double offset = 0.008);
  /// Arbitrary betas, each in (0, 1).
  static NoiseSchedule from_betas(std::vector<double> betas);

  Index num_steps() const { return static_cast<Index>(betas_.size()); }
  ScheduleKind kind() const { return kind_; }
  const std::vector<double>& betas() const { return betas_; }
  const std::vector<double>& alphas() const { return alphas_; }
  const std::vector<double>& alpha_bars() const { return alpha_bars_; }
  const std::vector<double>& posterior_variances() const { return posterior_variances_; }

  double beta(Index t) const { return betas_.at(checked(t)); }
  double alpha(Index t) const { return alphas_.at(checked(t)); }
  double alpha_bar(Index t) const { return alpha_bars_.at(checked(t)); }
  /// alpha_bar at t, with t == -1 denoting clean data (alpha_bar = 1).
  double alpha_bar_or_one(Index t) const { return t == -1 ? 1.0 : alpha_bar(t); }

  /// Continuous-time view on u in [0, 1]: position u*T - 1 in index space,
  /// linearly interpolated; u below 1/T interpolates toward clean data.
  double continuous_alpha_bar(double u) const;
  /// beta(u) of the variance-preserving SDE, i.e. T times the interpolated
  /// discrete beta, so that beta(u) du matches one discrete step when du = 1/T.
  double continuous_beta(double u) const;
  /// Index-space position used to condition the network at continuous time u.
  double continuous_index(double u) const;

  void check_timestep(Index t) const { (void)checked(t); }

 private:
  NoiseSchedule(ScheduleKind kind, std::vector<double> betas);
  std::size_t checked(Index t) const;

  ScheduleKind kind_;
  std::vector<double> betas_;
  std::vector<double> alphas_;
  std::vector<double> alpha_bars_;
  std::vector<double> posterior_variances_;
};

NoiseSchedule make_linear_schedule(Index num_steps, double beta_start = 1e-4, double beta_end = 0.02);
NoiseSchedule make_cosine_schedule(Index num_steps, double offset = 0.008);

enum class GuidanceMode { None, ClassifierFree, Classifier };

std::string to_string(GuidanceMode mode);

struct GuidanceSpec {
  GuidanceMode mode = GuidanceMode::None;
  double scale = 1.0;  // s for classifier-free, omega for classifier guidance

  void validate() const;
};

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, with one timestep per batch row.
template <typename S>
Tensor<S> q_sample(const Tensor<S>& x0, std::span<const Index> timesteps, const Tensor<S>& eps,
                   const NoiseSchedule& schedule);

/// Mean squared error between predicted and true noise.
template <typename S>
double epsilon_loss(const Tensor<S>& eps_hat, const Tensor<S>& eps);

/// (1/sqrt(alpha_t)) (x_t - beta_t / sqrt(1 - abar_t) eps_hat).
template <typename S>
Tensor<S> posterior_mean(const Tensor<S>& x_t, const Tensor<S>& eps_hat, Index t, const NoiseSchedule& schedule);

/// eps_uncond + s (eps_cond - eps_uncond).
template <typename S>
Tensor<S> cfg_combine(const Tensor<S>& eps_uncond, const Tensor<S>& eps_cond, double s);

/// eps_hat - omega sqrt(1 - abar_t) grad_x log p(c | x_t).
template <typename S>
Tensor<S> classifier_guided_epsilon(const Tensor<S>& eps_hat, const Tensor<S>& classifier_grad, double omega, Index t,
                                    const NoiseSchedule& schedule);

/// score = -eps_hat / sqrt(1 - abar).
template <typename S>
Tensor<S> epsilon_to_score(const Tensor<S>& eps_hat, double alpha_bar);

#define VITDIFF_DECLARE_DIFFUSION(S)                                                                              \
  extern template Tensor<S> q_sample(const Tensor<S>&, std::span<const Index>, const Tensor<S>&,                  \
                                     const NoiseSchedule&);                                                       \
  extern template double epsilon_loss(const Tensor<S>&, const Tensor<S>&);                                        \
  extern template Tensor<S> posterior_mean(const Tensor<S>&, const Tensor<S>&, Index, const NoiseSchedule&);      \
  extern template Tensor<S> cfg_combine(const Tensor<S>&, const Tensor<S>&, double);                              \
  extern template Tensor<S> classifier_guided_epsilon(const Tensor<S>&, const Tensor<S>&, double, Index,          \
                                                      const NoiseSchedule&);                                      \
  extern template Tensor<S> epsilon_to_score(const Tensor<S>&, double);

VITDIFF_DECLARE_DIFFUSION(float)
VITDIFF_DECLARE_DIFFUSION(double)
#undef VITDIFF_DECLARE_DIFFUSION

}  // namespace vitdiff
