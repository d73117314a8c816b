// Copyright (C) 2026 The vitdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "vitdiff/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace vitdiff {

std::string to_string(ScheduleKind kind) {
  switch (kind) {
    case ScheduleKind::Linear:
      return "linear";
    case ScheduleKind::Cosine:
      return "cosine";
    case ScheduleKind::Custom:
      return "custom";
  }
  return "unknown";
}

std::string to_string(GuidanceMode mode) {
  switch (mode) {
    case GuidanceMode::None:
      return "none";
    case GuidanceMode::ClassifierFree:
      return "classifier_free";
    case GuidanceMode::Classifier:
      return "classifier";
  }
  return "unknown";
}

NoiseSchedule::NoiseSchedule(ScheduleKind kind, std::vector<double> betas) : kind_(kind), betas_(std::move(betas)) {
  const std::size_t T = betas_.size();
  alphas_.resize(T);
  alpha_bars_.resize(T);
  posterior_variances_.resize(T);
  double running = 1.0;
  for (std::size_t t = 0; t < T; ++t) {
    if (!(betas_[t] > 0.0 && betas_[t] < 1.0)) {
      throw std::invalid_argument("schedule beta[" + std::to_string(t) + "] = " + std::to_string(betas_[t]) +
                                  " outside (0, 1)");
    }
    alphas_[t] = 1.0 - betas_[t];
    running *= alphas_[t];
    alpha_bars_[t] = running;
    const double prev = t == 0 ? 1.0 : alpha_bars_[t - 1];
    posterior_variances_[t] = (1.0 - prev) / (1.0 - alpha_bars_[t]) * betas_[t];
  }
}

NoiseSchedule NoiseSchedule::linear(Index num_steps, double beta_start, double beta_end) {
  if (num_steps < 1) throw std::invalid_argument("linear schedule: num_steps must be >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw std::invalid_argument("linear schedule: need 0 < beta_start <= beta_end < 1");
  }
  std::vector<double> betas(static_cast<std::size_t>(num_steps));
  for (Index t = 0; t < num_steps; ++t) {
    const double frac = num_steps == 1 ? 0.0 : static_cast<double>(t) / static_cast<double>(num_steps - 1);
    betas[t] = beta_start + (beta_end - beta_start) * frac;
  }
  betas.back() = num_steps == 1 ? beta_start : beta_end;
  return NoiseSchedule(ScheduleKind::Linear, std::move(betas));
}

NoiseSchedule NoiseSchedule::cosine(Index num_steps, double offset) {
  if (num_steps < 1) throw std::invalid_argument("cosine schedule: num_steps must be >= 1");
  if (!(offset > 0.0)) throw std::invalid_argument("cosine schedule: offset must be > 0");
  const double T = static_cast<double>(num_steps);
  auto f = [&](double step) {
    const double c = std::cos((step / T + offset) / (1.0 + offset) * M_PI / 2.0);
    return c * c;
  };
  std::vector<double> betas(static_cast<std::size_t>(num_steps));
  for (Index t = 0; t < num_steps; ++t) {
    const double b = 1.0 - f(static_cast<double>(t + 1)) / f(static_cast<double>(t));
    betas[t] = std::min(b, 0.999);
  }
  return NoiseSchedule(ScheduleKind::Cosine, std::move(betas));
}

NoiseSchedule NoiseSchedule::from_betas(std::vector<double> betas) {
  if (betas.empty()) throw std::invalid_argument("schedule: need at least one beta");
  return NoiseSchedule(ScheduleKind::Custom, std::move(betas));
}

NoiseSchedule make_linear_schedule(Index num_steps, double beta_start, double beta_end) {
  return NoiseSchedule::linear(num_steps, beta_start, beta_end);
}

NoiseSchedule make_cosine_schedule(Index num_steps, double offset) { return NoiseSchedule::cosine(num_steps, offset); }

std::size_t NoiseSchedule::checked(Index t) const {
  if (t < 0 || t >= num_steps()) {
    throw std::out_of_range("timestep " + std::to_string(t) + " outside [0, " + std::to_string(num_steps()) + ")");
  }
  return static_cast<std::size_t>(t);
}

double NoiseSchedule::continuous_alpha_bar(double u) const {
  if (u < 0.0 || u > 1.0) throw std::out_of_range("continuous time outside [0, 1]");
  const double pos = u * static_cast<double>(num_steps()) - 1.0;  // in [-1, T-1]
  const Index lo = static_cast<Index>(std::floor(pos));
  const Index hi = std::min<Index>(lo + 1, num_steps() - 1);
  const double w = pos - static_cast<double>(lo);
  return (1.0 - w) * alpha_bar_or_one(lo) + w * alpha_bar_or_one(hi);
}

double NoiseSchedule::continuous_beta(double u) const {
  if (u < 0.0 || u > 1.0) throw std::out_of_range("continuous time outside [0, 1]");
  const double pos = std::max(0.0, u * static_cast<double>(num_steps()) - 1.0);
  const Index lo = std::min<Index>(static_cast<Index>(std::floor(pos)), num_steps() - 1);
  const Index hi = std::min<Index>(lo + 1, num_steps() - 1);
  const double w = pos - static_cast<double>(lo);
  return static_cast<double>(num_steps()) * ((1.0 - w) * betas_[lo] + w * betas_[hi]);
}

double NoiseSchedule::continuous_index(double u) const {
  double pos = u * static_cast<double>(num_steps()) - 1.0;
  if (std::abs(pos - std::round(pos)) < 1e-9) pos = std::round(pos);  // u = k/T lands on index k-1 exactly
  return std::clamp(pos, 0.0, static_cast<double>(num_steps() - 1));
}

void GuidanceSpec::validate() const {
  if (!(scale >= 0.0)) throw std::invalid_argument("guidance scale must be >= 0");
}

template <typename S>
Tensor<S> q_sample(const Tensor<S>& x0, std::span<const Index> timesteps, const Tensor<S>& eps,
                   const NoiseSchedule& schedule) {
  require_same_shape(x0, eps, "q_sample");
  if (x0.rank() < 1 || static_cast<Index>(timesteps.size()) != x0.dim(0)) {
    throw ShapeError("q_sample: need one timestep per batch row");
  }
  const Index B = x0.dim(0);
  const Index per = B ? x0.size() / B : 0;
  Tensor<S> out(x0.shape());
  for (Index b = 0; b < B; ++b) {
    const double abar = schedule.alpha_bar(timesteps[b]);
    const S a = static_cast<S>(std::sqrt(abar));
    const S s = static_cast<S>(std::sqrt(1.0 - abar));
    ArrayMap<S>(out.data() + b * per, per) =
        a * ConstArrayMap<S>(x0.data() + b * per, per) + s * ConstArrayMap<S>(eps.data() + b * per, per);
  }
  return out;
}

template <typename S>
double epsilon_loss(const Tensor<S>& eps_hat, const Tensor<S>& eps) {
  require_same_shape(eps_hat, eps, "epsilon_loss");
  if (eps.size() == 0) throw ShapeError("epsilon_loss: empty tensors");
  double acc = 0.0;
  for (Index i = 0; i < eps.size(); ++i) {
    const double d = static_cast<double>(eps_hat[i]) - static_cast<double>(eps[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(eps.size());
}

template <typename S>
Tensor<S> posterior_mean(const Tensor<S>& x_t, const Tensor<S>& eps_hat, Index t, const NoiseSchedule& schedule) {
  require_same_shape(x_t, eps_hat, "posterior_mean");
  const double alpha = schedule.alpha(t);
  const double coef = schedule.beta(t) / std::sqrt(1.0 - schedule.alpha_bar(t));
  const double inv_sqrt_alpha = 1.0 / std::sqrt(alpha);
  Tensor<S> out(x_t.shape());
  out.array() = static_cast<S>(inv_sqrt_alpha) * (x_t.array() - static_cast<S>(coef) * eps_hat.array());
  return out;
}

template <typename S>
Tensor<S> cfg_combine(const Tensor<S>& eps_uncond, const Tensor<S>& eps_cond, double s) {
  require_same_shape(eps_uncond, eps_cond, "cfg_combine");
  if (!(s >= 0.0)) throw std::invalid_argument("cfg_combine: guidance scale must be >= 0");
  // s in {0, 1} short-circuits so the identities hold bitwise.
  if (s == 0.0) return eps_uncond;
  if (s == 1.0) return eps_cond;
  Tensor<S> out(eps_cond.shape());
  out.array() = eps_uncond.array() + static_cast<S>(s) * (eps_cond.array() - eps_uncond.array());
  return out;
}

template <typename S>
Tensor<S> classifier_guided_epsilon(const Tensor<S>& eps_hat, const Tensor<S>& classifier_grad, double omega, Index t,
                                    const NoiseSchedule& schedule) {
  require_same_shape(eps_hat, classifier_grad, "classifier_guided_epsilon");
  if (omega == 0.0) return eps_hat;
  const double coef = omega * std::sqrt(1.0 - schedule.alpha_bar(t));
  Tensor<S> out(eps_hat.shape());
  out.array() = eps_hat.array() - static_cast<S>(coef) * classifier_grad.array();
  return out;
}

template <typename S>
Tensor<S> epsilon_to_score(const Tensor<S>& eps_hat, double alpha_bar) {
  if (!(alpha_bar < 1.0)) throw std::invalid_argument("epsilon_to_score: alpha_bar must be < 1");
  Tensor<S> out(eps_hat.shape());
  out.array() = eps_hat.array() * static_cast<S>(-1.0 / std::sqrt(1.0 - alpha_bar));
  return out;
}

#define VITDIFF_INSTANTIATE_DIFFUSION(S)                                                                       \
  template Tensor<S> q_sample(const Tensor<S>&, std::span<const Index>, const Tensor<S>&, const NoiseSchedule&); \
  template double epsilon_loss(const Tensor<S>&, const Tensor<S>&);                                            \
  template Tensor<S> posterior_mean(const Tensor<S>&, const Tensor<S>&, Index, const NoiseSchedule&);          \
  template Tensor<S> cfg_combine(const Tensor<S>&, const Tensor<S>&, double);                                  \
  template Tensor<S> classifier_guided_epsilon(const Tensor<S>&, const Tensor<S>&, double, Index,              \
                                               const NoiseSchedule&);                                          \
  template Tensor<S> epsilon_to_score(const Tensor<S>&, double);

VITDIFF_INSTANTIATE_DIFFUSION(float)
VITDIFF_INSTANTIATE_DIFFUSION(double)

}  // namespace vitdiff
