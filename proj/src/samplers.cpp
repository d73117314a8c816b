// Copyright (C) 2026 The vitdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "vitdiff/samplers.hpp"

#include <cmath>
#include <stdexcept>

namespace vitdiff {

std::string to_string(SamplerFamily family) {
  switch (family) {
    case SamplerFamily::Ancestral:
      return "ancestral";
    case SamplerFamily::EulerMaruyama:
      return "em";
    case SamplerFamily::DDIM:
      return "ddim";
  }
  return "unknown";
}

SamplerFamily parse_sampler_family(const std::string& name) {
  if (name == "ancestral" || name == "ddpm") return SamplerFamily::Ancestral;
  if (name == "em" || name == "euler_maruyama") return SamplerFamily::EulerMaruyama;
  if (name == "ddim") return SamplerFamily::DDIM;
  throw std::invalid_argument("unknown sampler '" + name + "' (expected ancestral, em or ddim)");
}

void SamplerSpec::validate(const NoiseSchedule& schedule) const {
  if (num_steps < 1) throw std::invalid_argument("sampler.steps: must be >= 1");
  if (num_steps > schedule.num_steps()) {
    throw std::invalid_argument("sampler.steps: " + std::to_string(num_steps) + " exceeds the " +
                                std::to_string(schedule.num_steps()) + " diffusion steps");
  }
  if (!(eta >= 0.0 && eta <= 1.0)) throw std::invalid_argument("sampler.eta: must lie in [0, 1]");
  guidance.validate();
}

template <typename S>
Tensor<S> ancestral_step(const Tensor<S>& x_t, Index t, const Tensor<S>& eps_hat, const NoiseSchedule& schedule,
                         const Tensor<S>& noise) {
  require_same_shape(x_t, noise, "ancestral_step");
  Tensor<S> out = posterior_mean(x_t, eps_hat, t, schedule);
  if (t == 0) return out;  // last transition: no noise
  const S sigma = static_cast<S>(std::sqrt(schedule.posterior_variances()[static_cast<std::size_t>(t)]));
  out.array() += sigma * noise.array();
  return out;
}

template <typename S>
Tensor<S> ancestral_step_between(const Tensor<S>& x_t, Index t, Index t_prev, const Tensor<S>& eps_hat,
                                 const NoiseSchedule& schedule, const Tensor<S>& noise) {
  if (t_prev == t - 1) return ancestral_step(x_t, t, eps_hat, schedule, noise);
  if (t_prev < -1 || t_prev >= t) throw std::invalid_argument("ancestral step needs -1 <= t_prev < t");
  require_same_shape(x_t, eps_hat, "ancestral_step");
  require_same_shape(x_t, noise, "ancestral_step");
  const double abar = schedule.alpha_bar(t), abar_prev = schedule.alpha_bar_or_one(t_prev);
  const double alpha = abar / abar_prev, beta = 1.0 - alpha;
  const S a = static_cast<S>(1.0 / std::sqrt(alpha));
  const S c = static_cast<S>(beta / std::sqrt(1.0 - abar));
  Tensor<S> out(x_t.shape());
  out.array() = a * (x_t.array() - c * eps_hat.array());
  if (t_prev >= 0) {
    const S sigma = static_cast<S>(std::sqrt((1.0 - abar_prev) / (1.0 - abar) * beta));
    out.array() += sigma * noise.array();
  }
  return out;
}

template <typename S>
Tensor<S> predict_x0(const Tensor<S>& x_t, Index t, const Tensor<S>& eps_hat, const NoiseSchedule& schedule) {
  require_same_shape(x_t, eps_hat, "predict_x0");
  const double abar = schedule.alpha_bar(t);
  Tensor<S> out(x_t.shape());
  out.array() = (x_t.array() - static_cast<S>(std::sqrt(1.0 - abar)) * eps_hat.array()) /
                static_cast<S>(std::sqrt(abar));
  return out;
}

template <typename S>
Tensor<S> ddim_step(const Tensor<S>& x_t, Index t, Index t_prev, const Tensor<S>& eps_hat, double eta,
                    const NoiseSchedule& schedule, const Tensor<S>& noise) {
  if (t_prev >= t) throw std::invalid_argument("ddim_step: t_prev must be smaller than t");
  if (t_prev < -1) throw std::out_of_range("ddim_step: t_prev below -1");
  require_same_shape(x_t, noise, "ddim_step");
  const double abar = schedule.alpha_bar(t), abar_prev = schedule.alpha_bar_or_one(t_prev);
  const double sigma = eta * std::sqrt((1.0 - abar_prev) / (1.0 - abar)) * std::sqrt(1.0 - abar / abar_prev);
  const double dir = std::sqrt(std::max(0.0, 1.0 - abar_prev - sigma * sigma));
  const Tensor<S> x0 = predict_x0(x_t, t, eps_hat, schedule);
  Tensor<S> out(x_t.shape());
  out.array() = static_cast<S>(std::sqrt(abar_prev)) * x0.array() + static_cast<S>(dir) * eps_hat.array();
  if (sigma > 0.0) out.array() += static_cast<S>(sigma) * noise.array();
  return out;
}

template <typename S>
Tensor<S> em_update(const Tensor<S>& x, const Tensor<S>& eps_hat, double beta, double alpha_bar, double dt,
                    const Tensor<S>& noise) {
  require_same_shape(x, eps_hat, "em_step");
  require_same_shape(x, noise, "em_step");
  if (!(dt > 0.0)) throw std::invalid_argument("em_step: dt must be positive");
  Tensor<S> out(x.shape());
  if (beta == 0.0) {
    out = x;
    return out;
  }
  const Tensor<S> score = epsilon_to_score(eps_hat, alpha_bar);
  out.array() = x.array() + static_cast<S>(0.5 * beta * dt) * x.array() + static_cast<S>(beta * dt) * score.array() +
                static_cast<S>(std::sqrt(beta * dt)) * noise.array();
  return out;
}

template <typename S>
Tensor<S> em_step(const Tensor<S>& x, double u, const Tensor<S>& eps_hat, const NoiseSchedule& schedule, double dt,
                  const Tensor<S>& noise) {
  if (!(dt > 0.0)) throw std::invalid_argument("em_step: dt must be positive");
  if (u - dt < -1e-9) throw std::out_of_range("em_step: step of " + std::to_string(dt) + " from u = " +
                                              std::to_string(u) + " passes t = 0");
  return em_update(x, eps_hat, schedule.continuous_beta(u), schedule.continuous_alpha_bar(u), dt, noise);
}

std::vector<Index> ddim_timesteps(Index num_train_steps, Index num_steps) {
  if (num_steps < 1 || num_steps > num_train_steps) throw std::invalid_argument("ddim_timesteps: need 1 <= n <= T");
  if (num_steps == 1) return {num_train_steps - 1};
  std::vector<Index> out;
  for (Index i = num_steps - 1; i >= 0; --i) {
    out.push_back(static_cast<Index>(
        std::llround(static_cast<double>(i) * static_cast<double>(num_train_steps - 1) / static_cast<double>(num_steps - 1))));
  }
  return out;
}

template <typename S>
SampleResult<S> run_sampler(const EpsilonModel<S>& model, const SamplerSpec& spec, const NoiseSchedule& schedule,
                            const Shape& shape, const ConditioningBundle<S>* cond,
                            const ClassifierGradient<S>& classifier) {
  spec.validate(schedule);
  if (shape.empty()) throw ShapeError("run_sampler: shape needs a batch dimension");
  const GuidanceMode mode = spec.guidance.mode;
  if (mode == GuidanceMode::ClassifierFree && !cond) {
    throw std::invalid_argument("classifier-free guidance needs a conditioning bundle");
  }
  if (mode == GuidanceMode::Classifier && !classifier) {
    throw std::invalid_argument("classifier guidance needs a classifier gradient");
  }
  const Index B = shape[0];
  const ConditioningBundle<S> uncond = ConditioningBundle<S>::unconditional(B);

  SampleResult<S> result;
  Rng rng(spec.seed);
  Tensor<S> x = Tensor<S>::randn(shape, rng);

  auto epsilon = [&](const Tensor<S>& xt, double model_t, double alpha_bar) {
    const std::vector<double> ts(static_cast<std::size_t>(B), model_t);
    result.timesteps.push_back(model_t);
    Tensor<S> eps;
    if (mode == GuidanceMode::ClassifierFree) {
      const Tensor<S> e_cond = model(xt, ts, cond);
      const Tensor<S> e_uncond = model(xt, ts, &uncond);
      result.model_calls += 2;
      eps = cfg_combine(e_uncond, e_cond, spec.guidance.scale);
    } else {
      eps = model(xt, ts, cond);
      result.model_calls += 1;
    }
    if (mode == GuidanceMode::Classifier && spec.guidance.scale != 0.0) {
      const Tensor<S> grad = classifier(xt, ts);
      require_same_shape(eps, grad, "classifier guidance");
      eps.array() -= static_cast<S>(spec.guidance.scale * std::sqrt(1.0 - alpha_bar)) * grad.array();
    }
    return eps;
  };
  auto noise_for = [&](bool last) { return last ? Tensor<S>(shape) : Tensor<S>::randn(shape, rng); };

  const Index T = schedule.num_steps(), n = spec.num_steps;
  switch (spec.family) {
    case SamplerFamily::Ancestral:
    case SamplerFamily::DDIM: {
      std::vector<Index> seq;
      if (spec.family == SamplerFamily::Ancestral && n == T) {
        for (Index t = T - 1; t >= 0; --t) seq.push_back(t);
      } else {
        seq = ddim_timesteps(T, n);
      }
      for (std::size_t i = 0; i < seq.size(); ++i) {
        const Index t = seq[i];
        const Index t_prev = i + 1 < seq.size() ? seq[i + 1] : -1;
        const Tensor<S> eps = epsilon(x, static_cast<double>(t), schedule.alpha_bar(t));
        const bool last = t_prev == -1;
        if (spec.family == SamplerFamily::Ancestral) {
          x = ancestral_step_between(x, t, t_prev, eps, schedule, noise_for(last));
        } else {
          const bool stochastic = spec.eta > 0.0 && !last;
          x = ddim_step(x, t, t_prev, eps, spec.eta, schedule, stochastic ? noise_for(false) : Tensor<S>(shape));
        }
      }
      break;
    }
    case SamplerFamily::EulerMaruyama: {
      const double dt = 1.0 / static_cast<double>(n);
      for (Index k = 0; k < n; ++k) {
        const double u = 1.0 - static_cast<double>(k) * dt;
        const double abar = schedule.continuous_alpha_bar(u);
        const Tensor<S> eps = epsilon(x, schedule.continuous_index(u), abar);
        x = em_update(x, eps, schedule.continuous_beta(u), abar, dt, noise_for(k + 1 == n));
      }
      break;
    }
  }
  if (spec.clamp_output) x.array() = x.array().max(S(-1)).min(S(1));
  result.samples = std::move(x);
  return result;
}

#define VITDIFF_INSTANTIATE_SAMPLERS(S)                                                                           \
  template Tensor<S> ancestral_step(const Tensor<S>&, Index, const Tensor<S>&, const NoiseSchedule&,              \
                                    const Tensor<S>&);                                                            \
  template Tensor<S> ancestral_step_between(const Tensor<S>&, Index, Index, const Tensor<S>&, const NoiseSchedule&, \
                                            const Tensor<S>&);                                                    \
  template Tensor<S> ddim_step(const Tensor<S>&, Index, Index, const Tensor<S>&, double, const NoiseSchedule&,    \
                               const Tensor<S>&);                                                                 \
  template Tensor<S> predict_x0(const Tensor<S>&, Index, const Tensor<S>&, const NoiseSchedule&);                 \
  template Tensor<S> em_step(const Tensor<S>&, double, const Tensor<S>&, const NoiseSchedule&, double,            \
                             const Tensor<S>&);                                                                   \
  template Tensor<S> em_update(const Tensor<S>&, const Tensor<S>&, double, double, double, const Tensor<S>&);     \
  template SampleResult<S> run_sampler(const EpsilonModel<S>&, const SamplerSpec&, const NoiseSchedule&,          \
                                       const Shape&, const ConditioningBundle<S>*, const ClassifierGradient<S>&);

VITDIFF_INSTANTIATE_SAMPLERS(float)
VITDIFF_INSTANTIATE_SAMPLERS(double)

}  // namespace vitdiff
