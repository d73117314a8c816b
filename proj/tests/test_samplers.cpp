// Copyright (C) 2026 The vitdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include "support.hpp"
#include "vitdiff/samplers.hpp"

using namespace vitdiff;
using namespace vitdiff::testing;

namespace {

// Gaussian data N(mu, sd^2): the exact E[eps | x_t] is linear in x_t.
struct GaussianOracle {
  double mu, sd;
  const NoiseSchedule* sched;

  double gain(Index t) const {
    const double ab = sched->alpha_bar(t);
    return std::sqrt(1 - ab) / (ab * sd * sd + 1 - ab);
  }
  EpsilonModel<double> model() const {
    return [this](const Tensor<double>& x, std::span<const double> ts, const ConditioningBundle<double>*) {
      const Index t = static_cast<Index>(std::lround(ts[0]));
      const double k = gain(t), shift = std::sqrt(sched->alpha_bar(t)) * mu;
      Tensor<double> out(x.shape());
      for (Index i = 0; i < x.size(); ++i) out[i] = k * (x[i] - shift);
      return out;
    };
  }
};

struct Moments {
  double mean = 0, var = 0;
};

Moments empirical(const Tensor<double>& x) {
  Moments m;
  for (Index i = 0; i < x.size(); ++i) m.mean += x[i];
  m.mean /= double(x.size());
  for (Index i = 0; i < x.size(); ++i) m.var += (x[i] - m.mean) * (x[i] - m.mean);
  m.var /= double(x.size() - 1);
  return m;
}

// Each reverse step is x' = a x + c + sigma z under the linear oracle, so the
// output law is Gaussian with moments propagated from N(0, 1).
Moments ancestral_moments(const GaussianOracle& o, const NoiseSchedule& s) {
  Moments m{0.0, 1.0};
  for (Index t = s.num_steps() - 1; t >= 0; --t) {
    const double ab = s.alpha_bar(t), k = o.gain(t), r = s.beta(t) / std::sqrt(1 - ab);
    const double a = (1 - r * k) / std::sqrt(s.alpha(t));
    const double c = r * k * std::sqrt(ab) * o.mu / std::sqrt(s.alpha(t));
    const double noise = t == 0 ? 0.0 : (1 - s.alpha_bar(t - 1)) / (1 - ab) * s.beta(t);
    m = {a * m.mean + c, a * a * m.var + noise};
  }
  return m;
}

Moments ddim_moments(const GaussianOracle& o, const NoiseSchedule& s, double eta) {
  Moments m{0.0, 1.0};
  for (Index t = s.num_steps() - 1; t >= 0; --t) {
    const double ab = s.alpha_bar(t), abp = s.alpha_bar_or_one(t - 1), k = o.gain(t);
    const double sig2 = t == 0 ? 0.0 : eta * eta * (1 - abp) / (1 - ab) * (1 - ab / abp);
    // x0_hat = (x - sqrt(1-ab) eps) / sqrt(ab); x' = sqrt(abp) x0_hat + sqrt(1-abp-sig2) eps + sig z
    const double e_a = k, e_c = -k * std::sqrt(ab) * o.mu;
    const double x0_a = (1 - std::sqrt(1 - ab) * e_a) / std::sqrt(ab), x0_c = -std::sqrt(1 - ab) * e_c / std::sqrt(ab);
    const double dir = std::sqrt(std::max(0.0, 1 - abp - sig2));
    const double a = std::sqrt(abp) * x0_a + dir * e_a, c = std::sqrt(abp) * x0_c + dir * e_c;
    m = {a * m.mean + c, a * a * m.var + sig2};
  }
  return m;
}

EpsilonModel<double> zero_model(std::vector<Tensor<double>>* inputs = nullptr) {
  return [inputs](const Tensor<double>& x, std::span<const double>, const ConditioningBundle<double>*) {
    if (inputs) inputs->push_back(x);
    return Tensor<double>(x.shape());
  };
}

}  // namespace

TEST_SUITE("samplers") {
  TEST_CASE("ddim scalar oracle") {
    // alpha_bar_0 = 0.9, alpha_bar_1 = 0.5
    const auto s = NoiseSchedule::from_betas({0.1, 1 - 0.5 / 0.9});
    const Tensor<double> x({1}, 1.0), e({1}, 0.2), z({1}, 0.0);
    const double x0 = (1 - std::sqrt(0.5) * 0.2) / std::sqrt(0.5);
    CHECK(predict_x0(x, 1, e, s)[0] == doctest::Approx(x0).epsilon(1e-14));
    CHECK(ddim_step(x, 1, 0, e, 0.0, s, z)[0] == doctest::Approx(std::sqrt(0.9) * x0 + std::sqrt(0.1) * 0.2).epsilon(1e-13));
    CHECK_THROWS(ddim_step(x, 1, 1, e, 0.0, s, z));
    CHECK_THROWS(ddim_step(x, 0, 1, e, 0.0, s, z));
  }

  TEST_CASE("ddim recovers x0 from the true noise") {
    Gen gen(21);
    for (int trial = 0; trial < 20; ++trial) {
      const auto s = trial % 2 ? make_cosine_schedule(1000) : make_linear_schedule(1000);
      const auto x0 = random_tensor<double>({1, 3, 4, 4}, gen.seed());
      const auto eps = random_tensor<double>(x0.shape(), gen.seed());
      const Index t = gen.integer(0, 999);
      const auto xt = q_sample(x0, std::vector<Index>{t}, eps, s);
      CHECK(max_abs_diff(predict_x0(xt, t, eps, s), x0) <= 1e-5 * std::max(1.0, max_abs(x0)));
      const auto landed = ddim_step(xt, t, -1, eps, 0.0, s, Tensor<double>(x0.shape()));
      CHECK(max_abs_diff(landed, x0) <= 1e-5 * std::max(1.0, max_abs(x0)));
    }
  }

  TEST_CASE("ddim eta zero is deterministic") {
    const auto s = make_linear_schedule(100);
    const auto x = random_tensor<float>({2, 3, 4, 4}, 1), e = random_tensor<float>({2, 3, 4, 4}, 2);
    const auto z1 = random_tensor<float>(x.shape(), 3), z2 = random_tensor<float>(x.shape(), 4);
    CHECK(ddim_step(x, 50, 40, e, 0.0, s, z1) == ddim_step(x, 50, 40, e, 0.0, s, z2));
  }

  TEST_CASE("ancestral step between matches the single step") {
    const auto s = make_linear_schedule(50);
    const auto x = random_tensor<double>({2, 4}, 1), e = random_tensor<double>({2, 4}, 2);
    const auto z = random_tensor<double>({2, 4}, 3);
    for (Index t : {0, 1, 17, 49}) CHECK(max_abs_diff(ancestral_step(x, t, e, s, z), ancestral_step_between(x, t, t - 1, e, s, z)) < 1e-12);
    // t = 0 lands on clean data without noise
    CHECK(ancestral_step(x, 0, e, s, z) == ancestral_step(x, 0, e, s, Tensor<double>(x.shape())));
  }

  TEST_CASE("euler maruyama examples") {
    const auto x = random_tensor<double>({3, 2}, 5), e = random_tensor<double>({3, 2}, 6);
    const auto z = random_tensor<double>({3, 2}, 7);
    CHECK(em_update(x, e, 0.0, 0.5, 0.01, z) == x);

    const Tensor<double> zero({3, 2});
    const auto drift = em_update(x, zero, 0.3, 0.5, 0.01, zero);
    for (Index i = 0; i < x.size(); ++i) CHECK(drift[i] == doctest::Approx(x[i] * (1 + 0.5 * 0.3 * 0.01)).epsilon(1e-14));

    // score = -eps / sqrt(1 - abar) = -1 with abar = 0.75, eps = 0.5.
    const auto one = em_update(Tensor<double>({1}, 1.0), Tensor<double>({1}, 0.5), 0.1, 0.75, 0.01, Tensor<double>({1}, 0.0));
    CHECK(one[0] == doctest::Approx(1 + 0.5 * 0.1 * 0.01 * 1 + 0.1 * 0.01 * -1).epsilon(1e-14));
    const auto noisy = em_update(Tensor<double>({1}, 1.0), Tensor<double>({1}, 0.5), 0.1, 0.75, 0.01, Tensor<double>({1}, 2.0));
    CHECK(noisy[0] == doctest::Approx(0.9995 + std::sqrt(0.1 * 0.01) * 2.0).epsilon(1e-14));

    const auto s = make_linear_schedule(10);
    CHECK_THROWS(em_step(x, 0.05, e, s, 0.1, z));  // would step past u = 0
    CHECK_THROWS(em_step(x, 0.5, e, s, 0.0, z));
  }

  TEST_CASE("ddim timesteps are evenly spaced with both endpoints") {
    CHECK(ddim_timesteps(1000, 1) == std::vector<Index>{999});
    CHECK(ddim_timesteps(10, 4) == std::vector<Index>{9, 6, 3, 0});
    CHECK(ddim_timesteps(5, 5) == std::vector<Index>{4, 3, 2, 1, 0});
    CHECK_THROWS(ddim_timesteps(10, 11));
    CHECK_THROWS(ddim_timesteps(10, 0));
  }

  TEST_CASE("zero epsilon ddim collapses to a rescaling") {
    const auto s = make_linear_schedule(100);
    for (Index n : {1, 7, 100}) {
      SamplerSpec spec;
      spec.num_steps = n;
      spec.clamp_output = false;
      spec.seed = 3;
      std::vector<Tensor<double>> inputs;
      const auto r = run_sampler<double>(zero_model(&inputs), spec, s, {2, 3, 4, 4});
      const double factor = 1.0 / std::sqrt(s.alpha_bar(99));
      const auto& xT = inputs.front();
      for (Index i = 0; i < xT.size(); ++i) REQUIRE(r.samples[i] == doctest::Approx(xT[i] * factor).epsilon(1e-10));
      // every intermediate state sits on the sqrt(abar_t) trajectory
      for (std::size_t k = 0; k < inputs.size(); ++k) {
        const double ratio = std::sqrt(s.alpha_bar(static_cast<Index>(r.timesteps[k])) / s.alpha_bar(99));
        REQUIRE(inputs[k][0] == doctest::Approx(xT[0] * ratio).epsilon(1e-10));
      }
    }
  }

  TEST_CASE("output is clamped") {
    const auto s = make_linear_schedule(100);
    SamplerSpec spec;
    spec.num_steps = 5;
    const auto r = run_sampler<double>(zero_model(), spec, s, {4, 3, 4, 4});
    CHECK(max_abs(r.samples) <= 1.0);
    CHECK(max_abs(r.samples) == 1.0);  // x_T / sqrt(abar) overshoots for some entries
  }

  TEST_CASE("timestep sequences decrease and end at zero") {
    Gen gen(33);
    for (int trial = 0; trial < 40; ++trial) {
      const Index T = gen.integer(2, 300);
      const auto s = make_linear_schedule(T);
      SamplerSpec spec;
      spec.family = gen.pick(std::vector<SamplerFamily>{SamplerFamily::Ancestral, SamplerFamily::DDIM, SamplerFamily::EulerMaruyama});
      spec.num_steps = trial % 4 == 0 ? T : gen.integer(1, T);
      spec.eta = gen.uniform(0.0, 1.0);
      spec.seed = gen.seed();
      const auto r = run_sampler<double>(zero_model(), spec, s, {1, 1});
      INFO("family " << to_string(spec.family) << " T " << T << " n " << spec.num_steps);
      REQUIRE(static_cast<Index>(r.timesteps.size()) == spec.num_steps);
      for (std::size_t i = 1; i < r.timesteps.size(); ++i) REQUIRE(r.timesteps[i] < r.timesteps[i - 1]);
      if (spec.num_steps == 1) {
        REQUIRE(r.timesteps.back() == doctest::Approx(double(T - 1)));  // one jump from T-1 to clean data
      } else if (spec.family == SamplerFamily::EulerMaruyama && spec.num_steps < T) {
        // The network sees the start of the last interval [0, 1/n].
        REQUIRE(r.timesteps.back() == doctest::Approx(double(T) / double(spec.num_steps) - 1.0));
      } else {
        REQUIRE(r.timesteps.back() == 0.0);
      }
      REQUIRE(r.timesteps.front() == doctest::Approx(double(T - 1)));
    }
  }

  TEST_CASE("model call accounting follows guidance mode") {
    const auto s = make_linear_schedule(50);
    auto bundle = ConditioningBundle<double>::unconditional(2);
    bundle.labels = std::vector<Index>{0, 1};
    bundle.dropped = {false, false};
    Index calls = 0, dropped_calls = 0;
    EpsilonModel<double> model = [&](const Tensor<double>& x, std::span<const double>, const ConditioningBundle<double>* c) {
      ++calls;
      if (c && c->batch_size() == 2 && c->is_dropped(0) && c->is_dropped(1)) ++dropped_calls;
      return Tensor<double>(x.shape());
    };
    for (auto family : {SamplerFamily::DDIM, SamplerFamily::Ancestral, SamplerFamily::EulerMaruyama}) {
      for (Index n : {1, 10, 50}) {
        SamplerSpec spec;
        spec.family = family;
        spec.num_steps = n;
        spec.guidance = {GuidanceMode::ClassifierFree, 3.0};
        calls = dropped_calls = 0;
        auto r = run_sampler(model, spec, s, {2, 1}, &bundle);
        CHECK(calls == 2 * n);
        CHECK(r.model_calls == 2 * n);
        CHECK(dropped_calls == n);
        spec.guidance = {GuidanceMode::None, 3.0};
        calls = 0;
        r = run_sampler(model, spec, s, {2, 1}, &bundle);
        CHECK(calls == n);
        CHECK(r.model_calls == n);
      }
    }
    SamplerSpec spec;
    spec.guidance = {GuidanceMode::ClassifierFree, 2.0};
    CHECK_THROWS(run_sampler<double>(model, spec, s, {2, 1}, nullptr));
  }

  TEST_CASE("classifier guidance with zero weight changes nothing") {
    const auto s = make_linear_schedule(40);
    EpsilonModel<double> model = [](const Tensor<double>& x, std::span<const double>, const ConditioningBundle<double>*) {
      Tensor<double> out = x;
      out.array() *= 0.3;
      return out;
    };
    ClassifierGradient<double> grad = [](const Tensor<double>& x, std::span<const double>) {
      Tensor<double> g(x.shape(), 1.0);
      return g;
    };
    SamplerSpec spec;
    spec.num_steps = 10;
    spec.seed = 4;
    const auto plain = run_sampler(model, spec, s, {2, 3, 2, 2});
    spec.guidance = {GuidanceMode::Classifier, 0.0};
    const auto guided0 = run_sampler<double>(model, spec, s, {2, 3, 2, 2}, nullptr, grad);
    CHECK(plain.samples == guided0.samples);
    spec.guidance = {GuidanceMode::Classifier, 2.0};
    const auto guided = run_sampler<double>(model, spec, s, {2, 3, 2, 2}, nullptr, grad);
    CHECK_FALSE(plain.samples == guided.samples);
  }

  TEST_CASE("rejects more steps than the schedule has") {
    const auto s = make_linear_schedule(10);
    SamplerSpec spec;
    spec.num_steps = 11;
    CHECK_THROWS(run_sampler<double>(zero_model(), spec, s, {1, 1}));
  }

  TEST_CASE("same seed gives bitwise identical samples") {
    const auto s = make_cosine_schedule(100);
    EpsilonModel<float> model = [](const Tensor<float>& x, std::span<const double> ts, const ConditioningBundle<float>*) {
      Tensor<float> out = x;
      out.array() = (out.array() * static_cast<float>(0.01 * ts[0])).sin();
      return out;
    };
    for (auto family : {SamplerFamily::DDIM, SamplerFamily::Ancestral, SamplerFamily::EulerMaruyama}) {
      SamplerSpec spec;
      spec.family = family;
      spec.num_steps = 20;
      spec.seed = 99;
      const auto a = run_sampler(model, spec, s, {2, 3, 4, 4});
      const auto b = run_sampler(model, spec, s, {2, 3, 4, 4});
      CHECK(a.samples == b.samples);
      spec.seed = 100;
      CHECK_FALSE(run_sampler(model, spec, s, {2, 3, 4, 4}).samples == a.samples);
    }
  }

  TEST_CASE("full-chain samplers match closed-form gaussian moments") {
    const auto s = make_linear_schedule(1000);
    const GaussianOracle oracle{0.3, 0.5, &s};
    const Index n = 100000;
    struct Arm {
      SamplerFamily family;
      double eta;
      Moments expected;
    };
    const Arm arms[] = {{SamplerFamily::Ancestral, 0.0, ancestral_moments(oracle, s)},
                        {SamplerFamily::DDIM, 1.0, ddim_moments(oracle, s, 1.0)}};
    for (const auto& arm : arms) {
      SamplerSpec spec;
      spec.family = arm.family;
      spec.num_steps = 1000;
      spec.eta = arm.eta;
      spec.clamp_output = false;
      spec.seed = 2024;
      const auto r = run_sampler(oracle.model(), spec, s, {n, 1});
      const Moments got = empirical(r.samples);
      const double se_mean = std::sqrt(arm.expected.var / double(n));
      const double se_var = arm.expected.var * std::sqrt(2.0 / double(n - 1));
      INFO("family " << to_string(arm.family) << " mean " << got.mean << " vs " << arm.expected.mean << ", var "
                     << got.var << " vs " << arm.expected.var);
      CHECK(std::abs(got.mean - arm.expected.mean) <= 3 * se_mean);
      CHECK(std::abs(got.var - arm.expected.var) <= 3 * se_var);
      // Sanity: the long chain lands close to the data law.
      CHECK(std::abs(arm.expected.mean - oracle.mu) < 0.01);
      CHECK(std::abs(arm.expected.var - oracle.sd * oracle.sd) < 0.01);
    }
  }
}
