// Copyright (C) 2026 The vitdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "vitdiff/trainer.hpp"

#include <cmath>
#include <sstream>

namespace vitdiff {

void TrainConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& msg) {
    throw std::invalid_argument("train." + field + ": " + msg);
  };
  if (batch_size < 1) fail("batch_size", "must be >= 1");
  if (!(learning_rate >= 0.0)) fail("learning_rate", "must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) fail("betas", "beta1 must lie in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) fail("betas", "beta2 must lie in [0, 1)");
  if (!(adam_eps > 0.0)) fail("adam_eps", "must be > 0");
  if (!(weight_decay >= 0.0)) fail("weight_decay", "must be >= 0");
  if (!(ema_decay >= 0.0 && ema_decay <= 1.0)) fail("ema_decay", "must lie in [0, 1]");
  if (max_iterations < 1) fail("max_iterations", "must be >= 1");
  if (grad_clip && !(*grad_clip > 0.0)) fail("grad_clip", "must be > 0 when set");
  if (warmup_steps < 0) fail("warmup_steps", "must be >= 0");
  if (!(p_drop >= 0.0 && p_drop <= 1.0)) fail("p_drop", "must lie in [0, 1]");
}

NonFiniteLossError::NonFiniteLossError(Index iteration, double loss)
    : std::runtime_error("non-finite loss " + std::to_string(loss) + " at iteration " + std::to_string(iteration)),
      iteration_(iteration) {}

// ------------------------------------------------------------ dataset

template <typename S>
Tensor<S> Dataset<S>::gather_images(std::span<const Index> indices) const {
  const Index per = images.size() / std::max<Index>(size(), 1);
  Shape shape = images.shape();
  shape[0] = static_cast<Index>(indices.size());
  Tensor<S> out(shape);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const Index j = indices[i];
    if (j < 0 || j >= size()) throw std::out_of_range("dataset index " + std::to_string(j));
    std::copy_n(images.data() + j * per, per, out.data() + static_cast<Index>(i) * per);
  }
  return out;
}

template <typename S>
std::optional<ConditioningBundle<S>> Dataset<S>::gather_conditioning(std::span<const Index> indices) const {
  if (!labels && !text) return std::nullopt;
  ConditioningBundle<S> bundle;
  const Index B = static_cast<Index>(indices.size());
  bundle.dropped.assign(static_cast<std::size_t>(B), false);
  if (labels) {
    bundle.labels.emplace();
    for (Index j : indices) bundle.labels->push_back(labels->at(static_cast<std::size_t>(j)));
  }
  if (text) {
    std::vector<std::string> selected;
    for (Index j : indices) selected.push_back(keys.at(static_cast<std::size_t>(j)));
    bundle.sequence = text->gather<S>(selected);
    bundle.mask = std::vector<std::uint8_t>(static_cast<std::size_t>(B * text->context()), 1);
  }
  return bundle;
}

// ------------------------------------------------------------ optimizer

template <typename S>
AdamW<S>::AdamW(const ParameterStore<S>& params) {
  for (const auto& p : params) {
    m_.emplace_back(p->shape());
    v_.emplace_back(p->shape());
  }
}

template <typename S>
void AdamW<S>::step(ParameterStore<S>& params, double lr, double beta1, double beta2, double eps,
                    double weight_decay) {
  if (m_.size() != params.size()) throw std::logic_error("AdamW: parameter table changed size");
  ++steps_;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(steps_));
  const S b1 = static_cast<S>(beta1), b2 = static_cast<S>(beta2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter<S>& p = params[i];
    auto m = m_[i].array();
    auto v = v_[i].array();
    if (p.has_grad()) {
      const auto g = p.grad_buffer().array();
      m = b1 * m + (S(1) - b1) * g;
      v = b2 * v + (S(1) - b2) * g * g;
    } else {
      m *= b1;
      v *= b2;
    }
    auto w = p.value().array();
    if (weight_decay != 0.0) w -= static_cast<S>(lr * weight_decay) * w;
    w -= static_cast<S>(lr) * ((m / static_cast<S>(c1)) / ((v / static_cast<S>(c2)).sqrt() + static_cast<S>(eps)));
  }
}

template <typename S>
void ema_update(std::vector<Tensor<S>>& ema, const std::vector<const Tensor<S>*>& params, double decay) {
  if (ema.size() != params.size()) throw std::invalid_argument("ema_update: table sizes differ");
  const S d = static_cast<S>(decay), r = static_cast<S>(1.0 - decay);
  for (std::size_t i = 0; i < ema.size(); ++i) {
    require_same_shape(ema[i], *params[i], "ema_update");
    ema[i].array() = d * ema[i].array() + r * params[i]->array();
  }
}

template <typename S>
double clip_grad_norm(ParameterStore<S>& params, double max_norm) {
  double total = 0.0;
  for (auto& p : params)
    if (p->has_grad()) total += p->grad_buffer().array().template cast<double>().square().sum();
  const double norm = std::sqrt(total);
  if (norm > max_norm) {
    const S factor = static_cast<S>(max_norm / (norm + 1e-12));
    for (auto& p : params)
      if (p->has_grad()) p->grad_buffer().array() *= factor;
  }
  return norm;
}

// ------------------------------------------------------------ trainer

template <typename S>
Trainer<S>::Trainer(Denoiser<S>& model, const NoiseSchedule& schedule, TrainConfig config, std::string config_text)
    : model_(model),
      schedule_(schedule),
      config_(std::move(config)),
      config_text_(std::move(config_text)),
      optimizer_(model.parameters()),
      rng_(config_.seed) {
  config_.validate();
  for (const auto& p : model_.parameters()) ema_.push_back(p->value());
}

template <typename S>
double Trainer<S>::current_learning_rate() const {
  if (config_.warmup_steps <= 0) return config_.learning_rate;
  const double frac = static_cast<double>(iteration_ + 1) / static_cast<double>(config_.warmup_steps);
  return config_.learning_rate * std::min(1.0, frac);
}

template <typename S>
double Trainer<S>::step(const Tensor<S>& x0, const ConditioningBundle<S>* cond) {
  if (x0.rank() != 4) throw ShapeError("train step expects an image batch [B, 3, H, W]");
  const Index B = x0.dim(0);
  std::uniform_int_distribution<Index> pick_t(0, schedule_.num_steps() - 1);
  std::vector<Index> t(static_cast<std::size_t>(B));
  for (auto& v : t) v = pick_t(rng_);
  const Tensor<S> eps = Tensor<S>::randn(x0.shape(), rng_);
  std::optional<ConditioningBundle<S>> bundle;
  if (cond) bundle = apply_conditioning_dropout(*cond, config_.p_drop, rng_);

  const Tensor<S> x_t = q_sample(x0, t, eps, schedule_);
  const std::vector<double> t_model(t.begin(), t.end());
  model_.parameters().zero_grad();
  ForwardOptions options{true, &rng_};
  const Var<S> prediction = model_.forward(constant(x_t), t_model, bundle ? &*bundle : nullptr, options);
  const Var<S> loss = mse(prediction, constant(eps));
  const double value = static_cast<double>(loss.value().item());
  if (!std::isfinite(value)) throw NonFiniteLossError(iteration_ + 1, value);
  backward(loss);

  if (config_.grad_clip) clip_grad_norm(model_.parameters(), *config_.grad_clip);
  optimizer_.step(model_.parameters(), current_learning_rate(), config_.beta1, config_.beta2, config_.adam_eps,
                  config_.weight_decay);
  std::vector<const Tensor<S>*> values;
  for (const auto& p : model_.parameters()) values.push_back(&p->var().value());
  ema_update(ema_, values, config_.ema_decay);
  model_.parameters().zero_grad();
  ++iteration_;
  return value;
}

template <typename S>
double Trainer<S>::train_iteration(const Dataset<S>& data) {
  if (data.size() == 0) throw std::invalid_argument("training dataset is empty");
  std::uniform_int_distribution<Index> pick(0, data.size() - 1);
  std::vector<Index> idx(static_cast<std::size_t>(config_.batch_size));
  for (auto& i : idx) i = pick(rng_);
  const Tensor<S> x0 = data.gather_images(idx);
  const auto cond = data.gather_conditioning(idx);
  return step(x0, cond ? &*cond : nullptr);
}

template <typename S>
void Trainer<S>::load_ema_into_model() {
  auto& params = model_.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) params[i].value() = ema_[i];
}

template <typename S>
Checkpoint Trainer<S>::snapshot() const {
  Checkpoint c;
  c.config_text = config_text_;
  c.config_hash = fnv1a64(config_text_);
  c.iteration = iteration_;
  c.optimizer_steps = optimizer_.steps();
  std::ostringstream rng_text;
  rng_text << rng_;
  c.rng_state = rng_text.str();
  const auto& params = model_.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    c.model.push_back(NamedTensor::from(p.name(), p.value()));
    c.ema.push_back(NamedTensor::from(p.name(), ema_[i]));
    c.optimizer.push_back(NamedTensor::from("m." + p.name(), optimizer_.first_moments()[i]));
    c.optimizer.push_back(NamedTensor::from("v." + p.name(), optimizer_.second_moments()[i]));
  }
  return c;
}

template <typename S>
void Trainer<S>::restore(const Checkpoint& c) {
  if (!config_text_.empty() && c.config_hash != fnv1a64(config_text_)) {
    throw CheckpointError(CheckpointErrorKind::ConfigMismatch,
                          "checkpoint was written for a different configuration (config hash mismatch)");
  }
  auto lookup = [&](const std::vector<NamedTensor>& table, const std::string& name, const char* what) {
    const NamedTensor* t = c.find(table, name);
    if (!t) throw CheckpointError(CheckpointErrorKind::MissingTensor, std::string(what) + " tensor '" + name + "' missing");
    return t;
  };
  auto& params = model_.parameters();
  std::vector<Tensor<S>> model_values, ema_values, m, v;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    model_values.push_back(lookup(c.model, p.name(), "model")->template to_tensor<S>(p.shape()));
    ema_values.push_back(lookup(c.ema, p.name(), "ema")->template to_tensor<S>(p.shape()));
    m.push_back(lookup(c.optimizer, "m." + p.name(), "optimizer")->template to_tensor<S>(p.shape()));
    v.push_back(lookup(c.optimizer, "v." + p.name(), "optimizer")->template to_tensor<S>(p.shape()));
  }
  Rng rng;
  std::istringstream rng_text(c.rng_state);
  rng_text >> rng;
  if (!rng_text) throw CheckpointError(CheckpointErrorKind::Corrupt, "unreadable RNG state in checkpoint");

  for (std::size_t i = 0; i < params.size(); ++i) params[i].value() = std::move(model_values[i]);
  ema_ = std::move(ema_values);
  optimizer_.first_moments() = std::move(m);
  optimizer_.second_moments() = std::move(v);
  optimizer_.set_steps(c.optimizer_steps);
  iteration_ = c.iteration;
  rng_ = rng;
}

#define VITDIFF_INSTANTIATE_TRAINER(S)                                                             \
  template struct Dataset<S>;                                                                      \
  template class AdamW<S>;                                                                         \
  template void ema_update(std::vector<Tensor<S>>&, const std::vector<const Tensor<S>*>&, double); \
  template double clip_grad_norm(ParameterStore<S>&, double);                                      \
  template class Trainer<S>;

VITDIFF_INSTANTIATE_TRAINER(float)
VITDIFF_INSTANTIATE_TRAINER(double)

}  // namespace vitdiff
