// Copyright (C) 2026 The vitdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "vitdiff/tensor.hpp"

#include <functional>
#include <memory>
#include <vector>

namespace vitdiff {

template <typename S>
struct Node {
  Tensor<S> value;
  Tensor<S> grad;  // empty until something flows into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this->grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward;

  Tensor<S>& grad_buffer() {
    if (grad.shape() != value.shape() || grad.size() != value.size()) grad = Tensor<S>(value.shape());
    return grad;
  }
  bool has_grad() const { return grad.size() == value.size() && !value.empty(); }
};

/// Handle to a node in the dynamic computation graph. Copies share the node.
template <typename S>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<S>> node) : node_(std::move(node)) {}

  bool defined() const { return node_ != nullptr; }
  const Tensor<S>& value() const { return node_->value; }
  Tensor<S>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  Index dim(int axis) const { return node_->value.dim(axis); }
  int rank() const { return node_->value.rank(); }
  Index size() const { return node_->value.size(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  /// Gradient accumulated by the last backward pass (zeros if none reached this node).
  Tensor<S> grad() const {
    if (node_->has_grad()) return node_->grad;
    return Tensor<S>(node_->value.shape());
  }
  void zero_grad() { node_->grad = Tensor<S>(); }

  const std::shared_ptr<Node<S>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<S>> node_;
};

/// Global switch for graph recording; sampling runs with recording off so
/// intermediate activations are released as soon as they go out of scope.
bool grad_enabled();
void set_grad_enabled(bool enabled);

class NoGradGuard {
 public:
  NoGradGuard() : previous_(grad_enabled()) { set_grad_enabled(false); }
  ~NoGradGuard() { set_grad_enabled(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename S>
Var<S> constant(Tensor<S> value) {
  auto node = std::make_shared<Node<S>>();
  node->value = std::move(value);
  return Var<S>(std::move(node));
}

/// Trainable leaf. The node is long-lived; gradients accumulate across calls
/// to backward() until zero_grad().
template <typename S>
Var<S> leaf(Tensor<S> value) {
  auto node = std::make_shared<Node<S>>();
  node->value = std::move(value);
  node->requires_grad = true;
  return Var<S>(std::move(node));
}

/// Builds an op result. Parents that do not require grad are dropped; if none
/// remain (or recording is off) the result is a constant.
template <typename S>
Var<S> make_result(Tensor<S> value, std::vector<Var<S>> inputs, std::function<void(Node<S>&)> backward) {
  auto node = std::make_shared<Node<S>>();
  node->value = std::move(value);
  if (grad_enabled()) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
      node->requires_grad = true;
      node->parents.reserve(inputs.size());
      for (const auto& in : inputs) node->parents.push_back(in.node());
      node->backward = std::move(backward);
    }
  }
  return Var<S>(std::move(node));
}

/// Accumulates `delta` into a parent's gradient if that parent participates.
template <typename S>
inline Tensor<S>* parent_grad(Node<S>& self, std::size_t i) {
  auto& p = self.parents[i];
  if (!p || !p->requires_grad) return nullptr;
  return &p->grad_buffer();
}

/// Reverse-mode sweep from `root`. A scalar root is seeded with 1; otherwise
/// `seed` must match the root's shape.
template <typename S>
void backward(const Var<S>& root, const Tensor<S>* seed = nullptr);

extern template void backward<float>(const Var<float>&, const Tensor<float>*);
extern template void backward<double>(const Var<double>&, const Tensor<double>*);

}  // namespace vitdiff
