// Copyright (C) 2026 The vitdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "vitdiff/autograd.hpp"

#include <sstream>
#include <unordered_set>

namespace vitdiff {

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }
void set_grad_enabled(bool enabled) { g_grad_enabled = enabled; }

Index shape_numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) {
    if (d < 0) throw ShapeError("negative dimension in shape " + shape_string(shape));
    n *= d;
  }
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename S>
void backward(const Var<S>& root, const Tensor<S>* seed) {
  if (!root.defined()) throw std::invalid_argument("backward: undefined root");
  if (!root.requires_grad()) return;
  Node<S>* root_node = root.node().get();

  // Iterative post-order DFS gives a topological order (parents before children).
  // Owning pointers: releasing a consumed node's parents must not free nodes
  // that are still queued.
  std::vector<std::shared_ptr<Node<S>>> order;
  std::unordered_set<Node<S>*> visited;
  std::vector<std::pair<std::shared_ptr<Node<S>>, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  visited.insert(root_node);
  while (!stack.empty()) {
    auto& top = stack.back();
    if (top.second < top.first->parents.size()) {
      std::shared_ptr<Node<S>> parent = top.first->parents[top.second++];
      if (parent && parent->requires_grad && visited.insert(parent.get()).second) {
        stack.emplace_back(std::move(parent), 0);
      }
    } else {
      order.push_back(std::move(top.first));
      stack.pop_back();
    }
  }

  Tensor<S>& g = root_node->grad_buffer();
  if (seed) {
    require_same_shape(*seed, root_node->value, "backward seed");
    g.array() += seed->array();
  } else {
    if (root_node->value.size() != 1) {
      throw ShapeError("backward without seed requires a scalar root, got " +
                       shape_string(root_node->value.shape()));
    }
    g[0] += S(1);
  }

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<S>* node = it->get();
    if (!node->backward) continue;  // leaf
    if (node->has_grad()) node->backward(*node);
    // Interior nodes are consumed: release closure, parents and gradient.
    node->backward = nullptr;
    node->parents.clear();
    if (node != root_node) node->grad = Tensor<S>();
  }
}

template void backward<float>(const Var<float>&, const Tensor<float>*);
template void backward<double>(const Var<double>&, const Tensor<double>*);

}  // namespace vitdiff
