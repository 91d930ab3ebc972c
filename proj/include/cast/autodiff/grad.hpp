// Copyright 2026 The CAST Authors. All rights reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include "cast/autodiff/ops.hpp"

#include <span>
#include <unordered_map>

namespace cast::ad {

/// Nodes reachable from `root`, inputs before consumers. Throws GraphError if a
/// cycle is found.
template <typename S>
std::vector<Node<S>*> topological_order(const Node<S>* root) {
  enum class Mark : unsigned char { kActive, kDone };
  std::vector<Node<S>*> order;
  if (!root) return order;
  std::unordered_map<const Node<S>*, Mark> marks;
  // (node, next input to visit)
  std::vector<std::pair<Node<S>*, std::size_t>> stack;
  stack.emplace_back(const_cast<Node<S>*>(root), 0);
  marks[root] = Mark::kActive;
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<S>* child = node->inputs[next++].node().get();
      if (!child) continue;
      auto it = marks.find(child);
      if (it == marks.end()) {
        marks[child] = Mark::kActive;
        stack.emplace_back(child, 0);
      } else if (it->second == Mark::kActive) {
        throw GraphError("computation graph contains a cycle at op '" + std::string(child->op) + "'");
      }
    } else {
      marks[node] = Mark::kDone;
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

/// Gradients of the scalar `output` with respect to each of `inputs`.
///
/// With build_graph set, the backward pass is recorded so the returned
/// gradients are themselves differentiable. Only nodes lying on a path from an
/// input to the output are visited.
template <typename S>
std::vector<Tensor<S>> grad(const Tensor<S>& output, std::span<const Tensor<S>> inputs, bool build_graph = false) {
  if (output.numel() != 1) {
    throw GraphError("grad: output must be a scalar, got shape " + to_string(output.shape()));
  }
  const auto order = topological_order<S>(output.node().get());
  std::unordered_map<const Node<S>*, std::size_t> position;
  position.reserve(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) position.emplace(order[i], i);

  std::vector<char> needed(order.size(), 0);
  std::vector<char> is_target(order.size(), 0);
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Node<S>* node = inputs[k].node().get();
    auto it = node ? position.find(node) : position.end();
    if (it == position.end()) {
      throw GraphError("grad: input " + std::to_string(k) + " (shape " + to_string(inputs[k].shape()) +
                       ") is not in the graph of the output");
    }
    needed[it->second] = 1;
    is_target[it->second] = 1;
  }
  if (order.empty()) return {};
  for (std::size_t i = 0; i < order.size(); ++i) {
    for (const auto& in : order[i]->inputs) {
      if (in.node() && needed[position.at(in.node().get())]) needed[i] = 1;
    }
  }

  GradModeGuard mode(build_graph);
  std::vector<Tensor<S>> grads(order.size());
  std::vector<bool> has_grad(order.size(), false);
  grads.back() = Tensor<S>::ones(output.shape());
  has_grad.back() = true;

  for (std::size_t i = order.size(); i-- > 0;) {
    Node<S>* node = order[i];
    if (!needed[i] || !has_grad[i] || node->inputs.empty()) continue;
    if (build_graph && !node->differentiable_backward) {
      throw GraphError("grad: op '" + std::string(node->op) + "' does not support higher-order gradients");
    }
    std::vector<bool> needs(node->inputs.size(), false);
    for (std::size_t j = 0; j < needs.size(); ++j) {
      const auto& in = node->inputs[j];
      needs[j] = in.node() && needed[position.at(in.node().get())];
    }
    auto input_grads = node->backward(grads[i], needs);
    for (std::size_t j = 0; j < needs.size(); ++j) {
      if (!needs[j]) continue;
      const std::size_t p = position.at(node->inputs[j].node().get());
      if (has_grad[p]) {
        grads[p] = add(grads[p], input_grads[j]);
      } else {
        grads[p] = std::move(input_grads[j]);
        has_grad[p] = true;
      }
    }
    if (!build_graph && !is_target[i]) grads[i] = Tensor<S>{};  // release early
  }

  std::vector<Tensor<S>> result;
  result.reserve(inputs.size());
  for (const auto& in : inputs) {
    const std::size_t p = position.at(in.node().get());
    result.push_back(has_grad[p] ? grads[p] : Tensor<S>::zeros(in.shape()));
  }
  return result;
}

template <typename S>
std::vector<Tensor<S>> grad(const Tensor<S>& output, std::initializer_list<Tensor<S>> inputs,
                            bool build_graph = false) {
  const std::vector<Tensor<S>> list(inputs);
  return grad(output, std::span<const Tensor<S>>(list), build_graph);
}

template <typename S>
std::vector<Tensor<S>> grad(const Tensor<S>& output, const std::vector<Tensor<S>>& inputs,
                            bool build_graph = false) {
  return grad(output, std::span<const Tensor<S>>(inputs), build_graph);
}

}  // namespace cast::ad
