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

#include "cast/autodiff/tensor.hpp"

#include <span>

namespace cast::ad {

struct SgdOptions {
  double lr = 0.03;
  double momentum = 0.9;
  double weight_decay = 0.0;
};

/// Velocity buffers, one per parameter, created lazily at zero.
template <typename S>
struct SgdState {
  std::vector<typename Tensor<S>::Vector> velocity;
};

/// v <- momentum * v + g;  p <- p - lr * v - lr * weight_decay * p.
template <typename S>
void sgd_step(std::span<Tensor<S>> params, std::span<const Tensor<S>> grads, SgdState<S>& state,
              const SgdOptions& opt) {
  if (params.size() != grads.size()) {
    throw std::invalid_argument("sgd_step: " + std::to_string(params.size()) + " parameters but " +
                                std::to_string(grads.size()) + " gradients");
  }
  if (!(opt.lr > 0)) throw std::invalid_argument("sgd_step: learning rate must be positive");
  if (state.velocity.empty()) {
    for (const auto& p : params) state.velocity.push_back(Tensor<S>::Vector::Zero(p.numel()));
  }
  if (state.velocity.size() != params.size()) {
    throw std::invalid_argument("sgd_step: optimizer state does not match parameter list");
  }
  const S lr = static_cast<S>(opt.lr);
  const S mu = static_cast<S>(opt.momentum);
  const S decay = static_cast<S>(opt.lr * opt.weight_decay);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params[i].shape()) {
      throw ShapeError("sgd_step: gradient " + to_string(grads[i].shape()) + " for parameter " +
                       to_string(params[i].shape()));
    }
    auto& v = state.velocity[i];
    v = mu * v + grads[i].values();
    auto& p = params[i].mutable_values();
    if (decay != S(0)) {
      p = p - lr * v - decay * p;
    } else {
      p -= lr * v;
    }
  }
}

}  // namespace cast::ad
