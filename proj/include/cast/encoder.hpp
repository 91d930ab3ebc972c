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

// Small convolutional encoder: a stack of stride-2 3x3 conv + ReLU stages, a
// global average pool and a linear head whose output is L2-normalized. The
// last stage's post-ReLU activation is exposed for Grad-CAM.

#pragma once

#include "cast/autodiff.hpp"
#include "cast/image.hpp"

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace cast {

struct EncoderConfig {
  int input_size = 64;
  std::vector<int> widths{16, 32, 64};
  int grid_size = 8;
  int embedding_dim = 64;

  int channels() const { return widths.back(); }

  void validate() const {
    if (widths.empty()) throw std::invalid_argument("encoder: at least one conv stage is required");
    for (int w : widths) {
      if (w <= 0) throw std::invalid_argument("encoder: channel widths must be positive");
    }
    if (embedding_dim <= 0) throw std::invalid_argument("encoder: embedding_dim must be positive");
    if (input_size <= 0 || input_size % (1 << widths.size()) != 0 ||
        grid_size != input_size >> widths.size()) {
      throw std::invalid_argument("encoder: grid_size must equal input_size / 2^stages (input " +
                                  std::to_string(input_size) + ", grid " + std::to_string(grid_size) + ", " +
                                  std::to_string(widths.size()) + " stages)");
    }
  }
  bool operator==(const EncoderConfig&) const = default;
};

/// Ordered, named parameter tensors.
template <typename S>
class ParameterSet {
 public:
  void add(std::string name, ad::Tensor<S> value) {
    names_.push_back(std::move(name));
    tensors_.push_back(std::move(value));
  }

  std::size_t size() const { return tensors_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  std::vector<ad::Tensor<S>>& tensors() { return tensors_; }
  const std::vector<ad::Tensor<S>>& tensors() const { return tensors_; }
  ad::Tensor<S>& operator[](std::size_t i) { return tensors_[i]; }
  const ad::Tensor<S>& operator[](std::size_t i) const { return tensors_[i]; }

  const ad::Tensor<S>& at(std::string_view name) const {
    for (std::size_t i = 0; i < names_.size(); ++i) {
      if (names_[i] == name) return tensors_[i];
    }
    throw std::out_of_range("no parameter named '" + std::string(name) + "'");
  }

  /// Deep copy with fresh storage; tracked as leaves iff `requires_grad`.
  ParameterSet copy(bool requires_grad) const {
    ParameterSet out;
    for (std::size_t i = 0; i < size(); ++i) {
      out.add(names_[i], ad::Tensor<S>(tensors_[i].shape(), tensors_[i].values(), requires_grad));
    }
    return out;
  }

  bool same_layout(const ParameterSet& other) const {
    if (names_ != other.names_) return false;
    for (std::size_t i = 0; i < size(); ++i) {
      if (tensors_[i].shape() != other.tensors_[i].shape()) return false;
    }
    return true;
  }

  bool bit_equal(const ParameterSet& other) const {
    if (!same_layout(other)) return false;
    for (std::size_t i = 0; i < size(); ++i) {
      if (tensors_[i].values() != other.tensors_[i].values()) return false;
    }
    return true;
  }

 private:
  std::vector<std::string> names_;
  std::vector<ad::Tensor<S>> tensors_;
};

template <typename S>
struct EncoderOutput {
  ad::Tensor<S> embedding;   // [embedding_dim], unit norm
  ad::Tensor<S> conv5_acts;  // [channels, grid, grid], post-ReLU
};

inline std::string conv_weight_name(std::size_t stage) { return "conv" + std::to_string(stage + 1) + ".weight"; }
inline std::string conv_bias_name(std::size_t stage) { return "conv" + std::to_string(stage + 1) + ".bias"; }

/// Kaiming-uniform weights (bound sqrt(6 / fan_in), variance 2 / fan_in) and
/// zero biases, reproducible from `seed`.
template <typename S>
ParameterSet<S> init_params(const EncoderConfig& config, std::uint64_t seed, bool requires_grad = true) {
  config.validate();
  std::mt19937_64 rng(seed);
  auto kaiming = [&rng](ad::Shape shape, ad::Index fan_in) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-bound, bound);
    typename ad::Tensor<S>::Vector v(ad::numel_of(shape));
    for (auto& x : v) x = static_cast<S>(u(rng));
    return ad::Tensor<S>(std::move(shape), std::move(v));
  };
  ParameterSet<S> params;
  ad::Index in_channels = 3;
  for (std::size_t s = 0; s < config.widths.size(); ++s) {
    const ad::Index out = config.widths[s];
    params.add(conv_weight_name(s), kaiming({out, in_channels, 3, 3}, in_channels * 9));
    params.add(conv_bias_name(s), ad::Tensor<S>::zeros({out}));
    in_channels = out;
  }
  params.add("head.weight", kaiming({config.embedding_dim, in_channels}, in_channels));
  params.add("head.bias", ad::Tensor<S>::zeros({config.embedding_dim}));
  return params.copy(requires_grad);
}

inline constexpr float kEmbeddingEps = 1e-12f;

/// Pure function of (params, image). `image` is [3, input_size, input_size],
/// already normalized (see to_tensor). While grad mode is on, conv5_acts is
/// always grad-tracking, even when the parameters are not.
template <typename S>
EncoderOutput<S> forward(const EncoderConfig& config, const ParameterSet<S>& params, const ad::Tensor<S>& image) {
  const ad::Index size = config.input_size;
  if (image.shape() != ad::Shape{3, size, size}) {
    throw ad::ShapeError("encoder: expected image of shape " + ad::to_string({3, size, size}) + ", got " +
                         ad::to_string(image.shape()));
  }
  if (params.size() != 2 * config.widths.size() + 2) {
    throw std::invalid_argument("encoder: parameter set does not match configuration");
  }
  ad::Tensor<S> x = ad::reshape(image, {1, 3, size, size});
  for (std::size_t s = 0; s < config.widths.size(); ++s) {
    x = ad::relu(ad::bias_add(ad::conv2d(x, params[2 * s], ad::ConvGeometry{2, 1}), params[2 * s + 1]));
  }
  const ad::Index channels = config.channels(), grid = config.grid_size;
  EncoderOutput<S> out;
  out.conv5_acts = ad::reshape(x, {channels, grid, grid});
  if (ad::grad_enabled() && !out.conv5_acts.requires_grad()) {
    // Frozen parameters: root a graph at the activations so Grad-CAM still works.
    out.conv5_acts = ad::Tensor<S>(out.conv5_acts.shape(), out.conv5_acts.values(), true);
  }
  const auto pooled = ad::global_avg_pool(ad::reshape(out.conv5_acts, {1, channels, grid, grid}));
  const auto& head_w = params[params.size() - 2];
  const auto& head_b = params[params.size() - 1];
  const auto z = ad::add(ad::reshape(ad::matmul(head_w, ad::reshape(pooled, {channels, 1})), {head_b.numel()}),
                         head_b);
  out.embedding = ad::l2_normalize(z, static_cast<S>(kEmbeddingEps));
  return out;
}

/// Pixels in [0,1] mapped to (x - 0.5) / 0.5 per channel, laid out [3,H,W].
template <typename S>
ad::Tensor<S> to_tensor(const Image& image) {
  const ad::Index h = image.height(), w = image.width();
  typename ad::Tensor<S>::Vector v(3 * h * w);
  for (int c = 0; c < 3; ++c) {
    for (ad::Index i = 0; i < h * w; ++i) {
      v(c * h * w + i) = (static_cast<S>(image.rgb[c].data()[i]) - S(0.5)) / S(0.5);
    }
  }
  return ad::Tensor<S>({3, h, w}, std::move(v));
}

}  // namespace cast
