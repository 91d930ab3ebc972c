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

// Attention-supervised contrastive loss.
//
// The query encoder's Grad-CAM map for the score q . k_m (k_m is the key
// embedding of the saliency-masked key crop) is pushed towards the query's
// saliency map with a cosine loss, added to InfoNCE with weight lambda:
//
//   alpha_c = sum_ij d(q . k_m) / dA[c, i, j]
//   G       = relu(sum_c alpha_c A[c])
//   L_att   = 1 - <G, T> / (|G| |T|)
//   L       = L_cont + lambda * L_att

#pragma once

#include "cast/autodiff.hpp"
#include "cast/contrast.hpp"
#include "cast/crop_sampler.hpp"
#include "cast/encoder.hpp"
#include "cast/image.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace cast {

enum class SupervisionMode {
  kFullQuery,     // every salient pixel of the query crop
  kIntersection,  // only salient pixels also inside the key crop
};

std::string_view to_string(SupervisionMode mode);
/// Accepts "full-query" and "intersection".
SupervisionMode parse_supervision_mode(std::string_view text);

struct LossConfig {
  float lambda = 3.0f;
  float tau = 0.07f;
  SupervisionMode mode = SupervisionMode::kFullQuery;
  float eps = 1e-6f;
  /// Differentiate through alpha (true) or treat alpha as a constant.
  bool second_order = true;

  void validate() const;
};

/// x_k * M_k, every channel multiplied by the mask.
template <typename S>
ad::Tensor<S> mask_key(const ad::Tensor<S>& x_k, const SaliencyMask& m_k) {
  if (x_k.rank() != 3 || x_k.dim(1) != m_k.height() || x_k.dim(2) != m_k.width()) {
    throw ad::ShapeError("mask_key: image " + ad::to_string(x_k.shape()) + " does not match mask " +
                         std::to_string(m_k.height()) + "x" + std::to_string(m_k.width()));
  }
  const ad::Index plane = m_k.height() * m_k.width();
  typename ad::Tensor<S>::Vector m(x_k.numel());
  for (ad::Index c = 0; c < x_k.dim(0); ++c) {
    for (ad::Index i = 0; i < plane; ++i) m(c * plane + i) = static_cast<S>(m_k.bits.data()[i]);
  }
  return ad::mul(x_k, ad::Tensor<S>(x_k.shape(), std::move(m)));
}

/// The mask area-averaged onto a grid x grid lattice: each cell holds the
/// salient fraction of its block, in [0, 1]. The mask extent must be a
/// multiple of `grid`.
template <typename S>
ad::Tensor<S> attention_target(const SaliencyMask& m, int grid) {
  if (grid <= 0 || m.height() % grid != 0 || m.width() % grid != 0) {
    throw ad::ShapeError("attention_target: a " + std::to_string(m.height()) + "x" + std::to_string(m.width()) +
                         " mask does not tile into a " + std::to_string(grid) + "x" + std::to_string(grid) +
                         " grid");
  }
  const Eigen::Index bh = m.height() / grid, bw = m.width() / grid;
  typename ad::Tensor<S>::Vector v(grid * grid);
  for (int i = 0; i < grid; ++i) {
    for (int j = 0; j < grid; ++j) {
      const auto count = m.bits.block(i * bh, j * bw, bh, bw).template cast<std::int64_t>().sum();
      v(i * grid + j) = static_cast<S>(count) / static_cast<S>(bh * bw);
    }
  }
  return ad::Tensor<S>({grid, grid}, std::move(v));
}

template <typename S>
struct GradCam {
  ad::Tensor<S> map;    // [grid, grid], non-negative
  ad::Tensor<S> alpha;  // [channels]
};

/// Grad-CAM of the score q . k_m with respect to `conv5_acts` ([C, g, g]),
/// which q must depend on. With `second_order` the map stays differentiable
/// through alpha; otherwise alpha is a constant and only A carries gradient.
template <typename S>
GradCam<S> grad_cam(const ad::Tensor<S>& q, const ad::Tensor<S>& k_m, const ad::Tensor<S>& conv5_acts,
                    bool second_order = true) {
  if (conv5_acts.rank() != 3) {
    throw ad::ShapeError("grad_cam: activations must be [C, g, g], got " + ad::to_string(conv5_acts.shape()));
  }
  const ad::Index c = conv5_acts.dim(0), h = conv5_acts.dim(1), w = conv5_acts.dim(2);
  const auto score = ad::dot(q, ad::detach(k_m));
  const ad::Tensor<S> inputs[] = {conv5_acts};
  const auto d_acts = ad::grad(score, std::span<const ad::Tensor<S>>(inputs), second_order)[0];
  GradCam<S> out;
  out.alpha = ad::reshape(ad::spatial_sum(ad::reshape(d_acts, {1, c, h, w})), {c});
  const auto weighted = ad::matmul(ad::reshape(out.alpha, {1, c}), ad::reshape(conv5_acts, {c, h * w}));
  out.map = ad::reshape(ad::relu(weighted), {h, w});
  return out;
}

/// 1 - cos(G, target) over the flattened grids; both norms are floored at
/// eps, so a zero map scores 1.
template <typename S>
ad::Tensor<S> attention_loss(const ad::Tensor<S>& g, const ad::Tensor<S>& target, S eps) {
  if (g.shape() != target.shape()) {
    throw ad::ShapeError("attention_loss: map " + ad::to_string(g.shape()) + " vs target " +
                         ad::to_string(target.shape()));
  }
  const auto gf = ad::reshape(g, {g.numel()});
  const auto tf = ad::reshape(ad::detach(target), {target.numel()});
  auto norm = [eps](const ad::Tensor<S>& x) { return ad::sqrt(ad::clamp_min(ad::dot(x, x), eps * eps)); };
  const auto cosine = ad::mul(ad::dot(gf, tf), ad::reciprocal(ad::mul(norm(gf), norm(tf))));
  return ad::add_constant(ad::neg(cosine), S(1));
}

/// Constant network inputs for one view pair.
template <typename S>
struct PreparedSample {
  ad::Tensor<S> query;       // x_q, normalized
  ad::Tensor<S> key;         // x_k, normalized
  ad::Tensor<S> masked_key;  // x_k * M_k
  ad::Tensor<S> target;      // area-averaged attention target
};

template <typename S>
PreparedSample<S> prepare_sample(const ViewPair& views, const EncoderConfig& encoder, SupervisionMode mode) {
  PreparedSample<S> p;
  p.query = to_tensor<S>(views.query);
  p.key = to_tensor<S>(views.key);
  p.masked_key = mask_key(p.key, views.key_mask);
  p.target = attention_target<S>(mode == SupervisionMode::kFullQuery ? views.query_mask : views.query_mask_shared,
                                 encoder.grid_size);
  return p;
}

template <typename S>
struct BatchLosses {
  ad::Tensor<S> contrastive;  // mean InfoNCE, 0 when there are no negatives
  ad::Tensor<S> attention;    // mean L_att, 0 when lambda == 0
  ad::Tensor<S> total;        // contrastive + lambda * attention
  std::vector<ad::Tensor<S>> keys;         // unmasked key embeddings k
  std::vector<ad::Tensor<S>> masked_keys;  // k_m; empty when lambda == 0
};

/// Builds the loss graph for a batch. Key-encoder forwards run without
/// recording, so only `query_params` can receive gradient. `negatives` is
/// [n, embedding_dim] and may have n = 0. With lambda == 0 the masked-key and
/// Grad-CAM branch is never evaluated.
template <typename S>
BatchLosses<S> batch_losses(const EncoderConfig& encoder, const ParameterSet<S>& query_params,
                            const ParameterSet<S>& key_params, const ad::Tensor<S>& negatives,
                            std::span<const PreparedSample<S>> samples, const LossConfig& loss) {
  loss.validate();
  if (samples.empty()) throw std::invalid_argument("batch_losses: empty batch");
  const bool use_contrast = negatives.numel() > 0;
  const bool use_attention = loss.lambda > 0.0f;
  BatchLosses<S> out;
  ad::Tensor<S> cont_sum = ad::Tensor<S>::scalar(0), att_sum = ad::Tensor<S>::scalar(0);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    const auto q_out = forward(encoder, query_params, s.query);
    {
      ad::NoGradGuard no_grad;
      out.keys.push_back(forward(encoder, key_params, s.key).embedding);
    }
    if (use_contrast) {
      const auto l = info_nce(q_out.embedding, out.keys.back(), negatives, static_cast<S>(loss.tau));
      cont_sum = i == 0 ? l : ad::add(cont_sum, l);
    }
    if (use_attention) {
      {
        ad::NoGradGuard no_grad;
        out.masked_keys.push_back(forward(encoder, key_params, s.masked_key).embedding);
      }
      const auto cam = grad_cam(q_out.embedding, out.masked_keys.back(), q_out.conv5_acts, loss.second_order);
      const auto l = attention_loss(cam.map, s.target, static_cast<S>(loss.eps));
      att_sum = i == 0 ? l : ad::add(att_sum, l);
    }
  }
  const S inv_n = S(1) / static_cast<S>(samples.size());
  out.contrastive = ad::scale(cont_sum, inv_n);
  out.attention = ad::scale(att_sum, inv_n);
  out.total = use_attention ? ad::add(out.contrastive, ad::scale(out.attention, static_cast<S>(loss.lambda)))
                            : out.contrastive;
  return out;
}

struct TrainingExample {
  Image image;
  SaliencyMask mask;
};

struct StepConfig {
  AugmentConfig augment;
  LossConfig loss;
  ad::SgdOptions sgd;

  void validate(const EncoderConfig& encoder) const;
};

/// Everything that evolves during training.
struct TrainState {
  EncoderConfig encoder;
  MomentumPair encoders;
  NegativeQueue queue;
  ad::SgdState<float> optimizer;
  std::int64_t step = 0;
  std::int64_t skipped = 0;  // samples dropped for an empty saliency mask

  static TrainState init(const EncoderConfig& encoder, Eigen::Index queue_capacity, float momentum,
                         std::uint64_t seed);
};

struct StepResult {
  float contrastive = 0.0f;
  float attention = 0.0f;
  float total = 0.0f;
  int used = 0;
  int skipped = 0;
  std::vector<ad::TensorF> grads;  // d total / d query params, before the update
  RowMatrixF enqueued;             // unmasked keys added to the queue
  RowMatrixF masked_keys;          // k_m embeddings (never enqueued)
};

/// One training iteration: view pairs, losses, SGD on the query encoder,
/// momentum update of the key encoder, then enqueue of the unmasked keys.
/// Samples whose mask is empty while phi > 0 are skipped and counted. With an
/// empty queue (the very first step) the contrastive term is 0.
StepResult cast_step(TrainState& state, std::span<const TrainingExample> batch, const StepConfig& config, Rng& rng);

}  // namespace cast
