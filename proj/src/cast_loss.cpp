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

#include "cast/cast_loss.hpp"

#include <stdexcept>

namespace cast {

std::string_view to_string(SupervisionMode mode) {
  return mode == SupervisionMode::kFullQuery ? "full-query" : "intersection";
}

SupervisionMode parse_supervision_mode(std::string_view text) {
  if (text == "full-query") return SupervisionMode::kFullQuery;
  if (text == "intersection") return SupervisionMode::kIntersection;
  throw std::invalid_argument("unknown supervision mode '" + std::string(text) +
                              "' (expected full-query or intersection)");
}

void LossConfig::validate() const {
  if (!(lambda >= 0.0f)) throw std::invalid_argument("lambda must be non-negative");
  if (!(tau > 0.0f)) throw std::invalid_argument("tau must be positive");
  if (!(eps > 0.0f)) throw std::invalid_argument("eps must be positive");
}

void StepConfig::validate(const EncoderConfig& encoder) const {
  augment.validate();
  loss.validate();
  if (augment.out_size != encoder.input_size) {
    throw std::invalid_argument("crop output size " + std::to_string(augment.out_size) +
                                " differs from encoder input size " + std::to_string(encoder.input_size));
  }
  if (!(sgd.lr > 0.0)) throw std::invalid_argument("lr must be positive");
  if (!(sgd.momentum >= 0.0 && sgd.momentum < 1.0)) throw std::invalid_argument("sgd momentum must lie in [0, 1)");
  if (!(sgd.weight_decay >= 0.0)) throw std::invalid_argument("weight_decay must be non-negative");
}

TrainState TrainState::init(const EncoderConfig& encoder, Eigen::Index queue_capacity, float momentum,
                            std::uint64_t seed) {
  encoder.validate();
  return TrainState{encoder, MomentumPair::from_query(init_params<float>(encoder, seed, true), momentum),
                    NegativeQueue(queue_capacity, encoder.embedding_dim), {}, 0, 0};
}

namespace {

RowMatrixF stack(const std::vector<ad::TensorF>& rows, Eigen::Index dim) {
  RowMatrixF out(static_cast<Eigen::Index>(rows.size()), dim);
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = rows[i].values().transpose();
  return out;
}

}  // namespace

StepResult cast_step(TrainState& state, std::span<const TrainingExample> batch, const StepConfig& config, Rng& rng) {
  config.validate(state.encoder);
  StepResult result;
  std::vector<PreparedSample<float>> samples;
  samples.reserve(batch.size());
  for (const auto& example : batch) {
    try {
      const ViewPair views = make_view_pair(example.image, example.mask, config.augment, rng);
      samples.push_back(prepare_sample<float>(views, state.encoder, config.loss.mode));
    } catch (const DegenerateMaskError&) {
      ++result.skipped;
    }
  }
  state.skipped += result.skipped;
  result.used = static_cast<int>(samples.size());
  ++state.step;
  if (samples.empty()) return result;

  auto& query = state.encoders.query;
  const auto negatives = state.queue.empty() ? ad::TensorF::zeros({0, state.queue.dim()}) : state.queue.negatives();
  const auto losses = batch_losses<float>(state.encoder, query, state.encoders.key, negatives, samples, config.loss);
  result.contrastive = losses.contrastive.item();
  result.attention = losses.attention.item();
  result.total = losses.total.item();

  if (losses.total.requires_grad()) {
    result.grads = ad::grad(losses.total, query.tensors(), false);
  } else {
    for (const auto& p : query.tensors()) result.grads.push_back(ad::TensorF::zeros(p.shape()));
  }
  ad::sgd_step<float>(query.tensors(), result.grads, state.optimizer, config.sgd);
  state.encoders.update();

  result.enqueued = stack(losses.keys, state.queue.dim());
  result.masked_keys = stack(losses.masked_keys, state.queue.dim());
  state.queue.enqueue_batch(result.enqueued);
  return result;
}

}  // namespace cast
