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

// Momentum-contrast machinery: a FIFO queue of negative keys, the momentum
// (key) encoder update and the InfoNCE loss.

#pragma once

#include "cast/autodiff.hpp"
#include "cast/encoder.hpp"

#include <Eigen/Core>

#include <stdexcept>
#include <string>

namespace cast {

using RowMatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr float kUnitNormTolerance = 1e-5f;

/// Fixed-capacity ring buffer of unit-norm key embeddings. New keys
/// overwrite the oldest once the queue is full.
class NegativeQueue {
 public:
  NegativeQueue(Eigen::Index capacity, Eigen::Index dim);

  /// Rebuilds a queue from serialized state; validates every invariant.
  static NegativeQueue restore(RowMatrixF storage, Eigen::Index cursor, Eigen::Index fill);

  Eigen::Index capacity() const { return storage_.rows(); }
  Eigen::Index dim() const { return storage_.cols(); }
  Eigen::Index fill() const { return fill_; }
  Eigen::Index cursor() const { return cursor_; }
  bool empty() const { return fill_ == 0; }
  bool full() const { return fill_ == capacity(); }

  /// Appends one key. Throws std::invalid_argument on a dimension mismatch or
  /// a key whose norm is not 1 within kUnitNormTolerance.
  void enqueue(const Eigen::Ref<const Eigen::VectorXf>& key);
  /// Appends the rows of `keys` in order. The whole batch is validated before
  /// any slot is written.
  void enqueue_batch(const Eigen::Ref<const RowMatrixF>& keys);

  /// Stored keys from oldest to newest, one per row.
  RowMatrixF contents() const;
  /// Raw slot storage (capacity x dim); only the first `fill` slots written
  /// since construction are meaningful until the queue wraps.
  const RowMatrixF& storage() const { return storage_; }
  /// The occupied slots as a [fill, dim] constant tensor, in slot order.
  ad::TensorF negatives() const;

 private:
  static void check_key(const Eigen::Ref<const Eigen::VectorXf>& key, Eigen::Index dim);

  RowMatrixF storage_;
  Eigen::Index cursor_ = 0;
  Eigen::Index fill_ = 0;
};

/// key <- m * key + (1 - m) * query, elementwise over every tensor.
void momentum_update(ParameterSet<float>& key, const ParameterSet<float>& query, float momentum);

/// Query encoder (trained) and its momentum copy (never trained).
struct MomentumPair {
  ParameterSet<float> query;
  ParameterSet<float> key;
  float momentum = 0.99f;

  /// The key encoder starts as an untracked copy of the query encoder.
  static MomentumPair from_query(const ParameterSet<float>& query, float momentum);
  void update() { momentum_update(key, query, momentum); }
};

/// -log softmax(l)_0 for l = [q.k_pos, q.n_1, ..., q.n_n] / tau. k_pos and
/// `negatives` ([n, dim]) are detached, so only q receives gradient.
template <typename S>
ad::Tensor<S> info_nce(const ad::Tensor<S>& q, const ad::Tensor<S>& k_pos, const ad::Tensor<S>& negatives, S tau) {
  if (!(tau > S(0))) throw std::invalid_argument("info_nce: tau must be positive, got " + std::to_string(tau));
  if (q.rank() != 1 || k_pos.shape() != q.shape()) {
    throw ad::ShapeError("info_nce: q and k_pos must be vectors of equal length, got " + ad::to_string(q.shape()) +
                         " and " + ad::to_string(k_pos.shape()));
  }
  if (negatives.rank() != 2 || negatives.dim(0) == 0 || negatives.dim(1) != q.numel()) {
    throw ad::ShapeError("info_nce: negatives must be a non-empty [n, " + std::to_string(q.numel()) +
                         "] matrix, got " + ad::to_string(negatives.shape()));
  }
  const ad::Index dim = q.numel();
  const auto positive = ad::reshape(ad::dot(q, ad::detach(k_pos)), {1});
  const auto negative =
      ad::reshape(ad::matmul(ad::detach(negatives), ad::reshape(q, {dim, 1})), {negatives.dim(0)});
  const auto logits = ad::scale(ad::concat<S>({positive, negative}), S(1) / tau);
  return ad::sub(ad::logsumexp(logits), ad::reshape(ad::slice(logits, 0, 1), {}));
}

/// Same loss against every key currently in the queue. Throws on an empty
/// queue or tau <= 0.
ad::TensorF info_nce(const ad::TensorF& q, const ad::TensorF& k_pos, const NegativeQueue& queue, float tau);

}  // namespace cast
