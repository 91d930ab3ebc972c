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

#include "cast/contrast.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace cast {

NegativeQueue::NegativeQueue(Eigen::Index capacity, Eigen::Index dim) {
  if (capacity <= 0 || dim <= 0) {
    throw std::invalid_argument("queue capacity and key dimension must be positive");
  }
  storage_ = RowMatrixF::Zero(capacity, dim);
}

NegativeQueue NegativeQueue::restore(RowMatrixF storage, Eigen::Index cursor, Eigen::Index fill) {
  NegativeQueue q(storage.rows(), storage.cols());
  if (cursor < 0 || cursor >= q.capacity() || fill < 0 || fill > q.capacity()) {
    throw std::invalid_argument("queue state out of range: cursor " + std::to_string(cursor) + ", fill " +
                                std::to_string(fill) + ", capacity " + std::to_string(q.capacity()));
  }
  if (fill < q.capacity() && cursor != fill) {
    throw std::invalid_argument("a partially filled queue must have cursor == fill");
  }
  for (Eigen::Index i = 0; i < fill; ++i) check_key(storage.row(i).transpose(), storage.cols());
  q.storage_ = std::move(storage);
  q.cursor_ = cursor;
  q.fill_ = fill;
  return q;
}

void NegativeQueue::check_key(const Eigen::Ref<const Eigen::VectorXf>& key, Eigen::Index dim) {
  if (key.size() != dim) {
    throw std::invalid_argument("queue expects keys of dimension " + std::to_string(dim) + ", got " +
                                std::to_string(key.size()));
  }
  const float norm = key.norm();
  if (!(std::abs(norm - 1.0f) <= kUnitNormTolerance)) {
    throw std::invalid_argument("queue keys must have unit norm, got " + std::to_string(norm));
  }
}

void NegativeQueue::enqueue(const Eigen::Ref<const Eigen::VectorXf>& key) {
  check_key(key, dim());
  storage_.row(cursor_) = key.transpose();
  cursor_ = (cursor_ + 1) % capacity();
  if (fill_ < capacity()) ++fill_;
}

void NegativeQueue::enqueue_batch(const Eigen::Ref<const RowMatrixF>& keys) {
  for (Eigen::Index i = 0; i < keys.rows(); ++i) check_key(keys.row(i).transpose(), dim());
  for (Eigen::Index i = 0; i < keys.rows(); ++i) enqueue(keys.row(i).transpose());
}

RowMatrixF NegativeQueue::contents() const {
  RowMatrixF out(fill_, dim());
  const Eigen::Index oldest = full() ? cursor_ : 0;
  for (Eigen::Index i = 0; i < fill_; ++i) out.row(i) = storage_.row((oldest + i) % capacity());
  return out;
}

ad::TensorF NegativeQueue::negatives() const {
  const RowMatrixF occupied = storage_.topRows(fill_);
  return ad::TensorF({fill_, dim()}, Eigen::Map<const Eigen::VectorXf>(occupied.data(), occupied.size()));
}

void momentum_update(ParameterSet<float>& key, const ParameterSet<float>& query, float momentum) {
  if (!key.same_layout(query)) {
    throw std::invalid_argument("momentum_update: key and query parameter sets differ in names or shapes");
  }
  if (!(momentum >= 0.0f && momentum <= 1.0f)) {
    throw std::invalid_argument("momentum must lie in [0, 1], got " + std::to_string(momentum));
  }
  const float rest = 1.0f - momentum;
  for (std::size_t i = 0; i < key.size(); ++i) {
    auto& k = key[i].mutable_values();
    const auto& q = query[i].values();
    for (Eigen::Index j = 0; j < k.size(); ++j) k(j) = momentum * k(j) + rest * q(j);
  }
}

MomentumPair MomentumPair::from_query(const ParameterSet<float>& query, float momentum) {
  return MomentumPair{query, query.copy(false), momentum};
}

ad::TensorF info_nce(const ad::TensorF& q, const ad::TensorF& k_pos, const NegativeQueue& queue, float tau) {
  if (queue.empty()) throw std::invalid_argument("info_nce: the negative queue is empty");
  return info_nce(q, k_pos, queue.negatives(), tau);
}

}  // namespace cast
