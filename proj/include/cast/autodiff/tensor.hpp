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

#include <Eigen/Core>

#include <algorithm>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace cast::ad {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

/// Raised when operand extents are inconsistent with an operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised by grad() when the requested derivative does not exist in the graph.
class GraphError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline Index numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode(); }

/// Scoped switch for graph recording on the current thread.
class GradModeGuard {
 public:
  explicit GradModeGuard(bool enabled) : previous_(detail::grad_mode()) {
    detail::grad_mode() = enabled;
  }
  ~GradModeGuard() { detail::grad_mode() = previous_; }
  GradModeGuard(const GradModeGuard&) = delete;
  GradModeGuard& operator=(const GradModeGuard&) = delete;

 private:
  bool previous_;
};

/// Disables graph recording; results computed inside are plain values.
class NoGradGuard : public GradModeGuard {
 public:
  NoGradGuard() : GradModeGuard(false) {}
};

template <typename Scalar>
class Tensor;

/// One recorded operation. Holds its inputs (and through them the rest of the
/// graph) but never its own output, so ownership is acyclic.
template <typename Scalar>
struct Node {
  using TensorT = Tensor<Scalar>;
  /// Maps the upstream gradient to one gradient per input. Entries whose
  /// `needs` flag is false may be left empty. The function is written in terms
  /// of differentiable operations so that it records a graph when grad mode is
  /// on, which is what makes gradients of gradients possible.
  using Backward =
      std::function<std::vector<TensorT>(const TensorT& grad_output, const std::vector<bool>& needs)>;

  std::string_view op;
  std::vector<TensorT> inputs;
  Backward backward;
  /// Whether backward can itself be recorded (required by grad(build_graph=true)).
  bool differentiable_backward = true;
};

/// Dense row-major n-d array, optionally attached to a computation graph.
///
/// Values are shared between copies and treated as immutable; the only writer
/// is mutable_values(), which copies first if the storage is shared.
template <typename Scalar>
class Tensor {
 public:
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using NodePtr = std::shared_ptr<Node<Scalar>>;

  Tensor() : values_(std::make_shared<Vector>()) {}

  Tensor(Shape shape, Vector values, bool requires_grad = false)
      : shape_(std::move(shape)), values_(std::make_shared<Vector>(std::move(values))) {
    if (numel_of(shape_) != values_->size()) {
      throw ShapeError("tensor of shape " + to_string(shape_) + " cannot hold " +
                       std::to_string(values_->size()) + " values");
    }
    set_requires_grad(requires_grad);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const Index n = numel_of(shape);
    return Tensor(std::move(shape), Vector::Zero(n), requires_grad);
  }
  static Tensor ones(Shape shape, bool requires_grad = false) {
    const Index n = numel_of(shape);
    return Tensor(std::move(shape), Vector::Ones(n), requires_grad);
  }
  static Tensor full(Shape shape, Scalar value, bool requires_grad = false) {
    const Index n = numel_of(shape);
    return Tensor(std::move(shape), Vector::Constant(n, value), requires_grad);
  }
  static Tensor scalar(Scalar value, bool requires_grad = false) {
    return Tensor(Shape{}, Vector::Constant(1, value), requires_grad);
  }
  static Tensor from(Shape shape, std::initializer_list<Scalar> values, bool requires_grad = false) {
    Vector v(static_cast<Index>(values.size()));
    std::copy(values.begin(), values.end(), v.data());
    return Tensor(std::move(shape), std::move(v), requires_grad);
  }
  static Tensor vector(std::initializer_list<Scalar> values, bool requires_grad = false) {
    return from(Shape{static_cast<Index>(values.size())}, values, requires_grad);
  }

  /// Result of a recorded operation. Attaches a node only when grad mode is on
  /// and at least one input tracks gradients.
  static Tensor from_op(Shape shape, Vector values, std::string_view op, std::vector<Tensor> inputs,
                        typename Node<Scalar>::Backward backward) {
    Tensor out(std::move(shape), std::move(values));
    const bool track = grad_enabled() && std::any_of(inputs.begin(), inputs.end(),
                                                     [](const Tensor& t) { return t.requires_grad(); });
    if (track) {
      auto node = std::make_shared<Node<Scalar>>();
      node->op = op;
      node->inputs = std::move(inputs);
      node->backward = std::move(backward);
      out.node_ = std::move(node);
      out.requires_grad_ = true;
    }
    return out;
  }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  Index dim(int axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  Index numel() const { return values_->size(); }

  const Vector& values() const { return *values_; }
  const Scalar* data() const { return values_->data(); }
  Scalar item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape_));
    return (*values_)(0);
  }
  Scalar operator[](Index i) const { return (*values_)(i); }

  /// In-place access for optimizers and initializers. Detaches from any graph.
  Vector& mutable_values() {
    if (values_.use_count() > 1) values_ = std::make_shared<Vector>(*values_);
    if (node_ && !node_->inputs.empty()) {
      node_.reset();
      requires_grad_ = false;
    }
    return *values_;
  }

  bool requires_grad() const { return requires_grad_; }
  const NodePtr& node() const { return node_; }
  bool is_leaf() const { return !node_ || node_->inputs.empty(); }

  /// Turns a value into a gradient-tracked leaf (or back into a constant).
  void set_requires_grad(bool flag) {
    requires_grad_ = flag;
    if (flag) {
      node_ = std::make_shared<Node<Scalar>>();
      node_->op = "leaf";
    } else {
      node_.reset();
    }
  }

  /// Same values, no graph. Gradients stop here.
  Tensor detach() const {
    Tensor out;
    out.shape_ = shape_;
    out.values_ = values_;
    return out;
  }

 private:
  Shape shape_;
  std::shared_ptr<Vector> values_;
  NodePtr node_;
  bool requires_grad_ = false;
};

template <typename Scalar>
Tensor<Scalar> detach(const Tensor<Scalar>& x) {
  return x.detach();
}

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace cast::ad
