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

#include "cast/linear_probe.hpp"

#include <spdlog/spdlog.h>

#include <set>
#include <stdexcept>

namespace cast {

int LinearProbe::predict(const Eigen::Ref<const Eigen::VectorXf>& feature) const {
  const Eigen::VectorXd x = (feature.cast<double>() - mean).cwiseProduct(inv_std);
  Eigen::Index best = 0;
  (weight * x + bias).maxCoeff(&best);
  return static_cast<int>(best);
}

double LinearProbe::accuracy(const RowMatrixF& features, std::span<const int> labels) const {
  if (features.rows() != static_cast<Eigen::Index>(labels.size())) {
    throw std::invalid_argument("probe accuracy: feature and label counts differ");
  }
  if (labels.empty()) return 0.0;
  int correct = 0;
  for (Eigen::Index i = 0; i < features.rows(); ++i) {
    if (predict(features.row(i).transpose()) == labels[static_cast<std::size_t>(i)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

LinearProbe fit_linear_probe(const RowMatrixF& features, std::span<const int> labels, int num_classes,
                             const ProbeOptions& options) {
  const Eigen::Index n = features.rows(), d = features.cols();
  if (n == 0) throw std::invalid_argument("linear probe: empty dataset");
  if (n != static_cast<Eigen::Index>(labels.size())) {
    throw std::invalid_argument("linear probe: " + std::to_string(n) + " features but " +
                                std::to_string(labels.size()) + " labels");
  }
  if (num_classes < 1) throw std::invalid_argument("linear probe: need at least one class");
  std::set<int> present;
  for (int y : labels) {
    if (y < 0 || y >= num_classes) throw std::invalid_argument("linear probe: label out of range");
    present.insert(y);
  }

  LinearProbe probe;
  const Eigen::MatrixXd x = features.cast<double>();
  probe.mean = x.colwise().mean().transpose();
  const Eigen::VectorXd var = (x.rowwise() - probe.mean.transpose()).array().square().colwise().mean();
  probe.inv_std = (var.array() + 1e-8).rsqrt().matrix();
  probe.weight = Eigen::MatrixXd::Zero(num_classes, d);
  probe.bias = Eigen::VectorXd::Zero(num_classes);

  if (present.size() < 2) {
    spdlog::warn("linear probe: only one class present; the probe is a constant predictor");
    probe.degenerate = true;
    probe.bias(*present.begin()) = 1.0;
    probe.train_accuracy = 1.0;
    return probe;
  }

  const Eigen::MatrixXd z = (x.rowwise() - probe.mean.transpose()).array().rowwise() * probe.inv_std.transpose().array();
  Eigen::MatrixXd onehot = Eigen::MatrixXd::Zero(n, num_classes);
  for (Eigen::Index i = 0; i < n; ++i) onehot(i, labels[static_cast<std::size_t>(i)]) = 1.0;
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    Eigen::MatrixXd logits = (z * probe.weight.transpose()).rowwise() + probe.bias.transpose();
    logits = logits.colwise() - logits.rowwise().maxCoeff();
    Eigen::MatrixXd p = logits.array().exp();
    p = p.array().colwise() / p.rowwise().sum().array();
    const Eigen::MatrixXd diff = (p - onehot) / static_cast<double>(n);
    probe.weight -= options.lr * (diff.transpose() * z + options.weight_decay * probe.weight);
    probe.bias -= options.lr * diff.colwise().sum().transpose();
  }
  probe.train_accuracy = probe.accuracy(features, labels);
  return probe;
}

Eigen::VectorXf probe_features(const EncoderConfig& config, const ParameterSet<float>& params, const Image& image) {
  ad::NoGradGuard no_grad;
  const auto acts = forward(config, params, to_tensor<float>(image)).conv5_acts;
  const Eigen::Index plane = acts.dim(1) * acts.dim(2);
  return Eigen::Map<const RowMatrixF>(acts.data(), acts.dim(0), plane).rowwise().mean();
}

RowMatrixF embed_images(const EncoderConfig& config, const ParameterSet<float>& params, std::span<const Image> images) {
  RowMatrixF out(static_cast<Eigen::Index>(images.size()), config.channels());
  for (std::size_t i = 0; i < images.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = probe_features(config, params, images[i]).transpose();
  }
  return out;
}

LinearProbe linear_probe_train(const EncoderConfig& config, const ParameterSet<float>& params,
                               std::span<const Image> images, std::span<const int> labels, int num_classes,
                               int epochs) {
  if (images.empty()) throw std::invalid_argument("linear probe: empty dataset");
  ProbeOptions options;
  options.epochs = epochs;
  return fit_linear_probe(embed_images(config, params, images), labels, num_classes, options);
}

}  // namespace cast
