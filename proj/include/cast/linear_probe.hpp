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

// Softmax-regression probe on frozen, globally pooled encoder features.

#pragma once

#include "cast/contrast.hpp"
#include "cast/encoder.hpp"
#include "cast/image.hpp"

#include <span>
#include <vector>

namespace cast {

struct ProbeOptions {
  int epochs = 300;  // full-batch gradient steps
  double lr = 0.5;
  double weight_decay = 1e-4;
};

struct LinearProbe {
  Eigen::MatrixXd weight;  // [classes, dim], acts on standardized features
  Eigen::VectorXd bias;    // [classes]
  Eigen::VectorXd mean;    // feature standardization
  Eigen::VectorXd inv_std;
  double train_accuracy = 0.0;
  bool degenerate = false;  // fewer than two classes present

  int num_classes() const { return static_cast<int>(bias.size()); }
  int predict(const Eigen::Ref<const Eigen::VectorXf>& feature) const;
  double accuracy(const RowMatrixF& features, std::span<const int> labels) const;
};

/// Fits on rows of `features`. Labels must lie in [0, num_classes). A
/// single-class set yields a constant predictor with accuracy 1 and a warning.
LinearProbe fit_linear_probe(const RowMatrixF& features, std::span<const int> labels, int num_classes,
                             const ProbeOptions& options = {});

/// Global average of the last-stage activations, [channels]. No graph is recorded.
Eigen::VectorXf probe_features(const EncoderConfig& config, const ParameterSet<float>& params, const Image& image);

/// probe_features of `images`, one row each.
RowMatrixF embed_images(const EncoderConfig& config, const ParameterSet<float>& params, std::span<const Image> images);

/// Embeds with the frozen encoder, then fits the probe. `params` is never
/// modified.
LinearProbe linear_probe_train(const EncoderConfig& config, const ParameterSet<float>& params,
                               std::span<const Image> images, std::span<const int> labels, int num_classes,
                               int epochs);

}  // namespace cast
