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

// Grounding IoU between Grad-CAM and saliency, and accuracy on background
// variants.

#pragma once

#include "cast/cast_loss.hpp"
#include "cast/data.hpp"
#include "cast/linear_probe.hpp"

#include <array>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace cast {

/// Divides by the max, then thresholds at 0.5. A map without a positive
/// entry gives all zeros.
BitPlane binarize(const Plane& map);

struct IouResult {
  double value = 0.0;
  bool both_empty = false;  // value is 0 by convention
};

/// |a and b| / |a or b|. Throws std::invalid_argument on a shape mismatch.
IouResult iou(const BitPlane& a, const BitPlane& b);

inline constexpr int kHistogramBins = 20;

struct GroundingReport {
  std::vector<double> ious;
  double mean_iou = 0.0;
  std::array<int, kHistogramBins> histogram{};  // equal bins over [0, 1]
  int both_empty = 0;
  int skipped = 0;  // scenes with an empty mask

  void add(const IouResult& r);
  void finish();
};

struct GroundingOptions {
  AugmentConfig augment;
  SupervisionMode mode = SupervisionMode::kFullQuery;
  std::uint64_t eval_seed = 20260;
};

/// Grad-CAM map for one prepared sample, [grid, grid].
using CamFunction = std::function<Plane(const PreparedSample<float>&)>;

/// Views are drawn per scene from (eval_seed, index) exactly as in training.
/// The map and the attention target are both binarized and compared.
GroundingReport grounding_eval(std::span<const LabeledScene> scenes, const EncoderConfig& encoder,
                               const GroundingOptions& options, const CamFunction& cam);

/// Grad-CAM of the query encoder against the key encoder's masked key.
CamFunction encoder_cam(const EncoderConfig& encoder, const ParameterSet<float>& query,
                        const ParameterSet<float>& key);

struct BackgroundsTable {
  std::array<double, kNumVariants> accuracy{};
  std::array<int, kNumVariants> counts{};

  double at(Variant v) const { return accuracy[static_cast<std::size_t>(v)]; }
  /// Variants that beat Original, which removing signal should not do.
  std::vector<Variant> above_original() const;
};

/// Predicted fg class. Sees the composited scene; probe classifiers use the
/// image only.
using SceneClassifier = std::function<int(const LabeledScene&)>;

/// Every pool scene under all eight variants. Throws MissingClassError
/// unless the pool covers every class.
BackgroundsTable backgrounds_eval(const ScenePool& pool, const SceneClassifier& classify, std::uint64_t seed);

SceneClassifier probe_classifier(const EncoderConfig& encoder, const ParameterSet<float>& params,
                                 const LinearProbe& probe);

// Reports

void write_grounding_csv(const std::filesystem::path& path, const GroundingReport& report);
void write_histogram_csv(const std::filesystem::path& path, const GroundingReport& report);
std::string grounding_summary(const std::string& label, const GroundingReport& report);
void write_backgrounds_csv(const std::filesystem::path& path, const BackgroundsTable& table);
std::string backgrounds_summary(const std::string& label, const BackgroundsTable& table);

}  // namespace cast
