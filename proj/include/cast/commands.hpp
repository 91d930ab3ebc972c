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

// Command implementations behind the cast tool, plus heatmap export.

#pragma once

#include "cast/eval.hpp"
#include "cast/train.hpp"

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace cast {

/// Jet colormap, t in [0, 1].
std::array<float, 3> jet(float t);

/// Map normalized by its max, upsampled by pixel replication and coloured
/// with jet. Every channel byte is round(255 (0.5 image + 0.5 colour)).
Image gradcam_overlay(const Image& image, const Plane& map);

struct GenDataArgs {
  int count = 0;
  std::uint64_t seed = 0;
  std::filesystem::path out;
  double bias = 0.0;
};

std::vector<IndexEntry> run_gen_data(const GenDataArgs& args);

struct TrainArgs {
  std::filesystem::path config;
  std::optional<std::filesystem::path> resume;
  std::int64_t stop_after = 0;
};

TrainResult run_train(const TrainArgs& args);

struct EvalArgs {
  std::vector<std::filesystem::path> checkpoints;
  std::filesystem::path data;
  std::filesystem::path out;
  std::optional<std::filesystem::path> config;  // crop settings; defaults otherwise
  std::uint64_t seed = 20260;
};

/// Label for a checkpoint in report file names: "<dir>_<stem>".
std::string checkpoint_label(const std::filesystem::path& checkpoint);

/// Writes <label>_grounding.csv and <label>_histogram.csv per checkpoint and
/// grounding_summary.txt listing every mean.
std::vector<GroundingReport> run_eval_grounding(const EvalArgs& args);

struct BackgroundsArgs {
  std::vector<std::filesystem::path> checkpoints;
  std::filesystem::path train_data;  // probe training scenes (Original variant)
  std::filesystem::path eval_data;
  std::filesystem::path out;
  int probe_epochs = 300;
  std::uint64_t seed = 20260;
};

/// Writes <label>_backgrounds.csv per checkpoint and backgrounds_summary.txt.
std::vector<BackgroundsTable> run_eval_backgrounds(const BackgroundsArgs& args);

struct VisualizeArgs {
  std::filesystem::path checkpoint;
  std::filesystem::path data;
  std::filesystem::path out;
  std::optional<std::filesystem::path> config;
  int count = 5;
  std::uint64_t seed = 20260;
};

/// Per sample: query, key and masked key (PPM), Grad-CAM overlay on the
/// query (PPM) and the query saliency mask (PGM).
std::vector<std::filesystem::path> run_visualize(const VisualizeArgs& args);

}  // namespace cast
