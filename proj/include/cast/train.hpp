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

// Run configuration and the training loop.

#pragma once

#include "cast/cast_loss.hpp"
#include "cast/checkpoint.hpp"
#include "cast/data.hpp"

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace cast {

/// Invalid configuration. The message names the offending field.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct RunConfig {
  std::uint64_t seed = 1;
  float phi = 0.2f;
  float lambda = 3.0f;
  float tau = 0.07f;
  float momentum = 0.99f;  // key encoder EMA
  int queue_size = 1024;
  double lr = 0.03;
  double sgd_momentum = 0.9;
  double weight_decay = 1e-4;
  int batch = 32;
  int epochs = 10;
  int steps = 0;  // overrides epochs when positive
  SupervisionMode supervision_mode = SupervisionMode::kFullQuery;
  bool second_order = true;
  float scale_min = 0.2f;
  float scale_max = 1.0f;
  int max_attempts = 50;
  float brightness = 0.4f;
  float contrast = 0.4f;
  int checkpoint_every = 500;
  std::string train_data = "data";
  std::string output_dir = "run";

  /// Throws ConfigError naming the first invalid field.
  void validate() const;
  StepConfig step_config() const;
  int total_steps(std::size_t dataset_size) const;

  bool operator==(const RunConfig&) const = default;
};

/// Parses "key = value" lines; '#' starts a comment. Unknown and repeated
/// keys are errors. Missing keys keep their defaults.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);
/// Every key, one per line, in a form parse_run_config reads back exactly.
std::string format_run_config(const RunConfig& config);

struct LogRow {
  std::int64_t step = 0;
  float contrastive = 0.0f;
  float attention = 0.0f;
  float total = 0.0f;
  Eigen::Index queue_fill = 0;
  double wall_ms = 0.0;
};

inline constexpr std::string_view kLogHeader = "step,L_cont,L_att,total,queue_fill,wall_ms";
std::string format_log_row(const LogRow& row);

/// Scene indices for `step`: consecutive slices of a per-epoch permutation
/// drawn from the run seed.
std::vector<std::size_t> batch_indices(const RunConfig& config, std::size_t dataset_size, std::int64_t step);

TrainState initial_state(const RunConfig& config);

struct TrainOptions {
  std::optional<std::filesystem::path> resume;  // checkpoint to continue from
  std::int64_t stop_after = 0;                  // stop at this step when positive
  bool write_files = true;                      // log, config echo and checkpoints
};

struct TrainResult {
  TrainState state;
  std::vector<LogRow> log;
};

/// Runs cast_step from the current step up to the configured total. With
/// write_files, appends to <output_dir>/train_log.csv, writes
/// step_NNNNNN.ckpt every checkpoint_every steps and final.ckpt at the end.
TrainResult train(const RunConfig& config, const std::vector<LabeledScene>& data, const TrainOptions& options = {});

std::filesystem::path checkpoint_path(const RunConfig& config, std::int64_t step);
std::filesystem::path final_checkpoint_path(const RunConfig& config);

}  // namespace cast
