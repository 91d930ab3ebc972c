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

// cast: dataset generation, training, evaluation and heatmap export.
// Exit codes: 0 success, 2 configuration error, 1 anything else.

#include "cast/commands.hpp"

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <iostream>

namespace {

constexpr int kConfigError = 2;
constexpr int kFailure = 1;

// Returns false if CAST_LOG_LEVEL holds an unknown value.
bool apply_log_level() {
  const char* env = std::getenv("CAST_LOG_LEVEL");
  if (env == nullptr) return true;
  const std::string level(env);
  if (level == "error") {
    spdlog::set_level(spdlog::level::err);
  } else if (level == "info") {
    spdlog::set_level(spdlog::level::info);
  } else if (level == "debug") {
    spdlog::set_level(spdlog::level::debug);
  } else {
    return false;
  }
  return true;
}

}  // namespace

int main(int argc, char** argv) {
  if (!apply_log_level()) {
    std::cerr << "CAST_LOG_LEVEL: expected error, info or debug\n";
    return kConfigError;
  }
  CLI::App app{"Contrastive attention-supervised tuning on synthetic scenes"};
  app.require_subcommand(1);

  cast::GenDataArgs gen;
  std::string gen_out;
  auto* gen_cmd = app.add_subcommand("gen-data", "Write a synthetic scene dataset");
  gen_cmd->add_option("--count", gen.count, "Number of scenes")->required();
  gen_cmd->add_option("--seed", gen.seed, "Dataset seed")->required();
  gen_cmd->add_option("--out", gen_out, "Output directory")->required();
  gen_cmd->add_option("--bias", gen.bias, "Fraction of scenes whose background follows the foreground class");

  cast::TrainArgs train;
  std::string train_config, train_resume;
  auto* train_cmd = app.add_subcommand("train", "Train from a config file");
  train_cmd->add_option("--config", train_config, "key = value config file")->required();
  train_cmd->add_option("--resume", train_resume, "Checkpoint to continue from");
  train_cmd->add_option("--stop-after", train.stop_after, "Stop once this step is reached");

  cast::EvalArgs grounding;
  std::vector<std::string> grounding_ckpts;
  std::string grounding_data, grounding_out, grounding_config;
  auto* grounding_cmd = app.add_subcommand("eval-grounding", "Grad-CAM versus saliency IoU");
  grounding_cmd->add_option("--checkpoint", grounding_ckpts, "Checkpoint(s) to evaluate")->required();
  grounding_cmd->add_option("--data", grounding_data, "Dataset directory")->required();
  grounding_cmd->add_option("--out", grounding_out, "Report directory")->required();
  grounding_cmd->add_option("--config", grounding_config, "Config supplying crop settings");
  grounding_cmd->add_option("--seed", grounding.seed, "Evaluation seed");

  cast::BackgroundsArgs backgrounds;
  std::vector<std::string> backgrounds_ckpts;
  std::string bg_train, bg_eval, bg_out;
  auto* backgrounds_cmd = app.add_subcommand("eval-backgrounds", "Linear-probe accuracy on background variants");
  backgrounds_cmd->add_option("--checkpoint", backgrounds_ckpts, "Checkpoint(s) to evaluate")->required();
  backgrounds_cmd->add_option("--train-data", bg_train, "Scenes for fitting the probe")->required();
  backgrounds_cmd->add_option("--eval-data", bg_eval, "Scenes for the variants")->required();
  backgrounds_cmd->add_option("--out", bg_out, "Report directory")->required();
  backgrounds_cmd->add_option("--probe-epochs", backgrounds.probe_epochs, "Probe gradient steps");
  backgrounds_cmd->add_option("--seed", backgrounds.seed, "Evaluation seed");

  cast::VisualizeArgs vis;
  std::string vis_ckpt, vis_data, vis_out, vis_config;
  auto* vis_cmd = app.add_subcommand("visualize", "Export views, masks and Grad-CAM overlays");
  vis_cmd->add_option("--checkpoint", vis_ckpt, "Checkpoint")->required();
  vis_cmd->add_option("--data", vis_data, "Dataset directory")->required();
  vis_cmd->add_option("--out", vis_out, "Image directory")->required();
  vis_cmd->add_option("--count", vis.count, "Number of samples");
  vis_cmd->add_option("--config", vis_config, "Config supplying crop settings");
  vis_cmd->add_option("--seed", vis.seed, "Evaluation seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kConfigError;
  }

  try {
    if (*gen_cmd) {
      gen.out = gen_out;
      const auto index = cast::run_gen_data(gen);
      spdlog::info("wrote {} scenes to {}", index.size(), gen_out);
    } else if (*train_cmd) {
      train.config = train_config;
      if (!train_resume.empty()) train.resume = train_resume;
      const auto result = cast::run_train(train);
      spdlog::info("finished at step {}", result.state.step);
    } else if (*grounding_cmd) {
      grounding.checkpoints.assign(grounding_ckpts.begin(), grounding_ckpts.end());
      grounding.data = grounding_data;
      grounding.out = grounding_out;
      if (!grounding_config.empty()) grounding.config = grounding_config;
      const auto reports = cast::run_eval_grounding(grounding);
      for (std::size_t i = 0; i < reports.size(); ++i) {
        std::cout << cast::grounding_summary(cast::checkpoint_label(grounding.checkpoints[i]), reports[i]) << '\n';
      }
    } else if (*backgrounds_cmd) {
      backgrounds.checkpoints.assign(backgrounds_ckpts.begin(), backgrounds_ckpts.end());
      backgrounds.train_data = bg_train;
      backgrounds.eval_data = bg_eval;
      backgrounds.out = bg_out;
      const auto tables = cast::run_eval_backgrounds(backgrounds);
      for (std::size_t i = 0; i < tables.size(); ++i) {
        std::cout << cast::backgrounds_summary(cast::checkpoint_label(backgrounds.checkpoints[i]), tables[i]) << '\n';
      }
    } else if (*vis_cmd) {
      vis.checkpoint = vis_ckpt;
      vis.data = vis_data;
      vis.out = vis_out;
      if (!vis_config.empty()) vis.config = vis_config;
      const auto files = cast::run_visualize(vis);
      spdlog::info("wrote {} images to {}", files.size(), vis_out);
    }
  } catch (const cast::ConfigError& e) {
    spdlog::error("config error: {}", e.what());
    return kConfigError;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kFailure;
  }
  return 0;
}
