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

#include "cast/commands.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

namespace cast {
namespace {

constexpr float kCheckpointMomentum = 0.99f;  // unused by evaluation

AugmentConfig eval_augment(const std::optional<std::filesystem::path>& config) {
  return (config ? load_run_config(*config) : RunConfig{}).step_config().augment;
}

SupervisionMode eval_mode(const std::optional<std::filesystem::path>& config) {
  return config ? load_run_config(*config).supervision_mode : SupervisionMode::kFullQuery;
}

std::vector<LabeledScene> load_nonempty(const std::filesystem::path& dir) {
  auto scenes = load_dataset(dir);
  if (scenes.empty()) throw std::invalid_argument("dataset " + dir.string() + " is empty");
  return scenes;
}

std::vector<std::string> unique_labels(const std::vector<std::filesystem::path>& checkpoints) {
  if (checkpoints.empty()) throw std::invalid_argument("at least one checkpoint is required");
  std::vector<std::string> labels;
  std::set<std::string> seen;
  for (const auto& c : checkpoints) {
    labels.push_back(checkpoint_label(c));
    if (!seen.insert(labels.back()).second) throw std::invalid_argument("two checkpoints share label " + labels.back());
  }
  return labels;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

Image with_bytes(const Image& image) {
  Image out = image;
  for (auto& p : out.rgb) p = (p.cwiseMax(0.0f).cwiseMin(1.0f) * 255.0f).round() / 255.0f;
  return out;
}

}  // namespace

std::array<float, 3> jet(float t) {
  t = std::clamp(t, 0.0f, 1.0f);
  auto ramp = [t](float centre) { return std::clamp(1.5f - std::abs(4.0f * t - centre), 0.0f, 1.0f); };
  return {ramp(3.0f), ramp(2.0f), ramp(1.0f)};
}

Image gradcam_overlay(const Image& image, const Plane& map) {
  const Eigen::Index h = image.height(), w = image.width();
  if (map.rows() == 0 || h % map.rows() != 0 || w % map.cols() != 0) {
    throw std::invalid_argument("gradcam_overlay: map does not tile the image");
  }
  const float peak = map.maxCoeff();
  const Plane norm = peak > 0.0f ? Plane(map / peak) : Plane(Plane::Zero(map.rows(), map.cols()));
  const Eigen::Index bh = h / map.rows(), bw = w / map.cols();
  Image out = Image::zeros(h, w);
  for (Eigen::Index y = 0; y < h; ++y) {
    for (Eigen::Index x = 0; x < w; ++x) {
      const auto colour = jet(norm(y / bh, x / bw));
      for (int c = 0; c < 3; ++c) {
        const double v = 255.0 * (0.5 * static_cast<double>(image.rgb[c](y, x)) + 0.5 * static_cast<double>(colour[c]));
        out.rgb[c](y, x) = static_cast<float>(std::lround(v)) / 255.0f;
      }
    }
  }
  return out;
}

std::vector<IndexEntry> run_gen_data(const GenDataArgs& args) {
  if (args.count < 0) throw ConfigError("count: must be non-negative");
  if (!(args.bias >= 0.0 && args.bias <= 1.0)) throw ConfigError("bias: must lie in [0, 1]");
  if (args.out.empty()) throw ConfigError("out: must not be empty");
  if (args.count == 0) spdlog::warn("gen-data: count is 0, writing an empty index");
  SceneOptions options;
  options.bias = args.bias;
  return save_dataset(args.out, generate_dataset(args.count, args.seed, options));
}

TrainResult run_train(const TrainArgs& args) {
  const RunConfig config = load_run_config(args.config);
  config.validate();
  const auto data = load_dataset(config.train_data);
  TrainOptions options;
  options.resume = args.resume;
  options.stop_after = args.stop_after;
  return train(config, data, options);
}

std::string checkpoint_label(const std::filesystem::path& checkpoint) {
  const auto parent = checkpoint.parent_path().filename().string();
  const auto stem = checkpoint.stem().string();
  return parent.empty() ? stem : parent + "_" + stem;
}

std::vector<GroundingReport> run_eval_grounding(const EvalArgs& args) {
  const auto labels = unique_labels(args.checkpoints);
  GroundingOptions options;
  options.augment = eval_augment(args.config);
  options.mode = eval_mode(args.config);
  options.eval_seed = args.seed;
  const auto scenes = load_nonempty(args.data);
  const EncoderConfig encoder;
  std::filesystem::create_directories(args.out);
  std::vector<GroundingReport> reports;
  std::string summary;
  for (std::size_t i = 0; i < args.checkpoints.size(); ++i) {
    const TrainState state = load_checkpoint(args.checkpoints[i], encoder, kCheckpointMomentum);
    auto report = grounding_eval(scenes, encoder, options,
                                 encoder_cam(encoder, state.encoders.query, state.encoders.key));
    write_grounding_csv(args.out / (labels[i] + "_grounding.csv"), report);
    write_histogram_csv(args.out / (labels[i] + "_histogram.csv"), report);
    summary += grounding_summary(labels[i], report) + "\n";
    spdlog::info("{}", grounding_summary(labels[i], report));
    reports.push_back(std::move(report));
  }
  write_text(args.out / "grounding_summary.txt", summary);
  return reports;
}

std::vector<BackgroundsTable> run_eval_backgrounds(const BackgroundsArgs& args) {
  const auto labels = unique_labels(args.checkpoints);
  if (args.probe_epochs < 1) throw ConfigError("probe_epochs: must be at least 1");
  const auto train_scenes = load_nonempty(args.train_data);
  const ScenePool pool(load_nonempty(args.eval_data));
  std::vector<Image> images;
  std::vector<int> labels_fg;
  for (const auto& s : train_scenes) {
    images.push_back(s.image);
    labels_fg.push_back(s.fg_class);
  }
  const EncoderConfig encoder;
  std::filesystem::create_directories(args.out);
  std::vector<BackgroundsTable> tables;
  std::string summary;
  for (std::size_t i = 0; i < args.checkpoints.size(); ++i) {
    const TrainState state = load_checkpoint(args.checkpoints[i], encoder, kCheckpointMomentum);
    const auto& params = state.encoders.query;
    const auto probe = linear_probe_train(encoder, params, images, labels_fg, kNumFgClasses, args.probe_epochs);
    const auto table = backgrounds_eval(pool, probe_classifier(encoder, params, probe), args.seed);
    for (Variant v : table.above_original()) {
      spdlog::warn("{}: {} accuracy {:.4f} exceeds original {:.4f}", labels[i], to_string(v), table.at(v),
                   table.at(Variant::kOriginal));
    }
    write_backgrounds_csv(args.out / (labels[i] + "_backgrounds.csv"), table);
    summary += backgrounds_summary(labels[i], table) + "\n";
    spdlog::info("{}", backgrounds_summary(labels[i], table));
    tables.push_back(table);
  }
  write_text(args.out / "backgrounds_summary.txt", summary);
  return tables;
}

std::vector<std::filesystem::path> run_visualize(const VisualizeArgs& args) {
  if (args.count < 1) throw ConfigError("count: must be at least 1");
  const AugmentConfig augment = eval_augment(args.config);
  const SupervisionMode mode = eval_mode(args.config);
  const auto scenes = load_nonempty(args.data);
  const EncoderConfig encoder;
  const TrainState state = load_checkpoint(args.checkpoint, encoder, kCheckpointMomentum);
  const CamFunction cam = encoder_cam(encoder, state.encoders.query, state.encoders.key);
  std::filesystem::create_directories(args.out);
  std::vector<std::filesystem::path> written;
  const auto n = std::min<std::size_t>(static_cast<std::size_t>(args.count), scenes.size());
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = derive_rng(args.seed, i);
    const ViewPair views = make_view_pair(scenes[i].image, scenes[i].mask, augment, rng);
    const auto sample = prepare_sample<float>(views, encoder, mode);
    Image masked_key = views.key;
    for (auto& p : masked_key.rgb) p = (views.key_mask.bits != 0).select(p, 0.0f);
    const Image query = with_bytes(views.query);
    const auto base = args.out / fmt::format("sample_{:03d}", i);
    auto emit = [&](const std::string& suffix) { return written.emplace_back(base.string() + suffix); };
    save_ppm(emit("_query.ppm"), query);
    save_ppm(emit("_key.ppm"), views.key);
    save_ppm(emit("_masked_key.ppm"), masked_key);
    save_ppm(emit("_gradcam.ppm"), gradcam_overlay(query, cam(sample)));
    save_pgm(emit("_saliency.pgm"), views.query_mask);
  }
  if (n < static_cast<std::size_t>(args.count)) {
    spdlog::warn("visualize: dataset has only {} scenes, {} requested", scenes.size(), args.count);
  }
  return written;
}

}  // namespace cast
