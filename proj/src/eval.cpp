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

#include "cast/eval.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace cast {
namespace {

Plane to_plane(const ad::TensorF& t) {
  return Eigen::Map<const Plane>(t.values().data(), t.dim(0), t.dim(1));
}

std::ofstream open_report(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

}  // namespace

BitPlane binarize(const Plane& map) {
  BitPlane out = BitPlane::Zero(map.rows(), map.cols());
  if (map.size() == 0) return out;
  const float peak = map.maxCoeff();
  if (!(peak > 0.0f)) return out;
  return ((map / peak) >= 0.5f).cast<std::uint8_t>();
}

IouResult iou(const BitPlane& a, const BitPlane& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument("iou: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) + " vs " +
                                std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
  const auto inter = ((a != 0) && (b != 0)).count();
  const auto uni = ((a != 0) || (b != 0)).count();
  if (uni == 0) return {0.0, true};
  return {static_cast<double>(inter) / static_cast<double>(uni), false};
}

void GroundingReport::add(const IouResult& r) {
  ious.push_back(r.value);
  both_empty += r.both_empty;
}

void GroundingReport::finish() {
  histogram.fill(0);
  for (double v : ious) {
    const int bin = std::clamp(static_cast<int>(std::floor(v * kHistogramBins)), 0, kHistogramBins - 1);
    ++histogram[static_cast<std::size_t>(bin)];
  }
  mean_iou = ious.empty() ? 0.0 : std::accumulate(ious.begin(), ious.end(), 0.0) / static_cast<double>(ious.size());
}

GroundingReport grounding_eval(std::span<const LabeledScene> scenes, const EncoderConfig& encoder,
                               const GroundingOptions& options, const CamFunction& cam) {
  if (scenes.empty()) throw std::invalid_argument("grounding_eval: empty dataset");
  options.augment.validate();
  GroundingReport report;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    Rng rng = derive_rng(options.eval_seed, i);
    ViewPair views;
    try {
      views = make_view_pair(scenes[i].image, scenes[i].mask, options.augment, rng);
    } catch (const DegenerateMaskError&) {
      ++report.skipped;
      continue;
    }
    const auto sample = prepare_sample<float>(views, encoder, options.mode);
    report.add(iou(binarize(cam(sample)), binarize(to_plane(sample.target))));
  }
  report.finish();
  return report;
}

CamFunction encoder_cam(const EncoderConfig& encoder, const ParameterSet<float>& query,
                        const ParameterSet<float>& key) {
  return [&encoder, &query, &key](const PreparedSample<float>& s) {
    ad::TensorF k_m;
    {
      ad::NoGradGuard no_grad;
      k_m = forward(encoder, key, s.masked_key).embedding;
    }
    const auto q = forward(encoder, query, s.query);
    return to_plane(grad_cam(q.embedding, k_m, q.conv5_acts, false).map);
  };
}

std::vector<Variant> BackgroundsTable::above_original() const {
  std::vector<Variant> out;
  for (Variant v : {Variant::kMixedSame, Variant::kMixedRand, Variant::kMixedNext}) {
    if (at(v) > at(Variant::kOriginal)) out.push_back(v);
  }
  return out;
}

BackgroundsTable backgrounds_eval(const ScenePool& pool, const SceneClassifier& classify, std::uint64_t seed) {
  if (pool.scenes().empty()) throw std::invalid_argument("backgrounds_eval: empty pool");
  if (!pool.covers_all_classes()) throw MissingClassError("backgrounds_eval: pool does not cover every class");
  BackgroundsTable table;
  std::array<int, kNumVariants> correct{};
  for (std::size_t i = 0; i < pool.scenes().size(); ++i) {
    Rng rng = derive_rng(seed, i);
    const auto& scene = pool.scenes()[i];
    for (std::size_t v = 0; v < kAllVariants.size(); ++v) {
      const auto composite = compose_variant(scene, pool, kAllVariants[v], rng);
      correct[v] += classify(composite.scene) == scene.fg_class;
      ++table.counts[v];
    }
  }
  for (std::size_t v = 0; v < kAllVariants.size(); ++v) {
    table.accuracy[v] = static_cast<double>(correct[v]) / static_cast<double>(table.counts[v]);
  }
  return table;
}

SceneClassifier probe_classifier(const EncoderConfig& encoder, const ParameterSet<float>& params,
                                 const LinearProbe& probe) {
  return [&encoder, &params, &probe](const LabeledScene& scene) {
    return probe.predict(probe_features(encoder, params, scene.image));
  };
}

void write_grounding_csv(const std::filesystem::path& path, const GroundingReport& report) {
  auto out = open_report(path);
  out << "sample,iou\n";
  for (std::size_t i = 0; i < report.ious.size(); ++i) out << i << ',' << fmt::format("{:.6f}", report.ious[i]) << '\n';
}

void write_histogram_csv(const std::filesystem::path& path, const GroundingReport& report) {
  auto out = open_report(path);
  out << "bin_lo,bin_hi,count\n";
  for (int b = 0; b < kHistogramBins; ++b) {
    out << fmt::format("{:.2f},{:.2f},{}\n", static_cast<double>(b) / kHistogramBins,
                       static_cast<double>(b + 1) / kHistogramBins, report.histogram[static_cast<std::size_t>(b)]);
  }
}

std::string grounding_summary(const std::string& label, const GroundingReport& report) {
  return fmt::format("{}: samples={} mean_iou={:.4f} both_empty={} skipped={}", label, report.ious.size(),
                     report.mean_iou, report.both_empty, report.skipped);
}

void write_backgrounds_csv(const std::filesystem::path& path, const BackgroundsTable& table) {
  auto out = open_report(path);
  out << "variant,accuracy,count\n";
  for (std::size_t v = 0; v < kAllVariants.size(); ++v) {
    out << fmt::format("{},{:.6f},{}\n", to_string(kAllVariants[v]), table.accuracy[v], table.counts[v]);
  }
}

std::string backgrounds_summary(const std::string& label, const BackgroundsTable& table) {
  std::string s = label + ":";
  for (std::size_t v = 0; v < kAllVariants.size(); ++v) {
    s += fmt::format(" {}={:.4f}", to_string(kAllVariants[v]), table.accuracy[v]);
  }
  return s;
}

}  // namespace cast
