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

#include <gtest/gtest.h>

#include <map>
#include <random>

#include "support/files.hpp"

namespace cast {
namespace {

using testing::ScratchDir;
using testing::read_bytes;

BitPlane grid_of(std::initializer_list<int> bits, int rows, int cols) {
  BitPlane g(rows, cols);
  auto it = bits.begin();
  for (int i = 0; i < rows * cols; ++i) g.data()[i] = static_cast<std::uint8_t>(*it++);
  return g;
}

BitPlane random_grid(std::mt19937_64& rng, double density) {
  std::bernoulli_distribution on(density);
  BitPlane g(8, 8);
  for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = on(rng);
  return g;
}

TEST(Binarize, ThresholdArithmetic) {
  Plane m(1, 4);
  m << 0.2f, 1.0f, 0.4f, 0.6f;
  EXPECT_TRUE((binarize(m) == grid_of({0, 1, 0, 1}, 1, 4)).all());
  // Normalization by the max: halving every value changes nothing.
  EXPECT_TRUE((binarize(m * 0.5f) == grid_of({0, 1, 0, 1}, 1, 4)).all());
}

TEST(Binarize, ConstantAndZeroMaps) {
  EXPECT_TRUE((binarize(Plane::Constant(8, 8, 0.3f)) == 1).all());
  EXPECT_TRUE((binarize(Plane::Zero(8, 8)) == 0).all());
}

TEST(Iou, SetArithmetic) {
  const BitPlane a = grid_of({1, 1, 0, 0}, 2, 2), b = grid_of({1, 1, 1, 1}, 2, 2), c = grid_of({0, 0, 1, 1}, 2, 2);
  EXPECT_EQ(iou(a, a).value, 1.0);
  EXPECT_EQ(iou(a, c).value, 0.0);
  EXPECT_FALSE(iou(a, c).both_empty);
  EXPECT_EQ(iou(a, b).value, 0.5);
  const auto empty = iou(BitPlane::Zero(2, 2), BitPlane::Zero(2, 2));
  EXPECT_EQ(empty.value, 0.0);
  EXPECT_TRUE(empty.both_empty);
  EXPECT_THROW(iou(a, BitPlane::Zero(1, 4)), std::invalid_argument);
}

TEST(Iou, SymmetryMonotonicityAndRange) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 500; ++trial) {
    BitPlane a = random_grid(rng, 0.3), b = random_grid(rng, 0.4);
    const double ab = iou(a, b).value;
    ASSERT_EQ(ab, iou(b, a).value);
    ASSERT_GE(ab, 0.0);
    ASSERT_LE(ab, 1.0);
    const Eigen::Index cell = std::uniform_int_distribution<Eigen::Index>(0, 63)(rng);
    a.data()[cell] = b.data()[cell] = 1;
    ASSERT_GE(iou(a, b).value, ab);
  }
}

TEST(GroundingReport, MeanAndHistogram) {
  GroundingReport r;
  for (double v : {0.0, 0.049, 0.05, 0.5, 1.0}) r.add({v, false});
  r.add({0.0, true});
  r.finish();
  EXPECT_NEAR(r.mean_iou, (0.049 + 0.05 + 0.5 + 1.0) / 6.0, 1e-15);
  EXPECT_EQ(r.histogram[0], 3);
  EXPECT_EQ(r.histogram[1], 1);
  EXPECT_EQ(r.histogram[10], 1);
  EXPECT_EQ(r.histogram[19], 1);
  EXPECT_EQ(r.both_empty, 1);
}

std::vector<LabeledScene> scenes(int n, std::uint64_t seed) { return generate_dataset(n, seed, {}); }

TEST(GroundingEval, OracleMapGivesPerfectIou) {
  const auto data = scenes(60, 1);
  const EncoderConfig enc;
  const CamFunction oracle = [](const PreparedSample<float>& s) {
    return Plane(Eigen::Map<const Plane>(s.target.values().data(), 8, 8));
  };
  const auto report = grounding_eval(data, enc, {}, oracle);
  ASSERT_EQ(report.ious.size() + report.both_empty, 60u);
  EXPECT_EQ(report.both_empty, 0);
  EXPECT_EQ(report.mean_iou, 1.0);
  EXPECT_EQ(report.histogram[19], 60);
}

TEST(GroundingEval, InvertedOracleGivesZero) {
  const auto data = scenes(20, 2);
  const CamFunction inverted = [](const PreparedSample<float>& s) {
    const Plane t = Eigen::Map<const Plane>(s.target.values().data(), 8, 8);
    return Plane((t / t.maxCoeff() < 0.5f).cast<float>());
  };
  EXPECT_EQ(grounding_eval(data, EncoderConfig{}, {}, inverted).mean_iou, 0.0);
}

TEST(GroundingEval, DeterministicForEncoder) {
  const auto data = scenes(8, 3);
  const EncoderConfig enc;
  const auto q = init_params<float>(enc, 4, false), k = q.copy(false);
  const auto a = grounding_eval(data, enc, {}, encoder_cam(enc, q, k));
  const auto b = grounding_eval(data, enc, {}, encoder_cam(enc, q, k));
  EXPECT_EQ(a.ious, b.ious);
  GroundingOptions other;
  other.eval_seed = 99;
  for (double v : a.ious) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_NE(grounding_eval(data, enc, other, encoder_cam(enc, q, k)).ious, a.ious);
}

TEST(GroundingEval, EncoderCamMatchesDirectGradCam) {
  const auto data = scenes(1, 5);
  const EncoderConfig enc;
  const auto q = init_params<float>(enc, 6), k = init_params<float>(enc, 7, false);
  Rng rng = derive_rng(1, 0);
  const auto views = make_view_pair(data[0].image, data[0].mask, AugmentConfig{}, rng);
  const auto s = prepare_sample<float>(views, enc, SupervisionMode::kFullQuery);
  const auto out = forward(enc, q, s.query);
  const auto km = forward(enc, k, s.masked_key).embedding;
  const auto expected = grad_cam(out.embedding, km, out.conv5_acts, true).map;
  const Plane got = encoder_cam(enc, q, k)(s);
  EXPECT_TRUE((Eigen::Map<const Plane>(expected.values().data(), 8, 8) == got).all());
}

TEST(GroundingEval, EmptyDatasetRejected) {
  EXPECT_THROW(grounding_eval({}, EncoderConfig{}, {}, [](const PreparedSample<float>&) { return Plane(); }),
               std::invalid_argument);
}

// Looks only at mask and foreground pixels, so it cannot see the background.
SceneClassifier foreground_oracle(const ScenePool& pool) {
  auto key = [](const LabeledScene& s) {
    std::string k(reinterpret_cast<const char*>(s.mask.bits.data()), static_cast<std::size_t>(s.mask.bits.size()));
    for (const auto& p : s.image.rgb) {
      const Plane fg = (s.mask.bits != 0).select(p, 0.0f);
      k.append(reinterpret_cast<const char*>(fg.data()), static_cast<std::size_t>(fg.size()) * sizeof(float));
    }
    return k;
  };
  auto table = std::make_shared<std::map<std::string, int>>();
  for (const auto& s : pool.scenes()) (*table)[key(s)] = s.fg_class;
  return [table, key](const LabeledScene& s) {
    const auto it = table->find(key(s));
    return it == table->end() ? -1 : it->second;
  };
}

TEST(BackgroundsEval, ForegroundOracleIsBackgroundInvariant) {
  const ScenePool pool(scenes(120, 8));
  const auto table = backgrounds_eval(pool, foreground_oracle(pool), 1);
  for (Variant v : {Variant::kOriginal, Variant::kOnlyFg, Variant::kMixedSame, Variant::kMixedRand,
                    Variant::kMixedNext}) {
    EXPECT_EQ(table.at(v), 1.0) << to_string(v);
  }
  EXPECT_EQ(table.at(Variant::kNoFg), 0.0);
  EXPECT_TRUE(table.above_original().empty());
  for (int c : table.counts) EXPECT_EQ(c, 120);
}

TEST(BackgroundsEval, BackgroundOnlyClassifierLosesSignalWhenMixed) {
  // Reads the pixel in the top-left corner, which is background in most scenes.
  const ScenePool pool(generate_dataset(150, 9, SceneOptions{64, 1.0}));
  std::map<std::array<float, 3>, int> seen;
  for (const auto& s : pool.scenes()) seen[{s.image.rgb[0](0, 0), s.image.rgb[1](0, 0), s.image.rgb[2](0, 0)}] = s.fg_class;
  const SceneClassifier corner = [&seen](const LabeledScene& s) {
    const auto it = seen.find({s.image.rgb[0](0, 0), s.image.rgb[1](0, 0), s.image.rgb[2](0, 0)});
    return it == seen.end() ? -1 : it->second;
  };
  const auto table = backgrounds_eval(pool, corner, 2);
  EXPECT_GT(table.at(Variant::kOriginal), 0.8);
  EXPECT_LT(table.at(Variant::kMixedNext), 0.3);
  EXPECT_LT(table.at(Variant::kOnlyFg), 0.3);
}

TEST(BackgroundsEval, RequiresEveryClass) {
  std::vector<LabeledScene> few;
  for (std::uint64_t seed = 0; few.size() < 3; ++seed) {
    const auto spec = sample_scene_spec(seed, {});
    if (spec.fg_class == 0) few.push_back(gen_scene(spec));
  }
  EXPECT_THROW(backgrounds_eval(ScenePool(few), [](const LabeledScene&) { return 0; }, 1), MissingClassError);
}

TEST(BackgroundsEval, ProbeClassifierAccuraciesInRange) {
  const EncoderConfig enc;
  const auto params = init_params<float>(enc, 10, false);
  const auto train = scenes(90, 11);
  std::vector<Image> images;
  std::vector<int> labels;
  for (const auto& s : train) {
    images.push_back(s.image);
    labels.push_back(s.fg_class);
  }
  const auto probe = linear_probe_train(enc, params, images, labels, kNumFgClasses, 100);
  const ScenePool pool(scenes(45, 12));
  ASSERT_TRUE(pool.covers_all_classes());
  const auto table = backgrounds_eval(pool, probe_classifier(enc, params, probe), 3);
  for (double a : table.accuracy) {
    EXPECT_GE(a, 0.0);
    EXPECT_LE(a, 1.0);
  }
}

TEST(Reports, CsvLayout) {
  ScratchDir dir("reports");
  GroundingReport r;
  r.add({0.25, false});
  r.add({1.0, false});
  r.finish();
  write_grounding_csv(dir.path() / "g.csv", r);
  EXPECT_EQ(read_bytes(dir.path() / "g.csv"), "sample,iou\n0,0.250000\n1,1.000000\n");
  write_histogram_csv(dir.path() / "h.csv", r);
  const std::string h = read_bytes(dir.path() / "h.csv");
  EXPECT_EQ(std::count(h.begin(), h.end(), '\n'), 21);
  EXPECT_NE(h.find("0.25,0.30,1\n"), std::string::npos);
  EXPECT_NE(h.find("0.95,1.00,1\n"), std::string::npos);
  EXPECT_EQ(grounding_summary("cast", r), "cast: samples=2 mean_iou=0.6250 both_empty=0 skipped=0");

  BackgroundsTable t;
  t.accuracy.fill(0.5);
  t.counts.fill(4);
  write_backgrounds_csv(dir.path() / "b.csv", t);
  const std::string b = read_bytes(dir.path() / "b.csv");
  EXPECT_EQ(b.rfind("variant,accuracy,count\noriginal,0.500000,4\n", 0), 0u);
  EXPECT_NE(b.find("only-bg-t,0.500000,4\n"), std::string::npos);
}

}  // namespace
}  // namespace cast
