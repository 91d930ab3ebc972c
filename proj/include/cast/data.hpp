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

// Procedural shape scenes with exact masks, background-swap variants, and
// PPM/PGM file I/O.

#pragma once

#include "cast/crop_sampler.hpp"
#include "cast/image.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace cast {

enum class ShapeKind { kCircle, kTriangle, kRectangle };

inline constexpr int kNumShapes = 3;
inline constexpr int kNumColors = 3;
/// Foreground class = shape * kNumColors + color.
inline constexpr int kNumFgClasses = kNumShapes * kNumColors;
/// Background class = pattern * 3 + variant; patterns are noise, stripes, gradient.
inline constexpr int kNumBgClasses = 9;

inline ShapeKind shape_of(int fg_class) { return static_cast<ShapeKind>(fg_class / kNumColors); }
inline int color_of(int fg_class) { return fg_class % kNumColors; }
/// Background class paired with `fg_class` in biased scenes.
inline int correlated_bg_class(int fg_class) { return fg_class % kNumBgClasses; }

/// Integer bounding box of one object. Circles use width as the diameter
/// (height must match); triangles point up with their apex centred on top.
struct Placement {
  int left = 0;
  int top = 0;
  int width = 2;
  int height = 2;
  bool operator==(const Placement&) const = default;
};

/// Pixel (y, x) belongs to the shape iff its centre (y + .5, x + .5) does.
bool shape_contains(ShapeKind kind, const Placement& p, int y, int x);

struct SceneSpec {
  int canvas = 64;
  int fg_class = 0;
  int bg_class = 0;
  std::vector<Placement> objects;  // 1 to 3, all of fg_class
  std::uint64_t seed = 0;          // texture and colour jitter

  void validate() const;
};

struct LabeledScene {
  Image image;
  SaliencyMask mask;
  int fg_class = 0;
  int bg_class = 0;
};

struct SceneOptions {
  int canvas = 64;
  double bias = 0.0;  // probability that bg_class = correlated_bg_class(fg_class)
  int min_size = 12;
  int max_size = 26;
  int max_objects = 3;

  void validate() const;
};

/// Draws classes and placements from `seed`. The fg class is uniform.
SceneSpec sample_scene_spec(std::uint64_t seed, const SceneOptions& options);

/// Deterministic render. Pixel values are multiples of 1/255.
LabeledScene gen_scene(const SceneSpec& spec);

/// Scenes 0..count-1, each from its own derived seed.
std::vector<LabeledScene> generate_dataset(int count, std::uint64_t seed, const SceneOptions& options);

// ---------------------------------------------------------------------------
// Backgrounds variants

enum class Variant { kOriginal, kOnlyFg, kMixedSame, kMixedRand, kMixedNext, kNoFg, kOnlyBgB, kOnlyBgT };
inline constexpr int kNumVariants = 8;
inline constexpr std::array<Variant, kNumVariants> kAllVariants{
    Variant::kOriginal, Variant::kOnlyFg, Variant::kMixedSame, Variant::kMixedRand,
    Variant::kMixedNext, Variant::kNoFg,   Variant::kOnlyBgB,   Variant::kOnlyBgT};

std::string_view to_string(Variant variant);
Variant parse_variant(std::string_view text);

class MissingClassError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Scenes indexed by foreground class.
class ScenePool {
 public:
  ScenePool(std::vector<LabeledScene> scenes, int num_classes = kNumFgClasses);

  const std::vector<LabeledScene>& scenes() const { return scenes_; }
  const std::vector<int>& of_class(int fg_class) const;
  int num_classes() const { return static_cast<int>(by_class_.size()); }
  bool covers_all_classes() const;

 private:
  std::vector<LabeledScene> scenes_;
  std::vector<std::vector<int>> by_class_;
};

struct Composite {
  LabeledScene scene;   // fg_class kept; bg_class is the donor's for mixed variants
  int donor = -1;       // pool index of the background donor, or -1
  int donor_class = -1;
};

/// Mask pixels filled by tiling the largest mask-free rectangle of `image`.
Image tile_background(const Image& image, const SaliencyMask& hole, const SaliencyMask& source_mask);

/// Bounding box of the salient pixels as a filled mask.
SaliencyMask bounding_box_mask(const SaliencyMask& mask);

/// Composites along the mask. Mixed variants take the background of a donor
/// with its foreground tiled over. Only-BG variants act on the mask's
/// bounding box. Throws MissingClassError if the donor class is absent.
Composite compose_variant(const LabeledScene& scene, const ScenePool& pool, Variant variant, Rng& rng);

// ---------------------------------------------------------------------------
// Files

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Binary P6, one byte per channel, round(255 v).
void save_ppm(const std::filesystem::path& path, const Image& image);
Image load_ppm(const std::filesystem::path& path);
/// Binary P5 with values 0 or 255.
void save_pgm(const std::filesystem::path& path, const SaliencyMask& mask);
SaliencyMask load_pgm(const std::filesystem::path& path);

struct IndexEntry {
  std::string name;
  int fg_class = 0;
  int bg_class = 0;
};

inline constexpr std::string_view kIndexFile = "index.csv";

/// Writes `<name>.ppm`, `<name>.pgm` per scene plus the index. Names are
/// zero-padded positions.
std::vector<IndexEntry> save_dataset(const std::filesystem::path& dir, const std::vector<LabeledScene>& scenes);
std::vector<IndexEntry> read_index(const std::filesystem::path& dir);
std::vector<LabeledScene> load_dataset(const std::filesystem::path& dir);

}  // namespace cast
