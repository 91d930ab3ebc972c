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

// Saliency-constrained random resized cropping.
//
// A crop is accepted only if it covers at least ceil(phi * A_M) salient
// pixels, where A_M is the salient area of the whole image. phi = 0 accepts
// every geometrically valid crop, i.e. the usual random resized crop.

#pragma once

#include "cast/image.hpp"

#include <cstdint>
#include <optional>
#include <random>

namespace cast {

using Rng = std::mt19937_64;

/// Independent stream `stream` of a run seeded with `seed`.
inline Rng derive_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return Rng(seq);
}

struct CropSpec {
  int top = 0;
  int left = 0;
  int height = 1;
  int width = 1;
  bool hflip = false;

  bool operator==(const CropSpec&) const = default;
};

struct CropConstraint {
  double phi = 0.2;
  double scale_lo = 0.2;
  double scale_hi = 1.0;
  double aspect_lo = 3.0 / 4.0;
  double aspect_hi = 4.0 / 3.0;

  void validate() const;
};

/// Raised when phi > 0 but the mask has no salient pixel. The caller decides
/// whether to skip the sample or retry with phi = 0.
class DegenerateMaskError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// S(i, j) = sum of the mask over [0, i) x [0, j).
class SummedAreaTable {
 public:
  explicit SummedAreaTable(const SaliencyMask& mask);

  int height() const { return static_cast<int>(table_.rows()) - 1; }
  int width() const { return static_cast<int>(table_.cols()) - 1; }
  std::int64_t total() const { return table_(table_.rows() - 1, table_.cols() - 1); }
  /// Sum over rows [top, top + h) and columns [left, left + w).
  std::int64_t rect_sum(int top, int left, int h, int w) const {
    return table_(top + h, left + w) - table_(top, left + w) - table_(top + h, left) + table_(top, left);
  }

 private:
  Eigen::Array<std::int64_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> table_;
};

bool crop_in_bounds(const CropSpec& crop, int height, int width);

/// Salient pixels inside the crop rectangle. Throws std::out_of_range if the
/// crop leaves the image.
std::int64_t overlap_area(const CropSpec& crop, const SummedAreaTable& table);

/// ceil(phi * A_M): the least overlap a crop needs to be accepted.
std::int64_t required_overlap(double phi, std::int64_t salient_area);

/// Rejection sampling only: returns nullopt when no draw in `max_attempts`
/// satisfies the constraint.
std::optional<CropSpec> try_sample_crop(const SummedAreaTable& table, const CropConstraint& constraint, Rng& rng,
                                        int max_attempts);

/// Tight bounding box of the salient pixels (the whole image if none).
CropSpec salient_bounding_box(const SaliencyMask& mask);

/// Rejection sampling with a deterministic fallback to the salient bounding
/// box after `max_attempts` failures. The result always satisfies the
/// constraint.
CropSpec sample_constrained_crop(const SaliencyMask& mask, const CropConstraint& constraint, Rng& rng,
                                 int max_attempts = 50);

/// Source row/column sampled by nearest-neighbour resizing for output index
/// `o` of `out_extent`, before flipping. Shared by images and masks so both
/// stay geometrically aligned.
int nearest_source_index(int o, int crop_offset, int crop_extent, int out_extent);

/// Bilinear crop-and-resize to out_size x out_size, then horizontal flip if set.
Image apply_crop(const Image& image, const CropSpec& crop, int out_size);
/// Nearest-neighbour crop-and-resize; the result stays binary.
SaliencyMask apply_crop(const SaliencyMask& mask, const CropSpec& crop, int out_size);

/// The mask with everything outside `crop` cleared (same extent as the input).
SaliencyMask restrict_to_crop(const SaliencyMask& mask, const CropSpec& crop);

/// Multiplies by `brightness`, then scales contrast about the mean luma by
/// `contrast`, clamping to [0, 1] after each step.
Image color_jitter(const Image& image, float brightness, float contrast);

struct AugmentConfig {
  CropConstraint constraint;
  int out_size = 64;
  double brightness = 0.4;
  double contrast = 0.4;
  int max_attempts = 50;

  void validate() const;
};

/// Two independently cropped, flipped and color-jittered views of one image
/// plus their crop-consistent masks.
struct ViewPair {
  Image query;
  SaliencyMask query_mask;  // M_q: all salient pixels inside the query crop
  Image key;
  SaliencyMask key_mask;  // M_k
  /// Salient pixels of the query that also lie inside the key crop, used by
  /// the intersection supervision mode.
  SaliencyMask query_mask_shared;
  CropSpec query_crop;
  CropSpec key_crop;
};

ViewPair make_view_pair(const Image& image, const SaliencyMask& mask, const AugmentConfig& config, Rng& rng);

}  // namespace cast
