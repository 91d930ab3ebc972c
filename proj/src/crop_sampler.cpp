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

#include "cast/crop_sampler.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace cast {

void CropConstraint::validate() const {
  if (!(phi >= 0.0 && phi < 1.0)) throw std::invalid_argument("phi must lie in [0, 1), got " + std::to_string(phi));
  if (!(scale_lo > 0.0 && scale_lo <= scale_hi && scale_hi <= 1.0)) {
    throw std::invalid_argument("scale range must satisfy 0 < lo <= hi <= 1");
  }
  if (!(aspect_lo > 0.0 && aspect_lo <= aspect_hi)) {
    throw std::invalid_argument("aspect range must satisfy 0 < lo <= hi");
  }
}

void AugmentConfig::validate() const {
  constraint.validate();
  if (out_size <= 0) throw std::invalid_argument("out_size must be positive");
  if (brightness < 0.0 || brightness >= 1.0 || contrast < 0.0 || contrast >= 1.0) {
    throw std::invalid_argument("color jitter strengths must lie in [0, 1)");
  }
  if (max_attempts < 1) throw std::invalid_argument("max_attempts must be at least 1");
}

SummedAreaTable::SummedAreaTable(const SaliencyMask& mask) {
  const auto h = mask.height(), w = mask.width();
  table_.setZero(h + 1, w + 1);
  for (Eigen::Index i = 0; i < h; ++i) {
    std::int64_t row = 0;
    for (Eigen::Index j = 0; j < w; ++j) {
      row += mask.bits(i, j);
      table_(i + 1, j + 1) = table_(i, j + 1) + row;
    }
  }
}

bool crop_in_bounds(const CropSpec& crop, int height, int width) {
  return crop.height >= 1 && crop.width >= 1 && crop.top >= 0 && crop.left >= 0 &&
         crop.top + crop.height <= height && crop.left + crop.width <= width;
}

namespace {

void require_in_bounds(const CropSpec& crop, int height, int width, const char* where) {
  if (!crop_in_bounds(crop, height, width)) {
    throw std::out_of_range(std::string(where) + ": crop (" + std::to_string(crop.top) + "," +
                            std::to_string(crop.left) + "," + std::to_string(crop.height) + "x" +
                            std::to_string(crop.width) + ") outside " + std::to_string(height) + "x" +
                            std::to_string(width) + " image");
  }
}

}  // namespace

std::int64_t overlap_area(const CropSpec& crop, const SummedAreaTable& table) {
  require_in_bounds(crop, table.height(), table.width(), "overlap_area");
  return table.rect_sum(crop.top, crop.left, crop.height, crop.width);
}

std::int64_t required_overlap(double phi, std::int64_t salient_area) {
  return static_cast<std::int64_t>(std::ceil(phi * static_cast<double>(salient_area)));
}

std::optional<CropSpec> try_sample_crop(const SummedAreaTable& table, const CropConstraint& constraint, Rng& rng,
                                        int max_attempts) {
  const int h = table.height(), w = table.width();
  const double area = static_cast<double>(h) * w;
  const std::int64_t need = required_overlap(constraint.phi, table.total());
  std::uniform_real_distribution<double> scale(constraint.scale_lo, constraint.scale_hi);
  std::uniform_real_distribution<double> log_aspect(std::log(constraint.aspect_lo), std::log(constraint.aspect_hi));
  std::bernoulli_distribution flip(0.5);
  for (int attempt = 0; attempt < max_attempts; ++attempt) {
    const double target = area * scale(rng);
    const double aspect = std::exp(log_aspect(rng));
    const int cw = static_cast<int>(std::lround(std::sqrt(target * aspect)));
    const int ch = static_cast<int>(std::lround(std::sqrt(target / aspect)));
    if (cw < 1 || ch < 1 || cw > w || ch > h) continue;
    CropSpec crop;
    crop.height = ch;
    crop.width = cw;
    crop.top = std::uniform_int_distribution<int>(0, h - ch)(rng);
    crop.left = std::uniform_int_distribution<int>(0, w - cw)(rng);
    if (table.rect_sum(crop.top, crop.left, ch, cw) >= need) {
      crop.hflip = flip(rng);
      return crop;
    }
  }
  return std::nullopt;
}

CropSpec salient_bounding_box(const SaliencyMask& mask) {
  const int h = static_cast<int>(mask.height()), w = static_cast<int>(mask.width());
  int top = h, bottom = -1, left = w, right = -1;
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      if (!mask.bits(i, j)) continue;
      top = std::min(top, i);
      bottom = std::max(bottom, i);
      left = std::min(left, j);
      right = std::max(right, j);
    }
  }
  if (bottom < 0) return CropSpec{0, 0, h, w, false};
  return CropSpec{top, left, bottom - top + 1, right - left + 1, false};
}

CropSpec sample_constrained_crop(const SaliencyMask& mask, const CropConstraint& constraint, Rng& rng,
                                 int max_attempts) {
  constraint.validate();
  const SummedAreaTable table(mask);
  if (constraint.phi > 0.0 && table.total() == 0) {
    throw DegenerateMaskError("saliency mask is empty but phi = " + std::to_string(constraint.phi) +
                              " requires salient overlap");
  }
  if (auto crop = try_sample_crop(table, constraint, rng, max_attempts)) return *crop;
  CropSpec fallback = salient_bounding_box(mask);
  fallback.hflip = std::bernoulli_distribution(0.5)(rng);
  return fallback;
}

int nearest_source_index(int o, int crop_offset, int crop_extent, int out_extent) {
  const double s = (o + 0.5) * static_cast<double>(crop_extent) / out_extent;
  return crop_offset + std::min(crop_extent - 1, static_cast<int>(std::floor(s)));
}

Image apply_crop(const Image& image, const CropSpec& crop, int out_size) {
  require_in_bounds(crop, static_cast<int>(image.height()), static_cast<int>(image.width()), "apply_crop");
  struct Tap {
    int i0, i1;
    float frac;
  };
  auto taps = [out_size](int offset, int extent) {
    std::vector<Tap> t(out_size);
    const double ratio = static_cast<double>(extent) / out_size;
    for (int o = 0; o < out_size; ++o) {
      double s = offset + (o + 0.5) * ratio - 0.5;
      s = std::clamp(s, static_cast<double>(offset), static_cast<double>(offset + extent - 1));
      const int i0 = static_cast<int>(std::floor(s));
      t[o] = Tap{i0, std::min(i0 + 1, offset + extent - 1), static_cast<float>(s - i0)};
    }
    return t;
  };
  const auto rows = taps(crop.top, crop.height);
  const auto cols = taps(crop.left, crop.width);
  Image out = Image::zeros(out_size, out_size);
  for (int c = 0; c < 3; ++c) {
    const Plane& src = image.rgb[c];
    Plane& dst = out.rgb[c];
    for (int oy = 0; oy < out_size; ++oy) {
      const Tap& r = rows[oy];
      for (int ox = 0; ox < out_size; ++ox) {
        const Tap& q = cols[crop.hflip ? out_size - 1 - ox : ox];
        const float top = (1.0f - q.frac) * src(r.i0, q.i0) + q.frac * src(r.i0, q.i1);
        const float bottom = (1.0f - q.frac) * src(r.i1, q.i0) + q.frac * src(r.i1, q.i1);
        dst(oy, ox) = (1.0f - r.frac) * top + r.frac * bottom;
      }
    }
  }
  return out;
}

SaliencyMask apply_crop(const SaliencyMask& mask, const CropSpec& crop, int out_size) {
  require_in_bounds(crop, static_cast<int>(mask.height()), static_cast<int>(mask.width()), "apply_crop");
  SaliencyMask out = SaliencyMask::zeros(out_size, out_size);
  for (int oy = 0; oy < out_size; ++oy) {
    const int sy = nearest_source_index(oy, crop.top, crop.height, out_size);
    for (int ox = 0; ox < out_size; ++ox) {
      const int sx = nearest_source_index(crop.hflip ? out_size - 1 - ox : ox, crop.left, crop.width, out_size);
      out.bits(oy, ox) = mask.bits(sy, sx);
    }
  }
  return out;
}

SaliencyMask restrict_to_crop(const SaliencyMask& mask, const CropSpec& crop) {
  require_in_bounds(crop, static_cast<int>(mask.height()), static_cast<int>(mask.width()), "restrict_to_crop");
  SaliencyMask out = SaliencyMask::zeros(mask.height(), mask.width());
  out.bits.block(crop.top, crop.left, crop.height, crop.width) =
      mask.bits.block(crop.top, crop.left, crop.height, crop.width);
  return out;
}

Image color_jitter(const Image& image, float brightness, float contrast) {
  Image out = image;
  for (auto& p : out.rgb) p = (p * brightness).cwiseMax(0.0f).cwiseMin(1.0f);
  const float luma = (0.299f * out.rgb[0] + 0.587f * out.rgb[1] + 0.114f * out.rgb[2]).mean();
  for (auto& p : out.rgb) p = ((p - luma) * contrast + luma).cwiseMax(0.0f).cwiseMin(1.0f);
  return out;
}

ViewPair make_view_pair(const Image& image, const SaliencyMask& mask, const AugmentConfig& config, Rng& rng) {
  config.validate();
  require_same_extent(image, mask, "make_view_pair");
  ViewPair v;
  v.query_crop = sample_constrained_crop(mask, config.constraint, rng, config.max_attempts);
  v.key_crop = sample_constrained_crop(mask, config.constraint, rng, config.max_attempts);
  std::uniform_real_distribution<float> bright(static_cast<float>(1.0 - config.brightness),
                                               static_cast<float>(1.0 + config.brightness));
  std::uniform_real_distribution<float> contr(static_cast<float>(1.0 - config.contrast),
                                              static_cast<float>(1.0 + config.contrast));
  const float qb = bright(rng), qc = contr(rng);
  const float kb = bright(rng), kc = contr(rng);
  v.query = color_jitter(apply_crop(image, v.query_crop, config.out_size), qb, qc);
  v.key = color_jitter(apply_crop(image, v.key_crop, config.out_size), kb, kc);
  v.query_mask = apply_crop(mask, v.query_crop, config.out_size);
  v.key_mask = apply_crop(mask, v.key_crop, config.out_size);
  v.query_mask_shared = apply_crop(restrict_to_crop(mask, v.key_crop), v.query_crop, config.out_size);
  return v;
}

}  // namespace cast
