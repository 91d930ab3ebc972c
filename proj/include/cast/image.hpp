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

#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace cast {

using Plane = Eigen::Array<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using BitPlane = Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Planar RGB image, values in [0, 1].
struct Image {
  std::array<Plane, 3> rgb;

  static Image zeros(Eigen::Index height, Eigen::Index width) {
    Image img;
    for (auto& p : img.rgb) p = Plane::Zero(height, width);
    return img;
  }
  Eigen::Index height() const { return rgb[0].rows(); }
  Eigen::Index width() const { return rgb[0].cols(); }
  bool operator==(const Image& other) const {
    for (int c = 0; c < 3; ++c) {
      if (rgb[c].rows() != other.rgb[c].rows() || rgb[c].cols() != other.rgb[c].cols()) return false;
      if ((rgb[c] != other.rgb[c]).any()) return false;
    }
    return true;
  }
};

/// Binary h x w saliency map M. Every value is 0 or 1.
struct SaliencyMask {
  BitPlane bits;

  static SaliencyMask zeros(Eigen::Index height, Eigen::Index width) { return {BitPlane::Zero(height, width)}; }
  static SaliencyMask ones(Eigen::Index height, Eigen::Index width) { return {BitPlane::Ones(height, width)}; }

  Eigen::Index height() const { return bits.rows(); }
  Eigen::Index width() const { return bits.cols(); }
  /// A_M, the number of salient pixels.
  std::int64_t area() const { return bits.cast<std::int64_t>().sum(); }
  bool is_binary() const { return (bits <= 1).all(); }
  bool operator==(const SaliencyMask& other) const {
    return bits.rows() == other.bits.rows() && bits.cols() == other.bits.cols() && (bits == other.bits).all();
  }
};

inline void require_same_extent(const Image& image, const SaliencyMask& mask, const char* where) {
  if (image.height() != mask.height() || image.width() != mask.width()) {
    throw std::invalid_argument(std::string(where) + ": image is " + std::to_string(image.height()) + "x" +
                                std::to_string(image.width()) + " but mask is " + std::to_string(mask.height()) +
                                "x" + std::to_string(mask.width()));
  }
}

}  // namespace cast
