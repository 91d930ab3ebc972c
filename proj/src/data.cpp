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

#include "cast/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <sstream>

namespace cast {
namespace {

using Rgb = std::array<float, 3>;

constexpr std::array<Rgb, kNumColors> kFgColors{{
    {0.90f, 0.12f, 0.12f},
    {0.12f, 0.80f, 0.20f},
    {0.15f, 0.25f, 0.90f},
}};

constexpr std::array<Rgb, kNumBgClasses> kBgTints{{
    {0.85f, 0.80f, 0.70f},
    {0.70f, 0.80f, 0.85f},
    {0.80f, 0.85f, 0.70f},
    {0.85f, 0.75f, 0.80f},
    {0.75f, 0.75f, 0.75f},
    {0.90f, 0.85f, 0.60f},
    {0.65f, 0.75f, 0.70f},
    {0.80f, 0.70f, 0.65f},
    {0.70f, 0.70f, 0.85f},
}};

float quantize(float v) { return std::round(std::clamp(v, 0.0f, 1.0f) * 255.0f) / 255.0f; }

int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

Plane background_intensity(int bg_class, int n, Rng& rng) {
  const int pattern = bg_class / 3, variant = bg_class % 3;
  Plane out(n, n);
  if (pattern == 0) {
    const int block = 2 << variant;
    const int cells = (n + block - 1) / block;
    Plane grid(cells, cells);
    std::uniform_real_distribution<float> u(0.3f, 0.9f);
    for (Eigen::Index i = 0; i < grid.size(); ++i) grid.data()[i] = u(rng);
    for (int y = 0; y < n; ++y) {
      for (int x = 0; x < n; ++x) out(y, x) = grid(y / block, x / block);
    }
  } else if (pattern == 1) {
    const int period = uniform_int(rng, 6, 12);
    const int phase = uniform_int(rng, 0, period - 1);
    for (int y = 0; y < n; ++y) {
      for (int x = 0; x < n; ++x) {
        const int coord = variant == 0 ? y : variant == 1 ? x : x + y;
        out(y, x) = (coord + phase) % period < period / 2 ? 0.9f : 0.45f;
      }
    }
  } else {
    const bool flip = std::bernoulli_distribution(0.5)(rng);
    const float cy = static_cast<float>(uniform_int(rng, 0, n - 1)), cx = static_cast<float>(uniform_int(rng, 0, n - 1));
    const float span = static_cast<float>(n - 1);
    for (int y = 0; y < n; ++y) {
      for (int x = 0; x < n; ++x) {
        float t = variant == 0 ? x / span
                  : variant == 1 ? y / span
                                 : std::min(1.0f, std::hypot(y - cy, x - cx) / span);
        if (flip) t = 1.0f - t;
        out(y, x) = 0.3f + 0.6f * t;
      }
    }
  }
  return out;
}

double edge(double ax, double ay, double bx, double by, double px, double py) {
  return (bx - ax) * (py - ay) - (by - ay) * (px - ax);
}

void check_placement(ShapeKind kind, const Placement& p, int canvas) {
  if (p.width < 2 || p.height < 2) throw std::invalid_argument("scene: objects must be at least 2x2");
  if (p.left < 0 || p.top < 0 || p.left + p.width > canvas || p.top + p.height > canvas) {
    throw std::invalid_argument("scene: object exceeds the canvas");
  }
  if (kind == ShapeKind::kCircle && (p.width != p.height || p.width % 2 != 0)) {
    throw std::invalid_argument("scene: circles need an even, square box");
  }
  if (kind == ShapeKind::kTriangle && p.width % 2 != 0) {
    throw std::invalid_argument("scene: triangles need an even base");
  }
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) out.push_back(field);
  return out;
}

int parse_int(const std::string& text, const std::string& what) {
  std::size_t used = 0;
  int value = 0;
  try {
    value = std::stoi(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != text.size()) throw FormatError("index: bad " + what + " '" + text + "'");
  return value;
}

// Netpbm header: magic, width, height, maxval, separated by whitespace or
// comments, then a single whitespace byte before the raster.
struct PnmHeader {
  int width = 0;
  int height = 0;
};

PnmHeader read_header(std::istream& in, std::string_view magic, const std::filesystem::path& path) {
  auto fail = [&](const std::string& why) { return FormatError(path.string() + ": " + why); };
  auto token = [&]() {
    std::string t;
    int c = in.get();
    while (c != EOF) {
      if (c == '#') {
        while (c != EOF && c != '\n') c = in.get();
      } else if (std::isspace(c)) {
        c = in.get();
      } else {
        break;
      }
    }
    while (c != EOF && !std::isspace(c) && c != '#') {
      t.push_back(static_cast<char>(c));
      c = in.get();
    }
    if (c == '#') in.unget();
    return t;
  };
  auto number = [&](const char* what) {
    const std::string t = token();
    if (t.empty() || !std::all_of(t.begin(), t.end(), [](char ch) { return ch >= '0' && ch <= '9'; }) ||
        t.size() > 6) {
      throw fail(std::string("malformed header, bad ") + what + " '" + t + "'");
    }
    return std::stoi(t);
  };
  if (token() != magic) throw fail("malformed header, expected magic " + std::string(magic));
  PnmHeader h;
  h.width = number("width");
  h.height = number("height");
  const int maxval = number("maxval");
  if (h.width <= 0 || h.height <= 0) throw fail("malformed header, empty raster");
  if (maxval != 255) throw fail("malformed header, maxval must be 255");
  return h;
}

std::vector<unsigned char> read_raster(std::istream& in, std::size_t count, const std::filesystem::path& path) {
  std::vector<unsigned char> bytes(count);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(count));
  if (static_cast<std::size_t>(in.gcount()) != count) throw FormatError(path.string() + ": truncated raster");
  if (in.peek() != EOF) throw FormatError(path.string() + ": trailing bytes after raster");
  return bytes;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return in;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

}  // namespace

bool shape_contains(ShapeKind kind, const Placement& p, int y, int x) {
  const double yc = y + 0.5, xc = x + 0.5;
  switch (kind) {
    case ShapeKind::kRectangle:
      return x >= p.left && x < p.left + p.width && y >= p.top && y < p.top + p.height;
    case ShapeKind::kCircle: {
      const double r = p.width / 2;
      const double dx = xc - (p.left + r), dy = yc - (p.top + r);
      return dx * dx + dy * dy <= r * r;
    }
    case ShapeKind::kTriangle: {
      const double ax = p.left + p.width / 2.0, ay = p.top;
      const double bx = p.left, by = p.top + p.height;
      const double cx = p.left + p.width, cy = by;
      const double e0 = edge(ax, ay, bx, by, xc, yc), e1 = edge(bx, by, cx, cy, xc, yc),
                   e2 = edge(cx, cy, ax, ay, xc, yc);
      return (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0);
    }
  }
  return false;
}

void SceneSpec::validate() const {
  if (canvas < 4) throw std::invalid_argument("scene: canvas must be at least 4");
  if (fg_class < 0 || fg_class >= kNumFgClasses) throw std::invalid_argument("scene: fg_class out of range");
  if (bg_class < 0 || bg_class >= kNumBgClasses) throw std::invalid_argument("scene: bg_class out of range");
  if (objects.empty() || objects.size() > 3) throw std::invalid_argument("scene: object count must be 1 to 3");
  for (const auto& p : objects) check_placement(shape_of(fg_class), p, canvas);
}

void SceneOptions::validate() const {
  if (canvas < 8) throw std::invalid_argument("scene options: canvas must be at least 8");
  if (!(bias >= 0.0 && bias <= 1.0)) throw std::invalid_argument("scene options: bias must lie in [0, 1]");
  if (min_size < 2 || min_size > max_size || max_size > canvas) {
    throw std::invalid_argument("scene options: need 2 <= min_size <= max_size <= canvas");
  }
  if (max_objects < 1 || max_objects > 3) throw std::invalid_argument("scene options: max_objects must be 1 to 3");
}

SceneSpec sample_scene_spec(std::uint64_t seed, const SceneOptions& options) {
  options.validate();
  Rng rng = derive_rng(seed, 0);
  SceneSpec spec;
  spec.canvas = options.canvas;
  spec.fg_class = uniform_int(rng, 0, kNumFgClasses - 1);
  const bool correlated = std::bernoulli_distribution(options.bias)(rng);
  const int free_bg = uniform_int(rng, 0, kNumBgClasses - 1);
  spec.bg_class = correlated ? correlated_bg_class(spec.fg_class) : free_bg;
  const ShapeKind kind = shape_of(spec.fg_class);
  const int count = uniform_int(rng, 1, options.max_objects);
  for (int i = 0; i < count; ++i) {
    Placement p;
    p.width = std::max(2, uniform_int(rng, options.min_size, options.max_size) & ~1);
    p.height = kind == ShapeKind::kCircle ? p.width : uniform_int(rng, options.min_size, options.max_size);
    p.left = uniform_int(rng, 0, spec.canvas - p.width);
    p.top = uniform_int(rng, 0, spec.canvas - p.height);
    spec.objects.push_back(p);
  }
  spec.seed = rng();
  return spec;
}

LabeledScene gen_scene(const SceneSpec& spec) {
  spec.validate();
  Rng rng = derive_rng(spec.seed, 1);
  const int n = spec.canvas;
  LabeledScene scene{Image::zeros(n, n), SaliencyMask::zeros(n, n), spec.fg_class, spec.bg_class};

  const Plane intensity = background_intensity(spec.bg_class, n, rng);
  const Rgb& tint = kBgTints[static_cast<std::size_t>(spec.bg_class)];
  for (int c = 0; c < 3; ++c) scene.image.rgb[c] = (intensity * tint[c]).unaryExpr(&quantize);

  Rgb color = kFgColors[static_cast<std::size_t>(color_of(spec.fg_class))];
  for (auto& v : color) v = quantize(v + static_cast<float>(uniform_int(rng, -12, 12)) / 255.0f);

  const ShapeKind kind = shape_of(spec.fg_class);
  for (const auto& p : spec.objects) {
    for (int y = p.top; y < p.top + p.height; ++y) {
      for (int x = p.left; x < p.left + p.width; ++x) {
        if (!shape_contains(kind, p, y, x)) continue;
        scene.mask.bits(y, x) = 1;
        for (int c = 0; c < 3; ++c) scene.image.rgb[c](y, x) = color[c];
      }
    }
  }
  return scene;
}

std::vector<LabeledScene> generate_dataset(int count, std::uint64_t seed, const SceneOptions& options) {
  if (count < 0) throw std::invalid_argument("dataset: count must be non-negative");
  options.validate();
  std::vector<LabeledScene> scenes;
  scenes.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const std::uint64_t item_seed = derive_rng(seed, static_cast<std::uint64_t>(i))();
    scenes.push_back(gen_scene(sample_scene_spec(item_seed, options)));
  }
  return scenes;
}

// ---------------------------------------------------------------------------

std::string_view to_string(Variant variant) {
  switch (variant) {
    case Variant::kOriginal: return "original";
    case Variant::kOnlyFg: return "only-fg";
    case Variant::kMixedSame: return "mixed-same";
    case Variant::kMixedRand: return "mixed-rand";
    case Variant::kMixedNext: return "mixed-next";
    case Variant::kNoFg: return "no-fg";
    case Variant::kOnlyBgB: return "only-bg-b";
    case Variant::kOnlyBgT: return "only-bg-t";
  }
  return "unknown";
}

Variant parse_variant(std::string_view text) {
  for (Variant v : kAllVariants) {
    if (to_string(v) == text) return v;
  }
  throw std::invalid_argument("unknown variant '" + std::string(text) + "'");
}

ScenePool::ScenePool(std::vector<LabeledScene> scenes, int num_classes)
    : scenes_(std::move(scenes)), by_class_(static_cast<std::size_t>(num_classes)) {
  if (num_classes < 1) throw std::invalid_argument("scene pool: need at least one class");
  for (std::size_t i = 0; i < scenes_.size(); ++i) {
    const int c = scenes_[i].fg_class;
    if (c < 0 || c >= num_classes) throw std::invalid_argument("scene pool: fg_class out of range");
    by_class_[static_cast<std::size_t>(c)].push_back(static_cast<int>(i));
  }
}

const std::vector<int>& ScenePool::of_class(int fg_class) const {
  if (fg_class < 0 || fg_class >= num_classes()) throw std::out_of_range("scene pool: class out of range");
  return by_class_[static_cast<std::size_t>(fg_class)];
}

bool ScenePool::covers_all_classes() const {
  return std::none_of(by_class_.begin(), by_class_.end(), [](const auto& v) { return v.empty(); });
}

SaliencyMask bounding_box_mask(const SaliencyMask& mask) {
  SaliencyMask box = SaliencyMask::zeros(mask.height(), mask.width());
  Eigen::Index top = mask.height(), bottom = -1, left = mask.width(), right = -1;
  for (Eigen::Index y = 0; y < mask.height(); ++y) {
    for (Eigen::Index x = 0; x < mask.width(); ++x) {
      if (!mask.bits(y, x)) continue;
      top = std::min(top, y), bottom = std::max(bottom, y);
      left = std::min(left, x), right = std::max(right, x);
    }
  }
  if (bottom >= 0) box.bits.block(top, left, bottom - top + 1, right - left + 1).setConstant(1);
  return box;
}

Image tile_background(const Image& image, const SaliencyMask& hole, const SaliencyMask& source_mask) {
  require_same_extent(image, hole, "tile_background");
  require_same_extent(image, source_mask, "tile_background");
  const Eigen::Index h = image.height(), w = image.width();
  // Largest all-zero rectangle of source_mask, by the histogram-stack method.
  std::vector<Eigen::Index> run(static_cast<std::size_t>(w), 0);
  Eigen::Index best = 0, rt = 0, rl = 0, rh = 0, rw = 0;
  for (Eigen::Index y = 0; y < h; ++y) {
    for (Eigen::Index x = 0; x < w; ++x) run[x] = source_mask.bits(y, x) ? 0 : run[x] + 1;
    std::vector<Eigen::Index> stack;
    for (Eigen::Index x = 0; x <= w; ++x) {
      const Eigen::Index cur = x < w ? run[x] : 0;
      while (!stack.empty() && run[stack.back()] >= cur) {
        const Eigen::Index height = run[stack.back()];
        stack.pop_back();
        const Eigen::Index start = stack.empty() ? 0 : stack.back() + 1;
        if (height * (x - start) > best) {
          best = height * (x - start);
          rt = y - height + 1, rl = start, rh = height, rw = x - start;
        }
      }
      stack.push_back(x);
    }
  }
  if (best == 0) throw std::invalid_argument("tile_background: no background pixels to tile from");
  Image out = image;
  for (Eigen::Index y = 0; y < h; ++y) {
    for (Eigen::Index x = 0; x < w; ++x) {
      if (!hole.bits(y, x)) continue;
      for (int c = 0; c < 3; ++c) out.rgb[c](y, x) = image.rgb[c](rt + y % rh, rl + x % rw);
    }
  }
  return out;
}

Composite compose_variant(const LabeledScene& scene, const ScenePool& pool, Variant variant, Rng& rng) {
  require_same_extent(scene.image, scene.mask, "compose_variant");
  Composite out{scene, -1, -1};
  auto blank = [&](const SaliencyMask& region) {
    for (auto& p : out.scene.image.rgb) p = (region.bits != 0).select(0.0f, p);
  };
  switch (variant) {
    case Variant::kOriginal:
      break;
    case Variant::kOnlyFg:
      for (auto& p : out.scene.image.rgb) p = (scene.mask.bits != 0).select(p, 0.0f);
      break;
    case Variant::kNoFg:
      blank(scene.mask);
      break;
    case Variant::kOnlyBgB:
      blank(bounding_box_mask(scene.mask));
      break;
    case Variant::kOnlyBgT: {
      const SaliencyMask box = bounding_box_mask(scene.mask);
      out.scene.image = tile_background(scene.image, box, box);
      break;
    }
    case Variant::kMixedSame:
    case Variant::kMixedRand:
    case Variant::kMixedNext: {
      if (pool.scenes().empty()) throw MissingClassError("compose_variant: empty pool");
      const int k = pool.num_classes();
      const int donor_class = variant == Variant::kMixedSame   ? scene.fg_class
                              : variant == Variant::kMixedNext ? (scene.fg_class + 1) % k
                                                               : uniform_int(rng, 0, k - 1);
      const auto& candidates = pool.of_class(donor_class);
      if (candidates.empty()) {
        throw MissingClassError("compose_variant: pool has no scene of class " + std::to_string(donor_class));
      }
      const int donor = candidates[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(candidates.size()) - 1))];
      const LabeledScene& d = pool.scenes()[static_cast<std::size_t>(donor)];
      require_same_extent(scene.image, d.mask, "compose_variant donor");
      const Image background = tile_background(d.image, d.mask, d.mask);
      for (int c = 0; c < 3; ++c) {
        out.scene.image.rgb[c] = (scene.mask.bits != 0).select(scene.image.rgb[c], background.rgb[c]);
      }
      out.scene.bg_class = d.bg_class;
      out.donor = donor;
      out.donor_class = donor_class;
      break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

void save_ppm(const std::filesystem::path& path, const Image& image) {
  auto out = open_out(path);
  out << "P6\n" << image.width() << ' ' << image.height() << "\n255\n";
  std::vector<unsigned char> bytes;
  bytes.reserve(static_cast<std::size_t>(image.height() * image.width() * 3));
  for (Eigen::Index y = 0; y < image.height(); ++y) {
    for (Eigen::Index x = 0; x < image.width(); ++x) {
      for (int c = 0; c < 3; ++c) {
        bytes.push_back(static_cast<unsigned char>(std::lround(std::clamp(image.rgb[c](y, x), 0.0f, 1.0f) * 255.0f)));
      }
    }
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

Image load_ppm(const std::filesystem::path& path) {
  auto in = open_in(path);
  const PnmHeader h = read_header(in, "P6", path);
  const auto bytes = read_raster(in, static_cast<std::size_t>(h.width) * h.height * 3, path);
  Image image = Image::zeros(h.height, h.width);
  std::size_t k = 0;
  for (int y = 0; y < h.height; ++y) {
    for (int x = 0; x < h.width; ++x) {
      for (int c = 0; c < 3; ++c) image.rgb[c](y, x) = static_cast<float>(bytes[k++]) / 255.0f;
    }
  }
  return image;
}

void save_pgm(const std::filesystem::path& path, const SaliencyMask& mask) {
  if (!mask.is_binary()) throw std::invalid_argument("save_pgm: mask is not binary");
  auto out = open_out(path);
  out << "P5\n" << mask.width() << ' ' << mask.height() << "\n255\n";
  const BitPlane bytes = mask.bits * std::uint8_t{255};
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

SaliencyMask load_pgm(const std::filesystem::path& path) {
  auto in = open_in(path);
  const PnmHeader h = read_header(in, "P5", path);
  const auto bytes = read_raster(in, static_cast<std::size_t>(h.width) * h.height, path);
  SaliencyMask mask = SaliencyMask::zeros(h.height, h.width);
  for (std::size_t k = 0; k < bytes.size(); ++k) {
    if (bytes[k] != 0 && bytes[k] != 255) {
      throw FormatError(path.string() + ": mask value " + std::to_string(bytes[k]) + " is not 0 or 255");
    }
    mask.bits.data()[k] = bytes[k] ? 1 : 0;
  }
  return mask;
}

std::vector<IndexEntry> save_dataset(const std::filesystem::path& dir, const std::vector<LabeledScene>& scenes) {
  std::filesystem::create_directories(dir);
  std::vector<IndexEntry> index;
  auto out = open_out(dir / kIndexFile);
  out << "name,fg_class,bg_class\n";
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "scene_%06zu", i);
    save_ppm(dir / (std::string(name) + ".ppm"), scenes[i].image);
    save_pgm(dir / (std::string(name) + ".pgm"), scenes[i].mask);
    index.push_back({name, scenes[i].fg_class, scenes[i].bg_class});
    out << name << ',' << scenes[i].fg_class << ',' << scenes[i].bg_class << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + (dir / kIndexFile).string());
  return index;
}

std::vector<IndexEntry> read_index(const std::filesystem::path& dir) {
  auto in = open_in(dir / kIndexFile);
  std::string line;
  if (!std::getline(in, line) || line != "name,fg_class,bg_class") {
    throw FormatError((dir / kIndexFile).string() + ": missing header");
  }
  std::vector<IndexEntry> index;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto fields = split_csv(line);
    if (fields.size() != 3 || fields[0].empty()) throw FormatError("index: malformed line '" + line + "'");
    IndexEntry e{fields[0], parse_int(fields[1], "fg_class"), parse_int(fields[2], "bg_class")};
    if (e.fg_class < 0 || e.fg_class >= kNumFgClasses || e.bg_class < 0 || e.bg_class >= kNumBgClasses) {
      throw FormatError("index: class out of range in '" + line + "'");
    }
    index.push_back(std::move(e));
  }
  return index;
}

std::vector<LabeledScene> load_dataset(const std::filesystem::path& dir) {
  std::vector<LabeledScene> scenes;
  for (const auto& e : read_index(dir)) {
    LabeledScene s{load_ppm(dir / (e.name + ".ppm")), load_pgm(dir / (e.name + ".pgm")), e.fg_class, e.bg_class};
    if (s.image.height() != s.mask.height() || s.image.width() != s.mask.width()) {
      throw FormatError(e.name + ": image and mask dimensions differ");
    }
    scenes.push_back(std::move(s));
  }
  return scenes;
}

}  // namespace cast
