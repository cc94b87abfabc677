#pragma once

// Synthetic labeled scenes: coloured shapes on a textured background.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "agmm/numeric/rng.hpp"
#include "agmm/numeric/tensor.hpp"

namespace agmm {

inline constexpr std::uint8_t kIgnore = 255;

/// Row-major per-pixel class indices; kIgnore marks unlabeled pixels.
struct LabelGrid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> labels;

  LabelGrid() = default;
  LabelGrid(std::size_t h, std::size_t w, std::uint8_t fill = kIgnore)
      : height(h), width(w), labels(h * w, fill) {}

  std::size_t pixels() const { return labels.size(); }
  std::uint8_t at(std::size_t y, std::size_t x) const { return labels[y * width + x]; }
  std::uint8_t& at(std::size_t y, std::size_t x) { return labels[y * width + x]; }

  std::size_t labeled_count() const {
    return std::size_t(std::count_if(labels.begin(), labels.end(), [](auto v) { return v != kIgnore; }));
  }
  std::vector<std::size_t> labeled_pixels() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] != kIgnore) out.push_back(i);
    return out;
  }
  /// Sorted distinct non-IGNORE labels.
  std::vector<int> classes() const {
    std::array<bool, 256> seen{};
    for (auto v : labels)
      if (v != kIgnore) seen[v] = true;
    std::vector<int> out;
    for (int c = 0; c < 255; ++c)
      if (seen[std::size_t(c)]) out.push_back(c);
    return out;
  }

  bool operator==(const LabelGrid&) const = default;
};

/// Foreground class presence (background never set).
struct ClassPresence {
  std::vector<bool> bits;

  explicit ClassPresence(std::size_t class_count = 0) : bits(class_count, false) {}

  std::size_t class_count() const { return bits.size(); }
  bool contains(int c) const { return c > 0 && std::size_t(c) < bits.size() && bits[std::size_t(c)]; }
  void set(int c) {
    if (c <= 0 || std::size_t(c) >= bits.size()) throw std::out_of_range("class outside presence range");
    bits[std::size_t(c)] = true;
  }
  std::vector<int> classes() const {
    std::vector<int> out;
    for (std::size_t c = 1; c < bits.size(); ++c)
      if (bits[c]) out.push_back(int(c));
    return out;
  }
  bool empty() const { return classes().empty(); }
  bool operator==(const ClassPresence&) const = default;
};

struct SceneSpec {
  std::size_t height = 64;
  std::size_t width = 64;
  int n_shapes = 2;
  int class_count = 3;
  double color_noise_std = 0.10;
  double texture_amp = 0.12;
};

struct Scene {
  Tensor<double> image;  // [3,H,W], values in [0,1]
  LabelGrid dense_gt;
  int class_count = 0;

  std::size_t height() const { return dense_gt.height; }
  std::size_t width() const { return dense_gt.width; }

  template <class Real>
  Tensor<Real> image_as() const {
    std::vector<Real> v(image.data().begin(), image.data().end());
    return Tensor<Real>::from(image.shape(), std::move(v));
  }
};

/// Base colour of class `c`. Classes beyond the fixed table get hashed colours.
inline std::array<double, 3> class_color(int c) {
  static constexpr std::array<std::array<double, 3>, 8> table{{
      {0.50, 0.50, 0.50},
      {0.80, 0.30, 0.30},
      {0.30, 0.72, 0.35},
      {0.30, 0.40, 0.85},
      {0.85, 0.75, 0.25},
      {0.65, 0.35, 0.75},
      {0.25, 0.75, 0.75},
      {0.90, 0.55, 0.20},
  }};
  if (c >= 0 && std::size_t(c) < table.size()) return table[std::size_t(c)];
  Rng r(mix_seed(std::uint64_t(c), 0xC0105));
  return {r.uniform(0.15, 0.9), r.uniform(0.15, 0.9), r.uniform(0.15, 0.9)};
}

namespace detail {

enum class ShapeKind { disk, rectangle, triangle };

struct PlacedShape {
  ShapeKind kind;
  double cx, cy;
  double r;                        // disk radius
  double hw, hh;                   // rectangle half extents
  std::array<double, 6> tri;       // triangle vertices x0,y0,x1,y1,x2,y2

  bool contains(double x, double y) const {
    switch (kind) {
      case ShapeKind::disk: return (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r;
      case ShapeKind::rectangle: return std::abs(x - cx) <= hw && std::abs(y - cy) <= hh;
      case ShapeKind::triangle: {
        auto side = [&](int a, int b) {
          return (tri[2 * b] - tri[2 * a]) * (y - tri[2 * a + 1]) -
                 (tri[2 * b + 1] - tri[2 * a + 1]) * (x - tri[2 * a]);
        };
        const double s0 = side(0, 1), s1 = side(1, 2), s2 = side(2, 0);
        return (s0 >= 0 && s1 >= 0 && s2 >= 0) || (s0 <= 0 && s1 <= 0 && s2 <= 0);
      }
    }
    return false;
  }
};

}  // namespace detail

/// Deterministic scene for (spec, seed).
inline Scene gen_scene(const SceneSpec& spec, std::uint64_t seed) {
  if (spec.height < 16 || spec.width < 16) throw std::invalid_argument("scene extents must be at least 16x16");
  if (spec.class_count < 2) throw std::invalid_argument("scene needs at least 2 classes");
  if (spec.n_shapes < 1 || spec.n_shapes > spec.class_count - 1)
    throw std::invalid_argument("n_shapes must be in [1, class_count-1]");
  if (spec.color_noise_std < 0 || spec.texture_amp < 0) throw std::invalid_argument("negative noise parameters");

  const std::size_t H = spec.height, W = spec.width;
  Rng rng(mix_seed(seed, 1));

  std::vector<int> fg(std::size_t(spec.class_count - 1));
  for (std::size_t i = 0; i < fg.size(); ++i) fg[i] = int(i) + 1;
  rng.shuffle(fg);

  const double side = double(std::min(H, W));
  std::vector<detail::PlacedShape> shapes;
  std::vector<int> shape_class;
  for (int s = 0; s < spec.n_shapes; ++s) {
    detail::PlacedShape p{};
    p.kind = static_cast<detail::ShapeKind>(rng.below(3));
    p.r = rng.uniform(0.13, 0.22) * side;
    for (int attempt = 0; attempt < 64; ++attempt) {
      p.cx = rng.uniform(p.r * 0.8, double(W) - p.r * 0.8);
      p.cy = rng.uniform(p.r * 0.8, double(H) - p.r * 0.8);
      bool clear = std::none_of(shapes.begin(), shapes.end(),
                                [&](const auto& q) { return q.contains(p.cx, p.cy); });
      if (clear) break;
    }
    p.hw = p.r * rng.uniform(0.7, 1.05);
    p.hh = p.r * rng.uniform(0.7, 1.05);
    const double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
    for (int v = 0; v < 3; ++v) {
      const double a = theta + v * 2.0 * std::numbers::pi / 3.0 + rng.uniform(-0.3, 0.3);
      const double rr = p.r * 1.25;
      p.tri[std::size_t(2 * v)] = p.cx + rr * std::cos(a);
      p.tri[std::size_t(2 * v + 1)] = p.cy + rr * std::sin(a);
    }
    shapes.push_back(p);
    shape_class.push_back(fg[std::size_t(s)]);
  }

  Scene scene;
  scene.class_count = spec.class_count;
  scene.dense_gt = LabelGrid(H, W, 0);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t s = 0; s < shapes.size(); ++s)
        if (shapes[s].contains(double(x) + 0.5, double(y) + 0.5))
          scene.dense_gt.at(y, x) = std::uint8_t(shape_class[s]);

  // Low-frequency texture: a few random plane waves per channel, scaled so the
  // field never exceeds texture_amp in magnitude.
  struct Wave { double fx, fy, phase, weight; };
  std::array<std::array<Wave, 3>, 3> waves{};
  for (auto& ch : waves)
    for (auto& w : ch)
      w = {rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5), rng.uniform(0.0, 2.0 * std::numbers::pi),
           rng.uniform(0.3, 1.0)};

  std::vector<double> img(3 * H * W);
  Rng noise(mix_seed(seed, 2));
  for (std::size_t c = 0; c < 3; ++c) {
    double norm = 0;
    for (const auto& w : waves[c]) norm += w.weight;
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        double tex = 0;
        if (spec.texture_amp > 0) {
          for (const auto& w : waves[c])
            tex += w.weight * std::sin(2.0 * std::numbers::pi * (w.fx * double(x) / double(W) +
                                                                  w.fy * double(y) / double(H)) + w.phase);
          tex *= spec.texture_amp / norm;
        }
        const double base = class_color(scene.dense_gt.at(y, x))[c];
        const double eps = spec.color_noise_std > 0 ? spec.color_noise_std * noise.normal() : 0.0;
        img[(c * H + y) * W + x] = std::clamp(base + tex + eps, 0.0, 1.0);
      }
  }
  scene.image = Tensor<double>::from({3, H, W}, std::move(img));
  return scene;
}

}  // namespace agmm
