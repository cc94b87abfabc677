#pragma once

// Weak-label derivations from dense ground truth.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "agmm/numeric/rng.hpp"
#include "agmm/synth/scene.hpp"

namespace agmm {

enum class Modality { image_level, point, scribble, block, box_seed };

inline const char* modality_name(Modality m) {
  switch (m) {
    case Modality::image_level: return "image_level";
    case Modality::point: return "point";
    case Modality::scribble: return "scribble";
    case Modality::block: return "block";
    case Modality::box_seed: return "box_seed";
  }
  return "?";
}

inline Modality parse_modality(const std::string& s) {
  for (auto m : {Modality::image_level, Modality::point, Modality::scribble, Modality::block, Modality::box_seed})
    if (s == modality_name(m)) return m;
  if (s == "image-level" || s == "image") return Modality::image_level;
  if (s == "box" || s == "box-seed") return Modality::box_seed;
  throw std::invalid_argument("unknown modality: " + s);
}

struct WeakLabelMap : LabelGrid {
  Modality modality = Modality::point;
  std::vector<int> present_classes;  // sorted

  WeakLabelMap() = default;
  WeakLabelMap(LabelGrid grid, Modality m) : LabelGrid(std::move(grid)), modality(m) {
    present_classes = classes();
  }
};

namespace detail {

inline std::vector<std::vector<std::size_t>> class_regions(const Scene& scene) {
  std::vector<std::vector<std::size_t>> regions(std::size_t(scene.class_count));
  for (std::size_t i = 0; i < scene.dense_gt.pixels(); ++i) {
    const auto c = scene.dense_gt.labels[i];
    if (c >= scene.class_count) throw std::out_of_range("ground truth class out of range");
    regions[c].push_back(i);
  }
  return regions;
}

}  // namespace detail

/// Up to `clicks_per_class` distinct pixels per present class. With
/// `center_biased`, clicks are drawn from the half of the region nearest its
/// centroid.
inline WeakLabelMap derive_points(const Scene& scene, int clicks_per_class, std::uint64_t seed,
                                  bool center_biased = false) {
  if (clicks_per_class < 1) throw std::invalid_argument("clicks_per_class must be >= 1");
  LabelGrid out(scene.height(), scene.width());
  const auto regions = detail::class_regions(scene);
  for (std::size_t c = 0; c < regions.size(); ++c) {
    auto region = regions[c];
    if (region.empty()) continue;
    if (center_biased) {
      double my = 0, mx = 0;
      for (auto p : region) {
        my += double(p / scene.width());
        mx += double(p % scene.width());
      }
      my /= double(region.size());
      mx /= double(region.size());
      auto dist = [&](std::size_t p) {
        const double dy = double(p / scene.width()) - my, dx = double(p % scene.width()) - mx;
        return dy * dy + dx * dx;
      };
      std::stable_sort(region.begin(), region.end(), [&](auto a, auto b) { return dist(a) < dist(b); });
      region.resize(std::max<std::size_t>(1, (region.size() + 1) / 2));
    }
    Rng rng(mix_seed(seed, 100 + c));
    rng.shuffle(region);
    const std::size_t k = std::min<std::size_t>(region.size(), std::size_t(clicks_per_class));
    for (std::size_t i = 0; i < k; ++i) out.labels[region[i]] = std::uint8_t(c);
  }
  return WeakLabelMap(std::move(out), Modality::point);
}

/// One random-walk stroke of `stroke_len` steps per present class, confined
/// to the class region; a blocked step redraws the direction.
inline WeakLabelMap derive_scribbles(const Scene& scene, int stroke_len, std::uint64_t seed) {
  if (stroke_len < 2) throw std::invalid_argument("stroke_len must be >= 2");
  static constexpr std::array<int, 8> dy{-1, -1, -1, 0, 0, 1, 1, 1};
  static constexpr std::array<int, 8> dx{-1, 0, 1, -1, 1, -1, 0, 1};
  const std::size_t H = scene.height(), W = scene.width();
  LabelGrid out(H, W);
  const auto regions = detail::class_regions(scene);
  for (std::size_t c = 0; c < regions.size(); ++c) {
    const auto& region = regions[c];
    if (region.empty()) continue;
    Rng rng(mix_seed(seed, 200 + c));
    std::size_t cur = region[rng.below(region.size())];
    out.labels[cur] = std::uint8_t(c);
    std::size_t dir = rng.below(8);
    auto step_ok = [&](std::size_t from, std::size_t d, std::size_t& to) {
      const long y = long(from / W) + dy[d], x = long(from % W) + dx[d];
      if (y < 0 || x < 0 || y >= long(H) || x >= long(W)) return false;
      to = std::size_t(y) * W + std::size_t(x);
      return scene.dense_gt.labels[to] == c;
    };
    for (int s = 0; s < stroke_len; ++s) {
      std::size_t next = 0;
      bool moved = step_ok(cur, dir, next);
      for (int retry = 0; !moved && retry < 8; ++retry) {
        dir = rng.below(8);
        moved = step_ok(cur, dir, next);
      }
      if (!moved) continue;
      cur = next;
      out.labels[cur] = std::uint8_t(c);
    }
  }
  return WeakLabelMap(std::move(out), Modality::scribble);
}

/// Ground truth copied inside ceil(ratio * tiles) randomly chosen
/// block_size x block_size tiles; edge tiles may be partial.
inline WeakLabelMap derive_blocks(const Scene& scene, double ratio, int block_size, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw std::invalid_argument("block ratio must be in (0, 1]");
  if (block_size < 1) throw std::invalid_argument("block_size must be >= 1");
  const std::size_t H = scene.height(), W = scene.width(), B = std::size_t(block_size);
  const std::size_t ty = (H + B - 1) / B, tx = (W + B - 1) / B, tiles = ty * tx;
  std::vector<std::size_t> order(tiles);
  for (std::size_t i = 0; i < tiles; ++i) order[i] = i;
  Rng rng(mix_seed(seed, 300));
  rng.shuffle(order);
  const auto take = std::min(tiles, std::size_t(std::ceil(ratio * double(tiles) - 1e-9)));
  LabelGrid out(H, W);
  for (std::size_t k = 0; k < take; ++k) {
    const std::size_t by = order[k] / tx, bx = order[k] % tx;
    for (std::size_t y = by * B; y < std::min(H, (by + 1) * B); ++y)
      for (std::size_t x = bx * B; x < std::min(W, (bx + 1) * B); ++x) out.at(y, x) = scene.dense_gt.at(y, x);
  }
  return WeakLabelMap(std::move(out), Modality::block);
}

/// Tight-box seeds: outside every box -> background, inside exactly one box
/// -> that box's class, inside several -> IGNORE.
inline WeakLabelMap derive_box_seeds(const Scene& scene) {
  const std::size_t H = scene.height(), W = scene.width();
  struct Box { std::size_t y0, x0, y1, x1; int cls; };
  std::vector<Box> boxes;
  const auto regions = detail::class_regions(scene);
  for (std::size_t c = 1; c < regions.size(); ++c) {
    if (regions[c].empty()) continue;
    Box b{H, W, 0, 0, int(c)};
    for (auto p : regions[c]) {
      b.y0 = std::min(b.y0, p / W);
      b.y1 = std::max(b.y1, p / W);
      b.x0 = std::min(b.x0, p % W);
      b.x1 = std::max(b.x1, p % W);
    }
    boxes.push_back(b);
  }
  LabelGrid out(H, W, 0);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      int hits = 0, cls = 0;
      for (const auto& b : boxes)
        if (y >= b.y0 && y <= b.y1 && x >= b.x0 && x <= b.x1) {
          ++hits;
          cls = b.cls;
        }
      out.at(y, x) = hits == 0 ? 0 : hits == 1 ? std::uint8_t(cls) : kIgnore;
    }
  return WeakLabelMap(std::move(out), Modality::box_seed);
}

inline ClassPresence derive_image_level(const Scene& scene) {
  ClassPresence p(std::size_t(scene.class_count));
  for (auto v : scene.dense_gt.labels)
    if (v != 0) p.set(v);
  return p;
}

/// Arguments for the label-derivation step of a corpus.
struct WeakLabelArgs {
  int clicks_per_class = 5;
  int stroke_len = 40;
  double block_ratio = 0.1;
  int block_size = 8;
  bool center_biased_points = false;
};

/// Derives a pixel-level weak map for the sparse/box modalities. Image-level
/// supervision has no pixel map until CAM seeds exist.
inline WeakLabelMap derive_weak(const Scene& scene, Modality m, const WeakLabelArgs& a, std::uint64_t seed) {
  switch (m) {
    case Modality::point: return derive_points(scene, a.clicks_per_class, seed, a.center_biased_points);
    case Modality::scribble: return derive_scribbles(scene, a.stroke_len, seed);
    case Modality::block: return derive_blocks(scene, a.block_ratio, a.block_size, seed);
    case Modality::box_seed: return derive_box_seeds(scene);
    case Modality::image_level: break;
  }
  throw std::invalid_argument("image-level supervision has no pixel-level weak map");
}

}  // namespace agmm
