#pragma once

// Toy full-resolution segmentation network with a GMM squeeze branch and a
// CAM classification head.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "agmm/numeric/container.hpp"
#include "agmm/numeric/conv.hpp"
#include "agmm/numeric/ops.hpp"
#include "agmm/numeric/rng.hpp"
#include "agmm/synth/scene.hpp"
#include "agmm/synth/weak_labels.hpp"

namespace agmm {

struct ModelShape {
  std::vector<std::size_t> backbone_widths{16, 32, 32};  // last entry is C_backbone
  std::size_t gmm_channels = 16;
  int class_count = 3;

  std::size_t backbone_channels() const { return backbone_widths.back(); }
};

template <class Real>
struct ModelParams {
  ModelShape shape;
  ParamSet<Real> params;

  Tensor<Real>& operator[](const std::string& name) { return params.get(name); }
  const Tensor<Real>& operator[](const std::string& name) const { return params.get(name); }
};

/// He-normal convolution weights and zero biases, seeded.
template <class Real>
ModelParams<Real> init_model(const ModelShape& shape, std::uint64_t seed, bool zero_heads = false) {
  if (shape.backbone_widths.empty()) throw std::invalid_argument("backbone needs at least one block");
  if (shape.gmm_channels > shape.backbone_channels())
    throw std::invalid_argument("gmm_channels must not exceed backbone channels");
  if (shape.class_count < 2) throw std::invalid_argument("model needs at least 2 classes");

  ModelParams<Real> m{shape, {}};
  Rng rng(mix_seed(seed, 0x0DE1));
  auto he = [&](Shape s, std::size_t fan_in) {
    std::vector<Real> v(numel(s));
    const double scale = std::sqrt(2.0 / double(fan_in));
    for (auto& x : v) x = Real(scale * rng.normal());
    return Tensor<Real>::from(std::move(s), std::move(v));
  };
  std::size_t in = 3;
  for (std::size_t i = 0; i < shape.backbone_widths.size(); ++i) {
    const std::size_t out = shape.backbone_widths[i];
    m.params.add("backbone." + std::to_string(i) + ".weight", he({out, in, 3, 3}, in * 9));
    m.params.add("backbone." + std::to_string(i) + ".bias", Tensor<Real>::zeros({out}));
    in = out;
  }
  const std::size_t C = shape.backbone_channels();
  const std::size_t K = std::size_t(shape.class_count);
  m.params.add("squeeze.weight", he({shape.gmm_channels, C, 1, 1}, C));
  m.params.add("squeeze.bias", Tensor<Real>::zeros({shape.gmm_channels}));
  m.params.add("seg_head.weight", zero_heads ? Tensor<Real>::zeros({K, C, 1, 1}) : he({K, C, 1, 1}, C));
  m.params.add("seg_head.bias", Tensor<Real>::zeros({K}));
  m.params.add("cls_head.weight", zero_heads ? Tensor<Real>::zeros({K - 1, C, 1, 1}) : he({K - 1, C, 1, 1}, C));
  return m;
}

template <class Real>
struct ForwardOutputs {
  Tensor<Real> features_raw;  // [C_backbone,H,W]
  Tensor<Real> features_gmm;  // [C_gmm,H,W]
  Tensor<Real> seg_logits;    // [K,H,W]
  Tensor<Real> seg_probs;     // [K,H,W]
  Tensor<Real> class_scores;  // [K-1]
  Tensor<Real> cam;           // [K-1,H,W], min-max normalised, detached
};

/// Per-class min-max rescale over the spatial extent; constant maps give 0.
template <class Real>
Tensor<Real> normalize_cam(const Tensor<Real>& raw) {
  const std::size_t K = raw.extent(0), P = raw.extent(1) * raw.extent(2);
  std::vector<Real> v(raw.data().begin(), raw.data().end());
  for (std::size_t k = 0; k < K; ++k) {
    auto first = v.begin() + std::ptrdiff_t(k * P);
    auto [lo, hi] = std::minmax_element(first, first + std::ptrdiff_t(P));
    const Real l = *lo, h = *hi;
    for (auto it = first; it != first + std::ptrdiff_t(P); ++it) *it = h > l ? (*it - l) / (h - l) : Real(0);
  }
  return Tensor<Real>::from(raw.shape(), std::move(v));
}

template <class Real>
ForwardOutputs<Real> forward(const Tensor<Real>& image, const ModelParams<Real>& m) {
  if (image.rank() != 3 || image.extent(0) != 3)
    throw ShapeError("forward expects an image [3,H,W], got " + shape_str(image.shape()));
  for (auto v : image.data())
    if (!(v >= Real(0) && v <= Real(1))) throw DomainError("image values must lie in [0,1]");
  const std::size_t H = image.extent(1), W = image.extent(2);
  const auto& s = m.shape;

  Tensor<Real> x = reshape(image, {1, 3, H, W});
  for (std::size_t i = 0; i < s.backbone_widths.size(); ++i) {
    const std::string p = "backbone." + std::to_string(i);
    x = relu(conv2d(x, m[p + ".weight"], m[p + ".bias"], 1, 1));
  }
  ForwardOutputs<Real> out;
  const std::size_t C = s.backbone_channels(), K = std::size_t(s.class_count);
  out.features_raw = reshape(x, {C, H, W});
  out.features_gmm = reshape(conv2d(x, m["squeeze.weight"], m["squeeze.bias"], 1, 0), {s.gmm_channels, H, W});
  out.seg_logits = reshape(conv2d(x, m["seg_head.weight"], m["seg_head.bias"], 1, 0), {K, H, W});
  out.seg_probs = softmax(out.seg_logits, 0);
  const auto cam_raw = reshape(conv2d(x, m["cls_head.weight"], Tensor<Real>{}, 1, 0), {K - 1, H, W});
  out.class_scores = mean(cam_raw, {1, 2});
  out.cam = normalize_cam(cam_raw);

  require_finite(out.features_raw, "backbone features");
  require_finite(out.seg_logits, "segmentation logits");
  require_finite(out.class_scores, "class scores");
  return out;
}

/// Thresholds CAMs of present classes into seed labels: max >= tau_fg gives
/// the argmax class, max <= tau_bg gives background, otherwise IGNORE.
template <class Real>
WeakLabelMap cam_to_seeds(const Tensor<Real>& cam, const ClassPresence& presence, double tau_fg, double tau_bg) {
  if (!(0.0 < tau_bg && tau_bg < tau_fg && tau_fg < 1.0))
    throw std::invalid_argument("cam_to_seeds requires 0 < tau_bg < tau_fg < 1");
  if (cam.rank() != 3) throw ShapeError("cam must be [K-1,H,W], got " + shape_str(cam.shape()));
  const std::size_t F = cam.extent(0), H = cam.extent(1), W = cam.extent(2), P = H * W;
  if (presence.class_count() != F + 1)
    throw ShapeError("presence covers " + std::to_string(presence.class_count()) + " classes, cam has " +
                     std::to_string(F) + " foreground maps");
  const auto present = presence.classes();
  const auto v = cam.data();
  LabelGrid out(H, W);
  for (std::size_t i = 0; i < P; ++i) {
    double m = 0.0;
    int best = -1;
    for (int c : present) {
      const double val = double(v[std::size_t(c - 1) * P + i]);
      if (best < 0 || val > m) {
        m = val;
        best = c;
      }
    }
    if (best > 0 && m >= tau_fg)
      out.labels[i] = std::uint8_t(best);
    else if (m <= tau_bg)
      out.labels[i] = 0;
  }
  return WeakLabelMap(std::move(out), Modality::image_level);
}

// ---------------------------------------------------------------------------
// Checkpoints: one AGMT file per parameter plus "manifest.txt" lines
// "name file d0xd1x..." in registration order.

template <class Real>
void save_checkpoint(const std::filesystem::path& dir, const ModelParams<Real>& m) {
  std::filesystem::create_directories(dir);
  std::ofstream man(dir / "manifest.txt");
  if (!man) throw std::runtime_error("cannot write checkpoint manifest in " + dir.string());
  man << "# model backbone=";
  for (std::size_t i = 0; i < m.shape.backbone_widths.size(); ++i) man << (i ? "," : "") << m.shape.backbone_widths[i];
  man << " gmm_channels=" << m.shape.gmm_channels << " classes=" << m.shape.class_count << '\n';
  for (const auto& [name, t] : m.params) {
    const std::string file = name + ".agmt";
    save_tensor((dir / file).string(), t);
    man << name << ' ' << file << ' ';
    for (std::size_t i = 0; i < t.rank(); ++i) man << (i ? "x" : "") << t.extent(i);
    man << '\n';
  }
}

template <class Real>
ModelParams<Real> load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream man(dir / "manifest.txt");
  if (!man) throw std::runtime_error("missing checkpoint manifest in " + dir.string());
  ModelParams<Real> m;
  std::string line;
  std::getline(man, line);
  {
    std::istringstream hs(line);
    std::string tok;
    hs >> tok >> tok;
    while (hs >> tok) {
      const auto eq = tok.find('=');
      const auto key = tok.substr(0, eq), val = tok.substr(eq + 1);
      if (key == "backbone") {
        m.shape.backbone_widths.clear();
        std::stringstream vs(val);
        std::string w;
        while (std::getline(vs, w, ',')) m.shape.backbone_widths.push_back(std::stoul(w));
      } else if (key == "gmm_channels") {
        m.shape.gmm_channels = std::stoul(val);
      } else if (key == "classes") {
        m.shape.class_count = std::stoi(val);
      }
    }
  }
  while (std::getline(man, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string name, file, dims;
    ls >> name >> file >> dims;
    auto t = load_tensor<Real>((dir / file).string());
    std::string got;
    for (std::size_t i = 0; i < t.rank(); ++i) got += (i ? "x" : "") + std::to_string(t.extent(i));
    if (got != dims) throw FormatError("checkpoint tensor " + name + " has shape " + got + ", manifest says " + dims);
    m.params.add(name, std::move(t));
  }
  return m;
}

}  // namespace agmm
