#pragma once

// Scene persistence: PPM/PGM images, presence sidecars, corpus manifests.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "agmm/synth/scene.hpp"
#include "agmm/synth/weak_labels.hpp"

namespace agmm {

namespace fs = std::filesystem;

namespace detail {

inline std::ofstream open_out(const fs::path& p) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  return os;
}

inline std::ifstream open_in(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + p.string());
  return is;
}

// Reads a netpbm header token, skipping whitespace and '#' comments.
inline std::string pnm_token(std::istream& is) {
  std::string tok;
  int ch;
  while ((ch = is.get()) != EOF) {
    if (ch == '#') {
      while ((ch = is.get()) != EOF && ch != '\n') {}
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(char(ch));
  }
  return tok;
}

inline void pnm_header(std::istream& is, const char* magic, std::size_t& w, std::size_t& h) {
  if (pnm_token(is) != magic) throw std::runtime_error(std::string("expected netpbm ") + magic);
  w = std::stoul(pnm_token(is));
  h = std::stoul(pnm_token(is));
  if (std::stoul(pnm_token(is)) != 255) throw std::runtime_error("only 8-bit netpbm supported");
}

}  // namespace detail

inline std::uint8_t quantize_unit(double v) {
  return std::uint8_t(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

/// Binary P6, 8 bits per channel.
inline void write_ppm(const fs::path& path, const Tensor<double>& image) {
  if (image.rank() != 3 || image.extent(0) != 3) throw ShapeError("write_ppm expects [3,H,W], got " + shape_str(image.shape()));
  const std::size_t H = image.extent(1), W = image.extent(2);
  auto os = detail::open_out(path);
  os << "P6\n" << W << ' ' << H << "\n255\n";
  const auto d = image.data();
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < 3; ++c) os.put(char(quantize_unit(d[(c * H + y) * W + x])));
}

inline Tensor<double> read_ppm(const fs::path& path) {
  auto is = detail::open_in(path);
  std::size_t W, H;
  detail::pnm_header(is, "P6", W, H);
  std::vector<unsigned char> raw(3 * W * H);
  if (!is.read(reinterpret_cast<char*>(raw.data()), std::streamsize(raw.size())))
    throw std::runtime_error("truncated PPM " + path.string());
  std::vector<double> v(raw.size());
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < 3; ++c) v[(c * H + y) * W + x] = raw[(y * W + x) * 3 + c] / 255.0;
  return Tensor<double>::from({3, H, W}, std::move(v));
}

/// Binary P5; 255 encodes IGNORE.
inline void write_pgm(const fs::path& path, const LabelGrid& grid) {
  auto os = detail::open_out(path);
  os << "P5\n" << grid.width << ' ' << grid.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(grid.labels.data()), std::streamsize(grid.labels.size()));
}

inline LabelGrid read_pgm(const fs::path& path) {
  auto is = detail::open_in(path);
  std::size_t W, H;
  detail::pnm_header(is, "P5", W, H);
  LabelGrid g(H, W);
  if (!is.read(reinterpret_cast<char*>(g.labels.data()), std::streamsize(g.labels.size())))
    throw std::runtime_error("truncated PGM " + path.string());
  return g;
}

inline void write_presence(const fs::path& path, const ClassPresence& p) {
  auto os = detail::open_out(path);
  os << "classes: ";
  const auto cls = p.classes();
  for (std::size_t i = 0; i < cls.size(); ++i) os << (i ? "," : "") << cls[i];
  os << '\n';
}

inline ClassPresence read_presence(const fs::path& path, std::size_t class_count) {
  auto is = detail::open_in(path);
  std::string line;
  std::getline(is, line);
  const std::string key = "classes:";
  if (line.rfind(key, 0) != 0) throw std::runtime_error("bad presence file " + path.string());
  ClassPresence p(class_count);
  std::stringstream ss(line.substr(key.size()));
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto first = item.find_first_not_of(" \t");
    if (first == std::string::npos) continue;
    p.set(std::stoi(item.substr(first)));
  }
  return p;
}

// ---------------------------------------------------------------------------
// Corpora on disk

/// One manifest line: "scene_id seed modality path".
struct CorpusRecord {
  std::string scene_id;
  std::uint64_t seed = 0;
  std::string modality;  // a Modality name, or "image" / "gt" for the scene files
  std::string path;      // relative to the corpus root
};

struct CorpusScene {
  std::string scene_id;
  std::uint64_t seed = 0;
  Scene scene;
  ClassPresence presence;
  std::vector<WeakLabelMap> weak;  // pixel-level modalities present on disk
};

/// Seed of scene `index` in a corpus generated from `base_seed`.
inline std::uint64_t scene_seed(std::uint64_t base_seed, std::size_t index) {
  return mix_seed(base_seed, 0x5CE0000 + index);
}

inline std::uint64_t label_seed(std::uint64_t scene_seed_value, Modality m) {
  return mix_seed(scene_seed_value, 0x1AB00 + std::uint64_t(m));
}

/// Writes scenes plus the requested weak labels and a manifest; returns the
/// manifest records in write order.
inline std::vector<CorpusRecord> write_corpus(const fs::path& root, const SceneSpec& spec, std::size_t count,
                                              const std::vector<Modality>& modalities,
                                              const WeakLabelArgs& args, std::uint64_t base_seed) {
  fs::create_directories(root);
  std::vector<CorpusRecord> records;
  for (std::size_t i = 0; i < count; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "scene_%04zu", i);
    const auto seed = scene_seed(base_seed, i);
    const Scene scene = gen_scene(spec, seed);
    fs::create_directories(root / id);
    write_ppm(root / id / "image.ppm", scene.image);
    write_pgm(root / id / "gt.pgm", scene.dense_gt);
    records.push_back({id, seed, "image", std::string(id) + "/image.ppm"});
    records.push_back({id, seed, "gt", std::string(id) + "/gt.pgm"});
    for (auto m : modalities) {
      if (m == Modality::image_level) {
        write_presence(root / id / "classes.txt", derive_image_level(scene));
        records.push_back({id, seed, modality_name(m), std::string(id) + "/classes.txt"});
      } else {
        const std::string file = std::string(modality_name(m)) + ".pgm";
        write_pgm(root / id / file, derive_weak(scene, m, args, label_seed(seed, m)));
        records.push_back({id, seed, modality_name(m), std::string(id) + "/" + file});
      }
    }
  }
  auto os = detail::open_out(root / "manifest.txt");
  for (const auto& r : records) os << r.scene_id << ' ' << r.seed << ' ' << r.modality << ' ' << r.path << '\n';
  return records;
}

inline std::vector<CorpusRecord> read_manifest(const fs::path& root) {
  auto is = detail::open_in(root / "manifest.txt");
  std::vector<CorpusRecord> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    CorpusRecord r;
    if (!(ls >> r.scene_id >> r.seed >> r.modality >> r.path)) throw std::runtime_error("bad manifest line: " + line);
    out.push_back(std::move(r));
  }
  return out;
}

/// Loads every scene of a corpus. Images come back 8-bit quantised.
inline std::vector<CorpusScene> load_corpus(const fs::path& root, int class_count) {
  std::vector<CorpusScene> scenes;
  for (const auto& r : read_manifest(root)) {
    if (scenes.empty() || scenes.back().scene_id != r.scene_id) {
      scenes.push_back({r.scene_id, r.seed, Scene{}, ClassPresence(std::size_t(class_count)), {}});
      scenes.back().scene.class_count = class_count;
    }
    auto& cs = scenes.back();
    const fs::path p = root / r.path;
    if (r.modality == "image") {
      cs.scene.image = read_ppm(p);
    } else if (r.modality == "gt") {
      cs.scene.dense_gt = read_pgm(p);
      for (auto v : cs.scene.dense_gt.labels)
        if (v >= class_count) throw std::runtime_error("ground truth class " + std::to_string(v) +
                                                       " exceeds class count in " + p.string());
      cs.presence = derive_image_level(cs.scene);
    } else if (parse_modality(r.modality) == Modality::image_level) {
      cs.presence = read_presence(p, std::size_t(class_count));
    } else {
      cs.weak.emplace_back(read_pgm(p), parse_modality(r.modality));
    }
  }
  return scenes;
}

}  // namespace agmm
