#include <gtest/gtest.h>

#include <filesystem>

#include "agmm/model/seg_model.hpp"
#include "agmm/numeric/rng.hpp"
#include "agmm/synth/scene.hpp"
#include "agmm/train/metrics.hpp"
#include "agmm/train/trainer.hpp"

using namespace agmm;
namespace fs = std::filesystem;
using T = Tensor<double>;

namespace {

ModelShape small_shape(int classes = 3) {
  ModelShape s;
  s.backbone_widths = {8, 8, 8};
  s.gmm_channels = 4;
  s.class_count = classes;
  return s;
}

T random_image(std::uint64_t seed, std::size_t h = 16, std::size_t w = 16) {
  Rng rng(seed);
  std::vector<double> v(3 * h * w);
  for (auto& x : v) x = rng.uniform(0, 1);
  return T::from({3, h, w}, std::move(v));
}

ClassPresence presence_of(std::size_t classes, std::initializer_list<int> present) {
  ClassPresence p(classes);
  for (int c : present) p.set(c);
  return p;
}

}  // namespace

TEST(Model, RejectsSqueezeWiderThanBackbone) {
  auto s = small_shape();
  s.gmm_channels = 9;
  EXPECT_THROW(init_model<double>(s, 1), std::invalid_argument);
}

TEST(Model, OutputShapes) {
  const auto m = init_model<double>(small_shape(4), 1);
  const auto out = forward(random_image(2), m);
  EXPECT_EQ(out.features_raw.shape(), (Shape{8, 16, 16}));
  EXPECT_EQ(out.features_gmm.shape(), (Shape{4, 16, 16}));
  EXPECT_EQ(out.seg_probs.shape(), (Shape{4, 16, 16}));
  EXPECT_EQ(out.class_scores.shape(), (Shape{3}));
  EXPECT_EQ(out.cam.shape(), (Shape{3, 16, 16}));
  for (const auto& [name, t] : m.params) EXPECT_TRUE(t.requires_grad()) << name;
}

TEST(Model, ZeroHeadsOnZeroImageGiveUniformP) {
  const auto m = init_model<double>(small_shape(), 3, true);
  const auto out = forward(T::zeros({3, 16, 16}), m);
  for (auto v : out.seg_probs.data()) ASSERT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Model, ProbabilitiesSumToOneAndCamInUnitRange) {
  const auto m = init_model<double>(small_shape(4), 4);
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto out = forward(random_image(10 + s), m);
    const std::size_t P = 256;
    for (std::size_t i = 0; i < P; ++i) {
      double sum = 0;
      for (std::size_t k = 0; k < 4; ++k) {
        const double p = out.seg_probs.data()[k * P + i];
        ASSERT_GE(p, 0.0);
        sum += p;
      }
      ASSERT_NEAR(sum, 1.0, 1e-9);
    }
    for (auto v : out.cam.data()) ASSERT_TRUE(v >= 0.0 && v <= 1.0);
  }
}

TEST(Model, ForwardIsDeterministic) {
  const auto m = init_model<double>(small_shape(), 5);
  const auto img = random_image(6);
  const auto a = forward(img, m), b = forward(img, m);
  for (std::size_t i = 0; i < a.seg_probs.size(); ++i) ASSERT_EQ(a.seg_probs.data()[i], b.seg_probs.data()[i]);
}

TEST(Model, PermutingSegHeadPermutesP) {
  const std::vector<std::size_t> perm{2, 0, 1};
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto m = init_model<double>(small_shape(), 20 + seed);
    auto pm = init_model<double>(small_shape(), 20 + seed);
    Rng rng(seed);
    for (auto& v : m["seg_head.bias"].mutable_data()) v = rng.uniform(-1, 1);
    const auto& w = m["seg_head.weight"];
    const std::size_t C = w.extent(1);
    for (std::size_t k = 0; k < 3; ++k) {
      for (std::size_t c = 0; c < C; ++c) pm["seg_head.weight"].mutable_data()[k * C + c] = w.data()[perm[k] * C + c];
      pm["seg_head.bias"].mutable_data()[k] = m["seg_head.bias"].data()[perm[k]];
    }
    const auto img = random_image(seed);
    const auto a = forward(img, m), b = forward(img, pm);
    for (std::size_t k = 0; k < 3; ++k)
      for (std::size_t i = 0; i < 256; ++i)
        ASSERT_NEAR(b.seg_probs.data()[k * 256 + i], a.seg_probs.data()[perm[k] * 256 + i], 1e-14);
  }
}

TEST(Model, CheckpointRoundTrip) {
  const auto dir = fs::temp_directory_path() / "agmm_test_model_ck";
  fs::remove_all(dir);
  const auto m = init_model<double>(small_shape(4), 7);
  save_checkpoint(dir, m);
  const auto back = load_checkpoint<double>(dir);
  EXPECT_EQ(back.shape.backbone_widths, m.shape.backbone_widths);
  EXPECT_EQ(back.shape.gmm_channels, m.shape.gmm_channels);
  EXPECT_EQ(back.shape.class_count, 4);
  ASSERT_EQ(back.params.size(), m.params.size());
  for (const auto& [name, t] : m.params) {
    const auto& u = back[name];
    ASSERT_EQ(u.shape(), t.shape()) << name;
    for (std::size_t i = 0; i < t.size(); ++i) ASSERT_EQ(u.data()[i], t.data()[i]) << name;
  }
  fs::remove_all(dir);
}

TEST(CamSeeds, ZeroCamIsAllBackground) {
  const auto seeds = cam_to_seeds(T::zeros({2, 8, 8}), presence_of(3, {1, 2}), 0.55, 0.35);
  for (auto v : seeds.labels) ASSERT_EQ(v, 0);
}

TEST(CamSeeds, DiskInsideBackgroundOutside) {
  std::vector<double> v(2 * 64, 0.0);
  std::size_t inside = 0;
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x)
      if ((y - 3.5) * (y - 3.5) + (x - 3.5) * (x - 3.5) < 6.0) v[64 + y * 8 + x] = 1.0, ++inside;
  const auto cam = T::from({2, 8, 8}, v);
  const auto seeds = cam_to_seeds(cam, presence_of(3, {2}), 0.5, 0.3);
  for (std::size_t i = 0; i < 64; ++i) ASSERT_EQ(seeds.labels[i], v[64 + i] > 0 ? 2 : 0);
  EXPECT_GT(inside, 0u);
}

TEST(CamSeeds, OnlyPresentClassesAndMonotoneInTauFg) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    std::vector<double> v(3 * 100);
    for (auto& x : v) x = rng.uniform(0, 1);
    const auto cam = T::from({3, 10, 10}, v);
    const auto pres = presence_of(4, {1, 3});
    std::size_t prev = SIZE_MAX;
    for (double tau_fg : {0.4, 0.5, 0.6, 0.7, 0.8, 0.9}) {
      const auto s = cam_to_seeds(cam, pres, tau_fg, 0.3);
      for (auto l : s.labels) ASSERT_TRUE(l == kIgnore || l == 0 || l == 1 || l == 3);
      ASSERT_LE(s.labeled_count(), prev);
      prev = s.labeled_count();
    }
  }
}

TEST(CamSeeds, RejectsBadThresholds) {
  EXPECT_THROW(cam_to_seeds(T::zeros({2, 4, 4}), presence_of(3, {1}), 0.3, 0.5), std::invalid_argument);
}

// A short classification-only run on one-shape scenes: class scores must
// rank present above absent classes, and CAM seeds must favour precision
// over recall.
TEST(TrainedToy, ClassScoresAndSeeds) {
  TrainConfig cfg;
  cfg.scene.height = cfg.scene.width = 32;
  cfg.scene.class_count = 5;
  cfg.scene.n_shapes = 1;
  cfg.modality = Modality::image_level;
  cfg.weights.lambda_seg = cfg.weights.lambda_G = 0;
  cfg.optimizer = OptimizerKind::adam;
  cfg.lr = 0.01;
  cfg.train_scenes = 60;
  cfg.heldout_scenes = 40;
  cfg.steps = 600;
  cfg.eval_interval = 600;
  cfg.out_dir = (fs::temp_directory_path() / "agmm_test_model_toy").string();
  fs::remove_all(cfg.out_dir);
  auto tr = generate_split(cfg, false);
  auto ho = generate_split(cfg, true);
  Trainer<float> trainer(cfg, tr, ho);
  trainer.run();
  NoGradGuard ng;
  std::vector<double> scores;
  std::vector<bool> positive;
  std::size_t tp = 0, labeled = 0, fg_truth = 0, fg_hit = 0;
  for (std::size_t i = 0; i < ho.scenes.size(); ++i) {
    const auto out = forward(ho.scenes[i].image_as<float>(), trainer.model());
    for (int c = 1; c < 5; ++c) {
      scores.push_back(out.class_scores.data()[std::size_t(c - 1)]);
      positive.push_back(ho.presence[i].contains(c));
    }
    const auto seeds = cam_to_seeds(out.cam, ho.presence[i], cfg.tau_fg, cfg.tau_bg);
    const auto& gt = ho.scenes[i].dense_gt;
    for (std::size_t p = 0; p < gt.pixels(); ++p) {
      if (seeds.labels[p] != kIgnore) ++labeled, tp += seeds.labels[p] == gt.labels[p];
      if (gt.labels[p] != 0) ++fg_truth, fg_hit += seeds.labels[p] == gt.labels[p];
    }
  }
  EXPECT_GT(roc_auc(scores, positive), 0.9);
  const double precision = double(tp) / double(labeled), recall = double(fg_hit) / double(fg_truth);
  EXPECT_GT(precision, recall);
  fs::remove_all(cfg.out_dir);
}
