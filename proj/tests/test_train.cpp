#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "agmm/synth/io.hpp"
#include "agmm/train/experiments.hpp"
#include "agmm/train/metrics.hpp"
#include "agmm/train/trainer.hpp"

using namespace agmm;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::vector<std::string> lines(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream is(s);
  for (std::string l; std::getline(is, l);) out.push_back(l);
  return out;
}

TrainConfig tiny(const std::string& name, int steps = 4) {
  TrainConfig cfg;
  cfg.scene.height = cfg.scene.width = 16;
  cfg.train_scenes = 6;
  cfg.heldout_scenes = 3;
  cfg.model.backbone_widths = {6, 6};
  cfg.model.gmm_channels = 3;
  cfg.steps = steps;
  cfg.batch = 2;
  cfg.eval_interval = 2;
  cfg.out_dir = (fs::temp_directory_path() / ("agmm_test_train_" + name)).string();
  fs::remove_all(cfg.out_dir);
  return cfg;
}

}  // namespace

TEST(Confusion, HandFixture) {
  LabelGrid truth(1, 6), pred(1, 6);
  truth.labels = {0, 0, 1, 1, 2, kIgnore};
  pred.labels = {0, 1, 1, 1, kIgnore, 2};
  Confusion c(3);
  c.add(truth, pred);
  EXPECT_DOUBLE_EQ(c.iou(0), 0.5);
  EXPECT_DOUBLE_EQ(c.iou(1), 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(c.iou(2), 0.0);
  EXPECT_DOUBLE_EQ(c.miou(), (0.5 + 2.0 / 3.0) / 3.0);
  EXPECT_DOUBLE_EQ(c.pixel_accuracy(), 3.0 / 5.0);
}

TEST(Confusion, PerfectAndBounded) {
  const auto sc = gen_scene(SceneSpec{}, 4);
  Confusion perfect(3);
  perfect.add(sc.dense_gt, sc.dense_gt);
  EXPECT_DOUBLE_EQ(perfect.miou(), 1.0);
  LabelGrid zeros(64, 64, 0);
  Confusion c(3);
  c.add(sc.dense_gt, zeros);
  EXPECT_GE(c.miou(), 0.0);
  EXPECT_LT(c.miou(), 1.0);
}

TEST(RocAuc, RanksAndTies) {
  EXPECT_DOUBLE_EQ(roc_auc({0.1, 0.9, 0.8, 0.2}, {false, true, true, false}), 1.0);
  EXPECT_DOUBLE_EQ(roc_auc({0.9, 0.1}, {false, true}), 0.0);
  EXPECT_DOUBLE_EQ(roc_auc({0.5, 0.5}, {false, true}), 0.5);
}

TEST(Config, ParseRoundTripAndErrors) {
  const auto cfg = parse_config("train.steps = 17\n# note\nloss.contrast = centers  # trailing\noptim.lr=0.2\n");
  EXPECT_EQ(cfg.steps, 17);
  EXPECT_EQ(cfg.contrast, ContrastVariant::centers);
  EXPECT_DOUBLE_EQ(cfg.lr, 0.2);
  const auto back = parse_config(config_to_text(cfg));
  EXPECT_EQ(config_to_text(back), config_to_text(cfg));

  try {
    parse_config("train.steps = 3\nno.such_key = 1\n", "x.cfg");
    FAIL() << "unknown key accepted";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("x.cfg:2"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("no.such_key"), std::string::npos) << e.what();
  }
  EXPECT_THROW(parse_config("train.steps = 0"), ConfigError);
  EXPECT_THROW(parse_config("oem.min_conf = 1"), ConfigError);
  EXPECT_THROW(parse_config("loss.contrast = sideways"), ConfigError);
  EXPECT_THROW(parse_config("train.steps"), ConfigError);
}

TEST(Modes, ApplyModeSetsSwitches) {
  TrainConfig c;
  apply_mode(c, "baseline");
  EXPECT_EQ(c.weights.lambda_G, 0.0);
  c = {};
  apply_mode(c, "l-weak");
  EXPECT_EQ(c.weights.lambda_c, 0.0);
  EXPECT_GT(c.weights.lambda_w, 0.0);
  EXPECT_FALSE(c.oem_enabled);
  c = {};
  apply_mode(c, "sg");
  EXPECT_TRUE(c.stop_grad_G);
  c = {};
  apply_mode(c, "label-assign");
  EXPECT_EQ(c.pseudo_source, PseudoLabelSource::label_assignment);
  EXPECT_THROW(apply_mode(c, "nope"), ConfigError);
  EXPECT_EQ(parse_modes("full, baseline"), (std::vector<std::string>{"full", "baseline"}));
}

TEST(Train, SingleStepWritesOneRow) {
  auto cfg = tiny("one", 1);
  const auto rep = train(cfg);
  EXPECT_EQ(rep.steps_run, 1);
  const auto csv = lines(slurp(rep.metrics_csv));
  ASSERT_EQ(csv.size(), 2u);
  EXPECT_EQ(csv[0], kMetricsHeader);
  EXPECT_EQ(csv[1].rfind("1,", 0), 0u);
  EXPECT_TRUE(fs::exists(rep.checkpoint));
  fs::remove_all(cfg.out_dir);
}

TEST(Train, SameConfigIsByteIdentical) {
  auto a = tiny("ra"), b = tiny("rb");
  const auto ra = train(a), rb = train(b);
  EXPECT_EQ(slurp(ra.metrics_csv), slurp(rb.metrics_csv));
  auto c = tiny("rc");
  c.seed = 9;
  EXPECT_NE(slurp(train(c).metrics_csv), slurp(ra.metrics_csv));
  for (const auto& d : {a.out_dir, b.out_dir, c.out_dir}) fs::remove_all(d);
}

TEST(Train, FinalMetricsFollowTheWeightAverage) {
  auto raw = tiny("ema0"), avg = tiny("ema1");
  raw.ema = 0;
  const auto r0 = train(raw), r1 = train(avg);
  const auto last = lines(slurp(r0.metrics_csv)).back();
  EXPECT_NE(last.find(csv_number(r0.final_metrics.miou_P)), std::string::npos) << last;
  EXPECT_EQ(slurp(r0.metrics_csv), slurp(r1.metrics_csv));
  EXPECT_NE(r0.final_metrics.miou_P, r1.final_metrics.miou_P);
  EXPECT_THROW(parse_config("optim.ema = 1"), ConfigError);
  fs::remove_all(raw.out_dir);
  fs::remove_all(avg.out_dir);
}

TEST(Train, MetricsStayInUnitRange) {
  for (const char* mod : {"scribble", "block", "box"}) {
    auto cfg = tiny(std::string("m_") + mod);
    cfg.modality = parse_modality(mod);
    const auto m = train(cfg).final_metrics;
    for (double v : {m.miou_P, m.pix_acc_P, m.miou_G, m.pseudo_acc}) EXPECT_TRUE(v >= 0.0 && v <= 1.0) << mod;
    fs::remove_all(cfg.out_dir);
  }
}

TEST(Train, ImageLevelModeRuns) {
  auto cfg = tiny("il");
  cfg.modality = Modality::image_level;
  const auto rep = train(cfg);
  EXPECT_EQ(lines(slurp(rep.metrics_csv)).size(), 3u);
  fs::remove_all(cfg.out_dir);
}

TEST(Train, LoadsCorpusFromDisk) {
  auto cfg = tiny("corpus_run");
  const auto root = fs::temp_directory_path() / "agmm_test_train_corpus";
  fs::remove_all(root);
  write_corpus(root, cfg.scene, cfg.train_scenes, {Modality::point}, cfg.weak, 5);
  cfg.corpus = root.string();
  const auto rep = train(cfg);
  EXPECT_EQ(rep.steps_run, cfg.steps);
  fs::remove_all(root);
  fs::remove_all(cfg.out_dir);
}

TEST(Ablate, RowsPerModeAndSeed) {
  auto cfg = tiny("ablate", 2);
  const auto table = ablate(cfg, {"baseline", "full", "sg"}, 2, 2);
  ASSERT_EQ(table.rows.size(), 6u);
  EXPECT_EQ(table.of("sg").size(), 2u);
  EXPECT_EQ(table.rows[1].seed, 1u);
  const auto csv = lines(slurp(table.csv));
  ASSERT_EQ(csv.size(), 1u + 6u + 6u);
  EXPECT_EQ(csv[0], kAblationHeader);
  EXPECT_EQ(csv[7].rfind("baseline,mean,", 0), 0u);
  EXPECT_TRUE(fs::exists(fs::path(cfg.out_dir) / "full" / "seed1" / "metrics.csv"));
  fs::remove_all(cfg.out_dir);
}

TEST(Ablate, RethrowsWorkerFailure) {
  EXPECT_THROW(parallel_for(4, 2, [](std::size_t i) { if (i == 2) throw std::runtime_error("boom"); }),
               std::runtime_error);
}

TEST(MultiStage, PseudoLabelsRoundTripThroughDisk) {
  auto cfg = tiny("mt");
  const auto rep = multi_stage(cfg);
  ASSERT_TRUE(fs::exists(rep.pseudo_dir));
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(rep.pseudo_dir)) {
    ++files;
    const auto g = read_pgm(e.path());
    EXPECT_EQ(g.height, 16u);
    for (auto l : g.labels) ASSERT_TRUE(l == kIgnore || l < 3);
  }
  EXPECT_EQ(files, cfg.train_scenes);
  EXPECT_TRUE(fs::exists(rep.stage2.metrics_csv));
  fs::remove_all(cfg.out_dir);
}
