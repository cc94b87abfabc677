#pragma once

// Ablation matrix, two-stage retraining and checkpoint evaluation on top of
// the trainer.

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "agmm/train/trainer.hpp"

namespace agmm {

// ---------------------------------------------------------------------------
// Modes

inline const std::vector<std::string>& ablation_modes() {
  static const std::vector<std::string> modes{"baseline", "l-self",       "l-weak", "l-con",
                                              "full",     "sg",           "label-assign", "centers"};
  return modes;
}

/// Rewrites the switches of `cfg` for one ablation row. Only TrainConfig
/// fields change; every mode starts from the base config's weights.
inline void apply_mode(TrainConfig& cfg, const std::string& mode) {
  auto& w = cfg.weights;
  if (mode == "baseline") {
    w.lambda_G = 0;
  } else if (mode == "l-self") {
    w.lambda_w = w.lambda_c = 0;
    cfg.oem_enabled = false;
  } else if (mode == "l-weak") {
    w.lambda_c = 0;
    cfg.oem_enabled = false;
  } else if (mode == "l-con") {
    cfg.oem_enabled = false;
  } else if (mode == "full") {
  } else if (mode == "sg") {
    cfg.stop_grad_G = true;
    w.lambda_w = w.lambda_c = 0;
  } else if (mode == "label-assign") {
    cfg.pseudo_source = PseudoLabelSource::label_assignment;
    w.lambda_w = w.lambda_c = 0;
    cfg.oem_enabled = false;
  } else if (mode == "centers") {
    cfg.contrast = ContrastVariant::centers;
  } else {
    throw ConfigError("unknown ablation mode: " + mode);
  }
}

inline std::vector<std::string> parse_modes(const std::string& list) {
  std::vector<std::string> out;
  std::stringstream ss(list);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    tok = detail::trim(tok);
    if (tok.empty()) continue;
    TrainConfig probe;
    apply_mode(probe, tok);
    out.push_back(tok);
  }
  if (out.empty()) throw ConfigError("no ablation modes given");
  return out;
}

/// Worker count from AGMM_THREADS (0 or unset = hardware concurrency).
inline unsigned thread_budget() {
  unsigned n = 0;
  if (const char* env = std::getenv("AGMM_THREADS")) n = unsigned(std::strtoul(env, nullptr, 10));
  if (n == 0) n = std::max(1u, std::thread::hardware_concurrency());
  return n;
}

/// Runs `job(i)` for i in [0, n) on up to `threads` workers. The first
/// exception thrown by any job is rethrown after all workers finish.
template <class Job>
void parallel_for(std::size_t n, unsigned threads, Job job) {
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex mu;
  auto worker = [&] {
    for (std::size_t i; (i = next++) < n;) {
      try {
        job(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!error) error = std::current_exception();
      }
    }
  };
  const unsigned t = unsigned(std::min<std::size_t>(std::max(1u, threads), n));
  if (t <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned k = 0; k < t; ++k) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (error) std::rethrow_exception(error);
}

// ---------------------------------------------------------------------------
// Ablation

struct AblationRow {
  std::string mode;
  std::uint64_t seed = 0;
  double miou_P = 0, miou_G = 0, pseudo_acc = 0;
};

struct AblationTable {
  std::vector<AblationRow> rows;  // mode-major, seeds ascending
  std::filesystem::path csv;

  std::vector<AblationRow> of(const std::string& mode) const {
    std::vector<AblationRow> out;
    for (const auto& r : rows)
      if (r.mode == mode) out.push_back(r);
    return out;
  }
};

inline constexpr const char* kAblationHeader = "mode,seed,miou_P,miou_G,pseudo_acc";

/// Mean and sample standard deviation.
inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0, 0};
  double m = 0;
  for (double x : v) m += x;
  m /= double(v.size());
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, v.size() > 1 ? std::sqrt(s / double(v.size() - 1)) : 0.0};
}

/// Trains every (mode, seed) pair with seeds base.seed .. base.seed+seeds-1
/// and writes `ablation.csv` under base.out_dir: one row per run, then a
/// mean and a std row per mode.
inline AblationTable ablate(const TrainConfig& base, const std::vector<std::string>& modes, int seeds,
                            unsigned threads = thread_budget()) {
  if (seeds < 1) throw ConfigError("ablation needs at least one seed");
  namespace fs = std::filesystem;
  const fs::path root(base.out_dir);
  fs::create_directories(root);

  std::vector<TrainConfig> jobs;
  for (const auto& mode : modes)
    for (int s = 0; s < seeds; ++s) {
      TrainConfig c = base;
      apply_mode(c, mode);
      c.seed = base.seed + std::uint64_t(s);
      c.out_dir = (root / mode / ("seed" + std::to_string(c.seed))).string();
      c.validate();
      jobs.push_back(std::move(c));
    }

  AblationTable table;
  table.rows.resize(jobs.size());
  parallel_for(jobs.size(), threads, [&](std::size_t i) {
    const auto rep = train(jobs[i]);
    table.rows[i] = {modes[i / std::size_t(seeds)], jobs[i].seed, rep.final_metrics.miou_P, rep.final_metrics.miou_G,
                     rep.final_metrics.pseudo_acc};
  });

  table.csv = root / "ablation.csv";
  std::ofstream csv(table.csv, std::ios::binary);
  if (!csv) throw std::runtime_error("cannot write " + table.csv.string());
  csv << kAblationHeader << '\n';
  for (const auto& r : table.rows)
    csv << r.mode << ',' << r.seed << ',' << csv_number(r.miou_P) << ',' << csv_number(r.miou_G) << ','
        << csv_number(r.pseudo_acc) << '\n';
  for (const auto& mode : modes) {
    std::vector<double> p, g, a;
    for (const auto& r : table.of(mode)) p.push_back(r.miou_P), g.push_back(r.miou_G), a.push_back(r.pseudo_acc);
    const auto [pm, ps] = mean_std(p);
    const auto [gm, gs] = mean_std(g);
    const auto [am, as] = mean_std(a);
    csv << mode << ",mean," << csv_number(pm) << ',' << csv_number(gm) << ',' << csv_number(am) << '\n';
    csv << mode << ",std," << csv_number(ps) << ',' << csv_number(gs) << ',' << csv_number(as) << '\n';
  }
  return table;
}

// ---------------------------------------------------------------------------
// Checkpoint evaluation

/// Loads a checkpoint at the configured precision and scores it on `data`.
inline Metrics evaluate_checkpoint(const TrainConfig& cfg, const std::filesystem::path& checkpoint,
                                   const TrainData& data) {
  auto run = [&](auto tag) {
    using Real = decltype(tag);
    const auto model = load_checkpoint<Real>(checkpoint);
    if (!data.scenes.empty() && model.shape.class_count != data.scenes.front().class_count)
      throw std::invalid_argument("checkpoint has " + std::to_string(model.shape.class_count) +
                                  " classes, evaluation set has " + std::to_string(data.scenes.front().class_count));
    return evaluate(cfg, model, data);
  };
  return cfg.precision == Precision::f64 ? run(double{}) : run(float{});
}

// ---------------------------------------------------------------------------
// Two-stage training

struct MultiStageReport {
  TrainReport stage1, stage2;
  std::filesystem::path pseudo_dir;
};

/// Argmax-G pseudo labels of a trained model for every training scene,
/// filtered by min_conf (the rest IGNORE).
template <class Real>
std::vector<LabelGrid> dump_pseudo_labels(const TrainConfig& cfg, const ModelParams<Real>& model,
                                          const TrainData& data) {
  NoGradGuard ng;
  std::vector<LabelGrid> out;
  for (std::size_t i = 0; i < data.scenes.size(); ++i) {
    const auto fwd = forward(data.scenes[i].template image_as<Real>(), model);
    const WeakLabelMap seeds =
        data.image_level ? cam_to_seeds(fwd.cam, data.presence[i], cfg.tau_fg, cfg.tau_bg) : data.weak[i];
    if (seeds.labeled_count() == 0) {
      out.emplace_back(data.scenes[i].dense_gt.height, data.scenes[i].dense_gt.width);
      continue;
    }
    const auto oem = oem_refine(fwd.features_gmm, seeds, cfg.oem_iters, cfg.min_conf, cfg.soft_m_step);
    out.push_back(assign_hard(cfg.oem_enabled ? oem.g_new : oem.g_old, cfg.min_conf));
  }
  return out;
}

/// Stage 1 trains per `cfg` under out_dir/stage1; its pseudo labels go to
/// out_dir/stage1/pseudo as PGM files; stage 2 trains a fresh model with
/// loss_seg only on the labels read back from disk, under out_dir/stage2.
inline MultiStageReport multi_stage(const TrainConfig& cfg) {
  namespace fs = std::filesystem;
  cfg.validate();
  const fs::path root(cfg.out_dir);
  MultiStageReport rep;

  TrainConfig c1 = cfg;
  c1.out_dir = (root / "stage1").string();
  auto train1 = training_split(c1);
  auto held = generate_split(c1, true);
  auto dump = [&](auto tag) {
    using Real = decltype(tag);
    Trainer<Real> t(c1, train1, held);
    rep.stage1 = t.run();
    return dump_pseudo_labels(c1, t.model(), train1);
  };
  const auto pseudo = c1.precision == Precision::f64 ? dump(double{}) : dump(float{});

  rep.pseudo_dir = root / "stage1" / "pseudo";
  fs::create_directories(rep.pseudo_dir);
  TrainData train2;
  train2.scenes = train1.scenes;
  train2.presence = train1.presence;
  for (std::size_t i = 0; i < pseudo.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "scene_%04zu.pgm", i);
    write_pgm(rep.pseudo_dir / name, pseudo[i]);
    train2.weak.emplace_back(read_pgm(rep.pseudo_dir / name), cfg.modality);
  }

  TrainConfig c2 = cfg;
  c2.out_dir = (root / "stage2").string();
  c2.seed = mix_seed(cfg.seed, 0x57A6E2);
  c2.weights = LossWeights{1, 0, 0, 0, 0, 0};
  if (c2.precision == Precision::f64)
    rep.stage2 = Trainer<double>(c2, std::move(train2), std::move(held)).run();
  else
    rep.stage2 = Trainer<float>(c2, std::move(train2), std::move(held)).run();
  return rep;
}

}  // namespace agmm
