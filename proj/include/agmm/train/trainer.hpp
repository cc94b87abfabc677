#pragma once

// Training loop: forward -> weak labels or CAM seeds -> online EM -> losses
// -> backward -> optimizer step, with periodic held-out evaluation.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "agmm/gmm/agmm.hpp"
#include "agmm/loss/objectives.hpp"
#include "agmm/model/seg_model.hpp"
#include "agmm/synth/io.hpp"
#include "agmm/train/config.hpp"
#include "agmm/train/metrics.hpp"

namespace agmm {

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(int step, std::string breakdown)
      : std::runtime_error("non-finite loss at step " + std::to_string(step) + ": " + breakdown),
        step_(step),
        breakdown_(std::move(breakdown)) {}
  int step() const { return step_; }
  const std::string& breakdown() const { return breakdown_; }

 private:
  int step_;
  std::string breakdown_;
};

// ---------------------------------------------------------------------------
// Data

/// Scenes with their training-time supervision. `weak` holds pixel maps for
/// point/scribble/block/box modalities and is empty for image-level runs.
struct TrainData {
  std::vector<Scene> scenes;
  std::vector<WeakLabelMap> weak;
  std::vector<ClassPresence> presence;
  bool image_level = false;
};

inline constexpr std::uint64_t kHeldoutSeedOffset = 1'000'000;

inline TrainData generate_split(const TrainConfig& cfg, bool heldout) {
  TrainData d;
  d.image_level = cfg.modality == Modality::image_level;
  const std::size_t n = heldout ? cfg.heldout_scenes : cfg.train_scenes;
  for (std::size_t i = 0; i < n; ++i) {
    const auto seed = scene_seed(cfg.data_seed, heldout ? kHeldoutSeedOffset + i : i);
    d.scenes.push_back(gen_scene(cfg.scene, seed));
    d.presence.push_back(derive_image_level(d.scenes.back()));
    if (!d.image_level) d.weak.push_back(derive_weak(d.scenes.back(), cfg.modality, cfg.weak, label_seed(seed, cfg.modality)));
  }
  return d;
}

/// Training split from an on-disk corpus; the configured modality must be present.
inline TrainData load_split(const std::string& root, const TrainConfig& cfg) {
  TrainData d;
  d.image_level = cfg.modality == Modality::image_level;
  for (auto& cs : load_corpus(root, cfg.scene.class_count)) {
    if (!d.image_level) {
      const WeakLabelMap* found = nullptr;
      for (const auto& w : cs.weak)
        if (w.modality == cfg.modality) found = &w;
      if (!found)
        throw ConfigError("corpus scene " + cs.scene_id + " has no " + modality_name(cfg.modality) + " labels");
      d.weak.push_back(*found);
    }
    d.presence.push_back(cs.presence);
    d.scenes.push_back(std::move(cs.scene));
  }
  if (d.scenes.empty()) throw ConfigError("corpus " + root + " is empty");
  return d;
}

inline TrainData training_split(const TrainConfig& cfg) {
  return cfg.corpus.empty() ? generate_split(cfg, false) : load_split(cfg.corpus, cfg);
}

// ---------------------------------------------------------------------------
// Per-image objective

struct LossValues {
  double l_seg = 0, l_self = 0, l_weak = 0, l_con = 0, l_cls = 0, l_total = 0;

  LossValues& operator+=(const LossValues& o) {
    l_seg += o.l_seg, l_self += o.l_self, l_weak += o.l_weak, l_con += o.l_con, l_cls += o.l_cls,
        l_total += o.l_total;
    return *this;
  }
  LossValues scaled(double k) const { return {l_seg * k, l_self * k, l_weak * k, l_con * k, l_cls * k, l_total * k}; }
  bool finite() const {
    for (double v : {l_seg, l_self, l_weak, l_con, l_cls, l_total})
      if (!std::isfinite(v)) return false;
    return true;
  }
  std::string str() const {
    std::ostringstream os;
    os.precision(9);
    os << "l_seg=" << l_seg << " l_self=" << l_self << " l_weak=" << l_weak << " l_con=" << l_con
       << " l_cls=" << l_cls << " l_total=" << l_total;
    return os.str();
  }
};

template <class Real>
LossValues values_of(const LossBreakdown<Real>& b) {
  return {double(b.l_seg.item()), double(b.l_self.item()), double(b.l_weak.item()),
          double(b.l_con.item()), double(b.l_cls.item()),  double(b.l_total.item())};
}

template <class Real>
struct ImageObjective {
  ForwardOutputs<Real> fwd;
  WeakLabelMap labels;            // weak labels or CAM seeds actually used
  std::optional<OemResult<Real>> oem;
  GmmScores<Real> g;              // the mixture prediction supervising P
  LossBreakdown<Real> loss;
};

/// Scores rescaled to sum to one over components at every pixel, so the
/// mixture prediction is a distribution like P. A small per-component floor
/// keeps the division finite where every score underflows; such pixels get a
/// uniform target. Argmax is unchanged.
inline constexpr double kSelfTargetFloor = 1e-4;

template <class Real>
GmmScores<Real> normalize_scores(const GmmScores<Real>& g) {
  const std::size_t K = g.scores.extent(0);
  const auto shifted = g.scores + Real(kSelfTargetFloor);
  return {div(shifted, expand(sum(shifted, {0}), 0, K)), g.class_ids};
}

/// Full objective for one image. `labels` is the pixel supervision (weak map
/// or precomputed CAM seeds); for image-level runs pass std::nullopt to derive
/// seeds from this forward pass.
template <class Real>
ImageObjective<Real> image_objective(const TrainConfig& cfg, const ModelParams<Real>& model, const Tensor<Real>& image,
                                     std::optional<WeakLabelMap> labels, const ClassPresence& presence,
                                     bool image_level) {
  ImageObjective<Real> r;
  r.fwd = forward(image, model);
  r.labels = labels ? std::move(*labels) : cam_to_seeds(r.fwd.cam, presence, cfg.tau_fg, cfg.tau_bg);

  LossParts<Real> parts;
  if (image_level) parts.l_cls = loss_cls(r.fwd.class_scores, presence);
  if (r.labels.labeled_count() > 0) {
    const auto& P = r.fwd.seg_probs;
    const auto& F = r.fwd.features_gmm;
    parts.l_seg = loss_seg(P, r.labels);
    r.oem = oem_refine(F, r.labels, cfg.oem_iters, cfg.min_conf, cfg.soft_m_step);
    const bool use_new = cfg.oem_enabled;
    r.g = use_new ? r.oem->g_new : r.oem->g_old;
    const auto& params = use_new ? r.oem->params_new : r.oem->params_old;

    switch (cfg.pseudo_source) {
      case PseudoLabelSource::gmm:
        parts.l_self = loss_self(P, cfg.self_target == SelfTarget::normalized ? normalize_scores(r.g) : r.g,
                                 cfg.stop_grad_G);
        break;
      case PseudoLabelSource::label_assignment: {
        auto hard = label_assignment_baseline(F, detach(r.oem->params_old));
        for (std::size_t i = 0; i < hard.pixels(); ++i)
          if (r.labels.labels[i] != kIgnore) hard.labels[i] = r.labels.labels[i];
        if (hard.labeled_count() > 0) parts.l_self = loss_seg(P, hard);
        break;
      }
      case PseudoLabelSource::none: break;
    }
    parts.l_weak = loss_weak(r.g, r.labels);
    if (cfg.contrast == ContrastVariant::pixel) {
      const LabelGrid& pairs =
          cfg.contrast_pairs == ContrastPairs::weak ? static_cast<const LabelGrid&>(r.labels) : r.oem->assignment;
      if (pairs.labeled_count() > 0) parts.l_con = loss_con_pixel(F, pairs, params);
    } else {
      parts.l_con = loss_con_centers(params);
    }
  }
  r.loss = total_loss(parts, cfg.weights, image_level);
  return r;
}

// ---------------------------------------------------------------------------
// Optimizers

template <class Real>
class Optimizer {
 public:
  Optimizer(const TrainConfig& cfg, const ParamSet<Real>& params) : cfg_(cfg) {
    for (const auto& [name, t] : params) {
      m_.emplace_back(t.size(), 0.0);
      v_.emplace_back(t.size(), 0.0);
    }
  }

  void step(ParamSet<Real>& params) {
    ++t_;
    double scale = 1.0;
    if (cfg_.clip_norm > 0) {
      double sq = 0;
      for (const auto& [name, t] : params)
        for (auto g : t.grad()) sq += double(g) * double(g);
      const double norm = std::sqrt(sq);
      if (norm > cfg_.clip_norm) scale = cfg_.clip_norm / norm;
    }
    std::size_t k = 0;
    for (auto& [name, t] : params) {
      auto w = t.mutable_data();
      const auto g = t.grad();
      auto& m = m_[k];
      auto& v = v_[k];
      if (cfg_.optimizer == OptimizerKind::sgd_momentum) {
        for (std::size_t i = 0; i < w.size(); ++i) {
          m[i] = cfg_.momentum * m[i] + scale * double(g[i]);
          w[i] = Real(double(w[i]) - cfg_.lr * m[i]);
        }
      } else {
        const double c1 = 1.0 - std::pow(cfg_.beta1, double(t_)), c2 = 1.0 - std::pow(cfg_.beta2, double(t_));
        for (std::size_t i = 0; i < w.size(); ++i) {
          const double gi = scale * double(g[i]);
          m[i] = cfg_.beta1 * m[i] + (1 - cfg_.beta1) * gi;
          v[i] = cfg_.beta2 * v[i] + (1 - cfg_.beta2) * gi * gi;
          w[i] = Real(double(w[i]) - cfg_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + 1e-8));
        }
      }
      ++k;
    }
  }

 private:
  const TrainConfig& cfg_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

// ---------------------------------------------------------------------------
// Evaluation

struct Metrics {
  std::vector<double> iou;  // per class
  double miou_P = 0;
  double pix_acc_P = 0;
  double miou_G = 0;
  double pseudo_acc = 0;
  bool has_G = false;
};

/// Argmax-P metrics over `data`; pseudo-label metrics when pixel supervision
/// (or CAM seeds) can be formed for the set.
template <class Real>
Metrics evaluate(const TrainConfig& cfg, const ModelParams<Real>& model, const TrainData& data, bool with_G = true) {
  NoGradGuard ng;
  const std::size_t K = std::size_t(model.shape.class_count);
  Confusion conf_p(K), conf_g(K);
  bool any_g = false;
  for (std::size_t i = 0; i < data.scenes.size(); ++i) {
    const auto& sc = data.scenes[i];
    if (std::size_t(sc.class_count) != K)
      throw std::invalid_argument("evaluation set has " + std::to_string(sc.class_count) + " classes, model has " +
                                  std::to_string(K));
    const auto fwd = forward(sc.image_as<Real>(), model);
    conf_p.add(sc.dense_gt, argmax_labels(fwd.seg_probs));
    if (!with_G) continue;
    WeakLabelMap labels;
    if (!data.weak.empty())
      labels = data.weak[i];
    else if (data.image_level)
      labels = cam_to_seeds(fwd.cam, data.presence[i], cfg.tau_fg, cfg.tau_bg);
    else
      continue;
    if (labels.labeled_count() == 0) continue;
    const auto oem = oem_refine(fwd.features_gmm, labels, cfg.oem_iters, cfg.min_conf, cfg.soft_m_step);
    accumulate_pseudo(conf_g, cfg.oem_enabled ? oem.g_new : oem.g_old, sc.dense_gt);
    any_g = true;
  }
  Metrics m;
  for (std::size_t c = 0; c < K; ++c) m.iou.push_back(conf_p.iou(c));
  m.miou_P = conf_p.miou();
  m.pix_acc_P = conf_p.pixel_accuracy();
  if (any_g) {
    m.has_G = true;
    m.miou_G = conf_g.miou();
    m.pseudo_acc = conf_g.pixel_accuracy();
  }
  return m;
}

// ---------------------------------------------------------------------------
// Training

struct TrainReport {
  Metrics final_metrics;  // of model(): the weight average when optim.ema > 0
  std::filesystem::path metrics_csv;
  std::filesystem::path checkpoint;
  int steps_run = 0;
};

inline constexpr const char* kMetricsHeader =
    "step,l_seg,l_self,l_weak,l_con,l_cls,l_total,miou_P,pix_acc_P,miou_G,pseudo_acc";

inline std::string csv_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

template <class Real>
class Trainer {
 public:
  Trainer(TrainConfig cfg, TrainData train, TrainData heldout)
      : cfg_(std::move(cfg)), train_(std::move(train)), heldout_(std::move(heldout)) {
    cfg_.validate();
    cfg_.model.class_count = cfg_.scene.class_count;
    model_ = init_model<Real>(cfg_.model, mix_seed(cfg_.seed, 0x1417));
    if (cfg_.ema > 0) {
      ema_.shape = model_.shape;
      for (const auto& [name, t] : model_.params)
        ema_.params.add(name, Tensor<Real>::from(t.shape(), {t.data().begin(), t.data().end()}));
    }
    if (!train_.image_level && train_.weak.size() != train_.scenes.size())
      throw std::invalid_argument("training data needs one weak map per scene");
  }

  /// Weights behind the final metrics and the checkpoint: the running
  /// average when optim.ema > 0, else the raw weights. The CSV curves always
  /// track the raw weights.
  const ModelParams<Real>& model() const { return cfg_.ema > 0 ? ema_ : model_; }
  const TrainConfig& config() const { return cfg_; }

  /// Runs all steps; writes metrics.csv and checkpoint/ under out_dir.
  TrainReport run() {
    namespace fs = std::filesystem;
    const fs::path out(cfg_.out_dir);
    fs::create_directories(out);
    TrainReport rep;
    rep.metrics_csv = out / "metrics.csv";
    rep.checkpoint = out / "checkpoint";
    std::ofstream csv(rep.metrics_csv, std::ios::binary);
    if (!csv) throw std::runtime_error("cannot write " + rep.metrics_csv.string());
    csv << kMetricsHeader << '\n';

    Optimizer<Real> opt(cfg_, model_.params);
    Rng order_rng(mix_seed(cfg_.seed, 0xBA7C));
    std::vector<std::size_t> order;
    std::size_t cursor = 0;
    std::map<std::size_t, WeakLabelMap> seed_cache;
    const std::size_t N = train_.scenes.size();

    for (int step = 1; step <= cfg_.steps; ++step) {
      LossValues logged;
      Tensor<Real> batch_loss = Tensor<Real>::scalar(Real(0));
      for (int b = 0; b < cfg_.batch; ++b) {
        if (cursor == order.size()) {
          order.resize(N);
          for (std::size_t i = 0; i < N; ++i) order[i] = i;
          order_rng.shuffle(order);
          cursor = 0;
          seed_cache.clear();
        }
        const std::size_t idx = order[cursor++];
        std::optional<WeakLabelMap> labels;
        if (!train_.image_level) {
          labels = train_.weak[idx];
        } else if (cfg_.cam_cache_per_epoch) {
          if (auto it = seed_cache.find(idx); it != seed_cache.end()) labels = it->second;
        }
        ImageObjective<Real> obj;
        try {
          obj = image_objective(cfg_, model_, train_.scenes[idx].image_as<Real>(), std::move(labels),
                                train_.presence[idx], train_.image_level);
        } catch (const DomainError& e) {
          fail(step, logged.scaled(1.0 / cfg_.batch), e.what());
        }
        if (train_.image_level && cfg_.cam_cache_per_epoch) seed_cache.emplace(idx, obj.labels);
        logged += values_of(obj.loss);
        batch_loss = add(batch_loss, obj.loss.l_total);
      }
      logged = logged.scaled(1.0 / cfg_.batch);
      if (!logged.finite()) fail(step, logged, "");
      model_.params.zero_grad();
      backward(batch_loss * Real(1.0 / cfg_.batch), model_.params);
      opt.step(model_.params);
      if (cfg_.ema > 0) update_average(step);
      for (const auto& [name, t] : model_.params)
        for (auto v : t.data())
          if (!std::isfinite(double(v))) fail(step, logged, "parameter " + name + " became non-finite");

      if (step % cfg_.eval_interval == 0 || step == cfg_.steps) {
        const auto m = evaluate(cfg_, model_, heldout_);
        rep.final_metrics = m;
        csv << step;
        for (double v : {logged.l_seg, logged.l_self, logged.l_weak, logged.l_con, logged.l_cls, logged.l_total,
                         m.miou_P, m.pix_acc_P, m.miou_G, m.pseudo_acc})
          csv << ',' << csv_number(v);
        csv << '\n';
        csv.flush();
      }
      rep.steps_run = step;
    }
    if (cfg_.ema > 0) rep.final_metrics = evaluate(cfg_, ema_, heldout_);
    save_checkpoint(rep.checkpoint, model());
    return rep;
  }

 private:
  // Warm-up keeps early evaluations from being dominated by the initial weights.
  void update_average(int step) {
    const double d = std::min(cfg_.ema, (1.0 + step) / (10.0 + step));
    auto src = model_.params.begin();
    for (auto& [name, t] : ema_.params) {
      auto a = t.mutable_data();
      const auto w = (src++)->second.data();
      for (std::size_t i = 0; i < a.size(); ++i) a[i] = Real(d * double(a[i]) + (1 - d) * double(w[i]));
    }
  }

  [[noreturn]] void fail(int step, const LossValues& v, const std::string& what) {
    const std::filesystem::path out(cfg_.out_dir);
    std::ofstream dump(out / "divergence.txt");
    dump << "step " << step << '\n' << v.str() << '\n';
    if (!what.empty()) dump << what << '\n';
    throw DivergenceError(step, v.str() + (what.empty() ? "" : " (" + what + ")"));
  }

  TrainConfig cfg_;
  TrainData train_, heldout_;
  ModelParams<Real> model_, ema_;
};

/// Builds data from the config and trains at the configured precision.
inline TrainReport train(const TrainConfig& cfg) {
  auto tr = training_split(cfg);
  auto ho = generate_split(cfg, true);
  if (cfg.precision == Precision::f64) return Trainer<double>(cfg, std::move(tr), std::move(ho)).run();
  return Trainer<float>(cfg, std::move(tr), std::move(ho)).run();
}

}  // namespace agmm
