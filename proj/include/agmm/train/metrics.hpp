#pragma once

// Confusion-matrix segmentation metrics.

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

#include "agmm/gmm/agmm.hpp"
#include "agmm/synth/scene.hpp"

namespace agmm {

class Confusion {
 public:
  explicit Confusion(std::size_t classes) : k_(classes), m_(classes * classes, 0) {}

  /// Counts pixels whose truth is not IGNORE. IGNORE predictions count as
  /// misses for the true class.
  void add(const LabelGrid& truth, const LabelGrid& pred) {
    if (truth.pixels() != pred.pixels()) throw ShapeError("confusion: truth and prediction differ in size");
    for (std::size_t i = 0; i < truth.pixels(); ++i) {
      const auto t = truth.labels[i], p = pred.labels[i];
      if (t == kIgnore) continue;
      if (t >= k_) throw std::out_of_range("confusion: truth class out of range");
      ++truth_total_[t];
      if (p != kIgnore && p < k_) ++m_[t * k_ + p];
    }
  }

  std::size_t classes() const { return k_; }
  std::uint64_t at(std::size_t t, std::size_t p) const { return m_[t * k_ + p]; }
  std::uint64_t truth_count(std::size_t t) const { return truth_total_[t]; }

  std::uint64_t pred_count(std::size_t p) const {
    std::uint64_t s = 0;
    for (std::size_t t = 0; t < k_; ++t) s += at(t, p);
    return s;
  }

  /// IoU = TP / (truth + predicted - TP); 0 for classes absent from both.
  double iou(std::size_t c) const {
    const double tp = double(at(c, c));
    const double uni = double(truth_count(c)) + double(pred_count(c)) - tp;
    return uni > 0 ? tp / uni : 0.0;
  }

  /// Unweighted mean IoU over classes present in the ground truth.
  double miou() const {
    double s = 0;
    std::size_t n = 0;
    for (std::size_t c = 0; c < k_; ++c)
      if (truth_count(c) > 0) {
        s += iou(c);
        ++n;
      }
    return n ? s / double(n) : 0.0;
  }

  double pixel_accuracy() const {
    std::uint64_t tp = 0, total = 0;
    for (std::size_t c = 0; c < k_; ++c) {
      tp += at(c, c);
      total += truth_count(c);
    }
    return total ? double(tp) / double(total) : 0.0;
  }

 private:
  std::size_t k_;
  std::vector<std::uint64_t> m_;
  std::vector<std::uint64_t> truth_total_ = std::vector<std::uint64_t>(k_, 0);
};

/// Per-pixel argmax over channels of a [K,H,W] tensor (lowest index on ties).
template <class Real>
LabelGrid argmax_labels(const Tensor<Real>& t, const std::vector<int>& channel_classes = {}) {
  const std::size_t K = t.extent(0), H = t.extent(1), W = t.extent(2), P = H * W;
  const auto v = t.data();
  LabelGrid out(H, W);
  for (std::size_t i = 0; i < P; ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < K; ++k)
      if (v[k * P + i] > v[best * P + i]) best = k;
    out.labels[i] = std::uint8_t(channel_classes.empty() ? int(best) : channel_classes[best]);
  }
  return out;
}

struct PseudoQuality {
  double pseudo_acc = 0;
  double miou_G = 0;
};

/// Argmax-G labels against ground truth. Pixels are scored over all classes
/// of the confusion; classes without a component simply never get predicted.
template <class Real>
void accumulate_pseudo(Confusion& conf, const GmmScores<Real>& g, const LabelGrid& dense_gt) {
  conf.add(dense_gt, argmax_labels(g.scores, g.class_ids));
}

template <class Real>
PseudoQuality pseudo_quality(const GmmScores<Real>& g, const LabelGrid& dense_gt, std::size_t class_count) {
  Confusion conf(class_count);
  accumulate_pseudo(conf, g, dense_gt);
  return {conf.pixel_accuracy(), conf.miou()};
}

/// Area under the ROC curve of `scores` for binary `positive`; ties count 1/2.
inline double roc_auc(const std::vector<double>& scores, const std::vector<bool>& positive) {
  if (scores.size() != positive.size()) throw std::invalid_argument("roc_auc: size mismatch");
  std::vector<std::size_t> idx(scores.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
  double rank_sum = 0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
    const double avg_rank = 0.5 * double(i + 1 + j);
    for (std::size_t k = i; k < j; ++k)
      if (positive[idx[k]]) {
        rank_sum += avg_rank;
        ++n_pos;
      }
    i = j;
  }
  const std::size_t n_neg = scores.size() - n_pos;
  if (!n_pos || !n_neg) throw std::invalid_argument("roc_auc: needs both classes");
  return (rank_sum - double(n_pos) * double(n_pos + 1) / 2.0) / (double(n_pos) * double(n_neg));
}

}  // namespace agmm
