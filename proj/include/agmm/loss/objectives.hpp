#pragma once

// Loss terms coupling segmentation predictions P with GMM scores G.

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "agmm/gmm/agmm.hpp"
#include "agmm/numeric/ops.hpp"
#include "agmm/synth/scene.hpp"

namespace agmm {

inline constexpr double kProbClamp = 1e-12;

struct LossWeights {
  double lambda_seg = 1.0;
  double lambda_G = 1.0;
  double lambda_s = 1.0;
  double lambda_w = 1.0;
  double lambda_c = 1.0;
  double lambda_cls = 1.0;

  void validate() const {
    for (double v : {lambda_seg, lambda_G, lambda_s, lambda_w, lambda_c, lambda_cls})
      if (!std::isfinite(v) || v < 0) throw std::invalid_argument("loss weights must be finite and non-negative");
  }
};

template <class Real>
struct LossBreakdown {
  Tensor<Real> l_seg, l_self, l_weak, l_con, l_cls, l_total;
};

namespace detail {

// -[t log p + (1 - t) log(1 - p)] summed elementwise, with p clamped to
// [eps, 1 - eps] through the log operand floor.
template <class Real>
Tensor<Real> bce_sum(const Tensor<Real>& p, const Tensor<Real>& target) {
  const auto eps = Real(kProbClamp);
  const auto one = Tensor<Real>::scalar(Real(1));
  const auto pos = mul(target, log(p, eps));
  const auto negt = mul(sub(one, target), log(sub(one, p), eps));
  return neg(sum_all(add(pos, negt)));
}

template <class Real>
Tensor<Real> one_hot_columns(const std::vector<int>& row_classes, const std::vector<std::uint8_t>& labels) {
  std::vector<Real> y(row_classes.size() * labels.size(), Real(0));
  for (std::size_t j = 0; j < labels.size(); ++j)
    for (std::size_t k = 0; k < row_classes.size(); ++k)
      if (row_classes[k] == labels[j]) y[k * labels.size() + j] = Real(1);
  return Tensor<Real>::from({row_classes.size(), labels.size()}, std::move(y));
}

}  // namespace detail

/// Partial cross-entropy on labeled pixels: class-wise binary CE against the
/// one-hot target, summed over classes and averaged over labeled pixels.
template <class Real>
Tensor<Real> loss_seg(const Tensor<Real>& probs, const LabelGrid& weak) {
  if (probs.rank() != 3) throw ShapeError("loss_seg: P must be [K,H,W], got " + shape_str(probs.shape()));
  const std::size_t K = probs.extent(0), H = probs.extent(1), W = probs.extent(2);
  if (weak.height != H || weak.width != W) throw ShapeError("loss_seg: label grid does not match P");
  auto idx = weak.labeled_pixels();
  if (idx.empty()) throw std::invalid_argument("loss_seg: no labeled pixels");
  std::vector<std::uint8_t> labels;
  for (auto i : idx) {
    if (weak.labels[i] >= K) throw std::out_of_range("loss_seg: label exceeds class count");
    labels.push_back(weak.labels[i]);
  }
  std::vector<int> rows(K);
  for (std::size_t k = 0; k < K; ++k) rows[k] = int(k);
  const Real n = Real(idx.size());
  const auto Pl = index_select(reshape(probs, {K, H * W}), 1, std::move(idx));
  return detail::bce_sum(Pl, detail::one_hot_columns<Real>(rows, labels)) / n;
}

/// Soft binary CE between P (restricted to the mixture's classes) and G,
/// summed over components and averaged over all pixels.
template <class Real>
Tensor<Real> loss_self(const Tensor<Real>& probs, const GmmScores<Real>& g, bool stop_grad_G) {
  if (probs.rank() != 3 || g.scores.rank() != 3) throw ShapeError("loss_self: expected [K,H,W] inputs");
  const std::size_t K = probs.extent(0), H = probs.extent(1), W = probs.extent(2);
  if (g.scores.extent(1) != H || g.scores.extent(2) != W || g.scores.extent(0) != g.class_ids.size())
    throw ShapeError("loss_self: G " + shape_str(g.scores.shape()) + " does not align with P " + shape_str(probs.shape()));
  std::vector<std::size_t> channels;
  for (int c : g.class_ids) {
    if (c < 0 || std::size_t(c) >= K) throw ShapeError("loss_self: component class " + std::to_string(c) + " has no P channel");
    channels.push_back(std::size_t(c));
  }
  const auto Pc = index_select(probs, 0, std::move(channels));
  const auto target = stop_grad_G ? g.scores.detach() : g.scores;
  return detail::bce_sum(Pc, target) / Real(H * W);
}

/// Binary CE of G against one-hot weak labels over labeled pixels.
template <class Real>
Tensor<Real> loss_weak(const GmmScores<Real>& g, const LabelGrid& weak) {
  const std::size_t K = g.scores.extent(0), H = g.scores.extent(1), W = g.scores.extent(2);
  if (weak.height != H || weak.width != W) throw ShapeError("loss_weak: label grid does not match G");
  auto idx = weak.labeled_pixels();
  if (idx.empty()) throw std::invalid_argument("loss_weak: no labeled pixels");
  std::vector<std::uint8_t> labels;
  for (auto i : idx) {
    const int c = weak.labels[i];
    if (std::find(g.class_ids.begin(), g.class_ids.end(), c) == g.class_ids.end())
      throw std::invalid_argument("loss_weak: labeled class " + std::to_string(c) + " has no mixture component");
    labels.push_back(weak.labels[i]);
  }
  const Real n = Real(idx.size());
  const auto Gl = index_select(reshape(g.scores, {K, H * W}), 1, std::move(idx));
  return detail::bce_sum(Gl, detail::one_hot_columns<Real>(g.class_ids, labels)) / n;
}

/// Center-separation contrast: 2/(K(K+1)) * sum over unordered pairs of
/// exp(-d^2(mu_i, mu_j)). Zero for fewer than two components.
template <class Real>
Tensor<Real> loss_con_centers(const GmmParams<Real>& params) {
  const std::size_t K = params.size();
  if (K < 2) return Tensor<Real>::scalar(Real(0));
  std::vector<Tensor<Real>> terms;
  for (std::size_t i = 0; i < K; ++i)
    for (std::size_t j = i + 1; j < K; ++j) {
      const auto d2 = mean(square(sub(params.components[i].mu, params.components[j].mu)), {0});
      terms.push_back(exp(neg(d2)));
    }
  return sum_all(stack(terms)) * Real(2.0 / double(K * (K + 1)));
}

/// Pixel-to-center contrast over (assigned pixel, component) pairs:
/// mean of 1 - exp(-d^2) on positive pairs plus mean of exp(-d^2) on negative
/// pairs. A term with no pairs contributes 0.
template <class Real>
Tensor<Real> loss_con_pixel(const Tensor<Real>& features, const LabelGrid& assignment, const GmmParams<Real>& params) {
  detail::check_features(features);
  if (params.empty()) throw std::invalid_argument("loss_con_pixel: empty mixture");
  const std::size_t C = features.extent(0), H = features.extent(1), W = features.extent(2);
  if (assignment.height != H || assignment.width != W) throw ShapeError("loss_con_pixel: assignment does not match features");
  auto idx = assignment.labeled_pixels();
  if (idx.empty()) throw std::invalid_argument("loss_con_pixel: no assigned pixels");
  std::vector<std::uint8_t> labels;
  for (auto i : idx) labels.push_back(assignment.labels[i]);
  const auto X = index_select(reshape(features, {C, H * W}), 1, std::move(idx));

  const auto ids = params.class_ids();
  const auto pos_mask = detail::one_hot_columns<Real>(ids, labels);  // [K,n]
  std::size_t n_pos = 0;
  for (auto v : pos_mask.data()) n_pos += v > 0 ? 1 : 0;
  const std::size_t n_neg = pos_mask.size() - n_pos;

  std::vector<Tensor<Real>> rows;
  for (const auto& comp : params.components) rows.push_back(exp(neg(detail::sq_dist(X, comp.mu))));
  const auto E = stack(rows);  // [K,n]
  const auto one = Tensor<Real>::scalar(Real(1));
  Tensor<Real> total = Tensor<Real>::scalar(Real(0));
  if (n_pos) total = add(total, sum_all(mul(pos_mask, sub(one, E))) / Real(n_pos));
  if (n_neg) total = add(total, sum_all(mul(sub(one, pos_mask), E)) / Real(n_neg));
  return total;
}

/// Multi-label binary CE on sigmoid class scores, averaged over foreground classes.
template <class Real>
Tensor<Real> loss_cls(const Tensor<Real>& class_scores, const ClassPresence& presence) {
  const std::size_t F = class_scores.size();
  if (presence.class_count() != F + 1)
    throw ShapeError("loss_cls: presence covers " + std::to_string(presence.class_count()) + " classes, scores have " +
                     std::to_string(F) + " foreground entries");
  std::vector<Real> t(F);
  for (std::size_t k = 0; k < F; ++k) t[k] = presence.contains(int(k) + 1) ? Real(1) : Real(0);
  const auto s = sigmoid(reshape(class_scores, {F}));
  return detail::bce_sum(s, Tensor<Real>::from({F}, std::move(t))) / Real(F);
}

template <class Real>
struct LossParts {
  Tensor<Real> l_seg, l_self, l_weak, l_con, l_cls;  // undefined -> 0
};

/// L = lambda_seg L_seg + lambda_G (lambda_s L_self + lambda_w L_weak + lambda_c L_con)
///     [+ lambda_cls L_cls in image-level mode].
template <class Real>
LossBreakdown<Real> total_loss(const LossParts<Real>& parts, const LossWeights& w, bool image_level_mode) {
  w.validate();
  auto or_zero = [](const Tensor<Real>& t) { return t.defined() ? t : Tensor<Real>::scalar(Real(0)); };
  LossBreakdown<Real> b{or_zero(parts.l_seg), or_zero(parts.l_self), or_zero(parts.l_weak),
                        or_zero(parts.l_con), or_zero(parts.l_cls), {}};
  auto scaled = [](const Tensor<Real>& t, double k) { return t * Real(k); };
  const auto l_gmm = add(add(scaled(b.l_self, w.lambda_s), scaled(b.l_weak, w.lambda_w)), scaled(b.l_con, w.lambda_c));
  b.l_total = add(scaled(b.l_seg, w.lambda_seg), scaled(l_gmm, w.lambda_G));
  if (image_level_mode) b.l_total = add(b.l_total, scaled(b.l_cls, w.lambda_cls));
  return b;
}

}  // namespace agmm
