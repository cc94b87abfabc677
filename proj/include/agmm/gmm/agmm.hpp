#pragma once

// Per-image class-conditional Gaussian mixtures over squeezed features.
//
// Components are built from labeled pixels: the mean is the average feature
// of the class's pixels, the spread is the RMS of the per-channel-mean squared
// distance to that mean. Scores drop the Gaussian normaliser so they live in
// (0, 1]. Every continuous quantity stays on the tape; only the discrete
// argmax assignment used by the online EM step is detached.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "agmm/numeric/container.hpp"
#include "agmm/numeric/ops.hpp"
#include "agmm/synth/scene.hpp"
#include "agmm/synth/weak_labels.hpp"

namespace agmm {

inline constexpr double kSigmaFloor = 1e-4;

template <class Real>
struct GmmComponent {
  int class_id = 0;
  Tensor<Real> mu;     // [C]
  Tensor<Real> sigma;  // scalar
  std::size_t support_count = 0;
};

template <class Real>
struct GmmParams {
  std::vector<GmmComponent<Real>> components;  // ascending class_id

  std::size_t size() const { return components.size(); }
  bool empty() const { return components.empty(); }
  std::vector<int> class_ids() const {
    std::vector<int> ids;
    for (const auto& c : components) ids.push_back(c.class_id);
    return ids;
  }
  const GmmComponent<Real>* find(int class_id) const {
    for (const auto& c : components)
      if (c.class_id == class_id) return &c;
    return nullptr;
  }
};

template <class Real>
struct GmmScores {
  Tensor<Real> scores;  // [K,H,W]
  std::vector<int> class_ids;
};

enum class PseudoSource { gmm_argmax, label_assignment, weak_copy };

struct PseudoLabelMap : LabelGrid {
  PseudoSource source = PseudoSource::gmm_argmax;

  PseudoLabelMap() = default;
  PseudoLabelMap(LabelGrid g, PseudoSource s) : LabelGrid(std::move(g)), source(s) {}
};

namespace detail {

template <class Real>
void check_features(const Tensor<Real>& f) {
  if (f.rank() != 3) throw ShapeError("features must be [C,H,W], got " + shape_str(f.shape()));
}

// d^2 of every column of `flat` [C,N] to `mu` [C], as the per-channel mean of
// squared differences. Result [N].
template <class Real>
Tensor<Real> sq_dist(const Tensor<Real>& flat, const Tensor<Real>& mu) {
  if (flat.rank() != 2 || mu.rank() != 1 || mu.extent(0) != flat.extent(0))
    throw ShapeError("sq_dist: features " + shape_str(flat.shape()) + " vs mean " + shape_str(mu.shape()));
  const std::size_t C = flat.extent(0), N = flat.extent(1);
  const auto x = flat.data(), m = mu.data();
  const Real inv_c = Real(1) / Real(C);
  std::vector<Real> d(N, Real(0));
  for (std::size_t c = 0; c < C; ++c) {
    const Real* xc = x.data() + c * N;
    for (std::size_t n = 0; n < N; ++n) {
      const Real diff = xc[n] - m[c];
      d[n] += diff * diff;
    }
  }
  for (auto& v : d) v *= inv_c;
  return make_result<Real>({N}, std::move(d), {flat, mu}, [C, N, inv_c](Node<Real>& self) {
    auto& f = *self.parents[0];
    auto& mu_n = *self.parents[1];
    // d(d_n)/d(x_cn) = 2 (x_cn - mu_c) / C = -d(d_n)/d(mu_c)
    if (f.requires_grad) f.ensure_grad();
    if (mu_n.requires_grad) mu_n.ensure_grad();
    for (std::size_t c = 0; c < C; ++c) {
      const Real* xc = f.data.data() + c * N;
      const Real mc = mu_n.data[c];
      Real acc = 0;
      for (std::size_t n = 0; n < N; ++n) {
        const Real g = Real(2) * inv_c * self.grad[n] * (xc[n] - mc);
        if (f.requires_grad) f.grad[c * N + n] += g;
        acc += g;
      }
      if (mu_n.requires_grad) mu_n.grad[c] -= acc;
    }
  });
}

template <class Real>
constexpr Real max_exponent() {
  return std::is_same_v<Real, float> ? Real(80) : Real(600);
}

}  // namespace detail

/// Mixture parameters from an assignment (weak or pseudo labels). Classes
/// without assigned pixels get no component.
template <class Real>
GmmParams<Real> estimate_params(const Tensor<Real>& features, const LabelGrid& assignment) {
  detail::check_features(features);
  const std::size_t C = features.extent(0), H = features.extent(1), W = features.extent(2);
  if (assignment.height != H || assignment.width != W)
    throw ShapeError("assignment " + std::to_string(assignment.height) + "x" + std::to_string(assignment.width) +
                     " does not match features " + shape_str(features.shape()));
  const auto flat = reshape(features, {C, H * W});
  GmmParams<Real> out;
  std::array<std::vector<std::size_t>, 256> members;
  for (std::size_t i = 0; i < assignment.labels.size(); ++i)
    if (assignment.labels[i] != kIgnore) members[assignment.labels[i]].push_back(i);
  const Real floor2 = Real(kSigmaFloor * kSigmaFloor);
  for (int c = 0; c < 255; ++c) {
    auto& idx = members[std::size_t(c)];
    if (idx.empty()) continue;
    const std::size_t n = idx.size();
    const auto X = index_select(flat, 1, std::move(idx));
    auto mu = mean(X, {1});
    const auto var = mean(detail::sq_dist(X, mu), {0});
    // max(sqrt(v), floor) == sqrt(max(v, floor^2)) for v >= 0.
    auto sigma = sqrt(clamp(var, floor2, std::numeric_limits<Real>::max()));
    out.components.push_back({c, std::move(mu), std::move(sigma), n});
  }
  if (out.empty()) throw std::invalid_argument("estimate_params: assignment has no labeled pixel");
  return out;
}

/// g_i(x) = exp(-d_i^2(x) / (2 sigma_i^2)) for every pixel and component.
template <class Real>
GmmScores<Real> score(const Tensor<Real>& features, const GmmParams<Real>& params) {
  detail::check_features(features);
  if (params.empty()) throw std::invalid_argument("score: empty mixture");
  const std::size_t C = features.extent(0), H = features.extent(1), W = features.extent(2);
  const auto flat = reshape(features, {C, H * W});
  std::vector<Tensor<Real>> maps;
  for (const auto& comp : params.components) {
    if (comp.mu.size() != C) throw ShapeError("component mean has " + std::to_string(comp.mu.size()) +
                                              " channels, features have " + std::to_string(C));
    const auto two_var = square(comp.sigma) * Real(2);
    const auto ratio = div(detail::sq_dist(flat, comp.mu), two_var);
    maps.push_back(exp(neg(clamp(ratio, Real(0), detail::max_exponent<Real>()))));
#ifdef AGMM_INJECT_PERTURBATION
    // Test-only negative control for the verification harness.
    maps.back() = maps.back() * Real(1 + 1e-7);
#endif
  }
  return {reshape(stack(maps), {params.size(), H, W}), params.class_ids()};
}

/// Per-pixel argmax (lowest index on ties); IGNORE below min_conf.
template <class Real>
PseudoLabelMap assign_hard(const GmmScores<Real>& g, double min_conf) {
  const std::size_t K = g.scores.extent(0), H = g.scores.extent(1), W = g.scores.extent(2), P = H * W;
  const auto v = g.scores.data();
  LabelGrid out(H, W);
  for (std::size_t i = 0; i < P; ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < K; ++k)
      if (v[k * P + i] > v[best * P + i]) best = k;
    if (double(v[best * P + i]) >= min_conf) out.labels[i] = std::uint8_t(g.class_ids[best]);
  }
  return PseudoLabelMap(std::move(out), PseudoSource::gmm_argmax);
}

template <class Real>
struct OemResult {
  GmmParams<Real> params_old;
  GmmScores<Real> g_old;
  PseudoLabelMap assignment;  // last M-step input
  GmmParams<Real> params_new;
  GmmScores<Real> g_new;
};

/// Re-estimates the mixture from its own hard assignment. Classes that lose
/// every pixel keep their previous component.
template <class Real>
GmmParams<Real> m_step(const Tensor<Real>& features, const GmmParams<Real>& prev, const PseudoLabelMap& assignment) {
  GmmParams<Real> next;
  if (assignment.labeled_count() > 0) next = estimate_params(features, assignment);
  for (const auto& comp : prev.components)
    if (!next.find(comp.class_id)) next.components.push_back(comp);
  std::sort(next.components.begin(), next.components.end(),
            [](const auto& a, const auto& b) { return a.class_id < b.class_id; });
  return next;
}

/// Soft variant of the M-step: every pixel contributes to every component
/// with its (detached) normalised score as weight. Components whose total
/// weight vanishes keep their previous parameters.
template <class Real>
GmmParams<Real> m_step_soft(const Tensor<Real>& features, const GmmParams<Real>& prev, const GmmScores<Real>& g) {
  detail::check_features(features);
  const std::size_t C = features.extent(0), P = features.extent(1) * features.extent(2), K = prev.size();
  const auto flat = reshape(features, {C, P});
  const auto v = g.scores.data();
  GmmParams<Real> next;
  const Real floor2 = Real(kSigmaFloor * kSigmaFloor);
  for (std::size_t k = 0; k < K; ++k) {
    std::vector<Real> w(P);
    double total = 0;
    std::size_t wins = 0;
    for (std::size_t i = 0; i < P; ++i) {
      double denom = 0;
      std::size_t best = 0;
      for (std::size_t j = 0; j < K; ++j) {
        denom += double(v[j * P + i]);
        if (v[j * P + i] > v[best * P + i]) best = j;
      }
      w[i] = denom > 0 ? Real(double(v[k * P + i]) / denom) : Real(0);
      total += double(w[i]);
      wins += best == k ? 1 : 0;
    }
    if (total < 1e-12) {
      next.components.push_back(prev.components[k]);
      continue;
    }
    const auto wt = Tensor<Real>::from({P}, std::move(w));
    const auto mu = sum(mul(flat, expand(wt, 0, C)), {1}) / Real(total);
    const auto var = sum(mul(detail::sq_dist(flat, mu), wt), {0}) / Real(total);
    auto sigma = sqrt(clamp(var, floor2, std::numeric_limits<Real>::max()));
    next.components.push_back({prev.components[k].class_id, mu, std::move(sigma), wins});
  }
  return next;
}

/// Online EM: an E-step seeded by the weak labels followed by `iters`
/// M-steps on the hard assignment of the current scores (or on soft
/// responsibilities when `soft` is set).
template <class Real>
OemResult<Real> oem_refine(const Tensor<Real>& features, const LabelGrid& weak, int iters, double min_conf,
                           bool soft = false) {
  if (iters < 1) throw std::invalid_argument("oem_refine: iters must be >= 1");
  OemResult<Real> r;
  r.params_old = estimate_params(features, weak);
  r.g_old = score(features, r.params_old);
  auto params = r.params_old;
  auto scores = r.g_old;
  for (int it = 0; it < iters; ++it) {
    r.assignment = assign_hard(scores, min_conf);
    params = soft ? m_step_soft(features, params, scores) : m_step(features, params, r.assignment);
    scores = score(features, params);
  }
  r.params_new = std::move(params);
  r.g_new = std::move(scores);
  return r;
}

/// Hard baseline: class i iff d_i < sigma_i and d_j > sigma_j for all j != i.
template <class Real>
PseudoLabelMap label_assignment_baseline(const Tensor<Real>& features, const GmmParams<Real>& params) {
  detail::check_features(features);
  if (params.empty()) throw std::invalid_argument("label_assignment_baseline: empty mixture");
  const std::size_t C = features.extent(0), H = features.extent(1), W = features.extent(2), P = H * W;
  const auto f = features.data();
  const std::size_t K = params.size();
  LabelGrid out(H, W);
  std::vector<double> d(K);
  for (std::size_t i = 0; i < P; ++i) {
    for (std::size_t k = 0; k < K; ++k) {
      const auto mu = params.components[k].mu.data();
      double s = 0;
      for (std::size_t c = 0; c < C; ++c) {
        const double diff = double(f[c * P + i]) - double(mu[c]);
        s += diff * diff;
      }
      d[k] = std::sqrt(s / double(C));
    }
    int hit = -1;
    for (std::size_t k = 0; k < K && hit != -2; ++k) {
      if (d[k] < double(params.components[k].sigma.item())) {
        hit = hit == -1 ? int(k) : -2;
      }
    }
    if (hit < 0) continue;
    bool others_outside = true;
    for (std::size_t k = 0; k < K; ++k)
      if (int(k) != hit && !(d[k] > double(params.components[k].sigma.item()))) others_outside = false;
    if (others_outside) out.labels[i] = std::uint8_t(params.components[std::size_t(hit)].class_id);
  }
  return PseudoLabelMap(std::move(out), PseudoSource::label_assignment);
}

/// Mean over assigned pixels of -log g_{label}(x).
template <class Real>
double assignment_nll(const GmmScores<Real>& g, const LabelGrid& assignment) {
  const std::size_t P = assignment.pixels();
  const auto v = g.scores.data();
  double total = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < P; ++i) {
    const auto lab = assignment.labels[i];
    if (lab == kIgnore) continue;
    const auto it = std::find(g.class_ids.begin(), g.class_ids.end(), int(lab));
    if (it == g.class_ids.end()) continue;
    const double s = std::max(double(v[std::size_t(it - g.class_ids.begin()) * P + i]), 1e-300);
    total -= std::log(s);
    ++n;
  }
  return n ? total / double(n) : 0.0;
}

/// Mixture with every tensor cut from the tape.
template <class Real>
GmmParams<Real> detach(const GmmParams<Real>& p) {
  GmmParams<Real> out;
  for (const auto& c : p.components) out.components.push_back({c.class_id, c.mu.detach(), c.sigma.detach(), c.support_count});
  return out;
}

template <class Real>
GmmScores<Real> detach(const GmmScores<Real>& g) {
  return {g.scores.detach(), g.class_ids};
}

/// Writes mu of every component as "<stem>.mu<k>.agmt" plus a text manifest
/// "class_id sigma support_count" per line.
template <class Real>
void save_gmm(const std::filesystem::path& dir, const std::string& stem, const GmmParams<Real>& p) {
  std::filesystem::create_directories(dir);
  std::ofstream man(dir / (stem + ".gmm.txt"));
  if (!man) throw std::runtime_error("cannot write GMM manifest in " + dir.string());
  man.precision(17);
  for (std::size_t k = 0; k < p.size(); ++k) {
    const auto& c = p.components[k];
    save_tensor((dir / (stem + ".mu" + std::to_string(k) + ".agmt")).string(), c.mu);
    man << c.class_id << ' ' << double(c.sigma.item()) << ' ' << c.support_count << '\n';
  }
}

}  // namespace agmm
