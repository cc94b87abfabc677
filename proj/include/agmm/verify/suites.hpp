#pragma once

// Verification suites: implementation vs brute-force oracles, analytic
// anchors, finite-difference gradient checks and online-EM behaviour.
//
// Each suite returns one Check per property. A check records the worst
// deviation seen, how many instances failed and the seed of the first
// failure, so a breach can be replayed in isolation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <deque>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "agmm/gmm/agmm.hpp"
#include "agmm/loss/objectives.hpp"
#include "agmm/model/seg_model.hpp"
#include "agmm/numeric/conv.hpp"
#include "agmm/numeric/gradcheck.hpp"
#include "agmm/numeric/rng.hpp"
#include "agmm/train/trainer.hpp"
#include "agmm/verify/oracles.hpp"

namespace agmm::verify {

struct Check {
  std::string name;
  double worst = 0.0;
  double tolerance = 0.0;
  std::size_t instances = 0;
  std::size_t failures = 0;
  std::size_t allowed_failures = 0;
  std::optional<std::uint64_t> first_failing_seed;

  bool pass() const { return instances > 0 && failures <= allowed_failures; }

  /// Records one instance whose deviation must not exceed the tolerance.
  void record(double deviation, std::uint64_t seed) {
    ++instances;
    if (std::isnan(deviation)) deviation = INFINITY;
    worst = std::max(worst, deviation);
    if (deviation > tolerance) fail(seed);
  }
  /// Records one pass/fail trial.
  void record_trial(bool ok, std::uint64_t seed) {
    ++instances;
    if (!ok) fail(seed);
  }

 private:
  void fail(std::uint64_t seed) {
    ++failures;
    if (!first_failing_seed) first_failing_seed = seed;
  }
};

struct SuiteReport {
  std::string suite;
  std::deque<Check> checks;  // add() hands out references

  bool pass() const {
    return !checks.empty() && std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.pass(); });
  }
  Check& add(std::string name, double tol, std::size_t allowed_failures = 0) {
    checks.push_back({std::move(name), 0.0, tol, 0, 0, allowed_failures, std::nullopt});
    return checks.back();
  }
};

inline std::string format_check(const std::string& suite, const Check& c) {
  char buf[320];
  std::snprintf(buf, sizeof buf, "%-6s %-8s %-34s worst=%.3e tol=%.1e failures=%zu/%zu (allowed %zu)",
                c.pass() ? "PASS" : "FAIL", suite.c_str(), c.name.c_str(), c.worst, c.tolerance, c.failures,
                c.instances, c.allowed_failures);
  std::string s = buf;
  if (c.first_failing_seed) s += " first failing seed " + std::to_string(*c.first_failing_seed);
  return s;
}

namespace detail {

using T = Tensor<double>;

inline std::vector<double> vec(const T& t) { return {t.data().begin(), t.data().end()}; }

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return INFINITY;
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double rel_diff(double a, double b) { return std::abs(a - b) / std::max(1.0, std::abs(b)); }

inline T random_tensor(Rng& rng, Shape s, double lo, double hi) {
  std::vector<double> v(numel(s));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return T::from(std::move(s), std::move(v));
}

/// Small clustered feature map with a partial labelling over sparse class ids.
struct GmmInstance {
  std::size_t C = 0, H = 0, W = 0, class_pool = 5;
  T features;
  LabelGrid labels;
};

inline GmmInstance random_gmm_instance(std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x6A11));
  GmmInstance in;
  in.C = 1 + rng.below(4);
  in.H = 2 + rng.below(7);
  in.W = 2 + rng.below(7);
  const std::size_t K = 1 + rng.below(4), P = in.H * in.W;
  std::vector<int> pool{0, 1, 2, 3, 4};
  rng.shuffle(pool);
  std::vector<int> ids(pool.begin(), pool.begin() + std::ptrdiff_t(K));
  std::vector<std::vector<double>> centers(K, std::vector<double>(in.C));
  for (auto& c : centers)
    for (auto& v : c) v = 2.0 * rng.normal();
  const double spread = rng.uniform(0.2, 1.2);
  std::vector<double> f(in.C * P);
  in.labels = LabelGrid(in.H, in.W);
  for (std::size_t p = 0; p < P; ++p) {
    const std::size_t k = rng.below(K);
    for (std::size_t c = 0; c < in.C; ++c) f[c * P + p] = centers[k][c] + spread * rng.normal();
    if (rng.uniform() < 0.6) in.labels.labels[p] = std::uint8_t(ids[k]);
  }
  if (in.labels.labeled_count() == 0) in.labels.labels[rng.below(P)] = std::uint8_t(ids[0]);
  in.features = T::from({in.C, in.H, in.W}, std::move(f));
  return in;
}

inline std::vector<oracle::Component> to_oracle(const GmmParams<double>& p) {
  std::vector<oracle::Component> out;
  for (const auto& c : p.components) out.push_back({c.class_id, vec(c.mu), c.sigma.item(), c.support_count});
  return out;
}

inline T random_probs(Rng& rng, std::size_t K, std::size_t H, std::size_t W) {
  NoGradGuard ng;
  return softmax(random_tensor(rng, {K, H, W}, -3.0, 3.0), 0);
}

// FNV-1a over a byte range, chained.
inline std::uint64_t fnv(std::uint64_t h, const void* data, std::size_t n) {
  const auto* b = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= b[i];
    h *= 0x100000001B3ull;
  }
  return h;
}
inline std::uint64_t fnv(std::uint64_t h, const LabelGrid& g) { return fnv(h, g.labels.data(), g.labels.size()); }

/// Tiny model and 16x16 scene for gradient checks.
template <class Real>
struct GradFixture {
  ModelParams<Real> model;
  Scene scene;
  Tensor<Real> image;
  WeakLabelMap weak;
  ClassPresence presence;
};

template <class Real>
GradFixture<Real> grad_fixture(std::uint64_t seed) {
  SceneSpec spec;
  spec.height = spec.width = 16;
  spec.class_count = 3;
  spec.n_shapes = 2;
  ModelShape shape;
  shape.backbone_widths = {4, 4};
  shape.gmm_channels = 3;
  shape.class_count = 3;
  GradFixture<Real> fx{init_model<Real>(shape, mix_seed(seed, 0x6AD)), gen_scene(spec, mix_seed(seed, 0x5CE)), {}, {},
                       ClassPresence{}};
  fx.image = fx.scene.template image_as<Real>();
  fx.weak = derive_points(fx.scene, 2, mix_seed(seed, 0xC11C));
  fx.presence = derive_image_level(fx.scene);
  return fx;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d vs the nested-loop oracle

inline SuiteReport conv_suite(std::size_t instances = 100, std::uint64_t base_seed = 0) {
  using namespace detail;
  SuiteReport r{"conv", {}};
  auto& fwd = r.add("conv2d forward vs loop oracle", 1e-10);
  for (std::size_t i = 0; i < instances; ++i) {
    const std::uint64_t seed = base_seed + i;
    Rng rng(mix_seed(seed, 0xC0));
    const std::size_t N = 1 + rng.below(2), C = 1 + rng.below(4), H = 1 + rng.below(8), W = 1 + rng.below(8);
    const std::size_t pad = rng.below(2), stride = 1 + rng.below(2);
    const std::size_t kh = 1 + rng.below(std::min<std::size_t>(H + 2 * pad, 4));
    const std::size_t kw = 1 + rng.below(std::min<std::size_t>(W + 2 * pad, 4));
    const std::size_t Co = 1 + rng.below(4);
    const auto in = random_tensor(rng, {N, C, H, W}, -1, 1);
    const auto k = random_tensor(rng, {Co, C, kh, kw}, -1, 1);
    const auto b = random_tensor(rng, {Co}, -1, 1);
    const auto out = conv2d(in, k, b, stride, pad);
    const auto ref = oracle::conv2d(vec(in), N, C, H, W, vec(k), Co, kh, kw, vec(b), stride, pad);
    fwd.record(max_abs_diff(vec(out), ref), seed);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Mixture operations vs oracles

inline SuiteReport gmm_suite(std::size_t instances = 100, std::uint64_t base_seed = 0) {
  using namespace detail;
  SuiteReport r{"gmm", {}};
  auto& est = r.add("estimate_params vs oracle", 1e-10);
  auto& sc = r.add("score vs oracle", 1e-10);
  auto& range = r.add("scores within (0,1]", 0.0);
  auto& hard = r.add("assign_hard vs oracle (mismatches)", 0.0);
  auto& la = r.add("label_assignment vs oracle (mismatches)", 0.0);
  for (std::size_t i = 0; i < instances; ++i) {
    const std::uint64_t seed = base_seed + i;
    const auto in = random_gmm_instance(seed);
    const std::size_t P = in.H * in.W;
    const auto f = vec(in.features);

    const auto params = estimate_params(in.features, in.labels);
    const auto ref = oracle::gmm_params(f, in.C, P, in.labels.labels, kSigmaFloor);
    double dev = params.size() == ref.size() ? 0.0 : INFINITY;
    for (std::size_t k = 0; k < std::min(params.size(), ref.size()); ++k) {
      const auto& a = params.components[k];
      const auto& b = ref[k];
      if (a.class_id != b.class_id || a.support_count != b.support) dev = INFINITY;
      dev = std::max({dev, max_abs_diff(vec(a.mu), b.mu), std::abs(a.sigma.item() - b.sigma)});
    }
    est.record(dev, seed);

    const auto g = score(in.features, params);
    const auto g_ref = oracle::gmm_scores(f, in.C, P, ref);
    sc.record(max_abs_diff(vec(g.scores), g_ref), seed);
    bool in_range = true;
    for (auto v : g.scores.data()) in_range = in_range && v > 0.0 && v <= 1.0;
    range.record_trial(in_range, seed);

    const auto ids = params.class_ids();
    const auto a = assign_hard(g, 0.5);
    const auto a_ref = oracle::argmax_labels(g_ref, ids.size(), P, ids, 0.5);
    std::size_t miss = 0;
    for (std::size_t p = 0; p < P; ++p) miss += a.labels[p] != a_ref[p];
    hard.record(double(miss), seed);

    // Same parameters on both sides: pixels at d = sigma would otherwise flip
    // on last-bit differences between the two estimates.
    std::vector<oracle::Component> same;
    for (const auto& c : params.components)
      same.push_back({c.class_id, vec(c.mu), double(c.sigma.item()), c.support_count});
    const auto l = label_assignment_baseline(in.features, params);
    const auto l_ref = oracle::label_assignment(f, in.C, P, same);
    miss = 0;
    for (std::size_t p = 0; p < P; ++p) miss += l.labels[p] != l_ref[p];
    la.record(double(miss), seed);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Losses vs oracles

inline SuiteReport loss_suite(std::size_t instances = 100, std::uint64_t base_seed = 0) {
  using namespace detail;
  SuiteReport r{"loss", {}};
  auto& seg = r.add("loss_seg vs oracle", 1e-10);
  auto& self = r.add("loss_self vs oracle", 1e-10);
  auto& weak = r.add("loss_weak vs oracle", 1e-10);
  auto& cen = r.add("loss_con_centers vs oracle", 1e-10);
  auto& pix = r.add("loss_con_pixel vs oracle", 1e-10);
  auto& cls = r.add("loss_cls vs oracle", 1e-10);
  auto& tot = r.add("total_loss weighted sum", 1e-12);
  for (std::size_t i = 0; i < instances; ++i) {
    const std::uint64_t seed = base_seed + i;
    const auto in = random_gmm_instance(seed);
    Rng rng(mix_seed(seed, 0x1055));
    const std::size_t P = in.H * in.W, Kt = in.class_pool;
    const auto f = vec(in.features);
    const auto params = estimate_params(in.features, in.labels);
    const auto g = score(in.features, params);
    const auto ids = params.class_ids();
    const auto probs = random_probs(rng, Kt, in.H, in.W);

    seg.record(rel_diff(loss_seg(probs, in.labels).item(), oracle::loss_seg(vec(probs), Kt, P, in.labels.labels)), seed);
    self.record(rel_diff(loss_self(probs, g, false).item(), oracle::loss_self(vec(probs), P, vec(g.scores), ids)), seed);
    weak.record(rel_diff(loss_weak(g, in.labels).item(), oracle::loss_weak(vec(g.scores), ids, P, in.labels.labels)),
                seed);
    const auto comps = to_oracle(params);
    cen.record(rel_diff(loss_con_centers(params).item(), oracle::loss_con_centers(comps)), seed);
    pix.record(rel_diff(loss_con_pixel(in.features, in.labels, params).item(),
                        oracle::loss_con_pixel(f, in.C, P, in.labels.labels, comps)),
               seed);

    const auto scores = random_tensor(rng, {Kt - 1}, -4, 4);
    ClassPresence pres(Kt);
    std::vector<bool> fg(Kt - 1);
    for (std::size_t k = 0; k + 1 < Kt; ++k)
      if (rng.uniform() < 0.5) {
        pres.set(int(k) + 1);
        fg[k] = true;
      }
    cls.record(rel_diff(loss_cls(scores, pres).item(), oracle::loss_cls(vec(scores), fg)), seed);

    LossWeights w;
    for (double* v : {&w.lambda_seg, &w.lambda_G, &w.lambda_s, &w.lambda_w, &w.lambda_c, &w.lambda_cls})
      *v = rng.uniform(0, 2);
    LossParts<double> parts;
    const double vals[5] = {rng.uniform(0, 3), rng.uniform(0, 3), rng.uniform(0, 3), rng.uniform(0, 2),
                            rng.uniform(0, 3)};
    parts.l_seg = T::scalar(vals[0]);
    parts.l_self = T::scalar(vals[1]);
    parts.l_weak = T::scalar(vals[2]);
    parts.l_con = T::scalar(vals[3]);
    parts.l_cls = T::scalar(vals[4]);
    const bool image_level = rng.uniform() < 0.5;
    const double expect = w.lambda_seg * vals[0] +
                          w.lambda_G * (w.lambda_s * vals[1] + w.lambda_w * vals[2] + w.lambda_c * vals[3]) +
                          (image_level ? w.lambda_cls * vals[4] : 0.0);
    tot.record(rel_diff(total_loss(parts, w, image_level).l_total.item(), expect), seed);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Closed-form values

inline SuiteReport anchor_suite() {
  using namespace detail;
  SuiteReport r{"anchors", {}};
  {
    // Two pixels [0] and [2] of one class: mu = 1, d^2 = 1 = sigma^2.
    auto& c = r.add("score at d^2 = sigma^2 is exp(-1/2)", 1e-12);
    const auto f = T::from({1, 1, 2}, {0.0, 2.0});
    LabelGrid lab(1, 2, 1);
    const auto p = estimate_params(f, lab);
    const auto g = score(f, p);
    double dev = std::max(std::abs(p.components[0].mu.item() - 1.0), std::abs(p.components[0].sigma.item() - 1.0));
    for (auto v : g.scores.data()) dev = std::max(dev, std::abs(v - std::exp(-0.5)));
    c.record(dev, 0);
  }
  {
    auto& c = r.add("score at d^2 = 0 is exactly 1", 0.0);
    const auto f = T::from({2, 1, 3}, {0.5, 0.5, 0.5, -1.0, -1.0, -1.0});
    const auto p = estimate_params(f, LabelGrid(1, 3, 0));
    double dev = std::abs(p.components[0].sigma.item() - kSigmaFloor);
    const auto g = score(f, p);
    for (auto v : g.scores.data()) dev = std::max(dev, std::abs(v - 1.0));
    c.record(dev, 0);
  }
  {
    auto& c = r.add("loss_weak single component at exp(-1/2)", 1e-9);
    LabelGrid lab(1, 1, 2);
    const GmmScores<double> g{T::from({1, 1, 1}, {std::exp(-0.5)}), {2}};
    c.record(std::abs(loss_weak(g, lab).item() - 0.5), 0);
  }
  {
    auto& c = r.add("loss_con_centers coincident pair is 1/3", 1e-12);
    GmmParams<double> p;
    p.components.push_back({0, T::from({3}, {0.3, -0.2, 1.0}), T::scalar(1.0), 1});
    p.components.push_back({1, T::from({3}, {0.3, -0.2, 1.0}), T::scalar(1.0), 1});
    c.record(std::abs(loss_con_centers(p).item() - 1.0 / 3.0), 0);
  }
  {
    auto& c = r.add("loss_con_pixel positive pair at ln 2 is 1/2", 1e-12);
    const double d = std::sqrt(std::log(2.0));
    const auto f = T::from({1, 1, 1}, {d});
    GmmParams<double> p;
    p.components.push_back({0, T::from({1}, {0.0}), T::scalar(1.0), 1});
    c.record(std::abs(loss_con_pixel(f, LabelGrid(1, 1, 0), p).item() - 0.5), 0);
  }
  {
    auto& c = r.add("loss_seg uniform binary P is 2 ln 2", 1e-12);
    const auto P = T::full({2, 2, 2}, 0.5);
    LabelGrid lab(2, 2);
    lab.labels = {0, kIgnore, 1, 1};
    c.record(std::abs(loss_seg(P, lab).item() - 2.0 * std::log(2.0)), 0);
  }
  {
    auto& c = r.add("loss_cls zero scores is ln 2", 1e-12);
    ClassPresence pres(4);
    pres.set(2);
    c.record(std::abs(loss_cls(T::zeros({3}), pres).item() - std::log(2.0)), 0);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checks through model + mixture

namespace detail {

inline TrainConfig grad_config(bool image_level) {
  TrainConfig cfg;
  cfg.modality = image_level ? Modality::image_level : Modality::point;
  return cfg;
}

/// Full per-image objective; seeds and the OEM assignment go into the signature.
template <class Real>
FdProbe<Real> full_objective_probe(const GradFixture<Real>& fx, const TrainConfig& cfg, bool image_level) {
  std::optional<WeakLabelMap> labels;
  if (!image_level) labels = fx.weak;
  auto obj = image_objective(cfg, fx.model, fx.image, labels, fx.presence, image_level);
  std::uint64_t h = fnv(0xCBF29CE484222325ull, obj.labels);
  if (obj.oem) h = fnv(h, obj.oem->assignment);
  return {obj.loss.l_total, h};
}

enum class Term { seg, self, self_sg, weak, con_pixel, con_centers, cls };

inline const char* term_name(Term t) {
  switch (t) {
    case Term::seg: return "loss_seg";
    case Term::self: return "loss_self";
    case Term::self_sg: return "loss_self (stop-grad G)";
    case Term::weak: return "loss_weak";
    case Term::con_pixel: return "loss_con_pixel";
    case Term::con_centers: return "loss_con_centers";
    case Term::cls: return "loss_cls";
  }
  return "?";
}

/// One loss term through the model with the OEM assignment held fixed.
/// `frozen_g` is the constant target of the stop-gradient variant.
template <class Real>
FdProbe<Real> frozen_term_probe(const GradFixture<Real>& fx, Term term, const LabelGrid& frozen,
                                const GmmScores<Real>& frozen_g) {
  const auto out = forward(fx.image, fx.model);
  const auto& F = out.features_gmm;
  const auto old = estimate_params(F, fx.weak);
  const auto params = m_step(F, old, PseudoLabelMap(frozen, PseudoSource::gmm_argmax));
  const auto g = score(F, params);
  Tensor<Real> loss;
  switch (term) {
    case Term::seg: loss = loss_seg(out.seg_probs, fx.weak); break;
    case Term::self: loss = loss_self(out.seg_probs, g, false); break;
    case Term::self_sg: loss = loss_self(out.seg_probs, frozen_g, true); break;
    case Term::weak: loss = loss_weak(g, fx.weak); break;
    case Term::con_pixel: loss = loss_con_pixel(F, fx.weak, params); break;
    case Term::con_centers: loss = loss_con_centers(params); break;
    case Term::cls: loss = loss_cls(out.class_scores, fx.presence); break;
  }
  return {loss, 0};
}

}  // namespace detail

/// Runs in extended precision: several parameters (the squeeze bias, for
/// one) have an exactly zero gradient because every mixture term is invariant
/// to a common shift of the features, and in 64-bit the central difference
/// there is pure rounding noise of order ulp(L)/eps, above the 1e-8 floor of
/// the relative error.
inline SuiteReport grad_suite(std::size_t seeds = 20, std::uint64_t base_seed = 0, double epsilon = 3e-6) {
  using namespace detail;
  using R = long double;
  SuiteReport r{"grad", {}};
  auto& full = r.add("full objective (weak-label mode)", 1e-3);
  auto& full_il = r.add("full objective (image-level mode)", 1e-3);
  const Term terms[] = {Term::seg, Term::self, Term::self_sg, Term::weak, Term::con_pixel, Term::con_centers, Term::cls};
  std::vector<Check*> per_term;
  for (auto t : terms) per_term.push_back(&r.add(std::string(term_name(t)) + " (frozen assignment)", 1e-4));

  for (std::size_t i = 0; i < seeds; ++i) {
    const std::uint64_t seed = base_seed + i;
    auto fx = grad_fixture<R>(seed);
    for (bool il : {false, true}) {
      const auto cfg = grad_config(il);
      const auto rep = finite_diff_report(
          [&](ParamSet<R>&) { return full_objective_probe(fx, cfg, il); }, fx.model.params, R(epsilon));
      (il ? full_il : full).record(rep.checked ? rep.max_relative_error : INFINITY, seed);
    }
    LabelGrid frozen;
    GmmScores<R> frozen_g;
    {
      NoGradGuard ng;
      const auto out = forward(fx.image, fx.model);
      const auto oem = oem_refine(out.features_gmm, fx.weak, 1, 0.5);
      frozen = oem.assignment;
      frozen_g = detach(oem.g_new);
    }
    for (std::size_t t = 0; t < std::size(terms); ++t) {
      const auto rep = finite_diff_report(
          [&](ParamSet<R>&) { return frozen_term_probe(fx, terms[t], frozen, frozen_g); }, fx.model.params,
          R(epsilon));
      per_term[t]->record(rep.checked ? rep.max_relative_error : INFINITY, seed);
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Online EM behaviour

namespace detail {

/// Features from 3 isotropic unit Gaussians with pairwise mean separation 4,
/// plus 2 weak pixels per class.
struct MixtureTrial {
  T features;
  LabelGrid truth, weak;
  std::vector<std::vector<double>> mu_true;
};

inline MixtureTrial mixture_trial(std::uint64_t seed, std::size_t C = 4, std::size_t side = 12) {
  Rng rng(mix_seed(seed, 0x0E3));
  MixtureTrial t;
  const std::size_t P = side * side;
  const double offset = 4.0 / std::sqrt(2.0);  // |e_i - e_j| * offset = 4
  t.mu_true.assign(3, std::vector<double>(C, 0.0));
  for (std::size_t k = 0; k < 3; ++k) t.mu_true[k][k] = offset;
  t.truth = LabelGrid(side, side);
  t.weak = LabelGrid(side, side);
  std::vector<double> f(C * P);
  std::vector<std::vector<std::size_t>> members(3);
  for (std::size_t p = 0; p < P; ++p) {
    const std::size_t k = p % 3;
    t.truth.labels[p] = std::uint8_t(k);
    members[k].push_back(p);
    for (std::size_t c = 0; c < C; ++c) f[c * P + p] = t.mu_true[k][c] + rng.normal();
  }
  for (auto& m : members) {
    rng.shuffle(m);
    t.weak.labels[m[0]] = t.truth.labels[m[0]];
    t.weak.labels[m[1]] = t.truth.labels[m[1]];
  }
  t.features = T::from({C, side, side}, std::move(f));
  return t;
}

inline double mean_error(const GmmParams<double>& p, const std::vector<std::vector<double>>& mu_true) {
  double e = 0;
  for (const auto& c : p.components) {
    const auto m = c.mu.data();
    double s = 0;
    for (std::size_t j = 0; j < m.size(); ++j) s += (m[j] - mu_true[std::size_t(c.class_id)][j]) * (m[j] - mu_true[std::size_t(c.class_id)][j]);
    e += std::sqrt(s);
  }
  return e;
}

}  // namespace detail

/// `with_nll` adds the assigned-pixel NLL check. It is off for `verify`: the
/// sigma update resets the per-pixel term to exactly 1/2, which the
/// min_conf-truncated E-step set usually sits below.
inline SuiteReport oem_suite(std::size_t trials = 100, std::uint64_t base_seed = 0, double min_conf = 0.5,
                             bool with_nll = false) {
  using namespace detail;
  SuiteReport r{"oem", {}};
  auto& fix = r.add("fixpoint on reproduced full labels", 1e-12);
  auto& err = r.add("M-step reduces mean error", 0.0, trials - (trials * 95 + 99) / 100);
  verify::Check* nll = with_nll ? &r.add("M-step does not raise assigned NLL", 0.0, trials - (trials * 90 + 99) / 100)
                                 : nullptr;
  auto& sep = r.add("separable clusters recovered in one step", 0.0);

  for (std::size_t i = 0; i < trials; ++i) {
    const std::uint64_t seed = base_seed + i;
    {
      // Fully labelled, well-separated clusters whose argmax reproduces the
      // labels; min_conf = 0 keeps every pixel assigned.
      const auto t = mixture_trial(seed, 4, 8);
      const std::size_t P = t.truth.pixels();
      std::vector<double> f(vec(t.features));
      for (std::size_t p = 0; p < P; ++p)
        for (std::size_t c = 0; c < 4; ++c) {
          const double mu = t.mu_true[t.truth.labels[p]][c];
          f[c * P + p] = 3.0 * mu + 0.3 * (f[c * P + p] - mu);
        }
      const auto F = T::from(t.features.shape(), std::move(f));
      const auto res = oem_refine(F, t.truth, 1, 0.0);
      if (res.assignment.labels != t.truth.labels) {
        fix.record(INFINITY, seed);
      } else {
        double dev = 0;
        for (std::size_t k = 0; k < res.params_old.size(); ++k) {
          const auto& a = res.params_old.components[k];
          const auto& b = res.params_new.components[k];
          dev = std::max({dev, max_abs_diff(vec(a.mu), vec(b.mu)), std::abs(a.sigma.item() - b.sigma.item())});
        }
        dev = std::max(dev, max_abs_diff(vec(res.g_old.scores), vec(res.g_new.scores)));
        fix.record(dev, seed);
      }
    }
    {
      const auto t = mixture_trial(seed);
      const auto res = oem_refine(t.features, t.weak, 1, min_conf);
      err.record_trial(mean_error(res.params_new, t.mu_true) < mean_error(res.params_old, t.mu_true), seed);
      if (nll)
        nll->record_trial(assignment_nll(res.g_new, res.assignment) <= assignment_nll(res.g_old, res.assignment),
                          seed);
    }
    {
      // Constant per-class features, one weak pixel per class.
      Rng rng(mix_seed(seed, 0x5E9));
      const std::size_t H = 6, W = 6, P = H * W, C = 3;
      std::vector<double> f(C * P);
      LabelGrid truth(H, W), weak(H, W);
      std::vector<std::vector<double>> centers(3, std::vector<double>(C));
      for (auto& c : centers)
        for (auto& v : c) v = rng.uniform(-3, 3);
      for (std::size_t p = 0; p < P; ++p) {
        const std::size_t k = p < 3 ? p : rng.below(3);
        truth.labels[p] = std::uint8_t(k);
        for (std::size_t c = 0; c < C; ++c) f[c * P + p] = centers[k][c];
      }
      for (std::size_t k = 0; k < 3; ++k) weak.labels[k] = std::uint8_t(k);
      const auto res = oem_refine(T::from({C, H, W}, std::move(f)), weak, 1, min_conf);
      sep.record_trial(assign_hard(res.g_new, 0.0).labels == truth.labels, seed);
    }
  }
  return r;
}

// ---------------------------------------------------------------------------

inline const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> names{"conv", "gmm", "loss", "anchors", "grad", "oem"};
  return names;
}

/// Runs one named suite. `instances` == 0 selects the suite's default count.
inline SuiteReport run_suite(const std::string& name, std::size_t instances = 0, std::uint64_t base_seed = 0) {
  auto n = [&](std::size_t def) { return instances ? instances : def; };
  if (name == "conv") return conv_suite(n(100), base_seed);
  if (name == "gmm") return gmm_suite(n(100), base_seed);
  if (name == "loss") return loss_suite(n(100), base_seed);
  if (name == "anchors") return anchor_suite();
  if (name == "grad") return grad_suite(n(20), base_seed);
  if (name == "oem") return oem_suite(n(100), base_seed);
  throw std::invalid_argument("unknown verify suite: " + name);
}

}  // namespace agmm::verify
