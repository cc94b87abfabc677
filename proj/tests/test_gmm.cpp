#include <gtest/gtest.h>

#include <cmath>

#include "agmm/gmm/agmm.hpp"
#include "agmm/numeric/rng.hpp"
#include "agmm/verify/suites.hpp"

using namespace agmm;
using T = Tensor<double>;

namespace {

T random_features(std::uint64_t seed, std::size_t C, std::size_t H, std::size_t W, double scale = 1.0) {
  Rng rng(seed);
  std::vector<double> v(C * H * W);
  for (auto& x : v) x = scale * rng.normal();
  return T::from({C, H, W}, std::move(v));
}

LabelGrid random_labels(std::uint64_t seed, std::size_t H, std::size_t W, int K, double ignore_rate = 0.3) {
  Rng rng(seed);
  LabelGrid g(H, W);
  for (auto& l : g.labels) l = rng.uniform(0, 1) < ignore_rate ? kIgnore : std::uint8_t(rng.below(std::uint64_t(K)));
  return g;
}

void expect_suite_passes(const verify::SuiteReport& r, const std::string& only = "") {
  ASSERT_FALSE(r.checks.empty());
  for (const auto& c : r.checks)
    if (only.empty() || c.name == only) EXPECT_TRUE(c.pass()) << verify::format_check(r.suite, c);
}

}  // namespace

TEST(EstimateParams, ConstantFeaturesHitSigmaFloor) {
  LabelGrid a(2, 2, 1);
  const auto F = T::from({2, 2, 2}, {0.3, 0.3, 0.3, 0.3, -1, -1, -1, -1});
  const auto p = estimate_params(F, a);
  ASSERT_EQ(p.size(), 1u);
  EXPECT_EQ(p.components[0].class_id, 1);
  EXPECT_DOUBLE_EQ(p.components[0].mu.data()[0], 0.3);
  EXPECT_DOUBLE_EQ(p.components[0].mu.data()[1], -1.0);
  EXPECT_DOUBLE_EQ(p.components[0].sigma.item(), kSigmaFloor);
}

TEST(EstimateParams, TwoPixelsHandComputed) {
  LabelGrid a(1, 2, 0);
  const auto p = estimate_params(T::from({1, 1, 2}, {0, 2}), a);
  EXPECT_DOUBLE_EQ(p.components[0].mu.item(), 1.0);
  EXPECT_DOUBLE_EQ(p.components[0].sigma.item(), 1.0);
  EXPECT_EQ(p.components[0].support_count, 2u);
}

TEST(EstimateParams, RejectsEmptyAndOmitsAbsentClasses) {
  EXPECT_THROW(estimate_params(T::zeros({1, 2, 2}), LabelGrid(2, 2)), std::invalid_argument);
  LabelGrid a(2, 2);
  a.labels = {3, kIgnore, 0, 3};
  const auto p = estimate_params(random_features(1, 2, 2, 2), a);
  EXPECT_EQ(p.class_ids(), (std::vector<int>{0, 3}));
}

TEST(Score, AnalyticValues) {
  LabelGrid a(1, 2, 0);
  const auto F = T::from({1, 1, 2}, {0, 2});
  const auto p = estimate_params(F, a);
  const auto at_mean = score(T::from({1, 1, 1}, {1.0}), p);
  EXPECT_EQ(at_mean.scores.item(), 1.0);
  const auto at_sigma = score(T::from({1, 1, 1}, {2.0}), p);
  EXPECT_NEAR(at_sigma.scores.item(), std::exp(-0.5), 1e-15);
}

TEST(Score, BoundedAndMonotoneInDistance) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto F = random_features(seed, 3, 6, 6);
    const auto p = estimate_params(F, random_labels(seed + 100, 6, 6, 3));
    const auto g = score(F, p);
    for (auto v : g.scores.data()) ASSERT_TRUE(v > 0.0 && v <= 1.0);
    const std::size_t P = 36;
    for (std::size_t k = 0; k < p.size(); ++k) {
      const auto mu = p.components[k].mu.data();
      auto d2 = [&](std::size_t i) {
        double s = 0;
        for (std::size_t c = 0; c < 3; ++c) s += std::pow(F.data()[c * P + i] - mu[c], 2);
        return s / 3;
      };
      for (std::size_t i = 0; i + 1 < P; ++i) {
        const double a = d2(i), b = d2(i + 1), ga = g.scores.data()[k * P + i], gb = g.scores.data()[k * P + i + 1];
        if (std::max(ga, gb) < 1e-200) continue;
        if (a < b - 1e-9) ASSERT_GT(ga, gb);
        if (b < a - 1e-9) ASSERT_GT(gb, ga);
      }
    }
  }
}

TEST(AssignHard, ZeroConfidenceLabelsEverythingAndTiesPickLowerClass) {
  GmmScores<double> g{T::from({2, 1, 3}, {0.9, 0.1, 0.4, 0.9, 0.7, 0.2}), {1, 2}};
  const auto a = assign_hard(g, 0.0);
  EXPECT_EQ(a.labels, (std::vector<std::uint8_t>{1, 2, 1}));
  EXPECT_EQ(a.source, PseudoSource::gmm_argmax);
  const auto b = assign_hard(g, 0.5);
  EXPECT_EQ(b.labels, (std::vector<std::uint8_t>{1, 2, kIgnore}));
}

TEST(AssignHard, InvariantUnderCommonFeatureScaling) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto F = random_features(seed, 3, 8, 8);
    const auto lab = random_labels(seed + 7, 8, 8, 3, 0.7);
    const auto base = assign_hard(score(F, estimate_params(F, lab)), 0.0);
    for (double s : {0.1, 3.0, 17.0}) {
      const auto Fs = F * s;
      EXPECT_EQ(assign_hard(score(Fs, estimate_params(Fs, lab)), 0.0).labels, base.labels) << "scale " << s;
    }
  }
}

TEST(LabelAssignment, SingleComponentAndOverlap) {
  LabelGrid a(1, 2, 0);
  const auto one = estimate_params(T::from({1, 1, 2}, {0, 2}), a);
  EXPECT_EQ(label_assignment_baseline(T::from({1, 1, 1}, {1.0}), one).labels[0], 0);

  LabelGrid b(1, 4);
  b.labels = {0, 0, 1, 1};
  const auto two = estimate_params(T::from({1, 1, 4}, {0, 2, 1, 3}), b);  // mu 1 and 2, sigma 1 each
  const auto out = label_assignment_baseline(T::from({1, 1, 3}, {1.5, 0.5, 2.5}), two);
  EXPECT_EQ(out.labels, (std::vector<std::uint8_t>{kIgnore, 0, 1}));
  EXPECT_EQ(out.source, PseudoSource::label_assignment);
}

TEST(Oem, PerImageAdaptivity) {
  const auto F = random_features(3, 2, 6, 6);
  LabelGrid weak(6, 6);
  weak.labels[0] = 2;
  weak.labels[7] = 5;
  const auto r = oem_refine(F, weak, 1, 0.5);
  EXPECT_EQ(r.params_old.class_ids(), (std::vector<int>{2, 5}));
  EXPECT_EQ(r.params_new.class_ids(), (std::vector<int>{2, 5}));
  EXPECT_EQ(r.g_new.class_ids, (std::vector<int>{2, 5}));
}

TEST(Oem, ClassLosingSupportKeepsItsComponent) {
  // Class 1's only weak pixel sits on class 0's mean; the tie goes to class 0
  // and class 1 has no pixel after the E-step.
  LabelGrid weak(1, 4);
  weak.labels = {0, 0, 1, kIgnore};
  const auto F = T::from({1, 1, 4}, {0.0, 0.2, 0.1, 0.15});
  const auto r = oem_refine(F, weak, 1, 0.0);
  ASSERT_EQ(std::count(r.assignment.labels.begin(), r.assignment.labels.end(), 1), 0);
  ASSERT_EQ(r.params_new.class_ids(), (std::vector<int>{0, 1}));
  EXPECT_EQ(r.params_new.find(1)->mu.item(), r.params_old.find(1)->mu.item());
  EXPECT_EQ(r.params_new.find(1)->sigma.item(), r.params_old.find(1)->sigma.item());
}

TEST(Oem, GradientReachesFeaturesThroughMStep) {
  auto F = random_features(9, 2, 4, 4);
  F.set_requires_grad(true);
  LabelGrid weak(4, 4);
  weak.labels[0] = 0;
  weak.labels[5] = 1;
  weak.labels[10] = 1;
  const auto r = oem_refine(F, weak, 1, 0.0);
  backward(sum_all(r.g_new.scores));
  ASSERT_TRUE(F.has_grad());
  double norm = 0;
  for (auto v : F.grad()) norm += v * v;
  EXPECT_GT(norm, 0.0);
}

TEST(Oem, RejectsBadIterationCount) {
  LabelGrid weak(2, 2);
  weak.labels[0] = 0;
  EXPECT_THROW(oem_refine(T::zeros({1, 2, 2}), weak, 0, 0.5), std::invalid_argument);
}

TEST(Suites, GmmOracles) { expect_suite_passes(verify::run_suite("gmm")); }

TEST(Suites, OemFixpointDescentAndSeparableRecovery) {
  const auto r = verify::run_suite("oem");
  expect_suite_passes(r, "fixpoint on reproduced full labels");
  expect_suite_passes(r, "M-step reduces mean error");
  expect_suite_passes(r, "separable clusters recovered in one step");
}
