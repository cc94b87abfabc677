#include <gtest/gtest.h>

#include <cmath>

#include "agmm/gmm/agmm.hpp"
#include "agmm/loss/objectives.hpp"
#include "agmm/numeric/gradcheck.hpp"
#include "agmm/numeric/rng.hpp"
#include "agmm/train/trainer.hpp"
#include "agmm/verify/suites.hpp"

using namespace agmm;
using T = Tensor<double>;

namespace {

T random_probs(std::uint64_t seed, std::size_t K, std::size_t H, std::size_t W) {
  Rng rng(seed);
  std::vector<double> v(K * H * W);
  for (auto& x : v) x = rng.uniform(0.05, 0.95);
  return T::from({K, H, W}, std::move(v));
}

void expect_suite_passes(const std::string& name) {
  const auto r = verify::run_suite(name);
  ASSERT_FALSE(r.checks.empty());
  for (const auto& c : r.checks) EXPECT_TRUE(c.pass()) << verify::format_check(r.suite, c);
}

}  // namespace

TEST(LossSeg, OneHotIsZeroAndRejectsEmpty) {
  LabelGrid w(1, 2);
  w.labels = {1, kIgnore};
  const auto P = T::from({2, 1, 2}, {0, 0.5, 1, 0.5});
  EXPECT_LT(loss_seg(P, w).item(), 1e-10);
  EXPECT_THROW(loss_seg(P, LabelGrid(1, 2)), std::invalid_argument);
}

TEST(LossSelf, IdentityTargetGivesEntropyAndZeroGradient) {
  auto P = random_probs(1, 3, 4, 4);
  P.set_requires_grad(true);
  const GmmScores<double> G{P.detach(), {0, 1, 2}};
  const auto l = loss_self(P, G, true);
  double entropy = 0;
  for (auto g : G.scores.data()) entropy -= g * std::log(g) + (1 - g) * std::log(1 - g);
  EXPECT_NEAR(l.item(), entropy / 16.0, 1e-12);
  backward(l);
  for (auto g : P.grad()) ASSERT_NEAR(g, 0.0, 1e-12);
}

TEST(LossSelf, StopGradientBlocksFlowIntoG) {
  auto P = random_probs(2, 2, 3, 3);
  auto Gs = random_probs(3, 2, 3, 3);
  Gs.set_requires_grad(true);
  backward(loss_self(P, GmmScores<double>{Gs, {0, 1}}, true));
  EXPECT_FALSE(Gs.has_grad() && std::any_of(Gs.grad().begin(), Gs.grad().end(), [](double g) { return g != 0; }));
  backward(loss_self(P, GmmScores<double>{Gs, {0, 1}}, false));
  ASSERT_TRUE(Gs.has_grad());
  EXPECT_TRUE(std::any_of(Gs.grad().begin(), Gs.grad().end(), [](double g) { return g != 0; }));
}

TEST(LossSelf, SelectsChannelsByClassAndRejectsMisaligned) {
  const auto P = random_probs(4, 4, 2, 2);
  const auto G = random_probs(5, 2, 2, 2);
  const auto a = loss_self(P, GmmScores<double>{G, {1, 3}}, true).item();
  std::vector<double> sub;
  for (std::size_t k : {1u, 3u})
    for (std::size_t i = 0; i < 4; ++i) sub.push_back(P.data()[k * 4 + i]);
  const auto b = loss_self(T::from({2, 2, 2}, sub), GmmScores<double>{G, {0, 1}}, true).item();
  EXPECT_DOUBLE_EQ(a, b);
  EXPECT_THROW(loss_self(P, GmmScores<double>{G, {1, 7}}, true), ShapeError);
  EXPECT_THROW(loss_self(P, GmmScores<double>{G, {1}}, true), ShapeError);
}

TEST(LossWeak, PerfectScoresVanishAndMissingComponentRejected) {
  LabelGrid w(1, 2);
  w.labels = {0, 2};
  const GmmScores<double> G{T::from({2, 1, 2}, {1, 0, 0, 1}), {0, 2}};
  EXPECT_LT(loss_weak(G, w).item(), 1e-10);
  w.labels[1] = 1;
  EXPECT_THROW(loss_weak(G, w), std::invalid_argument);
}

TEST(LossCon, CentersFarApartVanishAndSingleComponentIsZero) {
  GmmParams<double> p;
  p.components.push_back({0, T::from({2}, {0, 0}), T::scalar(1), 1});
  EXPECT_EQ(loss_con_centers(p).item(), 0.0);
  p.components.push_back({1, T::from({2}, {100, -100}), T::scalar(1), 1});
  EXPECT_LT(loss_con_centers(p).item(), 1e-300);
}

TEST(LossCon, PixelsOnOwnMeanFarFromOthersVanish) {
  GmmParams<double> p;
  p.components.push_back({0, T::from({1}, {0}), T::scalar(1), 1});
  p.components.push_back({1, T::from({1}, {50}), T::scalar(1), 1});
  LabelGrid a(1, 3);
  a.labels = {0, 1, kIgnore};
  EXPECT_LT(loss_con_pixel(T::from({1, 1, 3}, {0, 50, 7}), a, p).item(), 1e-12);
}

TEST(LossCls, ConfidentCorrectScoresVanish) {
  ClassPresence pres(3);
  pres.set(2);
  EXPECT_LT(loss_cls(T::from({2}, {-60, 60}), pres).item(), 1e-12);
  EXPECT_THROW(loss_cls(T::from({3}, {0, 0, 0}), pres), ShapeError);
}

TEST(TotalLoss, ZeroWeightsAndDefaults) {
  LossParts<double> parts{T::scalar(0.7), T::scalar(0.2), T::scalar(0.4), T::scalar(0.1), T::scalar(0.9)};
  LossWeights zero;
  zero.lambda_seg = zero.lambda_G = zero.lambda_s = zero.lambda_w = zero.lambda_c = zero.lambda_cls = 0;
  EXPECT_EQ(total_loss(parts, zero, true).l_total.item(), 0.0);
  EXPECT_NEAR(total_loss(parts, LossWeights{}, false).l_total.item(), 0.7 + 0.2 + 0.4 + 0.1, 1e-15);
  EXPECT_NEAR(total_loss(parts, LossWeights{}, true).l_total.item(),
              0.7 + 0.2 + 0.4 + 0.1 + LossWeights{}.lambda_cls * 0.9, 1e-15);
}

TEST(NormalizedTarget, SumsToOneAndKeepsArgmax) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto raw = random_probs(seed, 3, 5, 5);
    const GmmScores<double> g{raw, {0, 2, 3}};
    const auto n = normalize_scores(g);
    EXPECT_EQ(n.class_ids, g.class_ids);
    for (std::size_t i = 0; i < 25; ++i) {
      double s = 0;
      for (std::size_t k = 0; k < 3; ++k) s += n.scores.data()[k * 25 + i];
      ASSERT_NEAR(s, 1.0, 1e-12);
    }
    EXPECT_EQ(assign_hard(n, 0.0).labels, assign_hard(g, 0.0).labels);
  }
}

TEST(NormalizedTarget, UnderflowedScoresGiveUniformTargetAndFiniteGradient) {
  auto s = Tensor<float>::from({2, 1, 1}, {0.0f, 1e-38f});
  s.set_requires_grad(true);
  const auto n = normalize_scores(GmmScores<float>{s, {0, 1}});
  EXPECT_NEAR(n.scores.data()[0], 0.5f, 1e-6f);
  backward(sum_all(mul(n.scores, Tensor<float>::from({2, 1, 1}, {1.0f, -1.0f}))));
  for (auto g : s.grad()) ASSERT_TRUE(std::isfinite(g));
}

TEST(Suites, LossOracles) { expect_suite_passes("loss"); }
TEST(Suites, AnalyticAnchors) { expect_suite_passes("anchors"); }
TEST(Suites, GradientIntegrity) { expect_suite_passes("grad"); }
