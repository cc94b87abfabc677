#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "agmm/numeric/container.hpp"
#include "agmm/numeric/conv.hpp"
#include "agmm/numeric/gradcheck.hpp"
#include "agmm/numeric/ops.hpp"
#include "agmm/numeric/rng.hpp"
#include "agmm/verify/oracles.hpp"

using namespace agmm;
using T = Tensor<double>;

namespace {

T random_tensor(Rng& rng, Shape s, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(numel(s));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return T::from(std::move(s), std::move(v));
}

std::vector<double> vec(std::span<const double> s) { return {s.begin(), s.end()}; }
std::vector<double> vec(const T& t) { return vec(t.data()); }

// Projects an arbitrary-shaped output onto fixed random weights so every
// input coordinate receives a gradient of order one.
T weighted_sum(const T& y, std::uint64_t seed) {
  Rng rng(seed);
  return sum_all(mul(y, random_tensor(rng, y.shape(), 0.5, 1.5)));
}

}  // namespace

TEST(Tensor, RejectsMismatchedShape) {
  EXPECT_THROW(T::from({2, 3}, std::vector<double>(5)), ShapeError);
  EXPECT_THROW(T::from({2, 0}, {}), ShapeError);
}

TEST(Elementwise, TrivialValues) {
  EXPECT_DOUBLE_EQ(exp(T::from({1}, {0.0})).at(0), 1.0);
  EXPECT_EQ(vec(relu(T::from({2}, {-1.0, 2.0}))), (std::vector<double>{0.0, 2.0}));
  EXPECT_DOUBLE_EQ(sigmoid(T::from({1}, {0.0})).at(0), 0.5);
  EXPECT_DOUBLE_EQ(elementwise(ElementOp::sqrt, T::from({1}, {9.0})).at(0), 3.0);
}

TEST(Elementwise, DomainViolationsRejectedUnlessClamped) {
  EXPECT_THROW(log(T::from({1}, {0.0})), DomainError);
  EXPECT_THROW(log(T::from({1}, {-2.0})), DomainError);
  EXPECT_THROW(agmm::sqrt(T::from({1}, {-1.0})), DomainError);
  EXPECT_DOUBLE_EQ(log(T::from({1}, {0.0}), 1e-12).at(0), std::log(1e-12));
}

TEST(Elementwise, ScalarBroadcastOnly) {
  auto a = T::from({2, 2}, {1, 2, 3, 4});
  auto s = T::scalar(2.0);
  EXPECT_EQ(vec(a * s), (std::vector<double>{2, 4, 6, 8}));
  EXPECT_EQ(vec(s - a), (std::vector<double>{1, 0, -1, -2}));
  EXPECT_THROW(add(a, T::from({2}, {1, 2})), ShapeError);
  EXPECT_THROW(elementwise(ElementOp::add, a), std::invalid_argument);
}

TEST(Reduce, TrivialValues) {
  EXPECT_EQ(vec(mean(T::from({2, 2}, {1, 3, 3, 5}), {0})), (std::vector<double>{2, 4}));
  auto s = sum(T::full({2, 3}, 1.0), {0, 1});
  EXPECT_EQ(s.rank(), 0u);
  EXPECT_DOUBLE_EQ(s.item(), 6.0);
  EXPECT_DOUBLE_EQ(reduce(ReduceOp::max_index, T::from({3}, {0.2, 0.9, 0.1}), {0}).item(), 1.0);
}

TEST(Reduce, MaxIndexTiesPickLowestAndDetach) {
  auto a = T::from({2, 3}, {0.5, 0.5, 0.1, 0.0, 0.7, 0.7});
  a.set_requires_grad(true);
  auto idx = reduce(ReduceOp::max_index, a, {1});
  EXPECT_EQ(vec(idx), (std::vector<double>{0, 1}));
  EXPECT_FALSE(idx.requires_grad());
}

TEST(Reduce, RejectsBadAxes) {
  auto a = T::full({2, 3}, 1.0);
  EXPECT_THROW(sum(a, {}), ShapeError);
  EXPECT_THROW(sum(a, {2}), ShapeError);
  EXPECT_THROW(sum(a, {0, 0}), ShapeError);
}

TEST(Backward, TrivialGradients) {
  auto p = T::from({1}, {3.0});
  p.set_requires_grad(true);
  backward(sum_all(square(p)));
  EXPECT_DOUBLE_EQ(p.grad()[0], 6.0);

  auto q = T::from({1}, {0.0});
  q.set_requires_grad(true);
  backward(sum_all(exp(q)));
  EXPECT_DOUBLE_EQ(q.grad()[0], 1.0);
}

TEST(Backward, RejectsNonScalarAndZeroesDisconnected) {
  ParamSet<double> ps;
  auto& a = ps.add("a", T::from({2}, {1, 2}));
  ps.add("b", T::from({1}, {5}));
  EXPECT_THROW(backward(square(a)), ShapeError);
  backward(sum_all(square(a)), ps);
  EXPECT_EQ(vec(ps.get("b").grad()), std::vector<double>{0.0});
}

TEST(Backward, TwoCallsWithoutZeroingDoubleTheGradient) {
  Rng rng(3);
  ParamSet<double> ps;
  auto& w = ps.add("w", random_tensor(rng, {4}));
  auto loss = sum_all(mul(exp(w), sigmoid(square(w))));
  backward(loss, ps);
  const auto once = vec(w.grad());
  backward(loss, ps);
  const auto twice = vec(w.grad());
  for (std::size_t i = 0; i < once.size(); ++i) EXPECT_EQ(twice[i], 2.0 * once[i]);
}

TEST(ParamSet, UniqueNamesAndStableOrder) {
  ParamSet<double> ps;
  ps.add("z", T::scalar(1));
  ps.add("a", T::scalar(2));
  EXPECT_THROW(ps.add("z", T::scalar(3)), std::invalid_argument);
  std::vector<std::string> names;
  for (auto& [n, t] : ps) names.push_back(n);
  EXPECT_EQ(names, (std::vector<std::string>{"z", "a"}));
}

TEST(NoGrad, SuppressesRecording) {
  auto p = T::from({1}, {1.0});
  p.set_requires_grad(true);
  NoGradGuard g;
  EXPECT_FALSE(exp(p).requires_grad());
}

// --- conv2d -------------------------------------------------------------

TEST(Conv2d, OnesSumToNine) {
  auto y = conv2d(T::full({1, 1, 3, 3}, 1.0), T::full({1, 1, 3, 3}, 1.0), T::zeros({1}), 1, 0);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_DOUBLE_EQ(y.item(), 9.0);
}

TEST(Conv2d, IdentityKernel) {
  Rng rng(5);
  auto x = random_tensor(rng, {2, 1, 5, 4});
  auto y = conv2d(x, T::full({1, 1, 1, 1}, 1.0), T{}, 1, 0);
  EXPECT_EQ(vec(y), vec(x));
}

TEST(Conv2d, ShapeMismatchNamesBothShapes) {
  try {
    conv2d(T::zeros({1, 3, 4, 4}), T::zeros({2, 2, 3, 3}), T{}, 1, 1);
    FAIL();
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[1,3,4,4]"), std::string::npos);
    EXPECT_NE(msg.find("[2,2,3,3]"), std::string::npos);
  }
}

TEST(Conv2d, MatchesNaiveLoopOracle) {
  Rng rng(11);
  auto x = random_tensor(rng, {2, 4, 8, 8});
  auto k = random_tensor(rng, {6, 4, 3, 3});
  auto b = random_tensor(rng, {6});
  auto y = conv2d(x, k, b, 1, 1);
  auto ref = oracle::conv2d(vec(x), 2, 4, 8, 8, vec(k), 6, 3, 3, vec(b), 1, 1);
  ASSERT_EQ(y.size(), ref.size());
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y.at(i), ref[i], 1e-10);
}

TEST(Conv2d, RandomShapesMatchOracle) {
  Rng rng(12);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t N = 1 + rng.below(2), C = 1 + rng.below(4), H = 1 + rng.below(8), W = 1 + rng.below(8);
    const std::size_t Co = 1 + rng.below(4), stride = 1 + rng.below(2), pad = rng.below(2);
    const std::size_t kh = 1 + rng.below(std::min<std::size_t>(3, H + 2 * pad));
    const std::size_t kw = 1 + rng.below(std::min<std::size_t>(3, W + 2 * pad));
    auto x = random_tensor(rng, {N, C, H, W});
    auto k = random_tensor(rng, {Co, C, kh, kw});
    auto b = random_tensor(rng, {Co});
    auto y = conv2d(x, k, b, stride, pad);
    auto ref = oracle::conv2d(vec(x), N, C, H, W, vec(k), Co, kh, kw, vec(b), stride, pad);
    ASSERT_EQ(y.size(), ref.size()) << "trial " << trial;
    for (std::size_t i = 0; i < ref.size(); ++i) ASSERT_NEAR(y.at(i), ref[i], 1e-10) << "trial " << trial;
  }
}

// --- finite differences ---------------------------------------------------

TEST(FiniteDiff, QuadraticIsExact) {
  Rng rng(7);
  ParamSet<double> ps;
  ps.add("p", random_tensor(rng, {5}));
  auto fn = [](ParamSet<double>& s) { return sum_all(square(s.get("p"))) * 0.5; };
  EXPECT_LT(finite_diff_check(fn, ps, 1e-5), 1e-7);
}

TEST(FiniteDiff, RejectsNonDeterministicLoss) {
  ParamSet<double> ps;
  ps.add("p", T::from({1}, {1.0}));
  int calls = 0;
  auto fn = [&](ParamSet<double>& s) { return sum_all(s.get("p")) * double(++calls); };
  EXPECT_THROW(finite_diff_check(fn, ps, 1e-5), NondeterministicLoss);
}

TEST(FiniteDiff, EveryDifferentiableOpPassesOnRandomInputs) {
  Rng rng(2024);
  const std::vector<std::pair<std::string, std::function<T(const T&, const T&)>>> ops{
      {"add", [](const T& a, const T& b) { return add(a, b); }},
      {"sub", [](const T& a, const T& b) { return sub(a, b); }},
      {"mul", [](const T& a, const T& b) { return mul(a, b); }},
      {"div", [](const T& a, const T& b) { return div(a, exp(b)); }},
      {"scalar_mul", [](const T& a, const T& b) { return mul(reshape(sum_all(b), {}), a); }},
      {"exp", [](const T& a, const T&) { return exp(a); }},
      {"log", [](const T& a, const T&) { return log(add(square(a), T::scalar(0.5))); }},
      {"neg", [](const T& a, const T&) { return neg(a); }},
      {"relu", [](const T& a, const T&) { return relu(a); }},
      {"sigmoid", [](const T& a, const T&) { return sigmoid(a); }},
      {"square", [](const T& a, const T&) { return square(a); }},
      {"sqrt", [](const T& a, const T&) { return agmm::sqrt(add(square(a), T::scalar(0.5))); }},
      {"mean_axis", [](const T& a, const T&) { return mean(a, {1}); }},
      {"sum_axes", [](const T& a, const T&) { return sum(a, {0, 1}); }},
      {"softmax", [](const T& a, const T&) { return softmax(a, 0); }},
      {"index_select", [](const T& a, const T&) { return index_select(a, 1, {2, 0, 2}); }},
      {"expand", [](const T& a, const T&) { return expand(mean(a, {1}), 1, 4); }},
      {"stack", [](const T& a, const T& b) { return stack(std::vector<T>{a, b, a}); }},
      {"clamp", [](const T& a, const T&) { return clamp(a, -0.5, 0.5); }},
      {"conv2d", [](const T& a, const T& b) {
         return conv2d(reshape(a, {1, 1, 3, 4}), reshape(b, {1, 1, 3, 4}), T{}, 1, 1);
       }},
  };
  for (const auto& [name, op] : ops) {
    double worst = 0;
    for (int trial = 0; trial < 100; ++trial) {
      ParamSet<double> ps;
      auto a = random_tensor(rng, {3, 4});
      // Keep relu/clamp operands away from their kinks.
      for (auto& v : a.mutable_data())
        if (std::abs(v) < 0.05 || std::abs(std::abs(v) - 0.5) < 0.05) v += 0.2;
      ps.add("a", a);
      ps.add("b", random_tensor(rng, {3, 4}));
      const std::uint64_t wseed = rng.next();
      auto fn = [&, wseed](ParamSet<double>& s) { return weighted_sum(op(s.get("a"), s.get("b")), wseed); };
      worst = std::max(worst, finite_diff_check(fn, ps, 1e-5));
    }
    EXPECT_LT(worst, 1e-6) << name;
  }
}

// --- container ------------------------------------------------------------

TEST(Container, HeaderLayoutIsBitExact) {
  std::ostringstream os;
  write_tensor(os, T::from({2}, {1.0, -2.5}));
  const std::string b = os.str();
  ASSERT_EQ(b.size(), 4u + 2 + 1 + 1 + 8 + 16);
  EXPECT_EQ(b.substr(0, 4), "AGMT");
  EXPECT_EQ(b[4], 1);
  EXPECT_EQ(b[5], 0);
  EXPECT_EQ(b[6], 0);  // f64
  EXPECT_EQ(b[7], 1);  // rank
  EXPECT_EQ(b[8], 2);  // extent LE
  double v;
  std::memcpy(&v, b.data() + 24, 8);
  EXPECT_EQ(v, -2.5);
}

TEST(Container, RoundTripPreservesValuesAndShape) {
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    Shape s;
    for (std::size_t r = 0, n = 1 + rng.below(4); r < n; ++r) s.push_back(1 + rng.below(5));
    auto t = random_tensor(rng, s);
    std::stringstream ss;
    write_tensor(ss, t);
    auto back = read_tensor<double>(ss);
    EXPECT_EQ(back.shape(), t.shape());
    EXPECT_EQ(vec(back), vec(t));

    std::stringstream sf;
    write_tensor(sf, t, DType::f32);
    auto bf = read_tensor<float>(sf);
    for (std::size_t i = 0; i < t.size(); ++i) EXPECT_EQ(bf.at(i), float(t.at(i)));
  }
}

TEST(Container, RejectsBadMagic) {
  std::stringstream ss("XXXX");
  EXPECT_THROW(read_tensor<double>(ss), FormatError);
}

TEST(Determinism, SameSeedSameValues) {
  auto run = [] {
    Rng rng(42);
    auto x = random_tensor(rng, {1, 3, 6, 6});
    auto k = random_tensor(rng, {4, 3, 3, 3});
    return vec(softmax(relu(conv2d(x, k, T{}, 1, 1)), 1));
  };
  EXPECT_EQ(run(), run());
}
