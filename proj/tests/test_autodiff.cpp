#include <cmath>
#include <functional>
#include <random>

#include <gtest/gtest.h>

#include "cn2/autodiff.hpp"

using namespace cn2;
using namespace cn2::ad;

using TD = Tensor<double>;

namespace {

TD random_tensor(std::mt19937_64& rng, Shape s, double lo = -1.0, double hi = 1.0, bool grad = true) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(numel_of(s));
  for (auto& x : v) x = u(rng);
  return TD::from(std::move(s), std::move(v), grad);
}

// Central finite differences of a scalar function against the analytic grads
// of every input.
void expect_grads_match(const std::function<TD()>& loss, std::vector<TD> inputs, double tol = 1e-5,
                        double h = 1e-4) {
  for (auto& t : inputs) t.zero_grad();
  TD l = loss();
  l.backward();
  for (auto& t : inputs) {
    std::vector<double> analytic = t.grad();
    ASSERT_EQ(analytic.size(), t.numel());
    for (std::size_t k = 0; k < t.numel(); ++k) {
      const double x0 = t.data()[k];
      t.mutable_data()[k] = x0 + h;
      const double fp = loss().item();
      t.mutable_data()[k] = x0 - h;
      const double fm = loss().item();
      t.mutable_data()[k] = x0;
      const double numeric = (fp - fm) / (2 * h);
      const double scale = std::max({std::abs(numeric), std::abs(analytic[k]), 1e-3});
      EXPECT_LE(std::abs(analytic[k] - numeric) / scale, tol) << "element " << k;
    }
  }
}

}  // namespace

TEST(Tensor, ValidatesShapeAndValues) {
  EXPECT_THROW(TD::from({2, 2}, {1, 2, 3}), Error);
  EXPECT_THROW(TD::from({0}, {}), Error);
  EXPECT_THROW(TD::from({1}, {NAN}), Error);
}

TEST(Conv2d, UnitKernelIsIdentity) {
  std::mt19937_64 rng(1);
  auto x = random_tensor(rng, {1, 4, 5}, 0, 1, false);
  auto w = TD::from({1, 1, 1, 1}, {1.0});
  auto y = conv2d(x, w, TD::from({1}, {0.0}));
  EXPECT_EQ(y.shape(), x.shape());
  EXPECT_EQ(y.data(), x.data());
}

TEST(Conv2d, AllOnesKernelCenter) {
  auto x = TD::from({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  auto w = TD::full({1, 1, 3, 3}, 1.0);
  auto y = conv2d(x, w);
  EXPECT_DOUBLE_EQ(y.data()[4], 45.0);
  // Corner with replicate padding: 1*4 + 2*2 + 4*2 + 5.
  EXPECT_DOUBLE_EQ(y.data()[0], 4 + 4 + 8 + 5.0);
}

TEST(Conv2d, ChannelMismatchIsShapeError) {
  try {
    conv2d(TD::zeros({2, 4, 4}), TD::zeros({1, 3, 3, 3}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Shape);
  }
  EXPECT_THROW(conv2d(TD::zeros({1, 4, 4}), TD::zeros({1, 1, 2, 2})), Error);
}

TEST(Conv2d, SinglePixelLossGradients) {
  std::mt19937_64 rng(2);
  auto x = random_tensor(rng, {2, 6, 7});
  auto w = random_tensor(rng, {3, 2, 5, 5});
  auto b = random_tensor(rng, {3});
  expect_grads_match(
      [&] {
        auto y = conv2d(x, w, b);
        return sum(crop2d(reshape(y, {3, 6, 7}), 2)) + sum(square(y));
      },
      {x, w, b});
}

TEST(Elementwise, QuotientOfIdenticalValues) {
  auto x = TD::scalar(2.0, true);
  auto y = div(x, x);
  EXPECT_DOUBLE_EQ(y.item(), 1.0);
  y.backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 0.0);
}

TEST(Elementwise, Relu) {
  auto x = TD::from({2}, {-1.0, 2.0}, true);
  auto y = relu(x);
  EXPECT_EQ(y.data(), (std::vector<double>{0.0, 2.0}));
  sum(y).backward();
  EXPECT_EQ(x.grad(), (std::vector<double>{0.0, 1.0}));
}

TEST(Elementwise, Log10Derivative) {
  auto x = TD::scalar(10.0, true);
  auto y = log10(x);
  EXPECT_DOUBLE_EQ(y.item(), 1.0);
  y.backward();
  EXPECT_NEAR(x.grad()[0], 1.0 / (10.0 * std::log(10.0)), 1e-15);
  EXPECT_NEAR(x.grad()[0], 0.04343, 1e-5);
  EXPECT_THROW(log10(TD::scalar(0.0)), Error);
}

TEST(Elementwise, DivisionGuard) {
  try {
    div(TD::scalar(1.0), TD::scalar(1e-13));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::NumericalGuard);
  }
  auto clamped = div(TD::scalar(1.0), TD::scalar(1e-13), {.eps = 1e-12, .clamp = true});
  EXPECT_DOUBLE_EQ(clamped.item(), 1e12);
}

TEST(Elementwise, NonFiniteResultIsGuardError) {
  try {
    exp(Tensor<float>::scalar(1000.f));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::NumericalGuard);
  }
}

TEST(Elementwise, BroadcastShapes) {
  auto a = TD::from({2, 3}, {1, 2, 3, 4, 5, 6});
  auto b = TD::from({3}, {10, 20, 30});
  EXPECT_EQ((a + b).data(), (std::vector<double>{11, 22, 33, 14, 25, 36}));
  auto c = TD::from({2, 1}, {2, 3});
  EXPECT_EQ((a * c).data(), (std::vector<double>{2, 4, 6, 12, 15, 18}));
  EXPECT_THROW(a + TD::zeros({2}), Error);
}

TEST(Elementwise, BroadcastGradients) {
  std::mt19937_64 rng(3);
  auto a = random_tensor(rng, {2, 3, 4});
  auto b = random_tensor(rng, {3, 1}, 0.5, 2.0);
  auto c = random_tensor(rng, {1});
  expect_grads_match([&] { return sum(div(a * b - c, b) + square(a + c)); }, {a, b, c});
}

TEST(Elementwise, SmoothActivationGradients) {
  std::mt19937_64 rng(4);
  auto a = random_tensor(rng, {10}, -3, 3);
  auto p = random_tensor(rng, {10}, 0.1, 4);
  expect_grads_match(
      [&] { return sum(sigmoid(a) + softplus(a, 2.0) + exp(scale(a, 0.3)) + log10(p) + add_scalar(a, 1.5)); },
      {a, p});
}

TEST(Reduce, MeanAndGradient) {
  auto x = TD::from({3}, {1, 2, 3}, true);
  auto m = mean(x);
  EXPECT_DOUBLE_EQ(m.item(), 2.0);
  m.backward();
  for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 1.0 / 3.0);
}

TEST(Reduce, UnbiasedVariance) {
  auto v = variance_axis(TD::from({2}, {0.0, 1.0}), 0);
  EXPECT_DOUBLE_EQ(v.item(), 0.5);
  try {
    variance_axis(TD::zeros({1, 4}), 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::InsufficientFrames);
  }
}

TEST(Reduce, AxisGradients) {
  std::mt19937_64 rng(5);
  auto x = random_tensor(rng, {3, 4, 5});
  expect_grads_match(
      [&] { return sum(square(variance_axis(x, 0))) + sum(mean_axis(x, 1)) + mean(square(sum_axis(x, 2))); }, {x});
  EXPECT_EQ(variance_axis(x, 1).shape(), (Shape{3, 5}));
  EXPECT_EQ(variance_axis(x, -1).shape(), (Shape{3, 4}));
  EXPECT_THROW(variance_axis(x, 3), Error);
}

TEST(Reduce, PoolAndLinearGradients) {
  std::mt19937_64 rng(6);
  auto x = random_tensor(rng, {2, 5, 6});
  auto w = random_tensor(rng, {3, 2});
  auto b = random_tensor(rng, {3});
  expect_grads_match(
      [&] {
        auto pooled = avg_pool2(x);
        auto feats = mean_axis(reshape(pooled, {2, 6}), 1);
        return sum(square(linear(feats, w, b)));
      },
      {x, w, b});
  EXPECT_EQ(avg_pool2(x).shape(), (Shape{2, 2, 3}));
}

TEST(Backward, LinearCase) {
  auto w = TD::from({3}, {0.5, -1.0, 2.0}, true);
  auto x = TD::from({3}, {1.0, 2.0, 3.0});
  sum(w * x).backward();
  EXPECT_EQ(w.grad(), x.data());
}

TEST(Backward, NonScalarLossIsShapeError) {
  auto w = TD::from({2}, {1.0, 2.0}, true);
  try {
    square(w).backward();
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Shape);
  }
}

TEST(Backward, RepeatedCallsAccumulate) {
  auto w = TD::from({2}, {1.0, 2.0}, true);
  auto loss = sum(square(w));
  loss.backward();
  loss.backward();
  EXPECT_EQ(w.grad(), (std::vector<double>{4.0, 8.0}));
  w.zero_grad();
  loss.backward();
  EXPECT_EQ(w.grad(), (std::vector<double>{2.0, 4.0}));
}

TEST(Backward, SharedSubexpressionCountedOnce) {
  auto x = TD::scalar(3.0, true);
  auto y = square(x);
  (y + y * y).backward();  // d/dx (x^2 + x^4) = 2x + 4x^3
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0 + 108.0);
}

// Two-layer conv composite over 100 random seeds.
TEST(Backward, TwoLayerCompositeMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(seed);
    auto x = random_tensor(rng, {2, 5, 5}, 0.0, 1.0);
    auto w1 = random_tensor(rng, {2, 2, 3, 3}, -0.5, 0.5);
    auto b1 = random_tensor(rng, {2}, -0.1, 0.1);
    auto w2 = random_tensor(rng, {1, 2, 3, 3}, -0.5, 0.5);
    expect_grads_match(
        [&] {
          auto h = sigmoid(conv2d(x, w1, b1));
          auto out = softplus(conv2d(h, w2), 4.0);
          return div(sum(variance_axis(reshape(h, {2, 25}), 1)), mean(out));
        },
        {x, w1, b1, w2});
    if (::testing::Test::HasFailure()) {
      ADD_FAILURE() << "seed " << seed;
      break;
    }
  }
}

TEST(Backward, Deterministic) {
  auto run = [] {
    std::mt19937_64 rng(9);
    auto x = random_tensor(rng, {1, 8, 8});
    auto w = Tensor<float>::from({2, 1, 3, 3}, std::vector<float>(18, 0.1f), true);
    auto xf = Tensor<float>::from({1, 8, 8}, std::vector<float>(x.data().begin(), x.data().end()));
    mean(square(conv2d(xf, w))).backward();
    return w.grad();
  };
  EXPECT_EQ(run(), run());
}

TEST(Optimizer, SgdStep) {
  auto p = TD::scalar(0.0, true);
  p.mutable_grad()[0] = 1.0;
  Sgd<double> opt({p}, 0.1);
  opt.step();
  EXPECT_DOUBLE_EQ(p.item(), -0.1);
  opt.zero_grad();
  opt.step();
  EXPECT_DOUBLE_EQ(p.item(), -0.1);
}

TEST(Optimizer, SgdMomentum) {
  auto p = TD::scalar(0.0, true);
  Sgd<double> opt({p}, 0.1, 0.5);
  p.mutable_grad()[0] = 1.0;
  opt.step();
  opt.step();  // velocity 1 then 1.5
  EXPECT_NEAR(p.item(), -0.25, 1e-15);
}

TEST(Optimizer, AdamFirstStepIsLearningRate) {
  for (double g : {1.0, 1e-6, -250.0}) {
    auto p = TD::scalar(1.0, true);
    p.mutable_grad()[0] = g;
    Adam<double> opt({p}, 1e-3);
    opt.step();
    EXPECT_NEAR(p.item() - 1.0, g > 0 ? -1e-3 : 1e-3, 1e-5);
  }
}

TEST(Optimizer, NonPositiveLearningRateIsConfigError) {
  auto p = TD::scalar(0.0, true);
  for (double lr : {0.0, -1e-3}) {
    try {
      Adam<double> opt({p}, lr);
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::Config);
    }
    EXPECT_THROW(Sgd<double>({p}, lr), Error);
  }
}
