#include <algorithm>
#include <random>

#include <gtest/gtest.h>

#include "cn2/imaging.hpp"
#include "scenes.hpp"

using namespace cn2;
using cn2::testing::constant_frame;
using cn2::testing::ramp_frame;
using cn2::testing::ramp_sequence;

namespace {

ImageFrame random_frame(std::mt19937_64& rng, int w, int h, std::int64_t ts = 0) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  std::vector<float> px(static_cast<std::size_t>(w) * h);
  for (auto& v : px) v = u(rng);
  return ImageFrame(w, h, std::move(px), ts);
}

RgbImage solid_rgb(int w, int h, float r, float g, float b) {
  RgbImage img{w, h, {}};
  const std::size_t n = static_cast<std::size_t>(w) * h;
  img.channels = {std::vector<float>(n, r), std::vector<float>(n, g), std::vector<float>(n, b)};
  return img;
}

}  // namespace

TEST(ImageFrame, RejectsInvalidPixels) {
  EXPECT_THROW(ImageFrame(2, 2, {0.f, 0.f, 0.f}), Error);
  EXPECT_THROW(ImageFrame(1, 1, {1.5f}), Error);
  EXPECT_THROW(ImageFrame(0, 1, {}), Error);
}

TEST(ImageSequence, RequiresTwoFramesAndOrderedTimestamps) {
  try {
    ImageSequence({constant_frame(4, 4, 0.5f)});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::InsufficientFrames);
  }
  EXPECT_THROW(ImageSequence({constant_frame(4, 4, 0.5f, 10), constant_frame(4, 4, 0.5f, 5)}), Error);
  EXPECT_THROW(ImageSequence({constant_frame(4, 4, 0.5f), constant_frame(5, 4, 0.5f)}), Error);
}

TEST(Grayscale, GrayIsFixedPoint) {
  auto f = to_grayscale(solid_rgb(3, 2, 0.5f, 0.5f, 0.5f));
  for (float v : f.pixels()) EXPECT_NEAR(v, 0.5f, 1e-7);
}

TEST(Grayscale, PureRedUsesLumaWeight) {
  auto f = to_grayscale(solid_rgb(2, 2, 1.f, 0.f, 0.f));
  for (float v : f.pixels()) EXPECT_NEAR(v, 0.299f, 1e-7);
}

TEST(Grayscale, EmptyOrMismatchedIsDimensionError) {
  try {
    to_grayscale(RgbImage{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Dimension);
  }
  auto img = solid_rgb(2, 2, 0.f, 0.f, 0.f);
  img.channels[1].pop_back();
  EXPECT_THROW(to_grayscale(img), Error);
}

TEST(Crop, FullFrameIsIdentity) {
  std::mt19937_64 rng(1);
  auto f = random_frame(rng, 9, 9, 77);
  auto c = crop(f, Roi{0, 0, 9});
  EXPECT_TRUE(std::equal(f.pixels().begin(), f.pixels().end(), c.pixels().begin()));
  EXPECT_EQ(c.timestamp_us(), 77);
}

TEST(Crop, CentralBlock) {
  std::vector<float> px(16);
  for (int i = 0; i < 16; ++i) px[i] = i / 16.0f;
  ImageFrame f(4, 4, px);
  auto c = crop(f, Roi{1, 1, 2});
  ASSERT_EQ(c.width(), 2);
  EXPECT_FLOAT_EQ(c.at(0, 0), 5 / 16.0f);
  EXPECT_FLOAT_EQ(c.at(1, 0), 6 / 16.0f);
  EXPECT_FLOAT_EQ(c.at(0, 1), 9 / 16.0f);
  EXPECT_FLOAT_EQ(c.at(1, 1), 10 / 16.0f);
}

TEST(Crop, PastEdgeIsBoundsError) {
  try {
    crop(constant_frame(4, 4, 0.f), Roi{3, 0, 2});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Bounds);
  }
}

TEST(TemporalVariance, StaticSequenceIsZero) {
  std::mt19937_64 rng(2);
  auto f = random_frame(rng, 8, 8);
  auto v = temporal_variance_map(ImageSequence({f, f, f}));
  for (double x : v.data) EXPECT_EQ(x, 0.0);
}

TEST(TemporalVariance, HandComputedValues) {
  auto v2 = temporal_variance_map(ImageSequence({constant_frame(1, 1, 0.f), constant_frame(1, 1, 1.f)}));
  EXPECT_DOUBLE_EQ(v2.data[0], 0.5);
  auto v3 = temporal_variance_map(
      ImageSequence({constant_frame(1, 1, 0.2f), constant_frame(1, 1, 0.4f), constant_frame(1, 1, 0.6f)}));
  EXPECT_NEAR(v3.data[0], 0.04, 1e-8);
}

TEST(TemporalVariance, SingleFrameIsInsufficient) {
  std::vector<ImageFrame> one{constant_frame(2, 2, 0.f)};
  try {
    temporal_variance_map(std::span<const ImageFrame>(one));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::InsufficientFrames);
  }
}

TEST(TemporalVariance, PermutationInvariant) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<ImageFrame> frames;
    for (int i = 0; i < 6; ++i) frames.push_back(random_frame(rng, 5, 4));
    auto a = temporal_variance_map(std::span<const ImageFrame>(frames));
    std::shuffle(frames.begin(), frames.end(), rng);
    auto b = temporal_variance_map(std::span<const ImageFrame>(frames));
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a.data[i], b.data[i], 1e-12);
  }
}

TEST(Gradient, ConstantImageIsZero) {
  for (auto k : {KernelVariant::Sobel, KernelVariant::Prewitt, KernelVariant::CentralDifference,
                 KernelVariant::IntermediateDifference}) {
    auto g = spatial_gradient_sq_map(constant_frame(6, 6, 0.3f), GradientKernel{k});
    for (double v : g.data) EXPECT_EQ(v, 0.0);
  }
}

TEST(Gradient, FrameSmallerThanKernelIsDimensionError) {
  EXPECT_THROW(spatial_gradient_sq_map(constant_frame(2, 5, 0.f), GradientKernel{KernelVariant::Sobel}), Error);
  EXPECT_NO_THROW(
      spatial_gradient_sq_map(constant_frame(2, 2, 0.f), GradientKernel{KernelVariant::IntermediateDifference}));
}

// Ramp I = c*x: the stencil response is c times the sum of (column offset * weight).
// Central: c. Intermediate: c. Prewitt: 3 rows * 2c = 6c. Sobel: (1+2+1) * 2c = 8c.
TEST(Gradient, RampInteriorResponses) {
  const double c = 0.01;
  auto f = ramp_frame(20, 12, c, 0.0, 0, 0.05);
  struct Case {
    KernelVariant k;
    double gx;
  };
  for (auto [k, gx] : {Case{KernelVariant::CentralDifference, c}, Case{KernelVariant::IntermediateDifference, c},
                       Case{KernelVariant::Prewitt, 6 * c}, Case{KernelVariant::Sobel, 8 * c}}) {
    auto g = spatial_gradient_sq_map(f, GradientKernel{k});
    for (int y = 2; y < 10; ++y)
      for (int x = 2; x < 18; ++x) EXPECT_NEAR(g.at(x, y), gx * gx, 1e-5 * gx * gx) << to_string(k);
  }
}

TEST(Gradient, SobelIsSixteenTimesNormalizedSobel) {
  std::mt19937_64 rng(4);
  auto f = random_frame(rng, 16, 16);
  auto raw = spatial_gradient_sq_map(f, GradientKernel{KernelVariant::Sobel, false});
  auto norm = spatial_gradient_sq_map(f, GradientKernel{KernelVariant::Sobel, true});
  for (std::size_t i = 0; i < raw.size(); ++i) EXPECT_NEAR(raw.data[i], 16.0 * norm.data[i], 1e-12);
}

TEST(Gradient, QuadraticInIntensityScale) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> ua(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    auto f = random_frame(rng, 10, 10);
    const double alpha = ua(rng);
    std::vector<float> scaled(f.pixels().begin(), f.pixels().end());
    for (auto& v : scaled) v = static_cast<float>(v * alpha);
    for (auto k : {KernelVariant::Sobel, KernelVariant::CentralDifference}) {
      auto gs = spatial_gradient_sq_map(ImageFrame(10, 10, scaled), GradientKernel{k});
      auto gb = spatial_gradient_sq_map(f, GradientKernel{k});
      for (std::size_t i = 0; i < gs.size(); ++i) EXPECT_NEAR(gs.data[i], alpha * alpha * gb.data[i], 1e-5);
    }
  }
}

// Ramp shifted by displacements d_k: per-pixel intensity is c*(x - d_k), so
// var / Gx^2 equals the unbiased sample variance of the displacements.
TEST(Gradient, DisplacementVarianceIdentity) {
  const double c = 1.0 / 256;
  for (double d : {0.5, 1.0, 2.0}) {
    std::vector<double> shifts;
    for (int i = 0; i < 8; ++i) shifts.push_back(i % 2 ? d : -d);
    const double expected = d * d * 8.0 / 7.0;
    auto seq = ramp_sequence(64, 16, c, shifts);
    auto var = temporal_variance_map(seq);
    auto grad = spatial_gradient_sq_map(seq[0], GradientKernel{KernelVariant::CentralDifference});
    for (int y = 2; y < 14; ++y)
      for (int x = 4; x < 60; ++x) EXPECT_NEAR(var.at(x, y) / grad.at(x, y), expected, 1e-4 * expected);
  }
}

TEST(Translate, IntegerShiftMovesContent) {
  std::mt19937_64 rng(6);
  auto f = random_frame(rng, 12, 12);
  auto t = translate_bilinear(f, 2.0, -1.0);
  for (int y = 1; y < 10; ++y)
    for (int x = 2; x < 12; ++x) EXPECT_FLOAT_EQ(t.at(x, y), f.at(x - 2, y + 1));
}
