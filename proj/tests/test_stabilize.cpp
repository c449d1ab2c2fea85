#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "cn2/stabilize.hpp"
#include "cn2/turbsim.hpp"
#include "scenes.hpp"

using namespace cn2;
using cn2::testing::constant_frame;

namespace {

const ImageFrame& big_scene() {
  static const ImageFrame s = sim::make_scene(192, 192, 17, {.texture_scale = 6, .contrast = 0.8});
  return s;
}

// Central 128x128 window of the big scene after moving its content by (dx, dy).
ImageFrame view(double dx, double dy, std::int64_t ts) {
  ImageFrame f = crop(translate_bilinear(big_scene(), dx, dy), Roi{32, 32, 128});
  f.set_timestamp_us(ts);
  return f;
}

ImageSequence views(const std::vector<RigidShift>& moves) {
  std::vector<ImageFrame> frames;
  for (std::size_t i = 0; i < moves.size(); ++i) frames.push_back(view(moves[i].dx, moves[i].dy, i));
  return ImageSequence(std::move(frames));
}

ImageFrame noise_frame(std::mt19937_64& rng, int w, int h, std::int64_t ts) {
  std::uniform_real_distribution<float> u(0.f, 1.f);
  std::vector<float> px(static_cast<std::size_t>(w) * h);
  for (auto& v : px) v = u(rng);
  return ImageFrame(w, h, std::move(px), ts);
}

const Roi kAnchor{40, 40, 48};

}  // namespace

TEST(ResidualMotion, Examples) {
  std::vector<RigidShift> zeros(4);
  EXPECT_EQ(residual_motion(zeros), 0.0);
  std::vector<RigidShift> a{{3, 4}};
  EXPECT_DOUBLE_EQ(residual_motion(a), 5.0);
  std::vector<RigidShift> b{{1, 0}, {0, 1}};
  EXPECT_DOUBLE_EQ(residual_motion(b), 1.0);
}

TEST(ResidualMotion, EmptyIsError) {
  try {
    residual_motion({});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::EmptyInput);
  }
}

TEST(CoarseAlign, AlignedSequenceUnchanged) {
  auto seq = views({{0, 0}, {0, 0}, {0, 0}});
  auto r = coarse_align(seq, kAnchor, 0);
  for (auto s : r.shifts) {
    EXPECT_EQ(s.dx, 0.0);
    EXPECT_EQ(s.dy, 0.0);
  }
  for (std::size_t i = 0; i < seq.size(); ++i)
    EXPECT_TRUE(std::equal(seq[i].pixels().begin(), seq[i].pixels().end(), r.sequence[i].pixels().begin()));
}

TEST(CoarseAlign, RecoversInverseOfSyntheticShift) {
  auto seq = views({{0, 0}, {0, 0}, {3, -2}});
  auto r = coarse_align(seq, kAnchor, 0);
  EXPECT_EQ(r.shifts[2].dx, -3.0);
  EXPECT_EQ(r.shifts[2].dy, 2.0);
  EXPECT_EQ(r.sequence.width(), seq.width());
  // Away from the replicated border the aligned frame equals the reference.
  for (int y = 8; y < 120; ++y)
    for (int x = 8; x < 120; ++x) EXPECT_NEAR(r.sequence[2].at(x, y), seq[0].at(x, y), 1e-6);
}

TEST(CoarseAlign, IntegerRoundTrip) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> u(-12, 12);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<RigidShift> moves{{0, 0}};
    for (int i = 0; i < 3; ++i) moves.push_back({double(u(rng)), double(u(rng))});
    auto r = coarse_align(views(moves), kAnchor, 0, {.max_shift = 16});
    for (std::size_t i = 0; i < moves.size(); ++i) {
      EXPECT_EQ(r.shifts[i].dx, -moves[i].dx);
      EXPECT_EQ(r.shifts[i].dy, -moves[i].dy);
    }
  }
}

TEST(CoarseAlign, UniformAnchorFails) {
  ImageSequence seq({constant_frame(64, 64, 0.4f, 0), constant_frame(64, 64, 0.4f, 1)});
  try {
    coarse_align(seq, Roi{8, 8, 16}, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::AlignmentFailure);
  }
}

TEST(CoarseAlign, UncorrelatedFrameFailsNamingFrame) {
  std::mt19937_64 rng(4);
  ImageSequence seq({view(0, 0, 0), noise_frame(rng, 128, 128, 1)});
  try {
    coarse_align(seq, kAnchor, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::AlignmentFailure);
    EXPECT_NE(std::string(e.what()).find("frame 1"), std::string::npos);
  }
}

TEST(CoarseAlign, AnchorOutOfBounds) {
  auto seq = views({{0, 0}, {0, 0}});
  EXPECT_THROW(coarse_align(seq, Roi{100, 100, 48}), Error);
  EXPECT_THROW(coarse_align(seq, kAnchor, 5), Error);
}

TEST(FineAlign, IdenticalFramesGiveZeroShift) {
  auto seq = views({{0, 0}, {0, 0}, {0, 0}});
  auto r = fine_align(seq);
  for (auto s : r.shifts) {
    EXPECT_NEAR(s.dx, 0.0, 1e-9);
    EXPECT_NEAR(s.dy, 0.0, 1e-9);
  }
  EXPECT_TRUE(r.warnings.empty());
}

TEST(FineAlign, HalfPixelShiftRecovered) {
  auto seq = views({{0, 0}, {0.5, 0}});
  auto r = fine_align(seq, 0);
  EXPECT_NEAR(r.shifts[1].dx, -0.5, 0.1);
  EXPECT_NEAR(r.shifts[1].dy, 0.0, 0.1);
}

TEST(FineAlign, SubPixelShifts) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-4.0, 4.0);
  for (int trial = 0; trial < 8; ++trial) {
    const RigidShift m{u(rng), u(rng)};
    auto r = fine_align(views({{0, 0}, m}), 0);
    EXPECT_NEAR(r.shifts[1].dx, -m.dx, 0.1);
    EXPECT_NEAR(r.shifts[1].dy, -m.dy, 0.1);
  }
}

TEST(FineAlign, Idempotent) {
  auto seq = views({{0.3, -1.2}, {0, 0}, {2.6, 0.7}, {-1.4, 1.9}});
  auto once = fine_align(seq);
  auto twice = fine_align(once.sequence);
  EXPECT_LT(residual_motion(twice.shifts), 0.05);
}

TEST(FineAlign, GlobalTranslationEquivariant) {
  const std::vector<RigidShift> moves{{0.3, -1.2}, {0, 0}, {2.6, 0.7}};
  auto a = fine_align(views(moves));
  std::vector<RigidShift> moved;
  for (auto m : moves) moved.push_back({m.dx + 5.0, m.dy - 3.0});
  auto b = fine_align(views(moved));
  for (std::size_t i = 0; i < moves.size(); ++i) {
    EXPECT_NEAR(a.shifts[i].dx, b.shifts[i].dx, 0.05);
    EXPECT_NEAR(a.shifts[i].dy, b.shifts[i].dy, 0.05);
  }
}

TEST(FineAlign, WhiteNoiseStaysWithinRadius) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<ImageFrame> frames;
    for (int i = 0; i < 4; ++i) frames.push_back(noise_frame(rng, 40, 36, i));
    auto r = fine_align(ImageSequence(std::move(frames)), std::nullopt, {.max_shift = 6});
    for (auto s : r.shifts) {
      EXPECT_TRUE(std::isfinite(s.dx) && std::isfinite(s.dy));
      EXPECT_LE(std::abs(s.dx), 6.0);
      EXPECT_LE(std::abs(s.dy), 6.0);
    }
  }
}

TEST(FineAlign, ConstantFrameWarnsWithZeroShift) {
  ImageSequence seq({view(0, 0, 0), constant_frame(128, 128, 0.5f, 1), view(1, 0, 2)});
  auto r = fine_align(seq, 0);
  EXPECT_EQ(r.shifts[1].dx, 0.0);
  EXPECT_EQ(r.shifts[1].dy, 0.0);
  ASSERT_EQ(r.warnings.size(), 1u);
  EXPECT_NE(r.warnings[0].find("frame 1"), std::string::npos);
}

TEST(Stabilize, CoarsePlusFineRecoversLargeShifts) {
  auto seq = views({{0, 0}, {0, 0}, {-13.4, 9.7}});
  auto r = stabilize(seq, {.anchor = kAnchor, .reference_index = 0});
  EXPECT_NEAR(r.shifts[2].dx, 13.4, 0.1);
  EXPECT_NEAR(r.shifts[2].dy, -9.7, 0.1);
}
