#pragma once
// Tilt-warp turbulence simulator. Each frame is the clean scene resampled
// through a smooth random displacement field whose per-axis marginal standard
// deviation is the angle-of-arrival tilt implied by the commanded Cn2, plus an
// optional global camera-shake translation.

#include <cmath>
#include <cstdio>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "cn2/error.hpp"
#include "cn2/gradient_estimator.hpp"
#include "cn2/imaging.hpp"

namespace cn2::sim {

/// Per-axis tilt standard deviation in pixels: sqrt(P * Cn2 * L * D^(-1/3)) / PFOV.
inline double tilt_sigma_px(double cn2, const CameraGeometry& geom) {
  geom.validate();
  if (cn2 < 0 || !std::isfinite(cn2)) fail(ErrorKind::Validation, "Cn2 must be finite and non-negative");
  return std::sqrt(geom.turbulence_p * cn2 * geom.path_length_l / std::cbrt(geom.aperture_d)) / geom.pfov;
}

/// splitmix64 finaliser; derives independent child seeds from a parent seed.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Periodic Gaussian random fields with a Gaussian correlation profile and an
/// exactly unit marginal variance. One complex inverse DFT yields two
/// independent real fields (real and imaginary parts).
class GaussianFieldGenerator {
 public:
  GaussianFieldGenerator(int width, int height, double correlation_length)
      : width_(width), height_(height), transfer_(height, width, CV_64F) {
    if (width < 1 || height < 1) fail(ErrorKind::Dimension, "field dimensions must be positive");
    if (!(correlation_length > 0)) fail(ErrorKind::Validation, "correlation length must be positive");
    // Transfer function of a Gaussian smoothing kernel with std `correlation_length` px.
    const double a = 2.0 * std::numbers::pi * std::numbers::pi * correlation_length * correlation_length;
    double power = 0.0;
    for (int ky = 0; ky < height; ++ky) {
      const double fy = wrapped_frequency(ky, height);
      for (int kx = 0; kx < width; ++kx) {
        const double fx = wrapped_frequency(kx, width);
        double h = std::exp(-a * (fx * fx + fy * fy));
        if (h < kCutoff) h = 0.0;
        transfer_.at<double>(ky, kx) = h;
        power += h * h;
      }
    }
    // Var(Re z) = sum |H|^2 for unit-variance real and imaginary noise parts.
    const double norm = 1.0 / std::sqrt(power);
    transfer_ *= norm;
  }

  int width() const { return width_; }
  int height() const { return height_; }

  /// Two independent zero-mean unit-variance fields.
  std::pair<Map2D, Map2D> generate(std::mt19937_64& rng) const {
    std::normal_distribution<double> n01(0.0, 1.0);
    cv::Mat spec(height_, width_, CV_64FC2);
    for (int y = 0; y < height_; ++y) {
      auto* row = spec.ptr<cv::Vec2d>(y);
      const double* h = transfer_.ptr<double>(y);
      for (int x = 0; x < width_; ++x) {
        if (h[x] == 0.0) {
          row[x] = cv::Vec2d(0.0, 0.0);
          continue;
        }
        const double re = n01(rng), im = n01(rng);
        row[x] = cv::Vec2d(h[x] * re, h[x] * im);
      }
    }
    cv::Mat field;
    cv::dft(spec, field, cv::DFT_INVERSE);
    std::pair<Map2D, Map2D> out{Map2D(width_, height_), Map2D(width_, height_)};
    for (int y = 0; y < height_; ++y) {
      const auto* row = field.ptr<cv::Vec2d>(y);
      for (int x = 0; x < width_; ++x) {
        out.first.at(x, y) = row[x][0];
        out.second.at(x, y) = row[x][1];
      }
    }
    return out;
  }

 private:
  static double wrapped_frequency(int k, int n) {
    const int kk = (k <= n / 2) ? k : k - n;
    return static_cast<double>(kk) / n;
  }

  // Spectral taps below this gain are dropped; their share of the variance is < 1e-12.
  static constexpr double kCutoff = 1e-6;

  int width_, height_;
  cv::Mat transfer_;
};

struct SimConfig {
  double cn2_true = 1e-13;
  CameraGeometry geom{};
  int n_frames = 100;
  double correlation_length = 16.0;  // px
  double motion_px = 0.0;            // camera-shake disc radius, px
  std::uint64_t seed = 0;
  std::int64_t start_timestamp_us = 0;
  std::int64_t frame_interval_us = 8333;  // 120 fps

  void validate() const {
    geom.validate();
    if (!(cn2_true == 0.0 || (cn2_true >= 1e-17 && cn2_true <= 1e-10)))
      fail(ErrorKind::Validation, "cn2_true must be 0 or within [1e-17, 1e-10]");
    if (n_frames < 2) fail(ErrorKind::InsufficientFrames, "n_frames must be at least 2");
    if (!(correlation_length >= 1.0)) fail(ErrorKind::Validation, "correlation_length must be >= 1 px");
    if (!(motion_px >= 0.0) || !std::isfinite(motion_px)) fail(ErrorKind::Validation, "motion_px must be >= 0");
    if (frame_interval_us < 0) fail(ErrorKind::Validation, "frame interval must be non-negative");
  }
};

struct SimResult {
  ImageSequence sequence;
  double ground_truth = 0.0;
  double tilt_sigma_px = 0.0;
  std::vector<RigidShift> shake;
  /// Per-pixel unbiased temporal variance of the injected tilt, averaged over
  /// pixels and both axes (px^2). Excludes camera shake.
  double tilt_variance_px2 = 0.0;
};

/// Uniform draw from a disc of the given radius.
inline RigidShift draw_disc(std::mt19937_64& rng, double radius) {
  if (radius <= 0) return {};
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double r = radius * std::sqrt(u(rng));
  const double th = 2.0 * std::numbers::pi * u(rng);
  return {r * std::cos(th), r * std::sin(th)};
}

inline SimResult simulate_sequence(const ImageFrame& clean, const SimConfig& cfg) {
  cfg.validate();
  const int w = clean.width(), h = clean.height();
  if (w <= 2 * cfg.correlation_length || h <= 2 * cfg.correlation_length)
    fail(ErrorKind::Dimension, "clean frame must be larger than twice the correlation length");

  const double sigma = tilt_sigma_px(cfg.cn2_true, cfg.geom);
  std::mt19937_64 rng(cfg.seed);
  GaussianFieldGenerator gen(w, h, cfg.correlation_length);

  const std::size_t npx = static_cast<std::size_t>(w) * h;
  std::vector<double> sum(2 * npx, 0.0), sumsq(2 * npx, 0.0);
  std::vector<ImageFrame> frames;
  frames.reserve(static_cast<std::size_t>(cfg.n_frames));
  SimResult result;
  result.ground_truth = cfg.cn2_true;
  result.tilt_sigma_px = sigma;

  for (int i = 0; i < cfg.n_frames; ++i) {
    const std::int64_t ts = cfg.start_timestamp_us + static_cast<std::int64_t>(i) * cfg.frame_interval_us;
    const RigidShift shake = draw_disc(rng, cfg.motion_px);
    result.shake.push_back(shake);
    if (sigma == 0.0) {
      if (shake.dx == 0.0 && shake.dy == 0.0) {
        std::vector<float> px(clean.pixels().begin(), clean.pixels().end());
        frames.emplace_back(w, h, std::move(px), ts);
      } else {
        ImageFrame f = translate_bilinear(clean, shake.dx, shake.dy);
        f.set_timestamp_us(ts);
        frames.push_back(std::move(f));
      }
      continue;
    }
    auto [fx, fy] = gen.generate(rng);
    std::vector<float> px(npx);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const std::size_t k = static_cast<std::size_t>(y) * w + x;
        const double dx = sigma * fx.data[k], dy = sigma * fy.data[k];
        sum[k] += dx;
        sumsq[k] += dx * dx;
        sum[npx + k] += dy;
        sumsq[npx + k] += dy * dy;
        px[k] = static_cast<float>(sample_bilinear(clean, x - dx - shake.dx, y - dy - shake.dy));
      }
    }
    frames.push_back(ImageFrame::clamped(w, h, std::move(px), ts));
  }

  if (sigma > 0.0) {
    const double n = cfg.n_frames;
    double acc = 0.0;
    for (std::size_t k = 0; k < 2 * npx; ++k) acc += (sumsq[k] - sum[k] * sum[k] / n) / (n - 1.0);
    result.tilt_variance_px2 = acc / static_cast<double>(2 * npx);
  }
  result.sequence = ImageSequence(std::move(frames), "sim");
  return result;
}

/// Appearance parameters of a synthetic textured scene.
struct SceneStyle {
  double texture_scale = 16.0;  // px, correlation length of the texture
  double contrast = 0.6;        // approx. peak-to-peak intensity range
  double mean = 0.5;
  double board_weight = 0.0;    // mix-in of a smoothed checkerboard target
  double board_period = 64.0;   // px
};

/// Randomised style; scales stay >= 10 px so scenes remain smooth relative to
/// the largest simulated tilts.
inline SceneStyle random_scene_style(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  SceneStyle s;
  s.texture_scale = 10.0 + 10.0 * u(rng);
  s.contrast = 0.35 + 0.5 * u(rng);
  s.mean = 0.4 + 0.2 * u(rng);
  s.board_weight = u(rng) < 0.5 ? 0.0 : 0.3 + 0.5 * u(rng);
  s.board_period = 48.0 + 64.0 * u(rng);
  return s;
}

/// Smooth random texture, optionally blended with a blurred checkerboard.
inline ImageFrame make_scene(int width, int height, std::uint64_t seed, const SceneStyle& style = {}) {
  std::mt19937_64 rng(seed);
  GaussianFieldGenerator gen(width, height, style.texture_scale);
  const Map2D tex = gen.generate(rng).first;
  std::uniform_real_distribution<double> phase(0.0, style.board_period);
  const double ox = phase(rng), oy = phase(rng);
  const double half = style.board_period / 2.0;
  // Smooth board: product of sines saturated through tanh, edge width ~ texture_scale.
  const double sharp = style.board_period / (std::numbers::pi * style.texture_scale);
  std::vector<float> px(static_cast<std::size_t>(width) * height);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const std::size_t k = static_cast<std::size_t>(y) * width + x;
      const double sx = std::sin(std::numbers::pi * (x + ox) / half);
      const double sy = std::sin(std::numbers::pi * (y + oy) / half);
      const double board = std::tanh(sharp * sx * sy);
      const double t = (1.0 - style.board_weight) * tex.data[k] / 3.0 + style.board_weight * board;
      px[k] = static_cast<float>(std::clamp(style.mean + 0.5 * style.contrast * t, 0.02, 0.98));
    }
  }
  return ImageFrame(width, height, std::move(px));
}

/// A labelled scenario entry; sequences are simulated on demand.
struct ScenarioEntry {
  std::string label;
  SimConfig config;
  double ground_truth = 0.0;
  double aperture_multiplier = 1.0;
};

struct ScenarioManifest {
  std::vector<ScenarioEntry> entries;
};

/// Cross product of Cn2 values and camera-shake levels. Seeds depend only on
/// the Cn2 index, so every motion level reuses the same random stream.
inline ScenarioManifest scenario_motion_sweep(const CameraGeometry& geom, const std::vector<double>& cn2_list,
                                              const std::vector<double>& motion_levels, const SimConfig& base = {}) {
  if (cn2_list.empty() || motion_levels.empty()) fail(ErrorKind::EmptyInput, "motion sweep needs Cn2 and motion lists");
  ScenarioManifest m;
  for (std::size_t ci = 0; ci < cn2_list.size(); ++ci) {
    const double cn2 = cn2_list[ci];
    for (double motion : motion_levels) {
      ScenarioEntry e;
      e.config = base;
      e.config.geom = geom;
      e.config.cn2_true = cn2;
      e.config.motion_px = motion;
      e.config.seed = mix_seed(base.seed, ci);
      e.config.validate();
      e.ground_truth = cn2;
      char buf[96];
      std::snprintf(buf, sizeof buf, "cn2=%.3e,motion=%gpx", cn2, motion);
      e.label = buf;
      m.entries.push_back(std::move(e));
    }
  }
  return m;
}

inline std::vector<double> default_aperture_multipliers() { return {1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 51.6}; }

/// Aperture diameter scaled per multiplier; ground truth is unchanged. Seeds
/// depend only on the Cn2 index (common random numbers across apertures).
inline ScenarioManifest scenario_aperture_sweep(const CameraGeometry& base_geom,
                                                const std::vector<double>& diameter_multipliers,
                                                const std::vector<double>& cn2_list, const SimConfig& base = {}) {
  if (cn2_list.empty() || diameter_multipliers.empty())
    fail(ErrorKind::EmptyInput, "aperture sweep needs multiplier and Cn2 lists");
  ScenarioManifest m;
  for (double mult : diameter_multipliers) {
    if (!(mult >= 1.0)) fail(ErrorKind::Validation, "aperture multipliers must be >= 1");
    for (std::size_t ci = 0; ci < cn2_list.size(); ++ci) {
      const double cn2 = cn2_list[ci];
      ScenarioEntry e;
      e.config = base;
      e.config.geom = base_geom;
      e.config.geom.aperture_d *= mult;
      e.config.cn2_true = cn2;
      e.config.seed = mix_seed(base.seed, ci);
      e.config.validate();
      e.ground_truth = cn2;
      e.aperture_multiplier = mult;
      char buf[96];
      std::snprintf(buf, sizeof buf, "cn2=%.3e,aperture=x%g", cn2, mult);
      e.label = buf;
      m.entries.push_back(std::move(e));
    }
  }
  return m;
}

inline SimResult simulate(const ImageFrame& clean, const ScenarioEntry& entry) {
  return simulate_sequence(clean, entry.config);
}

}  // namespace cn2::sim
