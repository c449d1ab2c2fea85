#pragma once
// Core image types and the per-pixel statistics shared by every estimator.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cn2/error.hpp"

namespace cn2 {

/// Row-major 2D array.
template <class T>
struct Grid {
  int width = 0;
  int height = 0;
  std::vector<T> data;

  Grid() = default;
  Grid(int w, int h, T fill = T{}) : width(w), height(h), data(static_cast<std::size_t>(w) * h, fill) {}

  T& at(int x, int y) { return data[static_cast<std::size_t>(y) * width + x]; }
  const T& at(int x, int y) const { return data[static_cast<std::size_t>(y) * width + x]; }

  /// Clamped read, i.e. replicate padding.
  const T& clamped(int x, int y) const {
    return at(std::clamp(x, 0, width - 1), std::clamp(y, 0, height - 1));
  }

  std::size_t size() const { return data.size(); }
};

using Map2D = Grid<double>;

/// Grayscale luminance frame, values in [0,1].
class ImageFrame {
 public:
  ImageFrame() = default;

  ImageFrame(int width, int height, std::vector<float> pixels, std::int64_t timestamp_us = 0,
             std::optional<double> exposure_s = std::nullopt)
      : width_(width),
        height_(height),
        pixels_(std::move(pixels)),
        timestamp_us_(timestamp_us),
        exposure_s_(exposure_s) {
    if (width_ < 1 || height_ < 1)
      fail(ErrorKind::Dimension, "frame must be at least 1x1, got " + std::to_string(width_) + "x" +
                                     std::to_string(height_));
    if (pixels_.size() != static_cast<std::size_t>(width_) * height_)
      fail(ErrorKind::Dimension, "pixel buffer length does not match width*height");
    for (float v : pixels_)
      if (!std::isfinite(v) || v < 0.0f || v > 1.0f)
        fail(ErrorKind::Validation, "pixel values must be finite and within [0,1]");
  }

  /// Builds a frame from arbitrary values, clamping into [0,1].
  static ImageFrame clamped(int width, int height, std::vector<float> pixels, std::int64_t timestamp_us = 0) {
    for (float& v : pixels) v = std::isfinite(v) ? std::clamp(v, 0.0f, 1.0f) : 0.0f;
    return ImageFrame(width, height, std::move(pixels), timestamp_us);
  }

  int width() const { return width_; }
  int height() const { return height_; }
  std::int64_t timestamp_us() const { return timestamp_us_; }
  void set_timestamp_us(std::int64_t t) { timestamp_us_ = t; }
  std::optional<double> exposure_s() const { return exposure_s_; }
  void set_exposure_s(std::optional<double> e) { exposure_s_ = e; }

  std::span<const float> pixels() const { return pixels_; }
  float at(int x, int y) const { return pixels_[static_cast<std::size_t>(y) * width_ + x]; }
  float clamped_at(int x, int y) const {
    return at(std::clamp(x, 0, width_ - 1), std::clamp(y, 0, height_ - 1));
  }

  bool same_size(const ImageFrame& o) const { return width_ == o.width_ && height_ == o.height_; }

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<float> pixels_;
  std::int64_t timestamp_us_ = 0;
  std::optional<double> exposure_s_;
};

/// Ordered stack of equally sized frames (at least two).
class ImageSequence {
 public:
  ImageSequence() = default;

  explicit ImageSequence(std::vector<ImageFrame> frames, std::string source_id = {})
      : frames_(std::move(frames)), source_id_(std::move(source_id)) {
    if (frames_.size() < 2)
      fail(ErrorKind::InsufficientFrames, "a sequence needs at least 2 frames, got " + std::to_string(frames_.size()));
    for (std::size_t i = 1; i < frames_.size(); ++i) {
      if (!frames_[i].same_size(frames_[0]))
        fail(ErrorKind::Dimension, "frame " + std::to_string(i) + " differs in size from frame 0");
      if (frames_[i].timestamp_us() < frames_[i - 1].timestamp_us())
        fail(ErrorKind::Validation, "frame timestamps must be non-decreasing (frame " + std::to_string(i) + ")");
    }
  }

  std::span<const ImageFrame> frames() const { return frames_; }
  const ImageFrame& operator[](std::size_t i) const { return frames_[i]; }
  std::size_t size() const { return frames_.size(); }
  int width() const { return frames_.empty() ? 0 : frames_[0].width(); }
  int height() const { return frames_.empty() ? 0 : frames_[0].height(); }
  const std::string& source_id() const { return source_id_; }

  std::int64_t middle_timestamp_us() const { return frames_[frames_.size() / 2].timestamp_us(); }

 private:
  std::vector<ImageFrame> frames_;
  std::string source_id_;
};

/// Sub-pixel translation in pixels.
struct RigidShift {
  double dx = 0.0;
  double dy = 0.0;
};

/// Square region of interest.
struct Roi {
  int x0 = 0;
  int y0 = 0;
  int size = 0;

  static constexpr int kDefaultSize = 256;
  static constexpr int kMinEstimationSize = 8;

  bool fits(int width, int height) const {
    return x0 >= 0 && y0 >= 0 && size >= 1 && x0 + size <= width && y0 + size <= height;
  }

  /// The largest centred square that fits, capped at `max_size`.
  static Roi centered(int width, int height, int max_size = kDefaultSize) {
    int s = std::min({width, height, max_size});
    return Roi{(width - s) / 2, (height - s) / 2, s};
  }

  friend bool operator==(const Roi&, const Roi&) = default;
};

inline void require_roi(const Roi& roi, int width, int height) {
  if (!roi.fits(width, height))
    fail(ErrorKind::Bounds, "ROI (" + std::to_string(roi.x0) + "," + std::to_string(roi.y0) + "," +
                                std::to_string(roi.size) + ") exceeds " + std::to_string(width) + "x" +
                                std::to_string(height) + " frame");
}

enum class KernelVariant { Sobel, Prewitt, CentralDifference, IntermediateDifference };

inline std::string to_string(KernelVariant v) {
  switch (v) {
    case KernelVariant::Sobel: return "sobel";
    case KernelVariant::Prewitt: return "prewitt";
    case KernelVariant::CentralDifference: return "central";
    case KernelVariant::IntermediateDifference: return "intermediate";
  }
  return "?";
}

inline KernelVariant parse_kernel(const std::string& name) {
  if (name == "sobel") return KernelVariant::Sobel;
  if (name == "prewitt") return KernelVariant::Prewitt;
  if (name == "central") return KernelVariant::CentralDifference;
  if (name == "intermediate") return KernelVariant::IntermediateDifference;
  fail(ErrorKind::Config, "unknown gradient kernel '" + name + "'");
}

/// Derivative stencil pair. The x stencil is stored as a 3x3 cross-correlation
/// mask centred on the output pixel; the y stencil is its transpose.
struct GradientKernel {
  KernelVariant variant = KernelVariant::CentralDifference;
  /// Divides Sobel by 4 and Prewitt by 3 so the smoothing weights sum to one.
  bool normalized = false;

  using Mask = std::array<std::array<double, 3>, 3>;  // [row][col]

  Mask x_mask() const {
    Mask m{};
    switch (variant) {
      case KernelVariant::Sobel:
        m = {{{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}}};
        if (normalized) scale(m, 0.25);
        break;
      case KernelVariant::Prewitt:
        m = {{{-1, 0, 1}, {-1, 0, 1}, {-1, 0, 1}}};
        if (normalized) scale(m, 1.0 / 3.0);
        break;
      case KernelVariant::CentralDifference:
        m[1] = {-0.5, 0.0, 0.5};
        break;
      case KernelVariant::IntermediateDifference:
        m[1] = {0.0, -1.0, 1.0};
        break;
    }
    return m;
  }

  Mask y_mask() const {
    Mask x = x_mask(), y{};
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) y[r][c] = x[c][r];
    return y;
  }

  /// Minimum frame side the stencil needs.
  int support() const { return variant == KernelVariant::IntermediateDifference ? 2 : 3; }

  std::string name() const { return to_string(variant) + (normalized ? "-normalized" : ""); }

 private:
  static void scale(Mask& m, double s) {
    for (auto& row : m)
      for (auto& v : row) v *= s;
  }
};

/// Planar RGB image with values in [0,1].
struct RgbImage {
  int width = 0;
  int height = 0;
  std::array<std::vector<float>, 3> channels;
};

/// BT.601 luma.
inline ImageFrame to_grayscale(const RgbImage& rgb, std::int64_t timestamp_us = 0) {
  const std::size_t n = static_cast<std::size_t>(std::max(rgb.width, 0)) * std::max(rgb.height, 0);
  if (n == 0) fail(ErrorKind::Dimension, "empty RGB image");
  for (const auto& ch : rgb.channels)
    if (ch.size() != n) fail(ErrorKind::Dimension, "RGB channel sizes do not match width*height");
  std::vector<float> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    double y = 0.299 * rgb.channels[0][i] + 0.587 * rgb.channels[1][i] + 0.114 * rgb.channels[2][i];
    out[i] = static_cast<float>(std::clamp(y, 0.0, 1.0));
  }
  return ImageFrame(rgb.width, rgb.height, std::move(out), timestamp_us);
}

inline ImageFrame crop(const ImageFrame& frame, const Roi& roi) {
  require_roi(roi, frame.width(), frame.height());
  std::vector<float> out(static_cast<std::size_t>(roi.size) * roi.size);
  for (int y = 0; y < roi.size; ++y)
    for (int x = 0; x < roi.size; ++x)
      out[static_cast<std::size_t>(y) * roi.size + x] = frame.at(roi.x0 + x, roi.y0 + y);
  return ImageFrame(roi.size, roi.size, std::move(out), frame.timestamp_us(), frame.exposure_s());
}

inline ImageSequence crop(const ImageSequence& seq, const Roi& roi) {
  std::vector<ImageFrame> frames;
  frames.reserve(seq.size());
  for (const auto& f : seq.frames()) frames.push_back(crop(f, roi));
  return ImageSequence(std::move(frames), seq.source_id());
}

/// Per-pixel unbiased variance of intensity across frames.
inline Map2D temporal_variance_map(std::span<const ImageFrame> frames) {
  if (frames.size() < 2)
    fail(ErrorKind::InsufficientFrames, "temporal variance needs at least 2 frames, got " +
                                            std::to_string(frames.size()));
  const int w = frames[0].width(), h = frames[0].height();
  for (const auto& f : frames)
    if (f.width() != w || f.height() != h) fail(ErrorKind::Dimension, "frames differ in size");
  const std::size_t n = static_cast<std::size_t>(w) * h;
  std::vector<double> mean(n, 0.0);
  for (const auto& f : frames) {
    auto px = f.pixels();
    for (std::size_t i = 0; i < n; ++i) mean[i] += px[i];
  }
  const double inv = 1.0 / static_cast<double>(frames.size());
  for (auto& m : mean) m *= inv;
  Map2D var(w, h, 0.0);
  for (const auto& f : frames) {
    auto px = f.pixels();
    for (std::size_t i = 0; i < n; ++i) {
      double d = px[i] - mean[i];
      var.data[i] += d * d;
    }
  }
  const double denom = 1.0 / static_cast<double>(frames.size() - 1);
  for (auto& v : var.data) v *= denom;
  return var;
}

inline Map2D temporal_variance_map(const ImageSequence& seq) { return temporal_variance_map(seq.frames()); }

/// Per-pixel Gx^2 + Gy^2 with replicate padding at the borders.
inline Map2D spatial_gradient_sq_map(const ImageFrame& frame, const GradientKernel& kernel) {
  const int w = frame.width(), h = frame.height();
  if (w < kernel.support() || h < kernel.support())
    fail(ErrorKind::Dimension, "frame " + std::to_string(w) + "x" + std::to_string(h) +
                                   " is smaller than the " + kernel.name() + " kernel");
  const auto kx = kernel.x_mask();
  const auto ky = kernel.y_mask();
  Map2D out(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double gx = 0.0, gy = 0.0;
      for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 3; ++c) {
          if (kx[r][c] == 0.0 && ky[r][c] == 0.0) continue;
          double v = frame.clamped_at(x + c - 1, y + r - 1);
          gx += kx[r][c] * v;
          gy += ky[r][c] * v;
        }
      }
      out.at(x, y) = gx * gx + gy * gy;
    }
  }
  return out;
}

/// Mean of the gradient-squared map over all frames.
inline Map2D mean_gradient_sq_map(std::span<const ImageFrame> frames, const GradientKernel& kernel) {
  if (frames.empty()) fail(ErrorKind::EmptyInput, "no frames");
  Map2D acc = spatial_gradient_sq_map(frames[0], kernel);
  for (std::size_t i = 1; i < frames.size(); ++i) {
    Map2D g = spatial_gradient_sq_map(frames[i], kernel);
    for (std::size_t k = 0; k < acc.size(); ++k) acc.data[k] += g.data[k];
  }
  const double inv = 1.0 / static_cast<double>(frames.size());
  for (auto& v : acc.data) v *= inv;
  return acc;
}

/// Pixels of `roi` that sit at least `margin` pixels inside both the ROI and the frame.
struct InteriorWindow {
  int x_begin, x_end, y_begin, y_end;
  std::size_t count() const {
    return static_cast<std::size_t>(std::max(0, x_end - x_begin)) * std::max(0, y_end - y_begin);
  }
};

inline InteriorWindow interior_window(const Roi& roi, int width, int height, int margin) {
  InteriorWindow w{std::max(roi.x0 + margin, margin), std::min(roi.x0 + roi.size - margin, width - margin),
                   std::max(roi.y0 + margin, margin), std::min(roi.y0 + roi.size - margin, height - margin)};
  if (w.count() == 0) fail(ErrorKind::Dimension, "ROI has no interior pixels after the border margin");
  return w;
}

inline double window_mean(const Map2D& map, const InteriorWindow& win) {
  double sum = 0.0;
  for (int y = win.y_begin; y < win.y_end; ++y)
    for (int x = win.x_begin; x < win.x_end; ++x) sum += map.at(x, y);
  return sum / static_cast<double>(win.count());
}

/// Bilinear sample with replicate padding.
inline double sample_bilinear(const ImageFrame& f, double x, double y) {
  const double fx = std::floor(x), fy = std::floor(y);
  const int x0 = static_cast<int>(fx), y0 = static_cast<int>(fy);
  const double ax = x - fx, ay = y - fy;
  const double v00 = f.clamped_at(x0, y0), v10 = f.clamped_at(x0 + 1, y0);
  const double v01 = f.clamped_at(x0, y0 + 1), v11 = f.clamped_at(x0 + 1, y0 + 1);
  return (1 - ay) * ((1 - ax) * v00 + ax * v10) + ay * ((1 - ax) * v01 + ax * v11);
}

/// Translates frame content by (dx, dy): out(x, y) = in(x - dx, y - dy).
inline ImageFrame translate_bilinear(const ImageFrame& f, double dx, double dy) {
  const int w = f.width(), h = f.height();
  std::vector<float> out(static_cast<std::size_t>(w) * h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      out[static_cast<std::size_t>(y) * w + x] = static_cast<float>(sample_bilinear(f, x - dx, y - dy));
  ImageFrame t = ImageFrame::clamped(w, h, std::move(out), f.timestamp_us());
  t.set_exposure_s(f.exposure_s());
  return t;
}

}  // namespace cn2
