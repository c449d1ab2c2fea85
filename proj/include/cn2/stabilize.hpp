#pragma once
// Platform-motion correction: integer anchor alignment followed by sub-pixel
// phase correlation over the whole frame.

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgproc.hpp>

#include "cn2/error.hpp"
#include "cn2/imaging.hpp"

namespace cn2 {

struct AlignOptions {
  int max_shift = 32;              // px, search radius of both stages
  double min_correlation = 0.3;    // coarse NCC peak below this fails
  int fine_iterations = 4;
  double fine_tolerance = 1e-3;    // px, stop refining below this update
};

/// Aligned frames plus the correction applied to each (content moved by +shift).
struct AlignResult {
  ImageSequence sequence;
  std::vector<RigidShift> shifts;
  std::vector<std::string> warnings;
};

inline std::size_t default_reference_index(const ImageSequence& seq) { return seq.size() / 2; }

namespace detail {

inline cv::Mat to_mat(const ImageFrame& f) {
  cv::Mat m(f.height(), f.width(), CV_32F);
  std::copy(f.pixels().begin(), f.pixels().end(), m.ptr<float>());
  return m;
}

inline void check_reference(const ImageSequence& seq, std::size_t ref) {
  if (seq.size() < 2) fail(ErrorKind::InsufficientFrames, "alignment needs at least 2 frames");
  if (ref >= seq.size())
    fail(ErrorKind::Bounds, "reference index " + std::to_string(ref) + " outside sequence of " +
                                std::to_string(seq.size()));
}

inline void check_options(const AlignOptions& opt) {
  if (opt.max_shift < 0) fail(ErrorKind::Validation, "max_shift must be non-negative");
  if (opt.fine_iterations < 1) fail(ErrorKind::Validation, "fine_iterations must be >= 1");
}

inline double variance(const cv::Mat& m) {
  cv::Scalar mean, sd;
  cv::meanStdDev(m, mean, sd);
  return sd[0] * sd[0];
}

inline ImageFrame shifted(const ImageFrame& f, const RigidShift& s) {
  if (s.dx == 0.0 && s.dy == 0.0) return f;
  return translate_bilinear(f, s.dx, s.dy);
}

/// Hann-windowed, mean-removed spectrum.
class WindowedSpectrum {
 public:
  WindowedSpectrum(int width, int height) {
    cv::createHanningWindow(window_, cv::Size(width, height), CV_64F);
  }

  cv::Mat operator()(const cv::Mat& img32) const {
    cv::Mat d;
    img32.convertTo(d, CV_64F);
    d -= cv::mean(d)[0];
    d = d.mul(window_);
    cv::Mat spec;
    cv::dft(d, spec, cv::DFT_COMPLEX_OUTPUT);
    return spec;
  }

 private:
  cv::Mat window_;
};

inline constexpr double kWhiteningFloor = 1e-3;

/// Peak offset of p(-1), p(0), p(+1) by parabola fit, within [-0.5, 0.5].
inline double parabolic_offset(double pm, double p0, double pp) {
  const double denom = pm - 2.0 * p0 + pp;
  if (!(denom < 0.0)) return 0.0;
  return std::clamp(0.5 * (pm - pp) / denom, -0.5, 0.5);
}

/// Displacement s with cur(x) ~ ref(x - s), searched within |s| <= radius.
inline RigidShift phase_correlate(const cv::Mat& ref_spec, const cv::Mat& cur_spec, int radius) {
  cv::Mat cross;
  cv::mulSpectrums(cur_spec, ref_spec, cross, 0, true);
  std::vector<cv::Mat> parts;
  cv::split(cross, parts);
  cv::Mat mag;
  cv::magnitude(parts[0], parts[1], mag);
  double max_mag = 0.0;
  cv::minMaxLoc(mag, nullptr, &max_mag);
  // Regularized whitening: bins far below the peak stay cross-correlation weighted.
  mag += kWhiteningFloor * max_mag + 1e-300;
  parts[0] /= mag;
  parts[1] /= mag;
  cv::merge(parts, cross);
  cv::Mat surf;
  cv::dft(cross, surf, cv::DFT_INVERSE | cv::DFT_REAL_OUTPUT | cv::DFT_SCALE);

  const int w = surf.cols, h = surf.rows;
  const int rx = std::min(radius, (w - 1) / 2), ry = std::min(radius, (h - 1) / 2);
  auto at = [&](int x, int y) { return surf.at<double>(((y % h) + h) % h, ((x % w) + w) % w); };
  int bx = 0, by = 0;
  double best = -1e300;
  for (int y = -ry; y <= ry; ++y)
    for (int x = -rx; x <= rx; ++x)
      if (at(x, y) > best) {
        best = at(x, y);
        bx = x;
        by = y;
      }
  const double ox = w >= 3 ? parabolic_offset(at(bx - 1, by), best, at(bx + 1, by)) : 0.0;
  const double oy = h >= 3 ? parabolic_offset(at(bx, by - 1), best, at(bx, by + 1)) : 0.0;
  return {bx + ox, by + oy};
}

}  // namespace detail

/// Integer-pixel alignment of an anchor patch to the reference frame's patch
/// by normalized cross-correlation. Vacated borders replicate the edge.
inline AlignResult coarse_align(const ImageSequence& seq, const Roi& anchor,
                                std::optional<std::size_t> reference_index = std::nullopt,
                                const AlignOptions& opt = {}) {
  const std::size_t ref = reference_index.value_or(default_reference_index(seq));
  detail::check_reference(seq, ref);
  detail::check_options(opt);
  require_roi(anchor, seq.width(), seq.height());

  const cv::Rect patch(anchor.x0, anchor.y0, anchor.size, anchor.size);
  const cv::Mat templ = detail::to_mat(seq[ref])(patch).clone();
  if (detail::variance(templ) < 1e-12) fail(ErrorKind::AlignmentFailure, "anchor patch is uniform in the reference frame");

  const int x_lo = std::max(0, anchor.x0 - opt.max_shift), y_lo = std::max(0, anchor.y0 - opt.max_shift);
  const int x_hi = std::min(seq.width(), anchor.x0 + anchor.size + opt.max_shift);
  const int y_hi = std::min(seq.height(), anchor.y0 + anchor.size + opt.max_shift);
  const cv::Rect search(x_lo, y_lo, x_hi - x_lo, y_hi - y_lo);

  AlignResult out;
  std::vector<ImageFrame> frames;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (i == ref) {
      frames.push_back(seq[i]);
      out.shifts.push_back({});
      continue;
    }
    const cv::Mat region = detail::to_mat(seq[i])(search);
    cv::Mat score;
    cv::matchTemplate(region, templ, score, cv::TM_CCOEFF_NORMED);
    // Uniform windows in the frame produce undefined scores.
    cv::patchNaNs(score, -1.0);
    double peak = 0.0;
    cv::Point loc;
    cv::minMaxLoc(score, nullptr, &peak, nullptr, &loc);
    if (!(peak >= opt.min_correlation) || !std::isfinite(peak))
      fail(ErrorKind::AlignmentFailure, "frame " + std::to_string(i) + ": correlation peak " + std::to_string(peak) +
                                            " below " + std::to_string(opt.min_correlation));
    const RigidShift correction{static_cast<double>(anchor.x0 - (x_lo + loc.x)),
                                static_cast<double>(anchor.y0 - (y_lo + loc.y))};
    frames.push_back(detail::shifted(seq[i], correction));
    out.shifts.push_back(correction);
  }
  out.sequence = ImageSequence(std::move(frames), seq.source_id());
  return out;
}

/// Sub-pixel translation of each frame onto the reference by Hann-windowed
/// phase correlation with parabolic peak interpolation. The estimate is
/// refined by re-correlating the resampled frame; each output frame is
/// resampled once from its original with the accumulated correction.
inline AlignResult fine_align(const ImageSequence& seq, std::optional<std::size_t> reference_index = std::nullopt,
                              const AlignOptions& opt = {}) {
  const std::size_t ref = reference_index.value_or(default_reference_index(seq));
  detail::check_reference(seq, ref);
  detail::check_options(opt);

  const detail::WindowedSpectrum spectrum(seq.width(), seq.height());
  const cv::Mat ref_mat = detail::to_mat(seq[ref]);
  const bool ref_flat = detail::variance(ref_mat) < 1e-12;
  const cv::Mat ref_spec = spectrum(ref_mat);

  AlignResult out;
  std::vector<ImageFrame> frames;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    const cv::Mat cur = detail::to_mat(seq[i]);
    if (i == ref || ref_flat || detail::variance(cur) < 1e-12) {
      if (i != ref) out.warnings.push_back("frame " + std::to_string(i) + ": degenerate content, zero shift recorded");
      frames.push_back(seq[i]);
      out.shifts.push_back({});
      continue;
    }
    RigidShift corr{};
    ImageFrame moved = seq[i];
    for (int it = 0; it < opt.fine_iterations; ++it) {
      const RigidShift d = detail::phase_correlate(ref_spec, spectrum(detail::to_mat(moved)), opt.max_shift);
      corr.dx = std::clamp(corr.dx - d.dx, -1.0 * opt.max_shift, 1.0 * opt.max_shift);
      corr.dy = std::clamp(corr.dy - d.dy, -1.0 * opt.max_shift, 1.0 * opt.max_shift);
      moved = detail::shifted(seq[i], corr);
      if (std::hypot(d.dx, d.dy) < opt.fine_tolerance) break;
    }
    frames.push_back(std::move(moved));
    out.shifts.push_back(corr);
  }
  out.sequence = ImageSequence(std::move(frames), seq.source_id());
  return out;
}

/// Root-mean-square shift magnitude in pixels.
inline double residual_motion(std::span<const RigidShift> shifts) {
  if (shifts.empty()) fail(ErrorKind::EmptyInput, "residual_motion of an empty shift list");
  double acc = 0.0;
  for (const auto& s : shifts) acc += s.dx * s.dx + s.dy * s.dy;
  return std::sqrt(acc / static_cast<double>(shifts.size()));
}

struct StabilizeOptions {
  std::optional<Roi> anchor;  // defaults to a centred patch
  std::optional<std::size_t> reference_index;
  bool coarse = true;
  bool fine = true;
  AlignOptions align{};
};

/// Coarse then fine alignment; shifts are the total corrections per frame.
inline AlignResult stabilize(const ImageSequence& seq, const StabilizeOptions& opt = {}) {
  AlignResult total{seq, std::vector<RigidShift>(seq.size()), {}};
  if (opt.coarse) {
    const int side = std::max(8, std::min(seq.width(), seq.height()) / 2);
    const Roi anchor = opt.anchor.value_or(Roi::centered(seq.width(), seq.height(), std::min(side, 128)));
    total = coarse_align(seq, anchor, opt.reference_index, opt.align);
  }
  if (opt.fine) {
    AlignResult f = fine_align(total.sequence, opt.reference_index, opt.align);
    for (std::size_t i = 0; i < f.shifts.size(); ++i) {
      total.shifts[i].dx += f.shifts[i].dx;
      total.shifts[i].dy += f.shifts[i].dy;
    }
    total.sequence = std::move(f.sequence);
    total.warnings.insert(total.warnings.end(), f.warnings.begin(), f.warnings.end());
  }
  return total;
}

}  // namespace cn2
