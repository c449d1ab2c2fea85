#pragma once
// Classical image-gradient Cn2 estimator: temporal intensity variance divided by
// squared spatial gradient gives angle-of-arrival variance in px^2, which the
// camera geometry converts to Cn2.

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cn2/error.hpp"
#include "cn2/imaging.hpp"
#include "cn2/stats.hpp"

namespace cn2 {

/// Optical constants of the imaging path.
struct CameraGeometry {
  double pfov = 5.95e-6;        // radians per pixel
  double aperture_d = 0.06;     // m
  double path_length_l = 724.0; // m
  double turbulence_p = 1.1;    // dimensionless

  void validate() const {
    if (!(pfov > 0) || !(aperture_d > 0) || !(path_length_l > 0) || !(turbulence_p > 0) || !std::isfinite(pfov) ||
        !std::isfinite(aperture_d) || !std::isfinite(path_length_l))
      fail(ErrorKind::Validation, "camera geometry values must be finite and strictly positive");
    if (turbulence_p < 0.5 || turbulence_p > 5.0)
      fail(ErrorKind::Validation, "turbulence constant P must lie in [0.5, 5]");
  }

  friend bool operator==(const CameraGeometry&, const CameraGeometry&) = default;
};

/// M = PFOV^2 * D^(1/3) / (L * P), the factor converting px^2 of tilt variance into Cn2.
inline double geometry_scalar(const CameraGeometry& g) {
  g.validate();
  return g.pfov * g.pfov * std::cbrt(g.aperture_d) / (g.path_length_l * g.turbulence_p);
}

enum class ReductionOrder {
  RatioOfMeans,  // mean(var) / mean(grad^2)
  MeanOfRatios,  // mean(var / grad^2) over pixels above the degenerate threshold
};

struct EstimatorOptions {
  GradientKernel kernel{};
  ReductionOrder reduction = ReductionOrder::RatioOfMeans;
  int border_margin = 2;
  double degenerate_threshold = 1e-12;
};

struct Cn2Estimate {
  double value = 0.0;  // m^(-2/3)
  std::int64_t timestamp_us = 0;
  std::size_t n_frames = 0;
  GradientKernel kernel{};
  Roi roi{};
  double turbulence_p = 0.0;
  double displacement_variance_px2 = 0.0;
};

/// Tilt variance in px^2 over the ROI, before the geometry factor.
inline double displacement_variance(std::span<const ImageFrame> frames, const Roi& roi,
                                    const EstimatorOptions& opt = {}) {
  if (frames.size() < 2)
    fail(ErrorKind::InsufficientFrames, "estimation needs at least 2 frames, got " + std::to_string(frames.size()));
  require_roi(roi, frames[0].width(), frames[0].height());
  if (roi.size < Roi::kMinEstimationSize)
    fail(ErrorKind::Bounds, "estimation ROI must be at least " + std::to_string(Roi::kMinEstimationSize) + " px");

  const Map2D var = temporal_variance_map(frames);
  const Map2D grad = mean_gradient_sq_map(frames, opt.kernel);
  const InteriorWindow win = interior_window(roi, var.width, var.height, opt.border_margin);

  if (opt.reduction == ReductionOrder::RatioOfMeans) {
    const double g = window_mean(grad, win);
    if (g < opt.degenerate_threshold)
      fail(ErrorKind::DegenerateScene, "mean squared gradient " + std::to_string(g) + " is below the guard");
    return window_mean(var, win) / g;
  }
  double sum = 0.0;
  std::size_t used = 0;
  for (int y = win.y_begin; y < win.y_end; ++y)
    for (int x = win.x_begin; x < win.x_end; ++x) {
      const double g = grad.at(x, y);
      if (g < opt.degenerate_threshold) continue;
      sum += var.at(x, y) / g;
      ++used;
    }
  if (used == 0) fail(ErrorKind::DegenerateScene, "no ROI pixel has a gradient above the guard");
  return sum / static_cast<double>(used);
}

inline Cn2Estimate estimate_cn2(std::span<const ImageFrame> frames, const Roi& roi, const CameraGeometry& geom,
                                const EstimatorOptions& opt = {}) {
  const double m = geometry_scalar(geom);
  const double dvar = displacement_variance(frames, roi, opt);
  Cn2Estimate e;
  e.displacement_variance_px2 = dvar;
  e.value = m * dvar;
  e.timestamp_us = frames[frames.size() / 2].timestamp_us();
  e.n_frames = frames.size();
  e.kernel = opt.kernel;
  e.roi = roi;
  e.turbulence_p = geom.turbulence_p;
  if (!std::isfinite(e.value) || e.value < 0) fail(ErrorKind::NumericalGuard, "non-finite Cn2 estimate");
  return e;
}

inline Cn2Estimate estimate_cn2(const ImageSequence& seq, const Roi& roi, const CameraGeometry& geom,
                                const EstimatorOptions& opt = {}) {
  return estimate_cn2(seq.frames(), roi, geom, opt);
}

/// One slot per input group; a failed group leaves a gap with the reason.
struct SeriesEntry {
  std::optional<Cn2Estimate> estimate;
  std::string error;
};

inline std::vector<SeriesEntry> estimate_series(std::span<const ImageSequence> groups, const Roi& roi,
                                                const CameraGeometry& geom, const EstimatorOptions& opt = {}) {
  std::vector<SeriesEntry> out(groups.size());
  for (std::size_t i = 0; i < groups.size(); ++i) {
    try {
      out[i].estimate = estimate_cn2(groups[i], roi, geom, opt);
    } catch (const Error& e) {
      out[i].error = e.what();
    }
  }
  return out;
}

struct MinuteValue {
  std::int64_t minute_timestamp_us = 0;
  double value = 0.0;
  std::size_t n_groups = 0;
  std::size_t n_frames = 0;
};

/// Per-minute median of the non-gap entries, ordered by minute.
inline std::vector<MinuteValue> minute_median(std::span<const SeriesEntry> entries) {
  std::map<std::int64_t, std::vector<const Cn2Estimate*>> by_minute;
  for (const auto& e : entries)
    if (e.estimate) by_minute[minute_floor(e.estimate->timestamp_us)].push_back(&*e.estimate);
  std::vector<MinuteValue> out;
  for (const auto& [minute, ests] : by_minute) {
    std::vector<double> vals;
    std::size_t frames = 0;
    for (const auto* e : ests) {
      vals.push_back(e->value);
      frames += e->n_frames;
    }
    out.push_back({minute, median(vals), ests.size(), frames});
  }
  return out;
}

}  // namespace cn2
