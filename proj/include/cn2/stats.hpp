#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "cn2/error.hpp"

namespace cn2 {

inline constexpr std::int64_t kMicrosPerSecond = 1'000'000;
inline constexpr std::int64_t kMicrosPerMinute = 60 * kMicrosPerSecond;

/// Truncates a timestamp to the start of its minute (floor, also for negative values).
inline std::int64_t minute_floor(std::int64_t t_us) {
  std::int64_t q = t_us / kMicrosPerMinute;
  if (t_us % kMicrosPerMinute != 0 && t_us < 0) --q;
  return q * kMicrosPerMinute;
}

/// Median; even counts average the two middle values.
inline double median(std::vector<double> v) {
  if (v.empty()) fail(ErrorKind::EmptyInput, "median of an empty set");
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  double hi = v[mid];
  if (v.size() % 2 == 1) return hi;
  double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lo + hi);
}

inline double mean(std::span<const double> v) {
  if (v.empty()) fail(ErrorKind::EmptyInput, "mean of an empty set");
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

/// Unbiased sample variance.
inline double sample_variance(std::span<const double> v) {
  if (v.size() < 2) fail(ErrorKind::InsufficientFrames, "sample variance needs at least 2 values");
  const double m = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size() - 1);
}

}  // namespace cn2
