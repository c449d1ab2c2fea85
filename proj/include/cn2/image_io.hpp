#pragma once
// Raster file decoding (PNG/TIFF, 8 or 16 bit, gray or colour) into ImageFrame.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "cn2/error.hpp"
#include "cn2/imaging.hpp"

namespace cn2::io {

namespace detail {

inline double max_code(int depth) {
  switch (depth) {
    case CV_8U: return 255.0;
    case CV_16U: return 65535.0;
    default: fail(ErrorKind::Io, "unsupported raster bit depth (need 8- or 16-bit unsigned)");
  }
}

}  // namespace detail

/// Decodes a raster file. Colour images go through the BT.601 luma conversion.
inline ImageFrame read_frame(const std::filesystem::path& path, std::int64_t timestamp_us = 0) {
  cv::Mat img = cv::imread(path.string(), cv::IMREAD_ANYDEPTH | cv::IMREAD_ANYCOLOR);
  if (img.empty()) fail(ErrorKind::Io, "cannot decode image '" + path.string() + "'");
  const double scale = 1.0 / detail::max_code(img.depth());
  const int w = img.cols, h = img.rows;
  cv::Mat f;
  img.convertTo(f, CV_32F, scale);
  if (f.channels() == 1) {
    std::vector<float> px(static_cast<std::size_t>(w) * h);
    for (int y = 0; y < h; ++y) {
      const float* row = f.ptr<float>(y);
      std::copy(row, row + w, px.begin() + static_cast<std::ptrdiff_t>(y) * w);
    }
    return ImageFrame::clamped(w, h, std::move(px), timestamp_us);
  }
  if (f.channels() != 3 && f.channels() != 4) fail(ErrorKind::Io, "unsupported channel count in '" + path.string() + "'");
  RgbImage rgb{w, h, {}};
  for (auto& ch : rgb.channels) ch.resize(static_cast<std::size_t>(w) * h);
  const int nc = f.channels();
  for (int y = 0; y < h; ++y) {
    const float* row = f.ptr<float>(y);
    for (int x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      // OpenCV stores BGR(A).
      rgb.channels[2][i] = row[x * nc + 0];
      rgb.channels[1][i] = row[x * nc + 1];
      rgb.channels[0][i] = row[x * nc + 2];
    }
  }
  return to_grayscale(rgb, timestamp_us);
}

/// Writes a 16-bit grayscale raster; the format follows the file extension.
inline void write_frame16(const std::filesystem::path& path, const ImageFrame& frame) {
  cv::Mat out(frame.height(), frame.width(), CV_16U);
  for (int y = 0; y < frame.height(); ++y) {
    auto* row = out.ptr<std::uint16_t>(y);
    for (int x = 0; x < frame.width(); ++x)
      row[x] = static_cast<std::uint16_t>(std::lround(static_cast<double>(frame.at(x, y)) * 65535.0));
  }
  if (!cv::imwrite(path.string(), out)) fail(ErrorKind::Io, "cannot write image '" + path.string() + "'");
}

}  // namespace cn2::io
