#pragma once
// Minimal log-y line chart of truth and prediction over time, as SVG.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cn2/error.hpp"
#include "cn2/stats.hpp"

namespace cn2::svg {

struct Series {
  std::string label;
  std::string color;
  std::vector<std::pair<std::int64_t, double>> points;  // (timestamp us, value > 0)
};

struct ChartOptions {
  std::string title = "Cn2";
  int width = 900;
  int height = 420;
  /// Consecutive points further apart than this are not joined.
  std::int64_t max_join_gap_us = kMicrosPerMinute;
};

namespace detail {

inline std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

}  // namespace detail

/// Renders the series; non-positive values are skipped and leave a gap.
inline std::string line_chart(const std::vector<Series>& series, const ChartOptions& opt = {}) {
  std::int64_t t0 = 0, t1 = 0;
  double lo = 0.0, hi = 0.0;
  bool any = false;
  for (const auto& s : series)
    for (const auto& [t, v] : s.points) {
      if (!(v > 0) || !std::isfinite(v)) continue;
      const double lv = std::log10(v);
      if (!any) {
        t0 = t1 = t;
        lo = hi = lv;
        any = true;
      }
      t0 = std::min(t0, t);
      t1 = std::max(t1, t);
      lo = std::min(lo, lv);
      hi = std::max(hi, lv);
    }
  if (!any) fail(ErrorKind::EmptyInput, "chart has no positive values");
  lo = std::floor(lo);
  hi = std::ceil(hi);
  if (hi <= lo) hi = lo + 1;
  if (t1 == t0) t1 = t0 + kMicrosPerMinute;

  const double ml = 70, mr = 20, mt = 36, mb = 48;
  const double pw = opt.width - ml - mr, ph = opt.height - mt - mb;
  auto px = [&](std::int64_t t) { return ml + pw * static_cast<double>(t - t0) / static_cast<double>(t1 - t0); };
  auto py = [&](double v) { return mt + ph * (hi - std::log10(v)) / (hi - lo); };

  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << opt.width << "\" height=\"" << opt.height
    << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << opt.width / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">"
    << detail::escape(opt.title) << "</text>\n";
  for (int d = static_cast<int>(lo); d <= static_cast<int>(hi); ++d) {
    const double y = py(std::pow(10.0, d));
    o << "<line x1=\"" << ml << "\" x2=\"" << ml + pw << "\" y1=\"" << detail::num(y) << "\" y2=\"" << detail::num(y)
      << "\" stroke=\"#ddd\"/>\n";
    o << "<text x=\"" << ml - 6 << "\" y=\"" << detail::num(y + 4) << "\" text-anchor=\"end\">1e" << d << "</text>\n";
  }
  const double minutes = static_cast<double>(t1 - t0) / kMicrosPerMinute;
  for (int k = 0; k <= 4; ++k) {
    const double x = ml + pw * k / 4.0;
    o << "<text x=\"" << detail::num(x) << "\" y=\"" << opt.height - mb + 18 << "\" text-anchor=\"middle\">"
      << detail::num(minutes * k / 4.0) << "</text>\n";
  }
  o << "<text x=\"" << ml + pw / 2 << "\" y=\"" << opt.height - 8 << "\" text-anchor=\"middle\">minutes from start</text>\n";
  o << "<rect x=\"" << ml << "\" y=\"" << mt << "\" width=\"" << pw << "\" height=\"" << ph
    << "\" fill=\"none\" stroke=\"#444\"/>\n";

  for (std::size_t si = 0; si < series.size(); ++si) {
    const auto& s = series[si];
    std::vector<std::pair<std::int64_t, double>> pts;
    for (const auto& p : s.points)
      if (p.second > 0 && std::isfinite(p.second)) pts.push_back(p);
    std::sort(pts.begin(), pts.end());
    std::string path;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const bool join = i > 0 && pts[i].first - pts[i - 1].first <= opt.max_join_gap_us;
      path += (join ? " L" : " M") + detail::num(px(pts[i].first)) + " " + detail::num(py(pts[i].second));
    }
    o << "<path d=\"" << path << "\" fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"1.5\"/>\n";
    for (const auto& p : pts)
      o << "<circle cx=\"" << detail::num(px(p.first)) << "\" cy=\"" << detail::num(py(p.second))
        << "\" r=\"2\" fill=\"" << s.color << "\"/>\n";
    const double ly = mt + 14 + 16.0 * si;
    o << "<line x1=\"" << ml + pw - 120 << "\" x2=\"" << ml + pw - 100 << "\" y1=\"" << ly - 4 << "\" y2=\"" << ly - 4
      << "\" stroke=\"" << s.color << "\" stroke-width=\"2\"/>\n";
    o << "<text x=\"" << ml + pw - 94 << "\" y=\"" << ly << "\">" << detail::escape(s.label) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

}  // namespace cn2::svg
