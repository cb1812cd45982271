#pragma once

// Minimal deterministic SVG output: line plots with interquartile bands, and box summaries.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "kinflow/error.hpp"
#include "kinflow/experiments.hpp"
#include "kinflow/sampler.hpp"

namespace kinflow {

struct NamedBand {
  std::string name;
  std::string color;
  SeriesBand band;
};

struct NamedSample {
  std::string name;
  std::vector<double> values;
};

namespace svg {

inline constexpr double kWidth = 640.0;
inline constexpr double kHeight = 400.0;
inline constexpr double kLeft = 70.0;
inline constexpr double kRight = 20.0;
inline constexpr double kTop = 40.0;
inline constexpr double kBottom = 50.0;

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string tick(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

inline std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      default: out += c;
    }
  }
  return out;
}

struct Frame {
  double x0, x1, y0, y1;
  double px(double x) const { return kLeft + (x - x0) / (x1 - x0) * (kWidth - kLeft - kRight); }
  double py(double y) const { return kHeight - kBottom - (y - y0) / (y1 - y0) * (kHeight - kTop - kBottom); }
};

inline void header(std::ostream& os, const std::string& title) {
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
     << "\" viewBox=\"0 0 " << kWidth << ' ' << kHeight << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<text x=\"" << num(kWidth / 2) << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << escape(title)
     << "</text>\n";
}

inline void axes(std::ostream& os, const Frame& f, const std::string& xlabel, const std::string& ylabel,
                 bool x_ticks = true) {
  const double l = kLeft, r = kWidth - kRight, t = kTop, b = kHeight - kBottom;
  os << "<path d=\"M" << num(l) << ' ' << num(t) << "V" << num(b) << "H" << num(r)
     << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double yv = f.y0 + (f.y1 - f.y0) * k / 4.0;
    os << "<text x=\"" << num(l - 6) << "\" y=\"" << num(f.py(yv) + 4) << "\" text-anchor=\"end\">" << tick(yv)
       << "</text>\n";
    if (x_ticks) {
      const double xv = f.x0 + (f.x1 - f.x0) * k / 4.0;
      os << "<text x=\"" << num(f.px(xv)) << "\" y=\"" << num(b + 16) << "\" text-anchor=\"middle\">" << tick(xv)
         << "</text>\n";
    }
  }
  os << "<text x=\"" << num((l + r) / 2) << "\" y=\"" << num(kHeight - 12) << "\" text-anchor=\"middle\">"
     << escape(xlabel) << "</text>\n";
  os << "<text x=\"16\" y=\"" << num((t + b) / 2) << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
     << num((t + b) / 2) << ")\">" << escape(ylabel) << "</text>\n";
}

}  // namespace svg

/// Mean curves with shaded interquartile bands, one per series.
inline std::string band_plot_svg(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                                 const std::vector<NamedBand>& series) {
  require(!series.empty(), "nothing to plot");
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = 0.0, y1 = 0.0;
  for (const auto& s : series) {
    require(!s.band.t.empty(), "empty series");
    x0 = std::min(x0, s.band.t.front());
    x1 = std::max(x1, s.band.t.back());
    for (double v : s.band.q75) y1 = std::max(y1, v);
    for (double v : s.band.mean) y1 = std::max(y1, v);
  }
  if (!(x1 > x0)) x1 = x0 + 1.0;
  if (!(y1 > y0)) y1 = y0 + 1.0;
  const svg::Frame f{x0, x1, y0, y1 * 1.05};
  std::ostringstream os;
  svg::header(os, title);
  svg::axes(os, f, xlabel, ylabel);
  for (const auto& s : series) {
    const auto& b = s.band;
    os << "<path d=\"";
    for (std::size_t j = 0; j < b.t.size(); ++j) os << (j ? "L" : "M") << svg::num(f.px(b.t[j])) << ' ' << svg::num(f.py(b.q75[j]));
    for (std::size_t j = b.t.size(); j-- > 0;) os << "L" << svg::num(f.px(b.t[j])) << ' ' << svg::num(f.py(b.q25[j]));
    os << "Z\" fill=\"" << s.color << "\" fill-opacity=\"0.2\" stroke=\"none\"/>\n";
    os << "<path d=\"";
    for (std::size_t j = 0; j < b.t.size(); ++j) os << (j ? "L" : "M") << svg::num(f.px(b.t[j])) << ' ' << svg::num(f.py(b.mean[j]));
    os << "\" fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"1.5\"/>\n";
  }
  for (std::size_t k = 0; k < series.size(); ++k) {
    const double y = svg::kTop + 14.0 * static_cast<double>(k) + 6.0;
    os << "<rect x=\"" << svg::num(svg::kLeft + 10) << "\" y=\"" << svg::num(y - 8) << "\" width=\"12\" height=\"8\" fill=\""
       << series[k].color << "\"/><text x=\"" << svg::num(svg::kLeft + 28) << "\" y=\"" << svg::num(y) << "\">"
       << svg::escape(series[k].name) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

/// Box summaries (whiskers at min/max, box at quartiles, line at median).
inline std::string box_plot_svg(const std::string& title, const std::string& ylabel,
                                const std::vector<NamedSample>& groups) {
  require(!groups.empty(), "nothing to plot");
  double y1 = 0.0;
  for (const auto& g : groups) {
    require(!g.values.empty(), "empty group " + g.name);
    for (double v : g.values) y1 = std::max(y1, v);
  }
  if (!(y1 > 0.0)) y1 = 1.0;
  const double n = static_cast<double>(groups.size());
  const svg::Frame f{0.0, n, 0.0, y1 * 1.05};
  std::ostringstream os;
  svg::header(os, title);
  svg::axes(os, f, "", ylabel, false);
  for (std::size_t k = 0; k < groups.size(); ++k) {
    const auto& v = groups[k].values;
    const double lo = *std::min_element(v.begin(), v.end());
    const double hi = *std::max_element(v.begin(), v.end());
    const double q1 = quantile(v, 0.25), med = quantile(v, 0.5), q3 = quantile(v, 0.75);
    const double cx = f.px(static_cast<double>(k) + 0.5);
    const double w = 0.3 * (f.px(1.0) - f.px(0.0));
    os << "<path d=\"M" << svg::num(cx) << ' ' << svg::num(f.py(lo)) << "V" << svg::num(f.py(q1)) << "M" << svg::num(cx)
       << ' ' << svg::num(f.py(q3)) << "V" << svg::num(f.py(hi)) << "\" stroke=\"black\"/>\n";
    os << "<rect x=\"" << svg::num(cx - w / 2) << "\" y=\"" << svg::num(f.py(q3)) << "\" width=\"" << svg::num(w)
       << "\" height=\"" << svg::num(f.py(q1) - f.py(q3)) << "\" fill=\"#9ecae1\" stroke=\"black\"/>\n";
    os << "<path d=\"M" << svg::num(cx - w / 2) << ' ' << svg::num(f.py(med)) << "H" << svg::num(cx + w / 2)
       << "\" stroke=\"black\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << svg::num(cx) << "\" y=\"" << svg::num(svg::kHeight - svg::kBottom + 16)
       << "\" text-anchor=\"middle\">" << svg::escape(groups[k].name) << " (n=" << v.size() << ")</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  os << text;
}

/// Power and cumulative-energy bands from parsed trace files.
inline SeriesBand power_band(const std::vector<TraceRecord>& traces) {
  require(!traces.empty(), "empty trace set");
  std::vector<double> t(traces.front().t.begin(), traces.front().t.end() - 1);
  std::vector<std::vector<double>> s;
  for (const auto& r : traces) s.emplace_back(r.power.begin(), r.power.end() - 1);
  return band(t, s);
}

inline SeriesBand energy_band(const std::vector<TraceRecord>& traces) {
  require(!traces.empty(), "empty trace set");
  std::vector<std::vector<double>> s;
  for (const auto& r : traces) s.push_back(r.cum_kpe);
  return band(traces.front().t, s);
}

}  // namespace kinflow
