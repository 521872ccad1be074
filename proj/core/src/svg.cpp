#include "cf/svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "cf/error.hpp"

namespace cf {

namespace {

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                          "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};
constexpr int kPaletteSize = 8;

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

std::string escape_xml(const std::string& s) {
  std::string out;
  out.reserve(s.size());
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

struct Frame {
  double x0, x1, y0, y1;     // data range
  int px0, px1, py0, py1;     // pixel box (py0 is the top edge)
  bool log_y;

  double sx(double x) const {
    const double t = x1 > x0 ? (x - x0) / (x1 - x0) : 0.5;
    return px0 + t * (px1 - px0);
  }
  double sy(double y) const {
    double a = y, lo = y0, hi = y1;
    if (log_y) {
      a = std::log10(std::max(a, 1e-300));
      lo = std::log10(std::max(lo, 1e-300));
      hi = std::log10(std::max(hi, 1e-300));
    }
    const double t = hi > lo ? (a - lo) / (hi - lo) : 0.5;
    return py1 - t * (py1 - py0);
  }
};

void append_axes(std::string& svg, const Frame& f, const ChartOptions& opts) {
  svg += "<rect x=\"" + std::to_string(f.px0) + "\" y=\"" + std::to_string(f.py0) +
         "\" width=\"" + std::to_string(f.px1 - f.px0) + "\" height=\"" +
         std::to_string(f.py1 - f.py0) + "\" fill=\"none\" stroke=\"#333\"/>\n";
  if (!opts.title.empty())
    svg += "<text x=\"" + std::to_string((f.px0 + f.px1) / 2) +
           "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\" font-weight=\"bold\">" +
           escape_xml(opts.title) + "</text>\n";
  if (!opts.x_label.empty())
    svg += "<text x=\"" + std::to_string((f.px0 + f.px1) / 2) + "\" y=\"" +
           std::to_string(f.py1 + 36) + "\" text-anchor=\"middle\" font-size=\"12\">" +
           escape_xml(opts.x_label) + "</text>\n";
  if (!opts.y_label.empty())
    svg += "<text x=\"14\" y=\"" + std::to_string((f.py0 + f.py1) / 2) +
           "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 14 " +
           std::to_string((f.py0 + f.py1) / 2) + ")\">" + escape_xml(opts.y_label) +
           "</text>\n";
}

void append_y_ticks(std::string& svg, const Frame& f) {
  constexpr int kTicks = 5;
  for (int i = 0; i <= kTicks; ++i) {
    double v;
    if (f.log_y) {
      const double lo = std::log10(std::max(f.y0, 1e-300));
      const double hi = std::log10(std::max(f.y1, 1e-300));
      v = std::pow(10.0, lo + (hi - lo) * i / kTicks);
    } else {
      v = f.y0 + (f.y1 - f.y0) * i / kTicks;
    }
    const double py = f.sy(v);
    svg += "<line x1=\"" + std::to_string(f.px0) + "\" y1=\"" + fmt(py) + "\" x2=\"" +
           std::to_string(f.px1) + "\" y2=\"" + fmt(py) +
           "\" stroke=\"#ddd\" stroke-width=\"0.5\"/>\n";
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.4g", v);
    svg += "<text x=\"" + std::to_string(f.px0 - 6) + "\" y=\"" + fmt(py + 4) +
           "\" text-anchor=\"end\" font-size=\"10\">" + buf + "</text>\n";
  }
}

std::string header(int w, int h) {
  return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(w) +
         "\" height=\"" + std::to_string(h) + "\" viewBox=\"0 0 " + std::to_string(w) +
         " " + std::to_string(h) +
         "\" font-family=\"sans-serif\">\n<rect width=\"100%\" height=\"100%\" "
         "fill=\"white\"/>\n";
}

}  // namespace

std::string render_line_chart(const std::vector<Series>& series, const ChartOptions& opts) {
  if (series.empty()) throw ParameterError("render_line_chart: no series");
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0;
  double y0 = x0, y1 = -x0;
  for (const auto& s : series) {
    if (s.x.size() != s.y.size())
      throw ParameterError("render_line_chart: series '" + s.label + "' is ragged");
    if (s.x.empty())
      throw ParameterError("render_line_chart: series '" + s.label + "' is empty");
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      if (opts.log_y && !(s.y[i] > 0.0)) continue;
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  }
  if (!std::isfinite(y0)) { y0 = 0.0; y1 = 1.0; }
  if (y1 <= y0) y1 = y0 + 1.0;
  if (!opts.log_y) {
    const double pad = 0.05 * (y1 - y0);
    y0 -= pad;
    y1 += pad;
  }

  Frame f{x0, x1, y0, y1, 56, opts.width - 16, 32, opts.height - 48, opts.log_y};
  std::string svg = header(opts.width, opts.height);
  append_y_ticks(svg, f);
  append_axes(svg, f, opts);

  for (std::size_t si = 0; si < series.size(); ++si) {
    const auto& s = series[si];
    const char* color = kPalette[si % kPaletteSize];
    std::string pts;
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      double y = s.y[i];
      if (opts.log_y && !(y > 0.0)) continue;
      if (!pts.empty()) pts += " ";
      pts += fmt(f.sx(s.x[i])) + "," + fmt(f.sy(y));
    }
    svg += "<polyline points=\"" + pts + "\" fill=\"none\" stroke=\"" + color +
           "\" stroke-width=\"1.5\"/>\n";
    // legend entry
    const int ly = 40 + static_cast<int>(si) * 16;
    svg += "<line x1=\"" + std::to_string(f.px1 - 150) + "\" y1=\"" + std::to_string(ly) +
           "\" x2=\"" + std::to_string(f.px1 - 130) + "\" y2=\"" + std::to_string(ly) +
           "\" stroke=\"" + color + "\" stroke-width=\"2\"/>\n";
    svg += "<text x=\"" + std::to_string(f.px1 - 124) + "\" y=\"" + std::to_string(ly + 4) +
           "\" font-size=\"11\">" + escape_xml(s.label) + "</text>\n";
  }
  svg += "</svg>\n";
  return svg;
}

std::string render_bar_chart(const std::vector<std::string>& labels,
                             const std::vector<double>& values, const ChartOptions& opts) {
  if (labels.size() != values.size())
    throw ParameterError("render_bar_chart: labels/values length mismatch");
  if (labels.empty()) throw ParameterError("render_bar_chart: no bars");
  double y1 = *std::max_element(values.begin(), values.end());
  double y0 = std::min(0.0, *std::min_element(values.begin(), values.end()));
  if (y1 <= y0) y1 = y0 + 1.0;
  y1 *= 1.05;

  Frame f{0.0, static_cast<double>(labels.size()), y0, y1,
          56, opts.width - 16, 32, opts.height - 48, false};
  std::string svg = header(opts.width, opts.height);
  append_y_ticks(svg, f);
  append_axes(svg, f, opts);

  const double slot = static_cast<double>(f.px1 - f.px0) / static_cast<double>(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double bx = f.px0 + slot * (static_cast<double>(i) + 0.15);
    const double bw = slot * 0.7;
    const double top = f.sy(std::max(values[i], 0.0));
    const double bot = f.sy(std::min(values[i], 0.0));
    svg += "<rect x=\"" + fmt(bx) + "\" y=\"" + fmt(top) + "\" width=\"" + fmt(bw) +
           "\" height=\"" + fmt(std::max(bot - top, 0.5)) + "\" fill=\"" +
           kPalette[i % kPaletteSize] + "\"/>\n";
    svg += "<text x=\"" + fmt(bx + bw / 2) + "\" y=\"" + std::to_string(f.py1 + 14) +
           "\" text-anchor=\"middle\" font-size=\"10\">" + escape_xml(labels[i]) +
           "</text>\n";
  }
  svg += "</svg>\n";
  return svg;
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path);
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw IoError("short write: " + path);
}

}  // namespace cf
