#pragma once

#include <string>
#include <vector>

#include "cf/mat.hpp"

namespace cf {

// Minimal SVG chart writer for run reports. Output is a standalone .svg
// file; no external renderer is involved.

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;  // same length as x
};

struct ChartOptions {
  std::string title;
  std::string x_label;
  std::string y_label;
  int width = 720;
  int height = 440;
  bool log_y = false;
};

// Multi-series line chart. Throws ParameterError on empty/ragged input.
std::string render_line_chart(const std::vector<Series>& series, const ChartOptions& opts);

// Bar chart over categorical labels.
std::string render_bar_chart(const std::vector<std::string>& labels,
                             const std::vector<double>& values, const ChartOptions& opts);

void write_text_file(const std::string& path, const std::string& content);

}  // namespace cf
