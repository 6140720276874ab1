#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace crossfi::plot {

struct Series {
  std::string name;
  // y per x tick; empty optional leaves a gap
  std::vector<std::optional<double>> values;
  bool dashed = false;
};

struct LineChart {
  std::string title;
  std::string x_label = "shots";
  std::string y_label = "accuracy";
  std::vector<std::string> x_ticks;
  std::vector<Series> series;
  // Horizontal dashed reference (e.g. in-domain accuracy).
  std::optional<double> reference;
  std::string reference_label = "in-domain";
};

// Standalone SVG document; x ticks are evenly spaced categories.
std::string render_svg(const LineChart& chart);
void write_svg(const LineChart& chart, const std::filesystem::path& path);

}  // namespace crossfi::plot
