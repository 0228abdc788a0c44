#pragma once

#include <string>
#include <vector>

namespace mmoe {

struct ChartSeries {
    std::string label;
    std::string color;  // CSS color
    std::vector<double> ys;
};

// Minimal line chart over integer x = 0..n-1 with axis ticks and a legend.
void write_line_chart_svg(const std::string& path, const std::string& title, const std::string& x_label,
                          const std::string& y_label, const std::vector<ChartSeries>& series);

}  // namespace mmoe
