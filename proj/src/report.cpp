#include "mmoe/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "mmoe/util.hpp"

namespace mmoe {

void write_line_chart_svg(const std::string& path, const std::string& title, const std::string& x_label,
                          const std::string& y_label, const std::vector<ChartSeries>& series) {
    const double width = 640, height = 400;
    const double ml = 70, mr = 20, mt = 40, mb = 50;
    const double pw = width - ml - mr, ph = height - mt - mb;

    size_t n = 0;
    double ymin = std::numeric_limits<double>::infinity(), ymax = -ymin;
    for (const auto& s : series) {
        n = std::max(n, s.ys.size());
        for (double y : s.ys) {
            ymin = std::min(ymin, y);
            ymax = std::max(ymax, y);
        }
    }
    if (n == 0) {
        ymin = 0;
        ymax = 1;
        n = 1;
    }
    if (ymax - ymin < 1e-12) {
        ymax += 0.5;
        ymin -= 0.5;
    }
    const double pad = 0.05 * (ymax - ymin);
    ymin -= pad;
    ymax += pad;

    auto px = [&](size_t i) { return ml + (n == 1 ? 0.5 : static_cast<double>(i) / static_cast<double>(n - 1)) * pw; };
    auto py = [&](double y) { return mt + (1.0 - (y - ymin) / (ymax - ymin)) * ph; };

    std::ofstream f(path);
    if (!f) throw IoError("write_line_chart_svg: cannot open " + path);
    f << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n";
    f << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    f << "<text x=\"" << width / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << title << "</text>\n";
    f << "<line x1=\"" << ml << "\" y1=\"" << mt + ph << "\" x2=\"" << ml + pw << "\" y2=\"" << mt + ph
      << "\" stroke=\"black\"/>\n";
    f << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << mt + ph
      << "\" stroke=\"black\"/>\n";
    for (int k = 0; k <= 4; ++k) {
        const double y = ymin + (ymax - ymin) * k / 4.0;
        f << "<line x1=\"" << ml - 4 << "\" y1=\"" << py(y) << "\" x2=\"" << ml << "\" y2=\"" << py(y)
          << "\" stroke=\"black\"/>\n";
        f << "<text x=\"" << ml - 8 << "\" y=\"" << py(y) + 4 << "\" text-anchor=\"end\" font-size=\"11\">";
        f.precision(4);
        f << y << "</text>\n";
        const size_t xi = static_cast<size_t>(std::llround(static_cast<double>(n - 1) * k / 4.0));
        f << "<line x1=\"" << px(xi) << "\" y1=\"" << mt + ph << "\" x2=\"" << px(xi) << "\" y2=\"" << mt + ph + 4
          << "\" stroke=\"black\"/>\n";
        f << "<text x=\"" << px(xi) << "\" y=\"" << mt + ph + 18 << "\" text-anchor=\"middle\" font-size=\"11\">" << xi
          << "</text>\n";
    }
    f << "<text x=\"" << ml + pw / 2 << "\" y=\"" << height - 12 << "\" text-anchor=\"middle\" font-size=\"12\">"
      << x_label << "</text>\n";
    f << "<text x=\"16\" y=\"" << mt + ph / 2 << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 16 "
      << mt + ph / 2 << ")\">" << y_label << "</text>\n";

    for (size_t si = 0; si < series.size(); ++si) {
        const auto& s = series[si];
        if (s.ys.empty()) continue;
        f << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"1.8\" points=\"";
        for (size_t i = 0; i < s.ys.size(); ++i) f << px(i) << "," << py(s.ys[i]) << " ";
        f << "\"/>\n";
        const double lx = ml + pw - 150, ly = mt + 16 + 18 * static_cast<double>(si);
        f << "<line x1=\"" << lx << "\" y1=\"" << ly - 4 << "\" x2=\"" << lx + 24 << "\" y2=\"" << ly - 4
          << "\" stroke=\"" << s.color << "\" stroke-width=\"2\"/>\n";
        f << "<text x=\"" << lx + 30 << "\" y=\"" << ly << "\" font-size=\"12\">" << s.label << "</text>\n";
    }
    f << "</svg>\n";
    if (!f) throw IoError("write_line_chart_svg: write failed for " + path);
}

}  // namespace mmoe
