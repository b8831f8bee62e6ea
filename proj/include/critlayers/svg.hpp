#pragma once

// Minimal SVG output for diagnostics: a CKA heatmap and multi-line layer plots.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "similarity.hpp"

namespace critlayers::svg {

namespace detail {

inline std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}

inline std::string escape(const std::string & s) {
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

// white (0) to dark blue (1)
inline std::string heat_color(double v) {
    const double t = std::clamp(v, 0.0, 1.0);
    const int r = static_cast<int>(std::lround(255.0 * (1.0 - t) + 8.0 * t));
    const int g = static_cast<int>(std::lround(255.0 * (1.0 - t) + 48.0 * t));
    const int b = static_cast<int>(std::lround(255.0 * (1.0 - t) + 107.0 * t));
    char buf[16];
    std::snprintf(buf, sizeof(buf), "#%02x%02x%02x", r, g, b);
    return buf;
}

inline constexpr const char * kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

} // namespace detail

inline std::string heatmap(const CkaMatrix & m, const std::string & title) {
    const double cell = std::max(6.0, 480.0 / static_cast<double>(std::max<std::size_t>(m.num_layers, 1)));
    const double margin = 48.0;
    const double size = cell * static_cast<double>(m.num_layers);
    const double width = size + 2 * margin + 40;
    const double height = size + 2 * margin;
    std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + detail::num(width) + "\" height=\"" +
                    detail::num(height) + "\">\n";
    s += "<text x=\"" + detail::num(margin) + "\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">" +
         detail::escape(title) + "</text>\n";
    for (std::size_t i = 0; i < m.num_layers; ++i) {
        for (std::size_t j = 0; j < m.num_layers; ++j) {
            s += "<rect x=\"" + detail::num(margin + cell * static_cast<double>(j)) + "\" y=\"" +
                 detail::num(margin + cell * static_cast<double>(i)) + "\" width=\"" + detail::num(cell) +
                 "\" height=\"" + detail::num(cell) + "\" fill=\"" + detail::heat_color(m(i, j)) + "\"/>\n";
        }
    }
    const std::size_t step = std::max<std::size_t>(1, m.num_layers / 16);
    for (std::size_t i = 0; i < m.num_layers; i += step) {
        const double c = margin + cell * (static_cast<double>(i) + 0.5);
        s += "<text x=\"" + detail::num(c) + "\" y=\"" + detail::num(margin + size + 14) +
             "\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">" + std::to_string(i) + "</text>\n";
        s += "<text x=\"" + detail::num(margin - 4) + "\" y=\"" + detail::num(c + 3) +
             "\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">" + std::to_string(i) + "</text>\n";
    }
    // colour bar
    for (int t = 0; t <= 20; ++t) {
        const double v = 1.0 - t / 20.0;
        s += "<rect x=\"" + detail::num(margin + size + 12) + "\" y=\"" + detail::num(margin + size * t / 21.0) +
             "\" width=\"12\" height=\"" + detail::num(size / 21.0 + 0.5) + "\" fill=\"" + detail::heat_color(v) +
             "\"/>\n";
    }
    s += "</svg>\n";
    return s;
}

struct Line {
    std::string label;
    std::vector<CurveEntry> points;
};

inline std::string line_plot(const std::vector<Line> & lines, const std::string & title, const std::string & y_label) {
    const double w = 640, h = 360, left = 56, right = 140, top = 36, bottom = 40;
    double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
    for (const auto & l : lines) {
        for (const auto & p : l.points) {
            xmin = std::min(xmin, static_cast<double>(p.layer));
            xmax = std::max(xmax, static_cast<double>(p.layer));
            ymin = std::min(ymin, p.value);
            ymax = std::max(ymax, p.value);
        }
    }
    if (xmin > xmax) {
        xmin = 0;
        xmax = 1;
        ymin = 0;
        ymax = 1;
    }
    if (xmax == xmin) xmax = xmin + 1;
    if (ymax - ymin < 1e-9) {
        ymin -= 0.5;
        ymax += 0.5;
    }
    const double pad = 0.05 * (ymax - ymin);
    ymin -= pad;
    ymax += pad;
    const double pw = w - left - right;
    const double ph = h - top - bottom;
    auto px = [&](double x) { return left + pw * (x - xmin) / (xmax - xmin); };
    auto py = [&](double y) { return top + ph * (1.0 - (y - ymin) / (ymax - ymin)); };

    std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + detail::num(w) + "\" height=\"" +
                    detail::num(h) + "\">\n";
    s += "<text x=\"" + detail::num(left) + "\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">" +
         detail::escape(title) + "</text>\n";
    s += "<line x1=\"" + detail::num(left) + "\" y1=\"" + detail::num(top + ph) + "\" x2=\"" + detail::num(left + pw) +
         "\" y2=\"" + detail::num(top + ph) + "\" stroke=\"black\"/>\n";
    s += "<line x1=\"" + detail::num(left) + "\" y1=\"" + detail::num(top) + "\" x2=\"" + detail::num(left) +
         "\" y2=\"" + detail::num(top + ph) + "\" stroke=\"black\"/>\n";
    for (int t = 0; t <= 4; ++t) {
        const double v = ymin + (ymax - ymin) * t / 4.0;
        s += "<text x=\"" + detail::num(left - 4) + "\" y=\"" + detail::num(py(v) + 3) +
             "\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">" + detail::num(v) + "</text>\n";
    }
    const auto first = static_cast<std::size_t>(xmin);
    const auto last = static_cast<std::size_t>(xmax);
    const std::size_t step = std::max<std::size_t>(1, (last - first) / 16);
    for (std::size_t x = first; x <= last; x += step) {
        s += "<text x=\"" + detail::num(px(static_cast<double>(x))) + "\" y=\"" + detail::num(top + ph + 14) +
             "\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">" + std::to_string(x) +
             "</text>\n";
    }
    s += "<text x=\"" + detail::num(left + pw / 2) + "\" y=\"" + detail::num(h - 6) +
         "\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">layer</text>\n";
    s += "<text x=\"12\" y=\"" + detail::num(top + ph / 2) +
         "\" font-family=\"sans-serif\" font-size=\"11\" transform=\"rotate(-90 12 " + detail::num(top + ph / 2) +
         ")\" text-anchor=\"middle\">" + detail::escape(y_label) + "</text>\n";
    for (std::size_t i = 0; i < lines.size(); ++i) {
        const std::string color = detail::kPalette[i % std::size(detail::kPalette)];
        std::string pts;
        for (const auto & p : lines[i].points) {
            if (!pts.empty()) pts += " ";
            pts += detail::num(px(static_cast<double>(p.layer))) + "," + detail::num(py(p.value));
        }
        s += "<polyline fill=\"none\" stroke=\"" + color + "\" stroke-width=\"2\" points=\"" + pts + "\"/>\n";
        const double ly = top + 14.0 * static_cast<double>(i + 1);
        s += "<line x1=\"" + detail::num(left + pw + 12) + "\" y1=\"" + detail::num(ly - 4) + "\" x2=\"" +
             detail::num(left + pw + 30) + "\" y2=\"" + detail::num(ly - 4) + "\" stroke=\"" + color +
             "\" stroke-width=\"2\"/>\n";
        s += "<text x=\"" + detail::num(left + pw + 34) + "\" y=\"" + detail::num(ly) +
             "\" font-family=\"sans-serif\" font-size=\"10\">" + detail::escape(lines[i].label) + "</text>\n";
    }
    s += "</svg>\n";
    return s;
}

} // namespace critlayers::svg
