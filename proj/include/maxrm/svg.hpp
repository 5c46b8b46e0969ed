#pragma once

// Minimal static SVG plotting for benchmark outputs: grouped bar charts with
// error whiskers (method comparisons) and line charts (sequences such as the
// consistency probe). No external dependencies; text metrics are approximate
// but the files render in any browser.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "maxrm/errors.hpp"

namespace maxrm {

namespace detail {

inline constexpr const char* kSvgPalette[] = {"#4477aa", "#ee6677", "#228833", "#ccbb44",
                                              "#66ccee", "#aa3377", "#bbbbbb"};
inline constexpr int kSvgPaletteSize = 7;

struct SvgCanvas {
    double width = 800, height = 500;
    double left = 80, right = 30, top = 50, bottom = 70;
    double x_min = 0, x_max = 1, y_min = 0, y_max = 1;

    double px(double x) const {
        return left + (x - x_min) / (x_max - x_min) * (width - left - right);
    }
    double py(double y) const {
        return height - bottom - (y - y_min) / (y_max - y_min) * (height - top - bottom);
    }
};

inline std::string svg_num(double v) {
    std::ostringstream os;
    os.precision(6);
    os << v;
    return os.str();
}

inline std::string svg_escape(const std::string& s) {
    std::string out;
    for (const char c : s) {
        if (c == '&') out += "&amp;";
        else if (c == '<') out += "&lt;";
        else if (c == '>') out += "&gt;";
        else out += c;
    }
    return out;
}

/// Round tick step to a 1/2/5 decade multiple covering range/target ticks.
inline double nice_step(double range, int target) {
    const double raw = range / std::max(target, 1);
    const double mag = std::pow(10.0, std::floor(std::log10(std::max(raw, 1e-300))));
    for (const double m : {1.0, 2.0, 5.0, 10.0})
        if (raw <= m * mag) return m * mag;
    return 10.0 * mag;
}

inline void svg_header(std::ostream& out, const SvgCanvas& c, const std::string& title) {
    out << "<svg xmlns='http://www.w3.org/2000/svg' width='" << c.width << "' height='"
        << c.height << "' viewBox='0 0 " << c.width << ' ' << c.height << "'>\n"
        << "<rect width='100%' height='100%' fill='white'/>\n"
        << "<text x='" << c.width / 2 << "' y='28' text-anchor='middle' font-size='17' "
           "font-family='sans-serif'>"
        << svg_escape(title) << "</text>\n";
}

inline void svg_y_axis(std::ostream& out, const SvgCanvas& c, const std::string& label) {
    const double step = nice_step(c.y_max - c.y_min, 6);
    const double first = std::ceil(c.y_min / step) * step;
    for (double v = first; v <= c.y_max + 1e-9 * step; v += step) {
        const double y = c.py(v);
        out << "<line x1='" << c.left << "' y1='" << y << "' x2='" << c.width - c.right
            << "' y2='" << y << "' stroke='#dddddd' stroke-width='1'/>\n"
            << "<text x='" << c.left - 8 << "' y='" << y + 4
            << "' text-anchor='end' font-size='12' font-family='sans-serif'>" << svg_num(v)
            << "</text>\n";
    }
    out << "<line x1='" << c.left << "' y1='" << c.py(c.y_min) << "' x2='" << c.left
        << "' y2='" << c.py(c.y_max) << "' stroke='black' stroke-width='1'/>\n"
        << "<text x='18' y='" << (c.top + c.height - c.bottom) / 2
        << "' text-anchor='middle' font-size='13' font-family='sans-serif' "
           "transform='rotate(-90 18 "
        << (c.top + c.height - c.bottom) / 2 << ")'>" << svg_escape(label) << "</text>\n";
}

}  // namespace detail

/// Bar chart with optional symmetric error whiskers, one bar per label.
inline void write_bar_svg(const std::string& path, const std::string& title,
                          const std::string& y_label, const std::vector<std::string>& labels,
                          const std::vector<double>& means, const std::vector<double>& errs) {
    if (labels.empty() || labels.size() != means.size() ||
        (!errs.empty() && errs.size() != means.size()))
        throw ConfigError("svg: bar chart needs matching labels/means/errors");
    detail::SvgCanvas c;
    c.y_min = 0.0;
    c.y_max = 1e-12;
    for (std::size_t i = 0; i < means.size(); ++i) {
        const double e = errs.empty() ? 0.0 : errs[i];
        c.y_max = std::max(c.y_max, means[i] + e);
        c.y_min = std::min(c.y_min, means[i] - e);
    }
    c.y_max *= 1.08;
    if (c.y_min < 0.0) c.y_min *= 1.08;
    c.x_min = 0.0;
    c.x_max = static_cast<double>(labels.size());

    std::ofstream out(path);
    if (!out) throw DataError("svg: cannot write '" + path + "'");
    detail::svg_header(out, c, title);
    detail::svg_y_axis(out, c, y_label);

    const double slot = (c.width - c.left - c.right) / labels.size();
    const double bar_w = slot * 0.6;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const double cx = c.px(i + 0.5);
        const double y0 = c.py(std::max(0.0, c.y_min));
        const double y1 = c.py(means[i]);
        const char* color = detail::kSvgPalette[i % detail::kSvgPaletteSize];
        out << "<rect x='" << cx - bar_w / 2 << "' y='" << std::min(y0, y1) << "' width='"
            << bar_w << "' height='" << std::abs(y0 - y1) << "' fill='" << color
            << "' fill-opacity='0.85'/>\n";
        if (!errs.empty() && errs[i] > 0.0) {
            const double ylo = c.py(means[i] - errs[i]), yhi = c.py(means[i] + errs[i]);
            out << "<line x1='" << cx << "' y1='" << ylo << "' x2='" << cx << "' y2='" << yhi
                << "' stroke='black' stroke-width='1.5'/>\n"
                << "<line x1='" << cx - 6 << "' y1='" << yhi << "' x2='" << cx + 6 << "' y2='"
                << yhi << "' stroke='black' stroke-width='1.5'/>\n"
                << "<line x1='" << cx - 6 << "' y1='" << ylo << "' x2='" << cx + 6 << "' y2='"
                << ylo << "' stroke='black' stroke-width='1.5'/>\n";
        }
        out << "<text x='" << cx << "' y='" << c.height - c.bottom + 18
            << "' text-anchor='middle' font-size='12' font-family='sans-serif'>"
            << detail::svg_escape(labels[i]) << "</text>\n";
    }
    out << "<line x1='" << c.left << "' y1='" << c.py(std::max(0.0, c.y_min)) << "' x2='"
        << c.width - c.right << "' y2='" << c.py(std::max(0.0, c.y_min))
        << "' stroke='black' stroke-width='1'/>\n</svg>\n";
    if (!out) throw DataError("svg: write failure on '" + path + "'");
}

struct SvgSeries {
    std::string label;
    std::vector<double> x, y;
    std::vector<double> y_err;  ///< optional, same length as y
};

/// Line chart with optional error whiskers, one polyline per series.
inline void write_line_svg(const std::string& path, const std::string& title,
                           const std::string& x_label, const std::string& y_label,
                           const std::vector<SvgSeries>& series) {
    if (series.empty()) throw ConfigError("svg: line chart needs at least one series");
    detail::SvgCanvas c;
    c.x_min = c.y_min = std::numeric_limits<double>::infinity();
    c.x_max = c.y_max = -std::numeric_limits<double>::infinity();
    for (const auto& s : series) {
        if (s.x.size() != s.y.size() || (!s.y_err.empty() && s.y_err.size() != s.y.size()))
            throw ConfigError("svg: series '" + s.label + "' has mismatched lengths");
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            const double e = s.y_err.empty() ? 0.0 : s.y_err[i];
            c.x_min = std::min(c.x_min, s.x[i]);
            c.x_max = std::max(c.x_max, s.x[i]);
            c.y_min = std::min(c.y_min, s.y[i] - e);
            c.y_max = std::max(c.y_max, s.y[i] + e);
        }
    }
    if (!(c.x_min < c.x_max)) c.x_max = c.x_min + 1.0;
    if (!(c.y_min < c.y_max)) c.y_max = c.y_min + 1.0;
    const double pad = 0.05 * (c.y_max - c.y_min);
    c.y_min -= pad;
    c.y_max += pad;

    std::ofstream out(path);
    if (!out) throw DataError("svg: cannot write '" + path + "'");
    detail::svg_header(out, c, title);
    detail::svg_y_axis(out, c, y_label);

    const double x_step = detail::nice_step(c.x_max - c.x_min, 6);
    const double x_first = std::ceil(c.x_min / x_step) * x_step;
    for (double v = x_first; v <= c.x_max + 1e-9 * x_step; v += x_step) {
        const double x = c.px(v);
        out << "<text x='" << x << "' y='" << c.height - c.bottom + 18
            << "' text-anchor='middle' font-size='12' font-family='sans-serif'>"
            << detail::svg_num(v) << "</text>\n";
    }
    out << "<line x1='" << c.left << "' y1='" << c.py(c.y_min) << "' x2='"
        << c.width - c.right << "' y2='" << c.py(c.y_min)
        << "' stroke='black' stroke-width='1'/>\n"
        << "<text x='" << (c.left + c.width - c.right) / 2 << "' y='" << c.height - 20
        << "' text-anchor='middle' font-size='13' font-family='sans-serif'>"
        << detail::svg_escape(x_label) << "</text>\n";

    for (std::size_t si = 0; si < series.size(); ++si) {
        const auto& s = series[si];
        const char* color = detail::kSvgPalette[si % detail::kSvgPaletteSize];
        out << "<polyline fill='none' stroke='" << color << "' stroke-width='2' points='";
        for (std::size_t i = 0; i < s.x.size(); ++i)
            out << c.px(s.x[i]) << ',' << c.py(s.y[i]) << ' ';
        out << "'/>\n";
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            out << "<circle cx='" << c.px(s.x[i]) << "' cy='" << c.py(s.y[i])
                << "' r='3.5' fill='" << color << "'/>\n";
            if (!s.y_err.empty() && s.y_err[i] > 0.0) {
                const double x = c.px(s.x[i]);
                out << "<line x1='" << x << "' y1='" << c.py(s.y[i] - s.y_err[i]) << "' x2='"
                    << x << "' y2='" << c.py(s.y[i] + s.y_err[i]) << "' stroke='" << color
                    << "' stroke-width='1.5'/>\n";
            }
        }
        out << "<rect x='" << c.width - c.right - 160 << "' y='" << c.top + 18.0 * si
            << "' width='14' height='4' fill='" << color << "'/>\n"
            << "<text x='" << c.width - c.right - 140 << "' y='" << c.top + 18.0 * si + 6
            << "' font-size='12' font-family='sans-serif'>" << detail::svg_escape(s.label)
            << "</text>\n";
    }
    out << "</svg>\n";
    if (!out) throw DataError("svg: write failure on '" + path + "'");
}

}  // namespace maxrm
