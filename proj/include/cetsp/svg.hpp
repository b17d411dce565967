#pragma once

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "cetsp/instance.hpp"

namespace cetsp {

namespace detail {

inline std::string svg_num(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

}  // namespace detail

// Draws the neighborhood circles, a square depot marker, and optionally the
// route polyline with its closing edge. Output bytes are deterministic for
// fixed inputs.
inline void render_svg(const std::string& path, const Instance& inst,
                       const std::vector<Point>* route = nullptr) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("render_svg: cannot open '" + path + "' for writing");

    constexpr double kSize = 640.0;
    constexpr double kPad = 32.0;
    auto X = [&](double x) { return detail::svg_num(kPad + x * (kSize - 2 * kPad)); };
    auto Y = [&](double y) { return detail::svg_num(kSize - kPad - y * (kSize - 2 * kPad)); };
    auto S = [&](double r) { return detail::svg_num(r * (kSize - 2 * kPad)); };

    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << static_cast<int>(kSize)
        << "\" height=\"" << static_cast<int>(kSize) << "\" viewBox=\"0 0 " << static_cast<int>(kSize)
        << " " << static_cast<int>(kSize) << "\">\n";
    out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";

    for (const auto& t : inst.targets) {
        out << "<circle cx=\"" << X(t.center.x) << "\" cy=\"" << Y(t.center.y) << "\" r=\""
            << S(t.radius) << "\" fill=\"#9ecae1\" fill-opacity=\"0.35\" stroke=\"#3182bd\" "
               "stroke-width=\"1\"/>\n";
    }

    if (route && !route->empty()) {
        out << "<polyline fill=\"none\" stroke=\"#d62728\" stroke-width=\"1.5\" points=\"";
        for (const auto& p : *route) out << X(p.x) << "," << Y(p.y) << " ";
        out << X(route->front().x) << "," << Y(route->front().y);  // closing edge
        out << "\"/>\n";
    }

    // depot drawn as a filled square so it is distinct from the circles
    out << "<rect x=\"" << detail::svg_num(kPad + inst.depot.x * (kSize - 2 * kPad) - 5.0) << "\" y=\""
        << detail::svg_num(kSize - kPad - inst.depot.y * (kSize - 2 * kPad) - 5.0)
        << "\" width=\"10\" height=\"10\" fill=\"#2ca02c\"/>\n";
    out << "</svg>\n";
    if (!out) throw std::runtime_error("render_svg: write failure on '" + path + "'");
}

// Route file: `ROUTE <k>` then one `x y` line per waypoint.
inline void save_route(const std::string& path, const std::vector<Point>& waypoints) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_route: cannot open '" + path + "'");
    out << "ROUTE " << waypoints.size() << "\n";
    for (const auto& p : waypoints) out << detail::fmt12(p.x) << " " << detail::fmt12(p.y) << "\n";
}

inline std::vector<Point> load_route(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_route: cannot open '" + path + "'");
    std::string tag;
    long k = -1;
    if (!(in >> tag >> k) || tag != "ROUTE" || k < 0)
        throw std::runtime_error("load_route: malformed header in '" + path + "'");
    std::vector<Point> pts;
    for (long i = 0; i < k; ++i) {
        Point p;
        if (!(in >> p.x >> p.y)) throw std::runtime_error("load_route: truncated route in '" + path + "'");
        pts.push_back(p);
    }
    return pts;
}

}  // namespace cetsp
