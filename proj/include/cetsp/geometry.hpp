#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <stdexcept>
#include <vector>

namespace cetsp {

struct Point {
    double x = 0.0;
    double y = 0.0;
};

// Closed disk; the depot is a disk of radius 0.
struct Disk {
    Point center;
    double radius = 0.0;
};

// Tangency counts as intersection; this tolerance absorbs rounding of
// boundary waypoints constructed as center + r*(cos,sin).
inline constexpr double kCoverTol = 1e-9;

inline double dist_sq(const Point& a, const Point& b) {
    const double dx = a.x - b.x;
    const double dy = a.y - b.y;
    return dx * dx + dy * dy;
}

inline double dist(const Point& a, const Point& b) {
    return std::sqrt(dist_sq(a, b));
}

// Squared distance from point p to the closed segment ab.
inline double point_segment_dist_sq(const Point& p, const Point& a, const Point& b) {
    const double abx = b.x - a.x;
    const double aby = b.y - a.y;
    const double len2 = abx * abx + aby * aby;
    double t = 0.0;
    if (len2 > 0.0) {
        t = ((p.x - a.x) * abx + (p.y - a.y) * aby) / len2;
        t = std::clamp(t, 0.0, 1.0);
    }
    const Point closest{a.x + t * abx, a.y + t * aby};
    return dist_sq(p, closest);
}

// True iff segment ab touches the closed disk d. a == b degenerates to a
// point-in-disk test.
inline bool segment_disk_intersects(const Point& a, const Point& b, const Disk& d) {
    const double reach = d.radius + kCoverTol;
    return point_segment_dist_sq(d.center, a, b) <= reach * reach;
}

// gamma points evenly spaced on the disk boundary, starting at `phase`.
// A radius-0 disk yields gamma copies of the center.
inline std::vector<Point> pds_points(const Disk& d, int gamma, double phase = 0.0) {
    if (gamma < 1) throw std::invalid_argument("pds_points: gamma must be >= 1");
    std::vector<Point> pts;
    pts.reserve(static_cast<std::size_t>(gamma));
    const double step = 2.0 * std::numbers::pi / gamma;
    for (int k = 0; k < gamma; ++k) {
        const double ang = phase + step * k;
        pts.push_back({d.center.x + d.radius * std::cos(ang),
                       d.center.y + d.radius * std::sin(ang)});
    }
    return pts;
}

inline double tour_length(std::span<const Point> waypoints, bool closed) {
    if (waypoints.empty()) throw std::invalid_argument("tour_length: need at least one waypoint");
    double total = 0.0;
    for (std::size_t i = 0; i + 1 < waypoints.size(); ++i)
        total += dist(waypoints[i], waypoints[i + 1]);
    if (closed && waypoints.size() > 1)
        total += dist(waypoints.back(), waypoints.front());
    return total;
}

inline double tour_length(const std::vector<Point>& waypoints, bool closed) {
    return tour_length(std::span<const Point>(waypoints), closed);
}

}  // namespace cetsp
