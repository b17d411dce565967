#pragma once

#include <array>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cetsp/geometry.hpp"
#include "cetsp/rng.hpp"

namespace cetsp {

struct Instance {
    Point depot;
    std::vector<Disk> targets;
    std::string id;

    int n() const { return static_cast<int>(targets.size()); }
};

enum class NodeDistribution { uniform, clustered, mixed };

struct RadiusConfig {
    enum class Kind { constant, random };
    Kind kind = Kind::random;
    std::map<int, double> constant_map = default_constant_map();
    double lo = 0.0;
    double hi = 0.1;

    static std::map<int, double> default_constant_map() {
        return {{20, 0.1}, {40, 0.05}, {60, 0.05}, {80, 0.01}, {100, 0.01}};
    }
    static RadiusConfig constant() { return {Kind::constant, default_constant_map(), 0.0, 0.1}; }
    static RadiusConfig random(double lo = 0.0, double hi = 0.1) {
        return {Kind::random, default_constant_map(), lo, hi};
    }
};

struct GenConfig {
    std::vector<int> sizes{20, 40, 60, 80, 100};
    NodeDistribution distribution = NodeDistribution::uniform;
    RadiusConfig radius = RadiusConfig::random();
    std::uint64_t seed = 0;
};

// Constant radius for a problem size: exact at the mapped sizes, nearest
// mapped size otherwise, ties toward the smaller size.
inline double radius_for_size(int size, const std::map<int, double>& table = RadiusConfig::default_constant_map()) {
    if (size < 1) throw std::invalid_argument("radius_for_size: size must be >= 1");
    if (table.empty()) throw std::invalid_argument("radius_for_size: empty table");
    int best_size = table.begin()->first;
    int best_gap = std::abs(size - best_size);
    for (const auto& [s, _] : table) {
        const int gap = std::abs(size - s);
        if (gap < best_gap || (gap == best_gap && s < best_size)) {
            best_size = s;
            best_gap = gap;
        }
    }
    return table.at(best_size);
}

namespace detail {

inline Point sample_uniform_point(std::mt19937_64& rng) {
    const double x = uniform01(rng);
    const double y = uniform01(rng);
    return {x, y};
}

// 5 cluster centers uniform in [0.1,0.9]^2; points are Gaussian (sigma 0.05)
// around a uniformly chosen center, resampled until inside the unit square.
struct ClusterField {
    std::array<Point, 5> centers;

    static ClusterField sample(std::mt19937_64& rng) {
        ClusterField f;
        for (auto& c : f.centers) {
            c.x = 0.1 + 0.8 * uniform01(rng);
            c.y = 0.1 + 0.8 * uniform01(rng);
        }
        return f;
    }

    Point sample_point(std::mt19937_64& rng) const {
        std::normal_distribution<double> gauss(0.0, 0.05);
        for (;;) {
            const auto& c = centers[std::uniform_int_distribution<std::size_t>(0, centers.size() - 1)(rng)];
            const Point p{c.x + gauss(rng), c.y + gauss(rng)};
            if (p.x >= 0.0 && p.x <= 1.0 && p.y >= 0.0 && p.y <= 1.0) return p;
        }
    }
};

}  // namespace detail

inline Instance generate(const GenConfig& cfg, int size, std::mt19937_64& rng) {
    if (size < 1) throw std::invalid_argument("generate: size must be >= 1");
    if (cfg.radius.kind == RadiusConfig::Kind::random &&
        !(cfg.radius.lo >= 0.0 && cfg.radius.lo < cfg.radius.hi))
        throw std::invalid_argument("generate: radius range must satisfy 0 <= lo < hi");
    Instance inst;
    inst.depot = detail::sample_uniform_point(rng);

    detail::ClusterField clusters;
    if (cfg.distribution != NodeDistribution::uniform)
        clusters = detail::ClusterField::sample(rng);

    inst.targets.reserve(static_cast<std::size_t>(size));
    const double const_r = (cfg.radius.kind == RadiusConfig::Kind::constant)
                               ? radius_for_size(size, cfg.radius.constant_map)
                               : 0.0;
    for (int i = 0; i < size; ++i) {
        Point c;
        switch (cfg.distribution) {
            case NodeDistribution::uniform: c = detail::sample_uniform_point(rng); break;
            case NodeDistribution::clustered: c = clusters.sample_point(rng); break;
            case NodeDistribution::mixed:
                c = (uniform01(rng) < 0.5) ? detail::sample_uniform_point(rng)
                                           : clusters.sample_point(rng);
                break;
        }
        double r = const_r;
        if (cfg.radius.kind == RadiusConfig::Kind::random)
            r = cfg.radius.lo + (cfg.radius.hi - cfg.radius.lo) * uniform01(rng);
        inst.targets.push_back({c, r});
    }
    return inst;
}

// Deterministic per (cfg.seed, size, draw index).
inline Instance generate(const GenConfig& cfg, int size, std::uint64_t draw_index) {
    auto rng = rng_stream(cfg.seed, static_cast<std::uint64_t>(size), draw_index);
    Instance inst = generate(cfg, size, rng);
    inst.id = "gen-" + std::to_string(cfg.seed) + "-" + std::to_string(size) + "-" +
              std::to_string(draw_index);
    return inst;
}

// The 8 symmetry images of a point in the unit square (identity first).
inline std::array<Point, 8> symmetry_images(const Point& p) {
    const double cx = p.x, cy = p.y;
    return {Point{cx, cy},         Point{cy, cx},         Point{cx, 1.0 - cy},
            Point{cy, 1.0 - cx},   Point{1.0 - cx, cy},   Point{1.0 - cy, cx},
            Point{1.0 - cx, 1.0 - cy}, Point{1.0 - cy, 1.0 - cx}};
}

inline Point apply_symmetry(const Point& p, int map_index) {
    return symmetry_images(p)[static_cast<std::size_t>(map_index)];
}

inline std::array<Instance, 8> augment8(const Instance& inst) {
    auto inside = [](const Point& p) {
        return p.x >= -kCoverTol && p.x <= 1.0 + kCoverTol && p.y >= -kCoverTol && p.y <= 1.0 + kCoverTol;
    };
    if (!inside(inst.depot)) throw std::invalid_argument("augment8: depot outside the unit square");
    for (const auto& t : inst.targets)
        if (!inside(t.center)) throw std::invalid_argument("augment8: target center outside the unit square");

    std::array<Instance, 8> out;
    for (int m = 0; m < 8; ++m) {
        Instance img;
        img.id = inst.id.empty() ? "" : inst.id + "-aug" + std::to_string(m);
        img.depot = apply_symmetry(inst.depot, m);
        img.targets.reserve(inst.targets.size());
        for (const auto& t : inst.targets)
            img.targets.push_back({apply_symmetry(t.center, m), t.radius});
        out[static_cast<std::size_t>(m)] = std::move(img);
    }
    return out;
}

struct NormalizeResult {
    Instance instance;
    double scale = 1.0;   // true_length = normalized_length * scale
    Point offset;         // original = normalized * scale + offset
};

inline NormalizeResult normalize(const Instance& inst) {
    if (inst.targets.empty()) throw std::invalid_argument("normalize: instance has no targets");
    double min_x = inst.depot.x, max_x = inst.depot.x;
    double min_y = inst.depot.y, max_y = inst.depot.y;
    for (const auto& t : inst.targets) {
        min_x = std::min(min_x, t.center.x);
        max_x = std::max(max_x, t.center.x);
        min_y = std::min(min_y, t.center.y);
        max_y = std::max(max_y, t.center.y);
    }
    const double extent = std::max(max_x - min_x, max_y - min_y);
    if (extent <= 0.0) throw std::invalid_argument("normalize: zero-extent instance");

    NormalizeResult res;
    res.scale = extent;
    res.offset = {min_x, min_y};
    res.instance.id = inst.id;
    res.instance.depot = {(inst.depot.x - min_x) / extent, (inst.depot.y - min_y) / extent};
    res.instance.targets.reserve(inst.targets.size());
    for (const auto& t : inst.targets)
        res.instance.targets.push_back(
            {{(t.center.x - min_x) / extent, (t.center.y - min_y) / extent}, t.radius / extent});
    return res;
}

namespace detail {

inline std::string fmt12(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return buf;
}

}  // namespace detail

// Text format:
//   CETSP 1 <n>
//   <depot_x> <depot_y> 0
//   <cx> <cy> <r>      (n lines)
inline void save(const std::string& path, const Instance& inst) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save: cannot open '" + path + "' for writing");
    out << "CETSP 1 " << inst.targets.size() << "\n";
    out << detail::fmt12(inst.depot.x) << " " << detail::fmt12(inst.depot.y) << " 0\n";
    for (const auto& t : inst.targets)
        out << detail::fmt12(t.center.x) << " " << detail::fmt12(t.center.y) << " "
            << detail::fmt12(t.radius) << "\n";
    if (!out) throw std::runtime_error("save: write failure on '" + path + "'");
}

inline Instance load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load: cannot open '" + path + "'");
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("load: empty file '" + path + "'");

    std::istringstream header(line);
    std::string magic;
    int version = 0;
    long n = -1;
    if (!(header >> magic >> version >> n) || magic != "CETSP" || version != 1 || n < 1)
        throw std::runtime_error("load: malformed header at line 1 (expected 'CETSP 1 <n>')");

    auto parse_row = [&](int line_no, double& x, double& y, double& r) {
        if (!std::getline(in, line))
            throw std::runtime_error("load: unexpected end of file at line " + std::to_string(line_no) +
                                     " (header declares n=" + std::to_string(n) + ")");
        std::istringstream row(line);
        if (!(row >> x >> y >> r))
            throw std::runtime_error("load: non-numeric field at line " + std::to_string(line_no));
        std::string extra;
        if (row >> extra)
            throw std::runtime_error("load: trailing token at line " + std::to_string(line_no));
    };

    Instance inst;
    inst.id = path;
    double x, y, r;
    parse_row(2, x, y, r);
    if (r != 0.0) throw std::runtime_error("load: missing depot at line 2 (depot radius must be 0)");
    inst.depot = {x, y};
    for (long i = 0; i < n; ++i) {
        const int line_no = static_cast<int>(i) + 3;
        parse_row(line_no, x, y, r);
        if (r < 0.0) throw std::runtime_error("load: radius < 0 at line " + std::to_string(line_no));
        inst.targets.push_back({{x, y}, r});
    }
    return inst;
}

// Best-effort importer for 4-column `x y z r` benchmark rows: z is ignored
// and the first row is treated as the depot. Heuristic, not a format spec.
inline Instance import_xyzr(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("import_xyzr: cannot open '" + path + "'");
    Instance inst;
    inst.id = path;
    std::string line;
    bool first = true;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::istringstream row(line);
        double x, y, z, r;
        if (!(row >> x >> y >> z >> r)) {
            if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
            throw std::runtime_error("import_xyzr: unparsable row at line " + std::to_string(line_no));
        }
        if (r < 0.0) throw std::runtime_error("import_xyzr: radius < 0 at line " + std::to_string(line_no));
        if (first) {
            inst.depot = {x, y};
            first = false;
        } else {
            inst.targets.push_back({{x, y}, r});
        }
    }
    if (first || inst.targets.empty())
        throw std::runtime_error("import_xyzr: no usable rows in '" + path + "'");
    return inst;
}

}  // namespace cetsp
