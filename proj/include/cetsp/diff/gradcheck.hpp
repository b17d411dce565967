#pragma once

#include <algorithm>
#include <functional>

#include "cetsp/diff/params.hpp"

namespace cetsp::diff {

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::string worst_entry;
    std::size_t coords_checked = 0;
};

// Central-difference check of an analytic gradient. Checks every coordinate
// when the block is small, otherwise a deterministic random subset of at
// least `min_coords`. Relative error is |a-n| / max(1, |a|, |n|).
inline GradCheckResult grad_check(const std::function<double(const ParamBlock&)>& f,
                                  const GradMap& analytic, ParamBlock params, double h = 1e-4,
                                  std::size_t min_coords = 200, std::uint64_t seed = 0) {
    struct Coord {
        std::string name;
        std::size_t index;
    };
    std::vector<Coord> coords;
    for (const auto& [name, e] : params.entries)
        for (std::size_t i = 0; i < e.value.size(); ++i) coords.push_back({name, i});

    if (coords.size() > min_coords) {
        auto rng = rng_stream(seed, 0x67726164ull);
        std::shuffle(coords.begin(), coords.end(), rng);
        coords.resize(min_coords);
    }

    GradCheckResult res;
    res.coords_checked = coords.size();
    for (const auto& c : coords) {
        double& x = params.at(c.name).v[c.index];
        const double saved = x;
        x = saved + h;
        const double fp = f(params);
        x = saved - h;
        const double fm = f(params);
        x = saved;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw std::runtime_error("grad_check: non-finite evaluation at '" + c.name + "'");
        const double numeric = (fp - fm) / (2.0 * h);
        const auto it = analytic.find(c.name);
        const double a = (it == analytic.end()) ? 0.0 : it->second.v[c.index];
        const double rel = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
        if (rel > res.max_rel_err) {
            res.max_rel_err = rel;
            res.worst_entry = c.name + "[" + std::to_string(c.index) + "]";
        }
    }
    return res;
}

}  // namespace cetsp::diff
