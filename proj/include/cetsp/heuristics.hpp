#pragma once

#include <limits>
#include <optional>

#include "cetsp/env.hpp"

namespace cetsp {

// A tour as node stops with chosen waypoints. Entry 0 is always the depot;
// `closed` adds the edge back to the first waypoint. `waypoint_ids` holds PDS
// indices, or -1 once a waypoint has been moved off the discretization.
struct Route {
    std::vector<int> nodes{0};
    std::vector<int> waypoint_ids{-1};
    std::vector<Point> waypoints;
    bool closed = true;
    double length = 0.0;

    int stop_count() const { return static_cast<int>(nodes.size()); }

    void recompute_length() { length = tour_length(waypoints, closed); }

    static Route depot_only(const DiscretizedInstance& dinst) {
        Route r;
        r.waypoints = {dinst.base.depot};
        r.length = 0.0;
        return r;
    }
};

// Coverage by the route's edges. The MDP only unlocks the return to the depot
// once every target is covered, so construction passes that must stay
// env-replayable exclude the closing edge (`include_closing = false`).
inline std::vector<char> route_coverage(const DiscretizedInstance& dinst, const Route& r,
                                        bool include_closing = true) {
    std::vector<char> covered(static_cast<std::size_t>(dinst.n()), 0);
    auto mark = [&](const Point& a, const Point& b) {
        for (int t = 1; t <= dinst.n(); ++t) {
            if (covered[static_cast<std::size_t>(t - 1)]) continue;
            if (segment_disk_intersects(a, b, dinst.disk(t))) covered[static_cast<std::size_t>(t - 1)] = 1;
        }
    };
    if (r.waypoints.empty()) return covered;
    mark(r.waypoints[0], r.waypoints[0]);
    for (std::size_t i = 0; i + 1 < r.waypoints.size(); ++i) mark(r.waypoints[i], r.waypoints[i + 1]);
    if (include_closing && r.closed && r.waypoints.size() > 1)
        mark(r.waypoints.back(), r.waypoints.front());
    return covered;
}

inline bool route_covers_all(const DiscretizedInstance& dinst, const Route& r,
                             bool include_closing = true) {
    const auto covered = route_coverage(dinst, r, include_closing);
    for (char c : covered)
        if (!c) return false;
    return true;
}

struct ReplayReport {
    bool feasible = false;
    bool complete = false;
    double env_length = 0.0;
};

// Re-executes the route through the MDP, checking feasibility step by step.
inline ReplayReport replay_route(const DiscretizedInstance& dinst, const Route& r) {
    ReplayReport rep;
    EnvState state = reset(dinst, 1)[0];
    state.forced_second = -1;
    try {
        for (int i = 1; i < r.stop_count(); ++i) {
            if (r.waypoint_ids[static_cast<std::size_t>(i)] < 0) return rep;  // off-PDS waypoint
            step(dinst, state, {r.nodes[static_cast<std::size_t>(i)],
                                r.waypoint_ids[static_cast<std::size_t>(i)]});
        }
        step(dinst, state, {0, 0});
    } catch (const std::exception&) {
        return rep;
    }
    rep.feasible = true;
    rep.complete = state.covered_count() == dinst.n();
    rep.env_length = state.length_so_far;
    return rep;
}

namespace detail {

inline void insert_stop(Route& r, int position, int node, int waypoint_id, const Point& wp) {
    // position p means: between stop p and stop p+1 (closing edge for the last p)
    r.nodes.insert(r.nodes.begin() + position + 1, node);
    r.waypoint_ids.insert(r.waypoint_ids.begin() + position + 1, waypoint_id);
    r.waypoints.insert(r.waypoints.begin() + position + 1, wp);
    r.recompute_length();
}

inline void remove_stop(Route& r, int position) {
    r.nodes.erase(r.nodes.begin() + position);
    r.waypoint_ids.erase(r.waypoint_ids.begin() + position);
    r.waypoints.erase(r.waypoints.begin() + position);
    r.recompute_length();
}

inline double insertion_cost(const Route& r, int position, const Point& wp) {
    const auto& a = r.waypoints[static_cast<std::size_t>(position)];
    const auto& b = r.waypoints[static_cast<std::size_t>((position + 1) % r.stop_count())];
    return dist(a, wp) + dist(wp, b) - dist(a, b);
}

struct InsertionChoice {
    double cost = std::numeric_limits<double>::infinity();
    int node = -1;
    int position = -1;
    int waypoint_id = -1;

    bool better_than(const InsertionChoice& o) const {
        if (cost != o.cost) return cost < o.cost;
        if (node != o.node) return node < o.node;
        if (position != o.position) return position < o.position;
        return waypoint_id < o.waypoint_id;
    }
};

// best insertion of one target over positions >= min_position
inline InsertionChoice best_insertion(const DiscretizedInstance& dinst, const Route& r, int target,
                                      int min_position, InsertionChoice* second_best = nullptr) {
    InsertionChoice best, second;
    for (int p = min_position; p < r.stop_count(); ++p) {
        for (int k = 0; k < dinst.gamma; ++k) {
            InsertionChoice c;
            c.cost = insertion_cost(r, p, dinst.waypoint(target, k));
            c.node = target;
            c.position = p;
            c.waypoint_id = k;
            if (c.better_than(best)) {
                second = best;
                best = c;
            } else if (c.better_than(second)) {
                second = c;
            }
        }
    }
    if (second_best) *second_best = second;
    return best;
}

// Drops stops whose targets stay covered without them, keeping every other
// target covered. Strictly shortens the route (triangle inequality).
inline void prune_redundant_stops(const DiscretizedInstance& dinst, Route& r) {
    bool changed = true;
    while (changed) {
        changed = false;
        for (int i = 1; i < r.stop_count(); ++i) {
            Route candidate = r;
            remove_stop(candidate, i);
            if (route_covers_all(dinst, candidate, /*include_closing=*/false)) {
                r = std::move(candidate);
                changed = true;
                break;
            }
        }
    }
}

// Cheapest-inserts stops for any targets the route no longer covers; needed
// whenever an insertion or removal splits an edge that was covering targets
// in passing.
inline void restore_missing_coverage(const DiscretizedInstance& dinst, Route& r, int min_position = 0) {
    for (;;) {
        const auto cov = route_coverage(dinst, r, /*include_closing=*/false);
        int missing = -1;
        for (int t = 1; t <= dinst.n(); ++t)
            if (!cov[static_cast<std::size_t>(t - 1)]) {
                missing = t;
                break;
            }
        if (missing < 0) return;
        const auto choice = best_insertion(dinst, r, missing, std::min(min_position, r.stop_count() - 1));
        insert_stop(r, choice.position, choice.node, choice.waypoint_id,
                    dinst.waypoint(choice.node, choice.waypoint_id));
    }
}

// The MDP cannot stop at an already-covered target. A stop made redundant by
// an earlier edge is removed; any coverage lost with it is re-inserted.
inline void repair_env_feasibility(const DiscretizedInstance& dinst, Route& r, int frozen_stops = 1) {
    for (int round = 0; round < 100; ++round) {
        std::vector<char> covered(static_cast<std::size_t>(dinst.n()), 0);
        auto mark = [&](const Point& a, const Point& b) {
            for (int t = 1; t <= dinst.n(); ++t)
                if (!covered[static_cast<std::size_t>(t - 1)] && segment_disk_intersects(a, b, dinst.disk(t)))
                    covered[static_cast<std::size_t>(t - 1)] = 1;
        };
        mark(r.waypoints[0], r.waypoints[0]);
        int offender = -1;
        for (int i = 1; i < r.stop_count(); ++i) {
            if (covered[static_cast<std::size_t>(r.nodes[static_cast<std::size_t>(i)] - 1)] && i >= frozen_stops) {
                offender = i;
                break;
            }
            mark(r.waypoints[static_cast<std::size_t>(i - 1)], r.waypoints[static_cast<std::size_t>(i)]);
        }
        if (offender < 0) return;

        remove_stop(r, offender);
        restore_missing_coverage(dinst, r, frozen_stops - 1);
    }
    throw std::runtime_error("repair_env_feasibility: did not converge");
}

}  // namespace detail

// Greedy construction: walk to the nearest uncovered target's nearest
// waypoint, skipping anything already covered in passing.
inline Route nearest_neighbor(const DiscretizedInstance& dinst) {
    Route r = Route::depot_only(dinst);
    auto covered = route_coverage(dinst, r);
    Point current = dinst.base.depot;
    for (;;) {
        int best_target = -1;
        double best_d = std::numeric_limits<double>::infinity();
        for (int t = 1; t <= dinst.n(); ++t) {
            if (covered[static_cast<std::size_t>(t - 1)]) continue;
            const double d = dist(current, dinst.disk(t).center);
            if (d < best_d) {
                best_d = d;
                best_target = t;
            }
        }
        if (best_target < 0) break;
        int best_k = 0;
        double best_wd = std::numeric_limits<double>::infinity();
        for (int k = 0; k < dinst.gamma; ++k) {
            const double d = dist(current, dinst.waypoint(best_target, k));
            if (d < best_wd) {
                best_wd = d;
                best_k = k;
            }
        }
        const Point wp = dinst.waypoint(best_target, best_k);
        r.nodes.push_back(best_target);
        r.waypoint_ids.push_back(best_k);
        r.waypoints.push_back(wp);
        covered[static_cast<std::size_t>(best_target - 1)] = 1;
        for (int t = 1; t <= dinst.n(); ++t)
            if (!covered[static_cast<std::size_t>(t - 1)] && segment_disk_intersects(current, wp, dinst.disk(t)))
                covered[static_cast<std::size_t>(t - 1)] = 1;
        current = wp;
    }
    r.recompute_length();
    detail::prune_redundant_stops(dinst, r);
    detail::repair_env_feasibility(dinst, r);
    return r;
}

// Repeatedly inserts the uncovered target at the position and waypoint with
// the smallest length increase; ties go to lower node index, position, then
// waypoint index.
inline Route cheapest_insertion(const DiscretizedInstance& dinst,
                                std::optional<Route> partial = std::nullopt) {
    Route r = partial.value_or(Route::depot_only(dinst));
    for (;;) {
        const auto covered = route_coverage(dinst, r, /*include_closing=*/false);
        detail::InsertionChoice best;
        for (int t = 1; t <= dinst.n(); ++t) {
            if (covered[static_cast<std::size_t>(t - 1)]) continue;
            const auto choice = detail::best_insertion(dinst, r, t, 0);
            if (choice.better_than(best)) best = choice;
        }
        if (best.node < 0) break;
        detail::insert_stop(r, best.position, best.node, best.waypoint_id,
                            dinst.waypoint(best.node, best.waypoint_id));
    }
    detail::prune_redundant_stops(dinst, r);
    detail::repair_env_feasibility(dinst, r);
    return r;
}

enum class InsertMode { cheapest, regret2, greedy };

// Inserts newly revealed targets into an existing route without touching the
// executed prefix (stops 0..frozen_stops-1). Targets whose disks already meet
// a remaining edge are only marked covered.
inline Route insert_dynamic(const DiscretizedInstance& dinst, const Route& route,
                            const std::vector<int>& new_targets, InsertMode mode,
                            int frozen_stops = 1) {
    if (frozen_stops < 1 || frozen_stops > route.stop_count())
        throw std::invalid_argument("insert_dynamic: frozen prefix out of range");
    for (int t : new_targets) {
        if (t < 1 || t > dinst.n()) throw std::invalid_argument("insert_dynamic: unknown target");
        for (int existing : route.nodes)
            if (existing == t) throw std::invalid_argument("insert_dynamic: target already routed");
    }
    Route r = route;
    const int min_pos = frozen_stops - 1;  // first insertable edge starts at the last frozen stop

    std::vector<int> pending = new_targets;
    auto drop_covered = [&] {
        const auto covered = route_coverage(dinst, r, /*include_closing=*/false);
        std::erase_if(pending, [&](int t) { return covered[static_cast<std::size_t>(t - 1)] != 0; });
    };
    drop_covered();

    if (mode == InsertMode::greedy) {
        // arrival order, each at its individually best slot
        while (!pending.empty()) {
            const int t = pending.front();
            const auto choice = detail::best_insertion(dinst, r, t, min_pos);
            detail::insert_stop(r, choice.position, choice.node, choice.waypoint_id,
                                dinst.waypoint(choice.node, choice.waypoint_id));
            pending.erase(pending.begin());
            drop_covered();
        }
    } else {
        while (!pending.empty()) {
            detail::InsertionChoice pick;
            double pick_regret = -1.0;
            for (int t : pending) {
                detail::InsertionChoice second;
                const auto best = detail::best_insertion(dinst, r, t, min_pos, &second);
                if (mode == InsertMode::cheapest) {
                    if (best.better_than(pick)) pick = best;
                } else {
                    const double regret =
                        std::isfinite(second.cost) ? second.cost - best.cost : 0.0;
                    if (regret > pick_regret ||
                        (regret == pick_regret && pick.node >= 0 && best.node < pick.node)) {
                        pick_regret = regret;
                        pick = best;
                    }
                }
            }
            detail::insert_stop(r, pick.position, pick.node, pick.waypoint_id,
                                dinst.waypoint(pick.node, pick.waypoint_id));
            std::erase(pending, pick.node);
            drop_covered();
        }
    }
    detail::restore_missing_coverage(dinst, r, min_pos);
    detail::repair_env_feasibility(dinst, r, frozen_stops);
    return r;
}

namespace detail {

// argmin over the disk of |a-y| + |y-b|: the chord point when the segment
// crosses the disk, otherwise a boundary point located by golden-section
// over the angle, seeded from 8 windows to dodge non-unimodality.
inline Point best_point_on_disk(const Point& a, const Point& b, const Disk& disk, double tol = 1e-10) {
    if (disk.radius <= 0.0) return disk.center;
    if (segment_disk_intersects(a, b, disk)) {
        const double abx = b.x - a.x, aby = b.y - a.y;
        const double len2 = abx * abx + aby * aby;
        double t = 0.0;
        if (len2 > 0.0)
            t = std::clamp(((disk.center.x - a.x) * abx + (disk.center.y - a.y) * aby) / len2, 0.0, 1.0);
        return {a.x + t * abx, a.y + t * aby};
    }
    auto eval = [&](double ang) {
        const Point y{disk.center.x + disk.radius * std::cos(ang),
                      disk.center.y + disk.radius * std::sin(ang)};
        return dist(a, y) + dist(y, b);
    };
    constexpr double kInvPhi = 0.6180339887498949;
    const double window = 2.0 * std::numbers::pi / 8.0;
    double best_ang = 0.0, best_val = std::numeric_limits<double>::infinity();
    for (int s = 0; s < 8; ++s) {
        double lo = s * window - window / 2.0;
        double hi = s * window + window / 2.0;
        double x1 = hi - kInvPhi * (hi - lo);
        double x2 = lo + kInvPhi * (hi - lo);
        double f1 = eval(x1), f2 = eval(x2);
        while (hi - lo > tol) {
            if (f1 < f2) {
                hi = x2;
                x2 = x1;
                f2 = f1;
                x1 = hi - kInvPhi * (hi - lo);
                f1 = eval(x1);
            } else {
                lo = x1;
                x1 = x2;
                f1 = f2;
                x2 = lo + kInvPhi * (hi - lo);
                f2 = eval(x2);
            }
        }
        const double mid = 0.5 * (lo + hi);
        const double val = eval(mid);
        if (val < best_val) {
            best_val = val;
            best_ang = mid;
        }
    }
    return {disk.center.x + disk.radius * std::cos(best_ang),
            disk.center.y + disk.radius * std::sin(best_ang)};
}

}  // namespace detail

// Coordinate descent over stop waypoints with the node order fixed. Length
// never increases; moves that would break pass-through coverage are skipped.
inline Route refine_waypoints(const Route& route, const Instance& inst) {
    Route r = route;
    DiscretizedInstance shape;  // only the disks matter for coverage checks here
    shape.base = inst;
    shape.gamma = 1;

    for (int sweep = 0; sweep < 1000; ++sweep) {
        double improvement = 0.0;
        for (int i = 1; i < r.stop_count(); ++i) {
            const int node = r.nodes[static_cast<std::size_t>(i)];
            if (node == 0) continue;
            const int m = r.stop_count();
            const Point& a = r.waypoints[static_cast<std::size_t>(i - 1)];
            const bool last_open = !r.closed && i == m - 1;
            const Point& b = last_open ? a : r.waypoints[static_cast<std::size_t>((i + 1) % m)];
            const Disk& disk = inst.targets[static_cast<std::size_t>(node - 1)];

            const double old_cost = dist(a, r.waypoints[static_cast<std::size_t>(i)]) +
                                    dist(r.waypoints[static_cast<std::size_t>(i)], b);
            const Point candidate = detail::best_point_on_disk(a, b, disk);
            const double new_cost = dist(a, candidate) + dist(candidate, b);
            if (new_cost >= old_cost - 1e-15) continue;

            Route trial = r;
            trial.waypoints[static_cast<std::size_t>(i)] = candidate;
            trial.waypoint_ids[static_cast<std::size_t>(i)] = -1;
            if (!route_covers_all(shape, trial)) continue;
            trial.recompute_length();
            improvement += r.length - trial.length;
            r = std::move(trial);
        }
        if (improvement < 1e-9) break;
    }
    return r;
}

// Exhaustive depth-first search over stop sequences and waypoint choices with
// pass-through skipping. Lexicographically first among equal optima.
inline Route brute_force(const DiscretizedInstance& dinst) {
    const int n = dinst.n();
    if (n > 6 || dinst.gamma > 5)
        throw std::invalid_argument("brute_force: guard exceeded (needs n <= 6 and gamma <= 5)");

    Route best;
    double best_len = std::numeric_limits<double>::infinity();

    std::vector<char> covered(static_cast<std::size_t>(n), 0);
    for (int t = 1; t <= n; ++t)
        if (segment_disk_intersects(dinst.base.depot, dinst.base.depot, dinst.disk(t)))
            covered[static_cast<std::size_t>(t - 1)] = 1;

    Route current = Route::depot_only(dinst);
    auto all_covered = [&] {
        for (char c : covered)
            if (!c) return false;
        return true;
    };

    auto dfs = [&](auto&& self, double length) -> void {
        if (length >= best_len) return;
        if (all_covered()) {
            const double total = length + dist(current.waypoints.back(), dinst.base.depot);
            if (total < best_len) {
                best_len = total;
                best = current;
                best.recompute_length();
            }
            return;
        }
        for (int t = 1; t <= n; ++t) {
            if (covered[static_cast<std::size_t>(t - 1)]) continue;
            for (int k = 0; k < dinst.gamma; ++k) {
                const Point wp = dinst.waypoint(t, k);
                const Point from = current.waypoints.back();
                const double edge = dist(from, wp);
                if (length + edge >= best_len) continue;

                std::vector<int> newly;
                covered[static_cast<std::size_t>(t - 1)] += 1;
                if (covered[static_cast<std::size_t>(t - 1)] == 1) newly.push_back(t);
                for (int u = 1; u <= n; ++u) {
                    if (u == t || covered[static_cast<std::size_t>(u - 1)]) continue;
                    if (segment_disk_intersects(from, wp, dinst.disk(u))) {
                        covered[static_cast<std::size_t>(u - 1)] = 1;
                        newly.push_back(u);
                    }
                }
                current.nodes.push_back(t);
                current.waypoint_ids.push_back(k);
                current.waypoints.push_back(wp);

                self(self, length + edge);

                current.nodes.pop_back();
                current.waypoint_ids.pop_back();
                current.waypoints.pop_back();
                for (int u : newly) covered[static_cast<std::size_t>(u - 1)] = 0;
            }
        }
    };
    dfs(dfs, 0.0);
    return best;
}

}  // namespace cetsp
