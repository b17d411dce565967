#pragma once

#include <vector>

#include "cetsp/geometry.hpp"
#include "cetsp/instance.hpp"

namespace cetsp {

// Instance plus gamma boundary waypoints per target. Node 0 is the depot and
// contributes the single point `base.depot`.
//
// For replanning mid-execution the depot may stand for the vehicle's current
// position; `end_target`, when set, names a radius-0 target that must be
// visited last, and the tour ends there instead of closing back to node 0.
struct DiscretizedInstance {
    Instance base;
    int gamma = 0;
    double phase = 0.0;
    std::vector<std::vector<Point>> waypoints;  // [target i-1][k], i = 1..n
    int end_target = -1;                        // -1: ordinary closed tour

    int n() const { return base.n(); }
    bool open_ended() const { return end_target >= 1; }

    const Point& waypoint(int node, int k) const {
        if (node == 0) return base.depot;
        return waypoints[static_cast<std::size_t>(node - 1)][static_cast<std::size_t>(k)];
    }
    const Disk& disk(int target) const { return base.targets[static_cast<std::size_t>(target - 1)]; }
};

inline DiscretizedInstance discretize(const Instance& inst, int gamma, double phase = 0.0) {
    if (gamma < 1) throw std::invalid_argument("discretize: gamma must be >= 1");
    DiscretizedInstance d;
    d.base = inst;
    d.gamma = gamma;
    d.phase = phase;
    d.waypoints.reserve(inst.targets.size());
    for (const auto& t : inst.targets) d.waypoints.push_back(pds_points(t, gamma, phase));
    return d;
}

struct Action {
    int node = -1;            // 0 = depot
    int waypoint_index = 0;   // ignored for the depot
};

struct EnvState {
    std::vector<int> nodes;        // visited node sequence, nodes[0] == 0
    std::vector<Point> waypoints;  // matching waypoint sequence
    std::vector<char> covered;     // per target, 1-based shifted to [0..n-1]
    double length_so_far = 0.0;
    bool done = false;
    int forced_second = -1;        // multistart assignment, -1 once consumed

    bool is_covered(int target) const { return covered[static_cast<std::size_t>(target - 1)] != 0; }
    int covered_count() const {
        int c = 0;
        for (char v : covered) c += v != 0;
        return c;
    }
};

namespace detail {

inline void mark_edge_coverage(const DiscretizedInstance& dinst, EnvState& s,
                               const Point& a, const Point& b) {
    for (int t = 1; t <= dinst.n(); ++t) {
        if (s.covered[static_cast<std::size_t>(t - 1)]) continue;
        if (segment_disk_intersects(a, b, dinst.disk(t)))
            s.covered[static_cast<std::size_t>(t - 1)] = 1;
    }
}

}  // namespace detail

// One state per trajectory; trajectory j is forced to visit target j+1 as its
// second node (POMO-style multistart), recorded in `forced_second`.
inline std::vector<EnvState> reset(const DiscretizedInstance& dinst, int n_starts) {
    const int n = dinst.n();
    if (n_starts < 1 || n_starts > n)
        throw std::invalid_argument("reset: n_starts must be in [1, n]");
    if (dinst.open_ended() && n_starts > n - 1)
        throw std::invalid_argument("reset: the mandatory end target cannot seed a multistart");

    EnvState proto;
    proto.nodes = {0};
    proto.waypoints = {dinst.base.depot};
    proto.covered.assign(static_cast<std::size_t>(n), 0);
    detail::mark_edge_coverage(dinst, proto, dinst.base.depot, dinst.base.depot);

    std::vector<EnvState> batch(static_cast<std::size_t>(n_starts), proto);
    for (int j = 0; j < n_starts; ++j) batch[static_cast<std::size_t>(j)].forced_second = j + 1;
    return batch;
}

// Feasible nodes: uncovered targets; the depot (or the mandatory end target)
// only once everything else is covered, and then exclusively.
inline std::vector<char> feasible_mask(const DiscretizedInstance& dinst, const EnvState& s) {
    if (s.done) throw std::logic_error("feasible_mask: state is done");
    const int n = dinst.n();
    std::vector<char> mask(static_cast<std::size_t>(n) + 1, 0);

    bool rest_covered = true;
    for (int t = 1; t <= n; ++t) {
        if (t == dinst.end_target) continue;
        if (!s.is_covered(t)) {
            mask[static_cast<std::size_t>(t)] = 1;
            rest_covered = false;
        }
    }
    if (dinst.open_ended()) {
        if (rest_covered) mask[static_cast<std::size_t>(dinst.end_target)] = 1;
    } else if (rest_covered) {
        mask[0] = 1;
    }
    return mask;
}

// `allow_forced` admits the recorded multistart second node even when its
// disk is already covered (the assignment must still be honored).
inline void step(const DiscretizedInstance& dinst, EnvState& s, const Action& a,
                 bool allow_forced = false) {
    if (s.done) throw std::logic_error("step: state is done");
    const int n = dinst.n();
    if (a.node < 0 || a.node > n) throw std::invalid_argument("step: node out of range");
    if (a.node != 0 && (a.waypoint_index < 0 || a.waypoint_index >= dinst.gamma))
        throw std::invalid_argument("step: waypoint_index out of range");

    const auto mask = feasible_mask(dinst, s);
    const bool forced_ok = allow_forced && a.node == s.forced_second && a.node != 0 &&
                           a.node != dinst.end_target;
    if (!mask[static_cast<std::size_t>(a.node)] && !forced_ok)
        throw std::invalid_argument("step: infeasible node");

    const Point from = s.waypoints.back();
    const Point to = (a.node == 0) ? dinst.base.depot : dinst.waypoint(a.node, a.waypoint_index);

    s.nodes.push_back(a.node);
    s.waypoints.push_back(to);
    s.length_so_far += dist(from, to);
    if (a.node != 0) s.covered[static_cast<std::size_t>(a.node - 1)] = 1;
    detail::mark_edge_coverage(dinst, s, from, to);
    if (s.forced_second >= 0) s.forced_second = -1;

    if (dinst.open_ended()) {
        s.done = (a.node == dinst.end_target);
    } else {
        s.done = (a.node == 0);
    }
}

inline double reward(const EnvState& s) {
    if (!s.done) throw std::logic_error("reward: state is not done");
    return -s.length_so_far;
}

}  // namespace cetsp
