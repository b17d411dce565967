#pragma once

#include "cetsp/training.hpp"

namespace cetsp {

struct DynamicScenario {
    Instance base;                        // static instance, unit square
    std::vector<Disk> dynamic_targets;    // revealed during execution
    std::vector<double> reveal_fraction;  // per dynamic target, in [0, 1]
    std::string id;

    void validate() const {
        if (dynamic_targets.size() != reveal_fraction.size())
            throw std::invalid_argument("DynamicScenario: schedule length mismatch");
        for (double f : reveal_fraction)
            if (!(f >= 0.0 && f <= 1.0))
                throw std::invalid_argument("DynamicScenario: reveal fraction outside [0, 1]");
        for (const auto& d : dynamic_targets)
            if (d.center.x < 0.0 || d.center.x > 1.0 || d.center.y < 0.0 || d.center.y > 1.0)
                throw std::invalid_argument("DynamicScenario: dynamic target outside the unit square");
    }
};

struct ReplanEvent {
    int step = 0;                    // arrival count when the reveal was processed
    std::vector<int> revealed;       // dynamic target indices (0-based)
    std::vector<Point> planned;      // full planned waypoint list after the replan
};

struct ExecutionTrace {
    std::vector<Point> visited;      // executed waypoints, depot to depot
    std::vector<ReplanEvent> events;
    double final_length = 0.0;
    bool covered_all_static = false;
    bool covered_all_dynamic = false;
};

enum class PlannerKind { policy, cheapest, regret2, greedy };

inline PlannerKind planner_from_name(const std::string& name) {
    if (name == "policy") return PlannerKind::policy;
    if (name == "cheapest" || name == "ci") return PlannerKind::cheapest;
    if (name == "regret2" || name == "mri") return PlannerKind::regret2;
    if (name == "greedy" || name == "mgi") return PlannerKind::greedy;
    throw std::invalid_argument("unknown planner '" + name + "'");
}

// Scenario naming follows CETSP<n>-<m>: n static targets plus m dynamic ones
// revealed at progress fractions uniform in [0.1, 0.8].
inline DynamicScenario make_scenario(int n_static, int n_dynamic, std::uint64_t seed) {
    GenConfig gen;
    gen.seed = mix64(seed, 0x64796e61ull);
    DynamicScenario sc;
    sc.base = generate(gen, n_static, 0);
    sc.id = "CETSP" + std::to_string(n_static) + "-" + std::to_string(n_dynamic) + "-" +
            std::to_string(seed);
    auto rng = rng_stream(seed, 0x64796e32ull);
    for (int i = 0; i < n_dynamic; ++i) {
        Disk d;
        d.center = {uniform01(rng), uniform01(rng)};
        d.radius = 0.1 * uniform01(rng);
        sc.dynamic_targets.push_back(d);
        sc.reveal_fraction.push_back(0.1 + 0.7 * uniform01(rng));
    }
    return sc;
}

// Scenario file: the instance format plus a `DYNAMIC <m>` section with one
// `<cx> <cy> <r> <reveal_fraction>` line per dynamic target.
inline void save_scenario(const std::string& path, const DynamicScenario& sc) {
    sc.validate();
    save(path, sc.base);
    std::ofstream out(path, std::ios::app);
    out << "DYNAMIC " << sc.dynamic_targets.size() << "\n";
    for (std::size_t i = 0; i < sc.dynamic_targets.size(); ++i)
        out << detail::fmt12(sc.dynamic_targets[i].center.x) << " "
            << detail::fmt12(sc.dynamic_targets[i].center.y) << " "
            << detail::fmt12(sc.dynamic_targets[i].radius) << " "
            << detail::fmt12(sc.reveal_fraction[i]) << "\n";
    if (!out) throw std::runtime_error("save_scenario: write failure on '" + path + "'");
}

inline DynamicScenario load_scenario(const std::string& path) {
    DynamicScenario sc;
    sc.base = load(path);
    sc.id = path;
    std::ifstream in(path);
    std::string line;
    for (int skip = 0; skip < sc.base.n() + 2; ++skip) std::getline(in, line);
    if (!std::getline(in, line)) throw std::runtime_error("load_scenario: missing DYNAMIC section");
    std::istringstream header(line);
    std::string tag;
    long m = -1;
    if (!(header >> tag >> m) || tag != "DYNAMIC" || m < 0)
        throw std::runtime_error("load_scenario: malformed DYNAMIC header");
    for (long i = 0; i < m; ++i) {
        if (!std::getline(in, line))
            throw std::runtime_error("load_scenario: truncated dynamic target list");
        std::istringstream row(line);
        double x, y, r, f;
        if (!(row >> x >> y >> r >> f))
            throw std::runtime_error("load_scenario: malformed dynamic target row");
        sc.dynamic_targets.push_back({{x, y}, r});
        sc.reveal_fraction.push_back(f);
    }
    sc.validate();
    return sc;
}

namespace detail {

// Replans the remaining tour with the policy: the current waypoint becomes a
// radius-0 pseudo-depot, uncovered nodes are re-encoded, and the true depot
// joins as a mandatory final stop.
inline std::vector<std::pair<int, int>> policy_replan(const Policy& policy, const Point& current,
                                                      const Point& true_depot,
                                                      const std::vector<std::pair<int, Disk>>& uncovered,
                                                      int gamma) {
    Instance replan;
    replan.depot = current;
    std::vector<int> to_full;  // replan target index-1 -> full-instance node
    for (const auto& [full_id, disk] : uncovered) {
        replan.targets.push_back(disk);
        to_full.push_back(full_id);
    }
    replan.targets.push_back({true_depot, 0.0});
    to_full.push_back(0);

    DiscretizedInstance dinst = discretize(replan, gamma);
    dinst.end_target = replan.n();

    diff::Tape tape;
    const TapeBinding binding = bind_params(tape, policy.params);
    const Embeddings emb = encode(tape, binding, replan, policy.cfg);
    const int n_starts = std::max(1, replan.n() - 1);

    // greedy multistart plus a few sampled batches; suffix instances differ
    // from the training distribution, so a little extra search pays off
    TrajectoryLog best;
    best.length = std::numeric_limits<double>::infinity();
    auto rng = rng_stream(0xd97a6ull, static_cast<std::uint64_t>(replan.n()));
    for (int round = 0; round < 8; ++round) {
        const auto mode = round == 0 ? DecodeMode::greedy : DecodeMode::sample;
        const auto rollouts = rollout(tape, binding, emb, dinst, policy.cfg, mode, n_starts, rng);
        for (const auto& t : rollouts.trajectories)
            if (t.length < best.length) best = t;
    }

    std::vector<std::pair<int, int>> suffix;  // (full node id, waypoint id)
    for (const auto& a : best.actions) {
        const int full = to_full[static_cast<std::size_t>(a.node - 1)];
        if (full == 0) break;  // mandatory end target: the route closes at the depot
        suffix.emplace_back(full, a.waypoint_index);
    }
    return suffix;
}

}  // namespace detail

// Algorithm: execute the planned tour waypoint by waypoint; when uncovered
// dynamic targets appear, replan the suffix from the current waypoint with
// the chosen planner, leaving the executed prefix untouched.
inline ExecutionTrace simulate(const DynamicScenario& scenario, PlannerKind planner,
                               const Policy* policy = nullptr, int gamma = 16) {
    scenario.validate();
    if (planner == PlannerKind::policy) {
        if (!policy) throw std::invalid_argument("simulate: policy planner needs a trained policy");
        gamma = policy->cfg.gamma;
    }

    // full instance: static targets 1..n, dynamic targets n+1..n+m
    Instance full = scenario.base;
    const int n_static = full.n();
    const int n_dynamic = static_cast<int>(scenario.dynamic_targets.size());
    for (const auto& d : scenario.dynamic_targets) full.targets.push_back(d);
    const auto dinst = discretize(full, gamma);

    // initial plan over the static part only
    DiscretizedInstance static_dinst = discretize(scenario.base, gamma);
    Route route;
    if (planner == PlannerKind::policy) {
        const SolveResult sol = greedy_solve(*policy, scenario.base, /*use_aug=*/true);
        route = Route::depot_only(static_dinst);
        for (std::size_t i = 1; i < sol.nodes.size(); ++i) {
            if (sol.nodes[i] == 0) break;
            route.nodes.push_back(sol.nodes[i]);
            route.waypoint_ids.push_back(-2);  // filled below
            route.waypoints.push_back(sol.waypoints[i]);
        }
        // recover waypoint ids from the PDS grid
        for (int s = 1; s < route.stop_count(); ++s) {
            const int node = route.nodes[static_cast<std::size_t>(s)];
            for (int k = 0; k < gamma; ++k)
                if (dist_sq(route.waypoints[static_cast<std::size_t>(s)], dinst.waypoint(node, k)) < 1e-20)
                    route.waypoint_ids[static_cast<std::size_t>(s)] = k;
        }
        route.recompute_length();
    } else {
        route = cheapest_insertion(static_dinst);
    }

    const int initial_moves = route.stop_count();  // stops-1 edges plus the closing move
    std::vector<int> reveal_step(static_cast<std::size_t>(n_dynamic));
    for (int i = 0; i < n_dynamic; ++i) {
        const int s = static_cast<int>(std::lround(scenario.reveal_fraction[static_cast<std::size_t>(i)] *
                                                   initial_moves));
        reveal_step[static_cast<std::size_t>(i)] = std::clamp(s, 1, std::max(1, initial_moves));
    }

    ExecutionTrace trace;
    trace.visited = {full.depot};
    std::vector<char> prefix_covered(static_cast<std::size_t>(full.n()), 0);
    auto mark_prefix = [&](const Point& a, const Point& b) {
        for (int t = 1; t <= full.n(); ++t)
            if (!prefix_covered[static_cast<std::size_t>(t - 1)] &&
                segment_disk_intersects(a, b, dinst.disk(t)))
                prefix_covered[static_cast<std::size_t>(t - 1)] = 1;
    };
    mark_prefix(full.depot, full.depot);

    std::vector<char> revealed(static_cast<std::size_t>(n_dynamic), 0);
    int exec_pos = 0;
    int arrivals = 0;

    auto planned_waypoints = [&] {
        std::vector<Point> p = route.waypoints;
        p.push_back(full.depot);
        return p;
    };

    while (true) {
        const bool final_move_next = exec_pos == route.stop_count() - 1;

        // reveals due now; everything still pending is flushed before the
        // final return so no target can slip past the horizon
        std::vector<int> due;
        for (int i = 0; i < n_dynamic; ++i)
            if (!revealed[static_cast<std::size_t>(i)] &&
                (reveal_step[static_cast<std::size_t>(i)] <= arrivals || final_move_next)) {
                revealed[static_cast<std::size_t>(i)] = 1;
                due.push_back(i);
            }

        if (!due.empty()) {
            std::vector<int> uncovered_new;
            for (int i : due)
                if (!prefix_covered[static_cast<std::size_t>(n_static + i)])
                    uncovered_new.push_back(n_static + i + 1);

            if (!uncovered_new.empty()) {
                if (planner == PlannerKind::policy) {
                    std::vector<std::pair<int, Disk>> uncovered;
                    for (int t = 1; t <= full.n(); ++t) {
                        if (prefix_covered[static_cast<std::size_t>(t - 1)]) continue;
                        if (t > n_static && !revealed[static_cast<std::size_t>(t - n_static - 1)]) continue;
                        uncovered.emplace_back(t, dinst.disk(t));
                    }
                    const auto suffix = detail::policy_replan(
                        *policy, route.waypoints[static_cast<std::size_t>(exec_pos)], full.depot,
                        uncovered, gamma);
                    route.nodes.resize(static_cast<std::size_t>(exec_pos) + 1);
                    route.waypoint_ids.resize(static_cast<std::size_t>(exec_pos) + 1);
                    route.waypoints.resize(static_cast<std::size_t>(exec_pos) + 1);
                    for (const auto& [node, wp] : suffix) {
                        route.nodes.push_back(node);
                        route.waypoint_ids.push_back(wp);
                        route.waypoints.push_back(dinst.waypoint(node, wp));
                    }
                    route.recompute_length();
                } else {
                    const InsertMode mode = planner == PlannerKind::cheapest ? InsertMode::cheapest
                                          : planner == PlannerKind::regret2  ? InsertMode::regret2
                                                                             : InsertMode::greedy;
                    // a target inserted by an earlier replan may still be en route
                    std::vector<int> fresh;
                    for (int t : uncovered_new) {
                        bool already = false;
                        for (int node : route.nodes) already = already || node == t;
                        if (!already) fresh.push_back(t);
                    }
                    route = insert_dynamic(dinst, route, fresh, mode, exec_pos + 1);
                }
                ReplanEvent ev;
                ev.step = arrivals;
                ev.revealed = due;
                ev.planned = planned_waypoints();
                trace.events.push_back(std::move(ev));
            }
        }

        // advance one move; the reveal flush above guarantees nothing is
        // pending once the closing move runs
        const Point from = route.waypoints[static_cast<std::size_t>(exec_pos)];
        if (exec_pos + 1 < route.stop_count()) {
            ++exec_pos;
            const Point to = route.waypoints[static_cast<std::size_t>(exec_pos)];
            mark_prefix(from, to);
            trace.visited.push_back(to);
            ++arrivals;
        } else {
            mark_prefix(from, full.depot);
            trace.visited.push_back(full.depot);
            ++arrivals;
            break;
        }
        if (trace.visited.size() > 65536)
            throw std::runtime_error("simulate: execution did not terminate");
    }

    trace.final_length = tour_length(trace.visited, false);
    trace.covered_all_static = true;
    trace.covered_all_dynamic = true;
    for (int t = 1; t <= full.n(); ++t) {
        if (prefix_covered[static_cast<std::size_t>(t - 1)]) continue;
        if (t <= n_static) trace.covered_all_static = false;
        else trace.covered_all_dynamic = false;
    }
    return trace;
}

}  // namespace cetsp
