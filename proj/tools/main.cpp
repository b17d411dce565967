#include <CLI11.hpp>

#include <iostream>

#include "cetsp/diff/gradcheck.hpp"
#include "cetsp/dynamic.hpp"
#include "cetsp/svg.hpp"

namespace {

using namespace cetsp;

Instance load_any_instance(const std::string& path) {
    std::ifstream probe(path);
    if (!probe) throw std::runtime_error("cannot open '" + path + "'");
    std::string first_word;
    probe >> first_word;
    if (first_word == "CETSP") return load(path);
    return import_xyzr(path);
}

RadiusConfig radius_from_name(const std::string& name) {
    if (name == "constant") return RadiusConfig::constant();
    if (name == "random") return RadiusConfig::random();
    throw CLI::ValidationError("--radius", "expected 'constant' or 'random'");
}

NodeDistribution dist_from_name(const std::string& name) {
    if (name == "uniform") return NodeDistribution::uniform;
    if (name == "clustered") return NodeDistribution::clustered;
    if (name == "mixed") return NodeDistribution::mixed;
    throw CLI::ValidationError("--dist", "expected uniform, clustered, or mixed");
}

std::vector<Instance> make_dataset(int count, int n, const std::string& radius,
                                   const std::string& dist, std::uint64_t seed) {
    GenConfig gen;
    gen.radius = radius_from_name(radius);
    gen.distribution = dist_from_name(dist);
    gen.seed = seed;
    std::vector<Instance> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) out.push_back(generate(gen, n, static_cast<std::uint64_t>(i)));
    return out;
}

bool report_check(const std::string& name, bool ok, const std::string& detail = "") {
    std::cout << (ok ? "[ok]   " : "[FAIL] ") << name;
    if (!detail.empty()) std::cout << " (" << detail << ")";
    std::cout << "\n";
    return ok;
}

int run_selftest() {
    bool all_ok = true;
    const PolicyConfig micro = [] {
        PolicyConfig c;
        c.layers = 1;
        c.heads = 2;
        c.dim = 16;
        c.gamma = 4;
        c.knn = 3;
        return c;
    }();
    GenConfig gen;
    gen.seed = 424242;

    // gradient fidelity of the policy surrogate loss on a micro instance
    {
        const Instance inst = generate(gen, 5, 0);
        const auto dinst = discretize(inst, micro.gamma);
        Policy policy = Policy::init(micro, 17);
        std::vector<std::vector<Action>> actions;
        std::vector<double> rewards;
        {
            diff::Tape tape;
            const TapeBinding binding = bind_params(tape, policy.params);
            const Embeddings emb = encode(tape, binding, inst, micro);
            auto rng = rng_stream(5, 5);
            const auto rollouts = rollout(tape, binding, emb, dinst, micro, DecodeMode::sample, 5, rng);
            for (const auto& t : rollouts.trajectories) {
                actions.push_back(t.actions);
                rewards.push_back(t.reward);
            }
        }
        auto surrogate = [&](const diff::ParamBlock& params, diff::GradMap* grads_out) {
            diff::Tape tape;
            const TapeBinding binding = bind_params(tape, params);
            const Embeddings emb = encode(tape, binding, inst, micro);
            auto rng = rng_stream(5, 5);
            auto rollouts =
                rollout(tape, binding, emb, dinst, micro, DecodeMode::sample, 5, rng, &actions);
            for (std::size_t j = 0; j < rollouts.trajectories.size(); ++j)
                rollouts.trajectories[j].reward = rewards[j];
            const double loss = reinforce_backward(tape, rollouts, 0.2);
            if (grads_out) *grads_out = collect_grads(tape, binding);
            return loss;
        };
        diff::GradMap analytic;
        surrogate(policy.params, &analytic);
        const auto res = diff::grad_check(
            [&](const diff::ParamBlock& p) { return surrogate(p, nullptr); }, analytic,
            policy.params, 1e-4, 200, 99);
        all_ok &= report_check("policy surrogate gradient vs central differences",
                               res.max_rel_err < 1e-4,
                               "max rel err " + std::to_string(res.max_rel_err));
    }

    // env lengths against the geometry oracle, brute force as a lower bound
    {
        bool ok = true;
        double worst = 0.0;
        auto rng = rng_stream(31, 7);
        for (std::uint64_t i = 0; i < 50 && ok; ++i) {
            const Instance inst = generate(gen, 4, 100 + i);
            const auto dinst = discretize(inst, 4);
            const Route best = brute_force(dinst);
            for (int trial = 0; trial < 4; ++trial) {
                EnvState state = reset(dinst, 1)[0];
                state.forced_second = -1;
                while (!state.done) {
                    const auto mask = feasible_mask(dinst, state);
                    std::vector<int> options;
                    for (int v = 0; v < static_cast<int>(mask.size()); ++v)
                        if (mask[v]) options.push_back(v);
                    Action a;
                    a.node =
                        options[std::uniform_int_distribution<std::size_t>(0, options.size() - 1)(rng)];
                    a.waypoint_index =
                        a.node == 0 ? 0 : std::uniform_int_distribution<int>(0, dinst.gamma - 1)(rng);
                    step(dinst, state, a);
                }
                const double oracle = tour_length(state.waypoints, false);
                worst = std::max(worst, std::abs(state.length_so_far - oracle));
                ok = ok && std::abs(state.length_so_far - oracle) < 1e-9;
                ok = ok && best.length <= state.length_so_far + 1e-9;
            }
        }
        all_ok &= report_check("env rollout lengths vs geometry oracle and brute-force bound", ok,
                               "worst abs err " + std::to_string(worst));
    }

    // refinement is monotone on a batch of heuristic routes
    {
        bool ok = true;
        for (std::uint64_t i = 0; i < 25 && ok; ++i) {
            const Instance inst = generate(gen, 6, 300 + i);
            const auto dinst = discretize(inst, 5);
            const Route base = nearest_neighbor(dinst);
            const Route refined = refine_waypoints(base, inst);
            ok = ok && refined.length <= base.length + 1e-12;
        }
        all_ok &= report_check("waypoint refinement never lengthens a route", ok);
    }

    // augmentation symmetry on tours
    {
        bool ok = true;
        auto rng = rng_stream(77, 1);
        for (int trial = 0; trial < 25 && ok; ++trial) {
            std::vector<Point> pts;
            for (int i = 0; i < 8; ++i) pts.push_back({uniform01(rng), uniform01(rng)});
            const double base = tour_length(pts, true);
            for (int m = 0; m < 8; ++m) {
                std::vector<Point> mapped;
                for (const auto& p : pts) mapped.push_back(apply_symmetry(p, m));
                ok = ok && std::abs(tour_length(mapped, true) - base) < 1e-9;
            }
        }
        all_ok &= report_check("symmetry transforms preserve tour length", ok);
    }

    std::cout << (all_ok ? "selftest passed" : "selftest FAILED") << "\n";
    return all_ok ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Close-enough TSP solver toolkit"};
    app.require_subcommand(1);
    app.set_config("--config", "", "Read options from an INI file");

    // ---- gen ----
    auto* gen_cmd = app.add_subcommand("gen", "Generate instance files");
    int gen_n = 20, gen_count = 1;
    std::string gen_radius = "random", gen_dist = "uniform", gen_out = "instance.txt";
    std::uint64_t gen_seed = 1;
    gen_cmd->add_option("--n", gen_n, "Targets per instance")->check(CLI::PositiveNumber);
    gen_cmd->add_option("--count", gen_count, "Number of instances");
    gen_cmd->add_option("--radius", gen_radius, "constant|random");
    gen_cmd->add_option("--dist", gen_dist, "uniform|clustered|mixed");
    gen_cmd->add_option("--seed", gen_seed, "RNG seed");
    gen_cmd->add_option("--out", gen_out, "Output file (or prefix when --count > 1)");

    // ---- train ----
    auto* train_cmd = app.add_subcommand("train", "Train the policy");
    TrainConfig tc;
    PolicyConfig pc;
    pc.dim = 64;
    std::string train_out = "checkpoints", train_metrics, train_radius = "both",
                train_dist = "uniform", train_resume;
    std::vector<int> train_sizes{10, 20};
    train_cmd->add_option("--epochs", tc.epochs, "Training epochs");
    train_cmd->add_option("--instances", tc.instances_per_epoch, "Instances per epoch");
    train_cmd->add_option("--batch", tc.batch_size, "Minibatch size");
    train_cmd->add_option("--sizes", train_sizes, "Problem sizes to sample")->delimiter(',');
    train_cmd->add_option("--radius", train_radius, "constant|random|both");
    train_cmd->add_option("--dist", train_dist, "uniform|clustered|mixed");
    train_cmd->add_option("--lr", tc.lr, "Adam learning rate");
    train_cmd->add_option("--weight-decay", tc.weight_decay, "Decoupled weight decay");
    train_cmd->add_option("--seed", tc.seed, "RNG seed");
    train_cmd->add_option("--workers", tc.workers, "Worker threads (0 = hardware)");
    train_cmd->add_option("--gamma", pc.gamma, "PDS waypoints per neighborhood");
    train_cmd->add_option("--knn", pc.knn, "k-NN subgraph size");
    train_cmd->add_option("--layers", pc.layers, "Encoder layers");
    train_cmd->add_option("--heads", pc.heads, "Attention heads");
    train_cmd->add_option("--dim", pc.dim, "Model dimension");
    train_cmd->add_flag("!--no-knn-interaction", pc.knn_interaction,
                        "Loc-decoder keys from the selected node only");
    train_cmd->add_flag("!--plain-encoder", pc.adapted_encoder,
                        "Post-norm encoder with a plain ReLU feed-forward");
    train_cmd->add_option("--resume", train_resume, "Checkpoint to continue from");
    train_cmd->add_option("--eval-every", tc.eval_every, "Held-out eval cadence in epochs (0 = off)");
    train_cmd->add_option("--out", train_out, "Checkpoint directory");
    train_cmd->add_option("--metrics", train_metrics, "Metrics CSV path");

    // ---- solve ----
    auto* solve_cmd = app.add_subcommand("solve", "Solve instance files with a trained policy");
    std::string solve_model, solve_plot, solve_route_out;
    std::vector<std::string> solve_inputs;
    bool solve_aug = false, solve_refine = false;
    solve_cmd->add_option("--model", solve_model, "Policy checkpoint")->required();
    solve_cmd->add_option("input", solve_inputs, "Instance file(s)")->required();
    solve_cmd->add_flag("--aug", solve_aug, "Solve all 8 symmetry images, keep the best");
    solve_cmd->add_flag("--refine", solve_refine, "Post-optimize waypoints");
    solve_cmd->add_option("--plot", solve_plot, "Write the route as SVG");
    solve_cmd->add_option("--out", solve_route_out, "Write the route waypoints to a file");

    // ---- eval ----
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate against baselines on generated data");
    std::string eval_model, eval_radius = "random", eval_dist = "uniform", eval_csv;
    int eval_n = 20, eval_count = 100;
    std::uint64_t eval_seed = 9000;
    bool eval_aug = false;
    std::vector<std::string> eval_baselines{"ci"};
    eval_cmd->add_option("--model", eval_model, "Policy checkpoint")->required();
    eval_cmd->add_option("--n", eval_n, "Targets per instance");
    eval_cmd->add_option("--count", eval_count, "Instances in the group");
    eval_cmd->add_option("--seed", eval_seed, "Dataset seed");
    eval_cmd->add_option("--radius", eval_radius, "constant|random");
    eval_cmd->add_option("--dist", eval_dist, "uniform|clustered|mixed");
    eval_cmd->add_flag("--aug", eval_aug, "Include the augmented policy row");
    eval_cmd->add_option("--baselines", eval_baselines, "Baselines: ci, nn")->delimiter(',');
    eval_cmd->add_option("--csv", eval_csv, "Write machine-readable rows here");

    // ---- dynamic ----
    auto* dyn_cmd = app.add_subcommand("dynamic", "Simulate dynamic scenarios");
    std::string dyn_model, dyn_planner = "policy", dyn_scenario;
    int dyn_n = 20, dyn_m = 2, dyn_count = 100, dyn_gamma = 16;
    std::uint64_t dyn_seed = 7000;
    dyn_cmd->add_option("--model", dyn_model, "Policy checkpoint (policy planner)");
    dyn_cmd->add_option("--planner", dyn_planner, "policy|cheapest|regret2|greedy");
    dyn_cmd->add_option("--scenario", dyn_scenario, "Scenario file (otherwise generated)");
    dyn_cmd->add_option("--n", dyn_n, "Static targets");
    dyn_cmd->add_option("--m", dyn_m, "Dynamic targets");
    dyn_cmd->add_option("--count", dyn_count, "Scenario count");
    dyn_cmd->add_option("--seed", dyn_seed, "Scenario seed");
    dyn_cmd->add_option("--gamma", dyn_gamma, "PDS waypoints (insertion planners)");

    // ---- selftest / plot ----
    auto* selftest_cmd = app.add_subcommand("selftest", "Gradient checks and env-vs-oracle suite");
    auto* plot_cmd = app.add_subcommand("plot", "Render an instance (and optional route) to SVG");
    std::string plot_input, plot_route, plot_out = "plot.svg";
    plot_cmd->add_option("--input", plot_input, "Instance file")->required();
    plot_cmd->add_option("--route", plot_route, "Route file");
    plot_cmd->add_option("--out", plot_out, "Output SVG path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        if (*gen_cmd) {
            std::cout << "seed: " << gen_seed << "\n";
            GenConfig cfg;
            cfg.radius = radius_from_name(gen_radius);
            cfg.distribution = dist_from_name(gen_dist);
            cfg.seed = gen_seed;
            for (int i = 0; i < gen_count; ++i) {
                const Instance inst = generate(cfg, gen_n, static_cast<std::uint64_t>(i));
                const std::string path =
                    gen_count == 1 ? gen_out : gen_out + "." + std::to_string(i) + ".txt";
                save(path, inst);
                std::cout << "wrote " << path << " (n=" << gen_n << ")\n";
            }
            return 0;
        }

        if (*train_cmd) {
            std::cout << "seed: " << tc.seed << "\n";
            tc.sizes = train_sizes;
            tc.radius_constant = train_radius == "constant" || train_radius == "both";
            tc.radius_random = train_radius == "random" || train_radius == "both";
            tc.distribution = dist_from_name(train_dist);
            tc.checkpoint_dir = train_out;
            tc.metrics_path = train_metrics;
            Policy policy =
                train_resume.empty() ? Policy::init(pc, tc.seed) : load_policy(train_resume);
            train(tc, policy, [](const BatchStats& s) {
                if (s.batch == 0)
                    std::cout << "epoch " << s.epoch << " mean_reward " << s.mean_reward
                              << " grad_norm " << s.grad_norm << "\n";
            });
            std::cout << "checkpoints in " << train_out << "\n";
            return 0;
        }

        if (*solve_cmd) {
            const Policy policy = load_policy(solve_model);
            std::cout << "instance                          Obj.        Time\n";
            for (const auto& input : solve_inputs) {
                const auto t0 = std::chrono::steady_clock::now();
                const Instance raw = load_any_instance(input);
                double scale = 1.0;
                Instance inst = raw;
                const bool needs_norm = [&] {
                    auto outside = [](const Point& p) {
                        return p.x < 0.0 || p.x > 1.0 || p.y < 0.0 || p.y > 1.0;
                    };
                    bool any = outside(raw.depot);
                    for (const auto& t : raw.targets) any = any || outside(t.center);
                    return any;
                }();
                if (needs_norm) {
                    const auto norm = normalize(raw);
                    inst = norm.instance;
                    scale = norm.scale;
                }
                SolveResult sol = greedy_solve(policy, inst, solve_aug);
                if (solve_refine) {
                    Route r;
                    r.nodes = sol.nodes;
                    r.waypoints = sol.waypoints;
                    if (r.nodes.size() > 1 && r.nodes.back() == 0) {  // drop the closing duplicate
                        r.nodes.pop_back();
                        r.waypoints.pop_back();
                    }
                    r.waypoint_ids.assign(r.nodes.size(), -1);
                    r.recompute_length();
                    const Route refined = refine_waypoints(r, inst);
                    sol.nodes = refined.nodes;
                    sol.waypoints = refined.waypoints;
                    sol.waypoints.push_back(refined.waypoints.front());
                    sol.length = refined.length;
                }
                const double wall =
                    std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
                char row[160];
                std::snprintf(row, sizeof(row), "%-32s  %-10.4f  %.2fs\n", input.c_str(),
                              sol.length * scale, wall);
                std::cout << row;
                if (!solve_plot.empty()) render_svg(solve_plot, inst, &sol.waypoints);
                if (!solve_route_out.empty()) save_route(solve_route_out, sol.waypoints);
            }
            return 0;
        }

        if (*eval_cmd) {
            std::cout << "seed: " << eval_seed << "\n";
            const Policy policy = load_policy(eval_model);
            const auto dataset = make_dataset(eval_count, eval_n, eval_radius, eval_dist, eval_seed);
            const EvalReport report = evaluate(policy, dataset, eval_aug, eval_baselines);
            std::cout << format_eval_table(report);
            if (!eval_csv.empty()) {
                std::ofstream out(eval_csv);
                out << format_eval_csv(report);
                std::cout << "rows written to " << eval_csv << "\n";
            }
            return 0;
        }

        if (*dyn_cmd) {
            std::cout << "seed: " << dyn_seed << "\n";
            const PlannerKind kind = planner_from_name(dyn_planner);
            Policy policy;
            if (kind == PlannerKind::policy) {
                if (dyn_model.empty())
                    throw std::runtime_error("dynamic: --model is required for the policy planner");
                policy = load_policy(dyn_model);
            }
            std::vector<DynamicScenario> scenarios;
            if (!dyn_scenario.empty()) {
                scenarios.push_back(load_scenario(dyn_scenario));
            } else {
                for (int i = 0; i < dyn_count; ++i)
                    scenarios.push_back(
                        make_scenario(dyn_n, dyn_m, dyn_seed + static_cast<std::uint64_t>(i)));
            }
            double total = 0.0;
            int covered = 0;
            for (const auto& sc : scenarios) {
                const auto trace = simulate(sc, kind, kind == PlannerKind::policy ? &policy : nullptr,
                                            kind == PlannerKind::policy ? policy.cfg.gamma : dyn_gamma);
                total += trace.final_length;
                covered += trace.covered_all_static && trace.covered_all_dynamic;
            }
            std::cout << "planner " << dyn_planner << "  scenarios " << scenarios.size()
                      << "  mean length " << total / static_cast<double>(scenarios.size())
                      << "  fully covered " << covered << "/" << scenarios.size() << "\n";
            return 0;
        }

        if (*selftest_cmd) return run_selftest();

        if (*plot_cmd) {
            const Instance inst = load_any_instance(plot_input);
            std::vector<Point> route;
            if (!plot_route.empty()) route = load_route(plot_route);
            render_svg(plot_out, inst, plot_route.empty() ? nullptr : &route);
            std::cout << "wrote " << plot_out << "\n";
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
