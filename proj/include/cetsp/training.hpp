#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>

#include "cetsp/heuristics.hpp"
#include "cetsp/parallel.hpp"
#include "cetsp/policy.hpp"

namespace cetsp {

struct TrainConfig {
    int epochs = 50;
    int instances_per_epoch = 10000;
    int batch_size = 64;
    std::vector<int> sizes{10, 20};
    bool radius_constant = true;
    bool radius_random = true;
    NodeDistribution distribution = NodeDistribution::uniform;
    double lr = 1e-4;
    double weight_decay = 1e-6;
    double grad_clip = 1.0;
    std::uint64_t seed = 1;
    int workers = 0;  // 0: hardware count (CETSP_WORKERS still caps)
    int eval_every = 0;  // epochs between held-out greedy evals, 0 = off
    std::string checkpoint_dir;
    std::string metrics_path;

    void validate() const {
        if (epochs < 1 || instances_per_epoch < 1) throw std::invalid_argument("TrainConfig: empty schedule");
        if (batch_size < 1 || batch_size > instances_per_epoch)
            throw std::invalid_argument("TrainConfig: batch size out of range");
        if (sizes.empty()) throw std::invalid_argument("TrainConfig: no problem sizes");
        if (!radius_constant && !radius_random) throw std::invalid_argument("TrainConfig: no radius type");
        if (lr <= 0.0) throw std::invalid_argument("TrainConfig: lr must be positive");
    }
};

// Shared-baseline surrogate for one instance's multistart trajectories:
//   advantage_j = R_j - mean(R),  loss += -scale * sum_j advantage_j * logp_j.
// Backpropagates through the tape and returns the loss contribution.
inline double reinforce_backward(diff::Tape& tape, const RolloutResult& rollouts, double scale) {
    const auto& trajs = rollouts.trajectories;
    if (trajs.size() < 2)
        throw std::invalid_argument("reinforce_backward: shared baseline needs at least 2 trajectories");
    double baseline = 0.0;
    for (const auto& t : trajs) baseline += t.reward;
    baseline /= static_cast<double>(trajs.size());

    std::vector<int> ids;
    std::vector<double> weights;
    for (const auto& t : trajs) {
        const double advantage = t.reward - baseline;
        for (int id : t.logp_ids) {
            ids.push_back(id);
            weights.push_back(-scale * advantage);
        }
    }
    const int loss = tape.weighted_sum(std::move(ids), std::move(weights));
    const double loss_value = tape.value(loss).v[0];
    tape.backward(loss);
    return loss_value;
}

struct BatchStats {
    int epoch = 0;
    int batch = 0;
    int instances = 0;          // B~ of this minibatch
    int problem_size = 0;       // sampled kappa
    bool random_radii = false;  // sampled lambda
    double mean_reward = 0.0;
    double loss = 0.0;
    double grad_norm = 0.0;  // before clipping
    double wall_ms = 0.0;
    std::vector<std::vector<int>> second_nodes;  // per instance, per trajectory
};

using BatchObserver = std::function<void(const BatchStats&)>;

namespace detail {

struct MetricsLog {
    std::ofstream out;

    explicit MetricsLog(const std::string& path) {
        if (path.empty()) return;
        const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
        out.open(path, std::ios::app);
        if (!out) throw std::runtime_error("metrics log: cannot open '" + path + "'");
        if (fresh) out << "epoch,batch,mean_reward,loss,grad_norm,wall_ms\n";
    }

    void line(const BatchStats& s) {
        if (!out.is_open()) return;
        out << s.epoch << "," << s.batch << "," << s.mean_reward << "," << s.loss << ","
            << s.grad_norm << "," << s.wall_ms << "\n";
        out.flush();
    }
};

}  // namespace detail

// --- inference helpers ------------------------------------------------------

struct SolveResult {
    double length = std::numeric_limits<double>::infinity();
    std::vector<Point> waypoints;  // in the original instance frame
    std::vector<int> nodes;
};

// Best greedy multistart trajectory; with `use_aug`, best across the 8
// symmetry images, waypoints mapped back through the inverse symmetry.
inline SolveResult greedy_solve(const Policy& policy, const Instance& inst, bool use_aug) {
    static constexpr int kInverse[8] = {0, 1, 2, 5, 4, 3, 6, 7};
    SolveResult best;
    std::vector<Instance> images;
    if (use_aug) {
        const auto augs = augment8(inst);
        images.assign(augs.begin(), augs.end());
    } else {
        images.push_back(inst);
    }
    for (std::size_t m = 0; m < images.size(); ++m) {
        const Instance& img = images[m];
        const auto dinst = discretize(img, policy.cfg.gamma);
        diff::Tape tape;
        const TapeBinding binding = bind_params(tape, policy.params);
        const Embeddings emb = encode(tape, binding, img, policy.cfg);
        auto rng = rng_stream(0, 0);  // greedy decoding draws nothing
        const auto rollouts =
            rollout(tape, binding, emb, dinst, policy.cfg, DecodeMode::greedy, img.n(), rng);
        for (const auto& t : rollouts.trajectories) {
            if (t.length >= best.length) continue;
            best.length = t.length;
            best.nodes = {0};
            best.waypoints = {inst.depot};
            EnvState state = reset(dinst, 1)[0];
            state.forced_second = t.actions.front().node;  // replay the same forced start
            const int inv = use_aug ? kInverse[m] : 0;
            for (std::size_t s = 0; s < t.actions.size(); ++s) {
                step(dinst, state, t.actions[s], s == 0);
                best.nodes.push_back(t.actions[s].node);
                best.waypoints.push_back(apply_symmetry(state.waypoints.back(), inv));
            }
        }
    }
    return best;
}

// Customized REINFORCE: every minibatch draws one problem size and one radius
// type, generates fresh instances, decodes kappa multistart samples each, and
// applies one Adam update from the shared-baseline gradient.
inline void train(const TrainConfig& cfg, Policy& policy, const BatchObserver& observer = {}) {
    cfg.validate();
    policy.cfg.validate();
    const int workers = worker_count(cfg.workers);
    detail::MetricsLog metrics(cfg.metrics_path);
    if (!cfg.checkpoint_dir.empty()) std::filesystem::create_directories(cfg.checkpoint_dir);

    std::uint64_t global_batch = 0;
    std::uint64_t instance_counter = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        int done = 0;
        int batch_in_epoch = 0;
        while (done < cfg.instances_per_epoch) {
            const auto t0 = std::chrono::steady_clock::now();
            const int batch_instances = std::min(cfg.instances_per_epoch - done, cfg.batch_size);

            auto batch_rng = rng_stream(cfg.seed, 0x62617463ull, global_batch);
            const int kappa = cfg.sizes[std::uniform_int_distribution<std::size_t>(
                0, cfg.sizes.size() - 1)(batch_rng)];
            bool random_radii;
            if (cfg.radius_constant && cfg.radius_random) {
                random_radii = std::uniform_int_distribution<int>(0, 1)(batch_rng) == 1;
            } else {
                random_radii = cfg.radius_random;
            }

            GenConfig gen;
            gen.distribution = cfg.distribution;
            gen.radius = random_radii ? RadiusConfig::random() : RadiusConfig::constant();
            gen.seed = mix64(cfg.seed, random_radii ? 2 : 1);

            std::vector<diff::GradMap> buffers(static_cast<std::size_t>(workers));
            std::vector<double> inst_loss(static_cast<std::size_t>(batch_instances), 0.0);
            std::vector<double> inst_reward(static_cast<std::size_t>(batch_instances), 0.0);
            std::vector<std::vector<int>> inst_seconds(static_cast<std::size_t>(batch_instances));
            const std::uint64_t first_instance = instance_counter;
            const double scale = 1.0 / (static_cast<double>(batch_instances) * kappa);

            parallel_for_static(batch_instances, workers, [&](int b) {
                const int w = b % workers;
                const Instance inst = generate(gen, kappa, first_instance + static_cast<std::uint64_t>(b));
                const auto dinst = discretize(inst, policy.cfg.gamma);

                diff::Tape tape;
                const TapeBinding binding = bind_params(tape, policy.params);
                const Embeddings emb = encode(tape, binding, inst, policy.cfg);
                auto rollout_rng = rng_stream(cfg.seed, 0x726f6c6cull,
                                              first_instance + static_cast<std::uint64_t>(b));
                const RolloutResult rollouts = rollout(tape, binding, emb, dinst, policy.cfg,
                                                       DecodeMode::sample, kappa, rollout_rng);
                inst_loss[static_cast<std::size_t>(b)] = reinforce_backward(tape, rollouts, scale);

                double reward_sum = 0.0;
                for (const auto& t : rollouts.trajectories) {
                    reward_sum += t.reward;
                    inst_seconds[static_cast<std::size_t>(b)].push_back(t.second_node);
                }
                inst_reward[static_cast<std::size_t>(b)] = reward_sum / kappa;

                if (buffers[static_cast<std::size_t>(w)].empty())
                    buffers[static_cast<std::size_t>(w)] = diff::zero_grads(policy.params);
                diff::accumulate_grads(buffers[static_cast<std::size_t>(w)], collect_grads(tape, binding));
            });
            instance_counter += static_cast<std::uint64_t>(batch_instances);

            diff::GradMap grads = diff::zero_grads(policy.params);
            for (const auto& buf : buffers)
                if (!buf.empty()) diff::accumulate_grads(grads, buf);

            BatchStats stats;
            stats.epoch = epoch;
            stats.batch = batch_in_epoch;
            stats.instances = batch_instances;
            stats.problem_size = kappa;
            stats.random_radii = random_radii;
            for (int b = 0; b < batch_instances; ++b) {
                stats.loss += inst_loss[static_cast<std::size_t>(b)];
                stats.mean_reward += inst_reward[static_cast<std::size_t>(b)];
            }
            stats.mean_reward /= batch_instances;
            stats.second_nodes = std::move(inst_seconds);
            if (!std::isfinite(stats.loss))
                throw std::runtime_error("train: non-finite loss at epoch " + std::to_string(epoch) +
                                         " batch " + std::to_string(batch_in_epoch));

            stats.grad_norm = diff::grad_global_norm(grads);
            if (cfg.grad_clip > 0.0 && stats.grad_norm > cfg.grad_clip)
                diff::scale_grads(grads, cfg.grad_clip / stats.grad_norm);
            diff::adam_step(policy.params, grads, cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay);

            stats.wall_ms = std::chrono::duration<double, std::milli>(
                                std::chrono::steady_clock::now() - t0).count();
            metrics.line(stats);
            if (observer) observer(stats);

            done += batch_instances;
            ++batch_in_epoch;
            ++global_batch;
        }
        if (!cfg.checkpoint_dir.empty()) {
            const auto dir = std::filesystem::path(cfg.checkpoint_dir);
            save_policy((dir / ("epoch_" + std::to_string(epoch) + ".ckpt")).string(), policy);
            save_policy((dir / "latest.ckpt").string(), policy);
        }
        if (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0) {
            GenConfig gen;
            gen.radius = cfg.radius_random ? RadiusConfig::random() : RadiusConfig::constant();
            gen.distribution = cfg.distribution;
            gen.seed = mix64(cfg.seed, 0x6576616cull);
            const int eval_n = cfg.sizes.back();
            double obj = 0.0;
            const int eval_count = 16;
            for (int i = 0; i < eval_count; ++i)
                obj += greedy_solve(policy, generate(gen, eval_n, static_cast<std::uint64_t>(i)), false).length;
            obj /= eval_count;
            if (metrics.out.is_open()) {
                metrics.out << "# eval epoch " << epoch << " n " << eval_n << " obj " << obj << "\n";
                metrics.out.flush();
            }
        }
    }
}

struct MethodResult {
    std::string method;
    double obj = 0.0;   // mean objective over the dataset
    double gap = 0.0;   // vs the best method in this report
    double wall_s = 0.0;
    std::vector<double> per_instance;
};

struct EvalReport {
    std::vector<MethodResult> rows;

    const MethodResult& row(const std::string& method) const {
        for (const auto& r : rows)
            if (r.method == method) return r;
        throw std::out_of_range("EvalReport: no method '" + method + "'");
    }
};

// Greedy multistart evaluation against classical baselines. Baselines are
// named in `baselines` ("ci", "nn"); gaps are relative to the best mean
// objective in the report.
inline EvalReport evaluate(const Policy& policy, const std::vector<Instance>& dataset, bool use_aug,
                           const std::vector<std::string>& baselines = {"ci"}, int workers_req = 0) {
    if (dataset.empty()) throw std::invalid_argument("evaluate: empty dataset");
    const int workers = worker_count(workers_req);
    const int count = static_cast<int>(dataset.size());

    EvalReport report;
    auto run_method = [&](const std::string& name, auto&& solve_one) {
        MethodResult row;
        row.method = name;
        row.per_instance.assign(static_cast<std::size_t>(count), 0.0);
        const auto t0 = std::chrono::steady_clock::now();
        parallel_for_static(count, workers, [&](int i) {
            row.per_instance[static_cast<std::size_t>(i)] = solve_one(dataset[static_cast<std::size_t>(i)]);
        });
        row.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        for (double v : row.per_instance) row.obj += v;
        row.obj /= count;
        report.rows.push_back(std::move(row));
    };

    run_method("policy", [&](const Instance& inst) { return greedy_solve(policy, inst, false).length; });
    if (use_aug)
        run_method("policy-aug", [&](const Instance& inst) { return greedy_solve(policy, inst, true).length; });
    for (const auto& b : baselines) {
        if (b == "ci") {
            run_method("ci", [&](const Instance& inst) {
                return cheapest_insertion(discretize(inst, policy.cfg.gamma)).length;
            });
        } else if (b == "nn") {
            run_method("nn", [&](const Instance& inst) {
                return nearest_neighbor(discretize(inst, policy.cfg.gamma)).length;
            });
        } else {
            throw std::invalid_argument("evaluate: unknown baseline '" + b + "'");
        }
    }

    double best_obj = std::numeric_limits<double>::infinity();
    for (const auto& r : report.rows) best_obj = std::min(best_obj, r.obj);
    for (auto& r : report.rows) r.gap = (r.obj - best_obj) / best_obj;
    return report;
}

inline std::string format_eval_table(const EvalReport& report) {
    char buf[128];
    std::string out = "method        Obj.      Gap       Time\n";
    for (const auto& r : report.rows) {
        std::snprintf(buf, sizeof(buf), "%-12s  %-8.4f  %-7.2f%%  %.2fs\n", r.method.c_str(), r.obj,
                      r.gap * 100.0, r.wall_s);
        out += buf;
    }
    return out;
}

inline std::string format_eval_csv(const EvalReport& report) {
    std::string out = "method,obj,gap,time_s\n";
    for (const auto& r : report.rows) {
        char buf[128];
        std::snprintf(buf, sizeof(buf), "%s,%.6f,%.6f,%.3f\n", r.method.c_str(), r.obj, r.gap, r.wall_s);
        out += buf;
    }
    return out;
}

}  // namespace cetsp
