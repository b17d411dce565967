#pragma once

#include <algorithm>

#include "cetsp/diff/params.hpp"
#include "cetsp/diff/tape.hpp"
#include "cetsp/env.hpp"

namespace cetsp {

struct PolicyConfig {
    int layers = 3;
    int heads = 8;
    int dim = 128;
    int gamma = 16;
    int knn = 10;
    double clip = 10.0;          // compatibility logit clipping
    bool knn_interaction = true; // off: loc keys/values from the selected node only
    bool adapted_encoder = true; // off: post-norm layers with a plain ReLU FF

    void validate() const {
        if (dim < 2 || dim % 2 != 0) throw std::invalid_argument("PolicyConfig: dim must be even");
        if (heads < 1 || dim % heads != 0)
            throw std::invalid_argument("PolicyConfig: dim must be divisible by heads");
        if (gamma < 2) throw std::invalid_argument("PolicyConfig: gamma must be >= 2");
        if (layers < 1) throw std::invalid_argument("PolicyConfig: layers must be >= 1");
        if (knn < 1) throw std::invalid_argument("PolicyConfig: knn must be >= 1");
    }
};

enum class DecodeMode { sample, greedy };

struct Policy {
    PolicyConfig cfg;
    diff::ParamBlock params;

    static Policy init(const PolicyConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        Policy p;
        p.cfg = cfg;
        const int d = cfg.dim;
        auto& pb = p.params;
        pb.add("embed.coord_w", 2, d / 2);
        pb.add("embed.radius_w", 1, d / 2);
        for (int l = 0; l < cfg.layers; ++l) {
            const std::string pre = "enc." + std::to_string(l) + ".";
            pb.add(pre + "norm1", 1, d).fill(1.0);
            pb.add(pre + "wq", d, d);
            pb.add(pre + "wk", d, d);
            pb.add(pre + "wv", d, d);
            pb.add(pre + "wo", d, d);
            pb.add(pre + "norm2", 1, d).fill(1.0);
            pb.add(pre + "ff_w1", d, d);
            pb.add(pre + "ff_b1", 1, d);
            pb.add(pre + "ff_w2", d, d);
            pb.add(pre + "ff_b2", 1, d);
        }
        pb.add("node.wq_graph", d, d);
        pb.add("node.wq_last", d, d);
        pb.add("node.wk", d, d);
        pb.add("node.wv", d, d);
        pb.add("node.wo", d, d);
        pb.add("loc.wq_node", d, d);
        pb.add("loc.wq_prev", 2, d);
        pb.add("loc.wk", d, d);
        pb.add("loc.wv", d, d);
        pb.add("loc.wo", d, d);
        pb.add("loc.mlp_w1", d, d);
        pb.add("loc.mlp_w2", d, d / 2);
        pb.add("loc.mlp_w3", d / 2, cfg.gamma);

        auto rng = rng_stream(seed, 0x706f6c69ull);
        for (auto& [name, e] : pb.entries) {
            if (name.find("norm") != std::string::npos) continue;  // gains stay at 1
            diff::init_uniform(e.value, rng);
        }
        return p;
    }
};

// Leaf ids of every parameter on a tape.
struct TapeBinding {
    std::map<std::string, int> ids;

    int id(const std::string& name) const {
        const auto it = ids.find(name);
        if (it == ids.end()) throw std::out_of_range("TapeBinding: no parameter '" + name + "'");
        return it->second;
    }
};

inline TapeBinding bind_params(diff::Tape& tape, const diff::ParamBlock& params) {
    TapeBinding b;
    for (const auto& [name, e] : params.entries) b.ids.emplace(name, tape.leaf(e.value));
    return b;
}

inline diff::GradMap collect_grads(diff::Tape& tape, const TapeBinding& binding) {
    diff::GradMap grads;
    for (const auto& [name, id] : binding.ids) grads.emplace(name, tape.grad(id));
    return grads;
}

// Final node embeddings plus the projections the decoders reuse every step.
struct Embeddings {
    int h = -1;       // [N, d]
    int h_mean = -1;  // [1, d]
    int node_k = -1, node_v = -1;
    int loc_k = -1, loc_v = -1;
    int count = 0;    // N = n + 1
};

inline Embeddings encode(diff::Tape& tape, const TapeBinding& pb, const Instance& inst,
                         const PolicyConfig& cfg) {
    const int n = inst.n();
    const int N = n + 1;
    diff::Tensor coords(N, 2), radii(N, 1);
    coords.at(0, 0) = inst.depot.x;
    coords.at(0, 1) = inst.depot.y;
    for (int i = 1; i <= n; ++i) {
        coords.at(i, 0) = inst.targets[static_cast<std::size_t>(i - 1)].center.x;
        coords.at(i, 1) = inst.targets[static_cast<std::size_t>(i - 1)].center.y;
        radii.at(i, 0) = inst.targets[static_cast<std::size_t>(i - 1)].radius;
    }

    int h = tape.concat_cols(tape.matmul(tape.leaf(std::move(coords)), pb.id("embed.coord_w")),
                             tape.matmul(tape.leaf(std::move(radii)), pb.id("embed.radius_w")));

    for (int l = 0; l < cfg.layers; ++l) {
        const std::string pre = "enc." + std::to_string(l) + ".";
        if (cfg.adapted_encoder) {
            // pre-norm MHA, then pre-norm SiLU-gated FF, residuals outside
            const int hn = tape.rmsnorm(h, pb.id(pre + "norm1"));
            const int attn = tape.mha(tape.matmul(hn, pb.id(pre + "wq")),
                                      tape.matmul(hn, pb.id(pre + "wk")),
                                      tape.matmul(hn, pb.id(pre + "wv")),
                                      pb.id(pre + "wo"), cfg.heads);
            h = tape.add(h, attn);
            const int hn2 = tape.rmsnorm(h, pb.id(pre + "norm2"));
            const int ff = tape.gated_ff(hn2, pb.id(pre + "ff_w1"), pb.id(pre + "ff_b1"),
                                         pb.id(pre + "ff_w2"), pb.id(pre + "ff_b2"));
            h = tape.add(h, ff);
        } else {
            // reverted variant: post-norm residuals, plain ReLU feed-forward
            const int attn = tape.mha(tape.matmul(h, pb.id(pre + "wq")),
                                      tape.matmul(h, pb.id(pre + "wk")),
                                      tape.matmul(h, pb.id(pre + "wv")),
                                      pb.id(pre + "wo"), cfg.heads);
            h = tape.rmsnorm(tape.add(h, attn), pb.id(pre + "norm1"));
            const int ff = tape.affine(tape.relu(tape.affine(h, pb.id(pre + "ff_w1"), pb.id(pre + "ff_b1"))),
                                       pb.id(pre + "ff_w2"), pb.id(pre + "ff_b2"));
            h = tape.rmsnorm(tape.add(h, ff), pb.id(pre + "norm2"));
        }
    }

    Embeddings emb;
    emb.h = h;
    emb.h_mean = tape.mean_rows(h);
    emb.node_k = tape.matmul(h, pb.id("node.wk"));
    emb.node_v = tape.matmul(h, pb.id("node.wv"));
    emb.loc_k = tape.matmul(h, pb.id("loc.wk"));
    emb.loc_v = tape.matmul(h, pb.id("loc.wv"));
    emb.count = N;
    return emb;
}

// Log-probabilities over all N nodes for the next node choice.
inline int node_decode_step(diff::Tape& tape, const TapeBinding& pb, const Embeddings& emb,
                            int last_node, const std::vector<char>& mask, const PolicyConfig& cfg) {
    const int h_last = tape.gather_rows(emb.h, {last_node});
    const int query = tape.add(tape.matmul(emb.h_mean, pb.id("node.wq_graph")),
                               tape.matmul(h_last, pb.id("node.wq_last")));
    const int ctx = tape.mha(query, emb.node_k, emb.node_v, pb.id("node.wo"), cfg.heads, &mask);
    const int compat = tape.matmul_nt(ctx, emb.h);  // [1, N]
    const int clipped = tape.scale(tape.tanh(tape.scale(compat, 1.0 / std::sqrt(cfg.dim))), cfg.clip);
    return tape.masked_log_softmax(clipped, mask);
}

// k nearest nodes to `node` by center distance (depot eligible, self excluded),
// ties toward the lower index.
inline std::vector<int> knn_indices(const Instance& inst, int node, int k) {
    const int n = inst.n();
    if (k < 1 || k > n) throw std::invalid_argument("knn_indices: k must be in [1, n]");
    const Point from = (node == 0) ? inst.depot : inst.targets[static_cast<std::size_t>(node - 1)].center;
    std::vector<std::pair<double, int>> cand;
    cand.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i <= n; ++i) {
        if (i == node) continue;
        const Point c = (i == 0) ? inst.depot : inst.targets[static_cast<std::size_t>(i - 1)].center;
        cand.emplace_back(dist_sq(from, c), i);
    }
    std::sort(cand.begin(), cand.end());
    std::vector<int> out;
    out.reserve(static_cast<std::size_t>(k));
    for (int i = 0; i < k; ++i) out.push_back(cand[static_cast<std::size_t>(i)].second);
    return out;
}

// Log-probabilities over the gamma candidate waypoints of `selected`.
inline int loc_decode_step(diff::Tape& tape, const TapeBinding& pb, const Embeddings& emb,
                           const Instance& inst, int selected, const Point& prev_location,
                           const PolicyConfig& cfg) {
    if (selected == 0) throw std::invalid_argument("loc_decode_step: depot has no waypoint choice");
    const int h_sel = tape.gather_rows(emb.h, {selected});
    const int prev = tape.leaf(diff::Tensor::row({prev_location.x, prev_location.y}));
    const int query = tape.add(tape.matmul(h_sel, pb.id("loc.wq_node")),
                               tape.matmul(prev, pb.id("loc.wq_prev")));

    std::vector<int> subgraph;
    if (cfg.knn_interaction) {
        subgraph = knn_indices(inst, selected, std::min(cfg.knn, inst.n()));
    } else {
        subgraph = {selected};
    }
    const int keys = tape.gather_rows(emb.loc_k, subgraph);
    const int values = tape.gather_rows(emb.loc_v, subgraph);
    const int ctx = tape.mha(query, keys, values, pb.id("loc.wo"), cfg.heads);

    const int m1 = tape.silu(tape.matmul(ctx, pb.id("loc.mlp_w1")));
    const int m2 = tape.silu(tape.matmul(m1, pb.id("loc.mlp_w2")));
    const int logits = tape.matmul(m2, pb.id("loc.mlp_w3"));
    return tape.masked_log_softmax(logits, std::vector<char>(static_cast<std::size_t>(cfg.gamma), 1));
}

// One decoded trajectory. Steps that carried no choice (the forced second
// node, depot waypoints) have no log-prob entry.
struct TrajectoryLog {
    std::vector<Action> actions;     // excludes the initial depot
    std::vector<int> logp_ids;       // tape ids of picked log-probs
    double length = 0.0;
    double reward = 0.0;
    double logp_total = 0.0;
    int second_node = -1;
    bool forced_second_used = false;
};

struct RolloutResult {
    std::vector<TrajectoryLog> trajectories;
};

namespace detail {

inline int sample_index(const diff::Tensor& logp, const std::vector<char>& allowed,
                        std::mt19937_64& rng) {
    double total = 0.0;
    for (int i = 0; i < logp.cols; ++i)
        if (allowed[static_cast<std::size_t>(i)]) total += std::exp(logp.v[static_cast<std::size_t>(i)]);
    const double u = uniform01(rng) * total;
    double acc = 0.0;
    int last_allowed = -1;
    for (int i = 0; i < logp.cols; ++i) {
        if (!allowed[static_cast<std::size_t>(i)]) continue;
        last_allowed = i;
        acc += std::exp(logp.v[static_cast<std::size_t>(i)]);
        if (u < acc) return i;
    }
    return last_allowed;
}

inline int argmax_index(const diff::Tensor& logp, const std::vector<char>& allowed) {
    int best = -1;
    double best_v = diff::kNegInf;
    for (int i = 0; i < logp.cols; ++i) {
        if (!allowed[static_cast<std::size_t>(i)]) continue;
        if (best < 0 || logp.v[static_cast<std::size_t>(i)] > best_v) {
            best = i;
            best_v = logp.v[static_cast<std::size_t>(i)];
        }
    }
    return best;
}

}  // namespace detail

// Decodes n_starts trajectories on one tape. Trajectory j is forced to visit
// target j+1 second (no node log-prob for that step); the loc choice stays
// stochastic. `replay` pins every action instead of sampling, used by the
// finite-difference oracle to make the surrogate loss deterministic.
inline RolloutResult rollout(diff::Tape& tape, const TapeBinding& pb, const Embeddings& emb,
                             const DiscretizedInstance& dinst, const PolicyConfig& cfg,
                             DecodeMode mode, int n_starts, std::mt19937_64& rng,
                             const std::vector<std::vector<Action>>* replay = nullptr) {
    if (dinst.gamma != cfg.gamma)
        throw std::invalid_argument("rollout: instance gamma differs from policy gamma");
    if (replay && static_cast<int>(replay->size()) != n_starts)
        throw std::invalid_argument("rollout: replay trajectory count mismatch");

    auto states = reset(dinst, n_starts);
    RolloutResult out;
    out.trajectories.resize(static_cast<std::size_t>(n_starts));
    const std::vector<char> loc_allowed(static_cast<std::size_t>(cfg.gamma), 1);

    for (int j = 0; j < n_starts; ++j) {
        EnvState& state = states[static_cast<std::size_t>(j)];
        TrajectoryLog& log = out.trajectories[static_cast<std::size_t>(j)];
        bool first = true;
        std::size_t replay_pos = 0;
        while (!state.done) {
            const auto mask = feasible_mask(dinst, state);
            const int last_node = state.nodes.back();

            Action action;
            bool forced = false;
            int node_logp = -1;
            if (first && !mask[0]) {
                action.node = state.forced_second;
                forced = true;
            } else {
                node_logp = node_decode_step(tape, pb, emb, last_node, mask, cfg);
                if (replay) {
                    if (replay_pos >= (*replay)[static_cast<std::size_t>(j)].size())
                        throw std::invalid_argument("rollout: replay ran out of actions");
                    action.node = (*replay)[static_cast<std::size_t>(j)][replay_pos].node;
                } else if (mode == DecodeMode::sample) {
                    action.node = detail::sample_index(tape.value(node_logp), mask, rng);
                } else {
                    action.node = detail::argmax_index(tape.value(node_logp), mask);
                }
            }
            if (replay && forced) action.node = (*replay)[static_cast<std::size_t>(j)][replay_pos].node;

            int loc_logp = -1;
            if (action.node != 0) {
                loc_logp = loc_decode_step(tape, pb, emb, dinst.base, action.node,
                                           state.waypoints.back(), cfg);
                if (replay) {
                    action.waypoint_index = (*replay)[static_cast<std::size_t>(j)][replay_pos].waypoint_index;
                } else if (mode == DecodeMode::sample) {
                    action.waypoint_index = detail::sample_index(tape.value(loc_logp), loc_allowed, rng);
                } else {
                    action.waypoint_index = detail::argmax_index(tape.value(loc_logp), loc_allowed);
                }
            } else {
                action.waypoint_index = 0;
            }

            step(dinst, state, action, first);
            if (first) log.second_node = action.node;
            log.actions.push_back(action);
            if (node_logp >= 0) {
                const int picked = tape.pick(node_logp, action.node);
                log.logp_ids.push_back(picked);
                log.logp_total += tape.value(picked).v[0];
            }
            if (loc_logp >= 0) {
                const int picked = tape.pick(loc_logp, action.waypoint_index);
                log.logp_ids.push_back(picked);
                log.logp_total += tape.value(picked).v[0];
            }
            log.forced_second_used = log.forced_second_used || forced;
            first = false;
            ++replay_pos;
        }
        log.length = state.length_so_far;
        log.reward = reward(state);
    }
    return out;
}

// --- checkpoint glue --------------------------------------------------------

inline void save_policy(const std::string& path, const Policy& policy) {
    std::map<std::string, double> meta{
        {"layers", static_cast<double>(policy.cfg.layers)},
        {"heads", static_cast<double>(policy.cfg.heads)},
        {"dim", static_cast<double>(policy.cfg.dim)},
        {"gamma", static_cast<double>(policy.cfg.gamma)},
        {"knn", static_cast<double>(policy.cfg.knn)},
        {"clip", policy.cfg.clip},
        {"knn_interaction", policy.cfg.knn_interaction ? 1.0 : 0.0},
        {"adapted_encoder", policy.cfg.adapted_encoder ? 1.0 : 0.0},
    };
    diff::save_checkpoint(path, policy.params, meta);
}

inline Policy load_policy(const std::string& path) {
    std::map<std::string, double> meta;
    Policy p;
    p.params = diff::load_checkpoint(path, &meta);
    auto req = [&](const std::string& key) {
        const auto it = meta.find(key);
        if (it == meta.end()) throw std::runtime_error("checkpoint: missing config field '" + key + "'");
        return it->second;
    };
    p.cfg.layers = static_cast<int>(req("layers"));
    p.cfg.heads = static_cast<int>(req("heads"));
    p.cfg.dim = static_cast<int>(req("dim"));
    p.cfg.gamma = static_cast<int>(req("gamma"));
    p.cfg.knn = static_cast<int>(req("knn"));
    p.cfg.clip = req("clip");
    p.cfg.knn_interaction = req("knn_interaction") != 0.0;
    p.cfg.adapted_encoder = req("adapted_encoder") != 0.0;
    p.cfg.validate();
    return p;
}

}  // namespace cetsp
