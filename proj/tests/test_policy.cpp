#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <set>

#include "cetsp/diff/gradcheck.hpp"
#include "cetsp/policy.hpp"

using namespace cetsp;
using diff::GradMap;
using diff::Tape;

namespace {

PolicyConfig micro_config() {
    PolicyConfig cfg;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.dim = 16;
    cfg.gamma = 4;
    cfg.knn = 3;
    return cfg;
}

Instance micro_instance(int n = 5, std::uint64_t seed = 1) {
    GenConfig gen;
    gen.seed = seed;
    return generate(gen, n, 0);
}

// builds a tape over `params`, evaluates `build`, returns loss and gradients
template <typename BuildFn>
std::pair<double, GradMap> run_policy_tape(const diff::ParamBlock& params, BuildFn&& build) {
    Tape tape;
    TapeBinding binding = bind_params(tape, params);
    const int loss = build(tape, binding);
    tape.backward(loss);
    return {tape.value(loss).v[0], collect_grads(tape, binding)};
}

}  // namespace

TEST_CASE("identical nodes get identical embeddings") {
    PolicyConfig cfg = micro_config();
    Instance inst;
    inst.depot = {0.5, 0.1};
    inst.targets = {{{0.2, 0.6}, 0.05}, {{0.8, 0.3}, 0.02}, {{0.2, 0.6}, 0.05}};
    Policy policy = Policy::init(cfg, 3);

    Tape tape;
    TapeBinding binding = bind_params(tape, policy.params);
    const Embeddings emb = encode(tape, binding, inst, cfg);
    const auto& h = tape.value(emb.h);
    for (int c = 0; c < cfg.dim; ++c)
        CHECK(h.at(1, c) == Catch::Approx(h.at(3, c)).margin(1e-12));
}

TEST_CASE("encoder is permutation-equivariant over targets") {
    PolicyConfig cfg = micro_config();
    const Instance inst = micro_instance(6, 7);
    Policy policy = Policy::init(cfg, 5);

    Tape tape;
    TapeBinding binding = bind_params(tape, policy.params);
    const Embeddings emb = encode(tape, binding, inst, cfg);

    const std::vector<int> perm{3, 0, 5, 1, 4, 2};  // target permutation
    Instance shuffled = inst;
    for (std::size_t i = 0; i < perm.size(); ++i)
        shuffled.targets[i] = inst.targets[static_cast<std::size_t>(perm[i])];

    Tape tape2;
    TapeBinding binding2 = bind_params(tape2, policy.params);
    const Embeddings emb2 = encode(tape2, binding2, shuffled, cfg);

    const auto& h = tape.value(emb.h);
    const auto& h2 = tape2.value(emb2.h);
    for (int c = 0; c < cfg.dim; ++c) {
        CHECK(h2.at(0, c) == Catch::Approx(h.at(0, c)).margin(1e-9));  // depot row fixed
        for (std::size_t i = 0; i < perm.size(); ++i)
            CHECK(h2.at(static_cast<int>(i) + 1, c) ==
                  Catch::Approx(h.at(perm[i] + 1, c)).margin(1e-9));
    }

    // graph embedding equals the arithmetic mean of node embeddings
    const auto& mean = tape.value(emb.h_mean);
    for (int c = 0; c < cfg.dim; ++c) {
        double acc = 0.0;
        for (int r = 0; r < emb.count; ++r) acc += h.at(r, c);
        CHECK(mean.v[static_cast<std::size_t>(c)] == Catch::Approx(acc / emb.count).margin(1e-9));
    }
}

TEST_CASE("encoder gradients match central differences on the micro config") {
    PolicyConfig cfg = micro_config();
    const Instance inst = micro_instance(5, 11);
    Policy policy = Policy::init(cfg, 13);

    auto build = [&](Tape& tape, TapeBinding& binding) {
        const Embeddings emb = encode(tape, binding, inst, cfg);
        return tape.sum_all(emb.h);
    };
    auto f = [&](const diff::ParamBlock& p) { return run_policy_tape(p, build).first; };
    const GradMap analytic = run_policy_tape(policy.params, build).second;
    const auto res = diff::grad_check(f, analytic, policy.params, 1e-4, 200, 23);
    CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("node decoder returns certainty when only the depot is feasible") {
    PolicyConfig cfg = micro_config();
    const Instance inst = micro_instance(5, 17);
    Policy policy = Policy::init(cfg, 19);

    Tape tape;
    TapeBinding binding = bind_params(tape, policy.params);
    const Embeddings emb = encode(tape, binding, inst, cfg);
    std::vector<char> mask(6, 0);
    mask[0] = 1;
    const int logp = node_decode_step(tape, binding, emb, 3, mask, cfg);
    CHECK(tape.value(logp).v[0] == 0.0);  // probability exactly 1
    for (int i = 1; i <= 5; ++i) CHECK(tape.value(logp).v[static_cast<std::size_t>(i)] == diff::kNegInf);
}

TEST_CASE("node decoder probabilities are a valid masked distribution") {
    PolicyConfig cfg = micro_config();
    const Instance inst = micro_instance(5, 29);
    Policy policy = Policy::init(cfg, 31);

    Tape tape;
    TapeBinding binding = bind_params(tape, policy.params);
    const Embeddings emb = encode(tape, binding, inst, cfg);
    const std::vector<char> mask{0, 1, 0, 1, 1, 0};
    const int logp = node_decode_step(tape, binding, emb, 2, mask, cfg);

    double total = 0.0;
    for (int i = 0; i < 6; ++i) {
        const double v = tape.value(logp).v[static_cast<std::size_t>(i)];
        if (mask[static_cast<std::size_t>(i)]) {
            total += std::exp(v);
        } else {
            CHECK(v == diff::kNegInf);
        }
    }
    CHECK(total == Catch::Approx(1.0).margin(1e-9));

    // clipped-tanh logits bound the log-odds between feasible nodes by 2C
    double lo = 0.0, hi = diff::kNegInf;
    for (int i = 0; i < 6; ++i) {
        if (!mask[static_cast<std::size_t>(i)]) continue;
        const double v = tape.value(logp).v[static_cast<std::size_t>(i)];
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    CHECK(hi - lo <= 2.0 * cfg.clip + 1e-9);
}

TEST_CASE("knn_indices picks adjacent nodes on a line") {
    Instance inst;
    inst.depot = {0.0, 0.0};
    inst.targets = {{{1.0, 0.0}, 0.1}, {{2.0, 0.0}, 0.1}, {{3.0, 0.0}, 0.1}, {{4.0, 0.0}, 0.1}};
    CHECK(knn_indices(inst, 2, 2) == std::vector<int>{1, 3});
    CHECK(knn_indices(inst, 1, 2) == std::vector<int>{0, 2});
    CHECK(knn_indices(inst, 0, 4) == std::vector<int>{1, 2, 3, 4});
}

TEST_CASE("knn_indices matches a full-sort oracle") {
    const Instance inst = micro_instance(20, 43);
    for (int node = 0; node <= 20; ++node) {
        const auto got = knn_indices(inst, node, 7);

        // oracle: exhaustive sort by (distance, index)
        const Point from = node == 0 ? inst.depot : inst.targets[static_cast<std::size_t>(node - 1)].center;
        std::vector<std::pair<double, int>> all;
        for (int i = 0; i <= 20; ++i) {
            if (i == node) continue;
            const Point c = i == 0 ? inst.depot : inst.targets[static_cast<std::size_t>(i - 1)].center;
            all.emplace_back(dist(from, c), i);
        }
        std::sort(all.begin(), all.end());
        for (int i = 0; i < 7; ++i)
            CHECK(got[static_cast<std::size_t>(i)] == all[static_cast<std::size_t>(i)].second);
    }
}

TEST_CASE("loc decoder yields a distribution over gamma waypoints") {
    PolicyConfig cfg = micro_config();
    const Instance inst = micro_instance(5, 47);
    Policy policy = Policy::init(cfg, 53);

    for (bool knn_on : {true, false}) {
        PolicyConfig variant = cfg;
        variant.knn_interaction = knn_on;
        Tape tape;
        TapeBinding binding = bind_params(tape, policy.params);
        const Embeddings emb = encode(tape, binding, inst, variant);
        const int logp = loc_decode_step(tape, binding, emb, inst, 2, inst.depot, variant);
        REQUIRE(tape.value(logp).cols == cfg.gamma);
        double total = 0.0;
        for (int k = 0; k < cfg.gamma; ++k)
            total += std::exp(tape.value(logp).v[static_cast<std::size_t>(k)]);
        CHECK(total == Catch::Approx(1.0).margin(1e-9));
    }
}

TEST_CASE("loc decoder rejects the depot") {
    PolicyConfig cfg = micro_config();
    const Instance inst = micro_instance(5, 59);
    Policy policy = Policy::init(cfg, 61);
    Tape tape;
    TapeBinding binding = bind_params(tape, policy.params);
    const Embeddings emb = encode(tape, binding, inst, cfg);
    CHECK_THROWS_AS(loc_decode_step(tape, binding, emb, inst, 0, inst.depot, cfg),
                    std::invalid_argument);
}

TEST_CASE("loc path gradients match central differences on the micro config") {
    PolicyConfig cfg = micro_config();
    const Instance inst = micro_instance(5, 67);
    Policy policy = Policy::init(cfg, 71);

    auto build = [&](Tape& tape, TapeBinding& binding) {
        const Embeddings emb = encode(tape, binding, inst, cfg);
        const int logp = loc_decode_step(tape, binding, emb, inst, 3, inst.depot, cfg);
        return tape.pick(logp, 1);
    };
    auto f = [&](const diff::ParamBlock& p) { return run_policy_tape(p, build).first; };
    const GradMap analytic = run_policy_tape(policy.params, build).second;
    const auto res = diff::grad_check(f, analytic, policy.params, 1e-4, 200, 73);
    CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("greedy rollouts are deterministic and feasible") {
    PolicyConfig cfg = micro_config();
    const Instance inst = micro_instance(6, 79);
    Policy policy = Policy::init(cfg, 83);
    const auto dinst = discretize(inst, cfg.gamma);

    auto run = [&] {
        Tape tape;
        TapeBinding binding = bind_params(tape, policy.params);
        const Embeddings emb = encode(tape, binding, inst, cfg);
        auto rng = rng_stream(1, 2);
        return rollout(tape, binding, emb, dinst, cfg, DecodeMode::greedy, 6, rng);
    };
    const auto a = run();
    const auto b = run();
    REQUIRE(a.trajectories.size() == 6);

    std::set<int> seconds;
    for (std::size_t j = 0; j < a.trajectories.size(); ++j) {
        CHECK(a.trajectories[j].length == b.trajectories[j].length);
        REQUIRE(a.trajectories[j].actions.size() == b.trajectories[j].actions.size());
        for (std::size_t s = 0; s < a.trajectories[j].actions.size(); ++s) {
            CHECK(a.trajectories[j].actions[s].node == b.trajectories[j].actions[s].node);
            CHECK(a.trajectories[j].actions[s].waypoint_index ==
                  b.trajectories[j].actions[s].waypoint_index);
        }
        seconds.insert(a.trajectories[j].second_node);
        CHECK(a.trajectories[j].actions.back().node == 0);  // returns to the depot
    }
    CHECK(seconds == std::set<int>{1, 2, 3, 4, 5, 6});  // multistart contract
}

TEST_CASE("sampled rollouts are reproducible for a fixed seed") {
    PolicyConfig cfg = micro_config();
    const Instance inst = micro_instance(5, 89);
    Policy policy = Policy::init(cfg, 97);
    const auto dinst = discretize(inst, cfg.gamma);

    auto run = [&] {
        Tape tape;
        TapeBinding binding = bind_params(tape, policy.params);
        const Embeddings emb = encode(tape, binding, inst, cfg);
        auto rng = rng_stream(1234, 0);
        const auto res = rollout(tape, binding, emb, dinst, cfg, DecodeMode::sample, 5, rng);
        std::vector<double> lengths;
        for (const auto& t : res.trajectories) lengths.push_back(t.length);
        return lengths;
    };
    CHECK(run() == run());
}

TEST_CASE("trajectory log-probabilities multiply out to per-step probabilities") {
    PolicyConfig cfg = micro_config();
    const Instance inst = micro_instance(4, 101);
    Policy policy = Policy::init(cfg, 103);
    const auto dinst = discretize(inst, cfg.gamma);

    Tape tape;
    TapeBinding binding = bind_params(tape, policy.params);
    const Embeddings emb = encode(tape, binding, inst, cfg);
    auto rng = rng_stream(7, 7);
    const auto res = rollout(tape, binding, emb, dinst, cfg, DecodeMode::sample, 4, rng);

    for (const auto& traj : res.trajectories) {
        double product = 1.0;
        for (int id : traj.logp_ids) product *= std::exp(tape.value(id).v[0]);
        CHECK(std::exp(traj.logp_total) == Catch::Approx(product).margin(1e-9));
        CHECK(traj.forced_second_used);
    }
}

TEST_CASE("policy checkpoints round-trip through the file format") {
    PolicyConfig cfg = micro_config();
    const Instance inst = micro_instance(5, 107);
    Policy policy = Policy::init(cfg, 109);
    const auto dinst = discretize(inst, cfg.gamma);

    const auto path = std::filesystem::temp_directory_path() / "cetsp_policy.ckpt";
    save_policy(path.string(), policy);
    const Policy loaded = load_policy(path.string());
    CHECK(loaded.cfg.dim == cfg.dim);
    CHECK(loaded.cfg.gamma == cfg.gamma);

    auto greedy_lengths = [&](const Policy& p) {
        Tape tape;
        TapeBinding binding = bind_params(tape, p.params);
        const Embeddings emb = encode(tape, binding, inst, p.cfg);
        auto rng = rng_stream(3, 3);
        const auto res = rollout(tape, binding, emb, dinst, p.cfg, DecodeMode::greedy, 5, rng);
        std::vector<double> lengths;
        for (const auto& t : res.trajectories) lengths.push_back(t.length);
        return lengths;
    };
    CHECK(greedy_lengths(policy) == greedy_lengths(loaded));
    std::filesystem::remove(path);
}
