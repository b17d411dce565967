#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "cetsp/diff/gradcheck.hpp"
#include "cetsp/diff/params.hpp"
#include "cetsp/diff/tape.hpp"

using namespace cetsp;
using namespace cetsp::diff;

namespace {

// Builds a tape over the block's entries, returns loss value and the leaf
// gradients. `build` receives the tape and the name->leaf-id map.
template <typename BuildFn>
std::pair<double, GradMap> run_tape(const ParamBlock& params, BuildFn&& build) {
    Tape tape;
    std::map<std::string, int> ids;
    for (const auto& [name, e] : params.entries) ids[name] = tape.leaf(e.value);
    const int loss = build(tape, ids);
    tape.backward(loss);
    GradMap grads;
    for (const auto& [name, id] : ids) grads[name] = tape.grad(id);
    return {tape.value(loss).v[0], grads};
}

template <typename BuildFn>
double fd_check(const ParamBlock& params, BuildFn&& build, double h = 1e-4,
                std::size_t min_coords = 200) {
    auto f = [&](const ParamBlock& p) { return run_tape(p, build).first; };
    const GradMap analytic = run_tape(params, build).second;
    return grad_check(f, analytic, params, h, min_coords, 17).max_rel_err;
}

void fill_random(Tensor& t, std::mt19937_64& rng, double scale = 1.0) {
    std::uniform_real_distribution<double> u(-scale, scale);
    for (double& x : t.v) x = u(rng);
}

}  // namespace

TEST_CASE("affine with identity weights is the identity") {
    Tape tape;
    const int x = tape.leaf(Tensor::row({1.0, 0.0}));
    Tensor eye(2, 2);
    eye.at(0, 0) = eye.at(1, 1) = 1.0;
    const int W = tape.leaf(eye);
    const int y = tape.affine(x, W);
    CHECK(tape.value(y).v[0] == 1.0);
    CHECK(tape.value(y).v[1] == 0.0);
}

TEST_CASE("gradient of sum(xW) wrt W is outer(x, ones)") {
    ParamBlock p;
    p.add("x", 1, 3) = Tensor::row({2.0, -1.0, 0.5});
    std::mt19937_64 rng(1);
    fill_random(p.add("W", 3, 2), rng);

    auto [_, grads] = run_tape(p, [](Tape& t, std::map<std::string, int>& ids) {
        return t.sum_all(t.matmul(ids["x"], ids["W"]));
    });
    const Tensor& dW = grads["W"];
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 2; ++j)
            CHECK(dW.at(i, j) == Catch::Approx(p.at("x").v[static_cast<std::size_t>(i)]).margin(1e-12));
}

TEST_CASE("affine gradients match central differences") {
    std::mt19937_64 rng(2);
    ParamBlock p;
    fill_random(p.add("x", 4, 5), rng);
    fill_random(p.add("W", 5, 3), rng);
    fill_random(p.add("b", 1, 3), rng);
    const double err = fd_check(p, [](Tape& t, std::map<std::string, int>& ids) {
        return t.sum_all(t.silu(t.affine(ids["x"], ids["W"], ids["b"])));
    });
    CHECK(err < 1e-6);
}

TEST_CASE("rmsnorm maps constant rows to unit values") {
    Tape tape;
    const int x = tape.leaf(Tensor::row({2.0, 2.0, 2.0, 2.0}));
    const int g = tape.leaf(Tensor::row({1.0, 1.0, 1.0, 1.0}));
    const int y = tape.rmsnorm(x, g);
    for (double v : tape.value(y).v) CHECK(v == Catch::Approx(1.0).margin(1e-6));
}

TEST_CASE("rmsnorm output has unit RMS under unit gain") {
    std::mt19937_64 rng(3);
    Tensor x(3, 8);
    fill_random(x, rng, 2.0);
    Tensor g(1, 8);
    g.fill(1.0);
    Tape tape;
    const int y = tape.rmsnorm(tape.leaf(x), tape.leaf(g));
    for (int r = 0; r < 3; ++r) {
        double ms = 0.0;
        for (int c = 0; c < 8; ++c) ms += tape.value(y).at(r, c) * tape.value(y).at(r, c);
        CHECK(std::sqrt(ms / 8.0) == Catch::Approx(1.0).margin(1e-6));
    }
}

TEST_CASE("rmsnorm gradients match central differences") {
    std::mt19937_64 rng(4);
    ParamBlock p;
    fill_random(p.add("x", 3, 6), rng);
    fill_random(p.add("g", 1, 6), rng);
    const double err = fd_check(p, [](Tape& t, std::map<std::string, int>& ids) {
        return t.sum_all(t.silu(t.rmsnorm(ids["x"], ids["g"])));
    });
    CHECK(err < 1e-6);
}

TEST_CASE("mha with a single key returns that value post-projection") {
    std::mt19937_64 rng(5);
    Tensor q(1, 4), k(1, 4), v(1, 4), wo(4, 4);
    fill_random(q, rng);
    fill_random(k, rng);
    fill_random(v, rng);
    fill_random(wo, rng);
    Tape tape;
    const int out = tape.mha(tape.leaf(q), tape.leaf(k), tape.leaf(v), tape.leaf(wo), 2);
    // expected: v wo, since the singleton softmax weight is 1 in every head
    for (int j = 0; j < 4; ++j) {
        double expect = 0.0;
        for (int c = 0; c < 4; ++c) expect += v.v[static_cast<std::size_t>(c)] * wo.at(c, j);
        CHECK(tape.value(out).v[static_cast<std::size_t>(j)] == Catch::Approx(expect).margin(1e-12));
    }
}

TEST_CASE("mha gives weight one to the single unmasked key") {
    std::mt19937_64 rng(6);
    Tensor q(1, 4), k(5, 4), v(5, 4), wo(4, 4);
    fill_random(q, rng);
    fill_random(k, rng);
    fill_random(v, rng);
    for (int i = 0; i < 4; ++i) wo.at(i, i) = 1.0;  // identity projection
    std::vector<char> allowed{0, 0, 1, 0, 0};
    Tape tape;
    const int out = tape.mha(tape.leaf(q), tape.leaf(k), tape.leaf(v), tape.leaf(wo), 2, &allowed);
    for (int j = 0; j < 4; ++j)
        CHECK(tape.value(out).v[static_cast<std::size_t>(j)] == Catch::Approx(v.at(2, j)).margin(1e-12));
}

TEST_CASE("mha attention is a convex combination of values") {
    // with all value rows identical the output must be that row projected
    std::mt19937_64 rng(7);
    Tensor q(2, 6), k(4, 6), v(4, 6), wo(6, 6);
    fill_random(q, rng);
    fill_random(k, rng);
    for (int i = 0; i < 6; ++i) wo.at(i, i) = 1.0;
    const Tensor vrow = [&] {
        Tensor r(1, 6);
        fill_random(r, rng);
        return r;
    }();
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 6; ++j) v.at(i, j) = vrow.v[static_cast<std::size_t>(j)];
    Tape tape;
    const int out = tape.mha(tape.leaf(q), tape.leaf(k), tape.leaf(v), tape.leaf(wo), 3);
    for (int r = 0; r < 2; ++r)
        for (int j = 0; j < 6; ++j)
            CHECK(tape.value(out).at(r, j) == Catch::Approx(vrow.v[static_cast<std::size_t>(j)]).margin(1e-9));
}

TEST_CASE("mha rejects an all-masked key set") {
    Tensor q(1, 4), k(3, 4), v(3, 4), wo(4, 4);
    std::vector<char> allowed{0, 0, 0};
    Tape tape;
    CHECK_THROWS_AS(tape.mha(tape.leaf(q), tape.leaf(k), tape.leaf(v), tape.leaf(wo), 2, &allowed),
                    std::invalid_argument);
}

TEST_CASE("mha gradients match central differences") {
    std::mt19937_64 rng(8);
    ParamBlock p;
    fill_random(p.add("q", 2, 8), rng);
    fill_random(p.add("k", 5, 8), rng);
    fill_random(p.add("v", 5, 8), rng);
    fill_random(p.add("wo", 8, 8), rng);
    std::vector<char> allowed{1, 0, 1, 1, 0};
    const double err = fd_check(p, [&allowed](Tape& t, std::map<std::string, int>& ids) {
        return t.sum_all(t.mha(ids["q"], ids["k"], ids["v"], ids["wo"], 4, &allowed));
    });
    CHECK(err < 1e-5);
}

TEST_CASE("masked keys receive no gradient") {
    std::mt19937_64 rng(9);
    ParamBlock p;
    fill_random(p.add("q", 1, 4), rng);
    fill_random(p.add("k", 3, 4), rng);
    fill_random(p.add("v", 3, 4), rng);
    fill_random(p.add("wo", 4, 4), rng);
    std::vector<char> allowed{1, 0, 1};
    auto [_, grads] = run_tape(p, [&allowed](Tape& t, std::map<std::string, int>& ids) {
        return t.sum_all(t.mha(ids["q"], ids["k"], ids["v"], ids["wo"], 2, &allowed));
    });
    for (int c = 0; c < 4; ++c) {
        CHECK(grads["k"].at(1, c) == 0.0);
        CHECK(grads["v"].at(1, c) == 0.0);
    }
}

TEST_CASE("gated feed-forward spot values") {
    Tape tape;
    const int zero = tape.leaf(Tensor::row({0.0}));
    CHECK(tape.value(tape.silu(zero)).v[0] == 0.0);
    CHECK(tape.value(tape.sigmoid(zero)).v[0] == 0.5);

    // zero weights and biases produce zero output
    std::mt19937_64 rng(10);
    Tensor x(2, 4);
    fill_random(x, rng);
    Tape t2;
    const int xi = t2.leaf(x);
    const int w1 = t2.leaf(Tensor(4, 4)), b1 = t2.leaf(Tensor(1, 4));
    const int w2 = t2.leaf(Tensor(4, 4)), b2 = t2.leaf(Tensor(1, 4));
    const int y = t2.gated_ff(xi, w1, b1, w2, b2);
    for (double v : t2.value(y).v) CHECK(v == 0.0);
}

TEST_CASE("gated feed-forward gradients match central differences") {
    std::mt19937_64 rng(11);
    ParamBlock p;
    fill_random(p.add("x", 3, 6), rng);
    fill_random(p.add("w1", 6, 6), rng);
    fill_random(p.add("b1", 1, 6), rng);
    fill_random(p.add("w2", 6, 6), rng);
    fill_random(p.add("b2", 1, 6), rng);
    const double err = fd_check(p, [](Tape& t, std::map<std::string, int>& ids) {
        return t.sum_all(t.gated_ff(ids["x"], ids["w1"], ids["b1"], ids["w2"], ids["b2"]));
    });
    CHECK(err < 1e-5);
}

TEST_CASE("masked_log_softmax basics") {
    Tape tape;
    const int logits = tape.leaf(Tensor::row({0.7, 0.7, 0.7, 0.7}));
    const int lp = tape.masked_log_softmax(logits, {1, 1, 1, 1});
    for (double v : tape.value(lp).v) CHECK(std::exp(v) == Catch::Approx(0.25).margin(1e-12));

    Tape t2;
    const int l2 = t2.leaf(Tensor::row({3.0, -1.0, 0.5, 9.0}));
    const int lp2 = t2.masked_log_softmax(l2, {0, 0, 1, 0});
    CHECK(t2.value(lp2).v[2] == 0.0);  // probability exactly 1
    CHECK(t2.value(lp2).v[0] == kNegInf);
    CHECK(t2.value(lp2).v[3] == kNegInf);
}

TEST_CASE("masked_log_softmax normalizes on random logits") {
    std::mt19937_64 rng(12);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor logits(1, 9);
        fill_random(logits, rng, 30.0);
        std::vector<char> allowed(9, 0);
        int count = 0;
        for (auto& c : allowed) count += (c = rng() % 2 ? 1 : 0);
        if (count == 0) allowed[4] = 1;
        Tape tape;
        const int lp = tape.masked_log_softmax(tape.leaf(logits), allowed);
        double total = 0.0;
        for (int j = 0; j < 9; ++j) {
            const double v = tape.value(lp).v[static_cast<std::size_t>(j)];
            if (!allowed[static_cast<std::size_t>(j)]) {
                CHECK(v == kNegInf);
            } else {
                total += std::exp(v);
            }
        }
        CHECK(total == Catch::Approx(1.0).margin(1e-9));
    }
}

TEST_CASE("masked_log_softmax rejects an all-masked row") {
    Tape tape;
    const int logits = tape.leaf(Tensor::row({1.0, 2.0}));
    CHECK_THROWS_AS(tape.masked_log_softmax(logits, {0, 0}), std::invalid_argument);
}

TEST_CASE("masked_log_softmax gradient flows only through unmasked entries") {
    std::mt19937_64 rng(13);
    ParamBlock p;
    fill_random(p.add("x", 1, 6), rng, 3.0);
    std::vector<char> allowed{1, 0, 1, 1, 0, 1};
    auto build = [&allowed](Tape& t, std::map<std::string, int>& ids) {
        return t.pick(t.masked_log_softmax(ids["x"], allowed), 2);
    };
    const double err = fd_check(p, build);
    CHECK(err < 1e-6);
    auto [_, grads] = run_tape(p, build);
    CHECK(grads["x"].v[1] == 0.0);
    CHECK(grads["x"].v[4] == 0.0);
}

TEST_CASE("adam first step moves each coordinate by about lr") {
    ParamBlock p;
    p.add("w", 1, 3) = Tensor::row({1.0, 2.0, 3.0});
    GradMap g;
    g["w"] = Tensor::row({0.5, -2.0, 10.0});
    adam_step(p, g, 1e-2, 0.9, 0.999, 1e-8, 0.0);
    CHECK(p.at("w").v[0] == Catch::Approx(1.0 - 1e-2).epsilon(1e-5));
    CHECK(p.at("w").v[1] == Catch::Approx(2.0 + 1e-2).epsilon(1e-5));
    CHECK(p.at("w").v[2] == Catch::Approx(3.0 - 1e-2).epsilon(1e-5));
    CHECK(p.step == 1);
}

TEST_CASE("adam with zero gradients and no decay leaves parameters unchanged") {
    ParamBlock p;
    p.add("w", 2, 2) = Tensor(2, 2, {1.0, -2.0, 0.5, 4.0});
    GradMap g;
    g["w"] = Tensor(2, 2);
    adam_step(p, g, 1e-2, 0.9, 0.999, 1e-8, 0.0);
    CHECK(p.at("w").v == std::vector<double>{1.0, -2.0, 0.5, 4.0});
}

TEST_CASE("adam converges on a 2-D quadratic") {
    ParamBlock p;
    p.add("w", 1, 2) = Tensor::row({5.0, -7.0});
    // f(w) = (w0 - 3)^2 + 2 (w1 + 1)^2, minimum at (3, -1)
    for (int it = 0; it < 2000; ++it) {
        GradMap g;
        g["w"] = Tensor::row({2.0 * (p.at("w").v[0] - 3.0), 4.0 * (p.at("w").v[1] + 1.0)});
        adam_step(p, g, 1e-2, 0.9, 0.999, 1e-8, 0.0);
    }
    CHECK(p.at("w").v[0] == Catch::Approx(3.0).margin(1e-3));
    CHECK(p.at("w").v[1] == Catch::Approx(-1.0).margin(1e-3));
}

TEST_CASE("grad_check accepts a correct quadratic gradient") {
    std::mt19937_64 rng(14);
    ParamBlock p;
    fill_random(p.add("W", 4, 4), rng);
    const Tensor x = [&] {
        Tensor t(4, 1);
        fill_random(t, rng);
        return t;
    }();
    // f = ||W x||^2, df/dW = 2 (W x) x^T
    auto f = [&x](const ParamBlock& pb) {
        const Tensor& W = pb.at("W");
        double total = 0.0;
        for (int i = 0; i < 4; ++i) {
            double row = 0.0;
            for (int j = 0; j < 4; ++j) row += W.at(i, j) * x.v[static_cast<std::size_t>(j)];
            total += row * row;
        }
        return total;
    };
    GradMap analytic;
    analytic["W"] = Tensor(4, 4);
    for (int i = 0; i < 4; ++i) {
        double row = 0.0;
        for (int j = 0; j < 4; ++j) row += p.at("W").at(i, j) * x.v[static_cast<std::size_t>(j)];
        for (int j = 0; j < 4; ++j) analytic["W"].at(i, j) = 2.0 * row * x.v[static_cast<std::size_t>(j)];
    }
    const auto res = grad_check(f, analytic, p, 1e-4);
    CHECK(res.max_rel_err < 1e-8);

    // a corrupted reverse rule must be flagged
    analytic["W"].at(2, 2) += 0.5 + std::abs(analytic["W"].at(2, 2));
    const auto bad = grad_check(f, analytic, p, 1e-4);
    CHECK(bad.max_rel_err > 1e-2);
}

TEST_CASE("forward evaluation is bit-deterministic") {
    std::mt19937_64 rng(15);
    Tensor q(3, 8), k(6, 8), v(6, 8), wo(8, 8);
    fill_random(q, rng);
    fill_random(k, rng);
    fill_random(v, rng);
    fill_random(wo, rng);
    auto run = [&] {
        Tape tape;
        const int out = tape.mha(tape.leaf(q), tape.leaf(k), tape.leaf(v), tape.leaf(wo), 4);
        return tape.value(out).v;
    };
    CHECK(run() == run());
}

TEST_CASE("non-finite values trip a diagnostic") {
    Tape tape;
    const int big = tape.leaf(Tensor::row({1e308, 1e308}));
    const int w = tape.leaf(Tensor(2, 1, {2.0, 2.0}));
    CHECK_THROWS_AS(tape.matmul(big, w), std::runtime_error);
}

TEST_CASE("checkpoint save/load round-trips parameters and moments") {
    std::mt19937_64 rng(16);
    ParamBlock p;
    fill_random(p.add("a.w", 3, 4), rng);
    fill_random(p.add("b.gain", 1, 7), rng);
    p.entries.at("a.w").m.v[2] = 0.125;
    p.entries.at("a.w").v.v[3] = 0.25;
    p.step = 42;

    const auto path = std::filesystem::temp_directory_path() / "cetsp_ckpt.bin";
    save_checkpoint(path.string(), p, {{"gamma", 16.0}, {"dim", 64.0}});
    std::map<std::string, double> meta;
    const ParamBlock q = load_checkpoint(path.string(), &meta);

    CHECK(meta.at("gamma") == 16.0);
    CHECK(q.step == 42);
    CHECK(q.at("a.w").v == p.at("a.w").v);
    CHECK(q.entries.at("a.w").m.v == p.entries.at("a.w").m.v);
    CHECK(q.entries.at("a.w").v.v == p.entries.at("a.w").v.v);
    CHECK(q.at("b.gain").v == p.at("b.gain").v);

    // flipping one trailing byte must break the checksum
    {
        const auto size = std::filesystem::file_size(path);
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        const auto pos = static_cast<std::streamoff>(size) - 1;
        char c;
        f.seekg(pos);
        f.get(c);
        f.seekp(pos);
        f.put(static_cast<char>(c ^ 0x01));
    }
    CHECK_THROWS_WITH(load_checkpoint(path.string()), Catch::Matchers::ContainsSubstring("checksum"));
    std::filesystem::remove(path);
}
