#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "cetsp/svg.hpp"

using namespace cetsp;

namespace {

namespace fs = std::filesystem;

std::string read_all(const fs::path& p) {
    std::ifstream in(p);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

std::size_t count_substr(const std::string& text, const std::string& needle) {
    std::size_t count = 0, pos = 0;
    while ((pos = text.find(needle, pos)) != std::string::npos) {
        ++count;
        pos += needle.size();
    }
    return count;
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(CETSP_CLI_PATH) + " " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
}

Instance three_targets() {
    Instance inst;
    inst.depot = {0.5, 0.1};
    inst.targets = {{{0.2, 0.5}, 0.08}, {{0.8, 0.5}, 0.06}, {{0.5, 0.9}, 0.04}};
    return inst;
}

}  // namespace

TEST_CASE("render_svg draws one circle per target plus a depot marker") {
    const auto path = fs::temp_directory_path() / "cetsp_plot.svg";
    render_svg(path.string(), three_targets());
    const std::string svg = read_all(path);
    CHECK(count_substr(svg, "<circle") == 3);
    CHECK(count_substr(svg, "<rect") == 2);  // background + depot marker
    CHECK(count_substr(svg, "<polyline") == 0);
    fs::remove(path);
}

TEST_CASE("render_svg closes the route polyline") {
    const auto path = fs::temp_directory_path() / "cetsp_plot_route.svg";
    const std::vector<Point> route{{0.5, 0.1}, {0.2, 0.5}, {0.8, 0.5}, {0.5, 0.9}};
    render_svg(path.string(), three_targets(), &route);
    const std::string svg = read_all(path);
    REQUIRE(count_substr(svg, "<polyline") == 1);

    const auto start = svg.find("points=\"");
    const auto end = svg.find('"', start + 8);
    const std::string points = svg.substr(start + 8, end - start - 8);
    CHECK(count_substr(points, ",") == route.size() + 1);  // vertices = waypoints + closure
    fs::remove(path);
}

TEST_CASE("render_svg output bytes are deterministic") {
    const auto a = fs::temp_directory_path() / "cetsp_det_a.svg";
    const auto b = fs::temp_directory_path() / "cetsp_det_b.svg";
    const std::vector<Point> route{{0.5, 0.1}, {0.2, 0.5}, {0.8, 0.5}};
    render_svg(a.string(), three_targets(), &route);
    render_svg(b.string(), three_targets(), &route);
    CHECK(read_all(a) == read_all(b));
    fs::remove(a);
    fs::remove(b);
}

TEST_CASE("route files round-trip") {
    const auto path = fs::temp_directory_path() / "cetsp_route.txt";
    const std::vector<Point> route{{0.5, 0.1}, {0.25, 0.75}, {0.8125, 0.5}};
    save_route(path.string(), route);
    const auto loaded = load_route(path.string());
    REQUIRE(loaded.size() == route.size());
    for (std::size_t i = 0; i < route.size(); ++i) {
        CHECK(loaded[i].x == Catch::Approx(route[i].x).margin(1e-10));
        CHECK(loaded[i].y == Catch::Approx(route[i].y).margin(1e-10));
    }
    fs::remove(path);
}

TEST_CASE("cli gen writes a reloadable instance file and echoes the seed") {
    const auto dir = fs::temp_directory_path() / "cetsp_cli_gen";
    fs::create_directories(dir);
    const auto inst_path = dir / "inst.txt";
    const auto log_path = dir / "out.log";

    const std::string cmd = std::string(CETSP_CLI_PATH) + " gen --n 20 --radius random --seed 7 --out " +
                            inst_path.string() + " > " + log_path.string() + " 2>&1";
    REQUIRE(WEXITSTATUS(std::system(cmd.c_str())) == 0);
    CHECK(read_all(log_path).find("seed: 7") != std::string::npos);

    const Instance inst = load(inst_path.string());
    CHECK(inst.n() == 20);
    for (const auto& t : inst.targets) {
        CHECK(t.radius >= 0.0);
        CHECK(t.radius < 0.1);
    }
    fs::remove_all(dir);
}

TEST_CASE("cli subcommands are deterministic given --seed") {
    const auto dir = fs::temp_directory_path() / "cetsp_cli_det";
    fs::create_directories(dir);
    const auto a = dir / "a.txt";
    const auto b = dir / "b.txt";
    REQUIRE(run_cli("gen --n 12 --seed 99 --out " + a.string()) == 0);
    REQUIRE(run_cli("gen --n 12 --seed 99 --out " + b.string()) == 0);
    CHECK(read_all(a) == read_all(b));
    fs::remove_all(dir);
}

TEST_CASE("cli rejects unknown flags and bad subcommands with a usage error") {
    CHECK(run_cli("gen --definitely-not-a-flag 3") == 1);
    CHECK(run_cli("frobnicate") == 1);
    CHECK(run_cli("") == 1);
}

TEST_CASE("cli plot renders instances and routes") {
    const auto dir = fs::temp_directory_path() / "cetsp_cli_plot";
    fs::create_directories(dir);
    const auto inst_path = dir / "inst.txt";
    const auto svg_path = dir / "plot.svg";
    REQUIRE(run_cli("gen --n 5 --seed 3 --out " + inst_path.string()) == 0);
    REQUIRE(run_cli("plot --input " + inst_path.string() + " --out " + svg_path.string()) == 0);
    const std::string svg = read_all(svg_path);
    CHECK(count_substr(svg, "<circle") == 5);
    fs::remove_all(dir);
}

TEST_CASE("cli train/solve/eval/dynamic pipeline runs end to end") {
    const auto dir = fs::temp_directory_path() / "cetsp_cli_pipe";
    fs::create_directories(dir);
    const auto ckpt_dir = dir / "ckpt";
    const auto inst_path = dir / "inst.txt";

    // a deliberately tiny configuration: the pipeline, not the quality
    REQUIRE(run_cli("train --epochs 1 --instances 8 --batch 4 --sizes 5 --dim 16 --heads 2 "
                    "--layers 1 --gamma 4 --knn 3 --seed 11 --workers 2 --out " +
                    ckpt_dir.string()) == 0);
    REQUIRE(fs::exists(ckpt_dir / "latest.ckpt"));

    REQUIRE(run_cli("gen --n 6 --seed 5 --out " + inst_path.string()) == 0);
    CHECK(run_cli("solve --model " + (ckpt_dir / "latest.ckpt").string() + " " + inst_path.string() +
                  " --aug --refine --out " + (dir / "route.txt").string()) == 0);
    CHECK(fs::exists(dir / "route.txt"));

    CHECK(run_cli("eval --model " + (ckpt_dir / "latest.ckpt").string() +
                  " --n 5 --count 4 --seed 2 --baselines ci,nn") == 0);
    CHECK(run_cli("dynamic --planner greedy --n 6 --m 2 --count 3 --seed 4 --gamma 4") == 0);
    CHECK(run_cli("dynamic --planner policy --model " + (ckpt_dir / "latest.ckpt").string() +
                  " --n 6 --m 2 --count 2 --seed 4") == 0);

    // missing model file is a numeric/runtime failure, not a usage error
    CHECK(run_cli("solve --model /nonexistent.ckpt " + inst_path.string()) == 2);
    fs::remove_all(dir);
}
