#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <fstream>

#include "eelo/dynamics.hpp"
#include "eelo/errors.hpp"
#include "eelo/rng.hpp"
#include "test_util.hpp"

using namespace eelo;
using testutil::make_scripted_activation_model;
using testutil::TempDir;

namespace {

Trajectory make_traj(std::vector<double> values) {
    Trajectory t;
    t.window = static_cast<int>(values.size());
    t.counts.assign(values.size(), 1);
    t.values = std::move(values);
    return t;
}

Trajectory sample_curve(const FitCoefficients& g, int window) {
    std::vector<double> v(static_cast<size_t>(window));
    for (int t = 1; t <= window; ++t) {
        v[static_cast<size_t>(t - 1)] = eval_f(g, t);
    }
    return make_traj(std::move(v));
}

// gate column 0: w0 -> 1.0, w1 -> 3.0, w2 -> 7.0; column 1 always 0
std::vector<std::vector<double>> offset_gate() {
    std::vector<std::vector<double>> g(8, std::vector<double>(2, 0.0));
    g[4][0] = 1.0;
    g[5][0] = 3.0;
    g[6][0] = 7.0;
    return g;
}

NeuronSet single_neuron() {
    NeuronSet set;
    set.neurons = {{0, 0}};
    set.diffs = {1.0};
    set.strategy = "top_k(1)";
    return set;
}

} // namespace

TEST_CASE("eval_f reproduces the reference schedule values") {
    FitCoefficients ref{0.17, 0.033, -0.997};
    CHECK(eval_f(ref, 1) == doctest::Approx(0.36170).epsilon(0).scale(0).epsilon(1e-9 + 1e-4));
    CHECK(std::abs(eval_f(ref, 1) - 0.36170) < 1e-4);
    CHECK(std::abs(eval_f(ref, 1) - 0.3617017186803629) < 1e-12); // frozen oracle
    CHECK(std::abs(eval_f(ref, 10) - 0.09748) < 1e-4);
    CHECK(std::abs(eval_f(ref, 10) - 0.0974805908471251) < 1e-10);
}

TEST_CASE("eval_f with b=0 is constant; domain errors throw") {
    FitCoefficients flat{0.5, 0.0, -0.9};
    for (int t = 1; t <= 20; ++t) {
        CHECK(eval_f(flat, t) == 0.5);
    }
    CHECK_THROWS_AS(eval_f({1.0, 1.0, -2.0}, 1), InputError);
    CHECK_THROWS_AS(eval_f({1.0, 1.0, -0.997}, 0.5), InputError);
}

TEST_CASE("eval_f decreases strictly in t when b > 0") {
    FitCoefficients g{0.8, 0.2, -0.5};
    for (int t = 1; t < 40; ++t) {
        CHECK(eval_f(g, t) > eval_f(g, t + 1));
    }
}

TEST_CASE("noiseless recovery of the reference coefficients") {
    FitCoefficients gen{0.17, 0.033, -0.997};
    auto fit = fit_log_decay(sample_curve(gen, 32));
    CHECK(std::abs(fit.a - gen.a) < 1e-3);
    CHECK(std::abs(fit.b - gen.b) < 1e-3);
    CHECK(std::abs(fit.c - gen.c) < 1e-3);
    // generator's c sits on the grid, so recovery is essentially exact
    CHECK(fit.c == doctest::Approx(-0.997).epsilon(1e-12));
    CHECK(std::abs(fit.a - gen.a) < 1e-9);
    CHECK(std::abs(fit.b - gen.b) < 1e-9);
}

TEST_CASE("flat trajectory fixes (a, b, c) = (v, 0, 0)") {
    auto fit = fit_log_decay(make_traj({2.25, 2.25, 2.25, 2.25}));
    CHECK(fit.a == 2.25);
    CHECK(fit.b == 0.0);
    CHECK(fit.c == 0.0);
}

TEST_CASE("noisy recovery stays within coarse tolerance") {
    FitCoefficients gen{1.0, 0.5, 0.0};
    auto traj = sample_curve(gen, 32);
    GaussianRng rng(99);
    for (auto& v : traj.values) {
        v += rng.next(0.0, 0.01);
    }
    auto fit = fit_log_decay(traj);
    CHECK(std::abs(fit.a - gen.a) < 0.05);
    CHECK(std::abs(fit.b - gen.b) < 0.05);
    CHECK(std::abs(fit.c - gen.c) < 0.05);
}

TEST_CASE("generator recovery across random grid coefficients") {
    std::mt19937_64 gen(21);
    for (int trial = 0; trial < 12; ++trial) {
        const int k = 1 + static_cast<int>(uniform01(gen) * 2999);
        FitCoefficients g;
        g.a = uniform01(gen) * 2.0 - 1.0;
        g.b = 0.05 + uniform01(gen) * 0.45;
        g.c = -1.0 + k * 1e-3;
        auto fit = fit_log_decay(sample_curve(g, 32));
        CAPTURE(g.a);
        CAPTURE(g.b);
        CAPTURE(g.c);
        CHECK(std::abs(fit.a - g.a) <= 1e-3 + 1e-6);
        CHECK(std::abs(fit.b - g.b) <= 1e-3 + 1e-6);
        CHECK(std::abs(fit.c - g.c) <= 1e-3 + 1e-6);
    }
}

TEST_CASE("fitted c is optimal over the grid") {
    // independent re-derivation of the per-c solve, Cramer form
    FitCoefficients gen{0.6, 0.21, 0.35};
    auto traj = sample_curve(gen, 24);
    GaussianRng noise(5);
    for (auto& v : traj.values) {
        v += noise.next(0.0, 0.02);
    }
    auto fit = fit_log_decay(traj);

    const int n = traj.window;
    double best_sse = 1e300;
    double fit_sse = -1.0;
    for (int k = 1; k <= 3000; ++k) {
        const double c = -1.0 + k * 1e-3;
        double s1 = n, sx = 0, sxx = 0, sy = 0, sxy = 0;
        for (int t = 1; t <= n; ++t) {
            const double x = std::log(t + c);
            const double y = traj.values[static_cast<size_t>(t - 1)];
            sx += x;
            sxx += x * x;
            sy += y;
            sxy += x * y;
        }
        const double det = s1 * sxx - sx * sx;
        const double a = (sy * sxx - sx * sxy) / det;
        const double slope = (s1 * sxy - sx * sy) / det;
        double sse = 0.0;
        for (int t = 1; t <= n; ++t) {
            const double r =
                traj.values[static_cast<size_t>(t - 1)] - (a + slope * std::log(t + c));
            sse += r * r;
        }
        best_sse = std::min(best_sse, sse);
        if (std::abs(c - fit.c) < 1e-12) {
            fit_sse = sse;
        }
    }
    REQUIRE(fit_sse >= 0.0); // returned c lies on the grid
    CHECK(fit_sse <= best_sse * (1.0 + 1e-12) + 1e-18);
}

TEST_CASE("scale equivariance: doubling values doubles (a, b), keeps c") {
    FitCoefficients gen{0.4, 0.12, -0.5};
    auto traj = sample_curve(gen, 20);
    GaussianRng noise(7);
    for (auto& v : traj.values) {
        v += noise.next(0.0, 0.05);
    }
    auto base = fit_log_decay(traj);

    auto scaled = traj;
    for (auto& v : scaled.values) {
        v *= 2.0; // power of two: exact in floating point
    }
    auto twice = fit_log_decay(scaled);
    CHECK(twice.a == 2.0 * base.a);
    CHECK(twice.b == 2.0 * base.b);
    CHECK(twice.c == base.c);
}

TEST_CASE("fit input validation") {
    CHECK_THROWS_AS(fit_log_decay(make_traj({1.0, 2.0})), InputError);
    CHECK_THROWS_AS(fit_log_decay(make_traj({1.0, std::nan(""), 2.0})), InputError);
}

TEST_CASE("trajectory collection on a scripted model") {
    auto m = make_scripted_activation_model(8, 2, offset_gate());
    auto set = single_neuron();

    SUBCASE("no trigger occurrence is an error") {
        CHECK_THROWS_AS(
            collect_trajectory(m, {"w0 w1 w2"}, Tokenizer::wait_id, 4, set), InputError);
    }

    SUBCASE("single occurrence reads raw per-offset activations") {
        auto traj = collect_trajectory(m, {"wait w0 w1 w2"}, Tokenizer::wait_id, 3, set);
        REQUIRE(traj.window == 3);
        CHECK(traj.values[0] == doctest::Approx(1.0).epsilon(1e-5));
        CHECK(traj.values[1] == doctest::Approx(3.0).epsilon(1e-5));
        CHECK(traj.values[2] == doctest::Approx(7.0).epsilon(1e-5));
        CHECK(traj.counts == std::vector<long>{1, 1, 1});
    }

    SUBCASE("occurrences average per offset, partial windows included") {
        // first: offsets w0 w1 w2 -> 1, 3, 7; second: offset w2 -> 7
        auto traj = collect_trajectory(m, {"wait w0 w1 w2", "wait w2"},
                                       Tokenizer::wait_id, 3, set);
        REQUIRE(traj.window == 3);
        CHECK(traj.values[0] == doctest::Approx(4.0).epsilon(1e-5)); // (1+7)/2
        CHECK(traj.values[1] == doctest::Approx(3.0).epsilon(1e-5));
        CHECK(traj.counts == std::vector<long>{2, 1, 1});
    }

    SUBCASE("unfillable window is truncated") {
        auto traj = collect_trajectory(m, {"wait w0 w1"}, Tokenizer::wait_id, 32, set);
        CHECK(traj.window == 2);
        CHECK(traj.values.size() == 2);
    }

    SUBCASE("too little following context is an error") {
        CHECK_THROWS_AS(collect_trajectory(m, {"wait w0"}, Tokenizer::wait_id, 8, set),
                        InputError);
        CHECK_THROWS_AS(collect_trajectory(m, {"w0 wait"}, Tokenizer::wait_id, 8, set),
                        InputError);
    }

    SUBCASE("mean-over-set vs top-1 aggregation") {
        NeuronSet both;
        both.neurons = {{0, 0}, {0, 1}}; // second neuron always reads 0
        both.diffs = {1.0, 0.5};
        both.strategy = "top_k(2)";
        auto mean = collect_trajectory(m, {"wait w1 w1 w1"}, Tokenizer::wait_id, 3, both);
        auto top1 = collect_trajectory(m, {"wait w1 w1 w1"}, Tokenizer::wait_id, 3, both,
                                       TrajectoryAggregation::top1_only);
        CHECK(mean.values[0] == doctest::Approx(1.5).epsilon(1e-5)); // (3 + 0) / 2
        CHECK(top1.values[0] == doctest::Approx(3.0).epsilon(1e-5));
    }

    SUBCASE("neuron set validation") {
        NeuronSet empty;
        CHECK_THROWS_AS(collect_trajectory(m, {"wait w0 w1"}, Tokenizer::wait_id, 4, empty),
                        InputError);
        NeuronSet oob;
        oob.neurons = {{5, 0}};
        oob.diffs = {1.0};
        CHECK_THROWS_AS(collect_trajectory(m, {"wait w0 w1"}, Tokenizer::wait_id, 4, oob),
                        InputError);
    }

    SUBCASE("window below 2 is rejected") {
        CHECK_THROWS_AS(collect_trajectory(m, {"wait w0 w1"}, Tokenizer::wait_id, 1, set),
                        InputError);
    }
}

TEST_CASE("serialization round trips and the fit CSV") {
    TempDir tmp("eelo_dyn_io");

    FitCoefficients coeffs{0.17, 0.033, -0.997};
    save_coefficients(tmp.path / "coeffs.json", coeffs);
    auto loaded = load_coefficients(tmp.path / "coeffs.json");
    CHECK(loaded.a == coeffs.a);
    CHECK(loaded.b == coeffs.b);
    CHECK(loaded.c == coeffs.c);

    auto traj = make_traj({0.36, 0.21, 0.15});
    traj.trigger_token = Tokenizer::wait_id;
    save_trajectory(tmp.path / "traj.json", traj);
    auto traj2 = load_trajectory(tmp.path / "traj.json");
    CHECK(traj2.values == traj.values);
    CHECK(traj2.counts == traj.counts);
    CHECK(traj2.trigger_token == traj.trigger_token);

    save_fit_csv(tmp.path / "fit.csv", traj, coeffs);
    std::ifstream in(tmp.path / "fit.csv");
    std::string header, row1;
    std::getline(in, header);
    std::getline(in, row1);
    CHECK(header == "t,observed,fitted");
    CHECK(row1.substr(0, 7) == "1,0.36,");
}
