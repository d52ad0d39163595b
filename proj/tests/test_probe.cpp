#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>

#include "eelo/errors.hpp"
#include "eelo/probe.hpp"
#include "eelo/rng.hpp"
#include "test_util.hpp"

using namespace eelo;
using testutil::make_scripted_activation_model;
using testutil::make_test_model;
using testutil::TempDir;

namespace {

ModelConfig probe_config() {
    ModelConfig cfg;
    cfg.num_layers = 2;
    cfg.hidden_dim = 8;
    cfg.mlp_dim = 6;
    cfg.num_heads = 2;
    cfg.vocab_size = 10;
    cfg.max_seq_len = 64;
    cfg.seed = 3;
    return cfg;
}

// vocab 8 = specials + w0..w3 (ids 4..7); neuron (0,0) reads 5.0 on w0,
// 0.5 on w1, 4.0 on w2, 0.5 on w3; neuron (0,1) constant 3.0 everywhere
std::vector<std::vector<double>> scripted_gate() {
    std::vector<std::vector<double>> g(8, std::vector<double>(4, 0.0));
    for (auto& row : g) {
        row[1] = 3.0;
    }
    g[4][0] = 5.0;
    g[5][0] = 0.5;
    g[6][0] = 4.0;
    g[7][0] = 0.5;
    return g;
}

} // namespace

TEST_CASE("summary of a single-token response equals the tapped values") {
    auto m = make_test_model(probe_config(), 15.0);
    auto summary = summarize_activations(m, "w0");
    auto trace = run_trace(m, m.tokenizer().encode("w0"));
    for (int l = 0; l < m.config().num_layers; ++l) {
        auto row = trace.layer_row(0, l);
        for (int i = 0; i < m.config().mlp_dim; ++i) {
            CHECK(summary[static_cast<size_t>(l) * m.config().mlp_dim + i] ==
                  static_cast<double>(row[static_cast<size_t>(i)]));
        }
    }
}

TEST_CASE("position-free model: repeating the response leaves the summary unchanged") {
    auto m = make_scripted_activation_model(8, 4, scripted_gate());
    auto once = summarize_activations(m, "w0 w1 w2");
    auto twice = summarize_activations(m, "w0 w1 w2 w0 w1 w2");
    REQUIRE(once.size() == twice.size());
    for (size_t i = 0; i < once.size(); ++i) {
        CHECK(once[i] == doctest::Approx(twice[i]).epsilon(1e-12));
    }
}

TEST_CASE("constant neuron summarizes to its constant") {
    auto m = make_scripted_activation_model(8, 4, scripted_gate());
    auto summary = summarize_activations(m, "w0 w3 w1 w2");
    CHECK(summary[1] == doctest::Approx(3.0).epsilon(1e-5)); // neuron (0,1)
}

TEST_CASE("question prefix is excluded from the summary") {
    auto m = make_scripted_activation_model(8, 4, scripted_gate());
    // neuron (0,0): question tokens read 5.0, response tokens 0.5
    auto summary = summarize_activations(m, "w0 w0", "w1 w3");
    CHECK(summary[0] == doctest::Approx(0.5).epsilon(1e-5));
}

TEST_CASE("contrast_diff on the scripted fixture") {
    auto m = make_scripted_activation_model(8, 4, scripted_gate());

    SUBCASE("identical responses give exact zeros") {
        auto report = contrast_diff(m, {{"p1", "", "w0 w1", "w0 w1"}});
        for (double v : report.diffs) {
            CHECK(v == 0.0);
        }
    }

    SUBCASE("single pair reads 5.0 vs 0.5 on neuron (0,0)") {
        auto report = contrast_diff(m, {{"p1", "", "w0 w0", "w1 w1"}});
        CHECK(report.at({0, 0}) == doctest::Approx(4.5).epsilon(1e-5));
        CHECK(report.at({0, 1}) == doctest::Approx(0.0).epsilon(1e-6)); // constant cancels
        CHECK(report.num_pairs == 1);
    }

    SUBCASE("two pairs average their diffs") {
        // pair 1: 5.0 - 0.5 = 4.5; pair 2: 4.0 - 0.5 = 3.5; mean 4.0
        auto report = contrast_diff(m, {{"p1", "", "w0 w0", "w1 w1"},
                                        {"p2", "", "w2 w2", "w3 w3"}});
        CHECK(report.at({0, 0}) == doctest::Approx(4.0).epsilon(1e-5));
        CHECK(report.num_pairs == 2);
    }
}

TEST_CASE("antisymmetry: swapping responses negates the report exactly") {
    auto m = make_test_model(probe_config(), 15.0);
    std::vector<ContrastPair> fwd{{"a", "w0", "w1 w2 w3", "w4 w5"},
                                  {"b", "", "w5 w0", "w2 w2 w1"}};
    auto rev = fwd;
    for (auto& p : rev) {
        std::swap(p.positive, p.negative);
    }
    auto rf = contrast_diff(m, fwd);
    auto rr = contrast_diff(m, rev);
    for (size_t i = 0; i < rf.diffs.size(); ++i) {
        CHECK(rf.diffs[i] == -rr.diffs[i]);
    }
}

TEST_CASE("contrast_diff input validation") {
    auto m = make_test_model(probe_config(), 15.0);
    CHECK_THROWS_AS(contrast_diff(m, {}), InputError);
    CHECK_THROWS_AS(contrast_diff(m, {{"x", "q", "", "w1"}}), InputError);
}

TEST_CASE("selection strategies") {
    DiffReport report;
    report.num_layers = 1;
    report.width = 3;
    report.num_pairs = 1;
    report.diffs = {4.5, 4.0, 3.9}; // A=(0,0), B=(0,1), C=(0,2)

    SUBCASE("threshold keeps strictly-greater entries only") {
        auto set = select_neurons(report, SelectionStrategy::threshold(4.0));
        REQUIRE(set.size() == 1);
        CHECK(set.neurons[0] == NeuronId{0, 0});
    }

    SUBCASE("top_k keeps rank order") {
        auto set = select_neurons(report, SelectionStrategy::top_k(2));
        REQUIRE(set.size() == 2);
        CHECK(set.neurons[0] == NeuronId{0, 0});
        CHECK(set.neurons[1] == NeuronId{0, 1});
        CHECK(set.diffs[0] == 4.5);
    }

    SUBCASE("k beyond the neuron count is an error") {
        CHECK_THROWS_AS(select_neurons(report, SelectionStrategy::top_k(4)), InputError);
        CHECK_THROWS_AS(select_neurons(report, SelectionStrategy::top_k(-1)), InputError);
    }
}

TEST_CASE("ties break toward lower (layer, index)") {
    DiffReport report;
    report.num_layers = 2;
    report.width = 2;
    report.num_pairs = 1;
    report.diffs = {1.0, 4.5, 4.5, 0.0}; // (0,1) and (1,0) tied

    auto set = select_neurons(report, SelectionStrategy::top_k(2));
    CHECK(set.neurons[0] == NeuronId{0, 1});
    CHECK(set.neurons[1] == NeuronId{1, 0});
}

TEST_CASE("selection monotonicity") {
    std::mt19937_64 gen(5);
    DiffReport report;
    report.num_layers = 3;
    report.width = 7;
    report.num_pairs = 1;
    report.diffs.resize(21);
    for (auto& v : report.diffs) {
        v = uniform01(gen) * 10.0 - 5.0;
    }

    auto contains = [](const NeuronSet& s, NeuronId n) {
        return std::find(s.neurons.begin(), s.neurons.end(), n) != s.neurons.end();
    };

    for (double tau = -5.0; tau < 5.0; tau += 0.5) {
        auto lo = select_neurons(report, SelectionStrategy::threshold(tau));
        auto hi = select_neurons(report, SelectionStrategy::threshold(tau + 0.5));
        for (NeuronId n : hi.neurons) {
            CHECK(contains(lo, n)); // raising tau never adds a neuron
        }
        CHECK(hi.size() <= lo.size());
    }
    for (int k = 0; k < 21; ++k) {
        auto small = select_neurons(report, SelectionStrategy::top_k(k));
        auto big = select_neurons(report, SelectionStrategy::top_k(k + 1));
        for (NeuronId n : small.neurons) {
            CHECK(contains(big, n));
        }
    }
}

TEST_CASE("planted neuron ranks first") {
    // neuron (0,0) separates the groups by 4.5; all others by < 0.05
    auto m = make_scripted_activation_model(8, 4, scripted_gate());
    auto report = contrast_diff(m, {{"p", "", "w0 w0 w0", "w1 w1 w1"}});
    auto set = select_neurons(report, SelectionStrategy::top_k(4 * 1));
    CHECK(set.neurons[0] == NeuronId{0, 0});

    auto hist = layer_histogram(set, 1);
    CHECK(hist[0] == static_cast<int>(set.size()));
}

TEST_CASE("layer histogram") {
    NeuronSet set;
    CHECK(layer_histogram(set, 3) == std::vector<int>{0, 0, 0});

    set.neurons = {{2, 0}, {2, 5}, {2, 1}};
    set.diffs = {3.0, 2.0, 1.0};
    CHECK(layer_histogram(set, 3) == std::vector<int>{0, 0, 3});

    set.neurons.push_back({7, 0});
    set.diffs.push_back(0.5);
    CHECK_THROWS_AS(layer_histogram(set, 3), InputError);
}

TEST_CASE("contrast pair JSONL loading") {
    TempDir tmp("eelo_pairs");
    auto path = tmp.path / "pairs.jsonl";

    SUBCASE("well-formed lines, blank lines skipped") {
        std::ofstream(path) << R"({"id":"1","question":"q","positive":"p p","negative":"n"})"
                            << "\n\n"
                            << R"({"id":"2","question":"","positive":"x","negative":"y"})"
                            << "\n";
        auto pairs = load_contrast_pairs(path);
        REQUIRE(pairs.size() == 2);
        CHECK(pairs[0].id == "1");
        CHECK(pairs[1].positive == "x");
    }

    SUBCASE("missing field reports the line") {
        std::ofstream(path) << R"({"id":"1","question":"q","positive":"p","negative":"n"})"
                            << "\n"
                            << R"({"id":"2","question":"q","positive":"p"})" << "\n";
        try {
            load_contrast_pairs(path);
            FAIL("expected InputError");
        } catch (const InputError& e) {
            CHECK(std::string(e.what()).find(":2") != std::string::npos);
        }
    }

    SUBCASE("empty response is rejected") {
        std::ofstream(path) << R"({"id":"1","question":"q","positive":"","negative":"n"})"
                            << "\n";
        CHECK_THROWS_AS(load_contrast_pairs(path), InputError);
    }

    SUBCASE("missing file") {
        CHECK_THROWS_AS(load_contrast_pairs(tmp.path / "nope.jsonl"), InputError);
    }
}

TEST_CASE("report and set serialization round trips") {
    TempDir tmp("eelo_probe_io");
    auto m = make_scripted_activation_model(8, 4, scripted_gate());
    auto report = contrast_diff(m, {{"p", "", "w0 w0", "w1 w1"}});
    save_diff_report(tmp.path / "report.json", report);
    auto report2 = load_diff_report(tmp.path / "report.json");
    CHECK(report2.num_layers == report.num_layers);
    CHECK(report2.width == report.width);
    CHECK(report2.num_pairs == report.num_pairs);
    CHECK(report2.diffs == report.diffs);

    auto set = select_neurons(report, SelectionStrategy::threshold(1.0));
    save_neuron_set(tmp.path / "set.json", set);
    auto set2 = load_neuron_set(tmp.path / "set.json");
    CHECK(set2.neurons == set.neurons);
    CHECK(set2.diffs == set.diffs);
    CHECK(set2.strategy == set.strategy);
}
