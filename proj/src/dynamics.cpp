#include "eelo/dynamics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "eelo/errors.hpp"

namespace eelo {

using nlohmann::ordered_json;

Trajectory collect_trajectory(const Model& model, const std::vector<std::string>& texts,
                              int trigger_token, int window, const NeuronSet& set,
                              TrajectoryAggregation agg) {
    if (window < 2) {
        throw InputError("trajectory window must be at least 2");
    }
    if (set.neurons.empty()) {
        throw InputError("trajectory collection needs a non-empty neuron set");
    }
    const int layers = model.config().num_layers;
    const int width = model.config().mlp_dim;
    std::vector<NeuronId> tracked;
    if (agg == TrajectoryAggregation::top1_only) {
        tracked.push_back(set.neurons.front());
    } else {
        tracked = set.neurons;
    }
    for (NeuronId n : tracked) {
        if (n.layer < 0 || n.layer >= layers || n.index < 0 || n.index >= width) {
            throw InputError("neuron (" + std::to_string(n.layer) + ", " +
                             std::to_string(n.index) + ") outside model dimensions");
        }
    }

    std::vector<double> acc(static_cast<size_t>(window), 0.0);
    std::vector<long> counts(static_cast<size_t>(window), 0);
    long occurrences = 0;

    for (const auto& text : texts) {
        const auto ids = model.tokenizer().encode(text);
        if (ids.empty()) {
            continue;
        }
        const auto trace = run_trace(model, ids);
        const int n = static_cast<int>(ids.size());
        for (int p = 0; p < n; ++p) {
            if (ids[static_cast<size_t>(p)] != trigger_token) {
                continue;
            }
            ++occurrences;
            for (int t = 1; t <= window && p + t < n; ++t) {
                for (NeuronId id : tracked) {
                    acc[static_cast<size_t>(t - 1)] += trace.value(p + t, id);
                }
                counts[static_cast<size_t>(t - 1)] += static_cast<long>(tracked.size());
            }
        }
    }

    if (occurrences == 0) {
        throw InputError("trigger token " + std::to_string(trigger_token) +
                         " never occurs in the given texts");
    }

    // offsets fill from the front, so empty counts form a suffix
    int filled = window;
    while (filled > 0 && counts[static_cast<size_t>(filled - 1)] == 0) {
        --filled;
    }
    if (filled < 2) {
        throw InputError("trigger occurrences have fewer than 2 following tokens; "
                         "cannot form a trajectory");
    }

    Trajectory traj;
    traj.trigger_token = trigger_token;
    traj.window = filled;
    traj.values.resize(static_cast<size_t>(filled));
    traj.counts.assign(counts.begin(), counts.begin() + filled);
    for (int t = 0; t < filled; ++t) {
        traj.values[static_cast<size_t>(t)] =
            acc[static_cast<size_t>(t)] / static_cast<double>(counts[static_cast<size_t>(t)]);
    }
    return traj;
}

double eval_f(const FitCoefficients& coeffs, double t) {
    const double arg = t + coeffs.c;
    if (arg <= 0.0) {
        throw InputError("f(t) undefined: t + c = " + std::to_string(arg) + " is not positive");
    }
    return coeffs.a - coeffs.b * std::log(arg);
}

FitCoefficients fit_log_decay(const Trajectory& traj) {
    const auto& y = traj.values;
    const int n = static_cast<int>(y.size());
    if (n < 3) {
        throw InputError("log-decay fit needs a window of at least 3");
    }
    for (double v : y) {
        if (!std::isfinite(v)) {
            throw InputError("trajectory has non-finite values");
        }
    }

    const auto [mn, mx] = std::minmax_element(y.begin(), y.end());
    if (*mx - *mn <= 1e-12) {
        // flat curve: b and c are unidentifiable
        double mean = 0.0;
        for (double v : y) {
            mean += v;
        }
        return {mean / n, 0.0, 0.0};
    }

    double sum_y = 0.0;
    for (double v : y) {
        sum_y += v;
    }

    // c grid: -1 + k·1e-3 for k = 1..3000, i.e. [-0.999, 2.000]
    FitCoefficients best;
    double best_sse = 0.0;
    bool found = false;
    std::vector<double> logs(static_cast<size_t>(n));

    for (int k = 1; k <= 3000; ++k) {
        const double c = -1.0 + static_cast<double>(k) * 1e-3;
        double sum_x = 0.0, sum_xx = 0.0, sum_xy = 0.0;
        for (int t = 1; t <= n; ++t) {
            const double x = std::log(static_cast<double>(t) + c);
            logs[static_cast<size_t>(t - 1)] = x;
            sum_x += x;
            sum_xx += x * x;
            sum_xy += x * y[static_cast<size_t>(t - 1)];
        }
        const double denom = n * sum_xx - sum_x * sum_x;
        if (std::abs(denom) <= 1e-12 * std::max(1.0, n * sum_xx)) {
            continue; // singular at this grid point
        }
        // least squares for y = a − b·x
        const double slope = (n * sum_xy - sum_x * sum_y) / denom;
        const double a = (sum_y - slope * sum_x) / n;
        const double b = -slope;

        double sse = 0.0;
        for (int t = 0; t < n; ++t) {
            const double r = y[static_cast<size_t>(t)] - (a - b * logs[static_cast<size_t>(t)]);
            sse += r * r;
        }
        if (!found || sse < best_sse) { // strict <: ties keep the smallest c
            found = true;
            best_sse = sse;
            best = {a, b, c};
        }
    }
    if (!found) {
        throw RuntimeFailure("log-decay fit: linear solve singular at every grid point");
    }
    return best;
}

// ---- serialization ----

void save_coefficients(const std::filesystem::path& path, const FitCoefficients& coeffs) {
    ordered_json j;
    j["a"] = coeffs.a;
    j["b"] = coeffs.b;
    j["c"] = coeffs.c;
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw RuntimeFailure("cannot write coefficients '" + path.string() + "'");
    }
    out << j.dump(2) << "\n";
}

FitCoefficients load_coefficients(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw InputError("cannot open coefficients '" + path.string() + "'");
    }
    try {
        ordered_json j;
        in >> j;
        return {j.at("a").get<double>(), j.at("b").get<double>(), j.at("c").get<double>()};
    } catch (const nlohmann::json::exception& e) {
        throw InputError("coefficients '" + path.string() + "': " + e.what());
    }
}

void save_trajectory(const std::filesystem::path& path, const Trajectory& traj) {
    ordered_json j;
    j["trigger_token"] = traj.trigger_token;
    j["window"] = traj.window;
    j["values"] = traj.values;
    j["counts"] = traj.counts;
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw RuntimeFailure("cannot write trajectory '" + path.string() + "'");
    }
    out << j.dump(2) << "\n";
}

Trajectory load_trajectory(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw InputError("cannot open trajectory '" + path.string() + "'");
    }
    try {
        ordered_json j;
        in >> j;
        Trajectory traj;
        traj.trigger_token = j.at("trigger_token").get<int>();
        traj.window = j.at("window").get<int>();
        traj.values = j.at("values").get<std::vector<double>>();
        traj.counts = j.at("counts").get<std::vector<long>>();
        if (traj.window != static_cast<int>(traj.values.size()) ||
            traj.counts.size() != traj.values.size()) {
            throw InputError("trajectory '" + path.string() + "': inconsistent lengths");
        }
        return traj;
    } catch (const nlohmann::json::exception& e) {
        throw InputError("trajectory '" + path.string() + "': " + e.what());
    }
}

void save_fit_csv(const std::filesystem::path& path, const Trajectory& traj,
                  const FitCoefficients& coeffs) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw RuntimeFailure("cannot write fit csv '" + path.string() + "'");
    }
    out << "t,observed,fitted\n";
    for (int t = 1; t <= traj.window; ++t) {
        out << t << "," << traj.values[static_cast<size_t>(t - 1)] << "," << eval_f(coeffs, t)
            << "\n";
    }
}

} // namespace eelo
