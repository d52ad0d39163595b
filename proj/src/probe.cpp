#include "eelo/probe.hpp"

#include <algorithm>
#include <fstream>

#include <json.hpp>

#include "eelo/errors.hpp"

namespace eelo {

using nlohmann::ordered_json;

std::vector<ContrastPair> load_contrast_pairs(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw InputError("cannot open contrast pairs '" + path.string() + "'");
    }
    std::vector<ContrastPair> pairs;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        ordered_json j;
        try {
            j = ordered_json::parse(line);
            ContrastPair p;
            p.id = j.at("id").get<std::string>();
            p.question = j.at("question").get<std::string>();
            p.positive = j.at("positive").get<std::string>();
            p.negative = j.at("negative").get<std::string>();
            if (p.positive.empty() || p.negative.empty()) {
                throw InputError("empty positive or negative response");
            }
            pairs.push_back(std::move(p));
        } catch (const nlohmann::json::exception& e) {
            throw InputError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        } catch (const InputError& e) {
            throw InputError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return pairs;
}

namespace {

std::vector<double> summarize_ids(const Model& model, const std::vector<int>& ids,
                                  size_t from_pos) {
    const int layers = model.config().num_layers;
    const int width = model.config().mlp_dim;
    std::vector<double> summary(static_cast<size_t>(layers) * width, 0.0);
    if (ids.size() <= from_pos) {
        throw InputError("empty response: nothing to summarize");
    }
    auto trace = run_trace(model, ids);
    const auto count = static_cast<double>(ids.size() - from_pos);
    for (int p = static_cast<int>(from_pos); p < trace.positions(); ++p) {
        for (int l = 0; l < layers; ++l) {
            auto row = trace.layer_row(p, l);
            for (int i = 0; i < width; ++i) {
                summary[static_cast<size_t>(l) * width + i] += row[static_cast<size_t>(i)];
            }
        }
    }
    for (auto& v : summary) {
        v /= count;
    }
    return summary;
}

} // namespace

std::vector<double> summarize_activations(const Model& model, const std::string& text) {
    return summarize_ids(model, model.tokenizer().encode(text), 0);
}

std::vector<double> summarize_activations(const Model& model, const std::string& question,
                                          const std::string& response) {
    auto ids = model.tokenizer().encode(question);
    const size_t question_len = ids.size();
    auto response_ids = model.tokenizer().encode(response);
    ids.insert(ids.end(), response_ids.begin(), response_ids.end());
    return summarize_ids(model, ids, question_len);
}

DiffReport contrast_diff(const Model& model, const std::vector<ContrastPair>& pairs) {
    if (pairs.empty()) {
        throw InputError("contrast_diff needs at least one pair");
    }
    DiffReport report;
    report.num_layers = model.config().num_layers;
    report.width = model.config().mlp_dim;
    report.num_pairs = static_cast<int>(pairs.size());
    report.diffs.assign(static_cast<size_t>(report.num_layers) * report.width, 0.0);

    for (const auto& pair : pairs) {
        if (pair.positive.empty() || pair.negative.empty()) {
            throw InputError("pair '" + pair.id + "' has an empty response");
        }
        auto pos = summarize_activations(model, pair.question, pair.positive);
        auto neg = summarize_activations(model, pair.question, pair.negative);
        for (size_t i = 0; i < report.diffs.size(); ++i) {
            report.diffs[i] += pos[i] - neg[i];
        }
    }
    for (auto& v : report.diffs) {
        v /= report.num_pairs;
    }
    return report;
}

SelectionStrategy SelectionStrategy::threshold(double tau) {
    SelectionStrategy s;
    s.kind = Kind::threshold;
    s.tau = tau;
    return s;
}

SelectionStrategy SelectionStrategy::top_k(int k) {
    SelectionStrategy s;
    s.kind = Kind::top_k;
    s.k = k;
    return s;
}

std::string SelectionStrategy::describe() const {
    if (kind == Kind::threshold) {
        return "threshold(" + std::to_string(tau) + ")";
    }
    return "top_k(" + std::to_string(k) + ")";
}

NeuronSet select_neurons(const DiffReport& report, const SelectionStrategy& strategy) {
    const size_t total = report.diffs.size();
    if (total == 0) {
        throw InputError("empty diff report");
    }
    std::vector<NeuronId> order(total);
    for (size_t i = 0; i < total; ++i) {
        order[i] = {static_cast<int>(i) / report.width, static_cast<int>(i) % report.width};
    }
    std::sort(order.begin(), order.end(), [&](NeuronId x, NeuronId y) {
        const double dx = report.at(x), dy = report.at(y);
        if (dx != dy) {
            return dx > dy;
        }
        return x < y; // (layer, index) ascending on ties
    });

    NeuronSet set;
    set.strategy = strategy.describe();
    if (strategy.kind == SelectionStrategy::Kind::threshold) {
        for (NeuronId n : order) {
            if (report.at(n) > strategy.tau) {
                set.neurons.push_back(n);
                set.diffs.push_back(report.at(n));
            } else {
                break; // sorted descending: nothing further qualifies
            }
        }
    } else {
        if (strategy.k < 0 || static_cast<size_t>(strategy.k) > total) {
            throw InputError("top_k(" + std::to_string(strategy.k) + ") exceeds the " +
                             std::to_string(total) + " tapped neurons");
        }
        for (int i = 0; i < strategy.k; ++i) {
            set.neurons.push_back(order[static_cast<size_t>(i)]);
            set.diffs.push_back(report.at(order[static_cast<size_t>(i)]));
        }
    }
    return set;
}

std::vector<int> layer_histogram(const NeuronSet& set, int num_layers) {
    std::vector<int> counts(static_cast<size_t>(num_layers), 0);
    for (NeuronId n : set.neurons) {
        if (n.layer < 0 || n.layer >= num_layers) {
            throw InputError("neuron layer " + std::to_string(n.layer) + " out of bounds");
        }
        counts[static_cast<size_t>(n.layer)] += 1;
    }
    return counts;
}

// ---- serialization ----

void save_diff_report(const std::filesystem::path& path, const DiffReport& report) {
    ordered_json j;
    j["num_layers"] = report.num_layers;
    j["mlp_dim"] = report.width;
    j["num_pairs"] = report.num_pairs;
    auto entries = ordered_json::array();
    for (int l = 0; l < report.num_layers; ++l) {
        for (int i = 0; i < report.width; ++i) {
            entries.push_back({{"layer", l}, {"index", i}, {"diff", report.at({l, i})}});
        }
    }
    j["entries"] = std::move(entries);
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw RuntimeFailure("cannot write diff report '" + path.string() + "'");
    }
    out << j.dump(2) << "\n";
}

DiffReport load_diff_report(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw InputError("cannot open diff report '" + path.string() + "'");
    }
    try {
        ordered_json j;
        in >> j;
        DiffReport report;
        report.num_layers = j.at("num_layers").get<int>();
        report.width = j.at("mlp_dim").get<int>();
        report.num_pairs = j.at("num_pairs").get<int>();
        if (report.num_layers <= 0 || report.width <= 0) {
            throw InputError("diff report with non-positive dimensions");
        }
        report.diffs.assign(static_cast<size_t>(report.num_layers) * report.width, 0.0);
        for (const auto& e : j.at("entries")) {
            NeuronId n{e.at("layer").get<int>(), e.at("index").get<int>()};
            if (n.layer < 0 || n.layer >= report.num_layers || n.index < 0 ||
                n.index >= report.width) {
                throw InputError("diff report entry out of bounds");
            }
            report.at(n) = e.at("diff").get<double>();
        }
        return report;
    } catch (const nlohmann::json::exception& e) {
        throw InputError("diff report '" + path.string() + "': " + e.what());
    }
}

void save_neuron_set(const std::filesystem::path& path, const NeuronSet& set) {
    ordered_json j;
    j["strategy"] = set.strategy;
    auto neurons = ordered_json::array();
    for (size_t i = 0; i < set.neurons.size(); ++i) {
        neurons.push_back({{"layer", set.neurons[i].layer},
                           {"index", set.neurons[i].index},
                           {"diff", set.diffs[i]}});
    }
    j["neurons"] = std::move(neurons);
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw RuntimeFailure("cannot write neuron set '" + path.string() + "'");
    }
    out << j.dump(2) << "\n";
}

NeuronSet load_neuron_set(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw InputError("cannot open neuron set '" + path.string() + "'");
    }
    try {
        ordered_json j;
        in >> j;
        NeuronSet set;
        set.strategy = j.at("strategy").get<std::string>();
        for (const auto& e : j.at("neurons")) {
            set.neurons.push_back({e.at("layer").get<int>(), e.at("index").get<int>()});
            set.diffs.push_back(e.at("diff").get<double>());
        }
        return set;
    } catch (const nlohmann::json::exception& e) {
        throw InputError("neuron set '" + path.string() + "': " + e.what());
    }
}

void save_layer_histogram_csv(const std::filesystem::path& path, const std::vector<int>& counts) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw RuntimeFailure("cannot write histogram '" + path.string() + "'");
    }
    out << "layer,count\n";
    for (size_t l = 0; l < counts.size(); ++l) {
        out << l << "," << counts[l] << "\n";
    }
}

} // namespace eelo
