#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "eelo/model.hpp"

namespace eelo {

struct ContrastPair {
    std::string id;
    std::string question;
    std::string positive;
    std::string negative;
};

// Line-delimited JSON, one {"id","question","positive","negative"} per line.
std::vector<ContrastPair> load_contrast_pairs(const std::filesystem::path& path);

// Signed mean activation difference for every tapped neuron.
struct DiffReport {
    int num_layers = 0;
    int width = 0; // mlp_dim
    int num_pairs = 0;
    std::vector<double> diffs; // [layer][index]

    double at(NeuronId n) const {
        return diffs[static_cast<size_t>(n.layer) * width + static_cast<size_t>(n.index)];
    }
    double& at(NeuronId n) {
        return diffs[static_cast<size_t>(n.layer) * width + static_cast<size_t>(n.index)];
    }
};

// Mean tapped activation per neuron over every position of `text`.
std::vector<double> summarize_activations(const Model& model, const std::string& text);

// Same, but with the question prepended and the mean restricted to the
// response's token positions.
std::vector<double> summarize_activations(const Model& model, const std::string& question,
                                          const std::string& response);

// Unweighted mean over pairs of summary(positive) − summary(negative).
DiffReport contrast_diff(const Model& model, const std::vector<ContrastPair>& pairs);

struct SelectionStrategy {
    enum class Kind { threshold, top_k };
    Kind kind = Kind::threshold;
    double tau = 4.0;
    int k = 0;

    static SelectionStrategy threshold(double tau);
    static SelectionStrategy top_k(int k);
    std::string describe() const;
};

struct NeuronSet {
    std::vector<NeuronId> neurons; // descending diff, ties by (layer, index)
    std::vector<double> diffs;     // aligned with neurons
    std::string strategy;

    size_t size() const { return neurons.size(); }
};

NeuronSet select_neurons(const DiffReport& report, const SelectionStrategy& strategy);

std::vector<int> layer_histogram(const NeuronSet& set, int num_layers);

void save_diff_report(const std::filesystem::path& path, const DiffReport& report);
DiffReport load_diff_report(const std::filesystem::path& path);
void save_neuron_set(const std::filesystem::path& path, const NeuronSet& set);
NeuronSet load_neuron_set(const std::filesystem::path& path);
void save_layer_histogram_csv(const std::filesystem::path& path, const std::vector<int>& counts);

} // namespace eelo
