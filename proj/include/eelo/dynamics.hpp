#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "eelo/model.hpp"
#include "eelo/probe.hpp"

namespace eelo {

// Mean activation at offsets 1..window after each trigger occurrence.
// Occurrences near the end of a text contribute only the offsets they have;
// a trailing run of offsets with no samples at all is truncated.
struct Trajectory {
    int trigger_token = Tokenizer::wait_id;
    int window = 0; // == values.size()
    std::vector<double> values;
    std::vector<long> counts; // samples aggregated per offset
};

enum class TrajectoryAggregation {
    mean_over_set, // average across every neuron in the set (default)
    top1_only,     // track just the rank-1 neuron
};

Trajectory collect_trajectory(const Model& model, const std::vector<std::string>& texts,
                              int trigger_token, int window, const NeuronSet& set,
                              TrajectoryAggregation agg = TrajectoryAggregation::mean_over_set);

struct FitCoefficients {
    double a = 0.0;
    double b = 0.0;
    double c = 0.0;
};

// f(t) = a − b·ln(t + c). Throws on t + c ≤ 0.
double eval_f(const FitCoefficients& coeffs, double t);

// Least squares over a c-grid (step 1e-3 on (−1, 2]) with a closed-form
// linear solve for (a, b) at each grid point; ties go to the smallest c.
// A flat trajectory returns (a = value, b = 0, c = 0).
FitCoefficients fit_log_decay(const Trajectory& traj);

void save_coefficients(const std::filesystem::path& path, const FitCoefficients& coeffs);
FitCoefficients load_coefficients(const std::filesystem::path& path);
void save_trajectory(const std::filesystem::path& path, const Trajectory& traj);
Trajectory load_trajectory(const std::filesystem::path& path);

// (t, observed, fitted) rows for plotting.
void save_fit_csv(const std::filesystem::path& path, const Trajectory& traj,
                  const FitCoefficients& coeffs);

} // namespace eelo
