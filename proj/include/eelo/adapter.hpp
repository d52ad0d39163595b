#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "eelo/config.hpp"
#include "eelo/model.hpp"

namespace eelo {

// Sigmoid-gated rescaler on chosen channels of the final layer's gate
// activation: out_j = Act(x W_g)_j * sigmoid(x W_a)_j * beta on the target
// channels, pass-through everywhere else. W_a and beta are the only trainable
// pieces; beta starts at 2 so sigmoid(0) * beta = 1 and training begins from
// the unmodified model.
struct AmpModule {
    std::vector<int> targets;  // unique channel indices into the gate vector
    std::vector<double> w_a;   // [hidden][targets.size()]
    double beta = 2.0;
    int hidden_dim = 0;
};

// Low-rank residual on one host projection: y = x W + scale * (x down) up.
struct LoRAAdapter {
    int layer = 0;
    std::string projection; // host weight inside the layer, e.g. "w_gate"
    int rank = 0;
    double scale = 1.0;
    std::vector<double> down; // [in][rank]
    std::vector<double> up;   // [rank][out]
};

struct LoRASpec {
    int layer = 0;
    std::string projection;
    int rank = 0;
    double scale = 1.0;
};

struct AdapterPlan {
    std::vector<LoRASpec> lora;
    std::vector<int> amp_targets; // empty leaves the gate module out
};

struct TrainConfig {
    double learning_rate = 0.05;
    int steps = 200;
    int batch_size = 4;
    uint64_t seed = 0;

    void validate() const;
};

struct ParamBudget {
    long long trainable = 0;
    long long total = 0;
    double fraction = 0.0; // trainable / total
};

struct TrainedAdapters {
    std::vector<LoRAAdapter> lora;
    std::optional<AmpModule> amp;
    std::vector<double> losses; // batch loss per step, before that step's update
};

// Gated activation for one position: base ActivationKind over x·w_gate, then
// the module's sigmoid gate on its target channels.
std::vector<double> amp_forward(std::span<const double> x, std::span<const double> w_gate,
                                int mlp_dim, ActivationKind kind, const AmpModule& amp);

struct AmpGradients {
    std::vector<double> w_a; // same layout as AmpModule::w_a
    double beta = 0.0;
};

// d(upstream · amp_forward)/d{W_a, beta} by the chain rule through the
// sigmoid and the elementwise product.
AmpGradients amp_gradients(std::span<const double> x, std::span<const double> w_gate,
                           int mlp_dim, ActivationKind kind, const AmpModule& amp,
                           std::span<const double> upstream);

std::vector<double> lora_forward(std::span<const double> x, std::span<const double> host,
                                 int in_dim, int out_dim, const LoRAAdapter& adapter);

// Folds scale * down·up into the named host tensor, in double, cast back once.
void lora_merge(TensorStore& store, const std::string& tensor_name,
                const LoRAAdapter& adapter);

void validate_plan(const ModelConfig& config, const AdapterPlan& plan);

// Integer identity: trainable = sum of (in+out)*rank over the plan's LoRA
// entries plus hidden*n + 1 for the gate module; total is the full model count.
ParamBudget param_budget(const ModelConfig& config, const AdapterPlan& plan);

// Shapes and zero/identity starts for a plan: LoRA down ~ N(0, 0.02) and
// up = 0, gate module W_a = 0 and beta = 2. Deterministic in seed.
TrainedAdapters init_adapters(const Model& model, const AdapterPlan& plan, uint64_t seed);

struct AdapterGradients {
    std::vector<LoRAAdapter> lora; // gradient values in the weight slots
    std::optional<AmpModule> amp;
    double loss = 0.0;
};

// Mean next-token cross-entropy over the texts with the given adapter values,
// plus gradients for every adapter parameter. The base model is read-only;
// everything runs in 64-bit. This is the exact function the training loop
// descends, so finite-difference checks on it cover the whole backward pass.
AdapterGradients adapter_loss_gradients(const Model& model,
                                        const std::vector<std::string>& corpus,
                                        const std::vector<LoRAAdapter>& lora,
                                        const std::optional<AmpModule>& amp);

double adapter_loss(const Model& model, const std::vector<std::string>& corpus,
                    const std::vector<LoRAAdapter>& lora,
                    const std::optional<AmpModule>& amp);

// Plain SGD on the adapters with the base weights frozen. Loss is recorded
// per step; a non-finite loss aborts with the step index in the message.
TrainedAdapters train_adapters(const Model& model, const std::vector<std::string>& corpus,
                               const AdapterPlan& plan, const TrainConfig& train);

void save_adapters(const std::filesystem::path& dir, const TrainedAdapters& trained);
TrainedAdapters load_adapters(const std::filesystem::path& dir);
void save_loss_csv(const std::filesystem::path& path, const std::vector<double>& losses);

} // namespace eelo
