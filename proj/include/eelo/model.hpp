#pragma once

#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "eelo/config.hpp"
#include "eelo/tensor.hpp"
#include "eelo/tokenizer.hpp"

namespace eelo {

struct NeuronId {
    int layer = 0;
    int index = 0;
    auto operator<=>(const NeuronId&) const = default;
};

// Runs once per (position, layer) on the post-activation gate values, after
// they have been recorded; in-place edits feed the rest of the forward pass.
using ActivationHook = std::function<void(int layer, std::span<float> activations)>;

// Dense per-position record of every tapped gate activation, plus the token
// id consumed at each position.
class ActivationTrace {
public:
    ActivationTrace() = default;
    ActivationTrace(int num_layers, int mlp_dim);

    void push(int token_id, const std::vector<std::vector<float>>& layer_acts);
    int positions() const { return static_cast<int>(tokens_.size()); }
    int layers() const { return layers_; }
    int width() const { return width_; }
    float value(int pos, NeuronId n) const;
    std::span<const float> layer_row(int pos, int layer) const;
    int token_at(int pos) const;

private:
    int layers_ = 0;
    int width_ = 0;
    std::vector<int> tokens_;
    std::vector<float> values_; // [pos][layer][width]
};

struct DecoderState {
    std::vector<std::vector<float>> k_cache; // per layer, [pos * hidden_dim]
    std::vector<std::vector<float>> v_cache;
    std::vector<int> tokens; // every token consumed so far
    int position = 0;
};

class Model {
public:
    Model(ModelConfig config, Tokenizer tokenizer, TensorStore store);
    Model(Model&&) = default;
    Model& operator=(Model&&) = default;
    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;

    const ModelConfig& config() const { return config_; }
    const Tokenizer& tokenizer() const { return tokenizer_; }
    const TensorStore& store() const { return store_; }
    TensorStore& store() { return store_; }

    // Raw weight views, wired at construction. Rows are input-dim-major, so
    // y = x · W uses W shaped [in][out].
    struct LayerWeights {
        const float* attn_norm;
        const float* wq;
        const float* wk;
        const float* wv;
        const float* wo;
        const float* mlp_norm;
        const float* w_gate;
        const float* w_up;
        const float* w_down;
    };
    const LayerWeights& layer(int i) const { return layers_[static_cast<size_t>(i)]; }
    const float* tok_embed() const { return tok_embed_; }
    const float* pos_embed() const { return pos_embed_; }
    const float* final_norm() const { return final_norm_; }
    const float* lm_head() const { return lm_head_; }

private:
    ModelConfig config_;
    Tokenizer tokenizer_;
    TensorStore store_;
    std::vector<LayerWeights> layers_;
    const float* tok_embed_ = nullptr;
    const float* pos_embed_ = nullptr;
    const float* final_norm_ = nullptr;
    const float* lm_head_ = nullptr;
};

struct StepResult {
    std::vector<float> logits;                // vocab_size
    std::vector<std::vector<float>> tapped;   // [layer][mlp_dim], recorded pre-hook
};

// Advances the state by one position consuming token_id. Throws
// ContextOverflowError once the cache is full.
StepResult forward_step(const Model& model, DecoderState& state, int token_id,
                        const ActivationHook& hook = nullptr);

// Teacher-forced pass over a whole token sequence.
ActivationTrace run_trace(const Model& model, const std::vector<int>& token_ids,
                          const ActivationHook& hook = nullptr);

struct DecodeParams {
    int max_new_tokens = 64;
    double temperature = 1.0;
    uint64_t seed = 0;
    bool greedy = true;
};

struct Generation {
    std::vector<int> token_ids; // generated tokens only, EOS included if emitted
    std::string text;           // detokenized generated tokens
    ActivationTrace trace;      // all consumed positions (prompt + generation)
    int prompt_len = 0;
};

int argmax_token(std::span<const float> logits);
int sample_token(std::span<const float> logits, const DecodeParams& params,
                 std::mt19937_64& gen);

Generation decode(const Model& model, const std::vector<int>& prompt_ids,
                  const DecodeParams& params, const ActivationHook& hook = nullptr);

// Fresh weights for the architecture implied by config: normal(0, 0.02)
// projections/embeddings, unit norm gains. Deterministic in config.seed.
TensorStore init_random(const ModelConfig& config);

void save_model(const std::filesystem::path& dir, const Model& model);
Model load_model(const std::filesystem::path& dir);

} // namespace eelo
