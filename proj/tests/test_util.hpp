#pragma once

// Shared helpers for the test binaries.

#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "eelo/model.hpp"

namespace eelo::testutil {

struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string& tag) {
        path = std::filesystem::temp_directory_path() /
               (tag + "_" + std::to_string(std::random_device{}()));
        std::filesystem::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
};

// Vocabulary is the reserved block plus w0..w{extra-1}.
inline Tokenizer make_vocab(int extra_words, bool lowercase = true) {
    std::string corpus;
    for (int i = 0; i < extra_words; ++i) {
        corpus += "w" + std::to_string(i) + " ";
    }
    return Tokenizer::from_corpus({corpus}, lowercase);
}

// One-layer model with every attention path dead, position-free embeddings,
// and gate pre-activations scripted per token: feeding token t makes gate
// column j read close to gate_values[t][j] (relu keeps them exact-ish).
// hidden_dim equals vocab_size so each token owns a basis direction.
inline Model make_scripted_activation_model(
    int vocab_size, int mlp_dim,
    const std::vector<std::vector<double>>& gate_values /* [vocab][mlp_dim] */,
    int max_seq_len = 128) {
    ModelConfig cfg;
    cfg.num_layers = 1;
    cfg.hidden_dim = vocab_size;
    cfg.mlp_dim = mlp_dim;
    cfg.num_heads = 1;
    cfg.vocab_size = vocab_size;
    cfg.max_seq_len = max_seq_len;
    cfg.activation_kind = ActivationKind::relu;

    TensorStore store = init_random(cfg);
    for (const auto& name : store.names()) {
        if (name.find("norm") == std::string::npos) {
            auto& d = store.get(name).data;
            std::fill(d.begin(), d.end(), 0.0f);
        }
    }
    auto& te = store.get("tok_embed").data;
    for (int t = 0; t < vocab_size; ++t) {
        te[static_cast<size_t>(t) * vocab_size + t] = 1.0f;
    }
    // basis embedding survives the norm as e_t * r
    const double r = 1.0 / std::sqrt(1.0 / vocab_size + 1e-5);
    auto& wg = store.get("layers.0.w_gate").data;
    for (int t = 0; t < vocab_size; ++t) {
        for (int j = 0; j < mlp_dim; ++j) {
            wg[static_cast<size_t>(t) * mlp_dim + j] =
                static_cast<float>(gate_values[static_cast<size_t>(t)][static_cast<size_t>(j)] / r);
        }
    }
    return Model(cfg, make_vocab(vocab_size - 4), std::move(store));
}

// Script player: after consuming position p (whatever the token was), greedy
// decoding emits script[p+1]; positions past the script emit <eos>. Attention
// and the MLP are dead, so the taps are all zero and amplification can never
// steer the stream — only injection can. Built from one-hot position rows.
struct ScriptedDecoder {
    Model model;
    std::vector<int> script;
};

inline ScriptedDecoder make_position_script_model(const std::string& script_text,
                                                  const std::string& vocab_corpus,
                                                  int max_seq_len = 64) {
    Tokenizer tok = Tokenizer::from_corpus({vocab_corpus}, /*lowercase=*/false);
    std::vector<int> script = tok.encode(script_text);
    const int vocab = tok.size();

    ModelConfig cfg;
    cfg.num_layers = 1;
    cfg.hidden_dim = max_seq_len;
    cfg.mlp_dim = 4;
    cfg.num_heads = 1;
    cfg.vocab_size = vocab;
    cfg.max_seq_len = max_seq_len;
    cfg.activation_kind = ActivationKind::relu;

    TensorStore store = init_random(cfg);
    for (const auto& name : store.names()) {
        if (name.find("norm") == std::string::npos) {
            auto& d = store.get(name).data;
            std::fill(d.begin(), d.end(), 0.0f);
        }
    }
    auto& pe = store.get("pos_embed").data; // [max_seq_len][hidden]
    for (int p = 0; p < max_seq_len; ++p) {
        pe[static_cast<size_t>(p) * max_seq_len + p] = 1.0f;
    }
    auto& head = store.get("lm_head").data; // [hidden][vocab]
    for (int p = 0; p < max_seq_len; ++p) {
        const int target = (p + 1 < static_cast<int>(script.size()))
                               ? script[static_cast<size_t>(p) + 1]
                               : Tokenizer::eos_id;
        head[static_cast<size_t>(p) * vocab + target] = 1.0f;
    }
    return {Model(cfg, std::move(tok), std::move(store)), std::move(script)};
}

// Random toy model; `scale` rescales every non-norm tensor away from the
// default 0.02 spread so tests can pick useful logit magnitudes.
inline Model make_test_model(ModelConfig cfg, double scale = 1.0) {
    Tokenizer tok = make_vocab(cfg.vocab_size - 4);
    TensorStore store = init_random(cfg);
    if (scale != 1.0) {
        for (const auto& name : store.names()) {
            if (name.find("norm") != std::string::npos) {
                continue;
            }
            for (auto& v : store.get(name).data) {
                v = static_cast<float>(v * scale);
            }
        }
    }
    return Model(cfg, std::move(tok), std::move(store));
}

} // namespace eelo::testutil
