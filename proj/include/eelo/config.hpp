#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

namespace eelo {

enum class ActivationKind { silu, relu };

ActivationKind activation_from_name(const std::string& name);
std::string activation_name(ActivationKind kind);

struct ModelConfig {
    int num_layers = 2;
    int hidden_dim = 32;
    int mlp_dim = 64;
    int num_heads = 4;
    int vocab_size = 64;
    int max_seq_len = 256;
    ActivationKind activation_kind = ActivationKind::silu;
    uint64_t seed = 0;

    int head_dim() const { return hidden_dim / num_heads; }

    // Throws InputError on any violated invariant.
    void validate() const;

    void save(const std::filesystem::path& path) const;
    static ModelConfig load(const std::filesystem::path& path);
};

bool operator==(const ModelConfig& a, const ModelConfig& b);

} // namespace eelo
