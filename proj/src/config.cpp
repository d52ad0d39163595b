#include "eelo/config.hpp"

#include <fstream>
#include <set>

#include <json.hpp>

#include "eelo/errors.hpp"

namespace eelo {

using nlohmann::ordered_json;

ActivationKind activation_from_name(const std::string& name) {
    if (name == "silu") {
        return ActivationKind::silu;
    }
    if (name == "relu") {
        return ActivationKind::relu;
    }
    throw InputError("unknown activation kind '" + name + "' (expected silu or relu)");
}

std::string activation_name(ActivationKind kind) {
    return kind == ActivationKind::silu ? "silu" : "relu";
}

void ModelConfig::validate() const {
    auto require = [](bool ok, const std::string& msg) {
        if (!ok) {
            throw InputError("model config: " + msg);
        }
    };
    require(num_layers >= 1, "num_layers must be >= 1");
    require(hidden_dim >= 1, "hidden_dim must be >= 1");
    require(mlp_dim >= 1, "mlp_dim must be >= 1");
    require(num_heads >= 1, "num_heads must be >= 1");
    require(hidden_dim % num_heads == 0, "hidden_dim must be divisible by num_heads");
    // ids 0..3 are reserved for <bos>, <eos>, <unk>, wait
    require(vocab_size >= 4, "vocab_size must cover the reserved tokens (>= 4)");
    require(max_seq_len >= 1, "max_seq_len must be >= 1");
}

void ModelConfig::save(const std::filesystem::path& path) const {
    ordered_json j;
    j["num_layers"] = num_layers;
    j["hidden_dim"] = hidden_dim;
    j["mlp_dim"] = mlp_dim;
    j["num_heads"] = num_heads;
    j["vocab_size"] = vocab_size;
    j["max_seq_len"] = max_seq_len;
    j["activation_kind"] = activation_name(activation_kind);
    j["seed"] = seed;
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw RuntimeFailure("cannot write model config '" + path.string() + "'");
    }
    out << j.dump(2) << "\n";
}

ModelConfig ModelConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw InputError("cannot open model config '" + path.string() + "'");
    }
    ordered_json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw InputError("model config parse error: " + std::string(e.what()));
    }

    static const std::set<std::string> known = {
        "num_layers", "hidden_dim",  "mlp_dim",         "num_heads",
        "vocab_size", "max_seq_len", "activation_kind", "seed",
    };
    for (const auto& [key, _] : j.items()) {
        if (!known.count(key)) {
            throw InputError("model config: unknown key '" + key + "'");
        }
    }

    ModelConfig cfg;
    try {
        cfg.num_layers = j.at("num_layers").get<int>();
        cfg.hidden_dim = j.at("hidden_dim").get<int>();
        cfg.mlp_dim = j.at("mlp_dim").get<int>();
        cfg.num_heads = j.at("num_heads").get<int>();
        cfg.vocab_size = j.at("vocab_size").get<int>();
        cfg.max_seq_len = j.at("max_seq_len").get<int>();
        cfg.activation_kind = activation_from_name(j.at("activation_kind").get<std::string>());
        cfg.seed = j.at("seed").get<uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw InputError("model config: " + std::string(e.what()));
    }
    cfg.validate();
    return cfg;
}

bool operator==(const ModelConfig& a, const ModelConfig& b) {
    return a.num_layers == b.num_layers && a.hidden_dim == b.hidden_dim &&
           a.mlp_dim == b.mlp_dim && a.num_heads == b.num_heads &&
           a.vocab_size == b.vocab_size && a.max_seq_len == b.max_seq_len &&
           a.activation_kind == b.activation_kind && a.seed == b.seed;
}

} // namespace eelo
