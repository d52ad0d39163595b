#include "eelo/model.hpp"

#include <cmath>
#include <cstring>

#include "eelo/errors.hpp"
#include "eelo/kernels.hpp"
#include "eelo/rng.hpp"

namespace eelo {

namespace {

std::string layer_name(int i, const char* suffix) {
    return "layers." + std::to_string(i) + "." + suffix;
}

void apply_activation(ActivationKind kind, float* v, size_t n) {
    if (kind == ActivationKind::silu) {
        kernels::silu(v, n);
    } else {
        kernels::relu(v, n);
    }
}

} // namespace

// ---- activation trace ----

ActivationTrace::ActivationTrace(int num_layers, int mlp_dim)
    : layers_(num_layers), width_(mlp_dim) {}

void ActivationTrace::push(int token_id, const std::vector<std::vector<float>>& layer_acts) {
    if (static_cast<int>(layer_acts.size()) != layers_) {
        throw RuntimeFailure("trace push with wrong layer count");
    }
    tokens_.push_back(token_id);
    for (const auto& row : layer_acts) {
        if (static_cast<int>(row.size()) != width_) {
            throw RuntimeFailure("trace push with wrong activation width");
        }
        values_.insert(values_.end(), row.begin(), row.end());
    }
}

float ActivationTrace::value(int pos, NeuronId n) const {
    return layer_row(pos, n.layer)[static_cast<size_t>(n.index)];
}

std::span<const float> ActivationTrace::layer_row(int pos, int layer) const {
    if (pos < 0 || pos >= positions() || layer < 0 || layer >= layers_) {
        throw InputError("trace index (" + std::to_string(pos) + ", layer " +
                         std::to_string(layer) + ") out of range");
    }
    const size_t offset =
        (static_cast<size_t>(pos) * layers_ + static_cast<size_t>(layer)) * width_;
    return {values_.data() + offset, static_cast<size_t>(width_)};
}

int ActivationTrace::token_at(int pos) const {
    if (pos < 0 || pos >= positions()) {
        throw InputError("trace position " + std::to_string(pos) + " out of range");
    }
    return tokens_[static_cast<size_t>(pos)];
}

// ---- model wiring ----

Model::Model(ModelConfig config, Tokenizer tokenizer, TensorStore store)
    : config_(std::move(config)), tokenizer_(std::move(tokenizer)), store_(std::move(store)) {
    config_.validate();
    if (tokenizer_.size() != config_.vocab_size) {
        throw InputError("tokenizer has " + std::to_string(tokenizer_.size()) +
                         " entries but config declares vocab_size " +
                         std::to_string(config_.vocab_size));
    }

    const auto h = static_cast<size_t>(config_.hidden_dim);
    const auto d = static_cast<size_t>(config_.mlp_dim);
    const auto v = static_cast<size_t>(config_.vocab_size);
    const auto s = static_cast<size_t>(config_.max_seq_len);

    tok_embed_ = store_.get("tok_embed", {v, h}).data.data();
    pos_embed_ = store_.get("pos_embed", {s, h}).data.data();
    final_norm_ = store_.get("final_norm", {h}).data.data();
    lm_head_ = store_.get("lm_head", {h, v}).data.data();

    layers_.resize(static_cast<size_t>(config_.num_layers));
    for (int i = 0; i < config_.num_layers; ++i) {
        auto& w = layers_[static_cast<size_t>(i)];
        w.attn_norm = store_.get(layer_name(i, "attn_norm"), {h}).data.data();
        w.wq = store_.get(layer_name(i, "wq"), {h, h}).data.data();
        w.wk = store_.get(layer_name(i, "wk"), {h, h}).data.data();
        w.wv = store_.get(layer_name(i, "wv"), {h, h}).data.data();
        w.wo = store_.get(layer_name(i, "wo"), {h, h}).data.data();
        w.mlp_norm = store_.get(layer_name(i, "mlp_norm"), {h}).data.data();
        w.w_gate = store_.get(layer_name(i, "w_gate"), {h, d}).data.data();
        w.w_up = store_.get(layer_name(i, "w_up"), {h, d}).data.data();
        w.w_down = store_.get(layer_name(i, "w_down"), {d, h}).data.data();
    }
}

// ---- forward pass ----

StepResult forward_step(const Model& model, DecoderState& state, int token_id,
                        const ActivationHook& hook) {
    const auto& cfg = model.config();
    const int h = cfg.hidden_dim;
    const int d = cfg.mlp_dim;
    const int heads = cfg.num_heads;
    const int hd = cfg.head_dim();
    const int pos = state.position;

    if (pos >= cfg.max_seq_len) {
        throw ContextOverflowError("position " + std::to_string(pos) +
                                   " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
    }
    if (token_id < 0 || token_id >= cfg.vocab_size) {
        throw InputError("token id " + std::to_string(token_id) + " out of vocabulary");
    }
    if (state.k_cache.empty()) {
        state.k_cache.resize(static_cast<size_t>(cfg.num_layers));
        state.v_cache.resize(static_cast<size_t>(cfg.num_layers));
    }

    const float inv_sqrt_hd = 1.0f / std::sqrt(static_cast<float>(hd));
    constexpr float norm_eps = 1e-5f;

    std::vector<float> x(static_cast<size_t>(h));
    for (int i = 0; i < h; ++i) {
        x[i] = model.tok_embed()[static_cast<size_t>(token_id) * h + i] +
               model.pos_embed()[static_cast<size_t>(pos) * h + i];
    }

    StepResult result;
    result.tapped.resize(static_cast<size_t>(cfg.num_layers));

    std::vector<float> xn(static_cast<size_t>(h));
    std::vector<float> q(static_cast<size_t>(h)), k(static_cast<size_t>(h)),
        v(static_cast<size_t>(h));
    std::vector<float> attn(static_cast<size_t>(h)), proj(static_cast<size_t>(h));
    std::vector<float> gate(static_cast<size_t>(d)), up(static_cast<size_t>(d));
    std::vector<double> scores, head_acc(static_cast<size_t>(hd));

    for (int l = 0; l < cfg.num_layers; ++l) {
        const auto& w = model.layer(l);
        auto& kc = state.k_cache[static_cast<size_t>(l)];
        auto& vc = state.v_cache[static_cast<size_t>(l)];

        // attention block
        kernels::rmsnorm(xn.data(), x.data(), w.attn_norm, h, norm_eps);
        kernels::vecmat(xn.data(), w.wq, h, h, q.data());
        kernels::vecmat(xn.data(), w.wk, h, h, k.data());
        kernels::vecmat(xn.data(), w.wv, h, h, v.data());
        kc.insert(kc.end(), k.begin(), k.end());
        vc.insert(vc.end(), v.begin(), v.end());

        const int seen = pos + 1;
        scores.assign(static_cast<size_t>(seen), 0.0);
        for (int o = 0; o < heads; ++o) {
            const float* qh = q.data() + o * hd;
            double max_score = -1e300;
            for (int j = 0; j < seen; ++j) {
                const float* kh = kc.data() + static_cast<size_t>(j) * h + o * hd;
                const double s = static_cast<double>(kernels::dot(qh, kh, hd)) * inv_sqrt_hd;
                scores[static_cast<size_t>(j)] = s;
                max_score = std::max(max_score, s);
            }
            double denom = 0.0;
            for (int j = 0; j < seen; ++j) {
                scores[static_cast<size_t>(j)] = std::exp(scores[static_cast<size_t>(j)] - max_score);
                denom += scores[static_cast<size_t>(j)];
            }
            std::fill(head_acc.begin(), head_acc.end(), 0.0);
            for (int j = 0; j < seen; ++j) {
                const float p = static_cast<float>(scores[static_cast<size_t>(j)] / denom);
                const float* vh = vc.data() + static_cast<size_t>(j) * h + o * hd;
                kernels::weighted_accum(p, vh, head_acc.data(), hd);
            }
            for (int i = 0; i < hd; ++i) {
                attn[static_cast<size_t>(o * hd + i)] = static_cast<float>(head_acc[i]);
            }
        }
        kernels::vecmat(attn.data(), w.wo, h, h, proj.data());
        kernels::add_inplace(x.data(), proj.data(), h);

        // gated MLP block; the gate value right after the nonlinearity is the
        // tapped quantity and the point hooks act on
        kernels::rmsnorm(xn.data(), x.data(), w.mlp_norm, h, norm_eps);
        kernels::vecmat(xn.data(), w.w_gate, h, d, gate.data());
        apply_activation(cfg.activation_kind, gate.data(), d);
        result.tapped[static_cast<size_t>(l)].assign(gate.begin(), gate.end());
        if (hook) {
            hook(l, std::span<float>(gate.data(), static_cast<size_t>(d)));
        }
        kernels::vecmat(xn.data(), w.w_up, h, d, up.data());
        kernels::elem_mul(gate.data(), gate.data(), up.data(), d);
        kernels::vecmat(gate.data(), w.w_down, d, h, proj.data());
        kernels::add_inplace(x.data(), proj.data(), h);
    }

    kernels::rmsnorm(xn.data(), x.data(), model.final_norm(), h, norm_eps);
    result.logits.resize(static_cast<size_t>(cfg.vocab_size));
    kernels::vecmat(xn.data(), model.lm_head(), h, cfg.vocab_size, result.logits.data());

    for (float l : result.logits) {
        if (!std::isfinite(l)) {
            throw RuntimeFailure("non-finite logit at position " + std::to_string(pos));
        }
    }

    state.tokens.push_back(token_id);
    state.position += 1;
    return result;
}

ActivationTrace run_trace(const Model& model, const std::vector<int>& token_ids,
                          const ActivationHook& hook) {
    ActivationTrace trace(model.config().num_layers, model.config().mlp_dim);
    DecoderState state;
    for (int id : token_ids) {
        auto step = forward_step(model, state, id, hook);
        trace.push(id, step.tapped);
    }
    return trace;
}

// ---- sampling and decoding ----

int argmax_token(std::span<const float> logits) {
    int best = 0;
    for (int i = 1; i < static_cast<int>(logits.size()); ++i) {
        if (logits[static_cast<size_t>(i)] > logits[static_cast<size_t>(best)]) {
            best = i;
        }
    }
    return best;
}

int sample_token(std::span<const float> logits, const DecodeParams& params,
                 std::mt19937_64& gen) {
    if (params.greedy) {
        return argmax_token(logits);
    }
    if (params.temperature <= 0.0) {
        throw InputError("temperature must be positive for sampled decoding");
    }
    const size_t n = logits.size();
    double max_logit = -1e300;
    for (float l : logits) {
        max_logit = std::max(max_logit, static_cast<double>(l));
    }
    std::vector<double> p(n);
    double denom = 0.0;
    for (size_t i = 0; i < n; ++i) {
        p[i] = std::exp((static_cast<double>(logits[i]) - max_logit) / params.temperature);
        denom += p[i];
    }
    const double u = uniform01(gen) * denom;
    double cum = 0.0;
    for (size_t i = 0; i < n; ++i) {
        cum += p[i];
        if (u < cum) {
            return static_cast<int>(i);
        }
    }
    return static_cast<int>(n - 1);
}

Generation decode(const Model& model, const std::vector<int>& prompt_ids,
                  const DecodeParams& params, const ActivationHook& hook) {
    const auto& cfg = model.config();
    if (static_cast<int>(prompt_ids.size()) > cfg.max_seq_len) {
        throw ContextOverflowError("prompt of " + std::to_string(prompt_ids.size()) +
                                   " tokens exceeds max_seq_len " +
                                   std::to_string(cfg.max_seq_len));
    }

    Generation out;
    out.prompt_len = static_cast<int>(prompt_ids.size());
    out.trace = ActivationTrace(cfg.num_layers, cfg.mlp_dim);

    DecoderState state;
    std::mt19937_64 gen(params.seed);

    std::vector<float> logits;
    for (int id : prompt_ids) {
        auto step = forward_step(model, state, id, hook);
        out.trace.push(id, step.tapped);
        logits = std::move(step.logits);
    }

    for (int produced = 0; produced < params.max_new_tokens; ++produced) {
        if (logits.empty() || state.position >= cfg.max_seq_len) {
            break; // empty prompt has nothing to continue; full context stops cleanly
        }
        const int next = sample_token(logits, params, gen);
        out.token_ids.push_back(next);
        if (next == Tokenizer::eos_id) {
            break;
        }
        auto step = forward_step(model, state, next, hook);
        out.trace.push(next, step.tapped);
        logits = std::move(step.logits);
    }

    // The last sampled token is normally consumed by the loop above; when the
    // run ends on EOS or the token budget, consume it here so the trace covers
    // every generated position.
    if (!out.token_ids.empty() &&
        static_cast<int>(state.tokens.size()) < out.prompt_len + static_cast<int>(out.token_ids.size()) &&
        state.position < cfg.max_seq_len) {
        auto step = forward_step(model, state, out.token_ids.back(), hook);
        out.trace.push(out.token_ids.back(), step.tapped);
    }

    out.text = model.tokenizer().decode(out.token_ids);
    return out;
}

// ---- initialization and persistence ----

TensorStore init_random(const ModelConfig& config) {
    config.validate();
    GaussianRng rng(config.seed);
    const auto h = static_cast<size_t>(config.hidden_dim);
    const auto d = static_cast<size_t>(config.mlp_dim);
    const auto v = static_cast<size_t>(config.vocab_size);
    const auto s = static_cast<size_t>(config.max_seq_len);

    TensorStore store;
    auto add_normal = [&](const std::string& name, std::vector<size_t> shape) {
        Tensor t = make_tensor(std::move(shape));
        for (auto& x : t.data) {
            x = static_cast<float>(rng.next(0.0, 0.02));
        }
        store.add(name, std::move(t));
    };
    auto add_ones = [&](const std::string& name, std::vector<size_t> shape) {
        store.add(name, make_tensor(std::move(shape), 1.0f));
    };

    // Draw order is part of the determinism contract; keep it fixed.
    add_normal("tok_embed", {v, h});
    add_normal("pos_embed", {s, h});
    for (int i = 0; i < config.num_layers; ++i) {
        add_ones(layer_name(i, "attn_norm"), {h});
        add_normal(layer_name(i, "wq"), {h, h});
        add_normal(layer_name(i, "wk"), {h, h});
        add_normal(layer_name(i, "wv"), {h, h});
        add_normal(layer_name(i, "wo"), {h, h});
        add_ones(layer_name(i, "mlp_norm"), {h});
        add_normal(layer_name(i, "w_gate"), {h, d});
        add_normal(layer_name(i, "w_up"), {h, d});
        add_normal(layer_name(i, "w_down"), {d, h});
    }
    add_ones("final_norm", {h});
    add_normal("lm_head", {h, v});
    return store;
}

void save_model(const std::filesystem::path& dir, const Model& model) {
    std::filesystem::create_directories(dir);
    model.config().save(dir / "config.json");
    model.tokenizer().save(dir / "tokenizer.json");
    model.store().save(dir);
}

Model load_model(const std::filesystem::path& dir) {
    auto config = ModelConfig::load(dir / "config.json");
    auto tokenizer = Tokenizer::load(dir / "tokenizer.json");
    auto store = TensorStore::load(dir);
    return Model(std::move(config), std::move(tokenizer), std::move(store));
}

} // namespace eelo
