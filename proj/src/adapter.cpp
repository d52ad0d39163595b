#include "eelo/adapter.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <utility>

#include <json.hpp>

#include "eelo/errors.hpp"
#include "eelo/rng.hpp"

namespace eelo {

using nlohmann::ordered_json;

namespace {

constexpr double norm_eps = 1e-5;

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double act_value(ActivationKind kind, double x) {
    if (kind == ActivationKind::silu) {
        return x * sigmoid(x);
    }
    return x > 0.0 ? x : 0.0;
}

double act_slope(ActivationKind kind, double x) {
    if (kind == ActivationKind::silu) {
        const double s = sigmoid(x);
        return s * (1.0 + x * (1.0 - s));
    }
    return x > 0.0 ? 1.0 : 0.0;
}

// y += x · W, W row-major [in][out]
void matvec_acc(const double* x, const double* w, int in, int out, double* y) {
    for (int i = 0; i < in; ++i) {
        const double xi = x[i];
        const double* row = w + static_cast<size_t>(i) * out;
        for (int j = 0; j < out; ++j) {
            y[j] += xi * row[j];
        }
    }
}

// dx += dy · W^T
void matvec_t_acc(const double* dy, const double* w, int in, int out, double* dx) {
    for (int i = 0; i < in; ++i) {
        const double* row = w + static_cast<size_t>(i) * out;
        double acc = 0.0;
        for (int j = 0; j < out; ++j) {
            acc += dy[j] * row[j];
        }
        dx[i] += acc;
    }
}

double rms_inv(const double* x, int n) {
    double ss = 0.0;
    for (int i = 0; i < n; ++i) {
        ss += x[i] * x[i];
    }
    return 1.0 / std::sqrt(ss / n + norm_eps);
}

void rms_apply(const double* x, const double* gains, double inv, int n, double* y) {
    for (int i = 0; i < n; ++i) {
        y[i] = gains[i] * x[i] * inv;
    }
}

// dx += d(rmsnorm)/dx applied to dy, using the cached inverse norm
void rms_bwd_acc(const double* x, const double* gains, double inv, const double* dy,
                 int n, double* dx) {
    double dot = 0.0;
    for (int i = 0; i < n; ++i) {
        dot += dy[i] * gains[i] * x[i];
    }
    const double k = dot * inv * inv * inv / n;
    for (int i = 0; i < n; ++i) {
        dx[i] += dy[i] * gains[i] * inv - x[i] * k;
    }
}

std::pair<int, int> projection_dims(const ModelConfig& cfg, const std::string& name) {
    const int h = cfg.hidden_dim;
    const int d = cfg.mlp_dim;
    if (name == "wq" || name == "wk" || name == "wv" || name == "wo") {
        return {h, h};
    }
    if (name == "w_gate" || name == "w_up") {
        return {h, d};
    }
    if (name == "w_down") {
        return {d, h};
    }
    throw InputError("unknown projection '" + name + "'");
}

void check_amp_shapes(const AmpModule& amp, int hidden, int mlp_dim) {
    const auto n = amp.targets.size();
    if (amp.hidden_dim != hidden) {
        throw InputError("gate module built for hidden_dim " +
                         std::to_string(amp.hidden_dim) + ", model has " +
                         std::to_string(hidden));
    }
    if (amp.w_a.size() != static_cast<size_t>(hidden) * n) {
        throw InputError("gate module W_a has " + std::to_string(amp.w_a.size()) +
                         " entries, wants " + std::to_string(hidden * n));
    }
    std::vector<int> seen(amp.targets.begin(), amp.targets.end());
    std::sort(seen.begin(), seen.end());
    for (size_t i = 0; i < seen.size(); ++i) {
        if (seen[i] < 0 || seen[i] >= mlp_dim) {
            throw InputError("gate target channel " + std::to_string(seen[i]) +
                             " outside width " + std::to_string(mlp_dim));
        }
        if (i > 0 && seen[i] == seen[i - 1]) {
            throw InputError("duplicate gate target channel " + std::to_string(seen[i]));
        }
    }
}

std::vector<double> widen(const float* p, size_t n) {
    std::vector<double> out(n);
    for (size_t i = 0; i < n; ++i) {
        out[i] = static_cast<double>(p[i]);
    }
    return out;
}

// Base weights lifted to double once per gradient call.
struct DoubleWeights {
    struct Layer {
        std::vector<double> attn_norm, wq, wk, wv, wo, mlp_norm, w_gate, w_up, w_down;
    };
    std::vector<double> tok_embed, pos_embed, final_norm, lm_head;
    std::vector<Layer> layers;
};

DoubleWeights lift(const Model& model) {
    const auto& cfg = model.config();
    const auto h = static_cast<size_t>(cfg.hidden_dim);
    const auto d = static_cast<size_t>(cfg.mlp_dim);
    DoubleWeights w;
    w.tok_embed = widen(model.tok_embed(), static_cast<size_t>(cfg.vocab_size) * h);
    w.pos_embed = widen(model.pos_embed(), static_cast<size_t>(cfg.max_seq_len) * h);
    w.final_norm = widen(model.final_norm(), h);
    w.lm_head = widen(model.lm_head(), h * static_cast<size_t>(cfg.vocab_size));
    w.layers.resize(static_cast<size_t>(cfg.num_layers));
    for (int l = 0; l < cfg.num_layers; ++l) {
        const auto& src = model.layer(l);
        auto& dst = w.layers[static_cast<size_t>(l)];
        dst.attn_norm = widen(src.attn_norm, h);
        dst.wq = widen(src.wq, h * h);
        dst.wk = widen(src.wk, h * h);
        dst.wv = widen(src.wv, h * h);
        dst.wo = widen(src.wo, h * h);
        dst.mlp_norm = widen(src.mlp_norm, h);
        dst.w_gate = widen(src.w_gate, h * d);
        dst.w_up = widen(src.w_up, h * d);
        dst.w_down = widen(src.w_down, d * h);
    }
    return w;
}

// One adapted projection: shared forward/backward plumbing. `lora` may be
// null; `z` caches x·down per position for the backward pass.
struct ProjGrads {
    std::vector<double>* down = nullptr;
    std::vector<double>* up = nullptr;
};

void project_rows(const double* x_rows, const double* w, int T, int in, int out,
                  const LoRAAdapter* lora, std::vector<double>* z_cache, double* y_rows) {
    std::fill(y_rows, y_rows + static_cast<size_t>(T) * out, 0.0);
    for (int t = 0; t < T; ++t) {
        matvec_acc(x_rows + static_cast<size_t>(t) * in, w, in, out,
                   y_rows + static_cast<size_t>(t) * out);
    }
    if (lora == nullptr) {
        return;
    }
    const int r = lora->rank;
    z_cache->assign(static_cast<size_t>(T) * r, 0.0);
    for (int t = 0; t < T; ++t) {
        double* z = z_cache->data() + static_cast<size_t>(t) * r;
        matvec_acc(x_rows + static_cast<size_t>(t) * in, lora->down.data(), in, r, z);
        double* y = y_rows + static_cast<size_t>(t) * out;
        for (int a = 0; a < r; ++a) {
            const double za = lora->scale * z[a];
            const double* up_row = lora->up.data() + static_cast<size_t>(a) * out;
            for (int j = 0; j < out; ++j) {
                y[j] += za * up_row[j];
            }
        }
    }
}

void project_rows_bwd(const double* x_rows, const double* dy_rows, const double* w, int T,
                      int in, int out, const LoRAAdapter* lora,
                      const std::vector<double>& z_cache, ProjGrads grads, double* dx_rows) {
    for (int t = 0; t < T; ++t) {
        matvec_t_acc(dy_rows + static_cast<size_t>(t) * out, w, in, out,
                     dx_rows + static_cast<size_t>(t) * in);
    }
    if (lora == nullptr) {
        return;
    }
    const int r = lora->rank;
    std::vector<double> dz(static_cast<size_t>(r));
    for (int t = 0; t < T; ++t) {
        const double* x = x_rows + static_cast<size_t>(t) * in;
        const double* dy = dy_rows + static_cast<size_t>(t) * out;
        const double* z = z_cache.data() + static_cast<size_t>(t) * r;
        for (int a = 0; a < r; ++a) {
            const double* up_row = lora->up.data() + static_cast<size_t>(a) * out;
            double* g_up = grads.up->data() + static_cast<size_t>(a) * out;
            double acc = 0.0;
            const double za = lora->scale * z[a];
            for (int j = 0; j < out; ++j) {
                acc += dy[j] * up_row[j];
                g_up[j] += za * dy[j];
            }
            dz[a] = lora->scale * acc;
        }
        double* dx = dx_rows + static_cast<size_t>(t) * in;
        for (int i = 0; i < in; ++i) {
            const double* down_row = lora->down.data() + static_cast<size_t>(i) * r;
            double* g_down = grads.down->data() + static_cast<size_t>(i) * r;
            double acc = 0.0;
            for (int a = 0; a < r; ++a) {
                acc += dz[a] * down_row[a];
                g_down[a] += x[i] * dz[a];
            }
            dx[i] += acc;
        }
    }
}

struct LayerFwd {
    std::vector<double> x_in, xn1, q, k, v, attn_cat, x_mid, xn2; // [T][h]
    std::vector<double> inv1, inv2;                               // [T]
    std::vector<double> probs;                                    // [heads][T][T]
    std::vector<double> gate_pre, act_base, act_out, up_out, prod; // [T][d]
    std::vector<double> amp_s;                                     // [T][n]
    std::map<std::string, std::vector<double>> lora_z;             // [T][rank]
};

struct SeqFwd {
    int T = 0;
    std::vector<LayerFwd> layers;
    std::vector<double> x_out, xn_f; // [T][h]
    std::vector<double> inv_f;       // [T]
    std::vector<double> probs_f;     // [T][V] softmax of the logits
    double loss = 0.0;               // mean cross-entropy over predictions
};

} // namespace

void TrainConfig::validate() const {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
        throw InputError("learning_rate must be finite and >= 0");
    }
    if (steps < 0) {
        throw InputError("steps must be >= 0");
    }
    if (batch_size < 1) {
        throw InputError("batch_size must be >= 1");
    }
}

std::vector<double> amp_forward(std::span<const double> x, std::span<const double> w_gate,
                                int mlp_dim, ActivationKind kind, const AmpModule& amp) {
    const int h = static_cast<int>(x.size());
    if (mlp_dim < 1 || w_gate.size() != static_cast<size_t>(h) * mlp_dim) {
        throw InputError("w_gate has " + std::to_string(w_gate.size()) +
                         " entries, wants " + std::to_string(h * mlp_dim));
    }
    check_amp_shapes(amp, h, mlp_dim);

    std::vector<double> out(static_cast<size_t>(mlp_dim), 0.0);
    matvec_acc(x.data(), w_gate.data(), h, mlp_dim, out.data());
    for (auto& v : out) {
        v = act_value(kind, v);
    }
    const int n = static_cast<int>(amp.targets.size());
    if (n == 0) {
        return out;
    }
    std::vector<double> s(static_cast<size_t>(n), 0.0);
    matvec_acc(x.data(), amp.w_a.data(), h, n, s.data());
    for (int a = 0; a < n; ++a) {
        out[static_cast<size_t>(amp.targets[static_cast<size_t>(a)])] *=
            sigmoid(s[static_cast<size_t>(a)]) * amp.beta;
    }
    return out;
}

AmpGradients amp_gradients(std::span<const double> x, std::span<const double> w_gate,
                           int mlp_dim, ActivationKind kind, const AmpModule& amp,
                           std::span<const double> upstream) {
    const int h = static_cast<int>(x.size());
    if (upstream.size() != static_cast<size_t>(mlp_dim)) {
        throw InputError("upstream gradient has " + std::to_string(upstream.size()) +
                         " entries, wants " + std::to_string(mlp_dim));
    }
    check_amp_shapes(amp, h, mlp_dim);
    if (w_gate.size() != static_cast<size_t>(h) * mlp_dim) {
        throw InputError("w_gate shape mismatch");
    }

    const int n = static_cast<int>(amp.targets.size());
    AmpGradients g;
    g.w_a.assign(static_cast<size_t>(h) * n, 0.0);
    if (n == 0) {
        return g;
    }

    std::vector<double> pre(static_cast<size_t>(mlp_dim), 0.0);
    matvec_acc(x.data(), w_gate.data(), h, mlp_dim, pre.data());
    std::vector<double> s(static_cast<size_t>(n), 0.0);
    matvec_acc(x.data(), amp.w_a.data(), h, n, s.data());

    for (int a = 0; a < n; ++a) {
        const int j = amp.targets[static_cast<size_t>(a)];
        const double base = act_value(kind, pre[static_cast<size_t>(j)]);
        const double sg = sigmoid(s[static_cast<size_t>(a)]);
        const double u = upstream[static_cast<size_t>(j)];
        g.beta += u * base * sg;
        const double ds = u * base * amp.beta * sg * (1.0 - sg);
        for (int i = 0; i < h; ++i) {
            g.w_a[static_cast<size_t>(i) * n + a] += x[static_cast<size_t>(i)] * ds;
        }
    }
    return g;
}

std::vector<double> lora_forward(std::span<const double> x, std::span<const double> host,
                                 int in_dim, int out_dim, const LoRAAdapter& adapter) {
    if (x.size() != static_cast<size_t>(in_dim) ||
        host.size() != static_cast<size_t>(in_dim) * out_dim) {
        throw InputError("lora_forward shape mismatch");
    }
    const int r = adapter.rank;
    if (r < 1 || adapter.down.size() != static_cast<size_t>(in_dim) * r ||
        adapter.up.size() != static_cast<size_t>(r) * out_dim) {
        throw InputError("adapter factors do not match rank " + std::to_string(r));
    }
    std::vector<double> y(static_cast<size_t>(out_dim), 0.0);
    matvec_acc(x.data(), host.data(), in_dim, out_dim, y.data());
    std::vector<double> z(static_cast<size_t>(r), 0.0);
    matvec_acc(x.data(), adapter.down.data(), in_dim, r, z.data());
    for (int a = 0; a < r; ++a) {
        const double za = adapter.scale * z[static_cast<size_t>(a)];
        const double* up_row = adapter.up.data() + static_cast<size_t>(a) * out_dim;
        for (int j = 0; j < out_dim; ++j) {
            y[static_cast<size_t>(j)] += za * up_row[j];
        }
    }
    return y;
}

void lora_merge(TensorStore& store, const std::string& tensor_name,
                const LoRAAdapter& adapter) {
    Tensor& t = store.get(tensor_name);
    if (t.shape.size() != 2) {
        throw InputError("'" + tensor_name + "' is not a matrix");
    }
    const int in = static_cast<int>(t.shape[0]);
    const int out = static_cast<int>(t.shape[1]);
    const int r = adapter.rank;
    if (adapter.down.size() != static_cast<size_t>(in) * r ||
        adapter.up.size() != static_cast<size_t>(r) * out) {
        throw InputError("adapter does not fit '" + tensor_name + "'");
    }
    for (int i = 0; i < in; ++i) {
        for (int j = 0; j < out; ++j) {
            double delta = 0.0;
            for (int a = 0; a < r; ++a) {
                delta += adapter.down[static_cast<size_t>(i) * r + a] *
                         adapter.up[static_cast<size_t>(a) * out + j];
            }
            auto& cell = t.data[static_cast<size_t>(i) * out + j];
            cell = static_cast<float>(static_cast<double>(cell) + adapter.scale * delta);
        }
    }
}

void validate_plan(const ModelConfig& config, const AdapterPlan& plan) {
    std::vector<std::pair<int, std::string>> seen;
    for (const auto& spec : plan.lora) {
        if (spec.layer < 0 || spec.layer >= config.num_layers) {
            throw InputError("lora layer " + std::to_string(spec.layer) + " out of range");
        }
        const auto [in, out] = projection_dims(config, spec.projection);
        if (spec.rank < 1 || spec.rank > std::min(in, out)) {
            throw InputError("lora rank " + std::to_string(spec.rank) +
                             " invalid for a " + std::to_string(in) + "x" +
                             std::to_string(out) + " projection");
        }
        if (!std::isfinite(spec.scale)) {
            throw InputError("lora scale must be finite");
        }
        const auto key = std::make_pair(spec.layer, spec.projection);
        if (std::find(seen.begin(), seen.end(), key) != seen.end()) {
            throw InputError("duplicate lora entry for layer " +
                             std::to_string(spec.layer) + " " + spec.projection);
        }
        seen.push_back(key);
    }
    std::vector<int> targets = plan.amp_targets;
    std::sort(targets.begin(), targets.end());
    for (size_t i = 0; i < targets.size(); ++i) {
        if (targets[i] < 0 || targets[i] >= config.mlp_dim) {
            throw InputError("gate target channel " + std::to_string(targets[i]) +
                             " outside width " + std::to_string(config.mlp_dim));
        }
        if (i > 0 && targets[i] == targets[i - 1]) {
            throw InputError("duplicate gate target channel " + std::to_string(targets[i]));
        }
    }
}

ParamBudget param_budget(const ModelConfig& config, const AdapterPlan& plan) {
    validate_plan(config, plan);
    const long long h = config.hidden_dim;
    const long long d = config.mlp_dim;
    const long long v = config.vocab_size;
    const long long s = config.max_seq_len;
    const long long layers = config.num_layers;

    ParamBudget b;
    for (const auto& spec : plan.lora) {
        const auto [in, out] = projection_dims(config, spec.projection);
        b.trainable += static_cast<long long>(in + out) * spec.rank;
    }
    if (!plan.amp_targets.empty()) {
        b.trainable += h * static_cast<long long>(plan.amp_targets.size()) + 1;
    }
    // embeddings + per-layer (two norms, four attention mats, gate/up/down) +
    // final norm + unembedding
    b.total = v * h + s * h + layers * (2 * h + 4 * h * h + 3 * h * d) + h + h * v;
    b.fraction = b.total > 0 ? static_cast<double>(b.trainable) / static_cast<double>(b.total)
                             : 0.0;
    return b;
}

TrainedAdapters init_adapters(const Model& model, const AdapterPlan& plan, uint64_t seed) {
    const auto& cfg = model.config();
    validate_plan(cfg, plan);

    TrainedAdapters out;
    GaussianRng rng(seed);
    for (const auto& spec : plan.lora) {
        const auto [in, out_dim] = projection_dims(cfg, spec.projection);
        LoRAAdapter a;
        a.layer = spec.layer;
        a.projection = spec.projection;
        a.rank = spec.rank;
        a.scale = spec.scale;
        a.down.resize(static_cast<size_t>(in) * spec.rank);
        for (auto& vdown : a.down) {
            vdown = rng.next(0.0, 0.02);
        }
        a.up.assign(static_cast<size_t>(spec.rank) * out_dim, 0.0);
        out.lora.push_back(std::move(a));
    }
    if (!plan.amp_targets.empty()) {
        AmpModule amp;
        amp.targets = plan.amp_targets;
        amp.hidden_dim = cfg.hidden_dim;
        amp.w_a.assign(static_cast<size_t>(cfg.hidden_dim) * plan.amp_targets.size(), 0.0);
        amp.beta = 2.0;
        out.amp = std::move(amp);
    }
    return out;
}

AdapterGradients adapter_loss_gradients(const Model& model,
                                        const std::vector<std::string>& corpus,
                                        const std::vector<LoRAAdapter>& lora,
                                        const std::optional<AmpModule>& amp) {
    const auto& cfg = model.config();
    const int h = cfg.hidden_dim;
    const int d = cfg.mlp_dim;
    const int V = cfg.vocab_size;
    const int L = cfg.num_layers;
    const int heads = cfg.num_heads;
    const int hd = cfg.head_dim();
    const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));

    if (corpus.empty()) {
        throw InputError("empty training corpus");
    }
    for (const auto& a : lora) {
        if (a.layer < 0 || a.layer >= L) {
            throw InputError("lora layer " + std::to_string(a.layer) + " out of range");
        }
        const auto [in, out] = projection_dims(cfg, a.projection);
        if (a.rank < 1 || a.down.size() != static_cast<size_t>(in) * a.rank ||
            a.up.size() != static_cast<size_t>(a.rank) * out) {
            throw InputError("lora factors for layer " + std::to_string(a.layer) + " " +
                             a.projection + " do not match their projection");
        }
    }
    if (amp) {
        check_amp_shapes(*amp, h, d);
    }
    const int n_amp = amp ? static_cast<int>(amp->targets.size()) : 0;

    // tokenized sequences: leading <bos>, trailing <eos>, clipped to the window
    std::vector<std::vector<int>> seqs;
    for (size_t i = 0; i < corpus.size(); ++i) {
        std::vector<int> ids{Tokenizer::bos_id};
        for (int id : model.tokenizer().encode(corpus[i])) {
            ids.push_back(id);
        }
        ids.push_back(Tokenizer::eos_id);
        if (static_cast<int>(ids.size()) > cfg.max_seq_len) {
            ids.resize(static_cast<size_t>(cfg.max_seq_len));
        }
        if (ids.size() < 2) {
            throw InputError("corpus entry " + std::to_string(i) +
                             " is too short to predict from");
        }
        seqs.push_back(std::move(ids));
    }

    const DoubleWeights w = lift(model);

    // gradient containers mirror the adapter containers
    AdapterGradients grads;
    grads.lora = lora;
    for (auto& g : grads.lora) {
        std::fill(g.down.begin(), g.down.end(), 0.0);
        std::fill(g.up.begin(), g.up.end(), 0.0);
    }
    if (amp) {
        AmpModule g = *amp;
        std::fill(g.w_a.begin(), g.w_a.end(), 0.0);
        g.beta = 0.0;
        grads.amp = std::move(g);
    }

    // (layer, projection) -> adapter index
    std::map<std::pair<int, std::string>, size_t> lora_at;
    for (size_t i = 0; i < lora.size(); ++i) {
        lora_at[{lora[i].layer, lora[i].projection}] = i;
    }
    auto lora_of = [&](int layer, const char* proj) -> const LoRAAdapter* {
        auto it = lora_at.find({layer, std::string(proj)});
        return it == lora_at.end() ? nullptr : &lora[it->second];
    };
    auto grads_of = [&](int layer, const char* proj) -> ProjGrads {
        auto it = lora_at.find({layer, std::string(proj)});
        if (it == lora_at.end()) {
            return {};
        }
        return {&grads.lora[it->second].down, &grads.lora[it->second].up};
    };

    const double seq_weight = 1.0 / static_cast<double>(seqs.size());
    double total_loss = 0.0;

    for (const auto& ids : seqs) {
        const int T = static_cast<int>(ids.size());
        const auto th = static_cast<size_t>(T) * h;
        const auto td = static_cast<size_t>(T) * d;

        SeqFwd f;
        f.T = T;
        f.layers.resize(static_cast<size_t>(L));
        f.x_out.assign(th, 0.0);
        f.xn_f.assign(th, 0.0);
        f.inv_f.assign(static_cast<size_t>(T), 0.0);
        f.probs_f.assign(static_cast<size_t>(T) * V, 0.0);

        // ---- forward ----
        std::vector<double> x(th);
        for (int t = 0; t < T; ++t) {
            const double* te = w.tok_embed.data() + static_cast<size_t>(ids[t]) * h;
            const double* pe = w.pos_embed.data() + static_cast<size_t>(t) * h;
            for (int i = 0; i < h; ++i) {
                x[static_cast<size_t>(t) * h + i] = te[i] + pe[i];
            }
        }

        for (int l = 0; l < L; ++l) {
            auto& lf = f.layers[static_cast<size_t>(l)];
            const auto& lw = w.layers[static_cast<size_t>(l)];
            lf.x_in = x;
            lf.inv1.resize(static_cast<size_t>(T));
            lf.xn1.assign(th, 0.0);
            for (int t = 0; t < T; ++t) {
                const double* xt = lf.x_in.data() + static_cast<size_t>(t) * h;
                lf.inv1[static_cast<size_t>(t)] = rms_inv(xt, h);
                rms_apply(xt, lw.attn_norm.data(), lf.inv1[static_cast<size_t>(t)], h,
                          lf.xn1.data() + static_cast<size_t>(t) * h);
            }

            lf.q.assign(th, 0.0);
            lf.k.assign(th, 0.0);
            lf.v.assign(th, 0.0);
            project_rows(lf.xn1.data(), lw.wq.data(), T, h, h, lora_of(l, "wq"),
                         &lf.lora_z["wq"], lf.q.data());
            project_rows(lf.xn1.data(), lw.wk.data(), T, h, h, lora_of(l, "wk"),
                         &lf.lora_z["wk"], lf.k.data());
            project_rows(lf.xn1.data(), lw.wv.data(), T, h, h, lora_of(l, "wv"),
                         &lf.lora_z["wv"], lf.v.data());

            lf.probs.assign(static_cast<size_t>(heads) * T * T, 0.0);
            lf.attn_cat.assign(th, 0.0);
            std::vector<double> row(static_cast<size_t>(T));
            for (int o = 0; o < heads; ++o) {
                for (int i = 0; i < T; ++i) {
                    const double* qh = lf.q.data() + static_cast<size_t>(i) * h + o * hd;
                    double max_s = -1e300;
                    for (int j = 0; j <= i; ++j) {
                        const double* kh = lf.k.data() + static_cast<size_t>(j) * h + o * hd;
                        double s = 0.0;
                        for (int c = 0; c < hd; ++c) {
                            s += qh[c] * kh[c];
                        }
                        row[static_cast<size_t>(j)] = s * inv_sqrt_hd;
                        max_s = std::max(max_s, row[static_cast<size_t>(j)]);
                    }
                    double denom = 0.0;
                    for (int j = 0; j <= i; ++j) {
                        row[static_cast<size_t>(j)] = std::exp(row[static_cast<size_t>(j)] - max_s);
                        denom += row[static_cast<size_t>(j)];
                    }
                    double* p = lf.probs.data() +
                                (static_cast<size_t>(o) * T + static_cast<size_t>(i)) * T;
                    double* cat = lf.attn_cat.data() + static_cast<size_t>(i) * h + o * hd;
                    for (int j = 0; j <= i; ++j) {
                        p[j] = row[static_cast<size_t>(j)] / denom;
                        const double* vh = lf.v.data() + static_cast<size_t>(j) * h + o * hd;
                        for (int c = 0; c < hd; ++c) {
                            cat[c] += p[j] * vh[c];
                        }
                    }
                }
            }

            lf.x_mid.assign(th, 0.0);
            project_rows(lf.attn_cat.data(), lw.wo.data(), T, h, h, lora_of(l, "wo"),
                         &lf.lora_z["wo"], lf.x_mid.data());
            for (size_t i = 0; i < th; ++i) {
                lf.x_mid[i] += lf.x_in[i];
            }

            lf.inv2.resize(static_cast<size_t>(T));
            lf.xn2.assign(th, 0.0);
            for (int t = 0; t < T; ++t) {
                const double* xt = lf.x_mid.data() + static_cast<size_t>(t) * h;
                lf.inv2[static_cast<size_t>(t)] = rms_inv(xt, h);
                rms_apply(xt, lw.mlp_norm.data(), lf.inv2[static_cast<size_t>(t)], h,
                          lf.xn2.data() + static_cast<size_t>(t) * h);
            }

            lf.gate_pre.assign(td, 0.0);
            lf.up_out.assign(td, 0.0);
            project_rows(lf.xn2.data(), lw.w_gate.data(), T, h, d, lora_of(l, "w_gate"),
                         &lf.lora_z["w_gate"], lf.gate_pre.data());
            project_rows(lf.xn2.data(), lw.w_up.data(), T, h, d, lora_of(l, "w_up"),
                         &lf.lora_z["w_up"], lf.up_out.data());

            lf.act_base.resize(td);
            for (size_t i = 0; i < td; ++i) {
                lf.act_base[i] = act_value(cfg.activation_kind, lf.gate_pre[i]);
            }
            lf.act_out = lf.act_base;
            const bool gated = amp && l == L - 1;
            if (gated) {
                lf.amp_s.assign(static_cast<size_t>(T) * n_amp, 0.0);
                for (int t = 0; t < T; ++t) {
                    double* s = lf.amp_s.data() + static_cast<size_t>(t) * n_amp;
                    matvec_acc(lf.xn2.data() + static_cast<size_t>(t) * h, amp->w_a.data(),
                               h, n_amp, s);
                    for (int a = 0; a < n_amp; ++a) {
                        const auto j = static_cast<size_t>(amp->targets[static_cast<size_t>(a)]);
                        lf.act_out[static_cast<size_t>(t) * d + j] *=
                            sigmoid(s[a]) * amp->beta;
                    }
                }
            }

            lf.prod.resize(td);
            for (size_t i = 0; i < td; ++i) {
                lf.prod[i] = lf.act_out[i] * lf.up_out[i];
            }

            x.assign(th, 0.0);
            project_rows(lf.prod.data(), lw.w_down.data(), T, d, h, lora_of(l, "w_down"),
                         &lf.lora_z["w_down"], x.data());
            for (size_t i = 0; i < th; ++i) {
                x[i] += lf.x_mid[i];
            }
        }

        f.x_out = x;
        for (int t = 0; t < T; ++t) {
            const double* xt = f.x_out.data() + static_cast<size_t>(t) * h;
            f.inv_f[static_cast<size_t>(t)] = rms_inv(xt, h);
            rms_apply(xt, w.final_norm.data(), f.inv_f[static_cast<size_t>(t)], h,
                      f.xn_f.data() + static_cast<size_t>(t) * h);
        }

        const int preds = T - 1;
        double seq_loss = 0.0;
        std::vector<double> logits(static_cast<size_t>(V));
        for (int t = 0; t < T; ++t) {
            std::fill(logits.begin(), logits.end(), 0.0);
            matvec_acc(f.xn_f.data() + static_cast<size_t>(t) * h, w.lm_head.data(), h, V,
                       logits.data());
            double max_l = logits[0];
            for (double lv : logits) {
                max_l = std::max(max_l, lv);
            }
            double denom = 0.0;
            for (int vtok = 0; vtok < V; ++vtok) {
                denom += std::exp(logits[static_cast<size_t>(vtok)] - max_l);
            }
            double* p = f.probs_f.data() + static_cast<size_t>(t) * V;
            for (int vtok = 0; vtok < V; ++vtok) {
                p[vtok] = std::exp(logits[static_cast<size_t>(vtok)] - max_l) / denom;
            }
            if (t < preds) {
                const double lse = max_l + std::log(denom);
                seq_loss += lse - logits[static_cast<size_t>(ids[static_cast<size_t>(t) + 1])];
            }
        }
        seq_loss /= preds;
        total_loss += seq_loss * seq_weight;

        // ---- backward ----
        const double dscale = seq_weight / preds;
        std::vector<double> dx(th, 0.0);
        {
            std::vector<double> dxn(th, 0.0);
            std::vector<double> dlogits(static_cast<size_t>(V));
            for (int t = 0; t < preds; ++t) {
                const double* p = f.probs_f.data() + static_cast<size_t>(t) * V;
                for (int vtok = 0; vtok < V; ++vtok) {
                    dlogits[static_cast<size_t>(vtok)] = p[vtok] * dscale;
                }
                dlogits[static_cast<size_t>(ids[static_cast<size_t>(t) + 1])] -= dscale;
                matvec_t_acc(dlogits.data(), w.lm_head.data(), h, V,
                             dxn.data() + static_cast<size_t>(t) * h);
            }
            for (int t = 0; t < T; ++t) {
                rms_bwd_acc(f.x_out.data() + static_cast<size_t>(t) * h,
                            w.final_norm.data(), f.inv_f[static_cast<size_t>(t)],
                            dxn.data() + static_cast<size_t>(t) * h, h,
                            dx.data() + static_cast<size_t>(t) * h);
            }
        }

        for (int l = L - 1; l >= 0; --l) {
            auto& lf = f.layers[static_cast<size_t>(l)];
            const auto& lw = w.layers[static_cast<size_t>(l)];
            const bool gated = amp && l == L - 1;

            // x_out = x_mid + prod·W_down
            std::vector<double> d_prod(td, 0.0);
            project_rows_bwd(lf.prod.data(), dx.data(), lw.w_down.data(), T, d, h,
                             lora_of(l, "w_down"), lf.lora_z["w_down"],
                             grads_of(l, "w_down"), d_prod.data());
            std::vector<double>& d_x_mid = dx; // residual carries straight through

            std::vector<double> d_act_out(td), d_up_out(td);
            for (size_t i = 0; i < td; ++i) {
                d_act_out[i] = d_prod[i] * lf.up_out[i];
                d_up_out[i] = d_prod[i] * lf.act_out[i];
            }

            std::vector<double> d_xn2(th, 0.0);
            project_rows_bwd(lf.xn2.data(), d_up_out.data(), lw.w_up.data(), T, h, d,
                             lora_of(l, "w_up"), lf.lora_z["w_up"], grads_of(l, "w_up"),
                             d_xn2.data());

            std::vector<double>& d_base = d_act_out; // reused in place below
            if (gated) {
                auto& g_amp = *grads.amp;
                for (int t = 0; t < T; ++t) {
                    const double* s = lf.amp_s.data() + static_cast<size_t>(t) * n_amp;
                    const double* xn2t = lf.xn2.data() + static_cast<size_t>(t) * h;
                    double* d_xn2t = d_xn2.data() + static_cast<size_t>(t) * h;
                    for (int a = 0; a < n_amp; ++a) {
                        const auto j = static_cast<size_t>(amp->targets[static_cast<size_t>(a)]);
                        const double sg = sigmoid(s[a]);
                        const double base = lf.act_base[static_cast<size_t>(t) * d + j];
                        const double dout = d_act_out[static_cast<size_t>(t) * d + j];
                        g_amp.beta += dout * base * sg;
                        const double ds = dout * base * amp->beta * sg * (1.0 - sg);
                        for (int i = 0; i < h; ++i) {
                            g_amp.w_a[static_cast<size_t>(i) * n_amp + a] += xn2t[i] * ds;
                            d_xn2t[i] += amp->w_a[static_cast<size_t>(i) * n_amp + a] * ds;
                        }
                        d_base[static_cast<size_t>(t) * d + j] = dout * sg * amp->beta;
                    }
                }
            }

            std::vector<double> d_gate_pre(td);
            for (size_t i = 0; i < td; ++i) {
                d_gate_pre[i] = d_base[i] * act_slope(cfg.activation_kind, lf.gate_pre[i]);
            }
            project_rows_bwd(lf.xn2.data(), d_gate_pre.data(), lw.w_gate.data(), T, h, d,
                             lora_of(l, "w_gate"), lf.lora_z["w_gate"],
                             grads_of(l, "w_gate"), d_xn2.data());

            for (int t = 0; t < T; ++t) {
                rms_bwd_acc(lf.x_mid.data() + static_cast<size_t>(t) * h,
                            lw.mlp_norm.data(), lf.inv2[static_cast<size_t>(t)],
                            d_xn2.data() + static_cast<size_t>(t) * h, h,
                            d_x_mid.data() + static_cast<size_t>(t) * h);
            }

            // x_mid = x_in + attn_cat·W_o
            std::vector<double> d_attn(th, 0.0);
            project_rows_bwd(lf.attn_cat.data(), d_x_mid.data(), lw.wo.data(), T, h, h,
                             lora_of(l, "wo"), lf.lora_z["wo"], grads_of(l, "wo"),
                             d_attn.data());
            std::vector<double>& d_x_in = d_x_mid; // residual again

            std::vector<double> dq(th, 0.0), dk(th, 0.0), dv(th, 0.0);
            std::vector<double> dp(static_cast<size_t>(T));
            for (int o = 0; o < heads; ++o) {
                for (int i = 0; i < T; ++i) {
                    const double* da = d_attn.data() + static_cast<size_t>(i) * h + o * hd;
                    const double* p = lf.probs.data() +
                                      (static_cast<size_t>(o) * T + static_cast<size_t>(i)) * T;
                    double pdp = 0.0;
                    for (int j = 0; j <= i; ++j) {
                        const double* vh = lf.v.data() + static_cast<size_t>(j) * h + o * hd;
                        double acc = 0.0;
                        for (int c = 0; c < hd; ++c) {
                            acc += da[c] * vh[c];
                        }
                        dp[static_cast<size_t>(j)] = acc;
                        pdp += acc * p[j];
                        double* dvh = dv.data() + static_cast<size_t>(j) * h + o * hd;
                        for (int c = 0; c < hd; ++c) {
                            dvh[c] += p[j] * da[c];
                        }
                    }
                    const double* qh = lf.q.data() + static_cast<size_t>(i) * h + o * hd;
                    double* dqh = dq.data() + static_cast<size_t>(i) * h + o * hd;
                    for (int j = 0; j <= i; ++j) {
                        const double dsc =
                            p[j] * (dp[static_cast<size_t>(j)] - pdp) * inv_sqrt_hd;
                        const double* kh = lf.k.data() + static_cast<size_t>(j) * h + o * hd;
                        double* dkh = dk.data() + static_cast<size_t>(j) * h + o * hd;
                        for (int c = 0; c < hd; ++c) {
                            dqh[c] += dsc * kh[c];
                            dkh[c] += dsc * qh[c];
                        }
                    }
                }
            }

            std::vector<double> d_xn1(th, 0.0);
            project_rows_bwd(lf.xn1.data(), dq.data(), lw.wq.data(), T, h, h,
                             lora_of(l, "wq"), lf.lora_z["wq"], grads_of(l, "wq"),
                             d_xn1.data());
            project_rows_bwd(lf.xn1.data(), dk.data(), lw.wk.data(), T, h, h,
                             lora_of(l, "wk"), lf.lora_z["wk"], grads_of(l, "wk"),
                             d_xn1.data());
            project_rows_bwd(lf.xn1.data(), dv.data(), lw.wv.data(), T, h, h,
                             lora_of(l, "wv"), lf.lora_z["wv"], grads_of(l, "wv"),
                             d_xn1.data());

            for (int t = 0; t < T; ++t) {
                rms_bwd_acc(lf.x_in.data() + static_cast<size_t>(t) * h,
                            lw.attn_norm.data(), lf.inv1[static_cast<size_t>(t)],
                            d_xn1.data() + static_cast<size_t>(t) * h, h,
                            d_x_in.data() + static_cast<size_t>(t) * h);
            }
            // d_x_in aliases dx, which now carries the gradient for layer l-1
        }
    }

    grads.loss = total_loss;
    return grads;
}

double adapter_loss(const Model& model, const std::vector<std::string>& corpus,
                    const std::vector<LoRAAdapter>& lora,
                    const std::optional<AmpModule>& amp) {
    return adapter_loss_gradients(model, corpus, lora, amp).loss;
}

TrainedAdapters train_adapters(const Model& model, const std::vector<std::string>& corpus,
                               const AdapterPlan& plan, const TrainConfig& train) {
    train.validate();
    if (corpus.empty()) {
        throw InputError("empty training corpus");
    }

    TrainedAdapters cur = init_adapters(model, plan, train.seed);
    const auto n_seq = corpus.size();

    for (int step = 0; step < train.steps; ++step) {
        std::vector<std::string> batch;
        for (int j = 0; j < train.batch_size; ++j) {
            batch.push_back(
                corpus[(static_cast<size_t>(step) * train.batch_size + j) % n_seq]);
        }
        auto g = adapter_loss_gradients(model, batch, cur.lora, cur.amp);
        if (!std::isfinite(g.loss)) {
            throw RuntimeFailure("training diverged at step " + std::to_string(step));
        }
        cur.losses.push_back(g.loss);

        const double lr = train.learning_rate;
        for (size_t i = 0; i < cur.lora.size(); ++i) {
            auto& a = cur.lora[i];
            const auto& ga = g.lora[i];
            for (size_t k = 0; k < a.down.size(); ++k) {
                a.down[k] -= lr * ga.down[k];
            }
            for (size_t k = 0; k < a.up.size(); ++k) {
                a.up[k] -= lr * ga.up[k];
            }
        }
        if (cur.amp) {
            for (size_t k = 0; k < cur.amp->w_a.size(); ++k) {
                cur.amp->w_a[k] -= lr * g.amp->w_a[k];
            }
            cur.amp->beta -= lr * g.amp->beta;
        }
    }
    return cur;
}

// ---- serialization ----

namespace {

Tensor narrow(const std::vector<double>& v, std::vector<size_t> shape) {
    Tensor t = make_tensor(std::move(shape));
    for (size_t i = 0; i < v.size(); ++i) {
        t.data[i] = static_cast<float>(v[i]);
    }
    return t;
}

std::vector<double> widen_tensor(const Tensor& t) {
    std::vector<double> out(t.data.size());
    for (size_t i = 0; i < out.size(); ++i) {
        out[i] = static_cast<double>(t.data[i]);
    }
    return out;
}

} // namespace

void save_adapters(const std::filesystem::path& dir, const TrainedAdapters& trained) {
    std::filesystem::create_directories(dir);

    ordered_json meta;
    meta["lora"] = ordered_json::array();
    TensorStore store;
    for (const auto& a : trained.lora) {
        ordered_json ja;
        ja["layer"] = a.layer;
        ja["projection"] = a.projection;
        ja["rank"] = a.rank;
        ja["scale"] = a.scale;
        meta["lora"].push_back(ja);

        const auto in = a.down.size() / static_cast<size_t>(a.rank);
        const auto out = a.up.size() / static_cast<size_t>(a.rank);
        const std::string stem =
            "lora." + std::to_string(a.layer) + "." + a.projection;
        store.add(stem + ".down", narrow(a.down, {in, static_cast<size_t>(a.rank)}));
        store.add(stem + ".up", narrow(a.up, {static_cast<size_t>(a.rank), out}));
    }
    if (trained.amp) {
        const auto& amp = *trained.amp;
        ordered_json jm;
        jm["targets"] = amp.targets;
        jm["hidden_dim"] = amp.hidden_dim;
        meta["amp"] = jm;
        store.add("amp.w_a", narrow(amp.w_a, {static_cast<size_t>(amp.hidden_dim),
                                              amp.targets.size()}));
        Tensor beta = make_tensor({1});
        beta.data[0] = static_cast<float>(amp.beta);
        store.add("amp.beta", std::move(beta));
    } else {
        meta["amp"] = nullptr;
    }

    std::ofstream out(dir / "adapters.json", std::ios::trunc);
    if (!out) {
        throw RuntimeFailure("cannot write '" + (dir / "adapters.json").string() + "'");
    }
    out << meta.dump(2) << "\n";
    store.save(dir);
}

TrainedAdapters load_adapters(const std::filesystem::path& dir) {
    std::ifstream in(dir / "adapters.json");
    if (!in) {
        throw InputError("cannot open '" + (dir / "adapters.json").string() + "'");
    }
    ordered_json meta;
    try {
        meta = ordered_json::parse(in);
    } catch (const nlohmann::json::exception& ex) {
        throw InputError("bad adapters.json: " + std::string(ex.what()));
    }

    TensorStore store = TensorStore::load(dir);
    TrainedAdapters out;
    try {
        for (const auto& ja : meta.at("lora")) {
            LoRAAdapter a;
            a.layer = ja.at("layer").get<int>();
            a.projection = ja.at("projection").get<std::string>();
            a.rank = ja.at("rank").get<int>();
            a.scale = ja.at("scale").get<double>();
            const std::string stem =
                "lora." + std::to_string(a.layer) + "." + a.projection;
            a.down = widen_tensor(store.get(stem + ".down"));
            a.up = widen_tensor(store.get(stem + ".up"));
            out.lora.push_back(std::move(a));
        }
        if (!meta.at("amp").is_null()) {
            AmpModule amp;
            amp.targets = meta.at("amp").at("targets").get<std::vector<int>>();
            amp.hidden_dim = meta.at("amp").at("hidden_dim").get<int>();
            amp.w_a = widen_tensor(store.get("amp.w_a"));
            amp.beta = static_cast<double>(store.get("amp.beta").data.at(0));
            out.amp = std::move(amp);
        }
    } catch (const nlohmann::json::exception& ex) {
        throw InputError("bad adapters.json: " + std::string(ex.what()));
    }
    return out;
}

void save_loss_csv(const std::filesystem::path& path, const std::vector<double>& losses) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw RuntimeFailure("cannot write '" + path.string() + "'");
    }
    out << "step,loss\n" << std::setprecision(17);
    for (size_t i = 0; i < losses.size(); ++i) {
        out << i << "," << losses[i] << "\n";
    }
}

} // namespace eelo
