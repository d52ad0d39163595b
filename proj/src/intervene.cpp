#include "eelo/intervene.hpp"

#include <algorithm>
#include <fstream>

#include <json.hpp>

#include "eelo/errors.hpp"

namespace eelo {

using nlohmann::ordered_json;

void InterventionConfig::validate() const {
    if (k_digits < 1) {
        throw InputError("k_digits must be >= 1");
    }
    if (cooldown_sentences < 0) {
        throw InputError("cooldown_sentences must be >= 0");
    }
    if (trigger_token < 0) {
        throw InputError("trigger_token must be a valid token id");
    }
    if (const auto* c = std::get_if<ConstantSchedule>(&schedule)) {
        if (!(c->gamma > 0.0)) {
            throw InputError("constant schedule needs gamma > 0");
        }
    } else {
        const auto& a = std::get<AnalyticSchedule>(schedule);
        if (a.alpha < 0.0) {
            throw InputError("analytic schedule needs alpha >= 0");
        }
        if (a.coeffs.c <= -1.0) {
            throw InputError("analytic schedule needs c > -1 so f(t) is defined for t >= 1");
        }
    }
}

int digit_count(const std::string& sentence) {
    int n = 0;
    for (char c : sentence) {
        if (c >= '0' && c <= '9') {
            ++n;
        }
    }
    return n;
}

bool should_force(const TriggerState& state, const std::string& last_sentence,
                  const InterventionConfig& config) {
    return config.forcing_enabled && state.cooldown_remaining == 0 &&
           digit_count(last_sentence) >= config.k_digits;
}

double amplification_multiplier(const InterventionConfig& config, int t) {
    if (!config.amplification_enabled) {
        return 1.0;
    }
    if (const auto* c = std::get_if<ConstantSchedule>(&config.schedule)) {
        return c->gamma; // unconditional, t plays no role
    }
    const auto& a = std::get<AnalyticSchedule>(config.schedule);
    if (t < 1) {
        return 1.0; // no active trigger, or the trigger token itself
    }
    const double m = 1.0 + a.alpha * eval_f(a.coeffs, static_cast<double>(t));
    return std::max(m, 1.0);
}

ActivationHook make_hook(const InterventionConfig& config, const TriggerState& state) {
    if (config.neuron_set.neurons.empty()) {
        return [](int, std::span<float>) {}; // identity
    }
    // bucket the set by layer once; the closure then works per forward layer
    int max_layer = 0;
    for (NeuronId n : config.neuron_set.neurons) {
        max_layer = std::max(max_layer, n.layer);
    }
    std::vector<std::vector<int>> by_layer(static_cast<size_t>(max_layer) + 1);
    for (NeuronId n : config.neuron_set.neurons) {
        by_layer[static_cast<size_t>(n.layer)].push_back(n.index);
    }
    return [&config, &state, by_layer](int layer, std::span<float> acts) {
        if (layer >= static_cast<int>(by_layer.size())) {
            return;
        }
        const double m = amplification_multiplier(config, state.t);
        if (m == 1.0) {
            return;
        }
        const auto mf = static_cast<float>(m);
        for (int idx : by_layer[static_cast<size_t>(layer)]) {
            if (idx < 0 || idx >= static_cast<int>(acts.size())) {
                throw InputError("neuron index " + std::to_string(idx) +
                                 " outside the activation width");
            }
            acts[static_cast<size_t>(idx)] *= mf;
        }
    };
}

// ---- sentence segmentation ----

bool SentenceSegmenter::is_boundary_char(char c) {
    return c == '.' || c == '!' || c == '?' || c == '\n';
}

std::optional<std::string> SentenceSegmenter::push_word(const std::string& word) {
    if (word.empty()) {
        return std::nullopt;
    }
    if (!current_.empty()) {
        current_ += ' ';
    }
    current_ += word;
    if (is_boundary_char(word.back())) {
        std::string done = std::move(current_);
        current_.clear();
        ++completed_;
        return done;
    }
    return std::nullopt;
}

std::vector<std::string> SentenceSegmenter::split_sentences(const std::string& text) {
    std::vector<std::string> out;
    std::string current;
    const size_t n = text.size();
    for (size_t i = 0; i < n; ++i) {
        const char c = text[i];
        const bool at_break =
            is_boundary_char(c) &&
            (i + 1 == n || std::isspace(static_cast<unsigned char>(text[i + 1])));
        if (std::isspace(static_cast<unsigned char>(c)) && current.empty()) {
            continue; // trim leading whitespace
        }
        current += c;
        if (at_break) {
            out.push_back(std::move(current));
            current.clear();
        }
    }
    return out; // trailing fragment (no boundary) is not a sentence
}

// ---- log ----

std::vector<int> InterventionLog::injection_positions() const {
    std::vector<int> out;
    for (const auto& e : events) {
        if (e.type == "inject") {
            out.push_back(e.position);
        }
    }
    return out;
}

std::vector<int> InterventionLog::injection_sentences() const {
    std::vector<int> out;
    for (const auto& e : events) {
        if (e.type == "inject") {
            out.push_back(e.sentence_index);
        }
    }
    return out;
}

void save_intervention_log(const std::filesystem::path& path, const InterventionLog& log) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw RuntimeFailure("cannot write intervention log '" + path.string() + "'");
    }
    for (const auto& e : log.events) {
        ordered_json j;
        j["type"] = e.type;
        j["position"] = e.position;
        j["sentence_index"] = e.sentence_index;
        j["t"] = e.t;
        j["multiplier"] = e.multiplier;
        out << j.dump() << "\n";
    }
}

InterventionLog load_intervention_log(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw InputError("cannot open intervention log '" + path.string() + "'");
    }
    InterventionLog log;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        try {
            auto j = ordered_json::parse(line);
            InterventionEvent e;
            e.type = j.at("type").get<std::string>();
            e.position = j.at("position").get<int>();
            e.sentence_index = j.at("sentence_index").get<int>();
            e.t = j.at("t").get<int>();
            e.multiplier = j.at("multiplier").get<double>();
            if (e.type != "inject" && e.type != "amplify") {
                throw InputError("unknown event type '" + e.type + "'");
            }
            log.events.push_back(std::move(e));
        } catch (const nlohmann::json::exception& ex) {
            throw InputError(path.string() + ":" + std::to_string(line_no) + ": " + ex.what());
        } catch (const InputError& ex) {
            throw InputError(path.string() + ":" + std::to_string(line_no) + ": " + ex.what());
        }
    }
    return log;
}

// ---- the decoding loop ----

EeloResult generate_with_eelo(const Model& model, const std::vector<int>& prompt_ids,
                              const DecodeParams& params, const InterventionConfig& config) {
    config.validate();
    const auto& cfg = model.config();
    for (NeuronId n : config.neuron_set.neurons) {
        if (n.layer < 0 || n.layer >= cfg.num_layers || n.index < 0 || n.index >= cfg.mlp_dim) {
            throw InputError("neuron (" + std::to_string(n.layer) + ", " +
                             std::to_string(n.index) + ") outside model dimensions");
        }
    }
    if (config.trigger_token >= cfg.vocab_size) {
        throw InputError("trigger token outside the vocabulary");
    }
    if (static_cast<int>(prompt_ids.size()) > cfg.max_seq_len) {
        throw ContextOverflowError("prompt of " + std::to_string(prompt_ids.size()) +
                                   " tokens exceeds max_seq_len " +
                                   std::to_string(cfg.max_seq_len));
    }

    EeloResult result;
    auto& out = result.generation;
    out.prompt_len = static_cast<int>(prompt_ids.size());
    out.trace = ActivationTrace(cfg.num_layers, cfg.mlp_dim);

    TriggerState state;
    const ActivationHook hook = make_hook(config, state);
    DecoderState dec;
    std::mt19937_64 gen(params.seed);
    SentenceSegmenter segmenter;
    int pending_trigger_sentence = -1;

    const bool log_amplify = !config.neuron_set.neurons.empty();

    // One token through the model with schedule bookkeeping. The offset
    // advances before the step so this token sees its own distance from the
    // trigger; the trigger token itself goes through at t of the previous
    // trigger (or 0) and re-arms afterwards.
    auto consume = [&](int token, bool generated) {
        if (state.trigger_active) {
            state.t += 1;
        }
        const int pos = dec.position;
        const double mult = amplification_multiplier(config, state.t);
        auto step = forward_step(model, dec, token, hook);
        out.trace.push(token, step.tapped);
        if (log_amplify && mult != 1.0) {
            result.log.events.push_back(
                {"amplify", pos, state.sentence_index, state.t, mult});
        }
        if (generated && token == config.trigger_token) {
            state.trigger_active = true;
            state.t = 0;
        }
        return step.logits;
    };

    std::vector<float> logits;
    for (int id : prompt_ids) {
        logits = consume(id, false);
    }

    for (int produced = 0; produced < params.max_new_tokens; ++produced) {
        if (logits.empty() || dec.position >= cfg.max_seq_len) {
            break;
        }
        int next;
        bool injected = false;
        if (state.pending_wait) {
            next = config.trigger_token; // bypasses sampling
            state.pending_wait = false;
            injected = true;
        } else {
            next = sample_token(logits, params, gen);
        }
        out.token_ids.push_back(next);
        if (injected) {
            result.log.events.push_back(
                {"inject", dec.position, pending_trigger_sentence, 0, 1.0});
            pending_trigger_sentence = -1;
        }

        logits = consume(next, true);

        if (next == Tokenizer::eos_id) {
            break;
        }
        if (auto sentence = segmenter.push_word(model.tokenizer().token(next))) {
            const int completed_index = state.sentence_index;
            state.sentence_index += 1;
            if (should_force(state, *sentence, config)) {
                state.pending_wait = true;
                pending_trigger_sentence = completed_index;
                state.cooldown_remaining = config.cooldown_sentences;
            } else if (state.cooldown_remaining > 0) {
                state.cooldown_remaining -= 1;
            }
        }
    }

    out.text = model.tokenizer().decode(out.token_ids);
    return result;
}

std::vector<int> replay_oracle(const std::vector<std::string>& sentences,
                               const InterventionConfig& config) {
    std::vector<int> injections;
    TriggerState state;
    for (int i = 0; i < static_cast<int>(sentences.size()); ++i) {
        if (should_force(state, sentences[static_cast<size_t>(i)], config)) {
            injections.push_back(i);
            state.cooldown_remaining = config.cooldown_sentences;
        } else if (state.cooldown_remaining > 0) {
            state.cooldown_remaining -= 1;
        }
    }
    return injections;
}

} // namespace eelo
