#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "eelo/dynamics.hpp"
#include "eelo/model.hpp"
#include "eelo/probe.hpp"

namespace eelo {

struct ConstantSchedule {
    double gamma = 1.4;
};

struct AnalyticSchedule {
    FitCoefficients coeffs{0.17, 0.033, -0.997};
    double alpha = 4.0;
};

struct InterventionConfig {
    NeuronSet neuron_set;
    std::variant<ConstantSchedule, AnalyticSchedule> schedule = AnalyticSchedule{};
    int k_digits = 5;
    int cooldown_sentences = 4;
    bool forcing_enabled = true;
    bool amplification_enabled = true;
    int trigger_token = Tokenizer::wait_id;

    void validate() const;
};

struct TriggerState {
    int t = 0; // offset since the last trigger token; 0 = at/none
    bool trigger_active = false;
    int cooldown_remaining = 0;
    int sentence_index = 0; // completed sentences so far
    bool pending_wait = false;
};

// Count of characters in '0'..'9'.
int digit_count(const std::string& sentence);

// Decision at a sentence boundary: inject iff forcing is on, the cooldown has
// fully elapsed, and the just-completed sentence is digit-heavy enough.
bool should_force(const TriggerState& state, const std::string& last_sentence,
                  const InterventionConfig& config);

// Per-token multiplier. Analytic mode: 1 + α·f(t) for an active trigger
// (clamped to ≥ 1), 1 otherwise; constant mode: γ everywhere; 1 whenever
// amplification is disabled.
double amplification_multiplier(const InterventionConfig& config, int t);

// Transformer that scales exactly the configured neurons by the multiplier
// for the state's current offset. Reads `state` live at every call.
ActivationHook make_hook(const InterventionConfig& config, const TriggerState& state);

// Incremental sentence splitter over detokenized words. A word whose final
// character is one of . ! ? or newline closes the sentence (the decoder joins
// words with spaces, so a trailing boundary char is always followed by
// whitespace or end-of-text).
class SentenceSegmenter {
public:
    // returns the completed sentence when `word` closes one
    std::optional<std::string> push_word(const std::string& word);
    const std::string& partial() const { return current_; }
    int completed() const { return completed_; }

    static bool is_boundary_char(char c);
    // completed sentences of a whole text; a trailing fragment is dropped
    static std::vector<std::string> split_sentences(const std::string& text);

private:
    std::string current_;
    int completed_ = 0;
};

struct InterventionEvent {
    std::string type; // "inject" | "amplify"
    int position = 0;
    int sentence_index = 0;
    int t = 0;
    double multiplier = 1.0;
};

struct InterventionLog {
    std::vector<InterventionEvent> events;

    std::vector<int> injection_positions() const;
    std::vector<int> injection_sentences() const;
};

void save_intervention_log(const std::filesystem::path& path, const InterventionLog& log);
InterventionLog load_intervention_log(const std::filesystem::path& path);

struct EeloResult {
    Generation generation;
    InterventionLog log;
};

// The full decoding loop: scheduled amplification through the hook, digit
// triggered "wait" injection at sentence boundaries, cooldown bookkeeping.
EeloResult generate_with_eelo(const Model& model, const std::vector<int>& prompt_ids,
                              const DecodeParams& params, const InterventionConfig& config);

// Independent simulation of just the trigger/cooldown machine over an already
// segmented sentence stream; returns the indices of sentences whose completion
// fired an injection.
std::vector<int> replay_oracle(const std::vector<std::string>& sentences,
                               const InterventionConfig& config);

} // namespace eelo
