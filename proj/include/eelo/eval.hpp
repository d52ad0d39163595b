#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "eelo/intervene.hpp"
#include "eelo/model.hpp"

namespace eelo {

struct BenchmarkItem {
    std::string id;
    std::string problem;
    std::string gold_answer;
};

struct GenerationRecord {
    std::string item_id;
    std::string text;    // generated text only, prompt excluded
    int token_count = 0; // generated tokens
    int word_count = 0;  // whitespace tokens of text
    int wait_count = 0;  // injected trigger tokens

    bool operator==(const GenerationRecord&) const = default;
};

struct ItemGrade {
    std::string item_id;
    bool answered = false; // an answer could be extracted at all
    std::string predicted; // empty when not answered
    bool correct = false;

    bool operator==(const ItemGrade&) const = default;
};

struct MetricsReport {
    std::string scenario = "Base";
    double accuracy = 0.0;        // percent
    double mean_length = 0.0;     // mean word count
    double reflection_rate = 0.0; // percent
    std::vector<ItemGrade> grades;        // sorted by item id
    std::vector<GenerationRecord> records; // same order as grades

    bool operator==(const MetricsReport&) const = default;
};

// Case-insensitive substring markers of self-checking behaviour.
std::vector<std::string> default_reflection_phrases();

// Line-delimited JSON {"id","problem","gold_answer"}; malformed or incomplete
// lines are reported with their 1-based line number.
std::vector<BenchmarkItem> load_benchmark(const std::filesystem::path& path);

// Content of the last \boxed{...} marker; otherwise the last whitespace token
// that is a bare number once surrounding punctuation is stripped.
std::optional<std::string> extract_answer(const std::string& text);

// Normalized string match: trim, collapse whitespace runs, lowercase, drop
// trailing zeros (then a bare dot) after a decimal point.
bool grade(const std::string& predicted, const std::string& gold);

// Percent of records whose text contains at least one phrase,
// case-insensitive. Empty records or phrase list is an error.
double reflection_rate(const std::vector<GenerationRecord>& records,
                       const std::vector<std::string>& phrases);

// One steered generation per item; grading and the three table metrics.
// Items run on up to `jobs` threads; results are identical for any job count
// (greedy decoding, one session per item, final stable sort by item id).
MetricsReport run_eval(const Model& model, const std::vector<BenchmarkItem>& benchmark,
                       const InterventionConfig& config, const DecodeParams& params,
                       const std::vector<std::string>& phrases = default_reflection_phrases(),
                       int jobs = 1, const std::string& scenario = "Base");

// The five standard rows, in report order: plain decoding, forcing only,
// constant amplification only, both, and forcing plus the analytic schedule
// exactly as configured in `eelo`.
std::vector<std::pair<std::string, InterventionConfig>>
table_scenarios(const InterventionConfig& eelo, double gamma = 1.4);

enum class ReportFormat { json, csv };

// json: array of report objects, loadable below. csv: header
// "scenario,accuracy,length,reflect", one row per report.
void emit_report(const std::vector<MetricsReport>& reports, ReportFormat format,
                 const std::filesystem::path& path);
std::vector<MetricsReport> load_report(const std::filesystem::path& path);

// csv: scenario,item,answered,predicted,correct
void emit_item_grades(const std::vector<MetricsReport>& reports,
                      const std::filesystem::path& path);

// csv: scenario,metric,value triples for plotting
void emit_figure_data(const std::vector<MetricsReport>& reports,
                      const std::filesystem::path& path);

} // namespace eelo
