#include "eelo/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "eelo/errors.hpp"

namespace eelo {

using nlohmann::ordered_json;

namespace {

std::string lowered(std::string s) {
    for (auto& c : s) {
        c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    }
    return s;
}

bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

int count_words(const std::string& text) {
    std::istringstream ss(text);
    std::string word;
    int n = 0;
    while (ss >> word) {
        ++n;
    }
    return n;
}

// [+-]? digits [. digits]?
bool is_plain_number(const std::string& s) {
    size_t i = 0;
    if (i < s.size() && (s[i] == '+' || s[i] == '-')) {
        ++i;
    }
    size_t digits = 0;
    while (i < s.size() && std::isdigit(static_cast<unsigned char>(s[i]))) {
        ++i;
        ++digits;
    }
    if (digits == 0) {
        return false;
    }
    if (i == s.size()) {
        return true;
    }
    if (s[i] != '.') {
        return false;
    }
    ++i;
    digits = 0;
    while (i < s.size() && std::isdigit(static_cast<unsigned char>(s[i]))) {
        ++i;
        ++digits;
    }
    return digits > 0 && i == s.size();
}

std::string strip_punct(std::string s) {
    const std::string cut = ".,:;!?()[]{}\"'";
    size_t b = 0;
    size_t e = s.size();
    while (b < e && cut.find(s[b]) != std::string::npos) {
        ++b;
    }
    while (e > b && cut.find(s[e - 1]) != std::string::npos) {
        --e;
    }
    return s.substr(b, e - b);
}

std::string normalize_answer(const std::string& raw) {
    // trim, collapse whitespace runs, lowercase
    std::string s;
    bool pending_gap = false;
    for (char c : raw) {
        if (is_space(c)) {
            pending_gap = !s.empty();
            continue;
        }
        if (pending_gap) {
            s += ' ';
            pending_gap = false;
        }
        s += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    }
    if (is_plain_number(s) && s.find('.') != std::string::npos) {
        while (!s.empty() && s.back() == '0') {
            s.pop_back();
        }
        if (!s.empty() && s.back() == '.') {
            s.pop_back();
        }
    }
    return s;
}

} // namespace

std::vector<std::string> default_reflection_phrases() {
    return {"let me double check", "wait", "verify"};
}

std::vector<BenchmarkItem> load_benchmark(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw InputError("cannot open benchmark '" + path.string() + "'");
    }
    std::vector<BenchmarkItem> items;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        try {
            auto j = ordered_json::parse(line);
            BenchmarkItem item;
            item.id = j.at("id").get<std::string>();
            item.problem = j.at("problem").get<std::string>();
            item.gold_answer = j.at("gold_answer").get<std::string>();
            if (item.problem.empty() || item.gold_answer.empty()) {
                throw InputError("empty problem or gold_answer");
            }
            items.push_back(std::move(item));
        } catch (const nlohmann::json::exception& ex) {
            throw InputError(path.string() + ":" + std::to_string(line_no) + ": " + ex.what());
        } catch (const InputError& ex) {
            throw InputError(path.string() + ":" + std::to_string(line_no) + ": " + ex.what());
        }
    }
    return items;
}

std::optional<std::string> extract_answer(const std::string& text) {
    const std::string marker = "\\boxed{";
    size_t last = std::string::npos;
    for (size_t pos = text.find(marker); pos != std::string::npos;
         pos = text.find(marker, pos + 1)) {
        last = pos;
    }
    if (last != std::string::npos) {
        int depth = 1;
        std::string content;
        for (size_t i = last + marker.size(); i < text.size(); ++i) {
            const char c = text[i];
            if (c == '{') {
                ++depth;
            } else if (c == '}') {
                if (--depth == 0) {
                    return content;
                }
            }
            content += c;
        }
        // unterminated box: fall back to the number scan
    }
    std::istringstream ss(text);
    std::string token;
    std::optional<std::string> found;
    while (ss >> token) {
        const std::string bare = strip_punct(token);
        if (is_plain_number(bare)) {
            found = bare;
        }
    }
    return found;
}

bool grade(const std::string& predicted, const std::string& gold) {
    return normalize_answer(predicted) == normalize_answer(gold);
}

double reflection_rate(const std::vector<GenerationRecord>& records,
                       const std::vector<std::string>& phrases) {
    if (records.empty()) {
        throw InputError("reflection rate over zero records");
    }
    if (phrases.empty()) {
        throw InputError("empty reflection phrase list");
    }
    std::vector<std::string> needles;
    for (const auto& p : phrases) {
        needles.push_back(lowered(p));
    }
    int hits = 0;
    for (const auto& rec : records) {
        const std::string hay = lowered(rec.text);
        for (const auto& needle : needles) {
            if (hay.find(needle) != std::string::npos) {
                ++hits;
                break;
            }
        }
    }
    return 100.0 * hits / static_cast<double>(records.size());
}

MetricsReport run_eval(const Model& model, const std::vector<BenchmarkItem>& benchmark,
                       const InterventionConfig& config, const DecodeParams& params,
                       const std::vector<std::string>& phrases, int jobs,
                       const std::string& scenario) {
    if (benchmark.empty()) {
        throw InputError("empty benchmark");
    }
    if (jobs < 1) {
        throw InputError("jobs must be >= 1");
    }
    config.validate();

    struct Slot {
        GenerationRecord record;
        ItemGrade item_grade;
        std::string error;
        bool input_error = false;
    };
    std::vector<Slot> slots(benchmark.size());
    std::atomic<size_t> cursor{0};

    auto evaluate_one = [&](size_t i) {
        const auto& item = benchmark[i];
        auto& slot = slots[i];
        try {
            std::vector<int> prompt{Tokenizer::bos_id};
            for (int id : model.tokenizer().encode(item.problem)) {
                prompt.push_back(id);
            }
            const EeloResult res = generate_with_eelo(model, prompt, params, config);

            slot.record.item_id = item.id;
            slot.record.text = res.generation.text;
            slot.record.token_count = static_cast<int>(res.generation.token_ids.size() -
                                                       res.generation.prompt_len);
            slot.record.word_count = count_words(res.generation.text);
            slot.record.wait_count = static_cast<int>(res.log.injection_positions().size());

            slot.item_grade.item_id = item.id;
            if (auto answer = extract_answer(res.generation.text)) {
                slot.item_grade.answered = true;
                slot.item_grade.predicted = *answer;
                slot.item_grade.correct = grade(*answer, item.gold_answer);
            }
        } catch (const InputError& ex) {
            slot.error = ex.what();
            slot.input_error = true;
        } catch (const std::exception& ex) {
            slot.error = ex.what();
        }
    };

    auto worker = [&]() {
        for (size_t i = cursor.fetch_add(1); i < benchmark.size(); i = cursor.fetch_add(1)) {
            evaluate_one(i);
        }
    };

    const int n_threads = std::min<int>(jobs, static_cast<int>(benchmark.size()));
    if (n_threads <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int i = 0; i < n_threads; ++i) {
            pool.emplace_back(worker);
        }
        for (auto& th : pool) {
            th.join();
        }
    }

    for (size_t i = 0; i < slots.size(); ++i) {
        if (!slots[i].error.empty()) {
            const std::string msg = "item '" + benchmark[i].id + "': " + slots[i].error;
            if (slots[i].input_error) {
                throw InputError(msg);
            }
            throw RuntimeFailure(msg);
        }
    }

    std::vector<size_t> order(slots.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        return slots[a].record.item_id < slots[b].record.item_id;
    });

    MetricsReport report;
    report.scenario = scenario;
    int correct = 0;
    double words = 0.0;
    for (size_t i : order) {
        report.grades.push_back(slots[i].item_grade);
        report.records.push_back(slots[i].record);
        correct += slots[i].item_grade.correct ? 1 : 0;
        words += slots[i].record.word_count;
    }
    report.accuracy = 100.0 * correct / static_cast<double>(benchmark.size());
    report.mean_length = words / static_cast<double>(benchmark.size());
    report.reflection_rate = reflection_rate(report.records, phrases);
    return report;
}

std::vector<std::pair<std::string, InterventionConfig>>
table_scenarios(const InterventionConfig& eelo, double gamma) {
    InterventionConfig base = eelo;
    base.forcing_enabled = false;
    base.amplification_enabled = false;

    InterventionConfig forcing = base;
    forcing.forcing_enabled = true;

    InterventionConfig constant = base;
    constant.amplification_enabled = true;
    constant.schedule = ConstantSchedule{gamma};

    InterventionConfig both = constant;
    both.forcing_enabled = true;

    InterventionConfig full = eelo;
    full.forcing_enabled = true;
    full.amplification_enabled = true;

    return {
        {"Base", base},
        {"Forcing Reflection", forcing},
        {"Constant Intervention", constant},
        {"Forcing & Constant", both},
        {"EELo-CoT", full},
    };
}

namespace {

ordered_json report_to_json(const MetricsReport& r) {
    ordered_json j;
    j["scenario"] = r.scenario;
    j["accuracy"] = r.accuracy;
    j["mean_length"] = r.mean_length;
    j["reflection_rate"] = r.reflection_rate;
    j["grades"] = ordered_json::array();
    for (const auto& g : r.grades) {
        ordered_json jg;
        jg["item_id"] = g.item_id;
        jg["answered"] = g.answered;
        jg["predicted"] = g.predicted;
        jg["correct"] = g.correct;
        j["grades"].push_back(std::move(jg));
    }
    j["records"] = ordered_json::array();
    for (const auto& rec : r.records) {
        ordered_json jr;
        jr["item_id"] = rec.item_id;
        jr["text"] = rec.text;
        jr["token_count"] = rec.token_count;
        jr["word_count"] = rec.word_count;
        jr["wait_count"] = rec.wait_count;
        j["records"].push_back(std::move(jr));
    }
    return j;
}

std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw RuntimeFailure("cannot write '" + path.string() + "'");
    }
    return out;
}

} // namespace

void emit_report(const std::vector<MetricsReport>& reports, ReportFormat format,
                 const std::filesystem::path& path) {
    auto out = open_out(path);
    if (format == ReportFormat::json) {
        ordered_json j = ordered_json::array();
        for (const auto& r : reports) {
            j.push_back(report_to_json(r));
        }
        out << j.dump(2) << "\n";
        return;
    }
    out << "scenario,accuracy,length,reflect\n" << std::setprecision(17);
    for (const auto& r : reports) {
        out << r.scenario << "," << r.accuracy << "," << r.mean_length << ","
            << r.reflection_rate << "\n";
    }
}

std::vector<MetricsReport> load_report(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw InputError("cannot open report '" + path.string() + "'");
    }
    ordered_json j;
    try {
        j = ordered_json::parse(in);
        std::vector<MetricsReport> reports;
        for (const auto& jr : j) {
            MetricsReport r;
            r.scenario = jr.at("scenario").get<std::string>();
            r.accuracy = jr.at("accuracy").get<double>();
            r.mean_length = jr.at("mean_length").get<double>();
            r.reflection_rate = jr.at("reflection_rate").get<double>();
            for (const auto& jg : jr.at("grades")) {
                ItemGrade g;
                g.item_id = jg.at("item_id").get<std::string>();
                g.answered = jg.at("answered").get<bool>();
                g.predicted = jg.at("predicted").get<std::string>();
                g.correct = jg.at("correct").get<bool>();
                r.grades.push_back(std::move(g));
            }
            for (const auto& jrec : jr.at("records")) {
                GenerationRecord rec;
                rec.item_id = jrec.at("item_id").get<std::string>();
                rec.text = jrec.at("text").get<std::string>();
                rec.token_count = jrec.at("token_count").get<int>();
                rec.word_count = jrec.at("word_count").get<int>();
                rec.wait_count = jrec.at("wait_count").get<int>();
                r.records.push_back(std::move(rec));
            }
            reports.push_back(std::move(r));
        }
        return reports;
    } catch (const nlohmann::json::exception& ex) {
        throw InputError("bad report '" + path.string() + "': " + ex.what());
    }
}

void emit_item_grades(const std::vector<MetricsReport>& reports,
                      const std::filesystem::path& path) {
    auto out = open_out(path);
    out << "scenario,item,answered,predicted,correct\n";
    for (const auto& r : reports) {
        for (const auto& g : r.grades) {
            out << r.scenario << "," << g.item_id << "," << (g.answered ? 1 : 0) << ","
                << g.predicted << "," << (g.correct ? 1 : 0) << "\n";
        }
    }
}

void emit_figure_data(const std::vector<MetricsReport>& reports,
                      const std::filesystem::path& path) {
    auto out = open_out(path);
    out << "scenario,metric,value\n" << std::setprecision(17);
    for (const auto& r : reports) {
        out << r.scenario << ",accuracy," << r.accuracy << "\n";
        out << r.scenario << ",length," << r.mean_length << "\n";
        out << r.scenario << ",reflect," << r.reflection_rate << "\n";
    }
}

} // namespace eelo
